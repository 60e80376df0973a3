# This file is part of ts_unigs.
#
# Developed for the Vera Rubin Observatory Systems.
# This product includes software developed by the LSST Project
# (https://www.lsst.org).
# See the COPYRIGHT file at the top-level directory of this distribution
# for details of code ownership.
#
# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU General Public License for more details.
#
# You should have received a copy of the GNU General Public License
# along with this program.  If not, see <https://www.gnu.org/licenses/>.

__all__ = ["TrainResult", "Trainer", "load_model"]

import logging
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .decoder import UniGSModel
from .enums import Split
from .gaussian_model import activate_params
from .kernel import Tape, backward, ops
from .losses import psnr, total_loss
from .optimizer import Adam, ParamGroup
from .renderer import rasterize
from .scene import Scene
from .signals import SignalArtifact, SignalEpoch, SignalProgress
from .structs import DecoderConfig, RunConfig


@dataclass
class TrainResult:
    """Result of the tiny training."""

    # Global step after the training
    step: int

    # Loss of each step of this run
    losses: list[float] = field(default_factory=list)

    # Mean training PSNR of each epoch of this run
    epoch_psnr: list[float] = field(default_factory=list)

    # Written checkpoint
    checkpoint: Path | None = None


def load_model(path: Path | str, log: logging.Logger) -> UniGSModel:
    """Build the model of a checkpoint.

    Parameters
    ----------
    path : `pathlib.Path` or `str`
        Checkpoint file.
    log : `logging.Logger`
        A logger.

    Returns
    -------
    `UniGSModel`
        Model with the checkpoint weights.
    """

    checkpoint = load_checkpoint(path)

    model = UniGSModel(DecoderConfig.from_dict(checkpoint.config), log)
    model.load_state_dict(checkpoint.weights)

    return model


class Trainer:
    """Train all the model weights end to end through the renderer.

    Parameters
    ----------
    log : `logging.Logger`
        A logger.

    Attributes
    ----------
    log : `logging.Logger`
        A logger.
    signals : `dict`
        Signals of the step, the epoch metrics, and the written files.
    model : `UniGSModel` or None
        Model of the last training.
    optimizer : `Adam` or None
        Optimizer of the last training.
    """

    def __init__(self, log: logging.Logger) -> None:
        self.log = log.getChild(type(self).__name__)

        self.signals = {
            "progress": SignalProgress(),
            "epoch": SignalEpoch(),
            "artifact": SignalArtifact(),
        }

        self.model: UniGSModel | None = None
        self.optimizer: Adam | None = None

    def setup(self, config: RunConfig) -> int:
        """Build the model and the optimizer, and load the checkpoint to
        resume from.

        Parameters
        ----------
        config : `RunConfig`
            Configuration.

        Returns
        -------
        `int`
            Global step to start from.
        """

        self.model = UniGSModel(config.decoder, self.log)
        parameters = {
            name: parameter for name, parameter in self.model.named_parameters() if parameter.requires_grad
        }
        self.optimizer = Adam([ParamGroup("model", parameters, config.learning_rate)])

        if config.resume is None:
            return 0

        checkpoint = load_checkpoint(config.resume)
        self.model.load_state_dict(checkpoint.weights)
        self.optimizer.load_state_dict(checkpoint.optimizer)

        self.log.info(f"Resume from {config.resume} at step {checkpoint.step}.")
        return checkpoint.step

    def train_step(self, scene: Scene, config: RunConfig, step: int) -> tuple[float, float]:
        """Reconstruct one scene from its input views, render the same views,
        and update the weights.

        Parameters
        ----------
        scene : `Scene`
            Scene.
        config : `RunConfig`
            Configuration.
        step : `int`
            Global step, used in the diagnostics.

        Returns
        -------
        loss : `float`
            Loss of the step.
        psnr : `float`
            Mean PSNR of the rendered input views before the update.

        Raises
        ------
        `RuntimeError`
            When the loss or a gradient is not finite.
        """

        # The held-out views are never supervised
        views = scene.select(Split.Input)

        with Tape() as tape:
            raw = self.model(
                scene.images(Split.Input), scene.cameras(Split.Input), masks=scene.masks(Split.Input)
            )
            gaussians = activate_params(raw)

            renders = [rasterize(gaussians, view.camera) for view in views]
            losses = [total_loss(rendered, view.image, config.loss) for rendered, view in zip(renders, views)]
            loss = ops.mean(ops.stack(losses))

        value = loss.item()
        gradients = backward(tape, loss)
        if not (np.isfinite(value) and gradients.is_finite()):
            self.log.error(f"Training diverged at step {step} on {scene.name} (loss {value}).")
            raise RuntimeError(f"Loss diverged at step {step}: {value}.")

        self.optimizer.step(gradients)

        mean_psnr = float(np.mean([psnr(rendered, view.image) for rendered, view in zip(renders, views)]))
        return value, mean_psnr

    def train_tiny(
        self,
        scenes: typing.Sequence[Scene],
        config: RunConfig,
        checkpoint_path: Path | None = None,
    ) -> TrainResult:
        """Overfit the model to a few scenes.

        The step k trains on the scene k modulo the scene count, so an epoch
        is one pass over the scenes and a resumed run continues the same
        schedule.

        Parameters
        ----------
        scenes : `list` [`Scene`]
            Scenes.
        config : `RunConfig`
            Configuration. The iterations count the steps of this run.
        checkpoint_path : `pathlib.Path` or None, optional
            Checkpoint to write at the end. (the default is None)

        Returns
        -------
        `TrainResult`
            Result.

        Raises
        ------
        `ValueError`
            When there is no scene.
        `RuntimeError`
            When the loss or a gradient is not finite.
        """

        if len(scenes) == 0:
            raise ValueError("At least one scene is needed to train.")

        start = self.setup(config)
        num_scene = len(scenes)

        self.log.info(
            f"Train {self.model.num_parameters()} weights on {num_scene} scenes "
            f"for {config.iterations} steps."
        )

        result = TrainResult(step=start)
        epoch_values: list[float] = list()
        for step in range(start, start + config.iterations):
            value, step_psnr = self.train_step(scenes[step % num_scene], config, step)

            result.losses.append(value)
            result.step = step + 1
            epoch_values.append(step_psnr)

            self.signals["progress"].step.emit(step, value)
            self.log.debug(f"Step {step}: loss {value:.6f}, PSNR {step_psnr:.2f} dB.")

            if ((step + 1) % num_scene == 0) or (step + 1 == start + config.iterations):
                epoch = step // num_scene
                epoch_psnr = float(np.mean(epoch_values))
                epoch_values = list()

                result.epoch_psnr.append(epoch_psnr)
                self.signals["epoch"].psnr.emit(epoch, epoch_psnr)
                self.log.info(f"Epoch {epoch}: train PSNR {epoch_psnr:.2f} dB.")

        if checkpoint_path is not None:
            save_checkpoint(
                checkpoint_path,
                Checkpoint(
                    weights=self.model.state_dict(),
                    optimizer=self.optimizer.state_dict(),
                    step=result.step,
                    config=config.decoder.to_dict(),
                ),
            )
            result.checkpoint = checkpoint_path

            self.signals["artifact"].path.emit(str(checkpoint_path))
            self.log.info(f"Checkpoint is written to {checkpoint_path}.")

        return result
