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

__all__ = ["FitResult", "evaluate_views", "SceneFitter"]

import logging
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import estimate_look_at
from .constants import FIT_LR_SCALE
from .decoder import init_random_in_cov
from .enums import Split
from .gaussian_model import GaussianSet, RawGaussianParams, activate_params, save_ply
from .io_utils import write_png
from .kernel import Tape, backward
from .losses import MetricRow, mse_loss, psnr, ssim, total_loss, write_metric_report
from .optimizer import Adam, ParamGroup
from .renderer import rasterize
from .scene import Scene, SceneView
from .signals import SignalArtifact, SignalProgress
from .structs import LossConfig, RunConfig


@dataclass
class FitResult:
    """Result of the per-scene fitting."""

    # Optimized raw parameters
    raw: RawGaussianParams

    # Mean loss over the input views before and after the optimization
    initial_loss: float
    final_loss: float

    # Loss of each step
    losses: list[float] = field(default_factory=list)

    # Metrics of the evaluated views
    metrics: list[MetricRow] = field(default_factory=list)

    # Written files
    artifacts: list[Path] = field(default_factory=list)

    @property
    def gaussians(self) -> GaussianSet:
        return activate_params(self.raw)


def evaluate_views(
    gaussians: GaussianSet,
    views: typing.Sequence[SceneView],
    scene_name: str,
    directory: Path | None = None,
) -> tuple[list[MetricRow], list[Path]]:
    """Render the Gaussians at the views and compare with the images.

    Parameters
    ----------
    gaussians : `GaussianSet`
        Gaussians.
    views : `list` [`SceneView`]
        Views.
    scene_name : `str`
        Name of the scene in the metric rows.
    directory : `pathlib.Path` or None, optional
        Directory to write the renders as "render_<view>.png". (the default
        is None)

    Returns
    -------
    metrics : `list` [`MetricRow`]
        Metrics of each view.
    artifacts : `list` [`pathlib.Path`]
        Written files.
    """

    metrics = list()
    artifacts = list()
    for view in views:
        rendered = rasterize(gaussians, view.camera)
        metrics.append(
            MetricRow(
                scene=scene_name,
                view=view.name,
                psnr=psnr(rendered, view.image),
                ssim=ssim(rendered, view.image),
                mse=mse_loss(rendered, view.image).item(),
            )
        )

        if directory is not None:
            path = directory / f"render_{view.name}"
            write_png(path, rendered.rgb.data)
            artifacts.append(path)

    return metrics, artifacts


class SceneFitter:
    """Optimize the Gaussians of one scene through the renderer.

    Parameters
    ----------
    log : `logging.Logger`
        A logger.

    Attributes
    ----------
    log : `logging.Logger`
        A logger.
    signals : `dict`
        Signals of the progress and the written files.
    """

    def __init__(self, log: logging.Logger) -> None:
        self.log = log.getChild(type(self).__name__)

        self.signals = {
            "progress": SignalProgress(),
            "artifact": SignalArtifact(),
        }

    def initialize(self, scene: Scene, config: RunConfig) -> RawGaussianParams:
        """Sample the initial Gaussians in the cone of vision of the input
        views.

        Parameters
        ----------
        scene : `Scene`
            Scene.
        config : `RunConfig`
            Configuration.

        Returns
        -------
        `RawGaussianParams`
            Raw parameters that require the gradient.
        """

        cameras = scene.cameras(Split.Input)
        raw, _ = init_random_in_cov(
            cameras,
            config.num_fit_gaussians,
            config.seed,
            1,
            box_center=estimate_look_at(cameras, default_depth=config.decoder.init_depth),
            half_extent=config.decoder.init_box_half_extent,
        )

        return RawGaussianParams.from_arrays(*(tensor.data for tensor in raw.tensors()), requires_grad=True)

    def _mean_loss(
        self, raw: RawGaussianParams, views: typing.Sequence[SceneView], config: LossConfig
    ) -> float:
        gaussians = activate_params(raw)
        losses = [total_loss(rasterize(gaussians, view.camera), view.image, config).item() for view in views]
        return float(np.mean(losses))

    def fit_scene(self, scene: Scene, config: RunConfig, directory: Path | None = None) -> FitResult:
        """Fit the Gaussians to the input views of the scene.

        Each step renders one input view drawn by the seeded generator and
        applies one Adam update with the per-field learning rates.

        Parameters
        ----------
        scene : `Scene`
            Scene.
        config : `RunConfig`
            Configuration. The iterations, learning rate, seed, Gaussian
            count, and loss are used.
        directory : `pathlib.Path` or None, optional
            Directory to write "point_cloud.ply", the renders, and
            "metrics.csv". (the default is None)

        Returns
        -------
        `FitResult`
            Result. The metrics are of the held-out views, or of the input
            views if the scene has no held-out view.

        Raises
        ------
        `RuntimeError`
            When the loss or a gradient is not finite.
        """

        raw = self.initialize(scene, config)
        views = scene.select(Split.Input)

        optimizer = Adam(
            [
                ParamGroup(
                    tensor.name, {tensor.name: tensor}, config.learning_rate * FIT_LR_SCALE[tensor.name]
                )
                for tensor in raw.tensors()
            ]
        )

        initial_loss = self._mean_loss(raw, views, config.loss)
        self.log.info(
            f"Fit {scene.name}: {raw.num_gaussians} Gaussians, {len(views)} input views, "
            f"{config.iterations} steps, initial loss {initial_loss:.6f}."
        )

        rng = np.random.default_rng(config.seed)
        losses = list()
        for step in range(config.iterations):
            view = views[int(rng.integers(len(views)))]

            with Tape() as tape:
                loss = total_loss(rasterize(activate_params(raw), view.camera), view.image, config.loss)

            value = loss.item()
            gradients = backward(tape, loss)
            if not (np.isfinite(value) and gradients.is_finite()):
                self.log.error(f"Fit of {scene.name} diverged at step {step} (loss {value}).")
                raise RuntimeError(f"Loss diverged at step {step}: {value}.")

            optimizer.step(gradients)

            losses.append(value)
            self.signals["progress"].step.emit(step, value)
            self.log.debug(f"Step {step}: loss {value:.6f}.")

        final_loss = self._mean_loss(raw, views, config.loss)

        heldout = scene.select(Split.HeldOut) or views
        metrics, artifacts = evaluate_views(activate_params(raw), heldout, scene.name, directory=directory)

        if directory is not None:
            ply_path = directory / "point_cloud.ply"
            save_ply(ply_path, raw)
            artifacts.append(ply_path)

            csv_path = directory / "metrics.csv"
            write_metric_report(metrics, csv_path)
            artifacts.append(csv_path)

            for path in artifacts:
                self.signals["artifact"].path.emit(str(path))

        mean_psnr = float(np.mean([row.psnr for row in metrics]))
        self.log.info(f"Fit {scene.name}: final loss {final_loss:.6f}, evaluation PSNR {mean_psnr:.2f} dB.")

        return FitResult(
            raw=raw,
            initial_loss=initial_loss,
            final_loss=final_loss,
            losses=losses,
            metrics=metrics,
            artifacts=artifacts,
        )
