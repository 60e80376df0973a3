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

__all__ = ["ViewBenchmark"]

import logging
import time
import typing
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd

from .constants import ABLATION_NUM_GAUSSIANS, ABLATION_SESA_RATES, BENCH_VIEW_COUNTS
from .decoder import UniGSModel
from .enums import Split
from .fitting import evaluate_views
from .scene import Scene, synth_scene
from .signals import SignalArtifact
from .structs import RunConfig
from .training import Trainer


class ViewBenchmark:
    """Measure the reconstruction cost against the number of input views,
    and sweep the ablation knobs of the tiny training.

    Parameters
    ----------
    log : `logging.Logger`
        A logger.

    Attributes
    ----------
    log : `logging.Logger`
        A logger.
    signals : `dict`
        Signal of the written files.
    """

    COLUMNS = [
        "num_views",
        "seconds",
        "encoder_seconds",
        "decoder_seconds",
        "query_buffer_nbytes",
        "kv_nbytes",
        "num_gaussians",
    ]

    def __init__(self, log: logging.Logger) -> None:
        self.log = log.getChild(type(self).__name__)

        self.signals = {"artifact": SignalArtifact()}

    def bench_views(
        self,
        config: RunConfig,
        model: UniGSModel | None = None,
        view_counts: typing.Sequence[int] = BENCH_VIEW_COUNTS,
        scene: Scene | None = None,
    ) -> pd.DataFrame:
        """Reconstruct one scene from a growing number of its views.

        Parameters
        ----------
        config : `RunConfig`
            Configuration.
        model : `UniGSModel` or None, optional
            Model. None builds one with the seeded initial weights. (the
            default is None)
        view_counts : `list` [`int`], optional
            Numbers of the input views. (the default is BENCH_VIEW_COUNTS)
        scene : `Scene` or None, optional
            Scene with at least max(view_counts) input views. None
            synthesizes one. (the default is None)

        Returns
        -------
        `pandas.DataFrame`
            One row per view count with the columns in COLUMNS.

        Raises
        ------
        `ValueError`
            When the scene has fewer input views than requested.
        """

        max_views = max(view_counts)
        if scene is None:
            scene = synth_scene(config.kind, max_views, config.resolution, config.resolution, config.seed)

        images = scene.images(Split.Input)
        cameras = scene.cameras(Split.Input)
        if len(cameras) < max_views:
            raise ValueError(f"Scene {scene.name} has {len(cameras)} input views, {max_views} are needed.")

        if model is None:
            model = UniGSModel(config.decoder, self.log)

        rows = list()
        for num_views in view_counts:
            time_start = time.perf_counter()
            gaussians = model.reconstruct(images[:num_views], cameras[:num_views])
            seconds = time.perf_counter() - time_start

            stats = model.last_stats
            rows.append(
                (
                    num_views,
                    seconds,
                    stats.encoder_seconds,
                    stats.decoder_seconds,
                    stats.query_buffer_nbytes,
                    stats.kv_nbytes,
                    gaussians.num_gaussians,
                )
            )

            self.log.info(
                f"{num_views} views: {seconds:.3f} s, query buffer {stats.query_buffer_nbytes} bytes, "
                f"{gaussians.num_gaussians} Gaussians."
            )

        return pd.DataFrame(rows, columns=self.COLUMNS)

    def heldout_psnr(self, model: UniGSModel, scenes: typing.Sequence[Scene]) -> float:
        """Mean held-out PSNR of the reconstructions from the input views.

        Parameters
        ----------
        model : `UniGSModel`
            Model.
        scenes : `list` [`Scene`]
            Scenes. A scene without the held-out views is evaluated at its
            input views.

        Returns
        -------
        `float`
            Mean PSNR in dB.
        """

        values = list()
        for scene in scenes:
            gaussians = model.reconstruct(
                scene.images(Split.Input), scene.cameras(Split.Input), masks=scene.masks(Split.Input)
            )
            views = scene.select(Split.HeldOut) or scene.select(Split.Input)
            metrics, _ = evaluate_views(gaussians, views, scene.name)
            values.extend(row.psnr for row in metrics)

        return float(np.mean(values))

    def ablation_sweep(self, scenes: typing.Sequence[Scene], config: RunConfig) -> pd.DataFrame:
        """Train the tiny model once per ablation setting with the same seed
        and scenes, and compare the held-out PSNR.

        The Gaussian count takes the values in ABLATION_NUM_GAUSSIANS and the
        self-attention rate the values in ABLATION_SESA_RATES, one knob at a
        time from the configured decoder.

        Parameters
        ----------
        scenes : `list` [`Scene`]
            Scenes.
        config : `RunConfig`
            Configuration. The resume checkpoint is ignored.

        Returns
        -------
        `pandas.DataFrame`
            Table with the columns knob, value, heldout_psnr, and
            final_loss.
        """

        settings = [("num_gaussians", value) for value in ABLATION_NUM_GAUSSIANS] + [
            ("sesa_rate", value) for value in ABLATION_SESA_RATES
        ]

        rows = list()
        for knob, value in settings:
            run_config = replace(config, decoder=replace(config.decoder, **{knob: value}), resume=None)

            trainer = Trainer(self.log)
            result = trainer.train_tiny(scenes, run_config)
            heldout = self.heldout_psnr(trainer.model, scenes)

            rows.append((knob, value, heldout, result.losses[-1] if result.losses else float("nan")))
            self.log.info(f"Ablation {knob}={value}: held-out PSNR {heldout:.2f} dB.")

        return pd.DataFrame(rows, columns=["knob", "value", "heldout_psnr", "final_loss"])

    def write_table(self, table: pd.DataFrame, path: Path | str) -> Path:
        """Write a table as a CSV file.

        Parameters
        ----------
        table : `pandas.DataFrame`
            Table.
        path : `pathlib.Path` or `str`
            CSV file.

        Returns
        -------
        `pathlib.Path`
            Written file.
        """

        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(path, index=False)

        self.signals["artifact"].path.emit(str(path))
        self.log.info(f"Table is written to {path}.")

        return path
