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

import logging
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from pytestqt.qtbot import QtBot

from lsst.ts.unigs import (
    LossConfig,
    RunConfig,
    Scene,
    SceneFitter,
    SceneKind,
    Split,
    activate_params,
    evaluate_views,
    load_ply,
    synth_scene,
)

TIMEOUT = 1000


@pytest.fixture(scope="module")
def scene() -> Scene:
    return synth_scene(SceneKind.Spheres3, 2, 16, 16, 1, num_heldout=1)


@pytest.fixture
def fitter() -> SceneFitter:
    return SceneFitter(logging.getLogger())


def _config(**kwargs) -> RunConfig:
    values = dict(iterations=40, learning_rate=2e-4, num_fit_gaussians=64, seed=3)
    values.update(kwargs)
    return RunConfig(**values)


def test_initialize(fitter: SceneFitter, scene: Scene) -> None:
    raw = fitter.initialize(scene, _config())

    assert raw.num_gaussians == 64
    assert all(tensor.requires_grad for tensor in raw.tensors())

    # In front of every input camera
    for camera in scene.cameras(Split.Input):
        depths = raw.centers.data @ camera.rotation.T + camera.translation
        assert (depths[:, 2] > 0.0).all()


def test_fit_scene(tmp_path: Path, fitter: SceneFitter, scene: Scene) -> None:
    result = fitter.fit_scene(scene, _config(), directory=tmp_path)

    assert len(result.losses) == 40
    assert np.isfinite(result.losses).all()
    assert result.final_loss < result.initial_loss

    # Evaluated on the held-out view
    assert [row.view for row in result.metrics] == ["002.png"]
    assert result.gaussians.num_gaussians == 64

    assert tmp_path / "point_cloud.ply" in result.artifacts
    assert tmp_path / "render_002.png" in result.artifacts
    np.testing.assert_array_equal(load_ply(tmp_path / "point_cloud.ply").centers.data.shape, (64, 3))

    table = pd.read_csv(tmp_path / "metrics.csv")
    assert list(table.columns) == ["scene", "view", "psnr", "ssim", "mse"]
    assert table["psnr"][0] == pytest.approx(result.metrics[0].psnr)


def test_fit_scene_deterministic(fitter: SceneFitter, scene: Scene) -> None:
    first = fitter.fit_scene(scene, _config(iterations=3))
    second = fitter.fit_scene(scene, _config(iterations=3))

    assert first.losses == second.losses
    assert first.artifacts == []


def test_fit_scene_signals(qtbot: QtBot, fitter: SceneFitter, scene: Scene) -> None:
    signal = fitter.signals["progress"].step
    with qtbot.waitSignal(signal, timeout=TIMEOUT, check_params_cb=lambda step, _: step == 1):
        fitter.fit_scene(scene, _config(iterations=2))


def test_fit_scene_diverged(fitter: SceneFitter, scene: Scene) -> None:
    config = _config(iterations=2, loss=LossConfig(perceptual_hook=lambda pred, gt: np.nan))

    with pytest.raises(RuntimeError):
        fitter.fit_scene(scene, config)


def test_evaluate_views(scene: Scene) -> None:
    metrics, artifacts = evaluate_views(activate_params(scene.gaussians), scene.views, scene.name)

    assert len(metrics) == len(scene.views)
    assert artifacts == []

    # The ground truth renders its own images
    for row in metrics:
        assert row.scene == scene.name
        assert row.mse == pytest.approx(0.0, abs=1e-12)
        assert row.ssim == pytest.approx(1.0, abs=1e-6)


def test_fit_scene_zero_iterations(fitter: SceneFitter, scene: Scene) -> None:
    result = fitter.fit_scene(scene, _config(iterations=0))

    assert result.losses == []
    assert result.final_loss == result.initial_loss

    initial = fitter.initialize(scene, _config())
    np.testing.assert_array_equal(result.raw.centers.data, initial.centers.data)
