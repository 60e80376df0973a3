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

import asyncio
import functools
import logging
import shutil
from pathlib import Path

import pandas as pd
import pytest

from lsst.ts.unigs import (
    CheckRunner,
    DecoderConfig,
    FaultMode,
    RunConfig,
    RunMode,
    SceneKind,
    load_scene,
    synth_scene,
)
from lsst.ts.unigs import application
from lsst.ts.unigs.application import check_arguments, parse_run_config, run

DECODER = DecoderConfig(num_gaussians=16, hidden=8, num_layers=1, num_samples=1, sesa_rate=0.25, ffn_width=16)


@pytest.fixture
def log() -> logging.Logger:
    return logging.getLogger()


def _config(tmp_path: Path, mode: RunMode, **kwargs) -> RunConfig:
    values = dict(
        mode=mode,
        output_dir=tmp_path / "out",
        iterations=2,
        learning_rate=1e-3,
        num_views=2,
        num_heldout=1,
        resolution=16,
        num_fit_gaussians=32,
        num_scenes=1,
        decoder=DECODER,
    )
    values.update(kwargs)
    return RunConfig(**values)


@pytest.mark.asyncio
async def test_run_unigs() -> None:
    # Make sure this application exists
    application_name = "run_unigs"
    exe_path = shutil.which(application_name)

    assert exe_path is not None

    # Run the process and get the standard output
    process = await asyncio.create_subprocess_exec(
        application_name,
        "-h",
        stdout=asyncio.subprocess.PIPE,
        stderr=asyncio.subprocess.PIPE,
    )

    stdout, _ = await process.communicate()

    # If there is the error, the result will be empty
    assert stdout.decode() != ""


@pytest.mark.asyncio
async def test_run_unigs_bad_verb() -> None:
    process = await asyncio.create_subprocess_exec(
        "run_unigs",
        "teleport",
        stdout=asyncio.subprocess.PIPE,
        stderr=asyncio.subprocess.PIPE,
    )

    _, stderr = await process.communicate()

    assert process.returncode == 1
    assert "must be one of" in stderr.decode()


def test_check_arguments() -> None:
    # Test the case with no arguments
    with pytest.raises(ValueError):
        check_arguments([])

    # Test the case with wrong argument
    with pytest.raises(ValueError):
        check_arguments(["wrong_argument"])

    # Test the case with two arguments
    with pytest.raises(ValueError):
        check_arguments(["fit", "check"])

    # Test the case with the correct arguments
    assert check_arguments(["train-tiny"]) == RunMode.TrainTiny


def test_parse_run_config_default() -> None:
    config = parse_run_config(RunMode.Fit, dict())

    assert config.mode == RunMode.Fit
    assert config.iterations == 1500
    assert config.decoder == DecoderConfig.desk_scale()


def test_parse_run_config(tmp_path: Path) -> None:
    config_file = tmp_path / "model.yaml"
    config_file.write_text("N: 64\nC: 16\ninit_strategy: CoarsePerPixel\n")

    config = parse_run_config(
        RunMode.Check,
        {
            "scene": "scenes/a",
            "out": str(tmp_path),
            "views": "3",
            "n-gaussians": "100",
            "iters": "7",
            "lr": "0.01",
            "seed": "5",
            "kind": "cube",
            "config": str(config_file),
            "fault": "softmax-axis",
            "ablation": True,
        },
    )

    assert config.scene_dir == Path("scenes/a")
    assert config.output_dir == tmp_path
    assert (config.num_views, config.iterations, config.seed) == (3, 7, 5)
    assert config.learning_rate == pytest.approx(0.01)
    assert config.kind == SceneKind.Cube
    assert config.fault == FaultMode.SoftmaxAxis
    assert config.is_ablation

    # The option overrides the configuration file
    assert config.num_fit_gaussians == 100
    assert (config.decoder.num_gaussians, config.decoder.hidden, config.decoder.seed) == (100, 16, 5)


@pytest.mark.parametrize(
    "values",
    [
        {"iters": "many"},
        {"lr": "-1"},
        {"kind": "torus"},
        {"fault": "everything"},
    ],
)
def test_parse_run_config_invalid(values: dict) -> None:
    with pytest.raises(ValueError):
        parse_run_config(RunMode.Fit, values)


def test_parse_run_config_missing_file(tmp_path: Path) -> None:
    with pytest.raises(FileNotFoundError):
        parse_run_config(RunMode.Fit, {"config": str(tmp_path / "none.yaml")})


def test_run_synth(tmp_path: Path, log: logging.Logger) -> None:
    assert run(_config(tmp_path, RunMode.Synth, scene_dir=tmp_path / "scene"), log) == 0

    scene = load_scene(tmp_path / "scene")
    assert len(scene.views) == 3
    assert scene.gaussians is not None


def test_run_fit_and_render(tmp_path: Path, log: logging.Logger) -> None:
    synth_scene(SceneKind.Spheres3, 2, 16, 16, 0, directory=tmp_path / "scene", num_heldout=1)

    config = _config(tmp_path, RunMode.Fit, scene_dir=tmp_path / "scene")
    assert run(config, log) == 0

    ply = tmp_path / "out" / "point_cloud.ply"
    assert ply.is_file()
    assert (tmp_path / "out" / "metrics.csv").is_file()

    render = _config(
        tmp_path, RunMode.Render, scene_dir=tmp_path / "scene", output_dir=tmp_path / "render", ply=ply
    )
    assert run(render, log) == 0

    table = pd.read_csv(tmp_path / "render" / "metrics.csv")
    assert len(table) == 3


def test_run_render_without_source(tmp_path: Path, log: logging.Logger) -> None:
    assert run(_config(tmp_path, RunMode.Render), log) == 1


def test_run_train_tiny_and_bench(tmp_path: Path, log: logging.Logger) -> None:
    checkpoint = tmp_path / "weights.npz"
    assert run(_config(tmp_path, RunMode.TrainTiny, checkpoint=checkpoint), log) == 0
    assert checkpoint.is_file()

    assert run(_config(tmp_path, RunMode.Render, checkpoint=checkpoint), log) == 0

    bench = _config(tmp_path, RunMode.Bench, checkpoint=checkpoint, num_views=8)
    assert run(bench, log) == 0

    table = pd.read_csv(tmp_path / "out" / "bench_views.csv")
    assert table["num_views"].tolist() == [1, 2, 4, 6, 8]


def test_run_check_fault(tmp_path: Path, log: logging.Logger, monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setattr(application, "CheckRunner", functools.partial(CheckRunner, num_instances=3))

    # The injected fault fails the run
    assert run(_config(tmp_path, RunMode.Check, fault=FaultMode.SoftmaxAxis), log) == 1

    table = pd.read_csv(tmp_path / "out" / "checks.csv")
    assert not table.set_index("name")["passed"]["softmax_normalization"]
