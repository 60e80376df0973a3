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

import json
from pathlib import Path

import numpy as np
import pytest

from lsst.ts.unigs import (
    Camera,
    Scene,
    SceneKind,
    SceneView,
    Split,
    load_scene,
    save_scene,
    synth_scene,
    write_png,
)


@pytest.fixture(scope="module")
def scene() -> Scene:
    return synth_scene(SceneKind.Spheres3, 3, 16, 20, 4, num_heldout=2)


def _write_view(directory: Path, name: str, size: tuple[int, int] = (4, 6)) -> None:
    write_png(directory / name, np.full((3,) + size, 0.5))


def _entry(name: str, **kwargs) -> dict:
    entry = {"image": name, "K": np.eye(3).tolist(), "w2c": np.eye(4).tolist()}
    entry.update(kwargs)
    return entry


def test_synth_scene(scene: Scene) -> None:
    assert scene.name == "spheres3_4"
    assert (scene.height, scene.width) == (16, 20)
    assert len(scene.select(Split.Input)) == 3
    assert len(scene.select(Split.HeldOut)) == 2

    assert scene.images().shape == (3, 3, 16, 20)
    assert scene.masks(Split.HeldOut).shape == (2, 16, 20)
    assert scene.masks().any()

    # Expressed in the frame of the first input view
    np.testing.assert_array_equal(scene.cameras()[0].w2c, np.eye(4))
    for camera in scene.cameras() + scene.cameras(Split.HeldOut):
        assert np.linalg.norm(camera.center) == pytest.approx(0.0, abs=1e-9) or np.linalg.norm(
            camera.center - np.array([0.0, 0.0, 2.5])
        ) == pytest.approx(2.5, abs=1e-9)

    # The object sits in front of the first camera
    assert scene.gaussians.centers.data[:, 2].mean() == pytest.approx(2.5, abs=0.3)


def test_synth_scene_float32(scene: Scene) -> None:
    for tensor in scene.gaussians.tensors():
        np.testing.assert_array_equal(tensor.data, tensor.data.astype(np.float32))


@pytest.mark.parametrize("kind", list(SceneKind))
def test_synth_scene_kinds(kind: SceneKind) -> None:
    scene = synth_scene(kind, 2, 8, 8, 0)

    assert scene.gaussians.num_gaussians > 0
    assert (scene.images() >= 0.0).all() and (scene.images() <= 1.0).all()


def test_synth_scene_deterministic() -> None:
    first = synth_scene(SceneKind.RandomGaussians, 2, 8, 8, 3)
    second = synth_scene(SceneKind.RandomGaussians, 2, 8, 8, 3)

    np.testing.assert_array_equal(first.images(), second.images())


def test_synth_scene_invalid() -> None:
    with pytest.raises(ValueError):
        synth_scene(SceneKind.Cube, 0, 8, 8, 0)

    with pytest.raises(ValueError):
        synth_scene(SceneKind.Cube, 2, 0, 8, 0)


def test_scene_invalid() -> None:
    camera = Camera(np.eye(3), np.eye(4), 4, 4)
    heldout = SceneView("a.png", np.zeros((3, 4, 4)), camera, np.ones((4, 4), dtype=bool), Split.HeldOut)
    with pytest.raises(ValueError):
        Scene("empty", [heldout])

    small = SceneView("b.png", np.zeros((3, 4, 4)), camera, np.ones((4, 4), dtype=bool))
    large = SceneView("c.png", np.zeros((3, 4, 6)), camera, np.ones((4, 6), dtype=bool))
    with pytest.raises(ValueError):
        Scene("mixed", [small, large])


def test_round_trip(tmp_path: Path, scene: Scene) -> None:
    written = save_scene(scene, tmp_path / "scene")

    assert tmp_path / "scene" / "cameras.json" in written
    assert tmp_path / "scene" / "gt.ply" in written

    loaded = load_scene(tmp_path / "scene")

    assert loaded.name == "scene"
    assert [view.split for view in loaded.views] == [view.split for view in scene.views]

    for view, expected in zip(loaded.views, scene.views):
        assert view.name == expected.name
        np.testing.assert_array_equal(view.camera.K, expected.camera.K)
        np.testing.assert_allclose(view.camera.w2c, expected.camera.w2c, atol=1e-12)
        np.testing.assert_allclose(view.image, expected.image, atol=0.5 / 255.0 + 1e-12)
        np.testing.assert_array_equal(view.mask, expected.mask)

    for tensor, expected in zip(loaded.gaussians.tensors(), scene.gaussians.tensors()):
        np.testing.assert_array_equal(tensor.data, expected.data)


def test_load_scene_normalizes(tmp_path: Path) -> None:
    _write_view(tmp_path, "a.png")
    _write_view(tmp_path, "b.png")

    w2c = np.eye(4)
    w2c[:3, 3] = (1.0, 2.0, 3.0)
    (tmp_path / "cameras.json").write_text(
        json.dumps({"views": [_entry("a.png", w2c=w2c.tolist()), _entry("b.png", w2c=w2c.tolist())]})
    )

    scene = load_scene(tmp_path)

    for camera in scene.cameras():
        np.testing.assert_array_equal(camera.w2c, np.eye(4))

    # No alpha channel and no companion mask: all foreground
    assert scene.masks().all()
    assert scene.gaussians is None


def test_load_scene_companion_mask(tmp_path: Path) -> None:
    _write_view(tmp_path, "a.png")
    mask = np.zeros((3, 4, 6))
    mask[:, :2] = 1.0
    write_png(tmp_path / "a_mask.png", mask)
    (tmp_path / "cameras.json").write_text(json.dumps({"views": [_entry("a.png")]}))

    scene = load_scene(tmp_path)

    np.testing.assert_array_equal(scene.masks()[0], mask[0] > 0.5)


def test_load_scene_missing(tmp_path: Path) -> None:
    with pytest.raises(FileNotFoundError):
        load_scene(tmp_path)

    (tmp_path / "cameras.json").write_text(json.dumps({"views": [_entry("missing.png")]}))
    with pytest.raises(FileNotFoundError):
        load_scene(tmp_path)

    _write_view(tmp_path, "a.png")
    (tmp_path / "cameras.json").write_text(json.dumps({"views": [_entry("a.png", mask="none.png")]}))
    with pytest.raises(FileNotFoundError):
        load_scene(tmp_path)


@pytest.mark.parametrize(
    "content",
    [
        "{not json",
        json.dumps({"views": []}),
        json.dumps([1, 2]),
        json.dumps({"views": [{"K": np.eye(3).tolist()}]}),
        json.dumps({"views": [{"image": "a.png", "K": np.eye(3).tolist()}]}),
        json.dumps({"views": [_entry("a.png", K=[1.0, 2.0])]}),
        json.dumps({"views": [_entry("a.png", split="test")]}),
    ],
)
def test_load_scene_malformed(tmp_path: Path, content: str) -> None:
    _write_view(tmp_path, "a.png")
    (tmp_path / "cameras.json").write_text(content)

    with pytest.raises(ValueError):
        load_scene(tmp_path)


def test_load_scene_size_mismatch(tmp_path: Path) -> None:
    _write_view(tmp_path, "a.png")
    _write_view(tmp_path, "b.png", size=(5, 6))
    (tmp_path / "cameras.json").write_text(json.dumps({"views": [_entry("a.png"), _entry("b.png")]}))

    with pytest.raises(ValueError):
        load_scene(tmp_path)
