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

__all__ = ["SceneView", "Scene", "load_scene", "save_scene", "synth_scene"]

import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import Camera, look_at, normalize_to_reference
from .constants import (
    MASK_THRESHOLD,
    SH_C0,
    SH_DC_OFFSET,
    SYNTH_ELEVATION_DEG,
    SYNTH_FOV_DEG,
    SYNTH_RADIUS,
)
from .enums import SceneKind, Split
from .gaussian_model import (
    RawGaussianParams,
    activate_params,
    load_ply,
    quaternion_multiply,
    quaternion_to_rotation,
    rotation_matrix_to_quaternion,
    save_ply,
)
from .io_utils import read_png, write_png
from .renderer import rasterize

# Names of the splits in cameras.json
_SPLIT_NAMES = {Split.Input: "input", Split.HeldOut: "heldout"}

# File name of the ground-truth Gaussians
_GT_FILE = "gt.ply"


@dataclass(frozen=True, eq=False)
class SceneView:
    """Posed image of a scene."""

    # Image file name
    name: str

    # Colors in [0, 1] [3, H, W]
    image: np.ndarray

    # Camera
    camera: Camera

    # Foreground mask [H, W]
    mask: np.ndarray

    # Role of the view (enum `Split`)
    split: Split = Split.Input


@dataclass(frozen=True, eq=False)
class Scene:
    """Posed multi-view images of one object.

    Raises
    ------
    `ValueError`
        When there is no input view or the images differ in size.
    """

    # Name of the scene
    name: str

    # Views
    views: list[SceneView]

    # Ground-truth Gaussians of a synthetic scene
    gaussians: RawGaussianParams | None = field(default=None)

    def __post_init__(self) -> None:
        if len(self.select(Split.Input)) == 0:
            raise ValueError(f"Scene {self.name} has no input view.")

        sizes = {view.image.shape[1:] for view in self.views}
        if len(sizes) != 1:
            raise ValueError(f"Views of the scene {self.name} differ in size: {sorted(sizes)}.")

    @property
    def height(self) -> int:
        return self.views[0].image.shape[1]

    @property
    def width(self) -> int:
        return self.views[0].image.shape[2]

    def select(self, split: Split) -> list[SceneView]:
        """Views of a split.

        Parameters
        ----------
        split : enum `Split`
            Split.

        Returns
        -------
        `list` [`SceneView`]
            Views in the file order.
        """
        return [view for view in self.views if view.split == split]

    def images(self, split: Split = Split.Input) -> np.ndarray:
        """Images [I, 3, H, W] of a split."""
        return np.stack([view.image for view in self.select(split)], axis=0)

    def cameras(self, split: Split = Split.Input) -> list[Camera]:
        """Cameras of a split."""
        return [view.camera for view in self.select(split)]

    def masks(self, split: Split = Split.Input) -> np.ndarray:
        """Foreground masks [I, H, W] of a split."""
        return np.stack([view.mask for view in self.select(split)], axis=0)


def _read_matrix(values: typing.Any, shape: tuple[int, int], key: str, name: str) -> np.ndarray:
    try:
        matrix = np.asarray(values, dtype=np.float64).reshape(shape)
    except (TypeError, ValueError):
        raise ValueError(f"{key} of the view {name} must have {shape[0] * shape[1]} numbers.")

    return matrix


def _read_mask(
    directory: Path, entry: dict, image_name: str, alpha: np.ndarray | None, shape: tuple
) -> np.ndarray:
    if alpha is not None:
        return alpha >= MASK_THRESHOLD

    mask_name = entry.get("mask", f"{Path(image_name).stem}_mask.png")
    mask_path = directory / mask_name
    if not mask_path.is_file():
        if "mask" in entry:
            raise FileNotFoundError(f"Mask of the view {image_name} does not exist: {mask_path}.")

        return np.ones(shape, dtype=bool)

    mask, _ = read_png(mask_path)
    return mask[0] >= MASK_THRESHOLD


def load_scene(directory: Path | str) -> Scene:
    """Read a scene directory.

    The directory holds cameras.json and the images it references. The
    cameras are expressed in the frame of the first view afterwards.

    Parameters
    ----------
    directory : `pathlib.Path` or `str`
        Scene directory.

    Returns
    -------
    `Scene`
        Scene. The mask of a view comes from the alpha channel of its image,
        or its companion mask image, or is all foreground.

    Raises
    ------
    `FileNotFoundError`
        When cameras.json or an image does not exist.
    `ValueError`
        When cameras.json is malformed or the images differ in size.
    """

    directory = Path(directory)
    camera_file = directory / "cameras.json"
    if not camera_file.is_file():
        raise FileNotFoundError(f"Camera file does not exist: {camera_file}.")

    try:
        content = json.loads(camera_file.read_text())
    except json.JSONDecodeError as error:
        raise ValueError(f"Malformed {camera_file}: {error}.")

    entries = content.get("views") if isinstance(content, dict) else None
    if not isinstance(entries, list) or len(entries) == 0:
        raise ValueError(f"{camera_file} must have a non-empty list of views.")

    split_by_name = {name: split for split, name in _SPLIT_NAMES.items()}

    images = list()
    for entry in entries:
        if not isinstance(entry, dict) or ("image" not in entry):
            raise ValueError(f"View entry of {camera_file} needs the image: {entry}.")

        image_name = entry["image"]
        for key in ("K", "w2c"):
            if key not in entry:
                raise ValueError(f"View {image_name} of {camera_file} misses {key}.")

        split_name = entry.get("split", "input")
        if split_name not in split_by_name:
            raise ValueError(f"Unknown split of the view {image_name}: {split_name}.")

        rgb, alpha = read_png(directory / image_name)
        images.append(
            (
                image_name,
                rgb,
                _read_mask(directory, entry, image_name, alpha, rgb.shape[1:]),
                _read_matrix(entry["K"], (3, 3), "K", image_name),
                _read_matrix(entry["w2c"], (4, 4), "w2c", image_name),
                split_by_name[split_name],
            )
        )

    sizes = {rgb.shape[1:] for _, rgb, _, _, _, _ in images}
    if len(sizes) != 1:
        raise ValueError(f"Images of {directory} differ in size: {sorted(sizes)}.")

    cameras = normalize_to_reference(
        [Camera(intrinsic, w2c, rgb.shape[2], rgb.shape[1]) for _, rgb, _, intrinsic, w2c, _ in images]
    )

    views = [
        SceneView(name=name, image=rgb, camera=camera, mask=mask, split=split)
        for (name, rgb, mask, _, _, split), camera in zip(images, cameras)
    ]

    gt_file = directory / _GT_FILE
    return Scene(
        name=directory.name,
        views=views,
        gaussians=load_ply(gt_file) if gt_file.is_file() else None,
    )


def save_scene(scene: Scene, directory: Path | str) -> list[Path]:
    """Write a scene directory readable by load_scene().

    The images are written as RGBA with the mask in the alpha channel.

    Parameters
    ----------
    scene : `Scene`
        Scene.
    directory : `pathlib.Path` or `str`
        Scene directory.

    Returns
    -------
    `list` [`pathlib.Path`]
        Written files.
    """

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    written = list()
    entries = list()
    for view in scene.views:
        write_png(directory / view.name, view.image, alpha=view.mask.astype(np.float64))
        written.append(directory / view.name)

        entries.append(
            {
                "image": view.name,
                "K": view.camera.K.tolist(),
                "w2c": view.camera.w2c.tolist(),
                "split": _SPLIT_NAMES[view.split],
            }
        )

    camera_file = directory / "cameras.json"
    camera_file.write_text(json.dumps({"views": entries}, indent=2))
    written.append(camera_file)

    if scene.gaussians is not None:
        save_ply(directory / _GT_FILE, scene.gaussians)
        written.append(directory / _GT_FILE)

    return written


def _random_quaternions(rng: np.random.Generator, num: int) -> np.ndarray:
    quaternions = rng.normal(size=(num, 4))
    quaternions /= np.linalg.norm(quaternions, axis=-1, keepdims=True)
    return quaternions * np.where(quaternions[:, :1] < 0.0, -1.0, 1.0)


def _fibonacci_sphere(num: int) -> np.ndarray:
    index = np.arange(num) + 0.5
    polar = np.arccos(1.0 - 2.0 * index / num)
    azimuth = np.pi * (1.0 + np.sqrt(5.0)) * index
    return np.stack(
        [np.sin(polar) * np.cos(azimuth), np.sin(polar) * np.sin(azimuth), np.cos(polar)],
        axis=-1,
    )


def _primitives(kind: SceneKind, rng: np.random.Generator) -> tuple[np.ndarray, ...]:
    """Centers, colors, and log scales of the ground-truth Gaussians in the
    object frame."""

    match kind:
        case SceneKind.Spheres3:
            sphere_centers = np.array([[-0.45, -0.2, 0.0], [0.45, -0.2, 0.0], [0.0, 0.35, 0.15]])
            sphere_colors = np.array([[0.9, 0.2, 0.2], [0.2, 0.8, 0.3], [0.2, 0.3, 0.9]])

            num_per_sphere = 48
            shell = 0.28 * _fibonacci_sphere(num_per_sphere)

            centers = np.concatenate([center + shell for center in sphere_centers], axis=0)
            colors = np.repeat(sphere_colors, num_per_sphere, axis=0)
            colors = np.clip(colors + rng.uniform(-0.05, 0.05, size=colors.shape), 0.0, 1.0)
            log_scales = np.full(centers.shape, np.log(0.09))

        case SceneKind.Cube:
            face_colors = np.array(
                [
                    [0.9, 0.2, 0.2],
                    [0.2, 0.8, 0.3],
                    [0.2, 0.3, 0.9],
                    [0.9, 0.8, 0.2],
                    [0.8, 0.3, 0.8],
                    [0.2, 0.8, 0.8],
                ]
            )

            half = 0.45
            grid = np.linspace(-half, half, 4)
            grid_u, grid_v = (values.reshape(-1) for values in np.meshgrid(grid, grid))

            faces = list()
            for axis in range(3):
                for sign in (-1.0, 1.0):
                    face = np.zeros((grid_u.size, 3))
                    face[:, axis] = sign * half
                    face[:, (axis + 1) % 3] = grid_u
                    face[:, (axis + 2) % 3] = grid_v
                    faces.append(face)

            # Random orientation of the cube
            rotation = quaternion_to_rotation(_random_quaternions(rng, 1)).data[0]

            centers = np.concatenate(faces, axis=0) @ rotation.T
            colors = np.repeat(face_colors, grid_u.size, axis=0)
            log_scales = np.full(centers.shape, np.log(0.12))

        case _:
            num_gaussians = 128
            centers = rng.uniform(-0.6, 0.6, size=(num_gaussians, 3))
            colors = rng.uniform(0.1, 0.9, size=(num_gaussians, 3))
            log_scales = rng.uniform(np.log(0.04), np.log(0.12), size=(num_gaussians, 3))

    return centers, colors, log_scales


def _ring_cameras(
    azimuths: np.ndarray,
    elevations: np.ndarray,
    height: int,
    width: int,
) -> list[Camera]:
    cameras = list()
    for azimuth, elevation in zip(azimuths, elevations):
        eye = SYNTH_RADIUS * np.array(
            [np.cos(elevation) * np.cos(azimuth), np.cos(elevation) * np.sin(azimuth), np.sin(elevation)]
        )
        cameras.append(Camera.from_fov(SYNTH_FOV_DEG, width, height, look_at(eye, np.zeros(3))))

    return cameras


def _to_float32(values: np.ndarray) -> np.ndarray:
    return values.astype(np.float32).astype(np.float64)


def synth_scene(
    kind: SceneKind,
    num_views: int,
    height: int,
    width: int,
    seed: int,
    directory: Path | str | None = None,
    num_heldout: int = 0,
) -> Scene:
    """Create a synthetic scene of colored primitives made of Gaussians.

    The cameras sit on a ring around the object with the elevations in
    [0, 30] degrees. The held-out views lie half-way between the input views
    in the azimuth. Cameras and Gaussians are expressed in the frame of the
    first input view, and the Gaussian parameters are float32 values so the
    PLY file holds them exactly.

    Parameters
    ----------
    kind : enum `SceneKind`
        Kind of the scene.
    num_views : `int`
        Number of the input views.
    height : `int`
        Image height.
    width : `int`
        Image width.
    seed : `int`
        Random seed.
    directory : `pathlib.Path`, `str` or None, optional
        Scene directory to write. (the default is None)
    num_heldout : `int`, optional
        Number of the held-out views. (the default is 0)

    Returns
    -------
    `Scene`
        Scene with the ground-truth Gaussians.

    Raises
    ------
    `ValueError`
        When a count or the image size is not positive.
    """

    if (num_views < 1) or (num_heldout < 0) or (height < 1) or (width < 1):
        raise ValueError(
            f"Need num_views >= 1, num_heldout >= 0, and a positive size, got {num_views}, {num_heldout}, "
            f"{height}x{width}."
        )

    rng = np.random.default_rng(seed)

    elevation_low, elevation_high = np.deg2rad(SYNTH_ELEVATION_DEG)
    azimuth_start = rng.uniform(0.0, 2.0 * np.pi)
    azimuths = azimuth_start + 2.0 * np.pi * np.arange(num_views) / num_views
    azimuths_heldout = (
        azimuth_start + np.pi / num_views + 2.0 * np.pi * np.arange(num_heldout) / max(num_heldout, 1)
    )

    ring = _ring_cameras(
        np.concatenate([azimuths, azimuths_heldout]),
        rng.uniform(elevation_low, elevation_high, size=num_views + num_heldout),
        height,
        width,
    )
    cameras = normalize_to_reference(ring)

    centers, colors, log_scales = _primitives(kind, rng)
    num_gaussians = centers.shape[0]

    # Object frame to the frame of the first input view
    rotation_reference = ring[0].rotation
    quaternions = quaternion_multiply(
        np.tile(rotation_matrix_to_quaternion(rotation_reference), (num_gaussians, 1)),
        _random_quaternions(rng, num_gaussians),
    ).data

    sh = np.zeros((num_gaussians, 12))
    sh[:, 0::4] = (colors - SH_DC_OFFSET) / SH_C0

    gaussians = RawGaussianParams.from_arrays(
        centers=_to_float32(centers @ rotation_reference.T + ring[0].translation),
        opacity=_to_float32(np.full((num_gaussians, 1), 2.0)),
        scale=_to_float32(log_scales),
        rotation=_to_float32(quaternions),
        sh=_to_float32(sh),
    )

    gaussian_set = activate_params(gaussians)
    views = list()
    for idx, camera in enumerate(cameras):
        rendered = rasterize(gaussian_set, camera)
        views.append(
            SceneView(
                name=f"{idx:03d}.png",
                image=np.clip(rendered.rgb.data, 0.0, 1.0),
                camera=camera,
                mask=rendered.alpha >= MASK_THRESHOLD,
                split=Split.Input if idx < num_views else Split.HeldOut,
            )
        )

    scene = Scene(name=f"{kind.name.lower()}_{seed}", views=views, gaussians=gaussians)

    if directory is not None:
        save_scene(scene, directory)

    return scene
