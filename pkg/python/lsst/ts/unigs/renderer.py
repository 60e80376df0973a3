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

__all__ = [
    "Splat2D",
    "ProjectedSplats",
    "RenderedImage",
    "RasterizeState",
    "GaussianGradients",
    "project_splats",
    "project_gaussian_2d",
    "rasterize",
    "rasterize_backward",
    "compositing_totals",
]

from dataclasses import dataclass, field

import numpy as np

from .camera import Camera
from .constants import (
    ALPHA_MAX,
    BLUR_2D,
    EXTENT_SIGMA,
    NEAR_PLANE,
    SH_C0,
    SH_C1,
    SH_DC_OFFSET,
    TILE_SIZE,
    TRANSMITTANCE_MIN,
)
from .gaussian_model import GaussianSet, quaternion_to_rotation
from .kernel import Tensor, record


@dataclass(frozen=True)
class Splat2D:
    """Screen-space footprint of a Gaussian."""

    # Index of the Gaussian in the set
    index: int

    # Mean in pixel [2]
    mean2d: np.ndarray

    # Covariance in pixel^2 including the blur [2, 2]
    cov2d: np.ndarray

    # Camera-space depth
    depth: float

    # Color [3]
    color: np.ndarray

    # Opacity
    alpha_base: float


@dataclass
class ProjectedSplats:
    """Projection of all the Gaussians into a camera, with the intermediate
    values reused by the backward pass."""

    # Camera-space points [N, 3]
    points: np.ndarray

    # Means in pixel [N, 2]
    means2d: np.ndarray

    # Covariances with the blur [N, 2, 2] and their inverses as (a, b, c)
    # of [[a, b], [b, c]] [N, 3]
    cov2d: np.ndarray
    conics: np.ndarray

    # Depths [N]
    depths: np.ndarray

    # Colors [N, 3] and the mask of the colors inside [0, 1] before the
    # clamp [N, 3]
    colors: np.ndarray
    is_color_inside: np.ndarray

    # Unit view directions [N, 3] and the distances to the camera [N]
    directions: np.ndarray
    distances: np.ndarray

    # Opacities [N]
    opacities: np.ndarray

    # Rotation matrices of the Gaussians [N, 3, 3]
    rotations: np.ndarray

    # 3D covariances [N, 3, 3]
    cov3d: np.ndarray

    # Projection T = J W [N, 2, 3]
    projection: np.ndarray

    # Extent radii in pixel [N]
    radii: np.ndarray

    # In front of the near plane with a positive-definite footprint [N]
    is_in_front: np.ndarray

    @property
    def num_gaussians(self) -> int:
        return self.depths.shape[0]


@dataclass(frozen=True, eq=False)
class RenderedImage:
    """Rendered view."""

    # Colors [3, H, W]
    rgb: Tensor

    # Accumulated opacity [H, W]
    alpha: np.ndarray


@dataclass
class RasterizeState:
    """Forward values retained for the backward pass."""

    gaussians: GaussianSet
    camera: Camera
    height: int
    width: int
    background: np.ndarray
    splats: ProjectedSplats

    # Visible Gaussians sorted front to back [M]
    order: np.ndarray

    # Gaussians (in the sorted order) per tile, keyed by (row, column)
    tiles: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)


@dataclass
class GaussianGradients:
    """Gradients of a loss with respect to the Gaussian fields."""

    centers: np.ndarray
    opacity: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    sh: np.ndarray

    @classmethod
    def zeros(cls, num_gaussians: int) -> "GaussianGradients":
        return cls(
            centers=np.zeros((num_gaussians, 3)),
            opacity=np.zeros((num_gaussians, 1)),
            scale=np.zeros((num_gaussians, 3)),
            rotation=np.zeros((num_gaussians, 4)),
            sh=np.zeros((num_gaussians, 12)),
        )

    def as_tuple(self) -> tuple[np.ndarray, ...]:
        return (self.centers, self.opacity, self.scale, self.rotation, self.sh)


def _center_hash(centers: np.ndarray) -> np.ndarray:
    """Order key of the centers that does not depend on their position in
    the set."""

    bits = np.ascontiguousarray(centers, dtype=np.float64).view(np.uint64)
    return (
        bits[:, 0] * np.uint64(0x9E3779B97F4A7C15)
        ^ bits[:, 1] * np.uint64(0xC2B2AE3D27D4EB4F)
        ^ bits[:, 2] * np.uint64(0x165667B19E3779F9)
    )


def project_splats(gaussians: GaussianSet, camera: Camera) -> ProjectedSplats:
    """Project the Gaussians with the local affine (EWA) approximation.

    Parameters
    ----------
    gaussians : `GaussianSet`
        Gaussians.
    camera : `Camera`
        Camera.

    Returns
    -------
    `ProjectedSplats`
        Footprints of all the Gaussians. The ones behind the near plane are
        flagged by is_in_front.
    """

    centers = gaussians.centers.data
    num_gaussians = centers.shape[0]

    rotation_camera = camera.rotation
    points = centers @ rotation_camera.T + camera.translation
    x, y, z = points[:, 0], points[:, 1], points[:, 2]

    is_in_front = z > NEAR_PLANE
    z_safe = np.where(is_in_front, z, 1.0)

    fx, fy = camera.fx, camera.fy
    means2d = np.stack([fx * x / z_safe + camera.cx, fy * y / z_safe + camera.cy], axis=-1)

    rotations = quaternion_to_rotation(gaussians.rotation.data).data.reshape(num_gaussians, 3, 3)
    matrix = rotations * gaussians.scale.data[:, np.newaxis, :]
    cov3d = matrix @ np.swapaxes(matrix, -1, -2)

    jacobian = np.zeros((num_gaussians, 2, 3))
    jacobian[:, 0, 0] = fx / z_safe
    jacobian[:, 0, 2] = -fx * x / np.square(z_safe)
    jacobian[:, 1, 1] = fy / z_safe
    jacobian[:, 1, 2] = -fy * y / np.square(z_safe)

    projection = jacobian @ rotation_camera
    cov2d = projection @ cov3d @ np.swapaxes(projection, -1, -2) + BLUR_2D * np.eye(2)

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    determinant = a * c - b * b
    is_in_front &= determinant > 0.0
    determinant_safe = np.where(is_in_front, determinant, 1.0)
    conics = np.stack([c, -b, a], axis=-1) / determinant_safe[:, np.newaxis]

    middle = 0.5 * (a + c)
    eigen_max = middle + np.sqrt(np.maximum(np.square(middle) - determinant, 0.0))
    radii = np.ceil(EXTENT_SIGMA * np.sqrt(np.maximum(eigen_max, 0.0)))

    offsets = centers - camera.center
    distances = np.linalg.norm(offsets, axis=-1)
    directions = offsets / np.where(distances > 0.0, distances, 1.0)[:, np.newaxis]

    coefficients = gaussians.sh.data.reshape(num_gaussians, 3, 4)
    dx, dy, dz = directions[:, 0:1], directions[:, 1:2], directions[:, 2:3]
    colors_raw = (
        SH_DC_OFFSET
        + SH_C0 * coefficients[..., 0]
        + SH_C1 * (-dy * coefficients[..., 1] + dz * coefficients[..., 2] - dx * coefficients[..., 3])
    )

    return ProjectedSplats(
        points=points,
        means2d=means2d,
        cov2d=cov2d,
        conics=conics,
        depths=z,
        colors=np.clip(colors_raw, 0.0, 1.0),
        is_color_inside=(colors_raw >= 0.0) & (colors_raw <= 1.0),
        directions=directions,
        distances=distances,
        opacities=gaussians.opacity.data[:, 0],
        rotations=rotations,
        cov3d=cov3d,
        projection=projection,
        radii=radii,
        is_in_front=is_in_front,
    )


def project_gaussian_2d(gaussians: GaussianSet, camera: Camera) -> list[Splat2D]:
    """Screen-space footprints of the Gaussians in front of the camera.

    Parameters
    ----------
    gaussians : `GaussianSet`
        Gaussians.
    camera : `Camera`
        Camera.

    Returns
    -------
    `list` [`Splat2D`]
        Footprints. The Gaussians behind the near plane are culled.
    """

    splats = project_splats(gaussians, camera)
    return [
        Splat2D(
            index=int(idx),
            mean2d=splats.means2d[idx],
            cov2d=splats.cov2d[idx],
            depth=float(splats.depths[idx]),
            color=splats.colors[idx],
            alpha_base=float(splats.opacities[idx]),
        )
        for idx in np.flatnonzero(splats.is_in_front)
    ]


def _bin_tiles(
    splats: ProjectedSplats,
    centers: np.ndarray,
    height: int,
    width: int,
) -> tuple[np.ndarray, dict[tuple[int, int], np.ndarray]]:
    """Sort the visible Gaussians front to back and bin them into the tiles
    their extent overlaps."""

    means2d = splats.means2d
    radii = splats.radii

    is_visible = (
        splats.is_in_front
        & (means2d[:, 0] + radii >= 0.0)
        & (means2d[:, 0] - radii <= width - 1)
        & (means2d[:, 1] + radii >= 0.0)
        & (means2d[:, 1] - radii <= height - 1)
    )
    visible = np.flatnonzero(is_visible)

    # Depth first, then the center hash for the equal depths
    order = visible[np.lexsort((_center_hash(centers[visible]), splats.depths[visible]))]

    num_row = -(-height // TILE_SIZE)
    num_col = -(-width // TILE_SIZE)

    col_min = np.ceil((means2d[order, 0] - radii[order] - (TILE_SIZE - 1)) / TILE_SIZE)
    col_max = np.floor((means2d[order, 0] + radii[order]) / TILE_SIZE)
    row_min = np.ceil((means2d[order, 1] - radii[order] - (TILE_SIZE - 1)) / TILE_SIZE)
    row_max = np.floor((means2d[order, 1] + radii[order]) / TILE_SIZE)

    tiles = dict()
    for row in range(num_row):
        is_row = (row_min <= row) & (row <= row_max)
        for col in range(num_col):
            selected = order[is_row & (col_min <= col) & (col <= col_max)]
            if selected.size > 0:
                tiles[(row, col)] = selected

    return order, tiles


def _tile_pixels(row: int, col: int, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates (y, x) of a tile, flattened."""

    ys, xs = np.meshgrid(
        np.arange(row * TILE_SIZE, min((row + 1) * TILE_SIZE, height)),
        np.arange(col * TILE_SIZE, min((col + 1) * TILE_SIZE, width)),
        indexing="ij",
    )
    return ys.reshape(-1), xs.reshape(-1)


def _composite_tile(splats: ProjectedSplats, indices: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> dict:
    """Front-to-back alpha compositing of the tile's Gaussians at the
    pixels."""

    means2d = splats.means2d[indices]
    conics = splats.conics[indices]

    dx = xs[:, np.newaxis] - means2d[np.newaxis, :, 0]
    dy = ys[:, np.newaxis] - means2d[np.newaxis, :, 1]
    power = -0.5 * (conics[:, 0] * np.square(dx) + conics[:, 2] * np.square(dy)) - conics[:, 1] * dx * dy

    gaussian = np.exp(power)
    alpha_raw = splats.opacities[indices] * gaussian
    alpha = np.minimum(ALPHA_MAX, alpha_raw)
    one_minus = 1.0 - alpha

    # Transmittance before each Gaussian
    transmittance = np.cumprod(
        np.concatenate([np.ones((alpha.shape[0], 1)), one_minus[:, :-1]], axis=1),
        axis=1,
    )

    # A Gaussian that would drop the transmittance below the cutoff stops
    # the compositing of the pixel
    is_included = np.logical_and.accumulate(transmittance * one_minus >= TRANSMITTANCE_MIN, axis=1)

    weights = alpha * transmittance * is_included
    transmittance_final = np.prod(np.where(is_included, one_minus, 1.0), axis=1)

    return {
        "dx": dx,
        "dy": dy,
        "gaussian": gaussian,
        "alpha_raw": alpha_raw,
        "alpha": alpha,
        "transmittance": transmittance,
        "is_included": is_included,
        "weights": weights,
        "transmittance_final": transmittance_final,
    }


def _rasterize_forward(
    gaussians: GaussianSet,
    camera: Camera,
    height: int,
    width: int,
    background: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, RasterizeState]:
    splats = project_splats(gaussians, camera)
    order, tiles = _bin_tiles(splats, gaussians.centers.data, height, width)

    rgb = np.empty((height, width, 3))
    rgb[...] = background
    alpha = np.zeros((height, width))

    for (row, col), indices in tiles.items():
        ys, xs = _tile_pixels(row, col, height, width)
        values = _composite_tile(splats, indices, ys, xs)

        rgb[ys, xs] = (
            values["weights"] @ splats.colors[indices]
            + values["transmittance_final"][:, np.newaxis] * background
        )
        alpha[ys, xs] = 1.0 - values["transmittance_final"]

    state = RasterizeState(
        gaussians=gaussians,
        camera=camera,
        height=height,
        width=width,
        background=background,
        splats=splats,
        order=order,
        tiles=tiles,
    )
    return rgb.transpose(2, 0, 1), alpha, state


def rasterize(
    gaussians: GaussianSet,
    camera: Camera,
    height: int | None = None,
    width: int | None = None,
    background: np.ndarray | None = None,
) -> RenderedImage:
    """Render the Gaussians by the depth-sorted alpha compositing.

    The rendering is differentiable: on an active tape, the gradients flow
    into the fields of the Gaussian set through rasterize_backward().

    Parameters
    ----------
    gaussians : `GaussianSet`
        Gaussians.
    camera : `Camera`
        Camera.
    height : `int` or None, optional
        Image height. None means the camera's. (the default is None)
    width : `int` or None, optional
        Image width. None means the camera's. (the default is None)
    background : `numpy.ndarray` or None, optional
        Background color [3]. None means black. (the default is None)

    Returns
    -------
    `RenderedImage`
        Image.

    Raises
    ------
    `ValueError`
        When the image size is not positive.
    """

    height = camera.height if height is None else int(height)
    width = camera.width if width is None else int(width)
    if (height < 1) or (width < 1):
        raise ValueError(f"Image size must be positive, got {height}x{width}.")

    background = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64)

    rgb, alpha, state = _rasterize_forward(gaussians, camera, height, width, background)

    output = record(
        "rasterize",
        gaussians.tensors(),
        Tensor(rgb),
        lambda g: rasterize_backward(state, g).as_tuple(),
    )
    return RenderedImage(rgb=output, alpha=alpha)


def rasterize_backward(state: RasterizeState, grad_rgb: np.ndarray) -> GaussianGradients:
    """Analytic gradients of the rendering with respect to the Gaussian
    fields.

    The per-tile compositing is recomputed from the retained projection.

    Parameters
    ----------
    state : `RasterizeState`
        Forward state.
    grad_rgb : `numpy.ndarray`
        Gradient of the loss with respect to the image [3, H, W].

    Returns
    -------
    `GaussianGradients`
        Gradients. The culled Gaussians get zeros.
    """

    splats = state.splats
    num_gaussians = splats.num_gaussians
    gradients = GaussianGradients.zeros(num_gaussians)
    if not state.tiles:
        return gradients

    grad_pixels = np.asarray(grad_rgb).transpose(1, 2, 0)

    grad_colors = np.zeros((num_gaussians, 3))
    grad_opacity = np.zeros(num_gaussians)
    grad_means2d = np.zeros((num_gaussians, 2))
    grad_conics = np.zeros((num_gaussians, 3))

    for (row, col), indices in state.tiles.items():
        ys, xs = _tile_pixels(row, col, state.height, state.width)
        values = _composite_tile(splats, indices, ys, xs)
        grad_pixel = grad_pixels[ys, xs]

        colors = splats.colors[indices]
        weights = values["weights"]
        alpha = values["alpha"]

        grad_colors[indices] += weights.T @ grad_pixel

        # g·c_k and g·(w_k c_k) per (pixel, Gaussian)
        grad_dot_color = grad_pixel @ colors.T
        grad_contribution = grad_dot_color * weights

        # g·(color composited behind the Gaussian k, including the
        # background)
        grad_after = (
            grad_contribution.sum(axis=1, keepdims=True)
            - np.cumsum(grad_contribution, axis=1)
            + (values["transmittance_final"] * (grad_pixel @ state.background))[:, np.newaxis]
        )

        grad_alpha = (
            grad_dot_color * values["transmittance"] - grad_after / (1.0 - alpha)
        ) * values["is_included"]
        grad_alpha_raw = grad_alpha * (values["alpha_raw"] < ALPHA_MAX)

        grad_opacity[indices] += np.sum(grad_alpha_raw * values["gaussian"], axis=0)

        grad_power = grad_alpha_raw * values["alpha_raw"]
        conics = splats.conics[indices]
        dx, dy = values["dx"], values["dy"]

        grad_means2d[indices, 0] += np.sum(grad_power * (conics[:, 0] * dx + conics[:, 1] * dy), axis=0)
        grad_means2d[indices, 1] += np.sum(grad_power * (conics[:, 1] * dx + conics[:, 2] * dy), axis=0)
        grad_conics[indices, 0] += np.sum(grad_power * (-0.5 * np.square(dx)), axis=0)
        grad_conics[indices, 1] += np.sum(grad_power * (-dx * dy), axis=0)
        grad_conics[indices, 2] += np.sum(grad_power * (-0.5 * np.square(dy)), axis=0)

    active = state.order
    camera = state.camera
    fx, fy = camera.fx, camera.fy

    gradients.opacity[active, 0] = grad_opacity[active]

    # Conic to the 2D covariance: dΣ2 = -M G M with the symmetric G
    conic_matrix = np.stack(
        [
            np.stack([splats.conics[active, 0], splats.conics[active, 1]], axis=-1),
            np.stack([splats.conics[active, 1], splats.conics[active, 2]], axis=-1),
        ],
        axis=-2,
    )
    grad_conic_matrix = np.stack(
        [
            np.stack([grad_conics[active, 0], 0.5 * grad_conics[active, 1]], axis=-1),
            np.stack([0.5 * grad_conics[active, 1], grad_conics[active, 2]], axis=-1),
        ],
        axis=-2,
    )
    grad_cov2d = -conic_matrix @ grad_conic_matrix @ conic_matrix

    # Σ2 = T Σ Tᵀ + blur
    projection = splats.projection[active]
    cov3d = splats.cov3d[active]
    grad_cov3d = np.swapaxes(projection, -1, -2) @ grad_cov2d @ projection
    grad_projection = 2.0 * grad_cov2d @ projection @ cov3d
    grad_jacobian = grad_projection @ camera.rotation.T

    x, y, z = (splats.points[active, idx] for idx in range(3))
    z2 = np.square(z)
    z3 = z2 * z

    grad_points = np.zeros((active.size, 3))
    grad_points[:, 0] = grad_jacobian[:, 0, 2] * (-fx / z2) + grad_means2d[active, 0] * fx / z
    grad_points[:, 1] = grad_jacobian[:, 1, 2] * (-fy / z2) + grad_means2d[active, 1] * fy / z
    grad_points[:, 2] = (
        grad_jacobian[:, 0, 0] * (-fx / z2)
        + grad_jacobian[:, 0, 2] * (2.0 * fx * x / z3)
        + grad_jacobian[:, 1, 1] * (-fy / z2)
        + grad_jacobian[:, 1, 2] * (2.0 * fy * y / z3)
        - grad_means2d[active, 0] * fx * x / z2
        - grad_means2d[active, 1] * fy * y / z2
    )
    grad_centers = grad_points @ camera.rotation

    # Spherical harmonics and the view direction
    grad_color = grad_colors[active] * splats.is_color_inside[active]
    coefficients = state.gaussians.sh.data[active].reshape(-1, 3, 4)
    directions = splats.directions[active]

    grad_sh = np.zeros((active.size, 3, 4))
    grad_sh[..., 0] = SH_C0 * grad_color
    grad_sh[..., 1] = -SH_C1 * directions[:, 1:2] * grad_color
    grad_sh[..., 2] = SH_C1 * directions[:, 2:3] * grad_color
    grad_sh[..., 3] = -SH_C1 * directions[:, 0:1] * grad_color
    gradients.sh[active] = grad_sh.reshape(-1, 12)

    grad_direction = np.stack(
        [
            np.sum(grad_color * (-SH_C1 * coefficients[..., 3]), axis=-1),
            np.sum(grad_color * (-SH_C1 * coefficients[..., 1]), axis=-1),
            np.sum(grad_color * (SH_C1 * coefficients[..., 2]), axis=-1),
        ],
        axis=-1,
    )
    distances = np.where(splats.distances[active] > 0.0, splats.distances[active], 1.0)[:, np.newaxis]
    grad_centers += (
        grad_direction - directions * np.sum(grad_direction * directions, axis=-1, keepdims=True)
    ) / distances

    gradients.centers[active] = grad_centers

    # Σ = M Mᵀ with M = R S
    rotations = splats.rotations[active]
    scale = state.gaussians.scale.data[active]
    matrix = rotations * scale[:, np.newaxis, :]
    grad_matrix = 2.0 * grad_cov3d @ matrix

    gradients.scale[active] = np.sum(grad_matrix * rotations, axis=1)
    grad_rotation = grad_matrix * scale[:, np.newaxis, :]

    w, qx, qy, qz = (state.gaussians.rotation.data[active, idx] for idx in range(4))
    g = grad_rotation
    gradients.rotation[active, 0] = 2.0 * (
        -qz * g[:, 0, 1]
        + qy * g[:, 0, 2]
        + qz * g[:, 1, 0]
        - qx * g[:, 1, 2]
        - qy * g[:, 2, 0]
        + qx * g[:, 2, 1]
    )
    gradients.rotation[active, 1] = 2.0 * (
        qy * g[:, 0, 1]
        + qz * g[:, 0, 2]
        + qy * g[:, 1, 0]
        - 2.0 * qx * g[:, 1, 1]
        - w * g[:, 1, 2]
        + qz * g[:, 2, 0]
        + w * g[:, 2, 1]
        - 2.0 * qx * g[:, 2, 2]
    )
    gradients.rotation[active, 2] = 2.0 * (
        -2.0 * qy * g[:, 0, 0]
        + qx * g[:, 0, 1]
        + w * g[:, 0, 2]
        + qx * g[:, 1, 0]
        + qz * g[:, 1, 2]
        - w * g[:, 2, 0]
        + qz * g[:, 2, 1]
        - 2.0 * qy * g[:, 2, 2]
    )
    gradients.rotation[active, 3] = 2.0 * (
        -2.0 * qz * g[:, 0, 0]
        - w * g[:, 0, 1]
        + qx * g[:, 0, 2]
        + w * g[:, 1, 0]
        - 2.0 * qz * g[:, 1, 1]
        + qy * g[:, 1, 2]
        + qx * g[:, 2, 0]
        + qy * g[:, 2, 1]
    )

    return gradients


def compositing_totals(gaussians: GaussianSet, camera: Camera) -> np.ndarray:
    """Sum of the compositing weights and the final transmittance of each
    pixel, which is 1 for the front-to-back compositing.

    Parameters
    ----------
    gaussians : `GaussianSet`
        Gaussians.
    camera : `Camera`
        Camera.

    Returns
    -------
    `numpy.ndarray`
        Totals [H, W].
    """

    splats = project_splats(gaussians, camera)
    _, tiles = _bin_tiles(splats, gaussians.centers.data, camera.height, camera.width)

    totals = np.ones((camera.height, camera.width))
    for (row, col), indices in tiles.items():
        ys, xs = _tile_pixels(row, col, camera.height, camera.width)
        values = _composite_tile(splats, indices, ys, xs)
        totals[ys, xs] = values["weights"].sum(axis=1) + values["transmittance_final"]

    return totals
