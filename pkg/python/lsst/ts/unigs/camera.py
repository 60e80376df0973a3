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
    "Camera",
    "ProjectedPoint",
    "ProjectedPoints",
    "look_at",
    "project_pinhole",
    "normalize_to_reference",
    "in_cone_of_vision",
    "camera_embedding_input",
    "estimate_look_at",
]

import typing
from dataclasses import dataclass

import numpy as np

from .constants import OUT_OF_VIEW_UV, PROJECTION_EPS, ROTATION_DET_TOLERANCE
from .kernel import Tensor, as_tensor, ops


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera.

    Parameters
    ----------
    K : `numpy.ndarray`
        Intrinsic matrix [3, 3] in pixel: fx, fy, cx, cy and zero skew.
    w2c : `numpy.ndarray`
        World-to-camera rigid transform [4, 4]. The camera looks along +z
        with +x to the right and +y down.
    width : `int`
        Image width in pixel.
    height : `int`
        Image height in pixel.

    Raises
    ------
    `ValueError`
        When a shape is wrong, the focal length is not positive, the bottom
        row of w2c is not (0, 0, 0, 1), or the rotation block is not proper.
    """

    K: np.ndarray
    w2c: np.ndarray
    width: int
    height: int

    def __post_init__(self) -> None:
        intrinsic = np.array(self.K, dtype=np.float64)
        extrinsic = np.array(self.w2c, dtype=np.float64)
        if (intrinsic.shape != (3, 3)) or (extrinsic.shape != (4, 4)):
            raise ValueError(f"K must be [3, 3] and w2c [4, 4], got {intrinsic.shape} and {extrinsic.shape}.")

        intrinsic.setflags(write=False)
        extrinsic.setflags(write=False)

        object.__setattr__(self, "K", intrinsic)
        object.__setattr__(self, "w2c", extrinsic)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

        self.validate()

    def validate(self) -> None:
        """Check the camera invariants.

        Raises
        ------
        `ValueError`
            When an invariant is violated.
        """

        if (self.width < 1) or (self.height < 1):
            raise ValueError(f"Image size must be positive, got {self.width}x{self.height}.")

        if (self.fx <= 0.0) or (self.fy <= 0.0):
            raise ValueError(f"Focal lengths must be positive, got fx={self.fx}, fy={self.fy}.")

        if not np.array_equal(self.w2c[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError(f"Bottom row of w2c must be (0, 0, 0, 1), got {self.w2c[3]}.")

        determinant = np.linalg.det(self.rotation)
        if abs(determinant - 1.0) > ROTATION_DET_TOLERANCE:
            raise ValueError(f"Rotation block of w2c must have det = 1, got {determinant}.")

    @classmethod
    def from_fov(cls, fov_deg: float, width: int, height: int, w2c: np.ndarray) -> "Camera":
        """Create a camera from the horizontal field of view.

        Parameters
        ----------
        fov_deg : `float`
            Horizontal field of view in degree.
        width : `int`
            Image width in pixel.
        height : `int`
            Image height in pixel.
        w2c : `numpy.ndarray`
            World-to-camera transform [4, 4].

        Returns
        -------
        `Camera`
            Camera with the square pixels and the principal point at the
            image center.
        """

        focal = 0.5 * width / np.tan(0.5 * np.deg2rad(fov_deg))
        intrinsic = np.array(
            [
                [focal, 0.0, 0.5 * (width - 1)],
                [0.0, focal, 0.5 * (height - 1)],
                [0.0, 0.0, 1.0],
            ]
        )
        return cls(intrinsic, w2c, width, height)

    @property
    def fx(self) -> float:
        return float(self.K[0, 0])

    @property
    def fy(self) -> float:
        return float(self.K[1, 1])

    @property
    def cx(self) -> float:
        return float(self.K[0, 2])

    @property
    def cy(self) -> float:
        return float(self.K[1, 2])

    @property
    def rotation(self) -> np.ndarray:
        return self.w2c[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.w2c[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera position in the world."""
        return -self.rotation.T @ self.translation

    @property
    def forward(self) -> np.ndarray:
        """Viewing direction in the world."""
        return self.rotation[2].copy()

    def with_w2c(self, w2c: np.ndarray) -> "Camera":
        """Copy the camera with a new extrinsic.

        Parameters
        ----------
        w2c : `numpy.ndarray`
            World-to-camera transform [4, 4].

        Returns
        -------
        `Camera`
            Camera.
        """
        return Camera(self.K, w2c, self.width, self.height)


def look_at(
    eye: np.ndarray,
    target: np.ndarray,
    up: np.ndarray = np.array([0.0, 0.0, 1.0]),
) -> np.ndarray:
    """World-to-camera transform of a camera at eye looking at target.

    Parameters
    ----------
    eye : `numpy.ndarray`
        Camera position [3].
    target : `numpy.ndarray`
        Point to look at [3].
    up : `numpy.ndarray`, optional
        World up direction [3]. (the default is +z)

    Returns
    -------
    `numpy.ndarray`
        Transform [4, 4].

    Raises
    ------
    `ValueError`
        When eye and target coincide.
    """

    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    length = np.linalg.norm(forward)
    if length < 1e-12:
        raise ValueError("Eye and target must differ.")

    forward /= length

    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        # Looking along the up direction
        right = np.cross(forward, [0.0, 1.0, 0.0] if abs(forward[1]) < 0.9 else [1.0, 0.0, 0.0])

    right /= np.linalg.norm(right)
    down = np.cross(forward, right)

    w2c = np.eye(4)
    w2c[:3, :3] = np.stack([right, down, forward])
    w2c[:3, 3] = -w2c[:3, :3] @ eye
    return w2c


@dataclass(frozen=True)
class ProjectedPoint:
    """Projection of a single point."""

    # Normalized coordinate in [-1, 1] inside the image
    uv: np.ndarray

    # Camera-space depth
    depth: float

    # In front of the camera and inside the image
    valid: bool


@dataclass(frozen=True, eq=False)
class ProjectedPoints:
    """Projection of N points.

    The normalized coordinate of a point behind the camera is OUT_OF_VIEW_UV
    so the feature sampling gives zeros.
    """

    # Normalized coordinates [N, 2]
    uv: Tensor

    # Pixel coordinates [N, 2]
    pixel: np.ndarray

    # Camera-space depths [N]
    depth: Tensor

    # Validity [N]
    valid: np.ndarray

    def __len__(self) -> int:
        return self.valid.shape[0]

    def __getitem__(self, idx: int) -> ProjectedPoint:
        return ProjectedPoint(
            uv=self.uv.data[idx].copy(),
            depth=float(self.depth.data[idx]),
            valid=bool(self.valid[idx]),
        )


def project_pinhole(
    centers: Tensor | np.ndarray,
    camera: Camera,
    margin: float = 0.0,
) -> ProjectedPoints:
    """Project the points into a camera.

    Parameters
    ----------
    centers : `Tensor` or `numpy.ndarray`
        World points [N, 3].
    camera : `Camera`
        Camera.
    margin : `float`, optional
        Frustum margin in the normalized coordinate: a point is valid when
        |u|, |v| <= 1 + margin. (the default is 0.0)

    Returns
    -------
    `ProjectedPoints`
        Projections. The normalized coordinates are differentiable with
        respect to the points in front of the camera.
    """

    centers = as_tensor(centers)

    points = ops.matmul(centers, Tensor(camera.rotation.T)) + Tensor(camera.translation)
    x = ops.take(points, np.array(0), axis=-1)
    y = ops.take(points, np.array(1), axis=-1)
    z = ops.take(points, np.array(2), axis=-1)

    is_in_front = z.data > PROJECTION_EPS
    z_safe = ops.where(is_in_front, z, 1.0)

    pixel_x = camera.fx * x / z_safe + camera.cx
    pixel_y = camera.fy * y / z_safe + camera.cy

    u = 2.0 * pixel_x / max(camera.width - 1, 1) - 1.0
    v = 2.0 * pixel_y / max(camera.height - 1, 1) - 1.0
    uv = ops.where(is_in_front[:, np.newaxis], ops.stack([u, v], axis=-1), OUT_OF_VIEW_UV)

    is_inside = np.all(np.abs(uv.data) <= 1.0 + margin, axis=-1)

    return ProjectedPoints(
        uv=uv,
        pixel=np.stack([pixel_x.data, pixel_y.data], axis=-1),
        depth=z,
        valid=is_in_front & is_inside,
    )


def normalize_to_reference(cameras: typing.Sequence[Camera]) -> list[Camera]:
    """Express the cameras in the frame of the first camera.

    Parameters
    ----------
    cameras : `list` [`Camera`]
        Cameras.

    Returns
    -------
    `list` [`Camera`]
        Cameras with w2c_i · inv(w2c_0). The first one has the identity
        extrinsic.

    Raises
    ------
    `ValueError`
        When there is no camera or the first extrinsic is singular.
    """

    if len(cameras) == 0:
        raise ValueError("At least one camera is needed.")

    try:
        reference_inverse = np.linalg.inv(cameras[0].w2c)
    except np.linalg.LinAlgError:
        raise ValueError("Extrinsic of the reference camera is singular.")

    normalized = [cameras[0].with_w2c(np.eye(4))]
    for camera in cameras[1:]:
        w2c = camera.w2c @ reference_inverse
        w2c[3] = (0.0, 0.0, 0.0, 1.0)
        normalized.append(camera.with_w2c(w2c))

    return normalized


def in_cone_of_vision(points: np.ndarray, cameras: typing.Sequence[Camera]) -> bool | np.ndarray:
    """Point is seen by at least one camera or not.

    Parameters
    ----------
    points : `numpy.ndarray`
        Point [3] or points [M, 3].
    cameras : `list` [`Camera`]
        Cameras.

    Returns
    -------
    `bool` or `numpy.ndarray`
        Visibility of the point, or of each point.
    """

    points = np.asarray(points, dtype=np.float64)
    batch = points.reshape(-1, 3)

    is_visible = np.zeros(batch.shape[0], dtype=bool)
    for camera in cameras:
        is_visible |= project_pinhole(batch, camera).valid

    return bool(is_visible[0]) if points.ndim == 1 else is_visible


def camera_embedding_input(camera: Camera, normalize_intrinsics: bool = False) -> np.ndarray:
    """16 values of the camera fed to the camera embedding.

    Parameters
    ----------
    camera : `Camera`
        Camera.
    normalize_intrinsics : `bool`, optional
        Express K in the normalized image coordinate instead of the pixel,
        so the values do not depend on the resolution. (the default is
        False)

    Returns
    -------
    `numpy.ndarray`
        Row-major flatten of homog(K)·w2c [16].
    """

    intrinsic = camera.K.copy()
    if normalize_intrinsics:
        scale_x = 2.0 / max(camera.width - 1, 1)
        scale_y = 2.0 / max(camera.height - 1, 1)
        intrinsic[0] = intrinsic[0] * scale_x - np.array([0.0, 0.0, 1.0])
        intrinsic[1] = intrinsic[1] * scale_y - np.array([0.0, 0.0, 1.0])

    homogeneous = np.eye(4)
    homogeneous[:3, :3] = intrinsic

    return (homogeneous @ camera.w2c).reshape(16)


def estimate_look_at(cameras: typing.Sequence[Camera], default_depth: float = 2.5) -> np.ndarray:
    """Point closest to all the optical axes in the least-squares sense.

    Parameters
    ----------
    cameras : `list` [`Camera`]
        Cameras.
    default_depth : `float`, optional
        Distance along the axis used when the axes do not pin a point, such
        as a single camera or parallel axes. (the default is 2.5)

    Returns
    -------
    `numpy.ndarray`
        Point [3].

    Raises
    ------
    `ValueError`
        When there is no camera.
    """

    if len(cameras) == 0:
        raise ValueError("At least one camera is needed.")

    fallback = np.mean([camera.center + default_depth * camera.forward for camera in cameras], axis=0)
    if len(cameras) == 1:
        return fallback

    system = np.zeros((3, 3))
    target = np.zeros(3)
    for camera in cameras:
        projection = np.eye(3) - np.outer(camera.forward, camera.forward)
        system += projection
        target += projection @ camera.center

    if np.linalg.cond(system) > 1e8:
        return fallback

    return np.linalg.solve(system, target)
