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
    "RawGaussianParams",
    "GaussianSet",
    "activate_params",
    "build_covariance",
    "quaternion_to_rotation",
    "quaternion_multiply",
    "rotation_matrix_to_quaternion",
    "eval_sh",
    "apply_update",
    "save_ply",
    "load_ply",
]

import typing
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from plyfile import PlyData, PlyElement

from .constants import (
    IDENTITY_QUATERNION,
    NUM_SH_COEFFICIENT,
    QUATERNION_EPS,
    QUATERNION_UNIT_TOLERANCE,
    RAW_SCALE_MAX,
    RAW_SCALE_MIN,
    SH_C0,
    SH_C1,
    SH_DC_OFFSET,
)
from .kernel import Tensor, as_tensor, detach, ops

# Widths of the fields in the order of the flattened parameter vector
_FIELD_WIDTHS = (("centers", 3), ("opacity", 1), ("scale", 3), ("rotation", 4), ("sh", NUM_SH_COEFFICIENT))

_T = typing.TypeVar("_T", bound="_GaussianFields")


class _GaussianFields:
    """Shared behavior of the raw and activated Gaussian parameters."""

    centers: Tensor
    opacity: Tensor
    scale: Tensor
    rotation: Tensor
    sh: Tensor

    def _check_shapes(self) -> None:
        num_gaussians = self.centers.shape[0] if self.centers.ndim == 2 else -1
        for name, width in _FIELD_WIDTHS:
            shape = getattr(self, name).shape
            if shape != (num_gaussians, width):
                raise ValueError(
                    f"{type(self).__name__}.{name} must be [N, {width}] with N = {num_gaussians}, "
                    f"got {shape}."
                )

    @property
    def num_gaussians(self) -> int:
        return self.centers.shape[0]

    @property
    def nbytes(self) -> int:
        return int(np.sum([getattr(self, name).data.nbytes for name, _ in _FIELD_WIDTHS]))

    def tensors(self) -> tuple[Tensor, ...]:
        """Get the field tensors.

        Returns
        -------
        `tuple` [`Tensor`]
            Centers, opacity, scale, rotation, and spherical harmonics.
        """
        return tuple(getattr(self, name) for name, _ in _FIELD_WIDTHS)

    def take(self: _T, indices: np.ndarray) -> _T:
        """Gather the Gaussians (repeats allowed).

        Parameters
        ----------
        indices : `numpy.ndarray`
            Indices of the Gaussians.

        Returns
        -------
        Gaussians of the same type.
        """
        return type(self)(*(ops.take(tensor, indices, axis=0) for tensor in self.tensors()))

    def detach(self: _T) -> _T:
        """Copy as constants.

        Returns
        -------
        Gaussians of the same type.
        """
        return type(self)(*(detach(tensor) for tensor in self.tensors()))

    def to_vector(self) -> np.ndarray:
        """Concatenate the fields.

        Returns
        -------
        `numpy.ndarray`
            Values with the shape of [N, 23].
        """
        return np.concatenate([tensor.data for tensor in self.tensors()], axis=1)


@dataclass(frozen=True, eq=False)
class RawGaussianParams(_GaussianFields):
    """Unconstrained Gaussian parameters before the activations.

    The opacity is the logit, the scale is the logarithm, and the rotation is
    a quaternion (w, x, y, z) of any length. The spherical harmonics are laid
    out as [channel, coefficient], flattened.
    """

    # Centers [N, 3]
    centers: Tensor

    # Opacity logits [N, 1]
    opacity: Tensor

    # Log scales [N, 3]
    scale: Tensor

    # Quaternions [N, 4]
    rotation: Tensor

    # Spherical harmonics [N, 12]
    sh: Tensor

    def __post_init__(self) -> None:
        self._check_shapes()

    @classmethod
    def from_arrays(
        cls,
        centers: np.ndarray,
        opacity: np.ndarray,
        scale: np.ndarray,
        rotation: np.ndarray,
        sh: np.ndarray,
        requires_grad: bool = False,
    ) -> "RawGaussianParams":
        """Create the parameters from arrays.

        Parameters
        ----------
        centers : `numpy.ndarray`
            Centers [N, 3].
        opacity : `numpy.ndarray`
            Opacity logits [N, 1].
        scale : `numpy.ndarray`
            Log scales [N, 3].
        rotation : `numpy.ndarray`
            Quaternions [N, 4].
        sh : `numpy.ndarray`
            Spherical harmonics [N, 12].
        requires_grad : `bool`, optional
            The tensors require the gradient or not. (the default is False)

        Returns
        -------
        `RawGaussianParams`
            Parameters.
        """
        return cls(
            *(
                Tensor(np.array(value, copy=True), requires_grad=requires_grad, name=name)
                for value, (name, _) in zip((centers, opacity, scale, rotation, sh), _FIELD_WIDTHS)
            )
        )

    @classmethod
    def from_vector(cls, vector: Tensor) -> "RawGaussianParams":
        """Split a flattened parameter tensor into the fields.

        Parameters
        ----------
        vector : `Tensor`
            Parameters with the shape of [N, 23].

        Returns
        -------
        `RawGaussianParams`
            Parameters.
        """

        start = 0
        parts = list()
        for _, width in _FIELD_WIDTHS:
            parts.append(vector[:, start : start + width])
            start += width

        return cls(*parts)

    @classmethod
    def empty(cls) -> "RawGaussianParams":
        """Create the parameters of zero Gaussians.

        Returns
        -------
        `RawGaussianParams`
            Parameters.
        """
        return cls(*(Tensor(np.zeros((0, width))) for _, width in _FIELD_WIDTHS))


@dataclass(frozen=True, eq=False)
class GaussianSet(_GaussianFields):
    """World-space Gaussians after the activations.

    The set is immutable after the construction and can be shared between
    readers.
    """

    # Centers [N, 3]
    centers: Tensor

    # Opacity in (0, 1) [N, 1]
    opacity: Tensor

    # Positive scales [N, 3]
    scale: Tensor

    # Unit quaternions (w, x, y, z) [N, 4]
    rotation: Tensor

    # Spherical harmonics [N, 12]
    sh: Tensor

    def __post_init__(self) -> None:
        self._check_shapes()

    def validate(self) -> None:
        """Check the value invariants.

        Raises
        ------
        `ValueError`
            When a value is not finite, the opacity is out of (0, 1), a scale
            is not positive, or a quaternion is not unit.
        """

        for tensor in self.tensors():
            if not np.isfinite(tensor.data).all():
                raise ValueError("GaussianSet has non-finite values.")

        if ((self.opacity.data <= 0.0) | (self.opacity.data >= 1.0)).any():
            raise ValueError("GaussianSet opacity must be in (0, 1).")

        if (self.scale.data <= 0.0).any():
            raise ValueError("GaussianSet scale must be positive.")

        norm = np.linalg.norm(self.rotation.data, axis=1)
        if (np.abs(norm - 1.0) > 1e-6).any():
            raise ValueError("GaussianSet rotation must be unit quaternions.")


def activate_params(raw: RawGaussianParams) -> GaussianSet:
    """Map the raw parameters to the constrained Gaussians.

    Parameters
    ----------
    raw : `RawGaussianParams`
        Raw parameters.

    Returns
    -------
    `GaussianSet`
        Gaussians. The opacity is the sigmoid, the scale is the exponential of
        the clamped raw scale, and the quaternion is normalized (identity for
        a too short quaternion).
    """

    return GaussianSet(
        centers=raw.centers,
        opacity=ops.sigmoid(raw.opacity),
        scale=ops.exp(ops.clamp(raw.scale, RAW_SCALE_MIN, RAW_SCALE_MAX)),
        rotation=ops.l2_normalize(raw.rotation, eps=QUATERNION_EPS, fallback=IDENTITY_QUATERNION),
        sh=raw.sh,
    )


def _component(quaternion: Tensor, idx: int) -> Tensor:
    return ops.take(quaternion, np.array(idx), axis=-1)


def quaternion_to_rotation(quaternion: Tensor | np.ndarray) -> Tensor:
    """Rotation matrices of unit quaternions.

    Parameters
    ----------
    quaternion : `Tensor` or `numpy.ndarray`
        Quaternions (w, x, y, z) with the shape of [..., 4].

    Returns
    -------
    `Tensor`
        Rotation matrices with the shape of [..., 3, 3].
    """

    quaternion = as_tensor(quaternion)
    w, x, y, z = (_component(quaternion, idx) for idx in range(4))

    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z

    rows = [
        ops.stack([1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)], axis=-1),
        ops.stack([2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)], axis=-1),
        ops.stack([2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)], axis=-1),
    ]
    return ops.stack(rows, axis=-2)


def quaternion_multiply(a: Tensor | np.ndarray, b: Tensor | np.ndarray) -> Tensor:
    """Hamilton product a ⊗ b.

    Parameters
    ----------
    a : `Tensor` or `numpy.ndarray`
        Quaternions (w, x, y, z) with the shape of [..., 4].
    b : `Tensor` or `numpy.ndarray`
        Quaternions (w, x, y, z) with the shape of [..., 4].

    Returns
    -------
    `Tensor`
        Products with the shape of [..., 4].
    """

    a, b = as_tensor(a), as_tensor(b)
    a0, a1, a2, a3 = (_component(a, idx) for idx in range(4))
    b0, b1, b2, b3 = (_component(b, idx) for idx in range(4))

    return ops.stack(
        [
            a0 * b0 - a1 * b1 - a2 * b2 - a3 * b3,
            a0 * b1 + a1 * b0 + a2 * b3 - a3 * b2,
            a0 * b2 - a1 * b3 + a2 * b0 + a3 * b1,
            a0 * b3 + a1 * b2 - a2 * b1 + a3 * b0,
        ],
        axis=-1,
    )


def rotation_matrix_to_quaternion(rotation: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) of a rotation matrix, with w >= 0.

    Parameters
    ----------
    rotation : `numpy.ndarray`
        Rotation matrix [3, 3].

    Returns
    -------
    `numpy.ndarray`
        Quaternion [4].
    """

    m = np.asarray(rotation, dtype=np.float64)
    trace = np.trace(m)

    # Branch on the largest diagonal term for the numerical stability
    if trace > 0.0:
        s = 2.0 * np.sqrt(trace + 1.0)
        quaternion = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif (m[0, 0] > m[1, 1]) and (m[0, 0] > m[2, 2]):
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        quaternion = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        quaternion = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        quaternion = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]

    quaternion = np.array(quaternion)
    quaternion /= np.linalg.norm(quaternion)
    return -quaternion if quaternion[0] < 0.0 else quaternion


def build_covariance(rotation: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Covariance Σ = R S Sᵀ Rᵀ.

    Parameters
    ----------
    rotation : `numpy.ndarray`
        Unit quaternion [4] or quaternions [N, 4].
    scale : `numpy.ndarray`
        Positive scales [3] or [N, 3].

    Returns
    -------
    `numpy.ndarray`
        Symmetric positive semi-definite matrix [3, 3] or matrices [N, 3, 3].

    Raises
    ------
    `ValueError`
        When a quaternion is not unit within QUATERNION_UNIT_TOLERANCE.
    """

    rotation = np.asarray(rotation, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)

    norm = np.linalg.norm(rotation, axis=-1)
    if (np.abs(norm - 1.0) > QUATERNION_UNIT_TOLERANCE).any():
        raise ValueError(f"Quaternion must be unit, got the norm {norm}.")

    matrix = quaternion_to_rotation(rotation).data * scale[..., np.newaxis, :]
    covariance = matrix @ np.swapaxes(matrix, -1, -2)

    return 0.5 * (covariance + np.swapaxes(covariance, -1, -2))


def eval_sh(sh: np.ndarray, view_dir: np.ndarray) -> np.ndarray:
    """Color of the degree-1 spherical harmonics in a view direction.

    Parameters
    ----------
    sh : `numpy.ndarray`
        Coefficients [12] or [N, 12], laid out as [channel, coefficient].
    view_dir : `numpy.ndarray`
        View directions [3] or [N, 3]. They are normalized.

    Returns
    -------
    `numpy.ndarray`
        Colors in [0, 1] with the shape of [3] or [N, 3].

    Raises
    ------
    `ValueError`
        When a direction has zero length.
    """

    sh = np.asarray(sh, dtype=np.float64)
    view_dir = np.asarray(view_dir, dtype=np.float64)

    norm = np.linalg.norm(view_dir, axis=-1, keepdims=True)
    if (norm < 1e-12).any():
        raise ValueError("View direction must have a non-zero length.")

    direction = view_dir / norm
    x, y, z = direction[..., 0:1], direction[..., 1:2], direction[..., 2:3]

    coefficients = sh.reshape(sh.shape[:-1] + (3, 4))
    rgb = (
        SH_DC_OFFSET
        + SH_C0 * coefficients[..., 0]
        + SH_C1 * (-y * coefficients[..., 1] + z * coefficients[..., 2] - x * coefficients[..., 3])
    )

    return np.clip(rgb, 0.0, 1.0)


def apply_update(raw: RawGaussianParams, delta: RawGaussianParams) -> RawGaussianParams:
    """Update the raw parameters with a decoder-layer increment.

    The rotation is updated by the quaternion product with the normalized
    increment, and the other fields by the addition. An identity increment
    leaves the raw rotation unchanged, so a zero update is the exact
    identity map.

    Parameters
    ----------
    raw : `RawGaussianParams`
        Raw parameters.
    delta : `RawGaussianParams`
        Increments.

    Returns
    -------
    `RawGaussianParams`
        Updated parameters.

    Raises
    ------
    `ValueError`
        When the numbers of the Gaussians mismatch.
    """

    if raw.num_gaussians != delta.num_gaussians:
        raise ValueError(f"Gaussian count mismatch: {raw.num_gaussians} != {delta.num_gaussians}.")

    rotation_delta = ops.l2_normalize(delta.rotation, eps=QUATERNION_EPS, fallback=IDENTITY_QUATERNION)
    rotation = ops.l2_normalize(
        quaternion_multiply(rotation_delta, raw.rotation),
        eps=QUATERNION_EPS,
        fallback=IDENTITY_QUATERNION,
    )

    # Rows with the identity increment keep their raw rotation bit for bit
    is_identity = np.all(rotation_delta.data == IDENTITY_QUATERNION, axis=-1, keepdims=True)
    if is_identity.any():
        rotation = ops.pass_through(is_identity, raw.rotation, rotation)

    return RawGaussianParams(
        centers=raw.centers + delta.centers,
        opacity=raw.opacity + delta.opacity,
        scale=raw.scale + delta.scale,
        rotation=rotation,
        sh=raw.sh + delta.sh,
    )


def _ply_names() -> list[tuple[str, str, int]]:
    """(property name, field name, column) of the PLY vertex element."""

    names = [("x", "centers", 0), ("y", "centers", 1), ("z", "centers", 2), ("opacity", "opacity", 0)]
    names += [(f"scale_{idx}", "scale", idx) for idx in range(3)]
    names += [(f"rot_{idx}", "rotation", idx) for idx in range(4)]
    names += [(f"f_dc_{channel}", "sh", channel * 4) for channel in range(3)]
    names += [
        (f"f_rest_{channel * 3 + idx}", "sh", channel * 4 + 1 + idx)
        for channel in range(3)
        for idx in range(3)
    ]
    return names


def save_ply(path: Path | str, raw: RawGaussianParams) -> None:
    """Write the raw parameters as a binary little-endian PLY file.

    Parameters
    ----------
    path : `pathlib.Path` or `str`
        PLY file.
    raw : `RawGaussianParams`
        Raw parameters.
    """

    names = _ply_names()
    vertices = np.empty(raw.num_gaussians, dtype=[(name, "f4") for name, _, _ in names])
    for name, field_name, column in names:
        vertices[name] = getattr(raw, field_name).data[:, column]

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PlyData([PlyElement.describe(vertices, "vertex")], byte_order="<").write(str(path))


def load_ply(path: Path | str) -> RawGaussianParams:
    """Read the raw parameters from a PLY file written by save_ply().

    Parameters
    ----------
    path : `pathlib.Path` or `str`
        PLY file.

    Returns
    -------
    `RawGaussianParams`
        Raw parameters.

    Raises
    ------
    `FileNotFoundError`
        When the file does not exist.
    `ValueError`
        When a property is missing.
    """

    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"PLY file does not exist: {path}.")

    vertices = PlyData.read(str(path))["vertex"]
    available = {prop.name for prop in vertices.properties}

    num_gaussians = vertices.count
    arrays = {name: np.zeros((num_gaussians, width)) for name, width in _FIELD_WIDTHS}
    for name, field_name, column in _ply_names():
        if name not in available:
            raise ValueError(f"PLY file {path} misses the property {name}.")

        arrays[field_name][:, column] = np.asarray(vertices[name], dtype=np.float64)

    return RawGaussianParams.from_arrays(*(arrays[name] for name, _ in _FIELD_WIDTHS))
