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
    "CheckContext",
    "CheckResult",
    "CheckReport",
    "register_check",
    "inject_fault",
    "get_registered_checks",
    "CheckRunner",
]

import logging
import time
import typing
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .camera import Camera, camera_embedding_input, normalize_to_reference, project_pinhole
from .constants import IDENTITY_QUATERNION, MAX_VIEW_TIME_RATIO, PSNR_MAX
from .decoder import UniGSModel, init_random_in_cov
from .encoder import Encoder, FeatureMaps
from .enums import FaultMode, SceneKind
from .gaussian_model import (
    RawGaussianParams,
    activate_params,
    apply_update,
    build_covariance,
)
from .kernel import Tape, Tensor, backward, grad_check, ops
from .losses import mse_loss, psnr, ssim, total_loss
from .mvdfa import MultiViewDeformableAttention, QuerySet
from .renderer import compositing_totals, rasterize
from .scene import synth_scene
from .sesa import SpatiallyEfficientSelfAttention, fps
from .signals import SignalCheck
from .structs import DecoderConfig, LossConfig

CheckFunction = typing.Callable[["CheckContext"], tuple[bool, str]]

# Registered checks in the registration order
_REGISTRY: dict[str, CheckFunction] = dict()

# Small model of the checks
_CHECK_DECODER = DecoderConfig(
    num_gaussians=32,
    hidden=16,
    num_layers=2,
    num_samples=2,
    sesa_rate=0.125,
    ffn_width=32,
)

# Timed runs of the wall-time checks
_NUM_TIMING_RUN = 3


@dataclass
class CheckContext:
    """Inputs shared by the checks."""

    # Random generator of the check instances
    rng: np.random.Generator

    # Number of the random instances of the property checks
    num_instances: int = 100


@dataclass
class CheckResult:
    """Result of one check."""

    # Name of the check
    name: str

    # Passed or not
    passed: bool

    # Wall time in second
    seconds: float

    # Details
    message: str = ""


@dataclass
class CheckReport:
    """Results of a check run."""

    # Results in the run order
    results: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        """An empty report does not pass."""
        return (len(self.results) > 0) and all(result.passed for result in self.results)

    @property
    def failures(self) -> list[str]:
        return [result.name for result in self.results if not result.passed]

    def to_frame(self) -> pd.DataFrame:
        """Convert to a table with the columns name, passed, seconds, and
        message.

        Returns
        -------
        `pandas.DataFrame`
            Table.
        """
        return pd.DataFrame(
            [(result.name, result.passed, result.seconds, result.message) for result in self.results],
            columns=["name", "passed", "seconds", "message"],
        )


def register_check(name: str) -> typing.Callable[[CheckFunction], CheckFunction]:
    """Decorator to add a check to the registry.

    Parameters
    ----------
    name : `str`
        Name of the invariant the check verifies.

    Returns
    -------
    `Callable`
        Decorator.

    Raises
    ------
    `ValueError`
        When the name is already registered.
    """

    def decorator(function: CheckFunction) -> CheckFunction:
        if name in _REGISTRY:
            raise ValueError(f"Check {name} is already registered.")

        _REGISTRY[name] = function
        return function

    return decorator


def get_registered_checks() -> dict[str, CheckFunction]:
    """Get a copy of the registry.

    Returns
    -------
    `dict`
        Checks keyed by their names.
    """
    return dict(_REGISTRY)


def _faulty_softmax(softmax: typing.Callable) -> typing.Callable:
    """Softmax that normalizes the axis before the requested one."""

    def wrapper(x: typing.Any, axis: int = -1) -> Tensor:
        x = Tensor(x) if not isinstance(x, Tensor) else x
        return softmax(x, axis=(axis - 1) % x.ndim)

    return wrapper


@contextmanager
def inject_fault(fault: FaultMode) -> typing.Iterator[None]:
    """Swap the kernels for their faulty versions while the context is
    active.

    Parameters
    ----------
    fault : enum `FaultMode`
        Fault to inject.
    """

    if fault == FaultMode.Nothing:
        yield
        return

    softmax = ops.softmax
    ops.softmax = _faulty_softmax(softmax)
    try:
        yield
    finally:
        ops.softmax = softmax


class CheckRunner:
    """Run the registered invariant checks and time each one.

    Parameters
    ----------
    log : `logging.Logger`
        A logger.
    fault : enum `FaultMode`, optional
        Fault injected into the kernels during the run. (the default is
        FaultMode.Nothing)
    seed : `int`, optional
        Seed of the random instances. (the default is 0)
    num_instances : `int`, optional
        Number of the random instances of the property checks. (the default
        is 100)

    Attributes
    ----------
    log : `logging.Logger`
        A logger.
    checks : `dict`
        Checks to run, keyed by their names.
    signals : `dict`
        Signal of each check result.
    """

    def __init__(
        self,
        log: logging.Logger,
        fault: FaultMode = FaultMode.Nothing,
        seed: int = 0,
        num_instances: int = 100,
    ) -> None:
        self.log = log.getChild(type(self).__name__)

        self.fault = fault
        self.seed = seed
        self.num_instances = num_instances

        self.checks = get_registered_checks()

        self.signals = {"check": SignalCheck()}

    def run(self, names: typing.Iterable[str] | None = None) -> CheckReport:
        """Run the checks.

        Parameters
        ----------
        names : `list` [`str`] or None, optional
            Names of the checks to run. None means all. (the default is None)

        Returns
        -------
        `CheckReport`
            Report. An exception in a check fails the check.

        Raises
        ------
        `ValueError`
            When a name is not registered.
        """

        selected = list(self.checks) if names is None else list(names)
        unknown = sorted(set(selected) - set(self.checks))
        if unknown:
            raise ValueError(f"Unknown checks: {unknown}.")

        if self.fault == FaultMode.SoftmaxAxis:
            self.log.info("Inject the fault: softmax over the wrong axis.")

        with inject_fault(self.fault):
            return self._run(selected)

    def _run(self, names: list[str]) -> CheckReport:
        report = CheckReport()
        if len(names) == 0:
            self.log.error("Check suite is empty.")
            return report

        for idx, name in enumerate(names):
            context = CheckContext(
                rng=np.random.default_rng([self.seed, idx]), num_instances=self.num_instances
            )

            time_start = time.perf_counter()
            try:
                passed, message = self.checks[name](context)
            except Exception as error:
                passed, message = False, f"{type(error).__name__}: {error}"

            result = CheckResult(name, bool(passed), time.perf_counter() - time_start, message)
            report.results.append(result)

            self.signals["check"].result.emit(result.name, result.passed, result.seconds)

            if result.passed:
                self.log.info(f"PASS {name} ({result.seconds:.3f} s) {message}")
            else:
                self.log.error(f"FAIL {name} ({result.seconds:.3f} s) {message}")

        return report

    def write_report(self, report: CheckReport, path: Path | str) -> pd.DataFrame:
        """Write the report as a CSV file.

        Parameters
        ----------
        report : `CheckReport`
            Report.
        path : `pathlib.Path` or `str`
            CSV file.

        Returns
        -------
        `pandas.DataFrame`
            Written table.
        """

        table = report.to_frame()

        Path(path).parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(path, index=False)

        return table


# ----------------------------------------------------------------------------
# Helpers


def _readout(output: Tensor) -> Tensor:
    """Scalar with a non-uniform weight on each element."""
    weights = np.cos(np.arange(output.size) * 0.7 + 0.3).reshape(output.shape)
    return ops.sum(output * Tensor(weights))


def _random_quaternions(rng: np.random.Generator, num: int) -> np.ndarray:
    quaternions = rng.normal(size=(num, 4))
    return quaternions / np.linalg.norm(quaternions, axis=-1, keepdims=True)


def _random_camera(rng: np.random.Generator, width: int = 64, height: int = 48) -> Camera:
    rotation = _rodrigues(_random_quaternions(rng, 1)[0])
    w2c = np.eye(4)
    w2c[:3, :3] = rotation
    w2c[:3, 3] = rng.normal(size=3)

    focal = rng.uniform(20.0, 100.0)
    intrinsic = np.array(
        [
            [focal, 0.0, rng.uniform(0.3, 0.7) * width],
            [0.0, focal * rng.uniform(0.8, 1.2), rng.uniform(0.3, 0.7) * height],
            [0.0, 0.0, 1.0],
        ]
    )
    return Camera(intrinsic, w2c, width, height)


def _rodrigues(quaternion: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion through its axis and angle."""

    w = np.clip(quaternion[0], -1.0, 1.0)
    vector = quaternion[1:]
    sin_half = np.linalg.norm(vector)
    if sin_half < 1e-15:
        return np.eye(3)

    angle = 2.0 * np.arctan2(sin_half, w)
    axis = vector / sin_half
    cross = np.array([[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]])
    return np.eye(3) + np.sin(angle) * cross + (1.0 - np.cos(angle)) * (cross @ cross)


def _points_in_front(
    rng: np.random.Generator, camera: Camera, num: int, min_depth: float = 0.1
) -> np.ndarray:
    """World points with the camera-space depth above min_depth."""

    camera_points = np.stack(
        [rng.uniform(-1.0, 1.0, num), rng.uniform(-1.0, 1.0, num), rng.uniform(min_depth + 0.4, 4.0, num)],
        axis=-1,
    )
    return (camera_points - camera.translation) @ camera.rotation


def _bilinear_oracle(feature: np.ndarray, u: float, v: float) -> np.ndarray:
    """Bilinear sample of a [Cf, H, W] map by loops, with zero padding."""

    _, height, width = feature.shape
    x = (u + 1.0) * 0.5 * (width - 1)
    y = (v + 1.0) * 0.5 * (height - 1)
    x0, y0 = int(np.floor(x)), int(np.floor(y))

    value = np.zeros(feature.shape[0])
    for dy in (0, 1):
        for dx in (0, 1):
            col, row = x0 + dx, y0 + dy
            weight = (1.0 - abs(x - col)) * (1.0 - abs(y - row))
            if (0 <= col < width) and (0 <= row < height):
                value += weight * feature[:, row, col]

    return value


def _check_scene(num_views: int, seed: int = 0, size: int = 16) -> tuple[np.ndarray, list[Camera]]:
    scene = synth_scene(SceneKind.Spheres3, num_views, size, size, seed)
    return scene.images(), scene.cameras()


def _kernel_cases(rng: np.random.Generator) -> dict[str, tuple[typing.Callable, list[Tensor], typing.Any]]:
    """Differentiable ops with random inputs: (function, inputs, skip)."""

    def normal(*shape: int) -> Tensor:
        return Tensor(rng.normal(size=shape))

    def positive(*shape: int) -> Tensor:
        return Tensor(np.abs(rng.normal(size=shape)) + 0.5)

    def away_from_zero(*shape: int) -> Tensor:
        values = rng.normal(size=shape)
        return Tensor(values + 0.1 * np.sign(values))

    condition = rng.random((3, 4)) > 0.5
    indices = np.array([2, 0, 2])

    height, width = 4, 5

    def is_on_lattice(idx_input: int, idx: tuple[int, ...]) -> bool:
        if idx_input != 1:
            return False

        value = cases["grid_sample_bilinear"][1][1].data[idx]
        size = width if idx[-1] == 0 else height
        pixel = (value + 1.0) * 0.5 * (size - 1)
        return abs(pixel - np.round(pixel)) < 1e-4

    cases = {
        "add": (lambda a, b: _readout(ops.add(a, b)), [normal(3, 4), normal(4)], None),
        "sub": (lambda a, b: _readout(ops.sub(a, b)), [normal(3, 4), normal(3, 1)], None),
        "mul": (lambda a, b: _readout(ops.mul(a, b)), [normal(3, 4), normal(3, 1)], None),
        "div": (lambda a, b: _readout(ops.div(a, b)), [normal(3, 4), positive(3, 4)], None),
        "exp": (lambda a: _readout(ops.exp(a)), [normal(3, 4)], None),
        "log": (lambda a: _readout(ops.log(a)), [positive(3, 4)], None),
        "sqrt": (lambda a: _readout(ops.sqrt(a)), [positive(3, 4)], None),
        "square": (lambda a: _readout(ops.square(a)), [normal(3, 4)], None),
        "sigmoid": (lambda a: _readout(ops.sigmoid(a)), [normal(3, 4)], None),
        "relu": (lambda a: _readout(ops.relu(a)), [away_from_zero(3, 4)], None),
        "clamp": (lambda a: _readout(ops.clamp(a, -0.5, 0.5)), [normal(3, 4)], None),
        "where": (lambda a, b: _readout(ops.where(condition, a, b)), [normal(3, 4), normal(3, 4)], None),
        "sum": (lambda a: _readout(ops.sum(ops.square(a), axis=1)), [normal(3, 4)], None),
        "mean": (lambda a: _readout(ops.mean(ops.square(a), axis=0)), [normal(3, 4)], None),
        "matmul": (lambda a, b: _readout(ops.matmul(a, b)), [normal(2, 3, 4), normal(4, 5)], None),
        "reshape": (lambda a: _readout(ops.square(ops.reshape(a, (4, 6)))), [normal(2, 3, 4)], None),
        "transpose": (lambda a: _readout(ops.square(ops.transpose(a, (2, 0, 1)))), [normal(2, 3, 4)], None),
        "concat": (
            lambda a, b: _readout(ops.square(ops.concat([a, b], axis=1))),
            [normal(2, 3), normal(2, 2)],
            None,
        ),
        "stack": (
            lambda a, b: _readout(ops.square(ops.stack([a, b], axis=1))),
            [normal(2, 3), normal(2, 3)],
            None,
        ),
        "take": (lambda a: _readout(ops.square(ops.take(a, indices, axis=1))), [normal(2, 3)], None),
        "getitem": (lambda a: _readout(ops.square(a[1:, ::2])), [normal(3, 4)], None),
        "roll": (lambda a: _readout(ops.square(ops.roll(a, 1, axis=1))), [normal(2, 3)], None),
        "l2_normalize": (lambda a: _readout(ops.l2_normalize(a)), [normal(3, 4)], None),
        "linear": (
            lambda x, w, b: _readout(ops.linear(x, w, b)),
            [normal(3, 4), normal(4, 5), normal(5)],
            None,
        ),
        "layer_norm": (
            lambda x, gamma, beta: _readout(ops.layer_norm(x, gamma, beta)),
            [normal(3, 6), normal(6), normal(6)],
            None,
        ),
        "softmax": (lambda a: _readout(ops.softmax(a, axis=-1)), [normal(3, 5)], None),
        "grid_sample_bilinear": (
            lambda features, points: _readout(ops.grid_sample_bilinear(features, points)),
            [normal(2, height, width), Tensor(rng.uniform(-1.2, 1.2, size=(3, 2)))],
            is_on_lattice,
        ),
        "conv2d": (
            lambda x, w, b: _readout(ops.conv2d(x, w, b, stride=2, padding=1)),
            [normal(1, 2, 5, 5), normal(3, 2, 3, 3), normal(3)],
            None,
        ),
        "upsample_nearest2x": (
            lambda a: _readout(ops.square(ops.upsample_nearest2x(a))),
            [normal(1, 2, 2, 3)],
            None,
        ),
    }

    return cases


# ----------------------------------------------------------------------------
# Tensor kernels


@register_check("kernel_gradients")
def _check_kernel_gradients(context: CheckContext) -> tuple[bool, str]:
    failed = set()
    max_error = 0.0
    for _ in range(context.num_instances):
        for name, (function, inputs, skip) in _kernel_cases(context.rng).items():
            report = grad_check(function, inputs, h=1e-6, tol=1e-5, skip=skip)
            max_error = max(max_error, report.max_error)
            if not report.passed:
                failed.add(name)

    return (not failed), f"max relative error {max_error:.2e}, failed ops: {sorted(failed)}"


@register_check("softmax_normalization")
def _check_softmax_normalization(context: CheckContext) -> tuple[bool, str]:
    worst_sum = 0.0
    worst_permutation = 0.0
    for _ in range(context.num_instances):
        logits = context.rng.normal(scale=5.0, size=(4, 7))
        output = ops.softmax(Tensor(logits), axis=-1).data
        worst_sum = max(worst_sum, float(np.abs(output.sum(axis=-1) - 1.0).max()))

        permutation = context.rng.permutation(logits.shape[-1])
        permuted = ops.softmax(Tensor(logits[:, permutation]), axis=-1).data
        worst_permutation = max(worst_permutation, float(np.abs(permuted - output[:, permutation]).max()))

    return (worst_sum <= 1e-12) and (worst_permutation <= 1e-12), (
        f"row sum error {worst_sum:.2e}, permutation error {worst_permutation:.2e}"
    )


@register_check("grid_sample_linearity")
def _check_grid_sample_linearity(context: CheckContext) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(context.num_instances):
        feature_1 = context.rng.normal(size=(3, 6, 7))
        feature_2 = context.rng.normal(size=(3, 6, 7))
        points = Tensor(context.rng.uniform(-1.1, 1.1, size=(5, 2)))
        a, b = context.rng.normal(size=2)

        combined = ops.grid_sample_bilinear(Tensor(a * feature_1 + b * feature_2), points).data
        separate = (
            a * ops.grid_sample_bilinear(Tensor(feature_1), points).data
            + b * ops.grid_sample_bilinear(Tensor(feature_2), points).data
        )
        worst = max(worst, float(np.abs(combined - separate).max()))

    return worst <= 1e-12, f"max deviation {worst:.2e}"


@register_check("elementwise_oracles")
def _check_elementwise_oracles(context: CheckContext) -> tuple[bool, str]:
    a = context.rng.normal(scale=10.0, size=50)
    b = context.rng.normal(scale=10.0, size=50)

    add = ops.add(Tensor(a), Tensor(b)).data
    mul = ops.mul(Tensor(a), Tensor(b)).data
    relu = ops.relu(Tensor(a)).data
    sigmoid = ops.sigmoid(Tensor(a)).data

    mismatched = list()
    for idx in range(a.size):
        if add[idx] != a[idx] + b[idx]:
            mismatched.append("add")
        if mul[idx] != a[idx] * b[idx]:
            mismatched.append("mul")
        if relu[idx] != (a[idx] if a[idx] > 0.0 else 0.0):
            mismatched.append("relu")

        decay = np.exp(-abs(a[idx]))
        expected = 1.0 / (1.0 + decay) if a[idx] >= 0.0 else decay / (1.0 + decay)
        if abs(sigmoid[idx] - expected) > 2.0 * np.spacing(expected):
            mismatched.append("sigmoid")

    return (not mismatched), f"mismatched: {sorted(set(mismatched))}"


# ----------------------------------------------------------------------------
# Gaussian model


@register_check("covariance_psd")
def _check_covariance_psd(context: CheckContext) -> tuple[bool, str]:
    num = 10 * context.num_instances
    quaternions = _random_quaternions(context.rng, num)
    scales = np.exp(context.rng.uniform(-4.0, 1.0, size=(num, 3)))

    covariance = build_covariance(quaternions, scales)

    is_symmetric = np.array_equal(covariance, np.swapaxes(covariance, -1, -2))
    eigenvalues = np.linalg.eigvalsh(covariance)
    is_psd = bool((eigenvalues >= -1e-12 * np.abs(eigenvalues).max(axis=-1, keepdims=True)).all())

    worst = 0.0
    for quaternion, scale, matrix in zip(quaternions, scales, covariance):
        rotation = _rodrigues(quaternion)
        expected = np.zeros((3, 3))
        for row in range(3):
            for col in range(3):
                expected[row, col] = sum(
                    rotation[row, k] * scale[k] ** 2 * rotation[col, k] for k in range(3)
                )
        worst = max(worst, float(np.abs(matrix - expected).max()))

    return is_symmetric and is_psd and (worst <= 1e-9), (
        f"symmetric {is_symmetric}, PSD {is_psd}, oracle deviation {worst:.2e}"
    )


@register_check("identity_update")
def _check_identity_update(context: CheckContext) -> tuple[bool, str]:
    num = 20
    raw = RawGaussianParams.from_arrays(
        centers=context.rng.normal(size=(num, 3)),
        opacity=context.rng.normal(size=(num, 1)),
        scale=context.rng.normal(size=(num, 3)),
        rotation=_random_quaternions(context.rng, num),
        sh=context.rng.normal(size=(num, 12)),
    )
    delta = RawGaussianParams.from_arrays(
        centers=np.zeros((num, 3)),
        opacity=np.zeros((num, 1)),
        scale=np.zeros((num, 3)),
        rotation=np.tile(IDENTITY_QUATERNION, (num, 1)),
        sh=np.zeros((num, 12)),
    )

    updated = apply_update(raw, delta)
    is_exact = all(
        np.array_equal(getattr(updated, name).data, getattr(raw, name).data)
        for name in ("centers", "opacity", "scale", "rotation", "sh")
    )

    raw.rotation.data[...] *= 1.7
    is_exact_scaled = np.array_equal(apply_update(raw, delta).rotation.data, raw.rotation.data)

    return is_exact and is_exact_scaled, (
        f"exact fields {is_exact}, exact non-unit rotations {is_exact_scaled}"
    )


@register_check("update_finite")
def _check_update_finite(context: CheckContext) -> tuple[bool, str]:
    for _ in range(context.num_instances):
        num = 8
        scale = 10.0 ** context.rng.uniform(0.0, 3.0)

        def draw(width: int) -> np.ndarray:
            return scale * context.rng.normal(size=(num, width))

        raw = RawGaussianParams.from_arrays(draw(3), draw(1), draw(3), draw(4), draw(12))
        delta = RawGaussianParams.from_arrays(draw(3), draw(1), draw(3), draw(4), draw(12))
        delta.rotation.data[0] = 0.0

        gaussians = activate_params(apply_update(raw, delta))
        if not all(np.isfinite(tensor.data).all() for tensor in gaussians.tensors()):
            return False, f"non-finite output at the input scale {scale:.1f}"

        norm_error = np.abs(np.linalg.norm(gaussians.rotation.data, axis=-1) - 1.0).max()
        if norm_error > 1e-9:
            return False, f"quaternion norm error {norm_error:.2e}"

    return True, ""


# ----------------------------------------------------------------------------
# Camera geometry


@register_check("projection_oracle")
def _check_projection_oracle(context: CheckContext) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(10 * context.num_instances):
        camera = _random_camera(context.rng)
        point = _points_in_front(context.rng, camera, 1)

        camera_point = camera.rotation @ point[0] + camera.translation
        expected = np.array(
            [
                camera.fx * camera_point[0] / camera_point[2] + camera.cx,
                camera.fy * camera_point[1] / camera_point[2] + camera.cy,
            ]
        )
        projected = project_pinhole(point, camera).pixel[0]
        worst = max(worst, float(np.abs(projected - expected).max() / max(1.0, np.abs(expected).max())))

    return worst <= 1e-9, f"max deviation {worst:.2e}"


@register_check("projection_rigid_invariance")
def _check_projection_rigid_invariance(context: CheckContext) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(context.num_instances):
        cameras = [_random_camera(context.rng) for _ in range(3)]
        points = context.rng.normal(size=(10, 3))

        normalized = normalize_to_reference(cameras)
        reference = cameras[0].w2c
        moved = points @ reference[:3, :3].T + reference[:3, 3]

        for camera, camera_normalized in zip(cameras, normalized):
            original = project_pinhole(points, camera)
            transformed = project_pinhole(moved, camera_normalized)

            is_front = original.valid | transformed.valid
            deviation = np.abs(original.pixel[is_front] - transformed.pixel[is_front])
            if deviation.size > 0:
                worst = max(worst, float(deviation.max()))

    return worst <= 1e-9, f"max deviation {worst:.2e}"


@register_check("projection_gradient")
def _check_projection_gradient(context: CheckContext) -> tuple[bool, str]:
    max_error = 0.0
    for _ in range(context.num_instances):
        camera = _random_camera(context.rng)
        centers = Tensor(_points_in_front(context.rng, camera, 4))

        report = grad_check(
            lambda points: _readout(project_pinhole(points, camera).uv),
            [centers],
            tol=1e-6,
        )
        max_error = max(max_error, report.max_error)
        if not report.passed:
            return False, report.failures[0]

    return True, f"max relative error {max_error:.2e}"


@register_check("valid_monotone")
def _check_valid_monotone(context: CheckContext) -> tuple[bool, str]:
    margins = [0.5, 0.2, 0.0, -0.2, -0.5]
    for _ in range(context.num_instances):
        camera = _random_camera(context.rng)
        points = context.rng.normal(scale=3.0, size=(50, 3))

        valid = [project_pinhole(points, camera, margin=margin).valid for margin in margins]
        for wider, narrower in zip(valid[:-1], valid[1:]):
            if (narrower & ~wider).any():
                return False, "a point turned valid when the margin shrank"

    return True, ""


@register_check("camera_embedding_oracle")
def _check_camera_embedding_oracle(context: CheckContext) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(10 * context.num_instances):
        camera = _random_camera(context.rng)

        homogeneous = np.eye(4)
        homogeneous[:3, :3] = camera.K
        expected = np.zeros(16)
        for row in range(4):
            for col in range(4):
                expected[4 * row + col] = sum(homogeneous[row, k] * camera.w2c[k, col] for k in range(4))

        embedding = camera_embedding_input(camera)
        worst = max(worst, float(np.abs(embedding - expected).max() / max(1.0, np.abs(expected).max())))

    return worst <= 1e-9, f"max deviation {worst:.2e}"


@register_check("rigid_inverse_oracle")
def _check_rigid_inverse_oracle(context: CheckContext) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(10 * context.num_instances):
        reference = _random_camera(context.rng)
        other = _random_camera(context.rng)

        inverse = np.eye(4)
        inverse[:3, :3] = reference.rotation.T
        inverse[:3, 3] = -reference.rotation.T @ reference.translation

        normalized = normalize_to_reference([reference, other])
        worst = max(
            worst,
            float(np.abs(normalized[1].w2c - other.w2c @ inverse).max()),
            float(np.abs(normalized[0].w2c - np.eye(4)).max()),
        )

    return worst <= 1e-9, f"max deviation {worst:.2e}"


# ----------------------------------------------------------------------------
# Encoder


@register_check("encoder_view_permutation")
def _check_encoder_view_permutation(context: CheckContext) -> tuple[bool, str]:
    encoder = Encoder(16, context.rng)
    images = context.rng.random((3, 3, 16, 16))
    permutation = np.array([2, 0, 1])

    features = encoder(images).features.data
    permuted = encoder(images[permutation]).features.data
    deviation = float(np.abs(permuted - features[permutation]).max())

    return deviation <= 1e-6, f"max deviation {deviation:.2e}"


@register_check("encoder_single_view")
def _check_encoder_single_view(context: CheckContext) -> tuple[bool, str]:
    encoder = Encoder(16, context.rng)
    images = context.rng.random((1, 3, 16, 16))

    extracted = encoder.extract_features(images)
    attended = encoder.cross_view_attention(extracted)
    is_same = np.array_equal(encoder(images).features.data, extracted.features.data)

    return (attended is extracted) and is_same, f"identical {is_same}"


@register_check("encoder_finite")
def _check_encoder_finite(context: CheckContext) -> tuple[bool, str]:
    encoder = Encoder(16, context.rng)
    for scale in (1.0, 1e3, 1e6):
        images = scale * context.rng.normal(size=(2, 3, 16, 16))
        if not np.isfinite(encoder(images).features.data).all():
            return False, f"non-finite features at the input scale {scale}"

    return True, ""


# ----------------------------------------------------------------------------
# Multi-view deformable attention


def _mvdfa_inputs(
    context: CheckContext,
    num_view: int = 3,
    num_query: int = 6,
    hidden: int = 8,
    num_samples: int = 3,
) -> tuple[MultiViewDeformableAttention, FeatureMaps, list[Camera], QuerySet, Tensor]:
    images, cameras = _check_scene(num_view, seed=int(context.rng.integers(1000)))
    del images

    attention = MultiViewDeformableAttention(hidden, num_samples, context.rng)
    feature_maps = FeatureMaps(Tensor(context.rng.normal(size=(num_view, hidden, 4, 4))))
    query_set = QuerySet(Tensor(context.rng.normal(size=(num_query, hidden))))

    # Centers around the object at the origin of the first camera's view
    centers = Tensor(np.array([0.0, 0.0, 2.5]) + context.rng.uniform(-0.5, 0.5, size=(num_query, 3)))

    return attention, feature_maps, cameras, query_set, centers


@register_check("mvdfa_attention_weights")
def _check_mvdfa_attention_weights(context: CheckContext) -> tuple[bool, str]:
    attention, feature_maps, cameras, query_set, centers = _mvdfa_inputs(context)
    weight = attention.attention_scores.weight
    weight.data[...] = context.rng.normal(size=weight.shape)

    attention(feature_maps, cameras, query_set, centers)
    deviation = float(np.abs(attention.last_state.scores.data.sum(axis=-1) - 1.0).max())

    return deviation <= 1e-9, f"max deviation of the weight sums {deviation:.2e}"


@register_check("mvdfa_fusion_permutation")
def _check_mvdfa_fusion_permutation(context: CheckContext) -> tuple[bool, str]:
    attention = MultiViewDeformableAttention(8, 2, context.rng)
    for _ in range(context.num_instances):
        view_queries = context.rng.normal(size=(5, 7, 8))
        permutation = context.rng.permutation(5)

        fused, _ = attention.fuse_views(Tensor(view_queries))
        fused_permuted, _ = attention.fuse_views(Tensor(view_queries[permutation]))
        if not np.array_equal(fused.data, fused_permuted.data):
            return False, "fusion changed with the view order"

    return True, ""


@register_check("mvdfa_zero_features")
def _check_mvdfa_zero_features(context: CheckContext) -> tuple[bool, str]:
    attention, feature_maps, cameras, query_set, centers = _mvdfa_inputs(context)
    zero_maps = FeatureMaps(Tensor(np.zeros(feature_maps.features.shape)))

    fused = attention(zero_maps, cameras, query_set, centers).queries.data
    return bool((fused == 0.0).all()), f"max |fused| {np.abs(fused).max():.2e}"


@register_check("mvdfa_single_sample")
def _check_mvdfa_single_sample(context: CheckContext) -> tuple[bool, str]:
    attention, feature_maps, cameras, query_set, centers = _mvdfa_inputs(context, num_samples=1)
    attention.fusion.weight.data[...] = 0.0
    attention.fusion.bias.data[...] = 0.0

    fused = attention(feature_maps, cameras, query_set, centers).queries.data
    state = attention.last_state

    # Single sample: the view query is the sample, fused with the weight 0.5
    expected = 0.5 * np.sum(state.values.data[:, :, 0, :], axis=0)
    deviation = float(np.abs(fused - expected).max())

    return bool(np.all(state.scores.data == 1.0)) and (deviation <= 1e-12), f"max deviation {deviation:.2e}"


@register_check("mvdfa_zero_weight_oracle")
def _check_mvdfa_zero_weight_oracle(context: CheckContext) -> tuple[bool, str]:
    attention, feature_maps, cameras, query_set, centers = _mvdfa_inputs(context)
    layers = (attention.sampling_offsets, attention.attention_scores, attention.fusion, attention.modulation)
    for layer in layers:
        layer.weight.data[...] = 0.0
        layer.bias.data[...] = 0.0

    fused = attention(feature_maps, cameras, query_set, centers).queries.data

    features = feature_maps.features.data
    value_maps = np.einsum("ichw,co->iohw", features, attention.value.weight.data)

    expected = np.zeros_like(fused)
    for view, camera in enumerate(cameras):
        projection = project_pinhole(centers.data, camera)
        for query in range(fused.shape[0]):
            u, v = projection.uv.data[query]
            expected[query] += 0.5 * _bilinear_oracle(value_maps[view], u, v)

    deviation = float(np.abs(fused - expected).max())
    is_uniform = np.allclose(
        attention.last_state.scores.data, 1.0 / attention.num_samples, rtol=0.0, atol=1e-15
    )

    return is_uniform and (deviation <= 1e-10), f"uniform weights {is_uniform}, max deviation {deviation:.2e}"


@register_check("mvdfa_center_gradient")
def _check_mvdfa_center_gradient(context: CheckContext) -> tuple[bool, str]:
    attention, feature_maps, cameras, query_set, centers = _mvdfa_inputs(context, num_query=3)
    attention.sampling_offsets.weight.data[...] = 0.1 * context.rng.normal(
        size=attention.sampling_offsets.weight.shape
    )

    report = grad_check(
        lambda points: _readout(attention(feature_maps, cameras, query_set, points).queries),
        [centers],
        tol=1e-4,
    )

    return report.passed, f"max relative error {report.max_error:.2e} {report.failures[:1]}"


@register_check("query_count_invariance")
def _check_query_count_invariance(context: CheckContext) -> tuple[bool, str]:
    images, cameras = _check_scene(8, seed=int(context.rng.integers(1000)))
    model = UniGSModel(_CHECK_DECODER, logging.getLogger(__name__))

    counts = dict()
    buffers = set()
    for num_view in (1, 2, 4, 6, 8):
        gaussians = model.reconstruct(images[:num_view], cameras[:num_view])
        counts[num_view] = gaussians.num_gaussians
        buffers.add(model.last_stats.query_buffer_nbytes)

    is_constant = set(counts.values()) == {_CHECK_DECODER.num_gaussians}
    return is_constant and (len(buffers) == 1), f"counts {counts}, query buffer bytes {sorted(buffers)}"


# ----------------------------------------------------------------------------
# Spatially efficient self-attention


@register_check("sesa_full_rate")
def _check_sesa_full_rate(context: CheckContext) -> tuple[bool, str]:
    hidden, num = 8, 20
    attention = SpatiallyEfficientSelfAttention(hidden, 1.0, context.rng)
    attention.norm.gamma.data[...] = context.rng.normal(size=hidden)
    attention.norm.beta.data[...] = context.rng.normal(size=hidden)

    queries = context.rng.normal(size=(num, hidden))
    centers = context.rng.normal(size=(num, 3))
    output = attention(Tensor(queries), centers).data

    def project(layer: typing.Any, values: np.ndarray) -> np.ndarray:
        return values @ layer.weight.data + layer.bias.data

    query = project(attention.query, queries)
    key = project(attention.key, queries)
    value = project(attention.value, queries)

    logits = query @ key.T / np.sqrt(hidden)
    weights = np.exp(logits - logits.max(axis=-1, keepdims=True))
    weights /= weights.sum(axis=-1, keepdims=True)

    residual = queries + project(attention.output, weights @ value)
    mean = residual.mean(axis=-1, keepdims=True)
    variance = residual.var(axis=-1, keepdims=True)
    normalized = (residual - mean) / np.sqrt(variance + 1e-5)
    expected = normalized * attention.norm.gamma.data + attention.norm.beta.data

    deviation = float(np.abs(output - expected).max())
    return deviation <= 1e-10, f"max deviation {deviation:.2e}"


@register_check("sesa_attention_rows")
def _check_sesa_attention_rows(context: CheckContext) -> tuple[bool, str]:
    attention = SpatiallyEfficientSelfAttention(8, 0.25, context.rng)
    attention(Tensor(context.rng.normal(size=(40, 8))), context.rng.normal(size=(40, 3)))

    deviation = float(np.abs(attention.last_attention.sum(axis=-1) - 1.0).max())
    return deviation <= 1e-9, f"max deviation of the row sums {deviation:.2e}"


@register_check("sesa_kv_linear")
def _check_sesa_kv_linear(context: CheckContext) -> tuple[bool, str]:
    hidden = 8
    attention = SpatiallyEfficientSelfAttention(hidden, 0.1, context.rng)

    nbytes = dict()
    for num in (100, 200, 400):
        attention(Tensor(context.rng.normal(size=(num, hidden))), context.rng.normal(size=(num, 3)))
        num_key = attention.last_selection.num_selected
        nbytes[num] = (num_key, attention.last_kv_nbytes)

    itemsize = np.dtype(np.float64).itemsize
    is_linear = all(kv == 2 * num_key * hidden * itemsize for num_key, kv in nbytes.values())
    return is_linear, f"(K, bytes) per N: {nbytes}"


@register_check("fps_bruteforce")
def _check_fps_bruteforce(context: CheckContext) -> tuple[bool, str]:
    for _ in range(2 * context.num_instances):
        num = int(context.rng.integers(1, 65))
        num_selected = int(context.rng.integers(1, num + 1))
        points = context.rng.normal(size=(num, 3))
        if context.rng.random() < 0.2:
            # Duplicated points give the ties
            points[num // 2 :] = points[: num - num // 2]

        expected = [0]
        while len(expected) < num_selected:
            best, best_distance = -1, -1.0
            for candidate in range(num):
                if candidate in expected:
                    continue

                distance = min(
                    float(np.sum(np.square(points[candidate] - points[other]))) for other in expected
                )
                if distance > best_distance:
                    best, best_distance = candidate, distance

            expected.append(best)

        if fps(points, num_selected).indices.tolist() != expected:
            return False, f"mismatch for N={num}, K={num_selected}"

    return True, ""


# ----------------------------------------------------------------------------
# Decoder


@register_check("decoder_gaussian_count")
def _check_decoder_gaussian_count(context: CheckContext) -> tuple[bool, str]:
    images, cameras = _check_scene(8, seed=int(context.rng.integers(1000)))
    model = UniGSModel(_CHECK_DECODER, logging.getLogger(__name__))

    counts = {
        num_view: model.reconstruct(images[:num_view], cameras[:num_view]).num_gaussians
        for num_view in (1, 2, 4, 8)
    }
    return set(counts.values()) == {_CHECK_DECODER.num_gaussians}, f"counts {counts}"


@register_check("decoder_identity_head")
def _check_decoder_identity_head(context: CheckContext) -> tuple[bool, str]:
    images, cameras = _check_scene(2, seed=int(context.rng.integers(1000)))
    model = UniGSModel(_CHECK_DECODER, logging.getLogger(__name__))

    gaussians = model.reconstruct(images, cameras)
    is_same = np.array_equal(gaussians.centers.data, model.last_init.centers.data)
    return is_same, f"centers equal the initialization {is_same}"


@register_check("decoder_view_scaling")
def _check_decoder_view_scaling(context: CheckContext) -> tuple[bool, str]:
    images, cameras = _check_scene(8, seed=int(context.rng.integers(1000)))
    model = UniGSModel(_CHECK_DECODER, logging.getLogger(__name__))

    # Best of a few runs after one warm-up
    seconds = dict()
    for num_view in (1, 8):
        model.reconstruct(images[:num_view], cameras[:num_view])

        durations = list()
        for _ in range(_NUM_TIMING_RUN):
            time_start = time.perf_counter()
            model.reconstruct(images[:num_view], cameras[:num_view])
            durations.append(time.perf_counter() - time_start)

        seconds[num_view] = min(durations)

    ratio = seconds[8] / seconds[1]
    return ratio <= MAX_VIEW_TIME_RATIO, (
        f"I=1 {seconds[1]:.4f} s, I=8 {seconds[8]:.4f} s, ratio {ratio:.2f} (max {MAX_VIEW_TIME_RATIO})"
    )


@register_check("decoder_ablation_switches")
def _check_decoder_ablation_switches(context: CheckContext) -> tuple[bool, str]:
    images, cameras = _check_scene(2, seed=int(context.rng.integers(1000)))

    queries = dict()
    for name, config in (
        ("full", _CHECK_DECODER),
        ("no_sesa", replace(_CHECK_DECODER, use_sesa=False)),
        ("no_mvdfa", replace(_CHECK_DECODER, use_mvdfa=False)),
    ):
        model = UniGSModel(config, logging.getLogger(__name__))
        model.reconstruct(images, cameras)
        queries[name] = model.last_queries.queries.data

    changed = {
        name: not np.allclose(queries[name], queries["full"], rtol=0.0, atol=1e-12)
        for name in ("no_sesa", "no_mvdfa")
    }
    return all(changed.values()), f"outputs changed {changed}"


@register_check("pipeline_gradients_finite")
def _check_pipeline_gradients_finite(context: CheckContext) -> tuple[bool, str]:
    scene = synth_scene(SceneKind.Spheres3, 4, 32, 32, int(context.rng.integers(1000)))
    model = UniGSModel(replace(DecoderConfig.desk_scale(), num_gaussians=256), logging.getLogger(__name__))

    with Tape() as tape:
        gaussians = activate_params(model(scene.images(), scene.cameras()))
        losses = [
            total_loss(rasterize(gaussians, view.camera), view.image, LossConfig()) for view in scene.views
        ]
        loss = ops.mean(ops.stack(losses))

    gradients = backward(tape, loss)
    non_finite = [
        name for name, parameter in model.named_parameters() if not np.isfinite(gradients[parameter]).all()
    ]

    return (not non_finite) and np.isfinite(loss.item()), f"non-finite gradients: {non_finite}"


# ----------------------------------------------------------------------------
# Renderer


def _render_gaussians(context: CheckContext, num: int) -> RawGaussianParams:
    rng = context.rng
    return RawGaussianParams.from_arrays(
        centers=np.array([0.0, 0.0, 2.5]) + rng.uniform(-0.4, 0.4, size=(num, 3)),
        opacity=rng.normal(size=(num, 1)),
        scale=np.log(rng.uniform(0.05, 0.2, size=(num, 3))),
        rotation=_random_quaternions(rng, num),
        sh=0.5 * rng.normal(size=(num, 12)),
    )


def _render_camera(size: int) -> Camera:
    return Camera.from_fov(50.0, size, size, np.eye(4))


@register_check("compositing_telescoping")
def _check_compositing_telescoping(context: CheckContext) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(context.num_instances):
        gaussians = activate_params(_render_gaussians(context, 10))
        totals = compositing_totals(gaussians, _render_camera(16))
        worst = max(worst, float(np.abs(totals - 1.0).max()))

    return worst <= 1e-12, f"max deviation {worst:.2e}"


@register_check("render_order_invariance")
def _check_render_order_invariance(context: CheckContext) -> tuple[bool, str]:
    worst = 0.0
    camera = _render_camera(16)
    for _ in range(context.num_instances):
        raw = _render_gaussians(context, 10)
        permutation = context.rng.permutation(raw.num_gaussians)

        image = rasterize(activate_params(raw), camera).rgb.data
        permuted = rasterize(activate_params(raw.take(permutation)), camera).rgb.data
        worst = max(worst, float(np.abs(image - permuted).max()))

    return worst <= 1e-12, f"max deviation {worst:.2e}"


@register_check("render_range")
def _check_render_range(context: CheckContext) -> tuple[bool, str]:
    camera = _render_camera(16)
    for _ in range(context.num_instances):
        raw = _render_gaussians(context, 20)
        raw.opacity.data[...] = 5.0
        rgb = rasterize(activate_params(raw), camera).rgb.data
        if (rgb.min() < 0.0) or (rgb.max() > 1.0 + 1e-9):
            return False, f"values out of range: [{rgb.min()}, {rgb.max()}]"

    return True, ""


@register_check("render_gradients")
def _check_render_gradients(context: CheckContext) -> tuple[bool, str]:
    camera = _render_camera(16)
    target = context.rng.random((3, 16, 16))

    num_checked = 0
    num_failed = 0
    for _ in range(max(1, context.num_instances // 10)):
        raw = _render_gaussians(context, 5)

        def loss(*tensors: Tensor) -> Tensor:
            gaussians = activate_params(RawGaussianParams(*tensors))
            return mse_loss(rasterize(gaussians, camera), target)

        report = grad_check(loss, list(raw.tensors()), tol=1e-2, atol=1e-7)
        num_checked += report.num_checked
        num_failed += len(report.failures)

    ratio = 1.0 - num_failed / max(num_checked, 1)
    return (num_checked > 0) and (ratio >= 0.95), f"passing ratio {ratio:.3f} of {num_checked}"


# ----------------------------------------------------------------------------
# Losses and metrics


@register_check("mse_gradient")
def _check_mse_gradient(context: CheckContext) -> tuple[bool, str]:
    for _ in range(context.num_instances):
        target = context.rng.random((3, 6, 6))
        prediction = Tensor(context.rng.random((3, 6, 6)))
        report = grad_check(lambda image: mse_loss(image, target), [prediction], tol=1e-8)
        if not report.passed:
            return False, report.failures[0]

    return True, ""


@register_check("psnr_monotone")
def _check_psnr_monotone(context: CheckContext) -> tuple[bool, str]:
    target = np.full((3, 4, 4), 0.5)
    errors = np.sort(context.rng.uniform(1e-4, 0.5, size=context.num_instances))
    values = [psnr(target + error, target) for error in np.unique(errors)]

    is_decreasing = all(later < earlier for earlier, later in zip(values[:-1], values[1:]))
    return is_decreasing and (psnr(target, target) == PSNR_MAX), f"decreasing {is_decreasing}"


@register_check("ssim_symmetry")
def _check_ssim_symmetry(context: CheckContext) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(context.num_instances):
        a = context.rng.random((3, 16, 16))
        b = context.rng.random((3, 16, 16))
        worst = max(worst, abs(ssim(a, b) - ssim(b, a)))

    identical = ssim(a, a)
    return (worst <= 1e-12) and abs(identical - 1.0) <= 1e-12, (
        f"max asymmetry {worst:.2e}, ssim(a, a) {identical}"
    )


@register_check("init_in_cone_of_vision")
def _check_init_in_cone_of_vision(context: CheckContext) -> tuple[bool, str]:
    _, cameras = _check_scene(4, seed=int(context.rng.integers(1000)))
    raw, _ = init_random_in_cov(cameras, 200, int(context.rng.integers(1000)), 4)

    visible = np.zeros(raw.num_gaussians, dtype=bool)
    for camera in cameras:
        visible |= project_pinhole(raw.centers.data, camera).valid

    return bool(visible.all()), f"{int(visible.sum())} of {raw.num_gaussians} centers are visible"
