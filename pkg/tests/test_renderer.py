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

import numpy as np
import pytest

from lsst.ts.unigs import (
    ALPHA_MAX,
    BLUR_2D,
    IDENTITY_QUATERNION,
    SH_C0,
    Camera,
    GaussianSet,
    RawGaussianParams,
    activate_params,
    compositing_totals,
    project_gaussian_2d,
    rasterize,
)
from lsst.ts.unigs.kernel import Tape, Tensor, backward, grad_check, ops


@pytest.fixture
def camera() -> Camera:
    return Camera.from_fov(50.0, 17, 17, np.eye(4))


def _gaussians(centers: list, opacity: list, scale: list, colors: list) -> GaussianSet:
    num = len(centers)
    sh = np.zeros((num, 12))
    sh[:, 0::4] = (np.asarray(colors, dtype=np.float64) - 0.5) / SH_C0
    return GaussianSet(
        centers=Tensor(np.asarray(centers, dtype=np.float64)),
        opacity=Tensor(np.asarray(opacity, dtype=np.float64).reshape(num, 1)),
        scale=Tensor(np.asarray(scale, dtype=np.float64).reshape(num, 3)),
        rotation=Tensor(np.tile(IDENTITY_QUATERNION, (num, 1))),
        sh=Tensor(sh),
    )


def _random_raw(rng: np.random.Generator, num: int) -> RawGaussianParams:
    rotation = rng.normal(size=(num, 4))
    return RawGaussianParams.from_arrays(
        centers=np.array([0.0, 0.0, 2.5]) + rng.uniform(-0.4, 0.4, size=(num, 3)),
        opacity=rng.normal(size=(num, 1)),
        scale=np.log(rng.uniform(0.05, 0.2, size=(num, 3))),
        rotation=rotation / np.linalg.norm(rotation, axis=1, keepdims=True),
        sh=0.5 * rng.normal(size=(num, 12)),
    )


def test_project_on_axis(camera: Camera) -> None:
    gaussians = _gaussians([[0.0, 0.0, 2.0], [0.0, 0.0, 4.0]], [0.5] * 2, [[0.1] * 3] * 2, [[0.5] * 3] * 2)

    near, far = project_gaussian_2d(gaussians, camera)

    np.testing.assert_allclose(near.mean2d, [camera.cx, camera.cy])
    expected = np.diag([(camera.fx * 0.1 / 2.0) ** 2, (camera.fy * 0.1 / 2.0) ** 2]) + BLUR_2D * np.eye(2)
    np.testing.assert_allclose(near.cov2d, expected, atol=1e-12)

    # Doubling the depth halves the extent before the blur
    blur = BLUR_2D * np.eye(2)
    np.testing.assert_allclose(far.cov2d - blur, 0.25 * (near.cov2d - blur), atol=1e-12)

    assert near.depth == 2.0
    assert near.alpha_base == 0.5
    np.testing.assert_allclose(near.color, 0.5)


def test_project_culls_behind(camera: Camera) -> None:
    centers = [[0.0, 0.0, -1.0], [0.0, 0.0, 0.0], [0.0, 0.0, 2.0]]
    gaussians = _gaussians(centers, [0.5] * 3, [[0.1] * 3] * 3, [[0.5] * 3] * 3)

    splats = project_gaussian_2d(gaussians, camera)

    assert [splat.index for splat in splats] == [2]


def test_rasterize_empty(camera: Camera) -> None:
    gaussians = activate_params(RawGaussianParams.empty())

    image = rasterize(gaussians, camera, background=np.array([0.1, 0.2, 0.3]))

    assert image.rgb.shape == (3, 17, 17)
    np.testing.assert_array_equal(image.rgb.data[0], 0.1)
    np.testing.assert_array_equal(image.rgb.data[2], 0.3)
    np.testing.assert_array_equal(image.alpha, 0.0)


def test_rasterize_invalid_size(camera: Camera) -> None:
    with pytest.raises(ValueError):
        rasterize(activate_params(RawGaussianParams.empty()), camera, height=0)


def test_rasterize_alpha_clamp(camera: Camera) -> None:
    color = [0.8, 0.2, 0.4]
    gaussians = _gaussians([[0.0, 0.0, 2.5]], [0.999], [[0.3] * 3], [color])

    image = rasterize(gaussians, camera)

    np.testing.assert_allclose(image.rgb.data[:, 8, 8], ALPHA_MAX * np.array(color), atol=1e-12)
    assert image.alpha[8, 8] == pytest.approx(ALPHA_MAX)


def test_rasterize_two_layers(camera: Camera) -> None:
    red = [1.0, 0.0, 0.0]
    green = [0.0, 1.0, 0.0]

    # Given in the back-to-front order on purpose
    gaussians = _gaussians(
        [[0.0, 0.0, 3.0], [0.0, 0.0, 2.0]],
        [0.5, 0.5],
        [[0.2] * 3, [0.2] * 3],
        [green, red],
    )

    image = rasterize(gaussians, camera)

    np.testing.assert_allclose(image.rgb.data[:, 8, 8], [0.5, 0.25, 0.0], atol=1e-12)
    assert image.alpha[8, 8] == pytest.approx(0.75)


def test_compositing_totals() -> None:
    rng = np.random.default_rng(0)
    camera = Camera.from_fov(50.0, 24, 20, np.eye(4))

    for _ in range(5):
        totals = compositing_totals(activate_params(_random_raw(rng, 12)), camera)
        np.testing.assert_allclose(totals, 1.0, atol=1e-12)


def test_order_invariance() -> None:
    rng = np.random.default_rng(1)
    camera = Camera.from_fov(50.0, 16, 16, np.eye(4))

    raw = _random_raw(rng, 10)

    # Two Gaussians at the same depth exercise the tie-break
    raw.centers.data[1, 2] = raw.centers.data[0, 2]

    image = rasterize(activate_params(raw), camera).rgb.data
    permuted = rasterize(activate_params(raw.take(rng.permutation(10))), camera).rgb.data

    np.testing.assert_allclose(permuted, image, atol=1e-12)


def test_rasterize_range() -> None:
    rng = np.random.default_rng(2)
    camera = Camera.from_fov(50.0, 16, 16, np.eye(4))

    raw = _random_raw(rng, 30)
    raw.opacity.data[...] = 6.0

    rgb = rasterize(activate_params(raw), camera, background=np.ones(3)).rgb.data

    assert rgb.min() >= 0.0
    assert rgb.max() <= 1.0 + 1e-9


def test_rasterize_tiles() -> None:
    # An image larger than a tile, with a Gaussian across the tile border
    camera = Camera.from_fov(50.0, 40, 36, np.eye(4))
    gaussians = _gaussians([[0.0, 0.0, 2.5]], [0.8], [[0.15] * 3], [[0.6, 0.3, 0.9]])

    image = rasterize(gaussians, camera)

    np.testing.assert_allclose(compositing_totals(gaussians, camera), 1.0, atol=1e-12)
    assert image.rgb.data[:, 16, 15].min() > 0.0
    assert image.rgb.data[:, 17, 16].min() > 0.0


def test_backward_background_only(camera: Camera) -> None:
    raw = RawGaussianParams.from_arrays(
        centers=np.array([[0.0, 0.0, -2.0], [5.0, 0.0, 1.0]]),
        opacity=np.zeros((2, 1)),
        scale=np.full((2, 3), -3.0),
        rotation=np.tile(IDENTITY_QUATERNION, (2, 1)),
        sh=np.zeros((2, 12)),
        requires_grad=True,
    )

    with Tape() as tape:
        loss = ops.sum(rasterize(activate_params(raw), camera).rgb)

    gradients = backward(tape, loss)

    for tensor in raw.tensors():
        np.testing.assert_array_equal(gradients[tensor], 0.0)


def test_backward_color_exact(camera: Camera) -> None:
    raw = RawGaussianParams.from_arrays(
        centers=np.array([[0.02, -0.01, 2.5]]),
        opacity=np.zeros((1, 1)),
        scale=np.full((1, 3), np.log(0.2)),
        rotation=np.tile(IDENTITY_QUATERNION, (1, 1)),
        sh=np.zeros((1, 12)),
    )

    def center_red(sh: Tensor) -> Tensor:
        gaussians = activate_params(RawGaussianParams(raw.centers, raw.opacity, raw.scale, raw.rotation, sh))
        return ops.sum(rasterize(gaussians, camera).rgb[0, 8, 8])

    report = grad_check(center_red, [raw.sh], tol=1e-6)

    assert report.passed, report.failures


def test_backward_finite_differences() -> None:
    rng = np.random.default_rng(3)
    camera = Camera.from_fov(50.0, 16, 16, np.eye(4))
    target = rng.random((3, 16, 16))

    num_checked = 0
    num_failed = 0
    for _ in range(3):
        raw = _random_raw(rng, 5)

        def loss(*tensors: Tensor) -> Tensor:
            rgb = rasterize(activate_params(RawGaussianParams(*tensors)), camera).rgb
            return ops.mean(ops.square(rgb - Tensor(target)))

        report = grad_check(loss, list(raw.tensors()), tol=1e-2, atol=1e-7)
        num_checked += report.num_checked
        num_failed += len(report.failures)

    assert num_checked > 0
    assert num_failed <= 0.05 * num_checked
