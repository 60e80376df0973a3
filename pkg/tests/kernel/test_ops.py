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

from lsst.ts.unigs.kernel import Tape, Tensor, backward, grad_check, ops


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(7)


def _weighted_sum(output: Tensor) -> Tensor:
    weights = np.linspace(-1.0, 2.0, output.size).reshape(output.shape)
    return ops.sum(output * Tensor(weights))


def test_add_broadcast_gradient() -> None:
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)

    with Tape() as tape:
        loss = ops.sum(ops.add(a, b))

    gradients = backward(tape, loss)

    np.testing.assert_array_equal(gradients[a], np.ones((2, 3)))
    np.testing.assert_array_equal(gradients[b], [2.0, 2.0, 2.0])


def test_elementwise_values() -> None:
    a = np.array([-1.5, 0.0, 2.0])
    b = np.array([0.5, 3.0, -4.0])

    np.testing.assert_array_equal(ops.add(a, b).data, a + b)
    np.testing.assert_array_equal(ops.sub(a, b).data, a - b)
    np.testing.assert_array_equal(ops.mul(a, b).data, a * b)
    np.testing.assert_array_equal(ops.div(a, b).data, a / b)
    np.testing.assert_array_equal(ops.neg(a).data, -a)
    np.testing.assert_array_equal(ops.relu(a).data, [0.0, 0.0, 2.0])
    np.testing.assert_array_equal(ops.clamp(a, -1.0, 1.0).data, [-1.0, 0.0, 1.0])


def test_sigmoid() -> None:
    assert ops.sigmoid(Tensor(0.0)).item() == 0.5

    # Large logits saturate without overflow
    values = ops.sigmoid(Tensor([-1000.0, 1000.0])).data
    np.testing.assert_array_equal(values, [0.0, 1.0])


def test_relu_gradient_at_zero() -> None:
    x = Tensor([-1.0, 0.0, 1.0], requires_grad=True)

    with Tape() as tape:
        loss = ops.sum(ops.relu(x))

    np.testing.assert_array_equal(backward(tape, loss)[x], [0.0, 0.0, 1.0])


def test_clamp_gradient() -> None:
    x = Tensor([-2.0, 0.5, 2.0], requires_grad=True)

    with Tape() as tape:
        loss = ops.sum(ops.clamp(x, low=-1.0, high=1.0))

    np.testing.assert_array_equal(backward(tape, loss)[x], [0.0, 1.0, 0.0])


def test_where_gradient() -> None:
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([3.0, 4.0], requires_grad=True)
    condition = np.array([True, False])

    with Tape() as tape:
        loss = ops.sum(ops.where(condition, a, b))

    gradients = backward(tape, loss)

    np.testing.assert_array_equal(gradients[a], [1.0, 0.0])
    np.testing.assert_array_equal(gradients[b], [0.0, 1.0])


def test_pass_through() -> None:
    x = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    value = Tensor([[5.0, 6.0], [7.0, 8.0]], requires_grad=True)
    condition = np.array([[True], [False]])

    with Tape() as tape:
        output = ops.pass_through(condition, value, x)
        loss = ops.sum(output * Tensor([[1.0, 2.0], [3.0, 4.0]]))

    np.testing.assert_array_equal(output.data, [[5.0, 6.0], [3.0, 4.0]])

    # Straight-through: x gets the whole gradient, the values none
    gradients = backward(tape, loss)
    np.testing.assert_array_equal(gradients[x], [[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(gradients[value], np.zeros((2, 2)))


def test_matmul(rng: np.random.Generator) -> None:
    a = rng.normal(size=(2, 3, 4))
    b = rng.normal(size=(4, 5))

    np.testing.assert_allclose(ops.matmul(a, b).data, a @ b)

    with pytest.raises(ValueError):
        ops.matmul(np.ones(3), np.ones((3, 2)))

    with pytest.raises(ValueError):
        ops.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_take_repeated_indices() -> None:
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)

    with Tape() as tape:
        loss = ops.sum(ops.take(x, np.array([2, 0, 2])))

    np.testing.assert_array_equal(backward(tape, loss)[x], [1.0, 0.0, 2.0])


def test_getitem_gradient() -> None:
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)

    with Tape() as tape:
        loss = ops.sum(x[:, 1:])

    np.testing.assert_array_equal(backward(tape, loss)[x], [[0.0, 1.0, 1.0], [0.0, 1.0, 1.0]])


def test_concat_stack() -> None:
    a = np.ones((2, 2))
    b = np.zeros((2, 1))

    assert ops.concat([a, b], axis=1).shape == (2, 3)
    assert ops.stack([a, a], axis=0).shape == (2, 2, 2)


def test_l2_normalize() -> None:
    values = ops.l2_normalize(Tensor([[3.0, 4.0], [0.0, 0.0]]), fallback=np.array([1.0, 0.0])).data

    np.testing.assert_allclose(values, [[0.6, 0.8], [1.0, 0.0]])


def test_l2_normalize_short_vector_gradient() -> None:
    x = Tensor([[0.0, 0.0]], requires_grad=True)

    with Tape() as tape:
        loss = ops.sum(ops.l2_normalize(x))

    np.testing.assert_array_equal(backward(tape, loss)[x], [[0.0, 0.0]])


def test_linear() -> None:
    x = np.array([[1.0, 2.0]])
    weight = np.array([[1.0, 0.0, 2.0], [0.0, 1.0, -1.0]])
    bias = np.array([0.5, 0.5, 0.5])

    np.testing.assert_array_equal(ops.linear(x, weight, bias).data, [[1.5, 2.5, 0.5]])

    with pytest.raises(ValueError):
        ops.linear(np.ones((1, 3)), weight)

    with pytest.raises(ValueError):
        ops.linear(x, weight, np.ones(2))


def test_layer_norm(rng: np.random.Generator) -> None:
    x = rng.normal(size=(4, 8))
    output = ops.layer_norm(Tensor(x)).data

    np.testing.assert_allclose(output.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(output.var(axis=-1), 1.0, rtol=1e-3)

    with pytest.raises(ValueError):
        ops.layer_norm(np.ones((2, 0)))


def test_softmax(rng: np.random.Generator) -> None:
    logits = rng.normal(size=(3, 5))
    output = ops.softmax(Tensor(logits), axis=-1).data

    np.testing.assert_allclose(output.sum(axis=-1), 1.0, rtol=0.0, atol=1e-12)
    assert (output > 0.0).all()

    # Large logits do not overflow
    large = ops.softmax(Tensor([1000.0, 1000.0]), axis=-1).data
    np.testing.assert_array_equal(large, [0.5, 0.5])


def test_softmax_singleton_axis() -> None:
    output = ops.softmax(Tensor([[3.0], [-7.0]]), axis=-1).data

    np.testing.assert_array_equal(output, [[1.0], [1.0]])


def test_grid_sample_pixel_centers() -> None:
    features = np.arange(6.0).reshape(1, 2, 3)

    # Corners of the normalized square are the centers of the corner pixels
    points = np.array([[-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0], [1.0, 1.0], [0.0, 0.0]])
    values = ops.grid_sample_bilinear(features, points).data

    np.testing.assert_allclose(values[:, 0], [0.0, 2.0, 3.0, 5.0, 2.5])


def test_grid_sample_zero_padding() -> None:
    features = np.ones((1, 4, 4))

    # Far outside gives zero, and half a pixel outside the border blends
    # with zero
    values = ops.grid_sample_bilinear(features, np.array([[5.0, 0.0], [-1.0 - 1.0 / 3.0, 0.0]])).data

    np.testing.assert_allclose(values[:, 0], [0.0, 0.5])


def test_grid_sample_batched(rng: np.random.Generator) -> None:
    features = rng.normal(size=(2, 3, 4, 5))
    points = rng.uniform(-1.0, 1.0, size=(2, 6, 2))

    output = ops.grid_sample_bilinear(features, points).data

    assert output.shape == (2, 6, 3)
    np.testing.assert_allclose(output[1], ops.grid_sample_bilinear(features[1], points[1]).data)

    with pytest.raises(ValueError):
        ops.grid_sample_bilinear(features, points[:1])

    with pytest.raises(ValueError):
        ops.grid_sample_bilinear(features[0], np.zeros((3, 3)))


def test_conv2d() -> None:
    x = np.arange(16.0).reshape(1, 4, 4)
    weight = np.ones((1, 1, 2, 2))

    output = ops.conv2d(x, weight, stride=2).data

    np.testing.assert_array_equal(output, [[[10.0, 18.0], [42.0, 50.0]]])

    with pytest.raises(ValueError):
        ops.conv2d(x, np.ones((1, 2, 2, 2)))

    with pytest.raises(ValueError):
        ops.conv2d(x, np.ones((1, 1, 5, 5)))


def test_upsample_nearest2x() -> None:
    x = Tensor([[[1.0, 2.0]]], requires_grad=True)

    with Tape() as tape:
        output = ops.upsample_nearest2x(x)
        loss = ops.sum(output)

    np.testing.assert_array_equal(output.data, [[[1.0, 1.0, 2.0, 2.0], [1.0, 1.0, 2.0, 2.0]]])
    np.testing.assert_array_equal(backward(tape, loss)[x], [[[4.0, 4.0]]])


@pytest.mark.parametrize(
    "name",
    ["exp", "log", "sqrt", "square", "sigmoid", "softmax", "l2_normalize", "layer_norm"],
)
def test_unary_gradients(rng: np.random.Generator, name: str) -> None:
    x = Tensor(np.abs(rng.normal(size=(3, 4))) + 0.5)

    function = getattr(ops, name)
    report = grad_check(lambda value: _weighted_sum(function(value)), [x])

    assert report.passed, report.failures


def test_structural_gradients(rng: np.random.Generator) -> None:
    x = Tensor(rng.normal(size=(2, 3, 4)))

    for function in (
        lambda value: ops.square(ops.transpose(value, (1, 2, 0))),
        lambda value: ops.square(ops.reshape(value, (6, 4))),
        lambda value: ops.square(ops.roll(value, 1, axis=2)),
        lambda value: ops.mean(ops.square(value), axis=(0, 2)),
    ):
        report = grad_check(lambda value: _weighted_sum(function(value)), [x])
        assert report.passed, report.failures


def test_conv2d_gradient(rng: np.random.Generator) -> None:
    inputs = [
        Tensor(rng.normal(size=(2, 2, 5, 5))),
        Tensor(rng.normal(size=(3, 2, 3, 3))),
        Tensor(rng.normal(size=3)),
    ]

    report = grad_check(lambda x, w, b: _weighted_sum(ops.conv2d(x, w, b, stride=2, padding=1)), inputs)

    assert report.passed, report.failures


def test_grid_sample_gradient(rng: np.random.Generator) -> None:
    features = Tensor(rng.normal(size=(2, 4, 5)))

    # Points away from the pixel lattice
    points = Tensor(np.array([[-0.3, 0.1], [0.55, -0.8], [0.9, 0.45]]))

    report = grad_check(lambda f, p: _weighted_sum(ops.grid_sample_bilinear(f, p)), [features, points])

    assert report.passed, report.failures
