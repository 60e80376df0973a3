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
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "square",
    "sigmoid",
    "relu",
    "clamp",
    "where",
    "pass_through",
    "sum",
    "mean",
    "matmul",
    "reshape",
    "transpose",
    "concat",
    "stack",
    "take",
    "getitem",
    "roll",
    "l2_normalize",
    "linear",
    "layer_norm",
    "softmax",
    "grid_sample_bilinear",
    "conv2d",
    "upsample_nearest2x",
]

import typing

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..constants import LAYER_NORM_EPS
from .tensor import Tensor, as_tensor, record

# The functions in this module are the differentiable operations. Each one
# computes the forward values with numpy and records its backward rule on
# the active tape.


def _unbroadcast(gradient: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum the gradient over the broadcast axes back to the shape."""

    while gradient.ndim > len(shape):
        gradient = gradient.sum(axis=0)

    for axis, size in enumerate(shape):
        if (size == 1) and (gradient.shape[axis] != 1):
            gradient = gradient.sum(axis=axis, keepdims=True)

    return gradient


def _expand_reduced(
    gradient: np.ndarray,
    shape: tuple[int, ...],
    axis: int | tuple[int, ...] | None,
    keepdims: bool,
) -> np.ndarray:
    """Broadcast the gradient of a reduction back to the input shape."""

    if (axis is not None) and (not keepdims):
        axes = (axis,) if isinstance(axis, int) else axis
        gradient = np.expand_dims(gradient, tuple(a % len(shape) for a in axes))

    return np.broadcast_to(gradient, shape).copy()


def add(a: typing.Any, b: typing.Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        "add",
        (a, b),
        Tensor(a.data + b.data),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: typing.Any, b: typing.Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        "sub",
        (a, b),
        Tensor(a.data - b.data),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: typing.Any, b: typing.Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        "mul",
        (a, b),
        Tensor(a.data * b.data),
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def div(a: typing.Any, b: typing.Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        "div",
        (a, b),
        Tensor(a.data / b.data),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / np.square(b.data), b.shape),
        ),
    )


def neg(x: typing.Any) -> Tensor:
    x = as_tensor(x)
    return record("neg", (x,), Tensor(-x.data), lambda g: (-g,))


def exp(x: typing.Any) -> Tensor:
    x = as_tensor(x)
    output = Tensor(np.exp(x.data))
    return record("exp", (x,), output, lambda g: (g * output.data,))


def log(x: typing.Any) -> Tensor:
    x = as_tensor(x)
    return record("log", (x,), Tensor(np.log(x.data)), lambda g: (g / x.data,))


def sqrt(x: typing.Any) -> Tensor:
    x = as_tensor(x)
    output = Tensor(np.sqrt(x.data))
    return record("sqrt", (x,), output, lambda g: (0.5 * g / output.data,))


def square(x: typing.Any) -> Tensor:
    x = as_tensor(x)
    return record("square", (x,), Tensor(np.square(x.data)), lambda g: (2.0 * g * x.data,))


def sigmoid(x: typing.Any) -> Tensor:
    """Logistic function, evaluated without overflow for large |x|."""

    x = as_tensor(x)
    decay = np.exp(-np.abs(x.data))
    output = Tensor(np.where(x.data >= 0.0, 1.0 / (1.0 + decay), decay / (1.0 + decay)))

    return record(
        "sigmoid",
        (x,),
        output,
        lambda g: (g * output.data * (1.0 - output.data),),
    )


def relu(x: typing.Any) -> Tensor:
    x = as_tensor(x)
    return record(
        "relu",
        (x,),
        Tensor(np.maximum(x.data, 0.0)),
        lambda g: (g * (x.data > 0.0),),
    )


def clamp(x: typing.Any, low: float | None = None, high: float | None = None) -> Tensor:
    """Clip the values into [low, high].

    The gradient passes where the input lies inside the closed interval.
    """

    x = as_tensor(x)

    inside = np.ones(x.shape, dtype=bool)
    if low is not None:
        inside &= x.data >= low
    if high is not None:
        inside &= x.data <= high

    return record(
        "clamp",
        (x,),
        Tensor(np.clip(x.data, low, high)),
        lambda g: (g * inside,),
    )


def where(condition: np.ndarray, a: typing.Any, b: typing.Any) -> Tensor:
    """Select from a where the condition holds and from b elsewhere.

    Parameters
    ----------
    condition : `numpy.ndarray`
        Boolean selector (not differentiable).
    a : `Tensor`
        Values where the condition is True.
    b : `Tensor`
        Values where the condition is False.

    Returns
    -------
    `Tensor`
        Selected values.
    """

    a, b = as_tensor(a), as_tensor(b)
    condition = np.asarray(condition, dtype=bool)

    return record(
        "where",
        (a, b),
        Tensor(np.where(condition, a.data, b.data)),
        lambda g: (
            _unbroadcast(np.where(condition, g, 0.0), a.shape),
            _unbroadcast(np.where(condition, 0.0, g), b.shape),
        ),
    )


def pass_through(condition: np.ndarray, value: typing.Any, x: typing.Any) -> Tensor:
    """Replace the values of x by the given ones where the condition holds.
    The gradient flows to x unchanged everywhere (straight-through).

    Parameters
    ----------
    condition : `numpy.ndarray`
        Boolean selector, broadcastable to the shape of x.
    value : `Tensor` or `numpy.ndarray`
        Forward values where the condition is True. No gradient flows to
        them.
    x : `Tensor`
        Input tensor.

    Returns
    -------
    `Tensor`
        Values of x with the selected entries replaced.
    """

    x = as_tensor(x)
    value = value.data if isinstance(value, Tensor) else np.asarray(value)
    output = np.where(np.asarray(condition, dtype=bool), value, x.data).astype(x.data.dtype, copy=False)

    return record("pass_through", (x,), Tensor(output), lambda g: (g,))


def sum(
    x: typing.Any,
    axis: int | tuple[int, ...] | None = None,
    keepdims: bool = False,
) -> Tensor:
    x = as_tensor(x)
    return record(
        "sum",
        (x,),
        Tensor(np.sum(x.data, axis=axis, keepdims=keepdims)),
        lambda g: (_expand_reduced(g, x.shape, axis, keepdims),),
    )


def mean(
    x: typing.Any,
    axis: int | tuple[int, ...] | None = None,
    keepdims: bool = False,
) -> Tensor:
    x = as_tensor(x)
    count = x.size // max(np.sum(x.data, axis=axis, keepdims=keepdims).size, 1)
    return record(
        "mean",
        (x,),
        Tensor(np.mean(x.data, axis=axis, keepdims=keepdims)),
        lambda g: (_expand_reduced(g, x.shape, axis, keepdims) / count,),
    )


def matmul(a: typing.Any, b: typing.Any) -> Tensor:
    """Matrix product over the last two axes, broadcast over the others.

    Raises
    ------
    `ValueError`
        When an operand has less than 2 dimensions or the inner dimensions
        mismatch.
    """

    a, b = as_tensor(a), as_tensor(b)
    if (a.ndim < 2) or (b.ndim < 2):
        raise ValueError(f"matmul() needs matrices, got the shapes {a.shape} and {b.shape}.")

    if a.shape[-1] != b.shape[-2]:
        raise ValueError(
            f"matmul() inner dimensions mismatch: axis -1 of {a.shape} and axis -2 of {b.shape}."
        )

    return record(
        "matmul",
        (a, b),
        Tensor(a.data @ b.data),
        lambda g: (
            _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape),
            _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape),
        ),
    )


def reshape(x: typing.Any, shape: typing.Sequence[int]) -> Tensor:
    x = as_tensor(x)
    return record(
        "reshape",
        (x,),
        Tensor(x.data.reshape(tuple(shape))),
        lambda g: (g.reshape(x.shape),),
    )


def transpose(x: typing.Any, axes: typing.Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    order = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(order))
    return record(
        "transpose",
        (x,),
        Tensor(np.transpose(x.data, order)),
        lambda g: (np.transpose(g, inverse),),
    )


def concat(tensors: typing.Sequence[typing.Any], axis: int = 0) -> Tensor:
    tensors = [as_tensor(tensor) for tensor in tensors]
    splits = np.cumsum([tensor.shape[axis] for tensor in tensors])[:-1]
    return record(
        "concat",
        tensors,
        Tensor(np.concatenate([tensor.data for tensor in tensors], axis=axis)),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def stack(tensors: typing.Sequence[typing.Any], axis: int = 0) -> Tensor:
    tensors = [as_tensor(tensor) for tensor in tensors]
    return record(
        "stack",
        tensors,
        Tensor(np.stack([tensor.data for tensor in tensors], axis=axis)),
        lambda g: tuple(np.take(g, idx, axis=axis) for idx in range(len(tensors))),
    )


def take(x: typing.Any, indices: np.ndarray, axis: int = 0) -> Tensor:
    """Gather along an axis with integer indices (repeats allowed).

    The gradient of a repeated index is the sum over its repeats.
    """

    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.int64)
    axis = axis % x.ndim

    def backward_take(g: np.ndarray) -> tuple[np.ndarray]:
        gradient = np.zeros_like(x.data)
        gradient_gather = np.moveaxis(
            g,
            list(range(axis, axis + indices.ndim)),
            list(range(indices.ndim)),
        )
        np.add.at(np.moveaxis(gradient, axis, 0), indices, gradient_gather)
        return (gradient,)

    return record("take", (x,), Tensor(np.take(x.data, indices, axis=axis)), backward_take)


def getitem(x: typing.Any, key: typing.Any) -> Tensor:
    x = as_tensor(x)

    def backward_getitem(g: np.ndarray) -> tuple[np.ndarray]:
        gradient = np.zeros_like(x.data)
        np.add.at(gradient, key, g)
        return (gradient,)

    return record("getitem", (x,), Tensor(np.array(x.data[key])), backward_getitem)


def roll(x: typing.Any, shift: int | tuple[int, ...], axis: int | tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    shift_back = -shift if isinstance(shift, int) else tuple(-value for value in shift)
    return record(
        "roll",
        (x,),
        Tensor(np.roll(x.data, shift, axis=axis)),
        lambda g: (np.roll(g, shift_back, axis=axis),),
    )


def l2_normalize(
    x: typing.Any,
    axis: int = -1,
    eps: float = 1e-8,
    fallback: np.ndarray | None = None,
) -> Tensor:
    """Scale the vectors along an axis to the unit length.

    Parameters
    ----------
    x : `Tensor`
        Vectors.
    axis : `int`, optional
        Vector axis. (the default is -1)
    eps : `float`, optional
        Vectors shorter than this are replaced by the fallback. (the default
        is 1e-8)
    fallback : `numpy.ndarray` or None, optional
        Replacement of the too short vectors. None means zeros. (the default
        is None)

    Returns
    -------
    `Tensor`
        Unit vectors. The replaced vectors get no gradient.
    """

    x = as_tensor(x)
    norm = np.sqrt(np.sum(np.square(x.data), axis=axis, keepdims=True))
    is_short = norm < eps

    replacement = np.zeros_like(x.data) if fallback is None else np.broadcast_to(fallback, x.shape)
    safe_norm = np.where(is_short, 1.0, norm)
    output = Tensor(np.where(is_short, replacement, x.data / safe_norm))

    def backward_l2_normalize(g: np.ndarray) -> tuple[np.ndarray]:
        projection = np.sum(g * output.data, axis=axis, keepdims=True)
        gradient = (g - output.data * projection) / safe_norm
        return (np.where(is_short, 0.0, gradient),)

    return record("l2_normalize", (x,), output, backward_l2_normalize)


def linear(x: typing.Any, weight: typing.Any, bias: typing.Any | None = None) -> Tensor:
    """Affine map y = x W + b over the last axis.

    Parameters
    ----------
    x : `Tensor`
        Input with the shape of [..., Cin].
    weight : `Tensor`
        Weight with the shape of [Cin, Cout].
    bias : `Tensor` or None, optional
        Bias with the shape of [Cout]. (the default is None)

    Returns
    -------
    `Tensor`
        Output with the shape of [..., Cout].

    Raises
    ------
    `ValueError`
        When the shapes mismatch.
    """

    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2:
        raise ValueError(f"linear() weight must be [Cin, Cout], got the shape {weight.shape}.")

    num_in, num_out = weight.shape
    if x.shape[-1] != num_in:
        raise ValueError(
            f"linear() mismatch between axis -1 of x {x.shape} and axis 0 (Cin) of weight {weight.shape}."
        )

    output = x.data @ weight.data
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (num_out,):
            raise ValueError(
                f"linear() bias must have the shape ({num_out},) to match axis 1 (Cout) of weight, "
                f"got {bias.shape}."
            )

        output = output + bias.data
        inputs.append(bias)

    def backward_linear(g: np.ndarray) -> list[np.ndarray]:
        g_flat = g.reshape(-1, num_out)
        gradients = [
            g @ weight.data.T,
            x.data.reshape(-1, num_in).T @ g_flat,
        ]
        if bias is not None:
            gradients.append(g_flat.sum(axis=0))

        return gradients

    return record("linear", inputs, Tensor(output), backward_linear)


def layer_norm(
    x: typing.Any,
    gamma: typing.Any | None = None,
    beta: typing.Any | None = None,
    eps: float = LAYER_NORM_EPS,
) -> Tensor:
    """Normalize the last axis to zero mean and unit variance.

    Parameters
    ----------
    x : `Tensor`
        Input with the shape of [..., C].
    gamma : `Tensor` or None, optional
        Scale with the shape of [C]. None means ones. (the default is None)
    beta : `Tensor` or None, optional
        Shift with the shape of [C]. None means zeros. (the default is None)
    eps : `float`, optional
        Added to the biased variance inside the square root. (the default is
        LAYER_NORM_EPS)

    Returns
    -------
    `Tensor`
        Normalized values.

    Raises
    ------
    `ValueError`
        When the normalized axis is empty.
    """

    x = as_tensor(x)
    if (x.ndim == 0) or (x.shape[-1] == 0):
        raise ValueError(f"layer_norm() needs a non-empty last axis, got the shape {x.shape}.")

    average = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - average
    inverse_std = 1.0 / np.sqrt(np.mean(np.square(centered), axis=-1, keepdims=True) + eps)
    normalized = centered * inverse_std

    inputs = [x]
    output = normalized
    if gamma is not None:
        gamma = as_tensor(gamma)
        output = output * gamma.data
        inputs.append(gamma)

    if beta is not None:
        beta = as_tensor(beta)
        output = output + beta.data
        inputs.append(beta)

    def backward_layer_norm(g: np.ndarray) -> list[np.ndarray]:
        g_normalized = g if gamma is None else g * gamma.data
        gradient_x = inverse_std * (
            g_normalized
            - g_normalized.mean(axis=-1, keepdims=True)
            - normalized * np.mean(g_normalized * normalized, axis=-1, keepdims=True)
        )

        gradients = [gradient_x]
        if gamma is not None:
            gradients.append((g * normalized).reshape(-1, x.shape[-1]).sum(axis=0))
        if beta is not None:
            gradients.append(g.reshape(-1, x.shape[-1]).sum(axis=0))

        return gradients

    return record("layer_norm", inputs, Tensor(output), backward_layer_norm)


def softmax(x: typing.Any, axis: int = -1) -> Tensor:
    """Normalized exponential along an axis.

    The maximum is subtracted first so large logits do not overflow.
    """

    x = as_tensor(x)
    shifted = np.exp(x.data - np.max(x.data, axis=axis, keepdims=True))
    output = Tensor(shifted / np.sum(shifted, axis=axis, keepdims=True))

    return record(
        "softmax",
        (x,),
        output,
        lambda g: (output.data * (g - np.sum(g * output.data, axis=axis, keepdims=True)),),
    )


def grid_sample_bilinear(features: typing.Any, points: typing.Any) -> Tensor:
    """Sample the feature maps at normalized points with bilinear weights.

    The point (-1, -1) is the center of the top-left pixel and (1, 1) is the
    center of the bottom-right pixel. The first coordinate runs along the
    width. Corners outside of the map contribute zeros.

    Parameters
    ----------
    features : `Tensor`
        Feature map with the shape of [Cf, H, W], or a batch of them with the
        shape of [B, Cf, H, W].
    points : `Tensor`
        Points with the shape of [..., 2]. With batched maps, the leading
        axis of the points is the batch axis: [B, ..., 2].

    Returns
    -------
    `Tensor`
        Samples with the shape of [..., Cf] ([B, ..., Cf] for batched maps).

    Raises
    ------
    `ValueError`
        When the shapes do not match.
    """

    features, points = as_tensor(features), as_tensor(points)
    if features.ndim not in (3, 4):
        raise ValueError(f"Feature map must be [Cf, H, W] or [B, Cf, H, W], got {features.shape}.")

    if points.shape[-1] != 2:
        raise ValueError(f"Axis -1 of the points must have 2 coordinates, got {points.shape}.")

    is_batched = features.ndim == 4
    maps = features.data if is_batched else features.data[np.newaxis]
    coordinates = points.data if is_batched else points.data[np.newaxis]
    if coordinates.shape[0] != maps.shape[0]:
        raise ValueError(
            f"Batch axis mismatch: axis 0 of the maps {features.shape} and of the points {points.shape}."
        )

    num_batch, num_channel, height, width = maps.shape
    coordinates = coordinates.reshape(num_batch, -1, 2)

    pixel_x = (coordinates[..., 0] + 1.0) * 0.5 * (width - 1)
    pixel_y = (coordinates[..., 1] + 1.0) * 0.5 * (height - 1)
    x0 = np.floor(pixel_x)
    y0 = np.floor(pixel_y)
    weight_x = pixel_x - x0
    weight_y = pixel_y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    # Corners in the order of (x0, y0), (x1, y0), (x0, y1), (x1, y1)
    corners = [
        (x0, y0, (1.0 - weight_x) * (1.0 - weight_y)),
        (x0 + 1, y0, weight_x * (1.0 - weight_y)),
        (x0, y0 + 1, (1.0 - weight_x) * weight_y),
        (x0 + 1, y0 + 1, weight_x * weight_y),
    ]

    batch = np.broadcast_to(np.arange(num_batch)[:, np.newaxis], x0.shape)
    maps_last = np.moveaxis(maps, 1, -1)

    output = np.zeros(x0.shape + (num_channel,), dtype=maps.dtype)
    gathered = list()
    for corner_x, corner_y, weight in corners:
        is_inside = (corner_x >= 0) & (corner_x < width) & (corner_y >= 0) & (corner_y < height)
        index_x = np.clip(corner_x, 0, width - 1)
        index_y = np.clip(corner_y, 0, height - 1)

        value = maps_last[batch, index_y, index_x] * is_inside[..., np.newaxis]
        output += weight[..., np.newaxis] * value
        gathered.append((is_inside, index_x, index_y, weight, value))

    output_shape = points.shape[:-1] + (num_channel,)
    if is_batched:
        output_shape = (num_batch,) + points.shape[1:-1] + (num_channel,)

    def backward_grid_sample(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        g_flat = g.reshape(num_batch, -1, num_channel)

        gradient_maps = np.zeros_like(maps_last)
        for is_inside, index_x, index_y, weight, _ in gathered:
            np.add.at(
                gradient_maps,
                (batch[is_inside], index_y[is_inside], index_x[is_inside]),
                (weight[..., np.newaxis] * g_flat)[is_inside],
            )

        gradient_maps = np.moveaxis(gradient_maps, -1, 1)
        if not is_batched:
            gradient_maps = gradient_maps[0]

        # Derivatives of the bilinear weights with respect to the fractional
        # offsets inside the cell
        v00, v10, v01, v11 = (item[-1] for item in gathered)
        wx = weight_x[..., np.newaxis]
        wy = weight_y[..., np.newaxis]
        d_weight_x = (1.0 - wy) * (v10 - v00) + wy * (v11 - v01)
        d_weight_y = (1.0 - wx) * (v01 - v00) + wx * (v11 - v10)

        gradient_points = np.stack(
            [
                np.sum(g_flat * d_weight_x, axis=-1) * 0.5 * (width - 1),
                np.sum(g_flat * d_weight_y, axis=-1) * 0.5 * (height - 1),
            ],
            axis=-1,
        ).reshape(points.shape)

        return gradient_maps, gradient_points

    return record(
        "grid_sample_bilinear",
        (features, points),
        Tensor(output.reshape(output_shape)),
        backward_grid_sample,
    )


def conv2d(
    x: typing.Any,
    weight: typing.Any,
    bias: typing.Any | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Two-dimensional cross-correlation with the zero padding.

    Parameters
    ----------
    x : `Tensor`
        Input with the shape of [Cin, H, W] or [B, Cin, H, W].
    weight : `Tensor`
        Kernel with the shape of [Cout, Cin, k, k].
    bias : `Tensor` or None, optional
        Bias with the shape of [Cout]. (the default is None)
    stride : `int`, optional
        Stride. (the default is 1)
    padding : `int`, optional
        Zero padding on each side. (the default is 0)

    Returns
    -------
    `Tensor`
        Output with the shape of [Cout, Ho, Wo] or [B, Cout, Ho, Wo].

    Raises
    ------
    `ValueError`
        When the channels mismatch or the kernel is larger than the padded
        input.
    """

    x, weight = as_tensor(x), as_tensor(weight)
    is_batched = x.ndim == 4
    images = x.data if is_batched else x.data[np.newaxis]

    num_out, num_in, kernel, _ = weight.shape
    if images.shape[1] != num_in:
        raise ValueError(
            f"conv2d() mismatch between the channel axis of x {x.shape} and axis 1 of weight {weight.shape}."
        )

    padded = np.pad(images, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if min(padded.shape[-2:]) < kernel:
        raise ValueError(f"conv2d() kernel {kernel} is larger than the padded input {padded.shape[-2:]}.")

    # [B, Cin, Ho, Wo, k, k]
    windows = sliding_window_view(padded, (kernel, kernel), axis=(-2, -1))[:, :, ::stride, ::stride]
    height_out, width_out = windows.shape[2:4]

    output = np.einsum("bchwij,ocij->bohw", windows, weight.data, optimize=True)
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        output = output + bias.data[:, np.newaxis, np.newaxis]
        inputs.append(bias)

    def backward_conv2d(g: np.ndarray) -> list[np.ndarray]:
        g_batch = g if is_batched else g[np.newaxis]

        columns = np.einsum("bohw,ocij->bchwij", g_batch, weight.data, optimize=True)
        gradient_padded = np.zeros_like(padded)
        for row in range(kernel):
            for col in range(kernel):
                gradient_padded[
                    :,
                    :,
                    row : row + stride * height_out : stride,
                    col : col + stride * width_out : stride,
                ] += columns[..., row, col]

        gradient_x = gradient_padded[
            :,
            :,
            padding : padding + images.shape[2],
            padding : padding + images.shape[3],
        ]

        gradients = [
            gradient_x if is_batched else gradient_x[0],
            np.einsum("bohw,bchwij->ocij", g_batch, windows, optimize=True),
        ]
        if bias is not None:
            gradients.append(g_batch.sum(axis=(0, 2, 3)))

        return gradients

    return record(
        "conv2d",
        inputs,
        Tensor(output if is_batched else output[0]),
        backward_conv2d,
    )


def upsample_nearest2x(x: typing.Any) -> Tensor:
    """Repeat each pixel of the last two axes into a 2x2 block."""

    x = as_tensor(x)
    height, width = x.shape[-2:]
    return record(
        "upsample_nearest2x",
        (x,),
        Tensor(np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)),
        lambda g: (g.reshape(x.shape[:-2] + (height, 2, width, 2)).sum(axis=(-3, -1)),),
    )
