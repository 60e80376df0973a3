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

__all__ = ["Module", "Linear", "LayerNorm", "Conv2d", "MLP"]

import typing

import numpy as np

from . import ops
from .tensor import Parameter, Tensor


class Module:
    """Base class of the layers that own parameters.

    Parameters and sub-modules are discovered from the instance attributes,
    including the lists of sub-modules, in the assignment order.
    """

    def __call__(self, *args: typing.Any, **kwargs: typing.Any) -> typing.Any:
        return self.forward(*args, **kwargs)

    def forward(self, *args: typing.Any, **kwargs: typing.Any) -> typing.Any:
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> typing.Iterator[tuple[str, Parameter]]:
        """Iterate over the parameters with their dotted names.

        Parameters
        ----------
        prefix : `str`, optional
            Prefix of the names. (the default is "")

        Yields
        ------
        name : `str`
            Dotted name.
        parameter : `Parameter`
            Parameter.
        """

        for name, value in vars(self).items():
            full_name = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full_name, value

            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=f"{full_name}.")

            elif isinstance(value, (list, tuple)):
                for idx, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(prefix=f"{full_name}.{idx}.")

    def parameters(self) -> list[Parameter]:
        """Get the parameters.

        Returns
        -------
        `list` [`Parameter`]
            Parameters.
        """
        return [parameter for _, parameter in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        """Get the parameters that require the gradient.

        Returns
        -------
        `list` [`Parameter`]
            Trainable parameters.
        """
        return [parameter for parameter in self.parameters() if parameter.requires_grad]

    def freeze(self, is_frozen: bool = True) -> None:
        """Freeze the parameters so they get no gradient.

        Parameters
        ----------
        is_frozen : `bool`, optional
            Freeze or unfreeze. (the default is True)
        """

        for parameter in self.parameters():
            parameter.requires_grad = not is_frozen

    def num_parameters(self) -> int:
        """Get the total number of scalar parameters.

        Returns
        -------
        `int`
            Number of the scalars.
        """
        return int(np.sum([parameter.size for parameter in self.parameters()]))

    def state_dict(self) -> dict[str, np.ndarray]:
        """Copy the parameter values.

        Returns
        -------
        `dict`
            Values keyed by the dotted names.
        """
        return {name: parameter.data.copy() for name, parameter in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        """Load the parameter values.

        Parameters
        ----------
        state : `dict`
            Values keyed by the dotted names.

        Raises
        ------
        `ValueError`
            When a name is missing or unexpected, or a shape mismatches.
        """

        parameters = dict(self.named_parameters())

        missing = sorted(set(parameters) - set(state))
        unexpected = sorted(set(state) - set(parameters))
        if missing or unexpected:
            raise ValueError(f"State mismatch. Missing: {missing}. Unexpected: {unexpected}.")

        for name, parameter in parameters.items():
            value = np.asarray(state[name])
            if value.shape != parameter.shape:
                raise ValueError(f"Shape mismatch of {name}: {value.shape} != {parameter.shape}.")

            parameter.data[...] = value


class Linear(Module):
    """Affine layer y = x W + b.

    Parameters
    ----------
    num_in : `int`
        Input width.
    num_out : `int`
        Output width.
    rng : `numpy.random.Generator`
        Random generator of the initial weights.
    has_bias : `bool`, optional
        Has the bias or not. (the default is True)
    is_zero_init : `bool`, optional
        Start with zero weights instead of the Xavier-uniform ones. (the
        default is False)

    Attributes
    ----------
    weight : `Parameter`
        Weight with the shape of [num_in, num_out].
    bias : `Parameter` or None
        Bias with the shape of [num_out].
    """

    def __init__(
        self,
        num_in: int,
        num_out: int,
        rng: np.random.Generator,
        has_bias: bool = True,
        is_zero_init: bool = False,
    ) -> None:
        if is_zero_init:
            weight = np.zeros((num_in, num_out))
        else:
            limit = np.sqrt(6.0 / (num_in + num_out))
            weight = rng.uniform(-limit, limit, size=(num_in, num_out))

        self.weight = Parameter(weight, name="weight")
        self.bias = Parameter(np.zeros(num_out), name="bias") if has_bias else None

    @property
    def num_in(self) -> int:
        return self.weight.shape[0]

    @property
    def num_out(self) -> int:
        return self.weight.shape[1]

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    """Layer normalization over the last axis.

    Parameters
    ----------
    num_channel : `int`
        Width of the normalized axis.
    is_affine : `bool`, optional
        Learn the scale and shift or not. (the default is True)
    """

    def __init__(self, num_channel: int, is_affine: bool = True) -> None:
        self.gamma = Parameter(np.ones(num_channel), name="gamma") if is_affine else None
        self.beta = Parameter(np.zeros(num_channel), name="beta") if is_affine else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta)


class Conv2d(Module):
    """Convolution layer with the He-normal initial weights.

    Parameters
    ----------
    num_in : `int`
        Input channels.
    num_out : `int`
        Output channels.
    kernel : `int`
        Kernel size.
    rng : `numpy.random.Generator`
        Random generator of the initial weights.
    stride : `int`, optional
        Stride. (the default is 1)
    padding : `int`, optional
        Zero padding. (the default is 0)
    """

    def __init__(
        self,
        num_in: int,
        num_out: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
    ) -> None:
        std = np.sqrt(2.0 / (num_in * kernel * kernel))
        self.weight = Parameter(rng.normal(0.0, std, size=(num_out, num_in, kernel, kernel)), name="weight")
        self.bias = Parameter(np.zeros(num_out), name="bias")

        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class MLP(Module):
    """Stack of linear layers with the ReLU in between.

    Parameters
    ----------
    sizes : `list` [`int`]
        Widths from the input to the output.
    rng : `numpy.random.Generator`
        Random generator of the initial weights.
    is_zero_last : `bool`, optional
        Start the last layer with zero weights. (the default is False)
    """

    def __init__(
        self,
        sizes: typing.Sequence[int],
        rng: np.random.Generator,
        is_zero_last: bool = False,
    ) -> None:
        if len(sizes) < 2:
            raise ValueError(f"MLP needs at least the input and output widths, got {list(sizes)}.")

        num_layer = len(sizes) - 1
        self.layers = [
            Linear(
                sizes[idx],
                sizes[idx + 1],
                rng,
                is_zero_init=(is_zero_last and idx == num_layer - 1),
            )
            for idx in range(num_layer)
        ]

    def forward(self, x: Tensor) -> Tensor:
        for idx, layer in enumerate(self.layers):
            x = layer(x)
            if idx < len(self.layers) - 1:
                x = ops.relu(x)

        return x
