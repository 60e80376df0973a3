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
    "Tensor",
    "Parameter",
    "Tape",
    "TapeRecord",
    "GradientMap",
    "record",
    "backward",
    "detach",
    "as_tensor",
    "set_default_dtype",
    "get_default_dtype",
]

import typing
from contextvars import ContextVar
from dataclasses import dataclass

import numpy as np

# Scalar type of every new tensor. The 64-bit default gives the gradient
# checks enough headroom.
_default_dtype: type[np.floating] = np.float64

# Tape that records the operations of the current forward pass
_active_tape: ContextVar["Tape | None"] = ContextVar("active_tape", default=None)


def set_default_dtype(dtype: type[np.floating]) -> None:
    """Set the scalar type of the new tensors.

    Parameters
    ----------
    dtype : `numpy.float64` or `numpy.float32`
        Scalar type.

    Raises
    ------
    `ValueError`
        When the scalar type is not supported.
    """

    global _default_dtype

    if dtype not in (np.float64, np.float32):
        raise ValueError(f"Unsupported scalar type: {dtype}. Use numpy.float64 or numpy.float32.")

    _default_dtype = dtype


def get_default_dtype() -> type[np.floating]:
    """Get the scalar type of the new tensors.

    Returns
    -------
    `type`
        Scalar type.
    """
    return _default_dtype


class Tensor:
    """Dense tensor with the reverse-mode differentiation support.

    Parameters
    ----------
    data : `numpy.ndarray`, `float`, or `list`
        Values. They are converted to the default scalar type.
    requires_grad : `bool`, optional
        Gradient is needed for this tensor or not. (the default is False)
    name : `str`, optional
        Name used in the error messages. (the default is "")

    Attributes
    ----------
    data : `numpy.ndarray`
        Contiguous values.
    requires_grad : `bool`
        Gradient is needed for this tensor or not.
    name : `str`
        Name of the tensor.
    """

    # Make numpy defer the binary operators to this class
    __array_priority__ = 1000

    def __init__(
        self,
        data: typing.Any,
        requires_grad: bool = False,
        name: str = "",
    ) -> None:
        self.data = np.ascontiguousarray(data, dtype=_default_dtype)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        """Get the values.

        Returns
        -------
        `numpy.ndarray`
            Values (not a copy).
        """
        return self.data

    def item(self) -> float:
        """Get the value of a single-element tensor.

        Returns
        -------
        `float`
            Value.
        """
        if self.data.size != 1:
            raise ValueError(f"Only a single-element tensor has an item, got the shape {self.shape}.")

        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f"'{self.name}', " if self.name else ""
        return f"Tensor({label}shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # The arithmetic is delegated to the operations module, which records the
    # backward rules on the active tape.

    def __add__(self, other: typing.Any) -> "Tensor":
        from . import ops

        return ops.add(self, other)

    def __radd__(self, other: typing.Any) -> "Tensor":
        from . import ops

        return ops.add(other, self)

    def __sub__(self, other: typing.Any) -> "Tensor":
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other: typing.Any) -> "Tensor":
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other: typing.Any) -> "Tensor":
        from . import ops

        return ops.mul(self, other)

    def __rmul__(self, other: typing.Any) -> "Tensor":
        from . import ops

        return ops.mul(other, self)

    def __truediv__(self, other: typing.Any) -> "Tensor":
        from . import ops

        return ops.div(self, other)

    def __rtruediv__(self, other: typing.Any) -> "Tensor":
        from . import ops

        return ops.div(other, self)

    def __neg__(self) -> "Tensor":
        from . import ops

        return ops.neg(self)

    def __matmul__(self, other: typing.Any) -> "Tensor":
        from . import ops

        return ops.matmul(self, other)

    def __getitem__(self, key: typing.Any) -> "Tensor":
        from . import ops

        return ops.getitem(self, key)

    def reshape(self, *shape: typing.Any) -> "Tensor":
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        from . import ops

        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes if axes else None)

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> "Tensor":
        from . import ops

        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> "Tensor":
        from . import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """Trainable tensor, which always requires the gradient.

    Parameters
    ----------
    data : `numpy.ndarray`
        Initial values.
    name : `str`, optional
        Name of the parameter. (the default is "")
    """

    def __init__(self, data: typing.Any, name: str = "") -> None:
        super().__init__(data, requires_grad=True, name=name)


@dataclass
class TapeRecord:
    """Recorded operation on the tape."""

    # Name of the operation
    name: str

    # Input tensors
    inputs: tuple[Tensor, ...]

    # Output tensor
    output: Tensor

    # Backward rule: gradient of the output to the gradients of the inputs
    # (None for an input without the gradient)
    backward: typing.Callable[[np.ndarray], typing.Sequence[np.ndarray | None]]


class Tape:
    """Reverse-mode differentiation record.

    The tape is activated as a context manager. Only the operations executed
    inside the context and having at least one input that requires the
    gradient are recorded. A tape is owned by a single forward/backward pass.

    Attributes
    ----------
    records : `list` [`TapeRecord`]
        Recorded operations in the execution order.
    """

    def __init__(self) -> None:
        self.records: list[TapeRecord] = []
        self._token: typing.Any = None

    def __enter__(self) -> "Tape":
        if self._token is not None:
            raise RuntimeError("The tape is already active.")

        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *args: typing.Any) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def is_active(self) -> bool:
        return self._token is not None


def record(
    name: str,
    inputs: typing.Sequence[Tensor],
    output: Tensor,
    backward_rule: typing.Callable[[np.ndarray], typing.Sequence[np.ndarray | None]],
) -> Tensor:
    """Record an operation on the active tape.

    Parameters
    ----------
    name : `str`
        Name of the operation.
    inputs : `list` [`Tensor`]
        Input tensors.
    output : `Tensor`
        Output tensor.
    backward_rule : `Callable`
        Maps the gradient of the output to the gradients of the inputs.

    Returns
    -------
    output : `Tensor`
        Output tensor. It requires the gradient if the operation is
        recorded.
    """

    tape = _active_tape.get()
    if (tape is None) or not any(tensor.requires_grad for tensor in inputs):
        return output

    output.requires_grad = True
    tape.records.append(TapeRecord(name, tuple(inputs), output, backward_rule))

    return output


class GradientMap:
    """Gradients of the leaf tensors.

    Parameters
    ----------
    tensors : `dict`
        Leaf tensors keyed by their identity.
    gradients : `dict`
        Gradients keyed by the identity of the tensors.
    """

    def __init__(self, tensors: dict[int, Tensor], gradients: dict[int, np.ndarray]) -> None:
        self._tensors = tensors
        self._gradients = gradients

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        """Gradient of the tensor. Zeros if the loss does not depend on
        it."""
        gradient = self._gradients.get(id(tensor))
        return np.zeros_like(tensor.data) if gradient is None else gradient

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._gradients

    def __len__(self) -> int:
        return len(self._gradients)

    def get(self, tensor: Tensor) -> np.ndarray | None:
        """Gradient of the tensor, or None if the loss does not reach it.

        Parameters
        ----------
        tensor : `Tensor`
            Tensor.

        Returns
        -------
        `numpy.ndarray` or None
            Gradient.
        """
        return self._gradients.get(id(tensor))

    def items(self) -> typing.Iterator[tuple[Tensor, np.ndarray]]:
        for key, gradient in self._gradients.items():
            yield self._tensors[key], gradient

    def is_finite(self) -> bool:
        """All the gradients are finite or not.

        Returns
        -------
        `bool`
            True if there is no NaN or Inf.
        """
        return all(np.isfinite(gradient).all() for gradient in self._gradients.values())


def backward(tape: Tape, loss: Tensor) -> GradientMap:
    """Back-propagate the gradient of a scalar loss through the tape.

    The gradient of a tensor used at several places is the sum over all its
    use sites.

    Parameters
    ----------
    tape : `Tape`
        Tape that recorded the forward pass.
    loss : `Tensor`
        Scalar loss.

    Returns
    -------
    `GradientMap`
        Gradients of the leaf tensors that require the gradient.

    Raises
    ------
    `ValueError`
        When the loss is not a scalar.
    """

    if loss.size != 1:
        raise ValueError(f"The loss must be a scalar, got the shape {loss.shape}.")

    gradients: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    outputs = {id(item.output) for item in tape.records}
    leaves: dict[int, Tensor] = {id(loss): loss} if id(loss) not in outputs else {}

    for item in reversed(tape.records):
        gradient_output = gradients.pop(id(item.output), None)
        if gradient_output is None:
            continue

        gradient_inputs = item.backward(gradient_output)
        for tensor, gradient in zip(item.inputs, gradient_inputs):
            if (gradient is None) or (not tensor.requires_grad):
                continue

            key = id(tensor)
            if key in gradients:
                gradients[key] = gradients[key] + gradient
            else:
                gradients[key] = gradient

            if key not in outputs:
                leaves[key] = tensor

    return GradientMap(leaves, {key: gradients[key] for key in leaves if key in gradients})


def detach(tensor: Tensor) -> Tensor:
    """Copy the tensor as a constant.

    Parameters
    ----------
    tensor : `Tensor`
        Tensor.

    Returns
    -------
    `Tensor`
        Constant tensor with the same values.
    """
    return Tensor(tensor.data.copy(), requires_grad=False, name=tensor.name)


def as_tensor(value: typing.Any) -> Tensor:
    """Convert the value to a tensor if needed.

    Parameters
    ----------
    value : `Tensor`, `numpy.ndarray`, or `float`
        Value.

    Returns
    -------
    `Tensor`
        Tensor.
    """
    return value if isinstance(value, Tensor) else Tensor(value)
