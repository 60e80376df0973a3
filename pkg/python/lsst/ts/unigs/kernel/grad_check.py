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

__all__ = ["GradCheckReport", "grad_check"]

import typing
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tape, Tensor, backward


@dataclass
class GradCheckReport:
    """Comparison between the tape gradients and the central differences."""

    # Maximum relative error over the checked elements
    max_error: float = 0.0

    # Number of the checked elements
    num_checked: int = 0

    # Descriptions of the elements out of the tolerance
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return (self.num_checked > 0) and (not self.failures)


def grad_check(
    function: typing.Callable[..., Tensor],
    inputs: typing.Sequence[Tensor],
    h: float = 1e-6,
    tol: float = 1e-5,
    atol: float = 1e-8,
    skip: typing.Callable[[int, tuple[int, ...]], bool] | None = None,
) -> GradCheckReport:
    """Check the tape gradients of a scalar function by central differences.

    An element passes if |analytic - numeric| <= atol + tol * max(|analytic|,
    |numeric|), where numeric = (f(x + h) - f(x - h)) / 2h.

    Parameters
    ----------
    function : `Callable`
        Scalar function of the inputs.
    inputs : `list` [`Tensor`]
        Inputs. They are marked to require the gradient.
    h : `float`, optional
        Step of the central difference. (the default is 1e-6)
    tol : `float`, optional
        Relative tolerance. (the default is 1e-5)
    atol : `float`, optional
        Absolute tolerance. (the default is 1e-8)
    skip : `Callable` or None, optional
        Returns True for the (input index, element index) pairs to leave out,
        such as the points on a non-differentiable line. (the default is
        None)

    Returns
    -------
    report : `GradCheckReport`
        Report of the check.
    """

    for tensor in inputs:
        tensor.requires_grad = True

    with Tape() as tape:
        loss = function(*inputs)

    gradients = backward(tape, loss)

    report = GradCheckReport()
    for idx_input, tensor in enumerate(inputs):
        analytic_all = gradients[tensor]
        for idx in np.ndindex(tensor.shape):
            if (skip is not None) and skip(idx_input, idx):
                continue

            original = tensor.data[idx]

            tensor.data[idx] = original + h
            value_plus = function(*inputs).item()

            tensor.data[idx] = original - h
            value_minus = function(*inputs).item()

            tensor.data[idx] = original

            numeric = (value_plus - value_minus) / (2.0 * h)
            analytic = float(analytic_all[idx])
            difference = abs(analytic - numeric)
            scale = max(abs(analytic), abs(numeric))

            report.num_checked += 1
            report.max_error = max(report.max_error, difference / max(scale, atol))
            if not (difference <= atol + tol * scale):
                report.failures.append(
                    f"input {idx_input} element {idx}: analytic {analytic:.6e}, numeric {numeric:.6e}"
                )

    return report
