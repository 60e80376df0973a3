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

from lsst.ts.unigs.kernel import Tensor, grad_check, ops, record


def test_grad_check_pass() -> None:
    x = Tensor(np.array([0.3, -1.2, 2.0]))

    report = grad_check(lambda value: ops.sum(ops.square(value) * value), [x])

    assert report.passed is True
    assert report.num_checked == 3
    assert report.max_error < 1e-6
    assert x.requires_grad is True


def _wrong_square(x: Tensor) -> Tensor:
    # Backward rule off by a factor of 2
    return record("wrong_square", (x,), Tensor(np.square(x.data)), lambda g: (g * x.data,))


def test_grad_check_fail() -> None:
    x = Tensor(np.array([1.0, 2.0]))

    report = grad_check(lambda value: ops.sum(_wrong_square(value)), [x])

    assert report.passed is False
    assert len(report.failures) == 2
    assert report.failures[0].startswith("input 0 element (0,)")


def test_grad_check_skip() -> None:
    x = Tensor(np.array([1.0, 2.0, 3.0]))
    y = Tensor(np.array([1.0]))

    report = grad_check(
        lambda a, b: ops.sum(a * b),
        [x, y],
        skip=lambda idx_input, idx: (idx_input == 0) and (idx[0] != 1),
    )

    assert report.num_checked == 2


def test_grad_check_restores_inputs() -> None:
    values = np.array([0.5, 1.5])
    x = Tensor(values.copy())

    grad_check(lambda value: ops.sum(ops.exp(value)), [x])

    np.testing.assert_array_equal(x.data, values)


def test_grad_check_nothing_checked() -> None:
    report = grad_check(lambda value: ops.sum(value), [Tensor(np.ones(2))], skip=lambda idx_input, idx: True)

    assert report.passed is False
