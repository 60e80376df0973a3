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

import itertools

import numpy as np
import pytest

from lsst.ts.unigs import SpatiallyEfficientSelfAttention, fps, num_keys
from lsst.ts.unigs.kernel import Tensor, grad_check, ops

HIDDEN = 8


def _brute_force_fps(centers: np.ndarray, num_selected: int) -> list[int]:
    selected = [0]
    while len(selected) < num_selected:
        distances = [
            min(np.sum(np.square(centers[idx] - centers[chosen])) for chosen in selected)
            if idx not in selected
            else -1.0
            for idx in range(centers.shape[0])
        ]
        selected.append(int(np.argmax(distances)))
    return selected


def test_num_keys() -> None:
    assert num_keys(0.01, 512) == 5
    assert num_keys(0.01, 19600) == 196
    assert num_keys(1.0, 7) == 7
    assert num_keys(0.5, 3) == 2
    assert num_keys(0.001, 10) == 1

    for rate in (0.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            num_keys(rate, 10)


def test_fps_square_corners() -> None:
    corners = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]])

    selection = fps(corners, 2)

    assert set(selection.indices.tolist()) == {0, 3}
    assert selection.num_selected == 2
    assert selection.rate == 0.5


def test_fps_brute_force() -> None:
    rng = np.random.default_rng(0)
    for num_points, num_selected in itertools.product((5, 20, 50), (1, 3, 5)):
        centers = rng.normal(size=(num_points, 3))

        expected = _brute_force_fps(centers, num_selected)
        np.testing.assert_array_equal(fps(centers, num_selected).indices, expected)


def test_fps_all_points() -> None:
    centers = np.random.default_rng(1).normal(size=(12, 3))

    indices = fps(centers, 12, start_index=4).indices

    assert indices[0] == 4
    assert sorted(indices.tolist()) == list(range(12))


def test_fps_duplicates() -> None:
    centers = np.zeros((4, 3))

    # Ties go to the lowest index and nothing is selected twice
    np.testing.assert_array_equal(fps(centers, 4).indices, [0, 1, 2, 3])


def test_fps_invalid() -> None:
    centers = np.zeros((4, 3))

    with pytest.raises(ValueError):
        fps(centers, 0)

    with pytest.raises(ValueError):
        fps(centers, 5)

    with pytest.raises(ValueError):
        fps(centers, 2, start_index=4)


def test_invalid_rate() -> None:
    with pytest.raises(ValueError):
        SpatiallyEfficientSelfAttention(HIDDEN, 0.0, np.random.default_rng(0))


def test_forward() -> None:
    rng = np.random.default_rng(2)
    attention = SpatiallyEfficientSelfAttention(HIDDEN, 0.25, rng)

    queries = Tensor(rng.normal(size=(16, HIDDEN)))
    output = attention(queries, rng.normal(size=(16, 3)))

    assert output.shape == (16, HIDDEN)
    assert attention.last_selection.num_selected == 4
    assert attention.last_attention.shape == (16, 4)
    np.testing.assert_allclose(attention.last_attention.sum(axis=1), 1.0)
    assert attention.last_kv_nbytes == 2 * 4 * HIDDEN * 8


def test_full_rate_equals_full_attention() -> None:
    rng = np.random.default_rng(3)
    attention = SpatiallyEfficientSelfAttention(HIDDEN, 1.0, rng)

    queries = Tensor(rng.normal(size=(10, HIDDEN)))
    output = attention(queries, rng.normal(size=(10, 3))).data

    np.testing.assert_allclose(output, attention.attend(queries, queries).data, atol=1e-12)


def test_kv_memory_linear() -> None:
    rng = np.random.default_rng(4)
    attention = SpatiallyEfficientSelfAttention(HIDDEN, 0.1, rng)

    nbytes = []
    for num_query in (100, 200, 400):
        attention(Tensor(rng.normal(size=(num_query, HIDDEN))), rng.normal(size=(num_query, 3)))
        nbytes.append(attention.last_kv_nbytes)

    assert nbytes == [nbytes[0], 2 * nbytes[0], 4 * nbytes[0]]


def test_gradients() -> None:
    rng = np.random.default_rng(5)
    attention = SpatiallyEfficientSelfAttention(HIDDEN, 0.5, rng)
    centers = rng.normal(size=(6, 3))
    weights = np.sin(np.arange(6 * HIDDEN)).reshape(6, HIDDEN)

    report = grad_check(
        lambda queries: ops.sum(attention(queries, centers) * Tensor(weights)),
        [Tensor(rng.normal(size=(6, HIDDEN)))],
        tol=1e-5,
        atol=1e-7,
    )

    assert report.passed, report.failures[:5]
