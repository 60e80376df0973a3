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

__all__ = ["FpsSelection", "fps", "num_keys", "SpatiallyEfficientSelfAttention"]

from dataclasses import dataclass

import numpy as np

from .kernel import LayerNorm, Linear, Module, Tensor, as_tensor, ops


@dataclass(frozen=True)
class FpsSelection:
    """Farthest-point selection."""

    # Selected indices [K] in the selection order
    indices: np.ndarray

    # Fraction K / N
    rate: float

    @property
    def num_selected(self) -> int:
        return self.indices.shape[0]


def num_keys(rate: float, num_points: int) -> int:
    """Number of the keys kept at a rate, max(1, round(rate·N)) with the
    halves rounded up.

    Parameters
    ----------
    rate : `float`
        Fraction in (0, 1].
    num_points : `int`
        Number of the points (N).

    Returns
    -------
    `int`
        Number of the keys.

    Raises
    ------
    `ValueError`
        When the rate is out of (0, 1].
    """

    if not (0.0 < rate <= 1.0):
        raise ValueError(f"Rate must be in (0, 1], got {rate}.")

    return min(num_points, max(1, int(np.floor(rate * num_points + 0.5))))


def fps(centers: np.ndarray, num_selected: int, start_index: int = 0) -> FpsSelection:
    """Greedy farthest-point sampling.

    Starting from start_index, the point with the largest distance to the
    selected set is added until num_selected points are selected. Ties go to
    the lowest index.

    Parameters
    ----------
    centers : `numpy.ndarray`
        Points [N, 3].
    num_selected : `int`
        Number of the points to select (K).
    start_index : `int`, optional
        First selected point. (the default is 0)

    Returns
    -------
    `FpsSelection`
        Selection.

    Raises
    ------
    `ValueError`
        When K is out of [1, N] or the start index is out of range.
    """

    centers = np.asarray(centers, dtype=np.float64)
    num_points = centers.shape[0]
    if not (1 <= num_selected <= num_points):
        raise ValueError(f"Number of the selected points must be in [1, {num_points}], got {num_selected}.")

    if not (0 <= start_index < num_points):
        raise ValueError(f"Start index must be in [0, {num_points}), got {start_index}.")

    indices = np.empty(num_selected, dtype=np.int64)
    indices[0] = start_index

    distance = np.sum(np.square(centers - centers[start_index]), axis=1)
    distance[start_index] = -1.0
    for idx in range(1, num_selected):
        selected = int(np.argmax(distance))
        indices[idx] = selected

        distance = np.minimum(distance, np.sum(np.square(centers - centers[selected]), axis=1))
        distance[indices[: idx + 1]] = -1.0

    return FpsSelection(indices=indices, rate=num_selected / num_points)


class SpatiallyEfficientSelfAttention(Module):
    """Self-attention of all the queries to the keys and values of the
    farthest-point subset of the Gaussian centers.

    Parameters
    ----------
    hidden : `int`
        Query width (C).
    rate : `float`
        Fraction of the queries kept as the keys and values.
    rng : `numpy.random.Generator`
        Random generator of the initial weights.

    Attributes
    ----------
    last_selection : `FpsSelection` or None
        Selection of the last forward pass.
    last_attention : `numpy.ndarray` or None
        Attention weights [N, K] of the last forward pass.
    last_kv_nbytes : `int`
        Bytes of the keys and values of the last forward pass.
    """

    def __init__(self, hidden: int, rate: float, rng: np.random.Generator) -> None:
        # Validate the rate
        num_keys(rate, 1)

        self.rate = rate

        self.query = Linear(hidden, hidden, rng)
        self.key = Linear(hidden, hidden, rng)
        self.value = Linear(hidden, hidden, rng)
        self.output = Linear(hidden, hidden, rng)
        self.norm = LayerNorm(hidden)

        self.last_selection: FpsSelection | None = None
        self.last_attention: np.ndarray | None = None
        self.last_kv_nbytes = 0

    def attend(self, queries: Tensor, keys_values: Tensor) -> Tensor:
        """Scaled dot-product attention with the residual and the layer
        normalization.

        Parameters
        ----------
        queries : `Tensor`
            Queries [N, C].
        keys_values : `Tensor`
            Sources of the keys and values [K, C].

        Returns
        -------
        `Tensor`
            LayerNorm(queries + attention) [N, C].
        """

        query = self.query(queries)
        key = self.key(keys_values)
        value = self.value(keys_values)

        attention = ops.softmax(ops.matmul(query, ops.transpose(key)) / np.sqrt(query.shape[-1]), axis=-1)

        self.last_attention = attention.data
        self.last_kv_nbytes = key.data.nbytes + value.data.nbytes

        return self.norm(queries + self.output(ops.matmul(attention, value)))

    def forward(self, queries: Tensor, centers: Tensor | np.ndarray) -> Tensor:
        """Attend to the farthest-point subset.

        Parameters
        ----------
        queries : `Tensor`
            Queries [N, C].
        centers : `Tensor` or `numpy.ndarray`
            Gaussian centers [N, 3]. The selection is not differentiable.

        Returns
        -------
        `Tensor`
            Refined queries [N, C].
        """

        centers = as_tensor(centers).data
        self.last_selection = fps(centers, num_keys(self.rate, centers.shape[0]))

        return self.attend(queries, ops.take(queries, self.last_selection.indices, axis=0))
