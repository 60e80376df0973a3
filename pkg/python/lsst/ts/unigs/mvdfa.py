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
    "QuerySet",
    "ViewQueries",
    "SamplingState",
    "CameraEmbedding",
    "compute_reference_points",
    "MultiViewDeformableAttention",
]

import typing
from dataclasses import dataclass

import numpy as np

from .camera import Camera, camera_embedding_input, project_pinhole
from .constants import OFFSET_INIT_SCALE
from .encoder import FeatureMaps
from .kernel import MLP, LayerNorm, Linear, Module, Tensor, as_tensor, detach, ops, record


@dataclass(frozen=True, eq=False)
class QuerySet:
    """Unitary query set, one content vector per Gaussian."""

    # Queries [N, C]
    queries: Tensor

    def __post_init__(self) -> None:
        if self.queries.ndim != 2:
            raise ValueError(f"Queries must be [N, C], got {self.queries.shape}.")

    @property
    def num_queries(self) -> int:
        return self.queries.shape[0]

    @property
    def channels(self) -> int:
        return self.queries.shape[1]

    @property
    def nbytes(self) -> int:
        return self.queries.data.nbytes


@dataclass(frozen=True, eq=False)
class ViewQueries:
    """View-specific queries after the sampling, with their fusion
    weights."""

    # Queries [I, N, C]
    queries: Tensor

    # Fusion weights [I, N, C]
    weights: Tensor | None = None


@dataclass(frozen=True, eq=False)
class SamplingState:
    """Sampling of the last forward pass. With several heads, the sample
    axis runs over (head, sample)."""

    # Reference points [I, N, 2] and their validity [I, N]
    reference_points: Tensor
    is_valid: np.ndarray

    # Offsets [I, N, Ns, 2] in the normalized coordinate
    offsets: Tensor

    # Sampling points [I, N, Ns, 2]
    points: Tensor

    # Attention scores [I, N, Ns]
    scores: Tensor

    # Sampled values [I, N, Ns, C / heads]
    values: Tensor


@dataclass(frozen=True, eq=False)
class CameraEmbedding:
    """Per-view camera embedding."""

    # Embedding [I, C]
    embedding: Tensor


def compute_reference_points(
    centers: Tensor | np.ndarray,
    cameras: typing.Sequence[Camera],
) -> tuple[Tensor, np.ndarray]:
    """Project the Gaussian centers into every view.

    Parameters
    ----------
    centers : `Tensor` or `numpy.ndarray`
        Centers [N, 3].
    cameras : `list` [`Camera`]
        Cameras.

    Returns
    -------
    reference_points : `Tensor`
        Normalized coordinates [I, N, 2]. The invalid points keep their
        out-of-range coordinates so the sampling gives zeros.
    is_valid : `numpy.ndarray`
        Validity [I, N].
    """

    projections = [project_pinhole(centers, camera) for camera in cameras]
    return (
        ops.stack([projection.uv for projection in projections], axis=0),
        np.stack([projection.valid for projection in projections], axis=0),
    )


def _sum_views(values: Tensor) -> Tensor:
    """Sum over the view axis in the sorted order, so that a permutation of
    the views gives the identical result."""

    return record(
        "sum_views",
        (values,),
        Tensor(np.sort(values.data, axis=0).sum(axis=0)),
        lambda g: (np.broadcast_to(g, values.shape).copy(),),
    )


class MultiViewDeformableAttention(Module):
    """Multi-view deformable cross-attention.

    The unitary queries are modulated by each camera (adaptive layer
    normalization), sample the value maps of each view around the projected
    Gaussian centers at learned offsets, and the view-specific results are
    fused back into the unitary set with sigmoid weights.

    Parameters
    ----------
    hidden : `int`
        Query and feature width (C).
    num_samples : `int`
        Sampling points per view, head and query (Ns).
    rng : `numpy.random.Generator`
        Random generator of the initial weights.
    n_heads : `int`, optional
        Attention heads. C must be divisible by it. (the default is 1)
    use_camera_modulation : `bool`, optional
        Modulate the queries by the camera embedding. (the default is True)
    detach_reference_points : `bool`, optional
        Stop the gradient into the reference points. (the default is False)

    Attributes
    ----------
    last_state : `SamplingState` or None
        Sampling of the last forward pass.
    """

    def __init__(
        self,
        hidden: int,
        num_samples: int,
        rng: np.random.Generator,
        n_heads: int = 1,
        use_camera_modulation: bool = True,
        detach_reference_points: bool = False,
    ) -> None:
        if hidden % n_heads != 0:
            raise ValueError(f"hidden ({hidden}) must be divisible by n_heads ({n_heads}).")

        self.hidden = hidden
        self.num_samples = num_samples
        self.n_heads = n_heads
        self.use_camera_modulation = use_camera_modulation
        self.detach_reference_points = detach_reference_points

        self.camera_mlp = MLP([16, hidden, hidden], rng)
        self.modulation = Linear(hidden, 2 * hidden, rng, is_zero_init=True)
        self.norm = LayerNorm(hidden, is_affine=False)

        self.sampling_offsets = Linear(hidden, n_heads * num_samples * 2, rng, is_zero_init=True)
        self.attention_scores = Linear(hidden, n_heads * num_samples, rng, is_zero_init=True)
        # No bias: zero features give zero values
        self.value = Linear(hidden, hidden, rng, has_bias=False)
        self.fusion = Linear(hidden, hidden, rng)

        self._reset_offsets()

        self.last_state: SamplingState | None = None

    def _reset_offsets(self) -> None:
        """Start the sampling points on the rays of a star around the
        reference point, one direction per head."""

        thetas = np.arange(self.n_heads) * (2.0 * np.pi / self.n_heads)
        directions = np.stack([np.cos(thetas), np.sin(thetas)], axis=-1)
        directions /= np.abs(directions).max(axis=-1, keepdims=True)

        grid = directions[:, np.newaxis, :] * np.arange(1, self.num_samples + 1)[np.newaxis, :, np.newaxis]
        self.sampling_offsets.bias.data[...] = (OFFSET_INIT_SCALE * grid).reshape(-1)

    def camera_embedding(self, cameras: typing.Sequence[Camera]) -> CameraEmbedding:
        """Embed the cameras.

        Parameters
        ----------
        cameras : `list` [`Camera`]
            Cameras.

        Returns
        -------
        `CameraEmbedding`
            Embedding [I, C].
        """

        inputs = np.stack([camera_embedding_input(camera, normalize_intrinsics=True) for camera in cameras])
        return CameraEmbedding(self.camera_mlp(Tensor(inputs)))

    def modulate_queries(self, query_set: QuerySet, embedding: CameraEmbedding) -> Tensor:
        """Modulate the unitary queries by each camera.

        Parameters
        ----------
        query_set : `QuerySet`
            Unitary queries [N, C].
        embedding : `CameraEmbedding`
            Camera embedding [I, C].

        Returns
        -------
        `Tensor`
            View-specific queries [I, N, C], LayerNorm(Q)·(1 + scale_i) +
            shift_i.
        """

        num_view = embedding.embedding.shape[0]
        num_query, hidden = query_set.queries.shape

        normalized = self.norm(query_set.queries).reshape(1, num_query, hidden)
        if not self.use_camera_modulation:
            return ops.concat([normalized] * num_view, axis=0)

        modulation = self.modulation(embedding.embedding)
        shift = modulation[:, :hidden].reshape(num_view, 1, hidden)
        scale = modulation[:, hidden:].reshape(num_view, 1, hidden)

        return normalized * (1.0 + scale) + shift

    def fuse_views(self, view_queries: Tensor) -> tuple[Tensor, ViewQueries]:
        """Fuse the view-specific queries into the unitary set.

        Parameters
        ----------
        view_queries : `Tensor`
            View-specific queries [I, N, C].

        Returns
        -------
        fused : `Tensor`
            Σ_i w_i ⊙ q_i [N, C] with w_i = sigmoid(Linear(q_i)), not
            normalized across the views.
        `ViewQueries`
            Queries with their weights.
        """

        weights = ops.sigmoid(self.fusion(view_queries))
        return _sum_views(weights * view_queries), ViewQueries(view_queries, weights)

    def forward(
        self,
        feature_maps: FeatureMaps,
        cameras: typing.Sequence[Camera],
        query_set: QuerySet,
        centers: Tensor | np.ndarray,
    ) -> QuerySet:
        """Refine the unitary queries with the multi-view features.

        Parameters
        ----------
        feature_maps : `FeatureMaps`
            Features [I, C, H', W'].
        cameras : `list` [`Camera`]
            Cameras of the views.
        query_set : `QuerySet`
            Unitary queries [N, C].
        centers : `Tensor` or `numpy.ndarray`
            Gaussian centers [N, 3].

        Returns
        -------
        `QuerySet`
            Fused queries [N, C].

        Raises
        ------
        `ValueError`
            When the dimensions mismatch.
        """

        centers = as_tensor(centers)
        num_view = feature_maps.num_views
        num_query, hidden = query_set.queries.shape

        if len(cameras) != num_view:
            raise ValueError(f"View count mismatch: {len(cameras)} cameras and {num_view} feature maps.")

        if (hidden != self.hidden) or (feature_maps.channels != self.hidden):
            raise ValueError(
                f"Channel mismatch: queries {hidden}, features {feature_maps.channels}, model {self.hidden}."
            )

        if centers.shape != (num_query, 3):
            raise ValueError(f"Centers must be [{num_query}, 3] to match the queries, got {centers.shape}.")

        num_head = self.n_heads
        num_sample = self.num_samples
        head_width = hidden // num_head

        queries = self.modulate_queries(query_set, self.camera_embedding(cameras))

        reference_points, is_valid = compute_reference_points(
            detach(centers) if self.detach_reference_points else centers, cameras
        )

        offsets = self.sampling_offsets(queries).reshape(num_view, num_query, num_head, num_sample, 2)
        scores = ops.softmax(
            self.attention_scores(queries).reshape(num_view, num_query, num_head, num_sample),
            axis=-1,
        )
        points = reference_points.reshape(num_view, num_query, 1, 1, 2) + offsets

        # Value maps per head: [I * heads, C / heads, H', W']
        height, width = feature_maps.height, feature_maps.width
        values = self.value(ops.transpose(feature_maps.features, (0, 2, 3, 1)))
        values = ops.transpose(
            values.reshape(num_view, height, width, num_head, head_width),
            (0, 3, 4, 1, 2),
        ).reshape(num_view * num_head, head_width, height, width)

        points_head = ops.transpose(points, (0, 2, 1, 3, 4))
        points_head = points_head.reshape(num_view * num_head, num_query, num_sample, 2)
        sampled = ops.grid_sample_bilinear(values, points_head)

        # [I, N, heads, Ns, C / heads]
        sampled = ops.transpose(
            sampled.reshape(num_view, num_head, num_query, num_sample, head_width),
            (0, 2, 1, 3, 4),
        )
        view_queries = ops.sum(scores.reshape(num_view, num_query, num_head, num_sample, 1) * sampled, axis=3)

        fused, _ = self.fuse_views(view_queries.reshape(num_view, num_query, hidden))

        self.last_state = SamplingState(
            reference_points=reference_points,
            is_valid=is_valid,
            offsets=offsets.reshape(num_view, num_query, num_head * num_sample, 2),
            points=points.reshape(num_view, num_query, num_head * num_sample, 2),
            scores=scores.reshape(num_view, num_query, num_head * num_sample),
            values=sampled.reshape(num_view, num_query, num_head * num_sample, head_width),
        )

        return QuerySet(fused)
