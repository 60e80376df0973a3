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
    "CoarseInitOutput",
    "ReconstructStats",
    "init_random_in_cov",
    "init_random",
    "pixel_rays",
    "camera_space_centers",
    "select_gaussians",
    "CoarseInitHead",
    "GaussianHead",
    "DecoderLayer",
    "UniGSModel",
    "reconstruct",
]

import logging
import time
import typing
from dataclasses import dataclass

import numpy as np

from .camera import Camera, estimate_look_at, in_cone_of_vision
from .constants import (
    COARSE_HEAD_INIT_SCALE,
    IDENTITY_QUATERNION,
    INIT_MAX_TRIAL,
    INIT_MIN_ACCEPTANCE,
    INIT_QUERY_STD,
    INIT_RAW_SCALE,
    MASK_THRESHOLD,
    NUM_RAW_PARAMETER,
    NUM_SH_COEFFICIENT,
)
from .encoder import Encoder, FeatureMaps
from .enums import InitStrategy
from .gaussian_model import GaussianSet, RawGaussianParams, activate_params, apply_update
from .kernel import MLP, Conv2d, LayerNorm, Linear, Module, Tensor, as_tensor, ops
from .mvdfa import MultiViewDeformableAttention, QuerySet
from .sesa import SpatiallyEfficientSelfAttention, fps
from .structs import DecoderConfig

# Columns of the quaternion in the flattened raw parameters
_ROTATION_COLUMNS = slice(7, 11)

# Channels of the per-pixel head: depth, 3 offsets, and the raw parameters
# other than the centers
_NUM_COARSE_CHANNEL = 4 + NUM_RAW_PARAMETER - 3


@dataclass(frozen=True, eq=False)
class CoarseInitOutput:
    """Per-pixel initialization of the foreground pixels."""

    # Depths [M], positive
    depth: Tensor

    # Offsets (dx, dy, dz) [M, 3]
    offsets: Tensor

    # Pixel rays (u1, u2) [M, 2]
    rays: np.ndarray

    # Camera-space and world-space centers [M, 3]
    centers_camera: Tensor
    centers: Tensor

    # View of each pixel [M]
    view_index: np.ndarray

    # Foreground mask at the feature resolution [I, H', W']
    mask: np.ndarray


@dataclass
class ReconstructStats:
    """Cost of the last reconstruction."""

    # Bytes of the unitary query buffer
    query_buffer_nbytes: int = 0

    # Bytes of the self-attention keys and values (largest layer)
    kv_nbytes: int = 0

    # Wall time of the encoder and the decoder in seconds
    encoder_seconds: float = 0.0
    decoder_seconds: float = 0.0


def _initial_raw(centers: np.ndarray) -> RawGaussianParams:
    num_gaussians = centers.shape[0]
    return RawGaussianParams.from_arrays(
        centers=centers,
        opacity=np.zeros((num_gaussians, 1)),
        scale=np.full((num_gaussians, 3), INIT_RAW_SCALE),
        rotation=np.tile(IDENTITY_QUATERNION, (num_gaussians, 1)),
        sh=np.zeros((num_gaussians, NUM_SH_COEFFICIENT)),
    )


def _box_center(cameras: typing.Sequence[Camera], box_center: np.ndarray | None) -> np.ndarray:
    if box_center is not None:
        return np.asarray(box_center, dtype=np.float64)

    return estimate_look_at(cameras) if len(cameras) > 0 else np.zeros(3)


def init_random_in_cov(
    cameras: typing.Sequence[Camera],
    num_gaussians: int,
    seed: int,
    hidden: int,
    box_center: np.ndarray | None = None,
    half_extent: float = 1.0,
) -> tuple[RawGaussianParams, QuerySet]:
    """Sample the Gaussian centers uniformly in the part of a bounding box
    that at least one camera sees.

    Parameters
    ----------
    cameras : `list` [`Camera`]
        Cameras.
    num_gaussians : `int`
        Number of the Gaussians (N).
    seed : `int`
        Seed of the sampling and the initial queries.
    hidden : `int`
        Query width (C).
    box_center : `numpy.ndarray` or None, optional
        Center of the box. None means the point the cameras look at. (the
        default is None)
    half_extent : `float`, optional
        Half size of the box. (the default is 1.0)

    Returns
    -------
    raw : `RawGaussianParams`
        Raw parameters: zero opacity logit, log(0.05) scale, identity
        rotation, and zero spherical harmonics.
    query_set : `QuerySet`
        Initial queries drawn from normal(0, 0.02).

    Raises
    ------
    `ValueError`
        When there is no camera.
    `RuntimeError`
        When the acceptance rate is too low after the trial limit, which
        happens for the degenerate cameras.
    """

    if len(cameras) == 0:
        raise ValueError("At least one camera is needed.")

    rng = np.random.default_rng(seed)
    center = _box_center(cameras, box_center)

    batch = max(4 * num_gaussians, 1024)
    accepted: list[np.ndarray] = list()
    num_accepted = 0
    num_trial = 0
    while num_accepted < num_gaussians:
        if num_trial >= INIT_MAX_TRIAL and (num_accepted / num_trial) < INIT_MIN_ACCEPTANCE:
            raise RuntimeError(
                f"Acceptance rate {num_accepted / num_trial:.2e} after {num_trial} trials is too low. "
                "Check the cameras."
            )

        proposals = center + rng.uniform(-half_extent, half_extent, size=(batch, 3))
        is_visible = in_cone_of_vision(proposals, cameras)

        accepted.append(proposals[is_visible])
        num_accepted += int(is_visible.sum())
        num_trial += batch

    centers = np.concatenate(accepted, axis=0)[:num_gaussians]
    queries = rng.normal(0.0, INIT_QUERY_STD, size=(num_gaussians, hidden))

    return _initial_raw(centers), QuerySet(Tensor(queries))


def init_random(
    num_gaussians: int,
    seed: int,
    hidden: int,
    box_center: np.ndarray | None = None,
    half_extent: float = 1.0,
) -> tuple[RawGaussianParams, QuerySet]:
    """Sample the Gaussian centers uniformly in a bounding box.

    Parameters
    ----------
    num_gaussians : `int`
        Number of the Gaussians (N).
    seed : `int`
        Seed of the sampling and the initial queries.
    hidden : `int`
        Query width (C).
    box_center : `numpy.ndarray` or None, optional
        Center of the box. None means the origin. (the default is None)
    half_extent : `float`, optional
        Half size of the box. (the default is 1.0)

    Returns
    -------
    raw : `RawGaussianParams`
        Raw parameters.
    query_set : `QuerySet`
        Initial queries.
    """

    rng = np.random.default_rng(seed)
    center = np.zeros(3) if box_center is None else np.asarray(box_center, dtype=np.float64)

    centers = center + rng.uniform(-half_extent, half_extent, size=(num_gaussians, 3))
    queries = rng.normal(0.0, INIT_QUERY_STD, size=(num_gaussians, hidden))

    return _initial_raw(centers), QuerySet(Tensor(queries))


def pixel_rays(camera: Camera, height: int, width: int) -> np.ndarray:
    """Rays (u1, u2) through the pixel centers of a grid that covers the
    image.

    Parameters
    ----------
    camera : `Camera`
        Camera.
    height : `int`
        Grid height.
    width : `int`
        Grid width.

    Returns
    -------
    `numpy.ndarray`
        Rays [height * width, 2] in the row-major order. A point at depth d
        on the ray is (u1 * d, u2 * d, d) in the camera space.
    """

    stride_x = camera.width / width
    stride_y = camera.height / height

    pixel_x = (np.arange(width) + 0.5) * stride_x - 0.5
    pixel_y = (np.arange(height) + 0.5) * stride_y - 0.5
    grid_x, grid_y = np.meshgrid(pixel_x, pixel_y)

    return np.stack(
        [(grid_x.reshape(-1) - camera.cx) / camera.fx, (grid_y.reshape(-1) - camera.cy) / camera.fy],
        axis=-1,
    )


def camera_space_centers(depth: Tensor, offsets: Tensor, rays: np.ndarray) -> Tensor:
    """Centers (u1 * d + dx, u2 * d + dy, d + dz).

    Parameters
    ----------
    depth : `Tensor`
        Depths [M].
    offsets : `Tensor`
        Offsets [M, 3].
    rays : `numpy.ndarray`
        Rays [M, 2].

    Returns
    -------
    `Tensor`
        Camera-space centers [M, 3].
    """

    depth = as_tensor(depth)
    directions = np.concatenate([rays, np.ones((rays.shape[0], 1))], axis=-1)
    return depth.reshape(-1, 1) * Tensor(directions) + as_tensor(offsets)


def select_gaussians(centers: np.ndarray, num_gaussians: int) -> np.ndarray:
    """Indices that bring the candidates to the requested count.

    Too many candidates are reduced by the farthest point sampling, and too
    few are padded by copying them in the round-robin order.

    Parameters
    ----------
    centers : `numpy.ndarray`
        Candidate centers [M, 3].
    num_gaussians : `int`
        Requested count (N).

    Returns
    -------
    `numpy.ndarray`
        Indices [N] into the candidates.

    Raises
    ------
    `ValueError`
        When there is no candidate.
    """

    num_candidate = centers.shape[0]
    if num_candidate == 0:
        raise ValueError("No candidate to select the Gaussians from.")

    if num_candidate > num_gaussians:
        return fps(centers, num_gaussians).indices

    return np.arange(num_gaussians) % num_candidate


class CoarseInitHead(Module):
    """Per-pixel regression of the initial Gaussians from the features.

    Parameters
    ----------
    hidden : `int`
        Feature channels (C).
    rng : `numpy.random.Generator`
        Random generator of the initial weights.
    init_depth : `float`, optional
        Depth of a pixel at the start of the training. (the default is 2.5)
    """

    def __init__(self, hidden: int, rng: np.random.Generator, init_depth: float = 2.5) -> None:
        self.head = Conv2d(hidden, _NUM_COARSE_CHANNEL, 1, rng)
        self.head.weight.data *= COARSE_HEAD_INIT_SCALE

        self.query = Linear(hidden, hidden, rng)

        self.init_depth = init_depth

    def foreground(self, masks: np.ndarray | None, feature_maps: FeatureMaps) -> np.ndarray:
        """Reduce the image masks to the feature resolution.

        Parameters
        ----------
        masks : `numpy.ndarray` or None
            Masks [I, H, W]. None means everything is the foreground.
        feature_maps : `FeatureMaps`
            Features [I, C, H', W'].

        Returns
        -------
        `numpy.ndarray`
            Mask [I, H', W']. A cell is the foreground when at least half of
            its pixels are.

        Raises
        ------
        `ValueError`
            When the masks do not align with the features.
        """

        num_view, height, width = feature_maps.num_views, feature_maps.height, feature_maps.width
        if masks is None:
            return np.ones((num_view, height, width), dtype=bool)

        masks = np.asarray(masks, dtype=np.float64)
        if (
            (masks.ndim != 3)
            or (masks.shape[0] != num_view)
            or (masks.shape[1] % height != 0)
            or (masks.shape[2] % width != 0)
        ):
            raise ValueError(
                f"Masks {masks.shape} do not align with the features {feature_maps.features.shape}."
            )

        stride_y = masks.shape[1] // height
        stride_x = masks.shape[2] // width
        blocks = masks.reshape(num_view, height, stride_y, width, stride_x).mean(axis=(2, 4))
        return blocks >= MASK_THRESHOLD

    def forward(
        self,
        feature_maps: FeatureMaps,
        cameras: typing.Sequence[Camera],
        num_gaussians: int,
        masks: np.ndarray | None = None,
    ) -> tuple[RawGaussianParams, QuerySet, CoarseInitOutput]:
        """Initialize the Gaussians and queries from the foreground pixels.

        Parameters
        ----------
        feature_maps : `FeatureMaps`
            Features [I, C, H', W'].
        cameras : `list` [`Camera`]
            Cameras of the views.
        num_gaussians : `int`
            Number of the Gaussians (N).
        masks : `numpy.ndarray` or None, optional
            Foreground masks [I, H, W]. (the default is None)

        Returns
        -------
        raw : `RawGaussianParams`
            Raw parameters of exactly N Gaussians.
        query_set : `QuerySet`
            Queries gathered the same way.
        output : `CoarseInitOutput`
            Per-pixel values of all the foreground pixels.

        Raises
        ------
        `ValueError`
            When there is no foreground pixel or the shapes mismatch.
        """

        num_view, hidden, height, width = feature_maps.features.shape
        if len(cameras) != num_view:
            raise ValueError(f"View count mismatch: {len(cameras)} cameras and {num_view} feature maps.")

        mask = self.foreground(masks, feature_maps)
        foreground = np.flatnonzero(mask.reshape(-1))
        if foreground.size == 0:
            raise ValueError("No foreground pixel to initialize the Gaussians.")

        num_pixel = height * width
        view_index = foreground // num_pixel

        pixels = ops.transpose(self.head(feature_maps.features), (0, 2, 3, 1))
        pixels = pixels.reshape(num_view * num_pixel, -1)
        pixels = ops.take(pixels, foreground, axis=0)

        features = ops.transpose(feature_maps.features, (0, 2, 3, 1)).reshape(num_view * num_pixel, hidden)
        queries = self.query(ops.take(features, foreground, axis=0))

        rays = np.concatenate([pixel_rays(camera, height, width) for camera in cameras], axis=0)[foreground]

        depth = self.init_depth * ops.exp(pixels[:, 0])
        offsets = pixels[:, 1:4]
        centers_camera = camera_space_centers(depth, offsets, rays)

        # World = R^T (camera - t), per row
        rotations = np.stack([camera.rotation for camera in cameras], axis=0)[view_index]
        translations = np.stack([camera.translation for camera in cameras], axis=0)[view_index]
        centers = ops.sum(
            (centers_camera - Tensor(translations)).reshape(-1, 3, 1) * Tensor(rotations),
            axis=1,
        )

        raw = RawGaussianParams(
            centers=centers,
            opacity=pixels[:, 4:5],
            scale=pixels[:, 5:8] + INIT_RAW_SCALE,
            rotation=pixels[:, 8:12] + Tensor(IDENTITY_QUATERNION),
            sh=pixels[:, 12:],
        )

        indices = select_gaussians(centers.data, num_gaussians)

        output = CoarseInitOutput(
            depth=depth,
            offsets=offsets,
            rays=rays,
            centers_camera=centers_camera,
            centers=centers,
            view_index=view_index,
            mask=mask,
        )

        return raw.take(indices), QuerySet(ops.take(queries, indices, axis=0)), output


class GaussianHead(Module):
    """MLP from the queries to the raw parameter increments. The last layer
    starts at zero with the identity quaternion as its bias, so the first
    update leaves the Gaussians unchanged.

    Parameters
    ----------
    hidden : `int`
        Query width (C).
    rng : `numpy.random.Generator`
        Random generator of the initial weights.
    """

    def __init__(self, hidden: int, rng: np.random.Generator) -> None:
        self.mlp = MLP([hidden, hidden, NUM_RAW_PARAMETER], rng, is_zero_last=True)
        self.mlp.layers[-1].bias.data[_ROTATION_COLUMNS] = IDENTITY_QUATERNION

    def forward(self, queries: Tensor) -> RawGaussianParams:
        return RawGaussianParams.from_vector(self.mlp(queries))


class DecoderLayer(Module):
    """One decoder layer: deformable cross-attention, self-attention, and
    feed-forward network, each with the residual connection and the layer
    normalization, followed by the Gaussian update.

    Parameters
    ----------
    config : `DecoderConfig`
        Configuration.
    rng : `numpy.random.Generator`
        Random generator of the initial weights.
    """

    def __init__(self, config: DecoderConfig, rng: np.random.Generator) -> None:
        self.use_mvdfa = config.use_mvdfa
        self.use_sesa = config.use_sesa

        self.mvdfa = MultiViewDeformableAttention(
            config.hidden,
            config.num_samples,
            rng,
            n_heads=config.n_heads,
            use_camera_modulation=config.use_camera_modulation,
            detach_reference_points=config.detach_reference_points,
        )
        self.norm_mvdfa = LayerNorm(config.hidden)

        self.sesa = SpatiallyEfficientSelfAttention(config.hidden, config.sesa_rate, rng)

        self.ffn = MLP([config.hidden, config.ffn_width, config.hidden], rng)
        self.norm_ffn = LayerNorm(config.hidden)

        self.head = GaussianHead(config.hidden, rng)

    def forward(
        self,
        query_set: QuerySet,
        raw: RawGaussianParams,
        feature_maps: FeatureMaps,
        cameras: typing.Sequence[Camera],
    ) -> tuple[QuerySet, RawGaussianParams]:
        """Refine the queries and update the Gaussians.

        Parameters
        ----------
        query_set : `QuerySet`
            Queries [N, C].
        raw : `RawGaussianParams`
            Raw parameters of the N Gaussians. Their centers give the
            reference points of this layer.
        feature_maps : `FeatureMaps`
            Features [I, C, H', W'].
        cameras : `list` [`Camera`]
            Cameras of the views.

        Returns
        -------
        query_set : `QuerySet`
            Refined queries.
        raw : `RawGaussianParams`
            Updated raw parameters.
        """

        queries = query_set.queries

        if self.use_mvdfa:
            sampled = self.mvdfa(feature_maps, cameras, QuerySet(queries), raw.centers)
            queries = self.norm_mvdfa(queries + sampled.queries)

        if self.use_sesa:
            queries = self.sesa(queries, raw.centers)

        queries = self.norm_ffn(queries + self.ffn(queries))

        return QuerySet(queries), apply_update(raw, self.head(queries))


class UniGSModel(Module):
    """Feed-forward reconstruction of the Gaussians from any number of
    posed images.

    Parameters
    ----------
    config : `DecoderConfig`
        Configuration.
    log : `logging.Logger`
        A logger.

    Attributes
    ----------
    log : `logging.Logger`
        A logger.
    config : `DecoderConfig`
        Configuration.
    encoder : `Encoder`
        Multi-view feature extractor.
    coarse_init : `CoarseInitHead` or None
        Per-pixel initialization. It exists only for the per-pixel strategy.
    layers : `list` [`DecoderLayer`]
        Decoder layers.
    last_stats : `ReconstructStats`
        Cost of the last reconstruction.
    last_init : `RawGaussianParams` or None
        Initial Gaussians of the last reconstruction.
    last_queries : `QuerySet` or None
        Final queries of the last reconstruction.
    """

    def __init__(self, config: DecoderConfig, log: logging.Logger) -> None:
        self.log = log.getChild(type(self).__name__)
        self.config = config

        rng = np.random.default_rng(config.seed)

        self.encoder = Encoder(config.hidden, rng, is_frozen=config.freeze_encoder)
        self.coarse_init = (
            CoarseInitHead(config.hidden, rng, init_depth=config.init_depth)
            if config.init_strategy == InitStrategy.CoarsePerPixel
            else None
        )
        self.layers = [DecoderLayer(config, rng) for _ in range(config.num_layers)]

        self.last_stats = ReconstructStats()
        self.last_init: RawGaussianParams | None = None
        self.last_queries: QuerySet | None = None

    def initialize(
        self,
        feature_maps: FeatureMaps,
        cameras: typing.Sequence[Camera],
        masks: np.ndarray | None = None,
    ) -> tuple[RawGaussianParams, QuerySet]:
        """Initial Gaussians and queries of the configured strategy.

        Parameters
        ----------
        feature_maps : `FeatureMaps`
            Features.
        cameras : `list` [`Camera`]
            Cameras.
        masks : `numpy.ndarray` or None, optional
            Foreground masks [I, H, W]. (the default is None)

        Returns
        -------
        raw : `RawGaussianParams`
            Raw parameters.
        query_set : `QuerySet`
            Queries.
        """

        config = self.config
        match config.init_strategy:
            case InitStrategy.CoarsePerPixel:
                raw, query_set, _ = self.coarse_init(feature_maps, cameras, config.num_gaussians, masks=masks)
                return raw, query_set

            case InitStrategy.Random:
                return init_random(
                    config.num_gaussians,
                    config.seed,
                    config.hidden,
                    box_center=estimate_look_at(cameras, default_depth=config.init_depth),
                    half_extent=config.init_box_half_extent,
                )

            case _:
                return init_random_in_cov(
                    cameras,
                    config.num_gaussians,
                    config.seed,
                    config.hidden,
                    box_center=estimate_look_at(cameras, default_depth=config.init_depth),
                    half_extent=config.init_box_half_extent,
                )

    def forward(
        self,
        images: Tensor | np.ndarray,
        cameras: typing.Sequence[Camera],
        masks: np.ndarray | None = None,
    ) -> RawGaussianParams:
        """Reconstruct the raw Gaussian parameters.

        Parameters
        ----------
        images : `Tensor` or `numpy.ndarray`
            Images [I, 3, H, W].
        cameras : `list` [`Camera`]
            Cameras of the images.
        masks : `numpy.ndarray` or None, optional
            Foreground masks [I, H, W]. (the default is None)

        Returns
        -------
        `RawGaussianParams`
            Raw parameters of exactly N Gaussians.

        Raises
        ------
        `ValueError`
            When there is no image or the images and cameras mismatch.
        """

        images = as_tensor(images)
        if (images.ndim != 4) or (images.shape[0] == 0):
            raise ValueError(f"Images must be [I, 3, H, W] with I >= 1, got {images.shape}.")

        if len(cameras) != images.shape[0]:
            raise ValueError(f"View count mismatch: {len(cameras)} cameras and {images.shape[0]} images.")

        time_start = time.perf_counter()
        feature_maps = self.encoder(images)
        time_encoder = time.perf_counter()

        raw, query_set = self.initialize(feature_maps, cameras, masks=masks)
        self.last_init = raw

        kv_nbytes = 0
        for layer in self.layers:
            query_set, raw = layer(query_set, raw, feature_maps, cameras)
            if layer.use_sesa:
                kv_nbytes = max(kv_nbytes, layer.sesa.last_kv_nbytes)

        time_decoder = time.perf_counter()

        self.last_queries = query_set
        self.last_stats = ReconstructStats(
            query_buffer_nbytes=query_set.nbytes,
            kv_nbytes=kv_nbytes,
            encoder_seconds=time_encoder - time_start,
            decoder_seconds=time_decoder - time_encoder,
        )

        self.log.debug(
            f"Reconstructed {raw.num_gaussians} Gaussians from {len(cameras)} views in "
            f"{time_decoder - time_start:.3f} s."
        )

        return raw

    def reconstruct(
        self,
        images: Tensor | np.ndarray,
        cameras: typing.Sequence[Camera],
        masks: np.ndarray | None = None,
    ) -> GaussianSet:
        """Reconstruct the Gaussians.

        Parameters
        ----------
        images : `Tensor` or `numpy.ndarray`
            Images [I, 3, H, W].
        cameras : `list` [`Camera`]
            Cameras of the images.
        masks : `numpy.ndarray` or None, optional
            Foreground masks [I, H, W]. (the default is None)

        Returns
        -------
        `GaussianSet`
            Exactly N Gaussians regardless of the number of views.
        """
        return activate_params(self.forward(images, cameras, masks=masks))


def reconstruct(
    images: Tensor | np.ndarray,
    cameras: typing.Sequence[Camera],
    config: DecoderConfig,
    weights: dict[str, np.ndarray] | None = None,
    masks: np.ndarray | None = None,
) -> GaussianSet:
    """Build a model and reconstruct the Gaussians.

    Parameters
    ----------
    images : `Tensor` or `numpy.ndarray`
        Images [I, 3, H, W].
    cameras : `list` [`Camera`]
        Cameras of the images.
    config : `DecoderConfig`
        Configuration.
    weights : `dict` or None, optional
        Model weights. None keeps the seeded initial weights. (the default
        is None)
    masks : `numpy.ndarray` or None, optional
        Foreground masks [I, H, W]. (the default is None)

    Returns
    -------
    `GaussianSet`
        Gaussians.
    """

    model = UniGSModel(config, logging.getLogger(__name__))
    if weights is not None:
        model.load_state_dict(weights)

    return model.reconstruct(images, cameras, masks=masks)
