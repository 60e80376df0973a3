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

__all__ = ["FeatureMaps", "UNetEncoder", "CrossViewAttention", "Encoder"]

from dataclasses import dataclass

import numpy as np

from .constants import ATTENTION_FULL_MAP_TOKENS, ATTENTION_WINDOW
from .kernel import Conv2d, Linear, Module, Tensor, as_tensor, ops


@dataclass(frozen=True, eq=False)
class FeatureMaps:
    """Per-view feature maps at 1/4 of the input resolution."""

    # Features [I, C, H', W']
    features: Tensor

    def __post_init__(self) -> None:
        if self.features.ndim != 4:
            raise ValueError(f"Feature maps must be [I, C, H', W'], got {self.features.shape}.")

    @property
    def num_views(self) -> int:
        return self.features.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    @property
    def height(self) -> int:
        return self.features.shape[2]

    @property
    def width(self) -> int:
        return self.features.shape[3]


class UNetEncoder(Module):
    """Per-view UNet: three stride-2 levels (32, 64, C channels) and one
    decoder level back to 1/4 resolution with the skip connection.

    Parameters
    ----------
    hidden : `int`
        Output channels (C).
    rng : `numpy.random.Generator`
        Random generator of the initial weights.
    """

    def __init__(self, hidden: int, rng: np.random.Generator) -> None:
        self.down_1 = Conv2d(3, 32, 3, rng, stride=2, padding=1)
        self.down_2 = Conv2d(32, 64, 3, rng, stride=2, padding=1)
        self.down_3 = Conv2d(64, hidden, 3, rng, stride=2, padding=1)

        self.up = Conv2d(hidden + 64, hidden, 3, rng, padding=1)
        self.head = Conv2d(hidden, hidden, 1, rng)

    def forward(self, images: Tensor) -> Tensor:
        level_1 = ops.relu(self.down_1(images))
        level_2 = ops.relu(self.down_2(level_1))
        level_3 = ops.relu(self.down_3(level_2))

        height, width = level_2.shape[-2:]
        upsampled = ops.upsample_nearest2x(level_3)[:, :, :height, :width]

        merged = ops.relu(self.up(ops.concat([upsampled, level_2], axis=1)))
        return self.head(merged)


class _WindowAttention(Module):
    """Attention of each view's window tokens to the same window of the
    other views."""

    def __init__(self, hidden: int, rng: np.random.Generator) -> None:
        self.query = Linear(hidden, hidden, rng)
        self.key = Linear(hidden, hidden, rng)
        self.value = Linear(hidden, hidden, rng)
        self.output = Linear(hidden, hidden, rng)

    def forward(self, tokens: Tensor, is_valid: np.ndarray | None) -> Tensor:
        # tokens: [I, nW, T, C], is_valid: [nW, T] per key or [nW, T, T] per
        # query and key
        num_view, num_window, num_token, hidden = tokens.shape

        others = np.array([[other for other in range(num_view) if other != view] for view in range(num_view)])

        def gather_others(values: Tensor) -> Tensor:
            # [I, I-1, nW, T, C] -> [I, nW, (I-1)T, C]
            gathered = ops.transpose(ops.take(values, others, axis=0), (0, 2, 1, 3, 4))
            return gathered.reshape(num_view, num_window, (num_view - 1) * num_token, hidden)

        query = self.query(tokens)
        key = gather_others(self.key(tokens))
        value = gather_others(self.value(tokens))

        scores = ops.matmul(query, ops.transpose(key, (0, 1, 3, 2))) / np.sqrt(hidden)
        if is_valid is not None:
            if is_valid.ndim == 2:
                is_valid = is_valid[:, np.newaxis, :]
            key_valid = np.tile(is_valid, (1, 1, num_view - 1))
            scores = scores + Tensor(np.where(key_valid, 0.0, -1e9))

        return self.output(ops.matmul(ops.softmax(scores, axis=-1), value))


class CrossViewAttention(Module):
    """Cross-view attention: each view's tokens attend to the tokens of all
    the other views within spatial windows, with the residual connection.

    Maps with at most ATTENTION_FULL_MAP_TOKENS tokens use a single
    full-map window. Larger maps use the windows of the size window x window
    followed by one pass with the windows shifted by half a window, in which
    the tokens wrapped across the edges attend only within their region.

    Parameters
    ----------
    hidden : `int`
        Feature channels (C).
    rng : `numpy.random.Generator`
        Random generator of the initial weights.
    window : `int`, optional
        Window size. (the default is ATTENTION_WINDOW)
    """

    def __init__(self, hidden: int, rng: np.random.Generator, window: int = ATTENTION_WINDOW) -> None:
        self.window = window

        self.attention = _WindowAttention(hidden, rng)
        self.attention_shifted = _WindowAttention(hidden, rng)

    def forward(self, feature_maps: FeatureMaps) -> FeatureMaps:
        if feature_maps.num_views == 1:
            return feature_maps

        # [I, H', W', C]
        tokens = ops.transpose(feature_maps.features, (0, 2, 3, 1))
        num_view, height, width, hidden = tokens.shape

        if height * width <= ATTENTION_FULL_MAP_TOKENS:
            windows = tokens.reshape(num_view, 1, height * width, hidden)
            tokens = tokens + self.attention(windows, None).reshape(tokens.shape)

        else:
            tokens = tokens + self._attend_windows(self.attention, tokens)

            shift = self.window // 2
            rolled = ops.roll(tokens, (-shift, -shift), axis=(1, 2))
            tokens = tokens + ops.roll(
                self._attend_windows(self.attention_shifted, rolled, shift=shift), (shift, shift), axis=(1, 2)
            )

        return FeatureMaps(ops.transpose(tokens, (0, 3, 1, 2)))

    def _attend_windows(self, attention: _WindowAttention, tokens: Tensor, shift: int = 0) -> Tensor:
        """Partition into the windows (zero padding at the bottom and right
        edges, masked as keys), attend, and merge back.

        With a shift, the tokens are rolled by it toward the top left. The
        tokens wrapped across the bottom or right edge then attend only to
        the tokens of their own region.
        """

        num_view, height, width, hidden = tokens.shape
        window = self.window
        num_row = -(-height // window)
        num_col = -(-width // window)
        height_pad = num_row * window
        width_pad = num_col * window

        padded = tokens
        if height_pad > height:
            padding = Tensor(np.zeros((num_view, height_pad - height, width, hidden)))
            padded = ops.concat([padded, padding], axis=1)
        if width_pad > width:
            padded = ops.concat(
                [padded, Tensor(np.zeros((num_view, height_pad, width_pad - width, hidden)))], axis=2
            )

        def partition(grid: np.ndarray) -> np.ndarray:
            # [H_pad, W_pad] -> [nW, T]
            return (
                grid.reshape(num_row, window, num_col, window)
                .transpose(0, 2, 1, 3)
                .reshape(num_row * num_col, window * window)
            )

        is_valid = np.zeros((height_pad, width_pad), dtype=bool)
        is_valid[:height, :width] = True
        is_valid = partition(is_valid)

        if shift > 0:
            region = np.zeros((height_pad, width_pad), dtype=int)
            region[max(height - shift, 0) :, :] += 2
            region[:, max(width - shift, 0) :] += 1
            region = partition(region)
            is_valid = is_valid[:, np.newaxis, :] & (region[:, :, np.newaxis] == region[:, np.newaxis, :])

        windows = ops.transpose(
            padded.reshape(num_view, num_row, window, num_col, window, hidden),
            (0, 1, 3, 2, 4, 5),
        ).reshape(num_view, num_row * num_col, window * window, hidden)

        attended = attention(windows, is_valid)

        merged = ops.transpose(
            attended.reshape(num_view, num_row, num_col, window, window, hidden),
            (0, 1, 3, 2, 4, 5),
        ).reshape(num_view, height_pad, width_pad, hidden)

        return merged[:, :height, :width, :]


class Encoder(Module):
    """Multi-view feature extractor: the shared UNet per view followed by
    the cross-view attention.

    Parameters
    ----------
    hidden : `int`
        Feature channels (C).
    rng : `numpy.random.Generator`
        Random generator of the initial weights.
    is_frozen : `bool`, optional
        The weights get no gradient. (the default is False)
    """

    def __init__(self, hidden: int, rng: np.random.Generator, is_frozen: bool = False) -> None:
        self.unet = UNetEncoder(hidden, rng)
        self.cross_view = CrossViewAttention(hidden, rng)

        self.freeze(is_frozen)

    def extract_features(self, images: Tensor | np.ndarray) -> FeatureMaps:
        """Run the UNet on each view.

        Parameters
        ----------
        images : `Tensor` or `numpy.ndarray`
            Images [I, 3, H, W] with the values in [0, 1].

        Returns
        -------
        `FeatureMaps`
            Features [I, C, H/4, W/4].

        Raises
        ------
        `ValueError`
            When the shape is wrong or H, W are not divisible by 4.
        """

        images = as_tensor(images)
        if (images.ndim != 4) or (images.shape[1] != 3):
            raise ValueError(f"Images must be [I, 3, H, W], got {images.shape}.")

        height, width = images.shape[2:]
        if (height % 4 != 0) or (width % 4 != 0):
            raise ValueError(f"Image height and width must be divisible by 4, got {height}x{width}.")

        return FeatureMaps(self.unet(images))

    def cross_view_attention(self, feature_maps: FeatureMaps) -> FeatureMaps:
        """Let each view's features see the other views.

        Parameters
        ----------
        feature_maps : `FeatureMaps`
            Per-view features.

        Returns
        -------
        `FeatureMaps`
            Features. A single view is returned as it is.
        """
        return self.cross_view(feature_maps)

    def forward(self, images: Tensor | np.ndarray) -> FeatureMaps:
        return self.cross_view_attention(self.extract_features(images))
