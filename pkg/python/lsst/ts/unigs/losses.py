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
    "MetricRow",
    "mse_loss",
    "total_loss",
    "psnr",
    "ssim",
    "write_metric_report",
]

import typing
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from .constants import MSE_MIN, PSNR_MAX, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW
from .kernel import Tensor, as_tensor, ops
from .renderer import RenderedImage
from .structs import LossConfig

ImageLike = typing.Union[RenderedImage, Tensor, np.ndarray]


@dataclass(frozen=True)
class MetricRow:
    """Row of the metric report."""

    scene: str
    view: str
    psnr: float
    ssim: float
    mse: float


def _as_image(image: ImageLike) -> Tensor:
    return image.rgb if isinstance(image, RenderedImage) else as_tensor(image)


def mse_loss(pred: ImageLike, gt: ImageLike) -> Tensor:
    """Mean squared error over all the pixels and channels.

    Parameters
    ----------
    pred : `RenderedImage`, `Tensor`, or `numpy.ndarray`
        Prediction.
    gt : `RenderedImage`, `Tensor`, or `numpy.ndarray`
        Ground truth.

    Returns
    -------
    `Tensor`
        Scalar loss.

    Raises
    ------
    `ValueError`
        When the shapes mismatch.
    """

    pred, gt = _as_image(pred), _as_image(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"Image shapes mismatch: {pred.shape} != {gt.shape}.")

    return ops.mean(ops.square(pred - gt))


def total_loss(pred: ImageLike, gt: ImageLike, config: LossConfig) -> Tensor:
    """Training objective: the MSE plus the weighted perceptual term when a
    perceptual hook is configured.

    Parameters
    ----------
    pred : `RenderedImage`, `Tensor`, or `numpy.ndarray`
        Prediction.
    gt : `RenderedImage`, `Tensor`, or `numpy.ndarray`
        Ground truth.
    config : `LossConfig`
        Loss configuration.

    Returns
    -------
    `Tensor`
        Scalar loss.
    """

    loss = mse_loss(pred, gt)
    if config.perceptual_hook is None:
        return loss

    return loss + config.weight_perceptual * as_tensor(config.perceptual_hook(_as_image(pred), _as_image(gt)))


def psnr(pred: ImageLike, gt: ImageLike) -> float:
    """Peak signal-to-noise ratio for the values in [0, 1].

    Parameters
    ----------
    pred : `RenderedImage`, `Tensor`, or `numpy.ndarray`
        Prediction.
    gt : `RenderedImage`, `Tensor`, or `numpy.ndarray`
        Ground truth.

    Returns
    -------
    `float`
        PSNR in dB, capped at PSNR_MAX.
    """

    error = float(np.mean(np.square(_as_image(pred).data - _as_image(gt).data)))
    if error < MSE_MIN:
        return PSNR_MAX

    return min(PSNR_MAX, 10.0 * float(np.log10(1.0 / error)))


def _gaussian_window() -> np.ndarray:
    offsets = np.arange(SSIM_WINDOW) - (SSIM_WINDOW - 1) / 2.0
    window = np.exp(-np.square(offsets) / (2.0 * SSIM_SIGMA**2))
    return window / window.sum()


def _filter_valid(image: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Separable filtering of the last two axes without padding."""

    rows = sliding_window_view(image, window.size, axis=-2) @ window
    return sliding_window_view(rows, window.size, axis=-1) @ window


def ssim(pred: ImageLike, gt: ImageLike) -> float:
    """Structural similarity with the 11x11 Gaussian window (sigma 1.5),
    averaged over the windows and channels.

    Parameters
    ----------
    pred : `RenderedImage`, `Tensor`, or `numpy.ndarray`
        Prediction [C, H, W] or [H, W] with the values in [0, 1].
    gt : `RenderedImage`, `Tensor`, or `numpy.ndarray`
        Ground truth with the same shape.

    Returns
    -------
    `float`
        SSIM in [-1, 1].

    Raises
    ------
    `ValueError`
        When the shapes mismatch or the image is smaller than the window.
    """

    x = _as_image(pred).data
    y = _as_image(gt).data
    if x.shape != y.shape:
        raise ValueError(f"Image shapes mismatch: {x.shape} != {y.shape}.")

    if (x.ndim < 2) or (min(x.shape[-2:]) < SSIM_WINDOW):
        raise ValueError(f"Image must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape}.")

    window = _gaussian_window()
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2

    mean_x = _filter_valid(x, window)
    mean_y = _filter_valid(y, window)
    mean_xy = mean_x * mean_y

    variance_x = _filter_valid(x * x, window) - mean_x * mean_x
    variance_y = _filter_valid(y * y, window) - mean_y * mean_y
    covariance = _filter_valid(x * y, window) - mean_xy

    similarity = ((2.0 * mean_xy + c1) * (2.0 * covariance + c2)) / (
        (mean_x * mean_x + mean_y * mean_y + c1) * (variance_x + variance_y + c2)
    )
    return float(np.mean(similarity))


def write_metric_report(rows: typing.Sequence[MetricRow], path: Path | str) -> pd.DataFrame:
    """Write the metrics as a CSV file.

    Parameters
    ----------
    rows : `list` [`MetricRow`]
        Metrics.
    path : `pathlib.Path` or `str`
        CSV file.

    Returns
    -------
    `pandas.DataFrame`
        Written table with the columns scene, view, psnr, ssim, and mse.
    """

    table = pd.DataFrame([asdict(row) for row in rows], columns=["scene", "view", "psnr", "ssim", "mse"])

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path, index=False)

    return table
