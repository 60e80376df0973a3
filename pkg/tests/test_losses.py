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

from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from lsst.ts.unigs import (
    PSNR_MAX,
    LossConfig,
    MetricRow,
    RenderedImage,
    mse_loss,
    psnr,
    ssim,
    total_loss,
    write_metric_report,
)
from lsst.ts.unigs.kernel import Tensor, grad_check, ops


@pytest.fixture
def images() -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(0)
    return rng.random((3, 16, 16)), rng.random((3, 16, 16))


def test_mse_loss(images: tuple[np.ndarray, np.ndarray]) -> None:
    pred, gt = images

    assert mse_loss(gt, gt).item() == 0.0
    assert mse_loss(np.full((3, 4, 4), 0.6), np.full((3, 4, 4), 0.5)).item() == pytest.approx(0.01, abs=1e-15)

    total = 0.0
    for channel in range(3):
        for row in range(16):
            for col in range(16):
                total += (pred[channel, row, col] - gt[channel, row, col]) ** 2

    assert mse_loss(pred, gt).item() == pytest.approx(total / pred.size, abs=1e-12)


def test_mse_loss_rendered_image(images: tuple[np.ndarray, np.ndarray]) -> None:
    pred, gt = images
    rendered = RenderedImage(rgb=Tensor(pred), alpha=np.ones((16, 16)))

    assert mse_loss(rendered, gt).item() == mse_loss(pred, gt).item()


def test_mse_loss_shape_mismatch() -> None:
    with pytest.raises(ValueError):
        mse_loss(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))


def test_mse_loss_gradient(images: tuple[np.ndarray, np.ndarray]) -> None:
    pred, gt = images

    report = grad_check(lambda image: mse_loss(image, gt), [Tensor(pred[:, :6, :6].copy())], tol=1e-8)

    assert report.passed, report.failures


def test_total_loss(images: tuple[np.ndarray, np.ndarray]) -> None:
    pred, gt = images
    mse = mse_loss(pred, gt).item()

    assert total_loss(pred, gt, LossConfig()).item() == mse
    assert total_loss(pred, gt, LossConfig(weight_perceptual=0.0, perceptual_hook=mse_loss)).item() == mse
    doubled = LossConfig(weight_perceptual=1.0, perceptual_hook=mse_loss)
    assert total_loss(pred, gt, doubled).item() == 2.0 * mse

    constant = LossConfig(weight_perceptual=0.5, perceptual_hook=lambda a, b: 1.0)
    assert total_loss(pred, gt, constant).item() == pytest.approx(mse + 0.5)


def test_total_loss_hook_gradient(images: tuple[np.ndarray, np.ndarray]) -> None:
    pred, gt = images
    config = LossConfig(weight_perceptual=0.3, perceptual_hook=lambda a, b: ops.sum(a * b))

    target = gt[:, :4, :4]
    report = grad_check(lambda image: total_loss(image, target, config), [Tensor(pred[:, :4, :4].copy())])

    assert report.passed, report.failures


def test_loss_config_invalid() -> None:
    with pytest.raises(ValueError):
        LossConfig(weight_perceptual=-1.0)


def test_psnr() -> None:
    gt = np.full((3, 4, 4), 0.5)

    assert psnr(gt, gt) == PSNR_MAX
    assert psnr(gt + 0.1, gt) == pytest.approx(20.0)
    assert psnr(np.ones((3, 4, 4)), np.zeros((3, 4, 4))) == 0.0


def test_psnr_monotone() -> None:
    gt = np.full((3, 4, 4), 0.5)
    values = [psnr(gt + error, gt) for error in np.linspace(1e-3, 0.5, 50)]

    assert all(later < earlier for earlier, later in zip(values[:-1], values[1:]))


def test_ssim_identical(images: tuple[np.ndarray, np.ndarray]) -> None:
    pred, _ = images

    assert ssim(pred, pred) == pytest.approx(1.0, abs=1e-12)


def test_ssim_symmetric(images: tuple[np.ndarray, np.ndarray]) -> None:
    pred, gt = images

    assert abs(ssim(pred, gt) - ssim(gt, pred)) <= 1e-12
    assert -1.0 <= ssim(pred, gt) <= 1.0


def test_ssim_anticorrelated() -> None:
    binary = (np.random.default_rng(1).random((3, 16, 16)) > 0.5).astype(np.float64)

    assert ssim(1.0 - binary, binary) < 0.0


def test_ssim_constant() -> None:
    c1 = 0.01**2

    value = ssim(np.full((16, 16), 0.2), np.full((16, 16), 0.7))

    assert value == pytest.approx((2.0 * 0.2 * 0.7 + c1) / (0.2**2 + 0.7**2 + c1), abs=1e-9)


def test_ssim_small_image() -> None:
    with pytest.raises(ValueError):
        ssim(np.zeros((3, 10, 16)), np.zeros((3, 10, 16)))

    with pytest.raises(ValueError):
        ssim(np.zeros((3, 16, 16)), np.zeros((3, 16, 12)))


def test_write_metric_report(tmp_path: Path) -> None:
    rows = [
        MetricRow("spheres", "view_000.png", 21.5, 0.8, 0.007),
        MetricRow("spheres", "view_001.png", 19.0, 0.7, 0.0126),
    ]

    path = tmp_path / "report" / "metrics.csv"
    table = write_metric_report(rows, path)

    assert list(table.columns) == ["scene", "view", "psnr", "ssim", "mse"]

    loaded = pd.read_csv(path)
    assert loaded["view"].tolist() == ["view_000.png", "view_001.png"]
    np.testing.assert_allclose(loaded["psnr"], [21.5, 19.0])
