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

import logging
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from pytestqt.qtbot import QtBot

from lsst.ts.unigs import (
    CheckReport,
    CheckResult,
    CheckRunner,
    FaultMode,
    get_registered_checks,
    inject_fault,
    register_check,
)
from lsst.ts.unigs.kernel import ops

TIMEOUT = 1000

CHEAP_CHECKS = ["softmax_normalization", "covariance_psd", "projection_oracle", "psnr_monotone"]


@pytest.fixture
def runner() -> CheckRunner:
    return CheckRunner(logging.getLogger(), num_instances=5)


def test_registry() -> None:
    checks = get_registered_checks()

    assert len(checks) > 30
    for name in CHEAP_CHECKS + ["kernel_gradients", "mvdfa_fusion_permutation", "sesa_full_rate"]:
        assert name in checks

    # A copy
    checks.clear()
    assert len(get_registered_checks()) > 0


def test_register_check_duplicate() -> None:
    with pytest.raises(ValueError):

        @register_check("softmax_normalization")
        def _duplicate(context) -> tuple[bool, str]:
            return True, ""


def test_report() -> None:
    assert not CheckReport().passed

    report = CheckReport([CheckResult("a", True, 0.1), CheckResult("b", False, 0.2, "broken")])

    assert not report.passed
    assert report.failures == ["b"]
    assert list(report.to_frame().columns) == ["name", "passed", "seconds", "message"]


def test_run_selected(runner: CheckRunner) -> None:
    report = runner.run(CHEAP_CHECKS)

    assert report.passed, report.to_frame()
    assert [result.name for result in report.results] == CHEAP_CHECKS
    assert all(result.seconds >= 0.0 for result in report.results)


def test_run_decoder_checks(runner: CheckRunner) -> None:
    names = ["identity_update", "decoder_identity_head", "decoder_view_scaling"]
    report = runner.run(names)

    assert report.passed, report.failures
    assert "ratio" in report.results[-1].message


def test_run_all(runner: CheckRunner) -> None:
    report = runner.run()

    assert report.passed, report.failures
    assert len(report.results) == len(get_registered_checks())


def test_run_empty(runner: CheckRunner) -> None:
    report = runner.run([])

    assert not report.passed


def test_run_unknown(runner: CheckRunner) -> None:
    with pytest.raises(ValueError):
        runner.run(["no_such_check"])


def test_run_fault() -> None:
    runner = CheckRunner(logging.getLogger(), fault=FaultMode.SoftmaxAxis, num_instances=5)

    report = runner.run(["softmax_normalization", "covariance_psd", "sesa_attention_rows"])

    assert report.failures == ["softmax_normalization", "sesa_attention_rows"]

    # The fault does not outlive the run
    assert CheckRunner(logging.getLogger(), num_instances=5).run(["softmax_normalization"]).passed


def test_inject_fault() -> None:
    softmax = ops.softmax
    logits = np.zeros((2, 4))

    with inject_fault(FaultMode.SoftmaxAxis):
        np.testing.assert_allclose(ops.softmax(logits, axis=-1).data.sum(axis=-1), [2.0, 2.0])

    assert ops.softmax is softmax
    np.testing.assert_allclose(ops.softmax(logits, axis=-1).data.sum(axis=-1), [1.0, 1.0])

    with inject_fault(FaultMode.Nothing):
        assert ops.softmax is softmax


def test_inject_fault_restores_on_error() -> None:
    softmax = ops.softmax

    with pytest.raises(RuntimeError):
        with inject_fault(FaultMode.SoftmaxAxis):
            raise RuntimeError("Failure inside the context.")

    assert ops.softmax is softmax


def test_run_signal(qtbot: QtBot, runner: CheckRunner) -> None:
    signal = runner.signals["check"].result
    with qtbot.waitSignal(signal, timeout=TIMEOUT, check_params_cb=lambda name, *_: name == "covariance_psd"):
        runner.run(["covariance_psd"])


def test_write_report(tmp_path: Path, runner: CheckRunner) -> None:
    report = runner.run(["covariance_psd"])
    runner.write_report(report, tmp_path / "checks" / "report.csv")

    table = pd.read_csv(tmp_path / "checks" / "report.csv")

    assert table["name"].tolist() == ["covariance_psd"]
    assert bool(table["passed"][0])
