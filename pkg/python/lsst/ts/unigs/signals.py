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

__all__ = ["SignalProgress", "SignalEpoch", "SignalCheck", "SignalArtifact"]

from PySide6 import QtCore


class SignalProgress(QtCore.QObject):
    """Progress signal to send the optimization step."""

    # Step index and the loss of the step
    step = QtCore.Signal(int, float)


class SignalEpoch(QtCore.QObject):
    """Epoch signal to send the training metrics."""

    # Epoch index and the mean training PSNR in dB
    psnr = QtCore.Signal(int, float)


class SignalCheck(QtCore.QObject):
    """Check signal to send the result of an invariant check."""

    # Name of the check, passed or not, and the wall time in second
    result = QtCore.Signal(str, bool, float)


class SignalArtifact(QtCore.QObject):
    """Artifact signal to send the path of a written file."""

    # Path of the file
    path = QtCore.Signal(str)
