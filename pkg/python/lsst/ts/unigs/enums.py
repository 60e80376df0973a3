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

__all__ = ["InitStrategy", "SceneKind", "Split", "RunMode", "FaultMode"]

from enum import IntEnum, auto


class InitStrategy(IntEnum):
    """Initialization of the Gaussians and queries before the decoder."""

    RandomInCoV = 1  # Uniform in the bounding box and the cone of vision
    CoarsePerPixel = auto()  # Regressed per foreground pixel
    Random = auto()  # Uniform in the bounding box only


class SceneKind(IntEnum):
    """Kind of the synthetic scene."""

    Spheres3 = 1
    Cube = auto()
    RandomGaussians = auto()


class Split(IntEnum):
    """Role of a scene view."""

    Input = 1
    HeldOut = auto()


class RunMode(IntEnum):
    """Verb of the command line."""

    Synth = 1
    Fit = auto()
    TrainTiny = auto()
    Render = auto()
    Check = auto()
    Bench = auto()


class FaultMode(IntEnum):
    """Fault injected into the invariant checks."""

    Nothing = 0
    SoftmaxAxis = auto()  # Softmax over the wrong axis
