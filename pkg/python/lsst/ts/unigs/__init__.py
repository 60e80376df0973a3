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

try:
    from .version import __version__
except ImportError:
    __version__ = "?"

from .application import *
from .bench import *
from .camera import *
from .checkpoint import *
from .checks import *
from .constants import *
from .decoder import *
from .encoder import *
from .enums import *
from .fitting import *
from .gaussian_model import *
from .io_utils import *
from .kernel import *
from .losses import *
from .mvdfa import *
from .optimizer import *
from .renderer import *
from .scene import *
from .sesa import *
from .signals import *
from .structs import *
from .training import *
