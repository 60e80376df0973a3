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
    "read_png",
    "write_png",
    "read_yaml_file",
    "get_default_config_path",
]

import importlib.resources
from pathlib import Path

import numpy as np
import yaml
from PIL import Image


def read_png(path: Path | str) -> tuple[np.ndarray, np.ndarray | None]:
    """Read a PNG image.

    Parameters
    ----------
    path : `pathlib.Path` or `str`
        Image file.

    Returns
    -------
    rgb : `numpy.ndarray`
        Colors in [0, 1] with the shape of [3, H, W].
    alpha : `numpy.ndarray` or None
        Alpha channel in [0, 1] with the shape of [H, W], or None if the
        image has no alpha channel.

    Raises
    ------
    `FileNotFoundError`
        When the file does not exist.
    """

    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Image does not exist: {path}.")

    with Image.open(path) as image:
        has_alpha = ("A" in image.getbands()) or ("transparency" in image.info)
        values = np.asarray(image.convert("RGBA" if has_alpha else "RGB"), dtype=np.float64) / 255.0

    rgb = np.ascontiguousarray(values[..., :3].transpose(2, 0, 1))
    return rgb, (values[..., 3] if has_alpha else None)


def write_png(path: Path | str, rgb: np.ndarray, alpha: np.ndarray | None = None) -> None:
    """Write an 8-bit PNG image. The values are stored as they are, without
    a gamma transform.

    Parameters
    ----------
    path : `pathlib.Path` or `str`
        Image file.
    rgb : `numpy.ndarray`
        Colors in [0, 1] with the shape of [3, H, W].
    alpha : `numpy.ndarray` or None, optional
        Alpha channel in [0, 1] with the shape of [H, W]. (the default is
        None)
    """

    channels = [np.asarray(rgb).transpose(1, 2, 0)]
    if alpha is not None:
        channels.append(np.asarray(alpha)[..., np.newaxis])

    values = np.clip(np.concatenate(channels, axis=-1), 0.0, 1.0)
    pixels = np.round(values * 255.0).astype(np.uint8)

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels).save(path)


def read_yaml_file(path: Path | str) -> dict:
    """Read a YAML (or JSON) file.

    Parameters
    ----------
    path : `pathlib.Path` or `str`
        File.

    Returns
    -------
    `dict`
        Content. An empty file gives an empty dictionary.

    Raises
    ------
    `FileNotFoundError`
        When the file does not exist.
    `ValueError`
        When the content is not a mapping.
    """

    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Configuration file does not exist: {path}.")

    with open(path) as file:
        content = yaml.safe_load(file)

    if content is None:
        return dict()

    if not isinstance(content, dict):
        raise ValueError(f"Configuration file must hold a mapping: {path}.")

    return content


def get_default_config_path() -> Path:
    """Get the path of the packaged default configuration.

    Returns
    -------
    `pathlib.Path`
        Path of default.yaml.
    """
    return Path(str(importlib.resources.files("lsst.ts.unigs").joinpath("config", "default.yaml")))
