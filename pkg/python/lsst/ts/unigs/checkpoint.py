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

__all__ = ["Checkpoint", "save_checkpoint", "load_checkpoint"]

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .constants import CHECKPOINT_HEADER


@dataclass
class Checkpoint:
    """Content of a weight checkpoint."""

    # Weights keyed by the parameter names (float32)
    weights: dict[str, np.ndarray]

    # Optimizer state
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)

    # Training step
    step: int = 0

    # Model configuration
    config: dict = field(default_factory=dict)


def save_checkpoint(path: Path | str, checkpoint: Checkpoint) -> None:
    """Write the checkpoint as a flat archive.

    The archive holds the header string, a JSON manifest (name -> shape),
    the float32 weights under "weights/", the optimizer state under
    "optim/", the step, and the JSON configuration.

    Parameters
    ----------
    path : `pathlib.Path` or `str`
        Archive file (.npz).
    checkpoint : `Checkpoint`
        Content.
    """

    manifest = {name: list(value.shape) for name, value in checkpoint.weights.items()}

    arrays = {
        "__header__": np.array(CHECKPOINT_HEADER),
        "__manifest__": np.array(json.dumps(manifest)),
        "step": np.array(checkpoint.step),
        "config": np.array(json.dumps(checkpoint.config)),
    }
    arrays.update(
        {f"weights/{name}": np.asarray(value, dtype=np.float32) for name, value in checkpoint.weights.items()}
    )
    arrays.update({f"optim/{name}": np.asarray(value) for name, value in checkpoint.optimizer.items()})

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as file:
        np.savez(file, **arrays)


def load_checkpoint(path: Path | str) -> Checkpoint:
    """Read a checkpoint.

    Parameters
    ----------
    path : `pathlib.Path` or `str`
        Archive file.

    Returns
    -------
    `Checkpoint`
        Content.

    Raises
    ------
    `FileNotFoundError`
        When the file does not exist.
    `ValueError`
        When the header is not the expected version or a weight does not
        match the manifest.
    """

    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Checkpoint does not exist: {path}.")

    with np.load(path, allow_pickle=False) as archive:
        if ("__header__" not in archive.files) or (str(archive["__header__"]) != CHECKPOINT_HEADER):
            raise ValueError(f"{path} is not a {CHECKPOINT_HEADER} checkpoint.")

        manifest = json.loads(str(archive["__manifest__"]))

        weights = {
            key.removeprefix("weights/"): archive[key] for key in archive.files if key.startswith("weights/")
        }
        optimizer = {
            key.removeprefix("optim/"): archive[key] for key in archive.files if key.startswith("optim/")
        }
        step = int(archive["step"])
        config = json.loads(str(archive["config"]))

    if sorted(manifest) != sorted(weights):
        raise ValueError(f"Weights of {path} do not match the manifest.")

    for name, shape in manifest.items():
        if list(weights[name].shape) != shape:
            raise ValueError(f"Shape of {name} in {path} does not match the manifest: {weights[name].shape}.")

    return Checkpoint(weights=weights, optimizer=optimizer, step=step, config=config)
