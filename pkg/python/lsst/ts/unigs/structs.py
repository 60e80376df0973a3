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

__all__ = ["DecoderConfig", "LossConfig", "RunConfig"]

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .enums import FaultMode, InitStrategy, RunMode, SceneKind


def _check_keys(name: str, values: dict, allowed: typing.Iterable[str]) -> None:
    unknown = sorted(set(values) - set(allowed))
    if unknown:
        raise ValueError(f"Unknown keys of {name}: {unknown}.")


@dataclass(frozen=True)
class DecoderConfig:
    """Configuration of the reconstruction model."""

    # Number of the Gaussians (N)
    num_gaussians: int = 512

    # Hidden width of the queries and features (C)
    hidden: int = 64

    # Number of the decoder layers (L)
    num_layers: int = 2

    # Sampling points per view and query (Ns)
    num_samples: int = 4

    # Fraction of the queries used as the keys and values of the
    # self-attention
    sesa_rate: float = 0.01

    # Hidden width of the feed-forward network
    ffn_width: int = 128

    # Attention heads of the deformable cross-attention
    n_heads: int = 1

    # Initialization strategy (enum `InitStrategy`)
    init_strategy: InitStrategy = InitStrategy.RandomInCoV

    # Depth prior of the per-pixel initialization
    init_depth: float = 2.5

    # Half extent of the initialization bounding box
    init_box_half_extent: float = 1.0

    # Seed of the initialization
    seed: int = 0

    # Ablation switches
    use_mvdfa: bool = True
    use_sesa: bool = True
    use_camera_modulation: bool = True
    freeze_encoder: bool = False

    # Stop the gradient into the reference points
    detach_reference_points: bool = False

    # Short names of the fields accepted by from_dict()
    ALIASES: typing.ClassVar[dict[str, str]] = {
        "N": "num_gaussians",
        "C": "hidden",
        "L": "num_layers",
        "Ns": "num_samples",
    }

    def __post_init__(self) -> None:
        for name in ("num_gaussians", "hidden", "num_layers", "num_samples", "ffn_width", "n_heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}.")

        if not (0.0 < self.sesa_rate <= 1.0):
            raise ValueError(f"sesa_rate must be in (0, 1], got {self.sesa_rate}.")

        if self.hidden % self.n_heads != 0:
            raise ValueError(f"hidden ({self.hidden}) must be divisible by n_heads ({self.n_heads}).")

        if (self.init_depth <= 0.0) or (self.init_box_half_extent <= 0.0):
            raise ValueError("init_depth and init_box_half_extent must be positive.")

    @classmethod
    def desk_scale(cls) -> "DecoderConfig":
        """Small model for a single CPU.

        Returns
        -------
        `DecoderConfig`
            Configuration.
        """
        return cls()

    @classmethod
    def full_scale(cls) -> "DecoderConfig":
        """Full-size model.

        Returns
        -------
        `DecoderConfig`
            Configuration.
        """
        return cls(num_gaussians=19600, hidden=256, num_layers=4, ffn_width=1024)

    @classmethod
    def from_dict(cls, values: dict, base: "DecoderConfig | None" = None) -> "DecoderConfig":
        """Override the fields of a base configuration.

        Parameters
        ----------
        values : `dict`
            New values keyed by the field names or their short names (N, C,
            L, Ns). The value of "init_strategy" is the enum name.
        base : `DecoderConfig` or None, optional
            Base configuration. None means the desk scale. (the default is
            None)

        Returns
        -------
        `DecoderConfig`
            Configuration.

        Raises
        ------
        `ValueError`
            When a key is unknown.
        """

        fields = {cls.ALIASES.get(key, key): value for key, value in values.items()}
        _check_keys("DecoderConfig", fields, [item.name for item in dataclasses.fields(cls)])

        if isinstance(fields.get("init_strategy"), str):
            fields["init_strategy"] = InitStrategy[fields["init_strategy"]]

        return dataclasses.replace(base or cls.desk_scale(), **fields)

    def to_dict(self) -> dict:
        """Convert to a dictionary of plain values.

        Returns
        -------
        `dict`
            Values keyed by the field names.
        """

        values = dataclasses.asdict(self)
        values["init_strategy"] = self.init_strategy.name
        return values


@dataclass(frozen=True)
class LossConfig:
    """Configuration of the training objective."""

    # Weight of the perceptual term
    weight_perceptual: float = 1.0

    # Image distance of the perceptual term, f(pred, gt) -> scalar tensor.
    # None disables the term.
    perceptual_hook: typing.Callable | None = None

    def __post_init__(self) -> None:
        if self.weight_perceptual < 0.0:
            raise ValueError(f"weight_perceptual must be >= 0, got {self.weight_perceptual}.")


@dataclass(frozen=True)
class RunConfig:
    """Configuration of a command-line run."""

    # Verb (enum `RunMode`)
    mode: RunMode = RunMode.Fit

    # Scene directory
    scene_dir: Path | None = None

    # Output directory
    output_dir: Path = Path("output")

    # Model configuration
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    # Loss configuration
    loss: LossConfig = field(default_factory=LossConfig)

    # Optimization steps
    iterations: int = 1500

    # Learning rate
    learning_rate: float = 1e-4

    # Random seed
    seed: int = 0

    # Number of the input views
    num_views: int = 4

    # Image height and width of the synthetic scenes
    resolution: int = 32

    # Kind of the synthetic scene (enum `SceneKind`)
    kind: SceneKind = SceneKind.Spheres3

    # Number of the held-out views of the synthetic scenes
    num_heldout: int = 2

    # Number of the Gaussians of the per-scene fitting
    num_fit_gaussians: int = 2000

    # Number of the synthetic scenes of the tiny training
    num_scenes: int = 4

    # Weight checkpoint to read or write
    checkpoint: Path | None = None

    # Splat file to render
    ply: Path | None = None

    # Checkpoint to resume the training from
    resume: Path | None = None

    # Fault injected into the checks (enum `FaultMode`)
    fault: FaultMode = FaultMode.Nothing

    # Run the ablation sweep of the benchmark
    is_ablation: bool = False

    def __post_init__(self) -> None:
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}.")

        if self.learning_rate <= 0.0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}.")

        for name in ("num_views", "resolution", "num_fit_gaussians", "num_scenes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}.")

        if self.num_heldout < 0:
            raise ValueError(f"num_heldout must be >= 0, got {self.num_heldout}.")

    @classmethod
    def from_dict(cls, values: dict, base: "RunConfig | None" = None) -> "RunConfig":
        """Override the fields of a base configuration.

        Parameters
        ----------
        values : `dict`
            New values keyed by the field names. "decoder" is a dictionary
            for `DecoderConfig.from_dict()`, "decoder_preset" is "desk" or
            "full", and the enum fields take the enum names.
        base : `RunConfig` or None, optional
            Base configuration. (the default is None)

        Returns
        -------
        `RunConfig`
            Configuration.

        Raises
        ------
        `ValueError`
            When a key or a preset is unknown.
        """

        fields = dict(values)
        base = base or cls()

        preset = fields.pop("decoder_preset", None)
        decoder = base.decoder
        if preset is not None:
            presets = {"desk": DecoderConfig.desk_scale, "full": DecoderConfig.full_scale}
            if preset not in presets:
                raise ValueError(f"Unknown decoder preset: {preset}. Use one of {sorted(presets)}.")

            decoder = presets[preset]()

        if "decoder" in fields:
            decoder = DecoderConfig.from_dict(fields.pop("decoder") or dict(), base=decoder)

        fields["decoder"] = decoder

        _check_keys("RunConfig", fields, [item.name for item in dataclasses.fields(cls)])

        for name, enum_class in (("mode", RunMode), ("kind", SceneKind), ("fault", FaultMode)):
            if isinstance(fields.get(name), str):
                fields[name] = enum_class[fields[name]]

        for name in ("scene_dir", "output_dir", "checkpoint", "ply", "resume"):
            if isinstance(fields.get(name), str):
                fields[name] = Path(fields[name])

        return dataclasses.replace(base, **fields)
