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

__all__ = ["ParamGroup", "Adam"]

import typing
from dataclasses import dataclass

import numpy as np

from .constants import ADAM_BETA1, ADAM_BETA2, ADAM_EPS
from .kernel import GradientMap, Tensor


@dataclass
class ParamGroup:
    """Parameters sharing a learning rate."""

    # Name of the group
    name: str

    # Parameters keyed by their names
    parameters: dict[str, Tensor]

    # Learning rate
    learning_rate: float


class Adam:
    """Adam optimizer with the bias-corrected first and second moments.

    Parameters
    ----------
    groups : `list` [`ParamGroup`]
        Parameter groups. The parameter names must be unique across the
        groups.
    betas : `tuple`, optional
        Decay rates of the moments. (the default is (ADAM_BETA1, ADAM_BETA2))
    eps : `float`, optional
        Added to the root of the second moment. (the default is ADAM_EPS)

    Attributes
    ----------
    groups : `list` [`ParamGroup`]
        Parameter groups.
    step_count : `int`
        Number of the applied steps.

    Raises
    ------
    `ValueError`
        When a parameter name is repeated or a learning rate is not positive.
    """

    def __init__(
        self,
        groups: typing.Sequence[ParamGroup],
        betas: tuple[float, float] = (ADAM_BETA1, ADAM_BETA2),
        eps: float = ADAM_EPS,
    ) -> None:
        self.groups = list(groups)
        self.betas = betas
        self.eps = eps

        names = [name for group in self.groups for name in group.parameters]
        if len(names) != len(set(names)):
            raise ValueError("Parameter names must be unique across the groups.")

        for group in self.groups:
            if group.learning_rate <= 0.0:
                raise ValueError(
                    f"Learning rate of {group.name} must be positive, got {group.learning_rate}."
                )

        self.step_count = 0
        self._moment_1 = {name: np.zeros(0) for name in names}
        self._moment_2 = {name: np.zeros(0) for name in names}
        for group in self.groups:
            for name, parameter in group.parameters.items():
                self._moment_1[name] = np.zeros_like(parameter.data)
                self._moment_2[name] = np.zeros_like(parameter.data)

    def step(self, gradients: GradientMap) -> None:
        """Apply one update. The parameters the loss does not reach keep
        their values and moments.

        Parameters
        ----------
        gradients : `GradientMap`
            Gradients of the loss.
        """

        self.step_count += 1
        beta_1, beta_2 = self.betas
        correction_1 = 1.0 - beta_1**self.step_count
        correction_2 = 1.0 - beta_2**self.step_count

        for group in self.groups:
            for name, parameter in group.parameters.items():
                if not parameter.requires_grad:
                    continue

                gradient = gradients.get(parameter)
                if gradient is None:
                    continue

                moment_1 = self._moment_1[name]
                moment_2 = self._moment_2[name]
                moment_1 *= beta_1
                moment_1 += (1.0 - beta_1) * gradient
                moment_2 *= beta_2
                moment_2 += (1.0 - beta_2) * np.square(gradient)

                denominator = np.sqrt(moment_2 / correction_2) + self.eps
                parameter.data -= group.learning_rate * (moment_1 / correction_1) / denominator

    def state_dict(self) -> dict[str, np.ndarray]:
        """Copy the optimizer state.

        Returns
        -------
        `dict`
            Moments keyed by "m/<name>" and "v/<name>", and the step count
            keyed by "step".
        """

        state = {"step": np.array(self.step_count)}
        for name in self._moment_1:
            state[f"m/{name}"] = self._moment_1[name].copy()
            state[f"v/{name}"] = self._moment_2[name].copy()

        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        """Load the optimizer state.

        Parameters
        ----------
        state : `dict`
            State from state_dict().

        Raises
        ------
        `ValueError`
            When a moment is missing or its shape mismatches.
        """

        for name in self._moment_1:
            for prefix, moments in (("m", self._moment_1), ("v", self._moment_2)):
                key = f"{prefix}/{name}"
                if key not in state:
                    raise ValueError(f"Optimizer state misses {key}.")

                value = np.asarray(state[key])
                if value.shape != moments[name].shape:
                    raise ValueError(f"Shape mismatch of {key}: {value.shape} != {moments[name].shape}.")

                moments[name][...] = value

        self.step_count = int(state["step"])
