"""T-maze memory task with the goal side as privileged information.

The agent walks a corridor of length ``L`` and must turn towards the goal at
the junction.  The goal is cued only in the first observation; the
information channel carries the observation together with the goal side at
every step.
"""

from __future__ import annotations

import numpy as np

from informed_dreamer.envs.base import EnvDescriptor, InformedEnv, InformedStep, one_hot

EAST, WEST, NORTH, SOUTH = 0, 1, 2, 3
CUE_UP, CUE_DOWN, CORRIDOR, JUNCTION = 0, 1, 2, 3
SUCCESS_REWARD = 4.0
FAILURE_REWARD = -0.1


class TMaze(InformedEnv):
    def __init__(self, length: int = 4, max_steps: int | None = None, gamma: float = 0.98):
        super().__init__()
        self.length = length
        self.max_steps = max_steps if max_steps is not None else 4 * (length + 1)
        self.descriptor = EnvDescriptor(obs_dim=4, info_dim=6, gamma=gamma, n_actions=4)
        self.pos = 0
        self.goal = 0

    def _observation(self, first: bool) -> np.ndarray:
        if first:
            return one_hot(CUE_UP if self.goal == 0 else CUE_DOWN, 4)
        return one_hot(JUNCTION if self.pos == self.length else CORRIDOR, 4)

    def _information(self, obs: np.ndarray) -> np.ndarray:
        return np.concatenate([obs, one_hot(self.goal, 2)])

    def _reset(self):
        self.pos = 0
        self.goal = int(self.rng.integers(2))
        obs = self._observation(first=True)
        return self._information(obs), obs

    def _step(self, action: int) -> InformedStep:
        if self.pos == self.length and action in (NORTH, SOUTH):
            won = (action == NORTH) == (self.goal == 0)
            obs = self._observation(first=False)
            reward = SUCCESS_REWARD if won else FAILURE_REWARD
            return InformedStep(reward, self._information(obs), obs, False, success=won)
        if action == EAST:
            self.pos = min(self.pos + 1, self.length)
        elif action == WEST:
            self.pos = max(self.pos - 1, 0)
        obs = self._observation(first=False)
        return InformedStep(0.0, self._information(obs), obs, True)

    def optimal_actions(self) -> list[int]:
        return [EAST] * self.length + [NORTH if self.goal == 0 else SOUTH]
