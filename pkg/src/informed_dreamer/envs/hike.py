"""Varying Mountain Hike: walk to the top of a 2D terrain.

Moves are expressed relative to a hidden initial orientation (always North,
or a random cardinal direction in the varying variant).  The agent observes a
noisy position or a noisy altitude; the information is the full state.
"""

from __future__ import annotations

import numpy as np

from informed_dreamer.envs.base import EnvDescriptor, InformedEnv, InformedStep, one_hot

TOP = np.array([0.7, 0.7])
SECOND_PEAK = np.array([-0.5, -0.2])
START = np.array([-0.8, -0.8])
STEP_SIZE = 0.05
OBS_NOISE = 0.05
TOP_RADIUS = 0.1
MAX_STEPS = 160
# N, E, S, W
DIRECTIONS = np.array([[0.0, 1.0], [1.0, 0.0], [0.0, -1.0], [-1.0, 0.0]])


def altitude(pos) -> np.ndarray:
    """Gaussian main peak at TOP plus a compactly supported secondary bump.

    The secondary bump vanishes around TOP, so TOP is the exact global maximum.
    """
    pos = np.asarray(pos, dtype=np.float64)
    main = np.exp(-np.sum((pos - TOP) ** 2, -1) / (2 * 0.5**2))
    r2 = np.sum((pos - SECOND_PEAK) ** 2, -1) / 0.6**2
    bump = 0.6 * np.where(r2 < 1.0, (1.0 - r2) ** 2, 0.0)
    return main + bump


TOP_ALTITUDE = float(altitude(TOP))


def rotate(vec: np.ndarray, orientation: int) -> np.ndarray:
    """Rotate a North-relative vector clockwise by ``orientation`` quarter turns."""
    x, y = vec
    for _ in range(orientation % 4):
        x, y = y, -x
    return np.array([x, y])


class MountainHike(InformedEnv):
    def __init__(
        self,
        altitude_obs: bool = False,
        varying: bool = False,
        continuous: bool = False,
        gamma: float = 0.997,
    ):
        super().__init__()
        self.altitude_obs = altitude_obs
        self.varying = varying
        self.continuous = continuous
        self.max_steps = MAX_STEPS
        box = dict(action_low=(-1.0, -1.0), action_high=(1.0, 1.0))
        self.descriptor = EnvDescriptor(
            obs_dim=1 if altitude_obs else 2,
            info_dim=6,
            gamma=gamma,
            **(box if continuous else dict(n_actions=4)),
        )
        self.pos = START.copy()
        self.orientation = 0

    def _emit(self) -> tuple[np.ndarray, np.ndarray]:
        info = np.concatenate([self.pos, one_hot(self.orientation, 4)])
        if self.altitude_obs:
            obs = np.array([altitude(self.pos)]) + self.rng.normal(0.0, OBS_NOISE, 1)
        else:
            obs = self.pos + self.rng.normal(0.0, OBS_NOISE, 2)
        return info, obs

    def _reset(self):
        self.orientation = int(self.rng.integers(4)) if self.varying else 0
        self.pos = START + self.rng.uniform(-0.05, 0.05, 2)
        return self._emit()

    def _step(self, action) -> InformedStep:
        if self.continuous:
            move = np.asarray(action, dtype=np.float64)
            norm = np.linalg.norm(move)
            if norm > 1.0:
                move = move / norm
            move = rotate(move, self.orientation)
        else:
            move = DIRECTIONS[(action + self.orientation) % 4]
        self.pos = np.clip(self.pos + STEP_SIZE * move, -1.0, 1.0)
        reward = float(altitude(self.pos)) - TOP_ALTITUDE
        at_top = bool(np.linalg.norm(self.pos - TOP) <= TOP_RADIUS)
        info, obs = self._emit()
        return InformedStep(reward, info, obs, not at_top, success=at_top or None)
