from __future__ import annotations

from dataclasses import replace

import numpy as np

from informed_dreamer.diffcore import ContractError
from informed_dreamer.envs.base import EnvDescriptor, InformedEnv, InformedStep

_FLICKER_STREAM = 0xF11C


class Flicker(InformedEnv):
    """Blank each observation with probability ``p``.

    Observations gain a trailing validity bit: ``[obs, 1]`` when shown and
    all zeros when blanked.  The wrapper draws from its own generator, so the
    wrapped environment's streams are untouched.
    """

    def __init__(self, env: InformedEnv, p: float = 0.5):
        super().__init__()
        if not 0.0 <= p <= 1.0:
            raise ContractError(f"flicker probability must lie in [0, 1], got {p}")
        self.env = env
        self.p = p
        d = env.descriptor
        self.descriptor = EnvDescriptor(**{**d.__dict__, "obs_dim": d.obs_dim + 1})
        self.blank_rng = np.random.default_rng(_FLICKER_STREAM)

    def _flicker(self, obs: np.ndarray) -> np.ndarray:
        if self.blank_rng.random() < self.p:
            return np.zeros(obs.shape[0] + 1)
        return np.concatenate([obs, [1.0]])

    def reset(self, seed: int | None = None):
        if seed is not None:
            self.blank_rng = np.random.default_rng([seed, _FLICKER_STREAM])
        info, obs, cont = self.env.reset(seed)
        return info, self._flicker(obs), cont

    def step(self, action) -> InformedStep:
        out = self.env.step(action)
        return replace(out, observation=self._flicker(out.observation))
