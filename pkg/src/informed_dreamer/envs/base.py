from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from informed_dreamer.diffcore import ContractError


@dataclass(frozen=True)
class EnvDescriptor:
    """Shapes and discount of an informed environment.

    ``n_actions`` is set for finite action spaces; ``action_low``/``action_high``
    describe a box otherwise.
    """

    obs_dim: int
    info_dim: int
    gamma: float
    n_actions: int | None = None
    action_low: tuple[float, ...] | None = None
    action_high: tuple[float, ...] | None = None

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ContractError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.obs_dim < 1 or self.info_dim < 1:
            raise ContractError("observation and information dimensions must be positive")
        if (self.n_actions is None) == (self.action_low is None):
            raise ContractError("exactly one of n_actions or a box action space is required")

    @property
    def discrete(self) -> bool:
        return self.n_actions is not None

    @property
    def action_dim(self) -> int:
        return self.n_actions if self.discrete else len(self.action_low)

    def to_dict(self) -> dict:
        return {
            "obs_dim": self.obs_dim,
            "info_dim": self.info_dim,
            "gamma": self.gamma,
            "n_actions": self.n_actions,
            "action_low": list(self.action_low) if self.action_low is not None else None,
            "action_high": list(self.action_high) if self.action_high is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnvDescriptor":
        d = dict(d)
        for k in ("action_low", "action_high"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class InformedStep:
    """One transition.  ``truncated`` marks a time-limit cut, which is not terminal."""

    reward: float
    information: np.ndarray
    observation: np.ndarray
    continuation: bool
    truncated: bool = False
    success: bool | None = field(default=None, compare=False)

    @property
    def done(self) -> bool:
        return not self.continuation or self.truncated


class InformedEnv:
    """Base class: subclasses implement ``_reset`` and ``_step``.

    The base class owns the random generator, the time limit and the
    terminal-state bookkeeping, and validates actions.
    """

    descriptor: EnvDescriptor
    max_steps: int | None = None

    def __init__(self):
        self.rng = np.random.default_rng(0)
        self._done = True
        self.t = 0

    def reset(self, seed: int | None = None) -> tuple[np.ndarray, np.ndarray, bool]:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self._done = False
        self.t = 0
        info, obs = self._reset()
        return info, obs, True

    def step(self, action) -> InformedStep:
        if self._done:
            raise ContractError("step called on a terminal or unreset environment")
        action = self._check_action(action)
        out = self._step(action)
        self.t += 1
        if out.continuation and self.max_steps is not None and self.t >= self.max_steps:
            out.truncated = True
        self._done = out.done
        return out

    def _check_action(self, action):
        d = self.descriptor
        if d.discrete:
            a = int(action)
            if a != action or not 0 <= a < d.n_actions:
                raise ContractError(f"action {action!r} outside 0..{d.n_actions - 1}")
            return a
        a = np.asarray(action, dtype=np.float64)
        if a.shape != (d.action_dim,) or not np.isfinite(a).all():
            raise ContractError(f"action {action!r} not a finite vector of size {d.action_dim}")
        return np.clip(a, d.action_low, d.action_high)

    def _reset(self) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def _step(self, action) -> InformedStep:
        raise NotImplementedError


def one_hot(k: int, n: int) -> np.ndarray:
    v = np.zeros(n)
    v[k] = 1.0
    return v
