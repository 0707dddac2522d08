"""Finite informed POMDPs with the s -> i -> o factorization built in."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from informed_dreamer.diffcore import ContractError
from informed_dreamer.envs.base import EnvDescriptor, InformedEnv, InformedStep, one_hot

ROW_TOL = 1e-12


@dataclass
class TabularInformedPomdp:
    """Tables of a finite informed POMDP.

    ``init[s]``, ``trans[s, a, s']``, ``reward[s, a]``, ``info[s, i]`` and
    ``obs[i, o]``.  Observations are drawn from the information only, so the
    factorization p(o | s, i) = obs[i, o] holds structurally.
    """

    init: np.ndarray
    trans: np.ndarray
    reward: np.ndarray
    info: np.ndarray
    obs: np.ndarray
    gamma: float

    def __post_init__(self):
        for name in ("init", "trans", "reward", "info", "obs"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        S, A = self.reward.shape
        checks = {
            "init": (self.init, (S,)),
            "trans": (self.trans, (S, A, S)),
            "info": (self.info, (S, self.info.shape[1])),
            "obs": (self.obs, (self.info.shape[1], self.obs.shape[1])),
        }
        for name, (arr, shape) in checks.items():
            if arr.shape != shape:
                raise ContractError(f"{name} has shape {arr.shape}, expected {shape}")
            if (arr < 0).any() or np.abs(arr.sum(-1) - 1.0).max() > ROW_TOL:
                raise ContractError(f"{name} rows are not probability vectors")
        if not 0.0 <= self.gamma < 1.0:
            raise ContractError(f"gamma must lie in [0, 1), got {self.gamma}")

    @property
    def n_states(self) -> int:
        return self.reward.shape[0]

    @property
    def n_actions(self) -> int:
        return self.reward.shape[1]

    @property
    def n_info(self) -> int:
        return self.info.shape[1]

    @property
    def n_obs(self) -> int:
        return self.obs.shape[1]

    def observation_matrix(self) -> np.ndarray:
        """Execution-POMDP channel O(o | s) = sum_i obs[i, o] info[s, i]."""
        return self.info @ self.obs

    def to_json(self) -> str:
        return json.dumps(
            {
                "sizes": {
                    "states": self.n_states,
                    "actions": self.n_actions,
                    "info": self.n_info,
                    "obs": self.n_obs,
                },
                "gamma": self.gamma,
                "init": self.init.tolist(),
                "trans": self.trans.reshape(self.n_states * self.n_actions, -1).tolist(),
                "reward": self.reward.tolist(),
                "info": self.info.tolist(),
                "obs": self.obs.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "TabularInformedPomdp":
        d = json.loads(text)
        S, A = d["sizes"]["states"], d["sizes"]["actions"]
        return cls(
            init=d["init"],
            trans=np.asarray(d["trans"]).reshape(S, A, S),
            reward=d["reward"],
            info=d["info"],
            obs=d["obs"],
            gamma=d["gamma"],
        )


def _dirichlet_rows(rng: np.random.Generator, shape: tuple[int, ...], n: int) -> np.ndarray:
    rows = rng.dirichlet(np.ones(n), size=shape)
    return rows / rows.sum(-1, keepdims=True)


def generate_tabular(
    n_states: int,
    n_actions: int,
    n_info: int,
    n_obs: int,
    seed: int,
    identity_info: bool = False,
    identity_obs: bool = False,
    gamma: float = 0.9,
) -> TabularInformedPomdp:
    """Random instance with Dirichlet(1) rows and uniform[-1, 1] rewards.

    ``identity_info`` makes i = s (so ``n_info`` is ignored); ``identity_obs``
    makes o = i (so ``n_obs`` is ignored).
    """
    if min(n_states, n_actions, n_info, n_obs) < 1:
        raise ContractError("all sizes must be at least 1")
    rng = np.random.default_rng(seed)
    init = _dirichlet_rows(rng, (), n_states)
    trans = _dirichlet_rows(rng, (n_states, n_actions), n_states)
    reward = rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    if identity_info:
        n_info = n_states
        info = np.eye(n_states)
    else:
        info = _dirichlet_rows(rng, (n_states,), n_info)
    obs = np.eye(n_info) if identity_obs else _dirichlet_rows(rng, (n_info,), n_obs)
    return TabularInformedPomdp(init, trans, reward, info, obs, gamma)


class TabularEnv(InformedEnv):
    """Simulator over a :class:`TabularInformedPomdp`; symbols are one-hot encoded."""

    def __init__(self, pomdp: TabularInformedPomdp, max_steps: int | None = None):
        super().__init__()
        self.pomdp = pomdp
        self.max_steps = max_steps
        self.descriptor = EnvDescriptor(
            obs_dim=pomdp.n_obs, info_dim=pomdp.n_info, gamma=pomdp.gamma, n_actions=pomdp.n_actions
        )
        self.state = 0

    def _emit(self) -> tuple[np.ndarray, np.ndarray]:
        p = self.pomdp
        i = self.rng.choice(p.n_info, p=p.info[self.state])
        o = self.rng.choice(p.n_obs, p=p.obs[i])
        return one_hot(i, p.n_info), one_hot(o, p.n_obs)

    def _reset(self):
        self.state = self.rng.choice(self.pomdp.n_states, p=self.pomdp.init)
        return self._emit()

    def _step(self, action: int) -> InformedStep:
        p = self.pomdp
        r = float(p.reward[self.state, action])
        self.state = self.rng.choice(p.n_states, p=p.trans[self.state, action])
        info, obs = self._emit()
        return InformedStep(r, info, obs, True)
