"""Classic Tiger problem cast as a tabular informed POMDP.

Observations depend on the last action in the textbook version, so the state
carries a "just listened" flag: states are (tiger side, listened) and the
information is the one-hot state.
"""

from __future__ import annotations

import numpy as np

from informed_dreamer.envs.tabular import TabularEnv, TabularInformedPomdp

LISTEN, OPEN_LEFT, OPEN_RIGHT = 0, 1, 2
HEAR_LEFT, HEAR_RIGHT, NO_CUE = 0, 1, 2

LISTEN_REWARD = -0.1
CORRECT_REWARD = 1.0
WRONG_REWARD = -10.0
ACCURACY = 0.85
GAMMA = 0.95


def tiger_pomdp() -> TabularInformedPomdp:
    # state index: side + 2 * listened, side 0 = tiger left
    S, A = 4, 3
    init = np.array([0.5, 0.5, 0.0, 0.0])
    trans = np.zeros((S, A, S))
    reward = np.zeros((S, A))
    for s in range(S):
        side = s % 2
        trans[s, LISTEN, side + 2] = 1.0
        trans[s, OPEN_LEFT, :2] = 0.5
        trans[s, OPEN_RIGHT, :2] = 0.5
        reward[s, LISTEN] = LISTEN_REWARD
        reward[s, OPEN_LEFT] = WRONG_REWARD if side == 0 else CORRECT_REWARD
        reward[s, OPEN_RIGHT] = CORRECT_REWARD if side == 0 else WRONG_REWARD
    obs = np.zeros((S, 3))
    obs[0, NO_CUE] = obs[1, NO_CUE] = 1.0
    obs[2] = [ACCURACY, 1 - ACCURACY, 0.0]
    obs[3] = [1 - ACCURACY, ACCURACY, 0.0]
    return TabularInformedPomdp(init, trans, reward, np.eye(S), obs, GAMMA)


def tiger(max_steps: int | None = 20) -> TabularEnv:
    return TabularEnv(tiger_pomdp(), max_steps=max_steps)
