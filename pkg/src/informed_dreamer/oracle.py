"""Exact enumeration oracles on tabular informed POMDPs.

Histories are tuples ``(o0, a0, o1, a1, ..., ot)``.  Everything here is
plain numpy over immutable inputs.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from informed_dreamer.diffcore import DTYPE, ContractError
from informed_dreamer.envs.tabular import TabularInformedPomdp
from informed_dreamer.worldmodel import Batch, WorldModel

MAX_NODES = 1_000_000
MERGE_DECIMALS = 12
TIE_TOL = 1e-12


class ImpossibleEvidence(ValueError):
    pass


class TreeTooLarge(RuntimeError):
    pass


History = tuple[int, ...]
Policy = Callable[[History], np.ndarray]


def uniform_policy(pomdp: TabularInformedPomdp) -> Policy:
    probs = np.full(pomdp.n_actions, 1.0 / pomdp.n_actions)
    return lambda h: probs


def _check_tree(pomdp: TabularInformedPomdp, horizon: int, limit: int = MAX_NODES) -> int:
    branch = pomdp.n_actions * pomdp.n_obs
    nodes = pomdp.n_obs * sum(branch**d for d in range(horizon + 1))
    if nodes > limit:
        raise TreeTooLarge(f"history tree of depth {horizon} has {nodes} nodes (> {limit})")
    return nodes


def _argmax(q: np.ndarray) -> int:
    # lowest index among the maxima
    return int(np.flatnonzero(q >= q.max() - TIE_TOL)[0])


# ---------------------------------------------------------------------------
# beliefs


def initial_belief(pomdp: TabularInformedPomdp, o: int) -> np.ndarray:
    un = pomdp.init * pomdp.observation_matrix()[:, o]
    total = un.sum()
    if total <= 0.0:
        raise ImpossibleEvidence(f"observation {o} has zero probability at reset")
    return un / total


def belief_update(pomdp: TabularInformedPomdp, b: np.ndarray, a: int, o: int) -> np.ndarray:
    """Bayes filter through the execution-POMDP observation channel."""
    if not 0 <= a < pomdp.n_actions or not 0 <= o < pomdp.n_obs:
        raise ContractError(f"action {a} or observation {o} out of range")
    un = pomdp.observation_matrix()[:, o] * (b @ pomdp.trans[:, a, :])
    total = un.sum()
    if total <= 0.0:
        raise ImpossibleEvidence(f"observation {o} has zero probability after action {a}")
    return un / total


def belief_of_history(pomdp: TabularInformedPomdp, history: History) -> np.ndarray:
    b = initial_belief(pomdp, history[0])
    for k in range(1, len(history), 2):
        b = belief_update(pomdp, b, history[k], history[k + 1])
    return b


def belief_by_conditioning(pomdp: TabularInformedPomdp, history: History) -> np.ndarray:
    """p(s_t | h) by summing the joint over every state sequence (no recursion)."""
    obs = history[0::2]
    acts = history[1::2]
    S = pomdp.n_states
    out = np.zeros(S)
    for path in itertools.product(range(S), repeat=len(obs)):
        p = pomdp.init[path[0]]
        for t, s in enumerate(path):
            if t > 0:
                p *= pomdp.trans[path[t - 1], acts[t - 1], s]
            p *= sum(pomdp.info[s, i] * pomdp.obs[i, obs[t]] for i in range(pomdp.n_info))
        out[path[-1]] += p
    if out.sum() <= 0.0:
        raise ImpossibleEvidence(f"history {history} has zero probability")
    return out / out.sum()


# ---------------------------------------------------------------------------
# optimal values


@dataclass
class BruteForceResult:
    value: float
    policy: dict[History, int]
    nodes: int


def brute_force_value(pomdp: TabularInformedPomdp, horizon: int, limit: int = MAX_NODES) -> BruteForceResult:
    """Expectimax over the full history tree, on unnormalised forward messages.

    Maximises the expected discounted return of ``horizon`` actions over all
    history-dependent policies.
    """
    _check_tree(pomdp, horizon, limit)
    O = pomdp.observation_matrix()
    R, T, g = pomdp.reward, pomdp.trans, pomdp.gamma
    policy: dict[History, int] = {}
    count = 0

    def value(alpha: np.ndarray, h: History, remaining: int) -> float:
        nonlocal count
        count += 1
        if remaining == 0:
            return 0.0
        q = np.empty(pomdp.n_actions)
        for a in range(pomdp.n_actions):
            pred = alpha @ T[:, a, :]
            future = 0.0
            for o in range(pomdp.n_obs):
                nxt = O[:, o] * pred
                if nxt.sum() > 0.0:
                    future += value(nxt, h + (a, o), remaining - 1)
            q[a] = alpha @ R[:, a] + g * future
        best = _argmax(q / alpha.sum())
        policy[h] = best
        return float(q[best])

    total = 0.0
    for o in range(pomdp.n_obs):
        alpha = pomdp.init * O[:, o]
        if alpha.sum() > 0.0:
            total += value(alpha, (o,), horizon)
    return BruteForceResult(total, policy, count)


@dataclass
class BeliefExpectimaxResult:
    value: float
    nodes: int


def belief_expectimax(pomdp: TabularInformedPomdp, horizon: int, limit: int = MAX_NODES) -> BeliefExpectimaxResult:
    """Expectimax whose nodes are beliefs, merged when equal to 12 decimals."""
    _check_tree(pomdp, horizon, limit)
    O = pomdp.observation_matrix()
    R, T, g = pomdp.reward, pomdp.trans, pomdp.gamma
    memo: dict[tuple, float] = {}

    def value(b: np.ndarray, remaining: int) -> float:
        if remaining == 0:
            return 0.0
        key = (tuple(np.round(b, MERGE_DECIMALS)), remaining)
        if key in memo:
            return memo[key]
        q = np.empty(pomdp.n_actions)
        for a in range(pomdp.n_actions):
            pred = b @ T[:, a, :]
            future = 0.0
            for o in range(pomdp.n_obs):
                p_o = O[:, o] @ pred
                if p_o > 0.0:
                    future += p_o * value(belief_update(pomdp, b, a, o), remaining - 1)
            q[a] = b @ R[:, a] + g * future
        memo[key] = float(q[_argmax(q)])
        return memo[key]

    total = 0.0
    for o in range(pomdp.n_obs):
        p_o = pomdp.init @ O[:, o]
        if p_o > 0.0:
            total += p_o * value(initial_belief(pomdp, o), horizon)
    return BeliefExpectimaxResult(total, len(memo))


def history_policy_value(pomdp: TabularInformedPomdp, policy: dict[History, int], horizon: int) -> float:
    """Expected discounted return of a deterministic history policy.

    Enumerates states, information and observations explicitly, without
    beliefs or forward messages.
    """
    P, T, R, I, Ob, g = pomdp.init, pomdp.trans, pomdp.reward, pomdp.info, pomdp.obs, pomdp.gamma

    def emit(s):
        for i in range(pomdp.n_info):
            for o in range(pomdp.n_obs):
                p = I[s, i] * Ob[i, o]
                if p > 0.0:
                    yield o, p

    def rec(s: int, h: History, t: int) -> float:
        if t == horizon:
            return 0.0
        a = policy[h]
        ret = R[s, a]
        for s2 in range(pomdp.n_states):
            if T[s, a, s2] == 0.0:
                continue
            for o, p in emit(s2):
                ret += g * T[s, a, s2] * p * rec(s2, h + (a, o), t + 1)
        return ret

    return sum(P[s] * p * rec(s, (o,), 0) for s in range(pomdp.n_states) for o, p in emit(s) if P[s] > 0)


def memoryless_policy_value(
    pomdp: TabularInformedPomdp, action_probs: np.ndarray, horizon: int, gamma: float = 1.0
) -> float:
    """Expected return of a history-independent stochastic policy over ``horizon`` steps."""
    d = pomdp.init.copy()
    total = 0.0
    for t in range(horizon):
        total += gamma**t * d @ (pomdp.reward @ action_probs)
        d = np.einsum("s,a,sat->t", d, action_probs, pomdp.trans)
    return float(total)


# ---------------------------------------------------------------------------
# information-theoretic checks


@dataclass
class NodeMI:
    history: History
    action: int
    reach: float
    mi_info: float
    mi_obs: float


def mutual_information(joint: np.ndarray) -> float:
    """I(X; Y) in nats from a 2D joint table."""
    px = joint.sum(1, keepdims=True)
    py = joint.sum(0, keepdims=True)
    nz = joint > 0.0
    return float((joint[nz] * np.log(joint[nz] / (px @ py)[nz])).sum())


def enumerate_nodes(pomdp: TabularInformedPomdp, depth: int, policy: Policy | None = None, limit: int = MAX_NODES):
    """Yield ``(history, belief, reach, action, action_prob)`` for histories with < ``depth`` actions."""
    _check_tree(pomdp, depth, limit)
    policy = policy or uniform_policy(pomdp)
    O = pomdp.observation_matrix()

    def rec(h: History, b: np.ndarray, reach: float, t: int):
        pa = policy(h)
        for a in range(pomdp.n_actions):
            if pa[a] <= 0.0:
                raise ContractError(f"policy gives zero probability to action {a} at {h}")
            yield h, b, reach, a, pa[a]
        if t + 1 >= depth:
            return
        for a in range(pomdp.n_actions):
            pred = b @ pomdp.trans[:, a, :]
            for o in range(pomdp.n_obs):
                p_o = O[:, o] @ pred
                if p_o > 0.0:
                    yield from rec(h + (a, o), belief_update(pomdp, b, a, o), reach * pa[a] * p_o, t + 1)

    for o in range(pomdp.n_obs):
        p_o = pomdp.init @ O[:, o]
        if p_o > 0.0:
            yield from rec((o,), initial_belief(pomdp, o), p_o, 0)


def next_joint(pomdp: TabularInformedPomdp, b: np.ndarray, a: int) -> np.ndarray:
    """p(s', i', o' | h, a) as an (S, I, O) table."""
    pred = b @ pomdp.trans[:, a, :]
    return pred[:, None, None] * pomdp.info[:, :, None] * pomdp.obs[None, :, :]


def mi_comparison(pomdp: TabularInformedPomdp, policy: Policy | None = None, depth: int = 2) -> list[NodeMI]:
    """Exact I(s'; i' | h, a) and I(s'; o' | h, a) at every enumerated node."""
    out = []
    for h, b, reach, a, pa in enumerate_nodes(pomdp, depth, policy):
        joint = next_joint(pomdp, b, a)
        out.append(NodeMI(h, a, reach * pa, mutual_information(joint.sum(2)), mutual_information(joint.sum(1))))
    return out


def _reward_groups(pomdp: TabularInformedPomdp, a: int) -> list[np.ndarray]:
    """State masks grouped by identical reward value R(s, a)."""
    vals = pomdp.reward[:, a]
    return [vals == v for v in np.unique(vals)]


def predictive(pomdp: TabularInformedPomdp, b: np.ndarray, a: int) -> np.ndarray:
    """p(r, i' | h, a) as a (distinct rewards, I) table."""
    rows = []
    for grp in _reward_groups(pomdp, a):
        rows.append((b * grp) @ pomdp.trans[:, a, :] @ pomdp.info)
    return np.array(rows)


def markov_blanket_deviation(pomdp: TabularInformedPomdp, depth: int = 2, policy: Policy | None = None) -> float:
    """Largest |sum_i p(o'|i') p(r, i'|h, a) - p(r, o'|h, a)| over enumerated nodes.

    The right-hand side is marginalised from the full joint over (s, s', i', o').
    """
    worst = 0.0
    for h, b, reach, a, pa in enumerate_nodes(pomdp, depth, policy):
        full = np.einsum("s,st,ti,io->stio", b, pomdp.trans[:, a, :], pomdp.info, pomdp.obs)
        direct = np.array([full[grp].sum((0, 1, 2)) for grp in _reward_groups(pomdp, a)])
        composed = predictive(pomdp, b, a) @ pomdp.obs
        worst = max(worst, float(np.abs(direct - composed).max()))
    return worst


def _belief_key(h: History, b: np.ndarray):
    return tuple(np.round(b, MERGE_DECIMALS))


STATISTICS: dict[str, Callable[[History, np.ndarray], object]] = {
    "belief": _belief_key,
    "history": lambda h, b: h,
    "last_obs": lambda h, b: h[-1],
    "constant": lambda h, b: 0,
}


def predictive_gap(
    pomdp: TabularInformedPomdp, statistic: str = "belief", depth: int = 2, policy: Policy | None = None
) -> float:
    """E log p(r, i' | h, a) - E log p(r, i' | f(h), a) under the enumerated p(h, a).

    ``p(r, i' | f(h), a)`` pools the predictive distributions of all histories
    sharing a statistic value.  The gap is a non-negative KL, and zero for a
    predictive sufficient statistic.
    """
    f = STATISTICS[statistic]
    nodes = []
    for h, b, reach, a, pa in enumerate_nodes(pomdp, depth, policy):
        nodes.append((f(h, b), a, reach * pa, predictive(pomdp, b, a)))
    total_w = sum(w for _, _, w, _ in nodes)
    pooled: dict[tuple, np.ndarray] = {}
    mass: dict[tuple, float] = {}
    for key, a, w, p in nodes:
        k = (key, a)
        pooled[k] = pooled.get(k, 0.0) + w * p
        mass[k] = mass.get(k, 0.0) + w
    gap = 0.0
    for key, a, w, p in nodes:
        q = pooled[(key, a)] / mass[(key, a)]
        nz = p > 0.0
        gap += (w / total_w) * float((p[nz] * (np.log(p[nz]) - np.log(q[nz]))).sum())
    return gap


# ---------------------------------------------------------------------------
# exact likelihood of a discrete-latent world model

MAX_LATENT_CLASSES = 64
MAX_PATHS = 1_000_000


def _latent_codes(world: WorldModel) -> torch.Tensor:
    """Every joint latent value as a flattened one-hot, shape (C**G, G*C)."""
    c = world.config
    if c.latent != "categorical":
        raise ContractError("exact enumeration needs a categorical latent")
    n = c.classes**c.groups
    if n > MAX_LATENT_CLASSES:
        raise TreeTooLarge(f"{n} joint latent classes exceed the limit {MAX_LATENT_CLASSES}")
    codes = torch.zeros(n, c.groups, c.classes, dtype=DTYPE)
    for k, combo in enumerate(itertools.product(range(c.classes), repeat=c.groups)):
        codes[k, torch.arange(c.groups), torch.tensor(combo)] = 1.0
    return codes


def path_terms(world: WorldModel, batch: Batch):
    """Per window, per latent path: log p(targets, path) and log q(path | observations).

    Differentiable in the model parameters; the public estimators below run it
    without gradient tracking.
    """
    codes = _latent_codes(world)
    n_codes = codes.shape[0]
    N, W = batch.shape
    if n_codes**W > MAX_PATHS:
        raise TreeTooLarge(f"{n_codes}**{W} latent paths exceed the limit {MAX_PATHS}")
    paths = torch.tensor(list(itertools.product(range(n_codes), repeat=W)))
    P = paths.shape[0]

    # windows and paths share one flat batch axis of size N * P
    def tile(x):
        return x.unsqueeze(1).expand(N, P, *x.shape[1:]).reshape(N * P, *x.shape[1:])

    log_joint = torch.zeros(N * P, dtype=DTYPE)
    log_q = torch.zeros(N * P, dtype=DTYPE)
    z = world.initial(N * P)
    for j in range(W):
        a, o = tile(batch.action[:, j]), tile(batch.obs[:, j])
        m = tile(batch.mask[:, j])
        onehot = codes[paths[:, j]].repeat(N, 1, 1)
        e = onehot.flatten(-2)
        prior = world.prior(z, a)
        post = world.posterior(z, a, o)
        dec = world.decode_heads(z, e)
        ll = (
            dec.info_log_prob(tile(batch.info[:, j]))
            + dec.reward_log_prob(tile(batch.reward[:, j]))
            + dec.cont_log_prob(tile(batch.cont[:, j]))
        )
        lp = prior.log_prob(onehot)
        log_joint += lp + m * ll
        # padded slots draw their latent from the prior
        log_q += torch.where(m > 0, post.log_prob(onehot), lp)
        z = world.step(z, a, e) * m.unsqueeze(-1)
    log_joint, log_q = log_joint.view(N, P), log_q.view(N, P)
    return log_joint, log_q


def exact_log_likelihood(world: WorldModel, batch: Batch) -> float:
    """log p(rewards, information, continuations | actions), summed over windows
    and divided by the number of valid slots (the normalisation of the ELBO loss)."""
    with torch.no_grad():
        log_joint, _ = path_terms(world, batch)
    return float(torch.logsumexp(log_joint, 1).sum() / batch.mask.sum())


def exact_elbo(world: WorldModel, batch: Batch) -> float:
    """Expected ELBO under the encoder, by enumerating latent paths.

    Uses the path form ``E_q[log p(x, path) - log q(path)]``, with the same
    normalisation as :func:`exact_log_likelihood`.
    """
    with torch.no_grad():
        return float(elbo_from_terms(*path_terms(world, batch)) / batch.mask.sum())


def elbo_from_terms(log_joint, log_q):
    q = log_q.exp()
    return torch.where(q > 0, q * (log_joint - log_q), torch.zeros_like(q)).sum()
