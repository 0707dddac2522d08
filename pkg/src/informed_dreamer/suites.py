"""Randomised oracle suites behind ``informed-dreamer oracle``.

Each suite draws ``count`` random instances from ``seed`` and returns a JSON
friendly report; ``violations`` counts instances breaking the checked identity.
"""

from __future__ import annotations

import numpy as np
import torch

from informed_dreamer import oracle
from informed_dreamer.diffcore import DTYPE, ContractError
from informed_dreamer.envs import TabularEnv, generate_tabular
from informed_dreamer.replay import ReplayBuffer, make_window
from informed_dreamer.worldmodel import Batch, ModelConfig, WorldModel

DPI_TOL = 1e-12
SUFFICIENCY_TOL = 1e-9
BLANKET_TOL = 1e-12
ELBO_TOL = 1e-9


def random_pomdp(rng: np.random.Generator, max_size: int = 4, **kw):
    S, A, I, O = (int(v) for v in rng.integers(1, max_size + 1, size=4))
    return generate_tabular(max(S, 2), max(A, 2), I, O, int(rng.integers(1 << 31)), **kw)


def _sizes(p) -> dict:
    return dict(S=p.n_states, A=p.n_actions, I=p.n_info, O=p.n_obs)


def mi_suite(count: int, seed: int = 0, depth: int = 2, identity_every: int = 5) -> dict:
    """I(s'; i' | h, a) >= I(s'; o' | h, a) on every node, with equality when o = i.

    Every ``identity_every``-th instance binds the observation to the
    information so the equality case is exercised as well.
    """
    rng = np.random.default_rng(seed)
    rows, violations = [], 0
    for k in range(count):
        identity = identity_every > 0 and k % identity_every == identity_every - 1
        p = random_pomdp(rng, identity_obs=identity)
        nodes = oracle.mi_comparison(p, depth=depth)
        worst = max(n.mi_obs - n.mi_info for n in nodes)
        unequal = max(abs(n.mi_obs - n.mi_info) for n in nodes) if identity else 0.0
        bad = bool(worst > DPI_TOL or unequal != 0.0)
        violations += bad
        rows.append(dict(_sizes(p), identity_obs=identity, nodes=len(nodes), worst_excess=worst,
                         identity_mismatch=unequal, ok=not bad))
    return dict(suite="mi", count=count, seed=seed, tolerance=DPI_TOL, violations=violations, instances=rows)


def sufficiency_suite(count: int, seed: int = 0, horizon: int = 3) -> dict:
    """History expectimax and belief expectimax agree on the optimal value."""
    rng = np.random.default_rng(seed)
    rows, violations = [], 0
    for _ in range(count):
        p = random_pomdp(rng)
        hist = oracle.brute_force_value(p, horizon)
        belief = oracle.belief_expectimax(p, horizon)
        diff = float(abs(hist.value - belief.value))
        violations += int(diff > SUFFICIENCY_TOL)
        rows.append(dict(_sizes(p), history_value=float(hist.value), belief_value=float(belief.value), diff=diff,
                         history_nodes=hist.nodes, belief_nodes=belief.nodes, ok=bool(diff <= SUFFICIENCY_TOL)))
    return dict(suite="sufficiency", count=count, seed=seed, horizon=horizon, tolerance=SUFFICIENCY_TOL,
                violations=violations, instances=rows)


def markov_blanket_suite(count: int, seed: int = 0, depth: int = 2) -> dict:
    """sum_i' p(o'|i') p(r, i'|h, a) equals p(r, o'|h, a) on every node."""
    rng = np.random.default_rng(seed)
    rows, violations = [], 0
    for _ in range(count):
        p = random_pomdp(rng)
        dev = oracle.markov_blanket_deviation(p, depth=depth)
        violations += int(dev > BLANKET_TOL)
        rows.append(dict(_sizes(p), deviation=dev, ok=bool(dev <= BLANKET_TOL)))
    return dict(suite="markov-blanket", count=count, seed=seed, tolerance=BLANKET_TOL,
                violations=violations, instances=rows)


def tabular_batch(seed: int, n: int = 4, window: int = 3, size: int = 3) -> tuple[Batch, int, int, int]:
    """Windows of a random tabular env under a uniform random policy."""
    rng = np.random.default_rng(seed)
    env = TabularEnv(generate_tabular(size, 2, size, size, seed), max_steps=2 * window)
    d = env.descriptor
    buf = ReplayBuffer(64, window)
    info, obs, _ = env.reset(seed=int(rng.integers(1 << 31)))
    slots = [dict(action=np.zeros(d.action_dim), reward=0.0, info=info, obs=obs, cont=1.0)]
    while len(buf) < 4 * n:
        a = int(rng.integers(d.n_actions))
        st = env.step(a)
        slots.append(dict(action=np.eye(d.action_dim)[a], reward=st.reward, info=st.information,
                          obs=st.observation, cont=float(st.continuation)))
        buf.add(make_window(slots, window, d.action_dim))
        if st.done:
            info, obs, _ = env.reset(seed=int(rng.integers(1 << 31)))
            slots = [dict(action=np.zeros(d.action_dim), reward=0.0, info=info, obs=obs, cont=1.0)]
        elif len(slots) > window:
            del slots[0]
    return buf.sample(n, rng), d.obs_dim, d.info_dim, d.action_dim


def elbo_suite(count: int, seed: int = 0) -> dict:
    """Exact expected ELBO never exceeds the exact log-likelihood.

    Random tiny categorical world models on random tabular windows; both
    sides are computed by enumerating latent paths.
    """
    rng = np.random.default_rng(seed)
    rows, violations = [], 0
    for _ in range(count):
        s = int(rng.integers(1 << 31))
        batch, od, idim, ad = tabular_batch(s)
        groups, classes = int(rng.integers(1, 3)), int(rng.integers(2, 4))
        torch.manual_seed(s)
        cfg = ModelConfig(z_dim=4, hidden=8, groups=groups, classes=classes, free_bits=0.0)
        world = WorldModel(od, idim, ad, cfg).to(DTYPE)
        ll = oracle.exact_log_likelihood(world, batch)
        elbo = oracle.exact_elbo(world, batch)
        bad = bool(elbo > ll + ELBO_TOL)
        violations += bad
        rows.append(dict(groups=groups, classes=classes, log_likelihood=ll, elbo=elbo, gap=ll - elbo, ok=not bad))
    return dict(suite="elbo", count=count, seed=seed, tolerance=ELBO_TOL, violations=violations, instances=rows)


SUITES = {
    "mi": mi_suite,
    "sufficiency": sufficiency_suite,
    "elbo": elbo_suite,
    "markov-blanket": markov_blanket_suite,
}


def run_suite(name: str, count: int, seed: int = 0) -> dict:
    if name not in SUITES:
        raise ContractError(f"unknown oracle suite {name!r}; choose from {sorted(SUITES)}")
    return SUITES[name](count, seed)
