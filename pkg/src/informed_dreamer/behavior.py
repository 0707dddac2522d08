"""Latent actor-critic trained on imagined trajectories."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from informed_dreamer.diffcore import (
    DTYPE,
    ContractError,
    Optimizer,
    Value,
    categorical_onehot,
    mlp,
    symexp,
    symlog,
)
from informed_dreamer.envs.base import EnvDescriptor
from informed_dreamer.worldmodel import WorldModel


class DiscreteActionDist:
    def __init__(self, logits: Value):
        self.logits = logits

    @property
    def probs(self) -> Value:
        return torch.softmax(self.logits, -1)

    def noise_shape(self) -> tuple[int, ...]:
        return tuple(self.logits.shape[:-1])

    def sample(self, noise: Value) -> Value:
        return categorical_onehot(self.probs, noise)

    def log_prob(self, onehot: Value) -> Value:
        return (onehot * torch.log_softmax(self.logits, -1)).sum(-1)

    def entropy(self) -> Value:
        logp = torch.log_softmax(self.logits, -1)
        return -(logp.exp() * logp).sum(-1)

    def mode(self) -> Value:
        return F.one_hot(self.logits.argmax(-1), self.logits.shape[-1]).to(DTYPE)


class SquashedGaussianDist:
    """tanh-squashed Gaussian rescaled to the box ``[low, high]``."""

    def __init__(self, mean: Value, std: Value, low: Value, high: Value):
        self.mean, self.std, self.low, self.high = mean, std, low, high

    def noise_shape(self) -> tuple[int, ...]:
        return tuple(self.mean.shape)

    def _squash(self, u: Value) -> Value:
        return self.low + (torch.tanh(u) + 1.0) * 0.5 * (self.high - self.low)

    def sample(self, noise: Value) -> Value:
        return self._squash(self.mean + self.std * noise)

    def entropy(self) -> Value:
        # entropy of the pre-squash Gaussian
        return (torch.log(self.std) + 0.5 * math.log(2 * math.pi * math.e)).sum(-1)

    def mode(self) -> Value:
        return self._squash(self.mean)


class Actor(nn.Module):
    """Latent policy over the statistic ``z``."""

    def __init__(self, z_dim: int, desc: EnvDescriptor, hidden: int, layers: int = 1, unimix: float = 0.01):
        super().__init__()
        self.discrete = desc.discrete
        self.unimix = unimix
        self.action_dim = desc.action_dim
        out = desc.action_dim if self.discrete else 2 * desc.action_dim
        self.net = mlp(z_dim, out, hidden, layers)
        if not self.discrete:
            self.register_buffer("low", torch.tensor(desc.action_low, dtype=DTYPE))
            self.register_buffer("high", torch.tensor(desc.action_high, dtype=DTYPE))

    def forward(self, z: Value):
        out = self.net(z)
        if self.discrete:
            if self.unimix > 0:
                # a uniform floor keeps every action reachable
                probs = (1 - self.unimix) * torch.softmax(out, -1) + self.unimix / self.action_dim
                out = torch.log(probs)
            return DiscreteActionDist(out)
        mean, raw = out.chunk(2, -1)
        return SquashedGaussianDist(mean, F.softplus(raw) + 0.05, self.low, self.high)

    def draw(self, gen: torch.Generator | None, n: int) -> Value:
        if self.discrete:
            return torch.rand((n,), generator=gen, dtype=DTYPE)
        return torch.randn((n, self.action_dim), generator=gen, dtype=DTYPE)


class Critic(nn.Module):
    """Scalar value head; the network output lives in symlog space."""

    def __init__(self, z_dim: int, hidden: int, layers: int = 1):
        super().__init__()
        self.net = mlp(z_dim, 1, hidden, layers)

    def forward(self, z: Value) -> Value:
        return self.net(z).squeeze(-1)

    def value(self, z: Value) -> Value:
        return symexp(self(z))


@dataclass
class ImaginedTrajectory:
    """Tensors with leading (K, B)."""

    z: Value
    e: Value
    action: Value
    reward: Value
    cont: Value
    value: Value | None = None


def imagine(
    world: WorldModel,
    actor: Actor,
    z0: Value,
    e0: Value,
    a0: Value,
    horizon: int,
    gen: torch.Generator | None = None,
    noise: tuple[Value, Value] | None = None,
    critic: Critic | None = None,
) -> ImaginedTrajectory:
    """Roll the prior forward from encoded starts ``(z, e, a)``.

    Only the recurrence, prior, decoders and policy are used.  ``noise`` may
    give ``(action_noise, latent_noise)`` with leading dimension ``horizon``.
    """
    if horizon < 1:
        raise ContractError(f"imagination horizon must be >= 1, got {horizon}")
    B = z0.shape[0]
    if noise is None:
        noise = (
            torch.stack([actor.draw(gen, B) for _ in range(horizon)]),
            world.draw(gen, horizon, B),
        )
    a_noise, e_noise = noise
    z, e, a = z0, e0, a0
    zs, es, acts = [], [], []
    for k in range(horizon):
        z = world.step(z, a, e)
        a = actor(z.detach() if actor.discrete else z).sample(a_noise[k])
        e = world.sample(world.prior(z, a), e_noise[k])
        zs.append(z)
        es.append(e)
        acts.append(a)
    z, e, act = torch.stack(zs), torch.stack(es), torch.stack(acts)
    dec = world.decode_heads(z, e)
    traj = ImaginedTrajectory(z, e, act, dec.reward_mean, dec.cont_prob)
    if critic is not None:
        traj.value = critic.value(z)
    return traj


def lambda_returns(rewards, conts, values, gamma: float, lam: float):
    """Backward recursion ``G[k] = r[k] + gamma c[k] ((1-lam) v[k+1] + lam G[k+1])``.

    ``G[K-1] = v[K-1]``.  Rewards and continuations may have length K or K-1;
    an entry at K-1 is unused.  Works on numpy arrays and torch tensors with
    time as the leading axis.
    """
    K = len(values)
    if len(rewards) != len(conts) or len(rewards) not in (K, K - 1):
        raise ContractError(
            f"length mismatch: rewards {len(rewards)}, conts {len(conts)}, values {K}"
        )
    out = [None] * K
    out[K - 1] = values[K - 1]
    for k in range(K - 2, -1, -1):
        out[k] = rewards[k] + gamma * conts[k] * ((1 - lam) * values[k + 1] + lam * out[k + 1])
    if isinstance(values, torch.Tensor):
        return torch.stack(out)
    return np.stack(out)


class ReturnNormalizer:
    """EMA of the 5th-95th percentile range of the returns."""

    def __init__(self, decay: float = 0.99):
        self.decay = decay
        self.low: float | None = None
        self.high: float | None = None

    def update(self, returns: Value) -> float:
        flat = returns.detach().flatten()
        lo = float(torch.quantile(flat, 0.05))
        hi = float(torch.quantile(flat, 0.95))
        if self.low is None:
            self.low, self.high = lo, hi
        else:
            d = self.decay
            self.low = d * self.low + (1 - d) * lo
            self.high = d * self.high + (1 - d) * hi
        return self.scale

    @property
    def scale(self) -> float:
        if self.low is None:
            return 1.0
        return max(1.0, self.high - self.low)


def trajectory_weights(traj: ImaginedTrajectory, start_mask: Value | None = None) -> Value:
    """Per-step weights: the start mask times the probability of not having terminated earlier."""
    alive = torch.cumprod(
        torch.cat([torch.ones_like(traj.cont[:1]), traj.cont[:-1]]), 0
    ).detach()
    if start_mask is not None:
        alive = alive * start_mask.unsqueeze(0)
    return alive


def policy_update(
    actor: Actor,
    opt: Optimizer,
    traj: ImaginedTrajectory,
    targets: Value,
    entropy_weight: float,
    scale: float = 1.0,
    weights: Value | None = None,
) -> dict[str, float]:
    """One actor step; only ``actor`` parameters are touched.

    Discrete actions use REINFORCE with the critic baseline on detached
    targets.  Continuous actions ascend the targets pathwise, so ``targets``
    must still be attached to the actor through the imagined actions.
    """
    w = torch.ones_like(traj.reward) if weights is None else weights
    dist = actor(traj.z.detach() if actor.discrete else traj.z)
    entropy = dist.entropy()
    if actor.discrete:
        if traj.value is None:
            raise ContractError("discrete policy update needs critic values in the trajectory")
        adv = ((targets - traj.value) / scale).detach()
        objective = dist.log_prob(traj.action.detach()) * adv + entropy_weight * entropy
    else:
        objective = targets / scale + entropy_weight * entropy
    loss = -(w * objective).sum() / w.sum().clamp(min=1e-8)
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite policy objective")
    params = list(actor.parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    opt.zero_grad()
    for p, g in zip(params, grads):
        p.grad = torch.zeros_like(p) if g is None else g
    opt.step()
    return {"actor_loss": float(loss.detach()), "entropy": float((w * entropy).detach().sum() / w.sum().clamp(min=1e-8))}


def critic_loss(critic: Critic, z: Value, targets: Value, weights: Value | None = None) -> Value:
    pred = critic(z.detach())
    err = (pred - symlog(targets.detach())) ** 2
    if weights is None:
        return err.mean()
    return (weights * err).sum() / weights.sum().clamp(min=1e-8)


def critic_update(
    critic: Critic, opt: Optimizer, z: Value, targets: Value, weights: Value | None = None
) -> float:
    """Squared error in symlog space against stop-gradient targets."""
    loss = critic_loss(critic, z, targets, weights)
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite critic loss")
    opt.minimize(loss)
    return float(loss.detach())
