"""Variational recurrent world model trained to reconstruct information.

Per slot ``j`` of a window the model sees the previous action ``a[j]`` and
the observation ``o[j]``, and is trained to predict the previous reward
``r[j]``, the information ``i[j]`` and the continuation flag ``c[j]``::

    e[j] ~ encoder(z[j-1], a[j], o[j])        posterior latent
    e^   ~ prior(z[j-1], a[j])                prior latent
    z[j] = recur(z[j-1], a[j], e[j])          recurrent statistic
    r[j], i[j], c[j] ~ decoders(z[j-1], e[j])

with ``z[-1] = 0``.  The observation is never reconstructed.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from informed_dreamer.diffcore import (
    DTYPE,
    CategoricalLatent,
    ContractError,
    DiagGaussian,
    GatedRecurrentCell,
    Value,
    kl_divergence,
    mlp,
    reparam_sample,
    symexp,
    symlog,
)

LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


@dataclass
class ModelConfig:
    z_dim: int = 128
    hidden: int = 128
    layers: int = 1
    latent: str = "categorical"  # or "gaussian"
    groups: int = 8
    classes: int = 8
    gauss_dim: int = 16
    unimix: float = 0.01
    kl_balance: float = 0.8
    free_bits: float = 1.0
    info_weight: float = 1.0
    reward_weight: float = 1.0
    cont_weight: float = 1.0
    kl_weight: float = 1.0

    def __post_init__(self):
        if self.latent not in ("categorical", "gaussian"):
            raise ContractError(f"unknown latent family {self.latent!r}")
        if not 0.0 <= self.kl_balance <= 1.0 or self.free_bits < 0.0:
            raise ContractError("kl_balance must lie in [0, 1] and free_bits must be >= 0")

    @property
    def e_dim(self) -> int:
        return self.groups * self.classes if self.latent == "categorical" else self.gauss_dim

    @property
    def latent_params(self) -> int:
        return self.groups * self.classes if self.latent == "categorical" else 2 * self.gauss_dim


@dataclass
class Batch:
    """Windows of ``(a[j], r[j], i[j], o[j], c[j])`` with a validity mask.

    ``action`` is (N, W, A); ``reward``, ``cont`` and ``mask`` are (N, W);
    ``info`` and ``obs`` are (N, W, dim).
    """

    action: Value
    reward: Value
    info: Value
    obs: Value
    cont: Value
    mask: Value

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.reward.shape)

    def uninformed(self) -> "Batch":
        """Bind the information channel to the observation."""
        return Batch(self.action, self.reward, self.obs, self.obs, self.cont, self.mask)

    def permute(self, order) -> "Batch":
        return Batch(**{k: v[order] for k, v in asdict_shallow(self).items()})


def asdict_shallow(b: Batch) -> dict:
    return {k: getattr(b, k) for k in ("action", "reward", "info", "obs", "cont", "mask")}


@dataclass
class Encoded:
    z_prev: Value  # (N, W, Z): statistic before slot j, i.e. z[j-1]
    e: Value  # (N, W, E): posterior latent sample for slot j
    z: Value  # (N, W, Z): statistic after slot j
    post: object  # latent distribution with leading (N, W)
    prior: object


@dataclass
class Decoded:
    reward_loc: Value  # symlog space
    info_loc: Value  # symlog space
    cont_logit: Value

    @property
    def reward_mean(self) -> Value:
        return symexp(self.reward_loc)

    @property
    def info_mean(self) -> Value:
        return symexp(self.info_loc)

    @property
    def cont_prob(self) -> Value:
        return torch.sigmoid(self.cont_logit)

    def reward_log_prob(self, r: Value) -> Value:
        return -0.5 * (symlog(r) - self.reward_loc) ** 2 - LOG_SQRT_2PI

    def info_log_prob(self, i: Value) -> Value:
        return (-0.5 * (symlog(i) - self.info_loc) ** 2 - LOG_SQRT_2PI).sum(-1)

    def cont_log_prob(self, c: Value) -> Value:
        return -F.binary_cross_entropy_with_logits(self.cont_logit, c, reduction="none")


@dataclass
class LossBreakdown:
    info_ll: Value
    reward_ll: Value
    cont_ll: Value
    kl: Value  # raw KL(posterior || prior), before balancing and free bits
    kl_reg: Value
    total: Value

    def floats(self) -> dict[str, float]:
        return {k: float(v.detach()) for k, v in self.__dict__.items()}


class WorldModel(nn.Module):
    def __init__(self, obs_dim: int, info_dim: int, action_dim: int, config: ModelConfig):
        super().__init__()
        c = config
        self.config = c
        self.obs_dim, self.info_dim, self.action_dim = obs_dim, info_dim, action_dim
        zea = c.z_dim + c.e_dim
        self.encoder = mlp(c.z_dim + action_dim + obs_dim, c.latent_params, c.hidden, c.layers)
        self.prior_net = mlp(c.z_dim + action_dim, c.latent_params, c.hidden, c.layers)
        self.recur = GatedRecurrentCell(action_dim + c.e_dim, c.z_dim, c.hidden)
        self.info_head = mlp(zea, info_dim, c.hidden, c.layers)
        self.reward_head = mlp(zea, 1, c.hidden, c.layers)
        self.cont_head = mlp(zea, 1, c.hidden, c.layers)

    # -- components -------------------------------------------------------

    def latent(self, params: Value):
        c = self.config
        if c.latent == "gaussian":
            return DiagGaussian.from_raw(params)
        return CategoricalLatent.from_raw(params, c.groups, c.classes, c.unimix)

    def posterior(self, z: Value, a: Value, o: Value):
        return self.latent(self.encoder(torch.cat([z, a, symlog(o)], -1)))

    def prior(self, z: Value, a: Value):
        return self.latent(self.prior_net(torch.cat([z, a], -1)))

    def flatten(self, sample: Value) -> Value:
        if self.config.latent == "categorical":
            return sample.flatten(-2)
        return sample

    def sample(self, dist, noise: Value) -> Value:
        return self.flatten(reparam_sample(dist, noise))

    def step(self, z: Value, a: Value, e: Value) -> Value:
        return self.recur(z, torch.cat([a, e], -1))

    def initial(self, n: int) -> Value:
        return torch.zeros(n, self.config.z_dim, dtype=DTYPE)

    def noise_shape(self, *lead: int) -> tuple[int, ...]:
        c = self.config
        return (*lead, c.groups) if c.latent == "categorical" else (*lead, c.gauss_dim)

    def draw(self, gen: torch.Generator | None, *lead: int) -> Value:
        shape = self.noise_shape(*lead)
        if self.config.latent == "categorical":
            return torch.rand(shape, generator=gen, dtype=DTYPE)
        return torch.randn(shape, generator=gen, dtype=DTYPE)

    # -- operations -------------------------------------------------------

    def decode_heads(self, z: Value, e: Value) -> Decoded:
        if z.shape[-1] != self.config.z_dim or e.shape[-1] != self.config.e_dim:
            raise ContractError(
                f"expected z/e dims {self.config.z_dim}/{self.config.e_dim}, "
                f"got {z.shape[-1]}/{e.shape[-1]}"
            )
        ze = torch.cat([z, e], -1)
        return Decoded(
            self.reward_head(ze).squeeze(-1), self.info_head(ze), self.cont_head(ze).squeeze(-1)
        )

    def encode_sequence(self, action: Value, obs: Value, noise, mask: Value | None = None) -> Encoded:
        """Run the posterior recursion over (N, W) windows starting from z = 0.

        ``noise`` is either a tensor of shape ``noise_shape(N, W)`` or a
        ``torch.Generator``.  Where ``mask`` is 0 the statistic is reset to 0,
        so left-padded windows start exactly like an episode.
        """
        N, W = action.shape[:2]
        if action.shape[-1] != self.action_dim or obs.shape[-1] != self.obs_dim:
            raise ContractError(
                f"action/obs dims {action.shape[-1]}/{obs.shape[-1]} do not match "
                f"model {self.action_dim}/{self.obs_dim}"
            )
        if W < 1:
            raise ContractError("window length must be at least 1")
        if not isinstance(noise, torch.Tensor):
            noise = self.draw(noise, N, W)
        z = self.initial(N)
        zs_prev, es, zs, posts, priors = [], [], [], [], []
        for j in range(W):
            a, o = action[:, j], obs[:, j]
            post = self.posterior(z, a, o)
            e = self.sample(post, noise[:, j])
            z_next = self.step(z, a, e)
            if mask is not None:
                z_next = z_next * mask[:, j : j + 1]
            zs_prev.append(z)
            es.append(e)
            zs.append(z_next)
            posts.append(post)
            priors.append(self.prior(z, a))
            z = z_next
        return Encoded(
            torch.stack(zs_prev, 1),
            torch.stack(es, 1),
            torch.stack(zs, 1),
            _stack_dists(posts),
            _stack_dists(priors),
        )

    def elbo_loss(self, batch: Batch, noise, encoded: Encoded | None = None) -> LossBreakdown:
        """Negative informed ELBO averaged over valid slots."""
        c = self.config
        enc = encoded or self.encode_sequence(batch.action, batch.obs, noise, batch.mask)
        dec = self.decode_heads(enc.z_prev, enc.e)
        mask = batch.mask
        denom = mask.sum().clamp(min=1.0)

        def avg(x):
            return (x * mask).sum() / denom

        info_ll = avg(dec.info_log_prob(batch.info))
        reward_ll = avg(dec.reward_log_prob(batch.reward))
        cont_ll = avg(dec.cont_log_prob(batch.cont))
        kl = avg(kl_divergence(enc.post, enc.prior))
        kl_reg = avg(kl_regularizer(enc.post, enc.prior, c.kl_balance, c.free_bits))
        total = (
            -(c.info_weight * info_ll + c.reward_weight * reward_ll + c.cont_weight * cont_ll)
            + c.kl_weight * kl_reg
        )
        out = LossBreakdown(info_ll, reward_ll, cont_ll, kl, kl_reg, total)
        for name, v in out.__dict__.items():
            if not torch.isfinite(v):
                raise FloatingPointError(f"non-finite world-model loss component {name!r}")
        return out


def kl_regularizer(post, prior, balance: float, free_bits: float) -> Value:
    """Balanced KL with free bits, per element.

    ``balance`` weighs KL(sg(post) || prior), which trains the prior; the rest
    weighs KL(post || sg(prior)), which trains the encoder.  Each term is
    floored at ``free_bits`` nats, so below the floor it passes no gradient.
    """
    if not 0.0 <= balance <= 1.0 or free_bits < 0.0:
        raise ContractError("balance must lie in [0, 1] and free_bits must be >= 0")
    dyn = kl_divergence(post.detach(), prior).clamp(min=free_bits)
    rep = kl_divergence(post, prior.detach()).clamp(min=free_bits)
    return balance * dyn + (1.0 - balance) * rep


def _stack_dists(dists: list):
    if isinstance(dists[0], DiagGaussian):
        return DiagGaussian(torch.stack([d.mean for d in dists], 1), torch.stack([d.stddev for d in dists], 1))
    return CategoricalLatent(torch.stack([d.logits for d in dists], 1))


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)
