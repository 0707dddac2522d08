"""Differentiable numerics shared by the world model and the behaviour learner.

Tensors are plain float64 ``torch.Tensor`` objects; torch autograd records the
computation (define-by-run) and :func:`backward` drives the reverse pass.  On
top of that this module provides the latent distributions, their closed-form
KL divergences, symlog squashing, reparameterised sampling with externally
supplied noise, an adaptive-moment optimizer with global-norm clipping, and
the ``IWM-CKPT-1`` parameter file format.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

DTYPE = torch.float64
STD_FLOOR = 1e-4
CKPT_HEADER = b"IWM-CKPT-1\n"

Value = torch.Tensor


class ContractError(ValueError):
    """Raised when an operation is called outside its contract."""


def as_value(x, requires_grad: bool = False) -> Value:
    t = torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)
    return t.requires_grad_(requires_grad)


def backward(root: Value) -> None:
    """Populate ``.grad`` of every leaf reachable from the scalar ``root``."""
    if root.numel() != 1:
        raise ContractError(f"backward needs a scalar root, got shape {tuple(root.shape)}")
    if root.requires_grad:
        root.backward()


# ---------------------------------------------------------------------------
# scalar transforms


def symlog(x):
    if isinstance(x, torch.Tensor):
        return torch.sign(x) * torch.log1p(torch.abs(x))
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.log1p(np.abs(x))


def symexp(x):
    if isinstance(x, torch.Tensor):
        return torch.sign(x) * torch.expm1(torch.abs(x))
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.expm1(np.abs(x))


def softplus_std(raw: Value) -> Value:
    return F.softplus(raw) + STD_FLOOR


# ---------------------------------------------------------------------------
# distributions


@dataclass
class DiagGaussian:
    mean: Value
    stddev: Value

    def __post_init__(self):
        if self.mean.shape != self.stddev.shape:
            raise ContractError(
                f"mean {tuple(self.mean.shape)} and stddev {tuple(self.stddev.shape)} differ"
            )

    @classmethod
    def from_raw(cls, params: Value) -> "DiagGaussian":
        mean, raw = params.chunk(2, dim=-1)
        return cls(mean, softplus_std(raw))

    @property
    def noise_shape(self) -> tuple[int, ...]:
        return tuple(self.mean.shape)

    @property
    def flat_dim(self) -> int:
        return self.mean.shape[-1]

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(self.mean.detach(), self.stddev.detach())

    def log_prob(self, x: Value) -> Value:
        z = (x - self.mean) / self.stddev
        return (-0.5 * z**2 - torch.log(self.stddev) - 0.5 * math.log(2 * math.pi)).sum(-1)

    def mode(self) -> Value:
        return self.mean


@dataclass
class CategoricalLatent:
    """Independent categorical groups; ``logits`` has shape ``(..., groups, classes)``."""

    logits: Value

    @classmethod
    def from_raw(cls, params: Value, groups: int, classes: int, unimix: float = 0.0):
        logits = params.reshape(*params.shape[:-1], groups, classes)
        if unimix > 0.0:
            probs = (1.0 - unimix) * torch.softmax(logits, -1) + unimix / classes
            logits = torch.log(probs)
        return cls(logits)

    @property
    def probs(self) -> Value:
        return torch.softmax(self.logits, -1)

    @property
    def log_probs(self) -> Value:
        return torch.log_softmax(self.logits, -1)

    @property
    def noise_shape(self) -> tuple[int, ...]:
        return tuple(self.logits.shape[:-1])

    @property
    def flat_dim(self) -> int:
        return self.logits.shape[-2] * self.logits.shape[-1]

    def detach(self) -> "CategoricalLatent":
        return CategoricalLatent(self.logits.detach())

    def log_prob(self, onehot: Value) -> Value:
        return (onehot * self.log_probs).sum((-2, -1))

    def entropy(self) -> Value:
        return -(self.probs * self.log_probs).sum((-2, -1))

    def mode(self) -> Value:
        idx = self.logits.argmax(-1)
        return F.one_hot(idx, self.logits.shape[-1]).to(DTYPE)


def kl_diag_gaussian(p: DiagGaussian, q: DiagGaussian) -> Value:
    """KL(p || q), summed over the last axis."""
    if p.mean.shape[-1] != q.mean.shape[-1]:
        raise ContractError(f"dimension mismatch {p.mean.shape[-1]} vs {q.mean.shape[-1]}")
    var_ratio = (p.stddev / q.stddev) ** 2
    mahal = ((p.mean - q.mean) / q.stddev) ** 2
    return 0.5 * (var_ratio + mahal - 1.0 - torch.log(var_ratio)).sum(-1)


def kl_categorical(p: CategoricalLatent, q: CategoricalLatent) -> Value:
    """KL(p || q), summed over groups."""
    if p.logits.shape[-2:] != q.logits.shape[-2:]:
        raise ContractError(
            f"shape mismatch {tuple(p.logits.shape[-2:])} vs {tuple(q.logits.shape[-2:])}"
        )
    logp, logq = p.log_probs, q.log_probs
    return (logp.exp() * (logp - logq)).sum((-2, -1))


def kl_divergence(p, q) -> Value:
    if isinstance(p, DiagGaussian) and isinstance(q, DiagGaussian):
        return kl_diag_gaussian(p, q)
    if isinstance(p, CategoricalLatent) and isinstance(q, CategoricalLatent):
        return kl_categorical(p, q)
    raise ContractError(f"no KL between {type(p).__name__} and {type(q).__name__}")


class _StraightThrough(torch.autograd.Function):
    # forward emits the exact one-hot; backward routes the gradient to the probabilities
    @staticmethod
    def forward(ctx, probs, onehot):
        return onehot.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def categorical_onehot(probs: Value, uniform: Value) -> Value:
    """Inverse-CDF sample per group from ``uniform`` noise in [0, 1)."""
    cdf = probs.detach().cumsum(-1)
    idx = (cdf <= uniform.unsqueeze(-1)).sum(-1).clamp(max=probs.shape[-1] - 1)
    return F.one_hot(idx, probs.shape[-1]).to(probs.dtype)


def reparam_sample(d, noise: Value) -> Value:
    """Differentiable sample from ``d`` driven by ``noise``.

    Gaussian noise is standard normal with the shape of the mean.  Categorical
    noise is uniform on [0, 1) with one entry per group; the returned one-hot
    carries a straight-through gradient into the logits.
    """
    if tuple(noise.shape) != d.noise_shape:
        raise ContractError(f"noise shape {tuple(noise.shape)} != {d.noise_shape}")
    if isinstance(d, DiagGaussian):
        return d.mean + d.stddev * noise
    probs = d.probs
    return _StraightThrough.apply(probs, categorical_onehot(probs, noise))


def draw_noise(d, gen: torch.Generator | None) -> Value:
    if isinstance(d, DiagGaussian):
        return torch.randn(d.noise_shape, generator=gen, dtype=DTYPE)
    return torch.rand(d.noise_shape, generator=gen, dtype=DTYPE)


# ---------------------------------------------------------------------------
# layers


def mlp(in_dim: int, out_dim: int, hidden: int, layers: int = 1) -> nn.Sequential:
    """Dense stack: ``layers`` x (Linear, LayerNorm, SiLU) followed by a linear head."""
    mods: list[nn.Module] = []
    d = in_dim
    for _ in range(layers):
        mods += [nn.Linear(d, hidden, dtype=DTYPE), nn.LayerNorm(hidden, dtype=DTYPE), nn.SiLU()]
        d = hidden
    mods.append(nn.Linear(d, out_dim, dtype=DTYPE))
    return nn.Sequential(*mods)


class GatedRecurrentCell(nn.Module):
    """GRU update ``z' = u(z, x)`` with an input projection."""

    def __init__(self, in_dim: int, z_dim: int, hidden: int):
        super().__init__()
        self.inp = nn.Sequential(
            nn.Linear(in_dim, hidden, dtype=DTYPE), nn.LayerNorm(hidden, dtype=DTYPE), nn.SiLU()
        )
        self.cell = nn.GRUCell(hidden, z_dim, dtype=DTYPE)

    def forward(self, z: Value, x: Value) -> Value:
        return self.cell(self.inp(x), z)


# ---------------------------------------------------------------------------
# optimizer


class NonFiniteGradientError(FloatingPointError):
    pass


class Optimizer:
    """Adam with global-norm clipping, over named parameter groups.

    ``groups`` maps a group name to its parameters; the name is reported when a
    non-finite gradient is found.
    """

    def __init__(
        self,
        groups: Mapping[str, Iterable[nn.Parameter]],
        lr: float = 3e-4,
        clip: float = 100.0,
        eps: float = 1e-8,
    ):
        self.groups = {name: list(ps) for name, ps in groups.items()}
        self.clip = clip
        self.lr = lr
        self._adam = torch.optim.Adam(
            [{"params": ps} for ps in self.groups.values()], lr=lr, eps=eps
        )

    @property
    def params(self) -> list[nn.Parameter]:
        return [p for ps in self.groups.values() for p in ps]

    @property
    def steps(self) -> int:
        state = [self._adam.state[p] for p in self.params if p in self._adam.state]
        return int(state[0]["step"]) if state else 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        """Clip then apply one update; returns the pre-clip global gradient norm."""
        for name, ps in self.groups.items():
            for p in ps:
                if p.grad is not None and not torch.isfinite(p.grad).all():
                    raise NonFiniteGradientError(f"non-finite gradient in parameter group {name!r}")
        grads = [p.grad for p in self.params if p.grad is not None]
        if not grads:
            return 0.0
        norm = float(torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(g) for g in grads])))
        if norm > self.clip:
            scale = self.clip / (norm + 1e-6)
            for g in grads:
                g.mul_(scale)
        self._adam.step()
        return norm

    def minimize(self, loss: Value) -> float:
        self.zero_grad()
        backward(loss)
        return self.step()


def optimizer_step(opt: Optimizer, loss: Value) -> float:
    return opt.minimize(loss)


# ---------------------------------------------------------------------------
# checkpoints


def save_params(path: str | Path, tensors: Mapping[str, Value]) -> None:
    """Write ``tensors`` as an IWM-CKPT-1 file.

    Layout: header line, u64 little-endian manifest length, JSON manifest of
    ``{name, shape, offset}`` entries, then one little-endian float64 blob.
    """
    entries, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = np.asarray(t.detach().cpu().numpy(), dtype="<f8", order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = json.dumps({"format": CKPT_HEADER.decode().strip(), "tensors": entries}).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_HEADER)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for c in chunks:
            fh.write(c)


def load_params(path: str | Path) -> dict[str, Value]:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(CKPT_HEADER):
        raise ContractError(f"{path}: not an IWM-CKPT-1 file")
    pos = len(CKPT_HEADER)
    (mlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    manifest = json.loads(data[pos : pos + mlen])
    blob = memoryview(data)[pos + mlen :]
    out = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=e["offset"]).reshape(tuple(e["shape"]))
        out[e["name"]] = torch.tensor(arr.copy(), dtype=DTYPE)
    return out


# ---------------------------------------------------------------------------
# finite differences


def finite_difference_grad(fn: Callable[[], Value], param: Value, step: float = 1e-6) -> Value:
    """Central-difference gradient of scalar ``fn()`` w.r.t. every entry of ``param``."""
    grad = torch.zeros_like(param)
    flat = param.data.view(-1)
    g = grad.view(-1)
    with torch.no_grad():
        for k in range(flat.numel()):
            orig = flat[k].item()
            flat[k] = orig + step
            up = fn().item()
            flat[k] = orig - step
            down = fn().item()
            flat[k] = orig
            g[k] = (up - down) / (2 * step)
    return grad


def grad_rel_error(analytic: Value, numeric: Value, atol: float = 1e-8) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``; ``atol`` guards all-zero gradients."""
    if analytic.numel() == 0:
        return 0.0
    diff = torch.linalg.vector_norm(analytic - numeric)
    scale = max(float(torch.linalg.vector_norm(analytic)), float(torch.linalg.vector_norm(numeric)), atol)
    return float(diff) / scale
