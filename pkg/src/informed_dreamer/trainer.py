"""Interaction / learning loop of the Informed Dreamer."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from informed_dreamer import __version__
from informed_dreamer.behavior import (
    Actor,
    Critic,
    ReturnNormalizer,
    critic_update,
    imagine,
    lambda_returns,
    policy_update,
    trajectory_weights,
)
from informed_dreamer.config import TrainConfig, dump_config, parse_config
from informed_dreamer.diffcore import DTYPE, ContractError, Optimizer, load_params, save_params
from informed_dreamer.envs import EnvDescriptor, InformedEnv, make
from informed_dreamer.replay import ReplayBuffer, make_window
from informed_dreamer.worldmodel import Batch, ModelConfig, WorldModel

log = logging.getLogger(__name__)

METRICS_HEADER = [
    "env_step", "grad_step", "episode", "return", "length",
    "loss_total", "loss_info", "loss_reward", "loss_cont", "loss_kl", "wall_s",
]
EVAL_HEADER = ["env_step", "grad_step", "mean", "std", "min", "max", "success"]


class TrainingAborted(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# agent


class DreamerAgent:
    """World model, actor and critic for one environment descriptor."""

    def __init__(self, desc: EnvDescriptor, model_cfg: ModelConfig, informed: bool = True):
        self.desc = desc
        self.model_cfg = model_cfg
        self.informed = informed
        info_dim = desc.info_dim if informed else desc.obs_dim
        self.world = WorldModel(desc.obs_dim, info_dim, desc.action_dim, model_cfg)
        self.actor = Actor(model_cfg.z_dim, desc, model_cfg.hidden, model_cfg.layers)
        self.critic = Critic(model_cfg.z_dim, model_cfg.hidden, model_cfg.layers)

    def state_dict(self) -> dict[str, torch.Tensor]:
        out = {}
        for prefix, mod in (("world", self.world), ("actor", self.actor), ("critic", self.critic)):
            for k, v in mod.state_dict().items():
                out[f"{prefix}.{k}"] = v
        return out

    def load_state_dict(self, tensors: dict[str, torch.Tensor]) -> None:
        for prefix, mod in (("world", self.world), ("actor", self.actor), ("critic", self.critic)):
            sub = {k[len(prefix) + 1 :]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
            mod.load_state_dict(sub)

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        path = Path(path)
        save_params(path, self.state_dict())
        meta = {
            "descriptor": self.desc.to_dict(),
            "model": self.model_cfg.__dict__,
            "informed": self.informed,
            **(extra or {}),
        }
        Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "DreamerAgent":
        meta = json.loads(Path(str(path) + ".meta.json").read_text())
        agent = cls(
            EnvDescriptor.from_dict(meta["descriptor"]), ModelConfig(**meta["model"]), meta["informed"]
        )
        agent.load_state_dict(load_params(path))
        return agent

    def action_vector(self, sample: torch.Tensor):
        """Model-side action tensor to the environment's action."""
        if self.desc.discrete:
            return int(sample.argmax())
        return sample.numpy().astype(np.float64)

    def policy(self, gen: torch.Generator | None = None, greedy: bool = False) -> "ExecutionPolicy":
        return ExecutionPolicy(self, gen, greedy)


class ExecutionPolicy:
    """Acts from observations only: encoder + recurrence + latent policy."""

    def __init__(self, agent: DreamerAgent, gen: torch.Generator | None, greedy: bool = False):
        self.agent = agent
        self.gen = gen
        self.greedy = greedy
        self.reset()

    def reset(self) -> None:
        self.z = self.agent.world.initial(1)
        self.a = torch.zeros(1, self.agent.desc.action_dim, dtype=DTYPE)

    @torch.no_grad()
    def act(self, obs: np.ndarray):
        w = self.agent.world
        o = torch.as_tensor(obs, dtype=DTYPE).unsqueeze(0)
        post = w.posterior(self.z, self.a, o)
        e = w.sample(post, w.draw(self.gen, 1))
        self.z = w.step(self.z, self.a, e)
        dist = self.agent.actor(self.z)
        a = dist.mode() if self.greedy else dist.sample(self.agent.actor.draw(self.gen, 1))
        self.a = a
        return self.agent.action_vector(a[0])


class RandomPolicy:
    def __init__(self, desc: EnvDescriptor, seed: int = 0):
        self.desc = desc
        self.rng = np.random.default_rng(seed)

    def reset(self) -> None:
        pass

    def act(self, obs: np.ndarray):
        if self.desc.discrete:
            return int(self.rng.integers(self.desc.n_actions))
        return self.rng.uniform(self.desc.action_low, self.desc.action_high)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalStats:
    mean: float
    std: float
    min: float
    max: float
    success: float
    returns: list[float] = field(repr=False)


def evaluate(policy, env: InformedEnv, episodes: int, seed: int) -> EvalStats:
    """Undiscounted returns of ``policy`` (or a checkpoint path) over fresh episodes.

    The policy only ever receives observations.
    """
    if isinstance(policy, (str, Path)):
        agent = DreamerAgent.load(policy)
        if agent.desc.obs_dim != env.descriptor.obs_dim or agent.desc.action_dim != env.descriptor.action_dim:
            raise ContractError("checkpoint descriptor does not match the environment")
        policy = agent.policy(torch.Generator().manual_seed(seed))
    seeds = np.random.SeedSequence([seed, 0xE7A1]).generate_state(episodes)
    returns, wins = [], 0
    for ep_seed in seeds:
        policy.reset()
        _, obs, _ = env.reset(seed=int(ep_seed))
        total = 0.0
        while True:
            step = env.step(policy.act(obs))
            total += step.reward
            obs = step.observation
            if step.done:
                wins += bool(step.success)
                break
        returns.append(total)
    r = np.asarray(returns)
    return EvalStats(float(r.mean()), float(r.std()), float(r.min()), float(r.max()), wins / episodes, returns)


# ---------------------------------------------------------------------------
# learning


class Learner:
    """Holds the optimizers and performs one gradient phase per :meth:`train_step`."""

    def __init__(self, agent: DreamerAgent, cfg: TrainConfig, gamma: float, gen: torch.Generator):
        self.agent = agent
        self.cfg = cfg
        self.gamma = gamma
        self.gen = gen
        self.wm_opt = Optimizer({"world": agent.world.parameters()}, lr=cfg.wm_lr, clip=cfg.clip)
        self.actor_opt = Optimizer({"actor": agent.actor.parameters()}, lr=cfg.actor_lr, clip=cfg.clip)
        self.critic_opt = Optimizer({"critic": agent.critic.parameters()}, lr=cfg.critic_lr, clip=cfg.clip)
        self.normalizer = ReturnNormalizer()

    def world_step(self, batch: Batch):
        world = self.agent.world
        enc = world.encode_sequence(batch.action, batch.obs, self.gen, batch.mask)
        losses = world.elbo_loss(batch, None, encoded=enc)
        self.wm_opt.minimize(losses.total)
        return losses, enc

    def behavior_step(self, enc, batch: Batch) -> dict[str, float]:
        agent, cfg = self.agent, self.cfg
        z0 = enc.z_prev.detach().flatten(0, 1)
        e0 = enc.e.detach().flatten(0, 1)
        a0 = batch.action.flatten(0, 1)
        # terminal slots are not valid starts: nothing follows them in the data
        start_mask = (batch.mask * batch.cont).flatten()
        if agent.actor.discrete:
            with torch.no_grad():
                traj = imagine(agent.world, agent.actor, z0, e0, a0, cfg.horizon, self.gen, critic=agent.critic)
                targets = lambda_returns(traj.reward, traj.cont, traj.value, self.gamma, cfg.lam)
        else:
            traj = imagine(agent.world, agent.actor, z0, e0, a0, cfg.horizon, self.gen, critic=agent.critic)
            targets = lambda_returns(traj.reward, traj.cont, traj.value, self.gamma, cfg.lam)
        weights = trajectory_weights(traj) * start_mask if cfg.cont_weighting else start_mask.expand_as(traj.reward)
        scale = self.normalizer.update(targets)
        stats = policy_update(agent.actor, self.actor_opt, traj, targets, cfg.entropy, scale, weights)
        stats["critic_loss"] = critic_update(agent.critic, self.critic_opt, traj.z, targets, weights)
        return stats

    def train_step(self, batch: Batch):
        if not self.agent.informed:
            batch = batch.uninformed()
        losses, enc = self.world_step(batch)
        self.behavior_step(enc, batch)
        return losses


def git_blob_hash(text: str) -> str:
    data = text.encode()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def code_version() -> str:
    src = Path(__file__).parent
    parts = [__version__] + [p.read_text() for p in sorted(src.rglob("*.py"))]
    return git_blob_hash("\n".join(parts))


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


class _Csv:
    def __init__(self, path: Path, header: list[str]):
        self.fh = open(path, "w", newline="")
        self.w = csv.writer(self.fh, lineterminator="\n")
        self.w.writerow(header)

    def row(self, values) -> None:
        self.w.writerow([_fmt(v) for v in values])
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


@dataclass
class RunResult:
    out_dir: Path
    env_steps: int
    grad_steps: int
    episodes: int
    checkpoint: Path
    success_step: int | None = None
    evals: list[tuple[int, EvalStats]] = field(default_factory=list)


def run(cfg: TrainConfig, out_dir: str | Path) -> RunResult:
    """Train per the Informed Dreamer loop, writing metrics and checkpoints to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(1)
    t0 = time.perf_counter()

    env = make(cfg.env)
    desc = env.descriptor
    gamma = desc.gamma if cfg.gamma is None else cfg.gamma
    torch.manual_seed(cfg.seed)
    agent = DreamerAgent(desc, cfg.model, cfg.informed)
    gen = torch.Generator().manual_seed(cfg.seed)
    learner = Learner(agent, cfg, gamma, gen)
    buffer = ReplayBuffer(cfg.capacity, cfg.window)
    sample_rng = np.random.default_rng([cfg.seed, 1])
    episode_seeds = np.random.SeedSequence([cfg.seed, 2])

    manifest = {
        "config": cfg.to_flat(),
        "informed": cfg.informed,
        "information_binding": "information" if cfg.informed else "observation (i = o)",
        "descriptor": desc.to_dict(),
        "gamma": gamma,
        "code_version": __version__,
        "code_hash": code_version(),
        "status": "running",
    }
    (out / "config.json").write_text(dump_config(cfg))
    _write_manifest(out, manifest)

    metrics = _Csv(out / "metrics.csv", METRICS_HEADER)
    evals = _Csv(out / "eval.csv", EVAL_HEADER)
    eval_env = make(cfg.env)
    ckpt = out / "checkpoint.iwm"
    result = RunResult(out, 0, 0, 0, ckpt)

    def wall():
        return round(time.perf_counter() - t0, 3) if cfg.record_wall_clock else None

    def next_seed() -> int:
        return int(episode_seeds.spawn(1)[0].generate_state(1)[0])

    A = desc.action_dim
    world, actor = agent.world, agent.actor
    null_action = np.zeros(A)
    info, obs, _ = env.reset(seed=next_seed())
    slots = [dict(action=null_action, reward=0.0, info=info, obs=obs, cont=1.0)]
    z = world.initial(1)
    a_prev = torch.zeros(1, A, dtype=DTYPE)
    ep_return, ep_len, episode = 0.0, 0, 0
    g = 0
    last = {}
    status = "completed"
    try:
        for s in range(cfg.steps):
            with torch.no_grad():
                o = torch.as_tensor(obs, dtype=DTYPE).unsqueeze(0)
                e = world.sample(world.posterior(z, a_prev, o), world.draw(gen, 1))
                z = world.step(z, a_prev, e)
                a = actor(z).sample(actor.draw(gen, 1))
            step = env.step(agent.action_vector(a[0]))
            ep_return += step.reward
            ep_len += 1
            slots.append(
                dict(action=a[0].numpy(), reward=step.reward, info=step.information,
                     obs=step.observation, cont=float(step.continuation))
            )
            if ep_len % cfg.stride == 0 or step.done:
                buffer.add(make_window(slots, cfg.window, A))
            if step.done:
                episode += 1
                metrics.row([s + 1, g, episode, ep_return, ep_len, *_loss_cols(last), wall()])
                info, obs, _ = env.reset(seed=next_seed())
                slots = [dict(action=null_action, reward=0.0, info=info, obs=obs, cont=1.0)]
                z = world.initial(1)
                a_prev = torch.zeros(1, A, dtype=DTYPE)
                ep_return, ep_len = 0.0, 0
            else:
                obs = step.observation
                a_prev = a
                if len(slots) > cfg.window:
                    del slots[0]

            while len(buffer) >= cfg.prefill and g < cfg.train_ratio * s:
                try:
                    losses = learner.train_step(buffer.sample(cfg.batch, sample_rng))
                except FloatingPointError as err:
                    raise TrainingAborted(str(err)) from err
                last = losses.floats()
                g += 1

            if cfg.log_every and (s + 1) % cfg.log_every == 0:
                metrics.row([s + 1, g, None, None, None, *_loss_cols(last), wall()])
            if cfg.ckpt_every and (s + 1) % cfg.ckpt_every == 0:
                agent.save(ckpt, {"env": cfg.env, "env_step": s + 1})
            if cfg.eval_every and (s + 1) % cfg.eval_every == 0:
                stats = evaluate(
                    agent.policy(torch.Generator().manual_seed(cfg.seed + s + 1)),
                    eval_env, cfg.eval_episodes, cfg.seed + s + 1,
                )
                result.evals.append((s + 1, stats))
                evals.row([s + 1, g, stats.mean, stats.std, stats.min, stats.max, stats.success])
                if cfg.stop_success is not None and stats.success >= cfg.stop_success:
                    result.success_step = s + 1
                    result.env_steps = s + 1
                    status = "stopped at success threshold"
                    break
            result.env_steps = s + 1
    except TrainingAborted:
        status = "aborted: non-finite loss"
        log.error("training aborted at env step %d; last checkpoint kept", result.env_steps)
        raise
    finally:
        metrics.close()
        evals.close()
        result.grad_steps, result.episodes = g, episode
        manifest.update(status=status, env_steps=result.env_steps, grad_steps=g, episodes=episode)
        if status != "aborted: non-finite loss":
            agent.save(ckpt, {"env": cfg.env, "env_step": result.env_steps})
        manifest["wall_s"] = round(time.perf_counter() - t0, 3)
        _write_manifest(out, manifest)
    return result


def _loss_cols(last: dict) -> list:
    if not last:
        return [None] * 5
    return [last["total"], -last["info_ll"], -last["reward_ll"], -last["cont_ll"], last["kl"]]


def _write_manifest(out: Path, manifest: dict) -> None:
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def run_from_text(text: str, out_dir: str | Path, **overrides) -> RunResult:
    return run(parse_config(text).replace(**overrides), out_dir)
