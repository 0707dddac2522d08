import json
import math

import numpy as np
import pytest
import torch
from scipy import stats

from informed_dreamer import oracle
from informed_dreamer.config import ConfigError, TrainConfig, dump_config, load_config, parse_config
from informed_dreamer.diffcore import ContractError
from informed_dreamer.envs import InformedEnv, make, tiger, tiger_pomdp
from informed_dreamer.replay import ReplayBuffer, make_window
from informed_dreamer.trainer import (
    METRICS_HEADER,
    DreamerAgent,
    Learner,
    RandomPolicy,
    TrainingAborted,
    evaluate,
    run,
)
from informed_dreamer.worldmodel import ModelConfig

TINY = ModelConfig(z_dim=8, hidden=8, groups=2, classes=2)


def tiny_cfg(**kw):
    base = dict(env="tiger", steps=300, prefill=50, train_ratio=0.05, window=4, horizon=3, batch=4,
                capacity=1000, log_every=100, model=TINY)
    base.update(kw)
    return TrainConfig(**base)


def window(k, W=3):
    return {
        "action": np.full((W, 2), float(k)),
        "reward": np.full(W, float(k)),
        "info": np.full((W, 3), float(k)),
        "obs": np.full((W, 1), float(k)),
        "cont": np.ones(W),
        "mask": np.ones(W),
    }


# -- replay -------------------------------------------------------------------


def test_buffer_evicts_oldest_first():
    buf = ReplayBuffer(capacity=2, window=3)
    for k in range(3):
        buf.add(window(k))
    assert len(buf) == 2
    stored = sorted(float(buf.data["reward"][i, 0]) for i in range(2))
    assert stored == [1.0, 2.0]
    assert [float(buf.data["reward"][i, 0]) for i in buf.oldest_first()] == [1.0, 2.0]


def test_buffer_sampling_is_uniform():
    buf = ReplayBuffer(capacity=10, window=3)
    for k in range(10):
        buf.add(window(k))
    idx = buf.sample_indices(100_000, np.random.default_rng(0))
    counts = np.bincount(idx, minlength=10)
    assert stats.chisquare(counts).pvalue > 0.01


def test_buffer_samples_are_bit_identical():
    buf = ReplayBuffer(capacity=5, window=3)
    rng = np.random.default_rng(0)
    windows = []
    for _ in range(5):
        w = {k: rng.normal(size=v.shape) for k, v in window(0).items()}
        windows.append(w)
        buf.add(w)
    idx = buf.sample_indices(20, np.random.default_rng(3))
    batch = buf.sample(20, np.random.default_rng(3))
    for n, i in enumerate(idx):
        for k in ("action", "reward", "info", "obs", "cont", "mask"):
            np.testing.assert_array_equal(getattr(batch, k)[n].numpy(), windows[i][k])


def test_buffer_errors_and_determinism():
    buf = ReplayBuffer(capacity=3, window=3)
    with pytest.raises(ContractError):
        buf.sample(1, np.random.default_rng(0))
    with pytest.raises(ContractError):
        buf.add(window(0, W=2))
    for k in range(3):
        buf.add(window(k))
    a = buf.sample_indices(50, np.random.default_rng(7))
    b = buf.sample_indices(50, np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)


def test_make_window_left_pads_with_mask():
    slots = [dict(action=np.ones(2) * k, reward=float(k), info=np.ones(3), obs=np.ones(1), cont=1.0) for k in range(2)]
    w = make_window(slots, 4, 2)
    np.testing.assert_array_equal(w["mask"], [0, 0, 1, 1])
    np.testing.assert_array_equal(w["reward"], [0, 0, 0, 1])
    assert not w["action"][:2].any()


# -- config -------------------------------------------------------------------


def test_config_invariants():
    for bad in (dict(prefill=10, capacity=5), dict(window=1), dict(horizon=0), dict(batch=0), dict(gamma=1.0), dict(lam=1.5)):
        with pytest.raises(ContractError):
            TrainConfig(**bad)


def test_config_roundtrip(tmp_path):
    cfg = tiny_cfg(seed=3, informed=False)
    path = tmp_path / "c.json"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg


def test_config_errors_report_line():
    text = '{\n  "train.steps": 10,\n  "train.bogus": 1\n}'
    with pytest.raises(ConfigError, match=":3: unknown config key"):
        parse_config(text)
    with pytest.raises(ConfigError, match=":2:"):
        parse_config('{\n  "train.steps": "ten"\n}')
    with pytest.raises(ConfigError):
        parse_config('{"train.window": 1}')
    with pytest.raises(ConfigError):
        parse_config("[1, 2]")


# -- run ----------------------------------------------------------------------


def read_metrics(path):
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(METRICS_HEADER)
    return [line.split(",") for line in lines[1:]]


def test_gate_never_opens_when_prefill_exceeds_steps(tmp_path):
    res = run(tiny_cfg(steps=100, prefill=200, capacity=1000), tmp_path)
    assert res.grad_steps == 0
    assert res.env_steps == 100


@pytest.mark.parametrize("ratio", [0.05, 0.3])
def test_gradient_step_count_tracks_train_ratio(tmp_path, ratio):
    cfg = tiny_cfg(steps=200, prefill=50, train_ratio=ratio)
    res = run(cfg, tmp_path)
    s = res.env_steps
    assert res.grad_steps <= ratio * s
    assert res.grad_steps >= ratio * (s - cfg.prefill) - 1


def test_run_outputs_and_byte_identical_reruns(tmp_path):
    cfg = tiny_cfg()
    r1 = run(cfg, tmp_path / "a")
    r2 = run(cfg, tmp_path / "b")
    m1 = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert m1 == (tmp_path / "b" / "metrics.csv").read_bytes()
    rows = read_metrics(tmp_path / "a" / "metrics.csv")
    assert any(r[2] != "" for r in rows)  # at least one episode row
    steps = [int(r[0]) for r in rows]
    assert steps == sorted(steps)
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["status"] == "completed" and len(manifest["code_hash"]) == 40
    assert manifest["information_binding"] == "information"
    assert r1.checkpoint.exists()
    a, b = DreamerAgent.load(r1.checkpoint), DreamerAgent.load(r2.checkpoint)
    for k, v in a.state_dict().items():
        assert torch.equal(v, b.state_dict()[k])


def test_stride_controls_window_storage(tmp_path, monkeypatch):
    added = {}
    orig = ReplayBuffer.add

    def spy(self, w):
        added[self] = added.get(self, 0) + 1
        orig(self, w)

    monkeypatch.setattr(ReplayBuffer, "add", spy)
    run(tiny_cfg(env="tmaze-2", steps=120, prefill=1000, capacity=1000, stride=1), tmp_path / "s1")
    n1 = sum(added.values())
    added.clear()
    run(tiny_cfg(env="tmaze-2", steps=120, prefill=1000, capacity=1000, stride=4), tmp_path / "s4")
    n4 = sum(added.values())
    assert n1 == 120 and n4 < n1


class NanInformation(InformedEnv):
    """Wraps an environment and poisons the information channel."""

    def __init__(self, env):
        super().__init__()
        self.env = env
        self.descriptor = env.descriptor

    def reset(self, seed=None):
        info, obs, c = self.env.reset(seed)
        return np.full_like(info, np.nan), obs, c

    def step(self, action):
        out = self.env.step(action)
        out.information = np.full_like(out.information, np.nan)
        return out


def test_uninformed_run_never_reads_information(tmp_path, monkeypatch):
    import informed_dreamer.trainer as trainer_mod

    monkeypatch.setattr(trainer_mod, "make", lambda name: NanInformation(make(name)))
    res = run(tiny_cfg(informed=False, eval_every=150, eval_episodes=3), tmp_path)
    assert res.grad_steps > 0
    rows = read_metrics(tmp_path / "metrics.csv")
    assert all(r[5] == "" or math.isfinite(float(r[5])) for r in rows)


def test_informed_run_aborts_on_poisoned_information(tmp_path, monkeypatch):
    import informed_dreamer.trainer as trainer_mod

    monkeypatch.setattr(trainer_mod, "make", lambda name: NanInformation(make(name)))
    with pytest.raises(TrainingAborted):
        run(tiny_cfg(ckpt_every=40), tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["status"].startswith("aborted")
    assert (tmp_path / "checkpoint.iwm").exists()


def test_early_stop_on_success(tmp_path):
    res = run(tiny_cfg(env="tmaze-1", steps=400, eval_every=50, eval_episodes=4, stop_success=0.0), tmp_path)
    assert res.success_step == 50 and res.env_steps == 50
    assert len((tmp_path / "eval.csv").read_text().splitlines()) == 2


# -- evaluation ---------------------------------------------------------------


def test_random_policy_on_tiger_matches_exact_value():
    stats_ = evaluate(RandomPolicy(tiger().descriptor, seed=0), tiger(max_steps=20), 3000, seed=1)
    exact = oracle.memoryless_policy_value(tiger_pomdp(), np.full(3, 1 / 3), 20)
    sigma = stats_.std / math.sqrt(3000)
    assert abs(stats_.mean - exact) <= 3 * sigma


def test_evaluation_never_reads_information(tmp_path):
    agent = DreamerAgent(tiger().descriptor, TINY)
    agent.save(tmp_path / "a.iwm")
    s1 = evaluate(tmp_path / "a.iwm", NanInformation(tiger()), 5, seed=4)
    s2 = evaluate(tmp_path / "a.iwm", tiger(), 5, seed=4)
    assert s1.returns == s2.returns
    assert all(math.isfinite(r) for r in s1.returns)


def test_evaluation_descriptor_mismatch(tmp_path):
    agent = DreamerAgent(tiger().descriptor, TINY)
    agent.save(tmp_path / "a.iwm")
    with pytest.raises(ContractError):
        evaluate(tmp_path / "a.iwm", make("tmaze-3"), 2, seed=0)


def test_agent_checkpoint_roundtrip(tmp_path):
    agent = DreamerAgent(make("hikec/pos-fixed").descriptor, TINY, informed=False)
    agent.save(tmp_path / "x.iwm")
    back = DreamerAgent.load(tmp_path / "x.iwm")
    assert back.informed is False and back.desc == agent.desc
    for k, v in agent.state_dict().items():
        assert torch.equal(v, back.state_dict()[k])


# -- reduction ----------------------------------------------------------------


def reduction_trajectories(steps, seed=0):
    """Informed learner fed i = o versus the uninformed learner, same seeds."""
    env = tiger()
    desc = env.descriptor
    cfg = tiny_cfg()
    buf = ReplayBuffer(200, cfg.window)
    rng = np.random.default_rng(seed)
    slots = []
    info, obs, _ = env.reset(seed)
    slots.append(dict(action=np.zeros(3), reward=0.0, info=info, obs=obs, cont=1.0))
    for _ in range(200):
        a = int(rng.integers(3))
        st = env.step(a)
        slots.append(dict(action=np.eye(3)[a], reward=st.reward, info=st.information, obs=st.observation, cont=1.0))
        buf.add(make_window(slots, cfg.window, 3))
        if st.done:
            info, obs, _ = env.reset(int(rng.integers(1 << 30)))
            slots = [dict(action=np.zeros(3), reward=0.0, info=info, obs=obs, cont=1.0)]

    learners = []
    for informed in (True, False):
        torch.manual_seed(seed)
        # the informed model gets an information channel shaped like the observation
        agent = DreamerAgent(desc.__class__(**{**desc.__dict__, "info_dim": desc.obs_dim}), TINY, informed)
        learners.append(Learner(agent, cfg, desc.gamma, torch.Generator().manual_seed(seed)))
    sample_rng = [np.random.default_rng(9), np.random.default_rng(9)]
    history = []
    for _ in range(steps):
        row = []
        for learner, srng in zip(learners, sample_rng):
            b = buf.sample(cfg.batch, srng)
            b.info = b.obs.clone()  # bind i = o explicitly for the informed path
            row.append(learner.train_step(b).floats())
        history.append(row)
    return history, learners


def test_reduction_informed_with_observation_equals_uninformed():
    history, (a, b) = reduction_trajectories(10)
    for informed, uninformed in history:
        assert informed == uninformed
    for k, v in a.agent.state_dict().items():
        assert torch.equal(v, b.agent.state_dict()[k])
