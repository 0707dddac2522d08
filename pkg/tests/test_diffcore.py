import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from informed_dreamer.diffcore import (
    DTYPE,
    CategoricalLatent,
    ContractError,
    DiagGaussian,
    GatedRecurrentCell,
    NonFiniteGradientError,
    Optimizer,
    as_value,
    backward,
    kl_categorical,
    kl_diag_gaussian,
    load_params,
    mlp,
    reparam_sample,
    save_params,
    softplus_std,
    symexp,
    symlog,
)

from conftest import check_gradients


def gauss(mean, std):
    return DiagGaussian(as_value(mean), as_value(std))


# -- backward -----------------------------------------------------------------


def test_backward_product_rule():
    x = as_value(2.0, requires_grad=True)
    y = as_value(3.0, requires_grad=True)
    backward(x * y)
    assert x.grad.item() == 3.0 and y.grad.item() == 2.0


def test_backward_rejects_non_scalar():
    x = as_value([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * 2)


def test_backward_constant_root_leaves_grads_zero():
    x = as_value([1.0, 2.0], requires_grad=True)
    backward(as_value(5.0))
    assert x.grad is None or torch.all(x.grad == 0)


def test_backward_unreachable_values_keep_zero_grad():
    x = as_value(1.5, requires_grad=True)
    unused = as_value(2.0, requires_grad=True)
    backward(torch.tanh(x))
    assert unused.grad is None


def test_tanh_layer_matches_finite_differences(rng):
    W = as_value(rng.normal(size=(3, 4)), requires_grad=True)
    x = as_value(rng.normal(size=4), requires_grad=True)
    check_gradients(lambda: torch.tanh(W @ x).sum(), [W, x])


# -- KL -----------------------------------------------------------------------


def test_kl_gaussian_identical_is_zero():
    p = gauss([0.3, -1.0], [0.5, 2.0])
    assert kl_diag_gaussian(p, p).item() == 0.0


def test_kl_gaussian_mean_shift():
    assert kl_diag_gaussian(gauss([1.0], [1.0]), gauss([0.0], [1.0])).item() == pytest.approx(0.5, abs=1e-15)


def test_kl_gaussian_scale_change_against_monte_carlo():
    value = kl_diag_gaussian(gauss([0.0], [2.0]), gauss([0.0], [1.0])).item()
    assert value == pytest.approx(0.806853, abs=1e-6)
    # Monte Carlo E_p[log p - log q] with 10^6 samples
    x = np.random.default_rng(0).normal(0.0, 2.0, size=1_000_000)
    log_ratio = (-0.5 * (x / 2.0) ** 2 - math.log(2.0)) - (-0.5 * x**2)
    se = log_ratio.std() / math.sqrt(x.size)
    assert abs(log_ratio.mean() - value) < 3 * se


def test_kl_gaussian_dimension_mismatch():
    with pytest.raises(ContractError):
        kl_diag_gaussian(gauss([0.0], [1.0]), gauss([0.0, 0.0], [1.0, 1.0]))


def test_kl_categorical_uniform_is_zero():
    u = CategoricalLatent(torch.zeros(3, 4, dtype=DTYPE))
    assert kl_categorical(u, u).item() == 0.0


def test_kl_categorical_point_mass_vs_uniform():
    point = CategoricalLatent(as_value([[0.0, -800.0]]))
    uniform = CategoricalLatent(as_value([[0.0, 0.0]]))
    assert kl_categorical(point, uniform).item() == pytest.approx(math.log(2), abs=1e-12)


def test_kl_categorical_matches_direct_summation(rng):
    for _ in range(20):
        lp, lq = rng.normal(size=(2, 3, 5)) * 2
        p = np.exp(lp) / np.exp(lp).sum(-1, keepdims=True)
        q = np.exp(lq) / np.exp(lq).sum(-1, keepdims=True)
        direct = float((p * np.log(p / q)).sum())
        got = kl_categorical(CategoricalLatent(as_value(lp)), CategoricalLatent(as_value(lq))).item()
        assert got == pytest.approx(direct, rel=1e-12, abs=1e-14)


def test_kl_categorical_shape_mismatch():
    with pytest.raises(ContractError):
        kl_categorical(CategoricalLatent(torch.zeros(2, 3, dtype=DTYPE)), CategoricalLatent(torch.zeros(3, 2, dtype=DTYPE)))


finite = st.floats(-3, 3, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(finite, finite, finite, finite), min_size=1, max_size=5))
def test_kl_gaussian_non_negative(rows):
    a = np.array(rows)
    p = gauss(a[:, 0], softplus_std(as_value(a[:, 1])).numpy())
    q = gauss(a[:, 2], softplus_std(as_value(a[:, 3])).numpy())
    assert kl_diag_gaussian(p, q).item() >= 0.0
    assert kl_diag_gaussian(p, p).item() <= 1e-12


@settings(max_examples=60, deadline=None)
@given(st.lists(finite, min_size=8, max_size=8), st.lists(finite, min_size=8, max_size=8))
def test_kl_categorical_non_negative(a, b):
    p = CategoricalLatent(as_value(a).reshape(2, 4))
    q = CategoricalLatent(as_value(b).reshape(2, 4))
    assert kl_categorical(p, q).item() >= -1e-12
    assert abs(kl_categorical(p, p).item()) <= 1e-12


def test_kl_gradients_match_finite_differences(rng):
    m1, m2 = (as_value(rng.normal(size=3), True) for _ in range(2))
    r1, r2 = (as_value(rng.normal(size=3), True) for _ in range(2))
    check_gradients(
        lambda: kl_diag_gaussian(DiagGaussian(m1, softplus_std(r1)), DiagGaussian(m2, softplus_std(r2))),
        [m1, m2, r1, r2],
    )
    l1, l2 = (as_value(rng.normal(size=(2, 3)), True) for _ in range(2))
    check_gradients(lambda: kl_categorical(CategoricalLatent(l1), CategoricalLatent(l2)), [l1, l2])


# -- symlog -------------------------------------------------------------------


def test_symlog_values():
    assert symlog(0.0) == 0.0
    assert symlog(math.e - 1) == pytest.approx(1.0, abs=1e-15)
    assert symlog(as_value(-(math.e - 1))).item() == pytest.approx(-1.0, abs=1e-15)


def test_symexp_inverts_symlog(rng):
    x = rng.uniform(-1e4, 1e4, size=100)
    np.testing.assert_allclose(symexp(symlog(x)), x, rtol=1e-9)
    t = as_value(x)
    np.testing.assert_allclose(symexp(symlog(t)).numpy(), x, rtol=1e-9)


def test_symlog_gradient(rng):
    x = as_value(rng.uniform(-5, 5, size=6), True)
    check_gradients(lambda: (symlog(x) ** 2).sum() + symexp(x * 0.3).sum(), [x])


# -- sampling -----------------------------------------------------------------


def test_gaussian_sample_degenerate_std_returns_mean():
    d = DiagGaussian(as_value([1.0, -2.0]), as_value([1e-300, 1e-300]))
    np.testing.assert_array_equal(reparam_sample(d, as_value([0.7, -1.3])).numpy(), [1.0, -2.0])


def test_sampling_is_deterministic_given_noise(rng):
    d = DiagGaussian(as_value(rng.normal(size=4)), as_value(rng.uniform(0.1, 1, size=4)))
    noise = as_value(rng.normal(size=4))
    assert torch.equal(reparam_sample(d, noise), reparam_sample(d, noise))
    c = CategoricalLatent(as_value(rng.normal(size=(3, 5))))
    u = as_value(rng.uniform(size=3))
    assert torch.equal(reparam_sample(c, u), reparam_sample(c, u))


def test_gaussian_reparam_gradient_wrt_mean_is_ones(rng):
    mean = as_value(rng.normal(size=5), True)
    std = as_value(rng.uniform(0.1, 1, size=5), True)
    backward(reparam_sample(DiagGaussian(mean, std), as_value(rng.normal(size=5))).sum())
    np.testing.assert_array_equal(mean.grad.numpy(), np.ones(5))


def test_gaussian_reparam_finite_differences(rng):
    mean = as_value(rng.normal(size=3), True)
    raw = as_value(rng.normal(size=3), True)
    noise = as_value(rng.normal(size=3))
    check_gradients(lambda: (reparam_sample(DiagGaussian(mean, softplus_std(raw)), noise) ** 2).sum(), [mean, raw])


def test_sample_noise_shape_mismatch():
    with pytest.raises(ContractError):
        reparam_sample(gauss([0.0, 0.0], [1.0, 1.0]), as_value([0.1]))
    with pytest.raises(ContractError):
        reparam_sample(CategoricalLatent(torch.zeros(2, 3, dtype=DTYPE)), as_value([0.1, 0.2, 0.3]))


def test_straight_through_forward_is_exact_one_hot(rng):
    logits = as_value(rng.normal(size=(6, 4)) * 3, True)
    out = reparam_sample(CategoricalLatent(logits), as_value(rng.uniform(size=6)))
    assert set(out.detach().flatten().tolist()) <= {0.0, 1.0}
    np.testing.assert_array_equal(out.detach().sum(-1).numpy(), np.ones(6))


def test_straight_through_gradient_equals_probability_pathway(rng):
    logits = as_value(rng.normal(size=(3, 4)), True)
    w = as_value(rng.normal(size=(3, 4)))
    backward((w * reparam_sample(CategoricalLatent(logits), as_value(rng.uniform(size=3)))).sum())
    st_grad = logits.grad.clone()
    logits.grad = None
    backward((w * torch.softmax(logits, -1)).sum())
    torch.testing.assert_close(st_grad, logits.grad, rtol=0, atol=1e-15)


def test_categorical_sampling_frequencies():
    probs = np.array([0.2, 0.5, 0.3])
    d = CategoricalLatent(as_value(np.log(probs))[None].expand(20000, 3))
    u = torch.rand(20000, generator=torch.Generator().manual_seed(0), dtype=DTYPE)
    freq = reparam_sample(d, u).mean(0).numpy()
    np.testing.assert_allclose(freq, probs, atol=0.015)


# -- layers -------------------------------------------------------------------


def test_mlp_and_recurrent_cell_gradients(rng):
    torch.manual_seed(0)
    net = mlp(3, 2, 5)
    cell = GatedRecurrentCell(3, 4, 5)
    x = as_value(rng.normal(size=(2, 3)), True)
    z = as_value(rng.normal(size=(2, 4)), True)
    params = list(net.parameters()) + list(cell.parameters()) + [x, z]
    check_gradients(lambda: (net(x) ** 2).sum() + torch.tanh(cell(z, x)).sum(), params)


# -- optimizer ----------------------------------------------------------------


def _param(values):
    return torch.nn.Parameter(as_value(values))


def test_optimizer_zero_gradient_leaves_params_unchanged():
    p = _param([1.0, -2.0])
    opt = Optimizer({"g": [p]})
    p.grad = torch.zeros_like(p)
    opt.step()
    np.testing.assert_array_equal(p.detach().numpy(), [1.0, -2.0])
    assert opt.steps == 1


def test_optimizer_is_deterministic():
    results = []
    for _ in range(2):
        p = _param([1.0, -2.0, 0.5])
        opt = Optimizer({"g": [p]}, lr=1e-2)
        for _ in range(5):
            opt.minimize(((p - 3.0) ** 2).sum())
        results.append(p.detach().clone())
    assert torch.equal(results[0], results[1])


def test_optimizer_clips_by_global_norm():
    clip = 1.0
    g = as_value([6.0, 8.0]) * 1.0  # norm 10 = 10x the threshold
    p1 = _param([0.5, -0.5])
    opt1 = Optimizer({"g": [p1]}, lr=0.1, clip=clip, eps=1.0)
    p1.grad = g.clone()
    assert opt1.step() == pytest.approx(10.0)

    p2 = _param([0.5, -0.5])
    opt2 = Optimizer({"g": [p2]}, lr=0.1, clip=1e9, eps=1.0)
    p2.grad = g * (clip / (10.0 + 1e-6))
    opt2.step()
    torch.testing.assert_close(p1.detach(), p2.detach(), rtol=0, atol=1e-15)
    # the large eps keeps the update scale-sensitive, so clipping mattered
    p3 = _param([0.5, -0.5])
    opt3 = Optimizer({"g": [p3]}, lr=0.1, clip=1e9, eps=1.0)
    p3.grad = g.clone()
    opt3.step()
    assert not torch.allclose(p1.detach(), p3.detach())


def test_optimizer_names_group_with_non_finite_gradient():
    a, b = _param([1.0]), _param([1.0])
    opt = Optimizer({"world": [a], "actor": [b]})
    a.grad = torch.zeros_like(a)
    b.grad = as_value([float("nan")])
    with pytest.raises(NonFiniteGradientError, match="actor"):
        opt.step()


# -- checkpoints --------------------------------------------------------------


def test_checkpoint_roundtrip_is_bit_exact(tmp_path, rng):
    tensors = {"a.weight": as_value(rng.normal(size=(3, 4))), "b": as_value(rng.normal(size=7)), "s": as_value(1.5)}
    path = tmp_path / "x.iwm"
    save_params(path, tensors)
    assert path.read_bytes().startswith(b"IWM-CKPT-1\n")
    back = load_params(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        assert torch.equal(back[k], tensors[k])


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "bad.iwm"
    path.write_bytes(b"nope")
    with pytest.raises(ContractError):
        load_params(path)
