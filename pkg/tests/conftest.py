import numpy as np
import pytest
import torch

from informed_dreamer.diffcore import finite_difference_grad, grad_rel_error

torch.set_num_threads(1)

FD_RTOL = 1e-4


def check_gradients(fn, params, rtol=FD_RTOL):
    """Compare autograd against central differences for every tensor in ``params``."""
    for p in params:
        p.grad = None
    fn().backward()
    worst = 0.0
    for p in params:
        analytic = p.grad.clone() if p.grad is not None else torch.zeros_like(p)
        numeric = finite_difference_grad(fn, p)
        worst = max(worst, grad_rel_error(analytic, numeric))
    assert worst < rtol, f"finite-difference mismatch {worst:.3g}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
