"""Shared test utilities: finite-difference gradient oracle."""

import numpy as np

from pattn.tensor import Tensor


def finite_difference(f, params, h=1e-5):
    """Central finite differences of scalar f() w.r.t. a list of Tensors.

    Returns one array per parameter. f must be a pure function of the current
    parameter values.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f()
            flat[i] = orig - h
            down = f()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def check_grads(f, params, h=1e-5, rtol=1e-4):
    """Assert analytic grads (via backward) match central differences."""
    for p in params:
        p.zero_grad()
    f().backward()
    numeric = finite_difference(lambda: f().item(), params, h=h)
    for p, num in zip(params, numeric):
        assert p.grad is not None, "no gradient reached a requires_grad leaf"
        denom = np.maximum(np.abs(num), np.abs(p.grad))
        err = np.abs(p.grad - num) / np.maximum(denom, 1e-8)
        assert err.max() <= rtol, f"gradient mismatch: max rel err {err.max():.3e}"


def rand_tensor(rng, *shape, requires_grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=requires_grad)
