"""Central finite-difference gradient checking used across the test suite."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from navformer import autodiff as ad


def numerical_grad(f: Callable[[], ad.Tensor], leaf: ad.Tensor,
                   h: float = 1e-5) -> np.ndarray:
    """d f() / d leaf by central differences, perturbing one entry at a time.

    ``f`` must rebuild its computation from ``leaf.data`` on every call.
    """
    base = leaf.data
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        with ad.no_grad():
            hi = f().item()
        flat[i] = orig - h
        with ad.no_grad():
            lo = f().item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Elementwise |a - n| / max(1, |a|, |n|): relative above 1, absolute below."""
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_grads(f: Callable[[], ad.Tensor], leaves: Sequence[ad.Tensor],
                tol: float = 1e-4, h: float = 1e-5) -> float:
    """Assert analytic gradients of scalar f() match finite differences."""
    for leaf in leaves:
        leaf.grad = None
    loss = f()
    ad.backward(loss)
    worst = 0.0
    for leaf in leaves:
        assert leaf.grad is not None, "leaf received no gradient"
        err = max_rel_err(leaf.grad, numerical_grad(f, leaf, h=h))
        worst = max(worst, err)
        assert err <= tol, f"gradient mismatch: rel err {err:.3e} > {tol}"
    return worst
