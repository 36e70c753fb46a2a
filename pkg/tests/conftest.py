import numpy as np
import pytest

from flair_lab import numkernel as nk


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f`` with respect to array ``x`` (modified in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic, numeric, floor=1e-6):
    """max |a - n| scaled by the larger of the two gradients' max magnitudes.

    ``floor`` bounds the scale from below so an exactly vanishing gradient is
    compared against difference-quotient round-off rather than divided by it.
    """
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), floor)
    return float(np.abs(analytic - numeric).max() / scale)


def check_grads(build, params, h=1e-5):
    """Compare ``backward`` gradients of ``build()`` against finite differences per parameter."""
    for p in params:
        p.grad = None
    root = build()
    nk.backward(root)
    errors = {}
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.value)
        numeric = numeric_grad(lambda: float(build().value), p.value, h)
        errors[p.name] = rel_error(analytic, numeric)
    return errors


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
