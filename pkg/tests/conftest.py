import numpy as np
import pytest

from gfcn.tensor import Tensor, backward


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))))


def gradcheck(fn, *arrays: np.ndarray, seed: int = 0, h: float = 1e-5) -> float:
    """Max relative error between autodiff and finite differences for ``sum(fn(*xs) * R)``.

    ``R`` is a fixed random projection so every output element matters.
    """
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    proj = Tensor(np.random.default_rng(seed).normal(size=out.shape))
    loss = (out * proj).sum()
    backward(loss)
    worst = 0.0
    for t in tensors:
        def f():
            return float(np.sum(fn(*[Tensor(u.data) for u in tensors]).data * proj.data))

        worst = max(worst, rel_err(t.grad, numeric_grad(f, t.data, h)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
