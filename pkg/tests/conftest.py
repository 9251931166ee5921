import numpy as np
import pytest

from spmix import autodiff as ad


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to array ``x`` (modified in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def check_op_grad(build, *arrays, eps=1e-6, tol=1e-6):
    """Compare autodiff gradients of ``sum(build(*tensors) * w)`` against central differences."""
    rng = np.random.default_rng(0)
    tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
    with ad.no_grad():
        out_shape = build(*tensors).shape
    w = rng.normal(size=out_shape)

    def value():
        with ad.no_grad():
            return float((build(*tensors).data * w).sum())

    with ad.Graph() as g:
        loss = ad.tsum(ad.mul(build(*tensors), w))
    ad.backward(g, loss)
    for t in tensors:
        num = numeric_grad(value, t.data, eps)
        err = rel_error(t.grad, num)
        assert err < tol, f"relative gradient error {err:.2e}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
