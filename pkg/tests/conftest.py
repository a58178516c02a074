import numpy as np
import pytest

from gridformer.tensor import Parameter, Tape, backward, finite_diff


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training probes")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = np.abs(a - b)
    return np.where(diff <= floor, 0.0, diff / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor))


def check_grads(fn, params, h=1e-6, tol=1e-4):
    """Compare tape gradients of scalar ``fn()`` with central differences."""
    for p in params:
        p.grad = None
    with Tape():
        out = fn()
    backward(out, params)
    for p in params:
        numeric = finite_diff(lambda _: fn(), p, h=h)
        err = rel_err(p.grad, numeric).max()
        assert err < tol, f"{p.path or p.shape}: max rel err {err:.3g}"


def param(rng, *shape, path=""):
    return Parameter(rng.standard_normal(shape), dtype=np.float64, path=path)
