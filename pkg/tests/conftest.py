import numpy as np
import pytest

from vidlang import tensor as T


@pytest.fixture(autouse=True)
def _debug_checks():
    # Finiteness checks on every forward op while tests run.
    T.set_debug(True)
    yield
    T.set_debug(False)


@pytest.fixture
def f64():
    with T.precision("f64"):
        yield


def finite_diff(f, arrays, step=1e-5):
    """Central differences of the scalar f() w.r.t. each numpy array in
    ``arrays`` (perturbed in place). Independent of the autodiff path."""
    outs = []
    for a in arrays:
        g = np.zeros_like(a)
        for i in range(a.size):
            idx = np.unravel_index(i, a.shape) if a.ndim else ()
            saved = a[idx]
            a[idx] = saved + step
            up = f()
            a[idx] = saved - step
            down = f()
            a[idx] = saved
            g[idx] = (up - down) / (2 * step)
        outs.append(g)
    return outs


def rel_err(a, b):
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
