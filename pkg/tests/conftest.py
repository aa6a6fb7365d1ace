import numpy as np
import pytest

from rigkit.geom import dq_normalize
from rigkit.skeleton import KinematicTree


def rel_err(analytic, numeric, floor=1e-6):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def central_diff(f, arr, idx, eps):
    old = arr[idx]
    arr[idx] = old + eps
    fp = f()
    arr[idx] = old - eps
    fm = f()
    arr[idx] = old
    return (fp - fm) / (2.0 * eps)


def check_grad(f, arr, grad, rng, samples=8, eps=1e-3, tol=1e-3):
    """Compare an analytic gradient against central differences on a random
    subset of coordinates. Returns the worst relative error seen."""
    flat = arr.reshape(-1)
    gflat = np.asarray(grad).reshape(-1)
    worst = 0.0
    for idx in rng.choice(flat.size, size=min(samples, flat.size),
                          replace=False):
        fd = central_diff(f, flat, idx, eps)
        worst = max(worst, rel_err(gflat[idx], fd))
    assert worst < tol, f"gradient mismatch: rel err {worst}"
    return worst


def random_unit_dqs(rng, k):
    return dq_normalize(rng.standard_normal((k, 8)))


def random_tree(rng, k):
    parent = np.full(k, -1, dtype=np.int64)
    for i in range(1, k):
        parent[i] = rng.integers(0, i)
    return KinematicTree(parent=parent, names=tuple(f"b{i}" for i in range(k)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
