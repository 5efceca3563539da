import numpy as np
import pytest

from graphsasa.graph_store import Snapshot


def make_snapshot(pairs, n_users, n_items, index=0, start=0, end=86400):
    pairs = list(pairs)
    u = np.array([p[0] for p in pairs], dtype=np.int64)
    i = np.array([p[1] for p in pairs], dtype=np.int64)
    ts = np.full(len(pairs), start, dtype=np.int64)
    return Snapshot(index, start, end, u, i, ts, n_users, n_items)


def dense_normalized(pairs, n_users, n_items):
    """Loop-built D^-1/2 A D^-1/2 of the deduplicated bipartite graph."""
    m = n_users + n_items
    a = np.zeros((m, m))
    for u, i in pairs:
        a[u, n_users + i] = 1.0
        a[n_users + i, u] = 1.0
    deg = a.sum(axis=1)
    out = np.zeros_like(a)
    for r in range(m):
        for c in range(m):
            if a[r, c]:
                out[r, c] = 1.0 / np.sqrt(deg[r] * deg[c])
    return out


def with_passthrough(dense):
    """Dense operator with identity rows for isolated nodes."""
    out = dense.copy()
    iso = ~dense.any(axis=1)
    out[iso, iso] = 1.0
    return out


def central_diff(f, x, eps=1e-5):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        fp = f(x)
        x[idx] = orig - eps
        fm = f(x)
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * eps)
    return grad


def max_rel_err(analytic, numeric):
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def random_pairs(rng, n_users, n_items, n_edges):
    return [(int(rng.integers(n_users)), int(rng.integers(n_items))) for _ in range(n_edges)]


@pytest.fixture
def example_snapshot():
    # u0-i0, u0-i1, u1-i1
    return make_snapshot([(0, 0), (0, 1), (1, 1)], 2, 2)
