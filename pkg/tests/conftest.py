import numpy as np
import pytest

from apecopy import tensor as T


def finite_diff_grads(build_loss, leaves, step=1e-5):
    """Central finite differences of a scalar loss w.r.t. float64 leaves.

    ``build_loss`` must rebuild the graph from the leaves' current data on
    every call (tape-style graphs are single-use).
    """
    grads = []
    for leaf in leaves:
        assert leaf.dtype == np.float64, "finite differences need float64 headroom"
        g = np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = build_loss().item()
            flat[i] = orig - step
            down = build_loss().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * step)
        grads.append(g)
    return grads


def check_gradients(build_loss, leaves, rtol=1e-4, atol=1e-7, step=1e-5):
    """Backward pass vs central finite differences on every leaf entry."""
    for leaf in leaves:
        leaf.zero_grad()
    loss = build_loss()
    loss.backward()
    numeric = finite_diff_grads(build_loss, leaves, step=step)
    for leaf, num in zip(leaves, numeric):
        assert leaf.grad is not None, "leaf missed by backward sweep"
        np.testing.assert_allclose(leaf.grad, num, rtol=rtol, atol=atol)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def f64(rng, *shape, requires_grad=True, scale=1.0):
    return T.tensor(rng.normal(scale=scale, size=shape), requires_grad=requires_grad, dtype=np.float64)
