"""Central finite-difference checks for the autodiff engine."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad


def numerical_gradients(loss_fn, leaves, h: float = 1e-5) -> list[np.ndarray]:
    """Central differences of ``loss_fn()`` (a float) w.r.t. every entry of ``leaves``.

    Leaf data is perturbed in place and restored afterwards.
    """
    out = []
    for leaf in leaves:
        flat = leaf.data.reshape(-1)
        g = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn()
            flat[i] = orig - h
            fm = loss_fn()
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * h)
        out.append(g.reshape(leaf.shape))
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Sup-norm error scaled by the larger sup-norm of the two gradients."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def gradcheck(fn, leaves, h: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between backward and finite differences.

    ``fn()`` builds the graph from ``leaves`` and returns a tensor of any
    shape; it is reduced to a scalar with fixed random weights so that no
    component of the output can cancel out.
    """
    out = fn()
    weights = np.random.default_rng(seed).standard_normal(out.shape)
    loss = ad.sum(ad.mul(out, weights))
    grads = ad.backward(loss, params=leaves)
    analytic = [grads[leaf.id] for leaf in leaves]

    def loss_fn():
        with ad.no_grad():
            return float((fn().data * weights).sum())

    numeric = numerical_gradients(loss_fn, leaves, h)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))
