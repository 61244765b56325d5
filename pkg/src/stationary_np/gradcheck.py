"""Central finite differences for checking tape gradients."""

from __future__ import annotations

import numpy as np

from . import tensor as T


def numerical_gradient(f, x, eps=1e-6, index=None):
    """d f / d x by central differences; ``f`` maps an ndarray to a float.

    ``index`` restricts the sweep to a list of flat positions (other entries are 0).
    """
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size) if index is None else index:
        old = flat[i]
        flat[i] = old + eps
        hi = f(x)
        flat[i] = old - eps
        lo = f(x)
        flat[i] = old
        gflat[i] = (hi - lo) / (2.0 * eps)
    return g


def relative_error(a, b):
    """||a - b|| / max(||a||, ||b||), 0 when both vanish."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if den == 0.0 else float(np.linalg.norm(a - b) / den)


def check_op(fn, *inputs, eps=1e-6):
    """Max relative error between tape and finite-difference gradients of sum(w * fn(*inputs)).

    A fixed random projection ``w`` turns tensor outputs into a scalar so every
    output entry contributes.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    rng = np.random.default_rng(0)
    w = None

    def scalar(*xs):
        nonlocal w
        out = T.as_tensor(fn(*xs))
        if w is None:
            w = rng.standard_normal(out.shape)
        return T.sum(out * w)

    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    with T.Tape() as tape:
        loss = scalar(*leaves)
    grads = T.backward(loss, tape)
    worst = 0.0
    for i, a in enumerate(arrays):

        def f(v, i=i):
            xs = [T.Tensor(v if j == i else arrays[j]) for j in range(len(arrays))]
            return float(scalar(*xs).data)

        worst = max(worst, relative_error(grads[leaves[i]], numerical_gradient(f, a, eps)))
    return worst
