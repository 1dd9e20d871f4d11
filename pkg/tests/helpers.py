"""Shared test utilities: finite-difference gradient oracle."""

import numpy as np

from divae import autodiff as ad


def numeric_grad(f, arrays, i, eps=1e-4):
    """Central differences of scalar ``f(*arrays)`` w.r.t. ``arrays[i]``."""
    x = arrays[i]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        hi = f(*arrays)
        x[idx] = old - eps
        lo = f(*arrays)
        x[idx] = old
        g[idx] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def check_grads(build, arrays, eps=1e-4, floor=1e-6):
    """Max relative error between autodiff and central differences.

    ``build(*tensors)`` must return a scalar Tensor.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    grads = ad.backward(build(*leaves))

    def f(*xs):
        return float(build(*[ad.Tensor(x) for x in xs]).data)

    worst = 0.0
    for i, leaf in enumerate(leaves):
        num = numeric_grad(f, arrays, i, eps)
        worst = max(worst, rel_err(grads.get(leaf, np.zeros_like(arrays[i])), num, floor))
    return worst


def param_grad_check(loss_fn, params: dict, eps=1e-4, floor=1e-6, max_coords=40, seed=0):
    """Finite-difference check of a loss over model parameter Tensors (subsampled coordinates)."""
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    grads = ad.backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        g = grads.get(p, np.zeros_like(p.data))
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(max_coords, flat.size), replace=False)
        for j in picks:
            old = flat[j]
            flat[j] = old + eps
            hi = float(loss_fn().data)
            flat[j] = old - eps
            lo = float(loss_fn().data)
            flat[j] = old
            num = (hi - lo) / (2 * eps)
            worst = max(worst, rel_err(g.reshape(-1)[j], num, floor))
    return worst
