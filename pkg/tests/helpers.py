"""Shared test oracles: central finite differences and relative error.

These stay independent of the autodiff tape on purpose; they only re-run
forward computations on perturbed plain numpy buffers.
"""

import numpy as np


def rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def central_diff_full(f, x, h=1e-5):
    """Dense central-difference gradient of scalar f over array x."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def central_diff_coords(loss_fn, buf, coords, h=1e-5):
    """Central differences of loss_fn() at selected flat coordinates of buf.

    buf is mutated in place and restored; loss_fn() must recompute the loss
    from the current buffer contents.
    """
    flat = buf.reshape(-1)
    out = []
    for c in coords:
        orig = flat[c]
        flat[c] = orig + h
        fp = loss_fn()
        flat[c] = orig - h
        fm = loss_fn()
        flat[c] = orig
        out.append((fp - fm) / (2.0 * h))
    return np.asarray(out)
