"""Central finite-difference checks shared by the gradient tests."""
import numpy as np

from progdistill import engine as E


def numeric_grad(loss_fn, tensor, h=1e-5):
    g = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = loss_fn().item()
        flat[i] = old - h
        down = loss_fn().item()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def max_rel_error(loss_fn, params, h=1e-5, floor=1e-6):
    """Largest |analytic - numeric| / max(|analytic| + |numeric|, floor) over all entries."""
    E.zero_grad(params)
    E.backward(loss_fn())
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        numeric = numeric_grad(loss_fn, p, h)
        denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst
