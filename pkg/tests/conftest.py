"""Shared finite-difference oracles; kept independent of the autodiff path."""

import numpy as np

from sharpmin.tensor import grad, loss_value


def finite_diff_grad(model, params, batch, h=1e-5):
    """Central-difference gradient of the batch loss, coordinate by coordinate."""
    flat = params.flatten()
    out = np.zeros_like(flat)
    for i in range(len(flat)):
        up, dn = flat.copy(), flat.copy()
        up[i] += h
        dn[i] -= h
        out[i] = (
            loss_value(model, params.unflatten(up), batch)
            - loss_value(model, params.unflatten(dn), batch)
        ) / (2 * h)
    return out


def finite_diff_hvp(model, params, batch, v, h=1e-5):
    """(grad(w + h v) - grad(w - h v)) / 2h."""
    vf = v.flatten()
    up = grad(model, params.unflatten(params.flatten() + h * vf), batch).flatten()
    dn = grad(model, params.unflatten(params.flatten() - h * vf), batch).flatten()
    return (up - dn) / (2 * h)


def rel_err(got, want):
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    scale = max(np.max(np.abs(want)), 1e-10)
    return float(np.max(np.abs(got - want)) / scale)
