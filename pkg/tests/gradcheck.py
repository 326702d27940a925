"""Finite-difference gradient oracle shared by the test modules.

The oracle perturbs raw numpy arrays in place and re-runs a closure, so it
is independent of the tape machinery it is used to check.
"""

import numpy as np


def finite_diff(f, arrays, h):
    """Central-difference gradients of scalar f() wrt each array in `arrays`.

    f must recompute the scalar from the (mutated) arrays on every call.
    """
    grads = []
    for arr in arrays:
        g = np.zeros(arr.shape, dtype=np.float64)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def rel_err(analytic, numeric):
    """Max absolute difference, scaled by the numeric gradient's magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(numeric).max(), 1e-12)
    return np.abs(analytic - numeric).max() / scale


def check_grads(build, arrays, h, tol):
    """Assert analytic grads from `build` match finite differences.

    `build` runs the forward pass from the current array contents and
    returns (loss_value, [analytic_grad_per_array]); finite differences
    re-run it discarding the grads.
    """
    _, analytic = build()
    numeric = finite_diff(lambda: build()[0], arrays, h)
    for name_idx, (a, n) in enumerate(zip(analytic, numeric)):
        err = rel_err(a, n)
        assert err < tol, f"array {name_idx}: rel err {err:.3e} >= {tol:g}"
