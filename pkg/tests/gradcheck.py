"""Central-difference oracle shared by the gradient tests."""

import numpy as np

H = 1e-4


def rel_err(analytic, numeric, floor=1e-6):
    a = np.asarray(analytic, float).ravel()
    n = np.asarray(numeric, float).ravel()
    scale = max(np.abs(n).max(), np.abs(a).max(), floor)
    return float(np.abs(a - n).max() / scale)


def central_diff(f, arrays, h=H):
    """Gradient of scalar ``f()`` with respect to every entry of ``arrays`` (edited in place)."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + h
            up = f()
            flat[j] = old - h
            dn = f()
            flat[j] = old
            g.reshape(-1)[j] = (up - dn) / (2 * h)
        out.append(g)
    return out


def min_preactivation(cache):
    return min(np.abs(c["pre"]).min() for c in cache if "pre" in c)
