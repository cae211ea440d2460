"""Central finite differences for gradient checks (double precision)."""

import numpy as np

STEP = 1e-4


def numeric_grad(f, x, step=STEP):
    """d f / d x for a scalar function of an array, perturbing ``x`` in place."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        fp = f()
        x[i] = old - step
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * step)
    return g


def rel_error(analytic, numeric):
    """Norm-wise relative error; element ratios on near-zero entries only measure FD rounding."""
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / den)
