"""Central finite-difference gradient checking."""

from __future__ import annotations

import numpy as np


def grad_check(f, params, analytic, h=1e-4, indices=None, floor=1e-6):
    """Compare an analytic gradient against central differences.

    f: callable mapping a flat parameter vector to a scalar (deterministic).
    params: flat vector; it is perturbed in place and restored.
    analytic: flat vector, same length, the gradient to verify.
    indices: coordinates to probe; all of them when None.

    Returns max over probed coordinates of
        |numeric - analytic| / max(|numeric|, |analytic|, floor).
    """
    params = np.asarray(params, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    if params.shape != analytic.shape:
        raise ValueError("params and analytic gradient must have equal shapes")
    if indices is None:
        indices = range(params.size)
    worst = 0.0
    for i in indices:
        orig = params[i]
        params[i] = orig + h
        fp = float(f(params))
        params[i] = orig - h
        fm = float(f(params))
        params[i] = orig
        num = (fp - fm) / (2.0 * h)
        ana = analytic[i]
        rel = abs(num - ana) / max(abs(num), abs(ana), floor)
        if rel > worst:
            worst = rel
    return worst


def sample_indices(n, k, rng):
    """k distinct probe coordinates out of n (all of them if n <= k)."""
    if n <= k:
        return list(range(n))
    return list(rng.choice(n, size=k, replace=False))
