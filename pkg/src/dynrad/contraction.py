"""Unbounded-scene contraction.

Points inside the unit ball pass through unchanged; outside, radii map as
r -> 2 - 1/r, so all of space lands in the open ball of radius 2. The map
is C1 across the unit sphere.
"""

from __future__ import annotations

import numpy as np


def contract(x):
    """x: [..., 3] -> contracted coordinates with norm < 2."""
    x = np.asarray(x)
    r = np.linalg.norm(x, axis=-1, keepdims=True)
    safe_r = np.maximum(r, 1e-12)
    scale = np.where(r <= 1.0, 1.0, (2.0 - 1.0 / safe_r) / safe_r)
    return x * scale


def contract_backward(x, dout):
    """Vector-Jacobian product of contract at x.

    Outside the unit ball the Jacobian is a I + b rhat rhat^T with
    a = (2 - 1/r)/r and b = (2/r^2 - a) ... derived from
    d/dx [(2/r - 1/r^2) x] = (2/r - 1/r^2) I + (-2/r^2 + 2/r^3) x xhat^T / 1.
    """
    x = np.asarray(x)
    dout = np.asarray(dout)
    r = np.linalg.norm(x, axis=-1, keepdims=True)
    inside = r <= 1.0
    safe_r = np.maximum(r, 1e-12)
    a = (2.0 * safe_r - 1.0) / (safe_r * safe_r)          # (2/r - 1/r^2)
    da_dr = (-2.0 * safe_r + 2.0) / (safe_r ** 3)          # -2/r^2 + 2/r^3
    rhat = x / safe_r
    radial = np.sum(rhat * dout, axis=-1, keepdims=True)
    dx_out = a * dout + da_dr * r * radial * rhat
    return np.where(inside, dout, dx_out)


def to_unit_cube(c):
    """Contracted coordinates (norm < 2) -> open unit cube."""
    return (c + 2.0) / 4.0


def unit_cube_backward(dout):
    return dout / 4.0
