"""Fixed (non-learnable) encodings with analytic input gradients.

Sinusoidal positional features for positions/time, and a degree-3 real
spherical-harmonics basis for view directions.
"""

from __future__ import annotations

import numpy as np


def sinusoid_encode(x, n_freqs, include_input=True):
    """x: [B, D] -> (feat: [B, D*(include + 2*n_freqs)], cache).

    Features per input dim: x, sin(pi 2^k x), cos(pi 2^k x), k=0..n_freqs-1.
    """
    x = np.asarray(x)
    B, D = x.shape
    parts = [x] if include_input else []
    args = []
    for k in range(n_freqs):
        a = (np.pi * (2.0 ** k)) * x
        args.append(a)
        parts.append(np.sin(a))
        parts.append(np.cos(a))
    feat = np.concatenate(parts, axis=1) if parts else np.zeros((B, 0), dtype=x.dtype)
    return feat, (x.shape, args, include_input)


def sinusoid_backward(cache, dfeat):
    """Return dL/dx: [B, D]."""
    (B, D), args, include_input = cache
    dfeat = np.asarray(dfeat)
    off = 0
    dx = np.zeros((B, D), dtype=dfeat.dtype)
    if include_input:
        dx += dfeat[:, :D]
        off = D
    for k, a in enumerate(args):
        scale = np.pi * (2.0 ** k)
        dsin = dfeat[:, off:off + D]
        dcos = dfeat[:, off + D:off + 2 * D]
        dx += scale * (dsin * np.cos(a) - dcos * np.sin(a))
        off += 2 * D
    return dx


def sinusoid_dim(d, n_freqs, include_input=True):
    return d * ((1 if include_input else 0) + 2 * n_freqs)


# real SH constants, degrees 0..3
_C0 = 0.28209479177387814
_C1 = 0.48860251190291992
_C2a, _C2b, _C2c = 1.0925484305920792, 0.94617469575755997, 0.31539156525251999
_C3a, _C3b, _C3c, _C3d = (0.59004358992664352, 2.8906114426405538,
                          0.45704579946446572, 0.37317633259011546)
_C3e = 1.4453057213202769

SH_DIM = 16


def sh_encode(d):
    """Degree-3 spherical-harmonics basis of unit directions d: [B,3] -> [B,16]."""
    d = np.asarray(d)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    out = np.empty((d.shape[0], 16), dtype=d.dtype)
    out[:, 0] = _C0
    out[:, 1] = -_C1 * y
    out[:, 2] = _C1 * z
    out[:, 3] = -_C1 * x
    out[:, 4] = _C2a * x * y
    out[:, 5] = -_C2a * y * z
    out[:, 6] = _C2b * z * z - _C2c
    out[:, 7] = -_C2a * x * z
    out[:, 8] = 0.5 * _C2a * (x * x - y * y)
    out[:, 9] = _C3a * y * (y * y - 3.0 * x * x)
    out[:, 10] = _C3b * x * y * z
    out[:, 11] = _C3c * y * (1.0 - 5.0 * z * z)
    out[:, 12] = _C3d * z * (5.0 * z * z - 3.0)
    out[:, 13] = _C3c * x * (1.0 - 5.0 * z * z)
    out[:, 14] = _C3e * z * (x * x - y * y)
    out[:, 15] = _C3a * x * (3.0 * y * y - x * x)
    return out


def sh_backward(d, dfeat):
    """Return dL/dd: [B, 3] for the basis above."""
    d = np.asarray(d)
    g = np.asarray(dfeat)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    dx = (-_C1 * g[:, 3] + _C2a * y * g[:, 4] - _C2a * z * g[:, 7]
          + _C2a * x * g[:, 8] - 6.0 * _C3a * x * y * g[:, 9]
          + _C3b * y * z * g[:, 10] + _C3c * (1.0 - 5.0 * z * z) * g[:, 13]
          + 2.0 * _C3e * x * z * g[:, 14] + _C3a * (3.0 * y * y - 3.0 * x * x) * g[:, 15])
    dy = (-_C1 * g[:, 1] + _C2a * x * g[:, 4] - _C2a * z * g[:, 5]
          - _C2a * y * g[:, 8] + _C3a * (3.0 * y * y - 3.0 * x * x) * g[:, 9]
          + _C3b * x * z * g[:, 10] + _C3c * (1.0 - 5.0 * z * z) * g[:, 11]
          - 2.0 * _C3e * y * z * g[:, 14] + 6.0 * _C3a * x * y * g[:, 15])
    dz = (_C1 * g[:, 2] - _C2a * y * g[:, 5] + 2.0 * _C2b * z * g[:, 6]
          - _C2a * x * g[:, 7] + _C3b * x * y * g[:, 10]
          - 10.0 * _C3c * y * z * g[:, 11] + _C3d * (15.0 * z * z - 3.0) * g[:, 12]
          - 10.0 * _C3c * x * z * g[:, 13] + _C3e * (x * x - y * y) * g[:, 14])
    return np.stack([dx, dy, dz], axis=1)
