"""Multi-resolution hash-grid encoding with trilinear interpolation.

Each level stores a table of feature vectors indexed by a spatial hash of
the integer cell corners. A query in the unit cube fetches the 8 corners of
its cell at every level and blends them trilinearly; features from all
levels are concatenated. Both the table gradient and the positional
gradient are analytic.

Corner hashing: h(i) = (ix*P0 xor iy*P1 xor iz*P2) mod T with the primes
P = (1, 2654435761, 805459861) and T a power of two, so collisions are
deterministic and reproducible across runs.

The inner loops are JIT-compiled with numba when available (a pure-numpy
fallback keeps results identical); set DYNRAD_NO_NUMBA=1 to force numpy.
"""

from __future__ import annotations

import os

import numpy as np

from .params import ParamStore, GradBuffer

HASH_PRIMES = (1, 2654435761, 805459861)

# corner offsets of a unit cell, x-major: index = cx*4 + cy*2 + cz
_CORNERS = np.array([[cx, cy, cz] for cx in (0, 1) for cy in (0, 1) for cz in (0, 1)],
                    dtype=np.int64)

_USE_NUMBA = os.environ.get("DYNRAD_NO_NUMBA", "") != "1"
if _USE_NUMBA:
    try:
        import numba
    except ImportError:        # pragma: no cover - numba present in CI env
        _USE_NUMBA = False

if _USE_NUMBA:
    @numba.njit(cache=True)
    def _fwd_kernel(x, res, mask, table, out):
        B = x.shape[0]
        F = table.shape[1]
        p1 = HASH_PRIMES[1]
        p2 = HASH_PRIMES[2]
        for b in range(B):
            fx = x[b, 0] * res
            fy = x[b, 1] * res
            fz = x[b, 2] * res
            ix = min(max(int(np.floor(fx)), 0), res - 1)
            iy = min(max(int(np.floor(fy)), 0), res - 1)
            iz = min(max(int(np.floor(fz)), 0), res - 1)
            ax = fx - ix
            ay = fy - iy
            az = fz - iz
            for fi in range(F):
                out[b, fi] = 0.0
            for cx in range(2):
                wx = ax if cx == 1 else 1.0 - ax
                hx = (ix + cx)
                for cy in range(2):
                    wy = ay if cy == 1 else 1.0 - ay
                    hy = (iy + cy) * p1
                    for cz in range(2):
                        wz = az if cz == 1 else 1.0 - az
                        h = (hx ^ hy ^ ((iz + cz) * p2)) & mask
                        w = wx * wy * wz
                        for fi in range(F):
                            out[b, fi] += w * table[h, fi]

    @numba.njit(cache=True)
    def _bwd_kernel(x, res, mask, table, dfeat, gtable, dx):
        B = x.shape[0]
        F = table.shape[1]
        p1 = HASH_PRIMES[1]
        p2 = HASH_PRIMES[2]
        for b in range(B):
            fx = x[b, 0] * res
            fy = x[b, 1] * res
            fz = x[b, 2] * res
            ix = min(max(int(np.floor(fx)), 0), res - 1)
            iy = min(max(int(np.floor(fy)), 0), res - 1)
            iz = min(max(int(np.floor(fz)), 0), res - 1)
            ax = fx - ix
            ay = fy - iy
            az = fz - iz
            gx = 0.0
            gy = 0.0
            gz = 0.0
            for cx in range(2):
                wx = ax if cx == 1 else 1.0 - ax
                sx = 1.0 if cx == 1 else -1.0
                hx = (ix + cx)
                for cy in range(2):
                    wy = ay if cy == 1 else 1.0 - ay
                    sy = 1.0 if cy == 1 else -1.0
                    hy = (iy + cy) * p1
                    for cz in range(2):
                        wz = az if cz == 1 else 1.0 - az
                        sz = 1.0 if cz == 1 else -1.0
                        h = (hx ^ hy ^ ((iz + cz) * p2)) & mask
                        w = wx * wy * wz
                        g = 0.0
                        for fi in range(F):
                            d = dfeat[b, fi]
                            gtable[h, fi] += w * d
                            g += table[h, fi] * d
                        gx += sx * wy * wz * g
                        gy += sy * wx * wz * g
                        gz += sz * wx * wy * g
            dx[b, 0] += res * gx
            dx[b, 1] += res * gy
            dx[b, 2] += res * gz


class HashGrid:
    """L-level hash encoding over [0,1]^3.

    table_size must be a power of two; per-level resolutions grow as
    floor(base_res * growth**level) and must be strictly increasing.
    """

    def __init__(self, store: ParamStore, name: str, n_levels=8, table_size=2 ** 14,
                 n_features=2, base_res=16, growth=1.5, rng=None, init_scale=1e-4):
        if table_size & (table_size - 1) != 0:
            raise ValueError("table_size must be a power of two")
        self.store = store
        self.name = name
        self.n_levels = n_levels
        self.table_size = table_size
        self.n_features = n_features
        self.resolutions = [int(np.floor(base_res * growth ** l)) for l in range(n_levels)]
        for lo, hi in zip(self.resolutions, self.resolutions[1:]):
            if hi <= lo:
                raise ValueError("per-level resolutions must strictly increase")
        for l in range(n_levels):
            if rng is None:
                t0 = np.zeros((table_size, n_features))
            else:
                t0 = rng.uniform(-init_scale, init_scale, size=(table_size, n_features))
            store.declare(f"{name}.level{l}", (table_size, n_features), t0)

    @property
    def out_dim(self):
        return self.n_levels * self.n_features

    def _hash(self, idx):
        """idx: [..., 3] int64 corner coordinates -> table slots."""
        h = idx[..., 0] * HASH_PRIMES[0]
        h = np.bitwise_xor(h, idx[..., 1] * HASH_PRIMES[1])
        h = np.bitwise_xor(h, idx[..., 2] * HASH_PRIMES[2])
        return np.bitwise_and(h, self.table_size - 1)

    def forward(self, x):
        """x: [B, 3] in [0,1]^3 -> (feat: [B, L*F], cache)."""
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[1] != 3:
            raise ValueError(f"{self.name}: expected [B, 3], got {x.shape}")
        if np.any(x < -1e-9) or np.any(x > 1.0 + 1e-9):
            raise ValueError(f"{self.name}: query outside the unit cube")
        B = x.shape[0]
        feats = np.empty((B, self.out_dim), dtype=x.dtype)
        F = self.n_features
        if _USE_NUMBA:
            xc = np.ascontiguousarray(x)
            for l, res in enumerate(self.resolutions):
                table = self.store.view(f"{self.name}.level{l}")
                _fwd_kernel(xc, res, self.table_size - 1, table,
                            feats[:, l * F:(l + 1) * F])
            return feats, xc
        for l, res in enumerate(self.resolutions):
            pos = x * res
            i0 = np.floor(pos).astype(np.int64)
            np.clip(i0, 0, res - 1, out=i0)
            f = pos - i0                                   # [B,3] in [0,1]
            corners = i0[:, None, :] + _CORNERS[None, :, :]  # [B,8,3]
            slots = self._hash(corners)                     # [B,8]
            w = self._weights(f)
            table = self.store.view(f"{self.name}.level{l}")
            feats[:, l * F:(l + 1) * F] = \
                np.matmul(w[:, None, :], table[slots])[:, 0, :]
        return feats, x

    @staticmethod
    def _axis_weights(f):
        """[B,2] (1-f, f) per axis; corner order is x-major (x*4+y*2+z)."""
        one = 1.0 - f
        wx = np.stack([one[:, 0], f[:, 0]], axis=1)
        wy = np.stack([one[:, 1], f[:, 1]], axis=1)
        wz = np.stack([one[:, 2], f[:, 2]], axis=1)
        return wx, wy, wz

    @classmethod
    def _weights(cls, f):
        wx, wy, wz = cls._axis_weights(f)
        B = f.shape[0]
        return (wx[:, :, None, None] * wy[:, None, :, None]
                * wz[:, None, None, :]).reshape(B, 8)

    def backward(self, cache, dfeat, grads: GradBuffer):
        """Scatter table grads, return positional grad dL/dx: [B, 3].

        Must run before the tables are updated (corner features are
        re-read from the store rather than cached)."""
        x = cache
        dfeat = np.asarray(dfeat)
        B = dfeat.shape[0]
        dx = np.zeros((B, 3), dtype=dfeat.dtype)
        F = self.n_features
        if _USE_NUMBA:
            for l, res in enumerate(self.resolutions):
                table = self.store.view(f"{self.name}.level{l}")
                gtable = grads.view(f"{self.name}.level{l}")
                _bwd_kernel(x, res, self.table_size - 1, table,
                            np.ascontiguousarray(dfeat[:, l * F:(l + 1) * F]),
                            gtable, dx)
            return dx
        for l, res in enumerate(self.resolutions):
            pos = x * res
            i0 = np.floor(pos).astype(np.int64)
            np.clip(i0, 0, res - 1, out=i0)
            f = pos - i0
            corners = i0[:, None, :] + _CORNERS[None, :, :]
            slots = self._hash(corners)
            df_l = dfeat[:, l * F:(l + 1) * F]              # [B,F]
            wx, wy, wz = self._axis_weights(f)
            w = (wx[:, :, None, None] * wy[:, None, :, None]
                 * wz[:, None, None, :]).reshape(B, 8)
            table = self.store.view(f"{self.name}.level{l}")
            corner_feats = table[slots]                     # [B,8,F]
            # table gradient: one bincount per feature column is much faster
            # than np.add.at on large batches
            gtable = grads.view(f"{self.name}.level{l}")
            contrib = w[:, :, None] * df_l[:, None, :]      # [B,8,F]
            flat_slots = slots.ravel()
            for fi in range(F):
                gtable[:, fi] += np.bincount(
                    flat_slots, weights=contrib[:, :, fi].ravel(),
                    minlength=self.table_size).astype(gtable.dtype)
            # positional gradient via the structured [2,2,2] corner layout:
            # d/dx sums (upper - lower) faces times the other axes' weights
            g3 = np.matmul(corner_feats, df_l[:, :, None])[:, :, 0] \
                .reshape(B, 2, 2, 2)
            gx = g3[:, 1] - g3[:, 0]                        # [B,2,2] over (y,z)
            gy = g3[:, :, 1, :] - g3[:, :, 0, :]            # over (x,z)
            gz = g3[:, :, :, 1] - g3[:, :, :, 0]            # over (x,y)
            dx[:, 0] += res * np.sum(gx * (wy[:, :, None] * wz[:, None, :]),
                                     axis=(1, 2))
            dx[:, 1] += res * np.sum(gy * (wx[:, :, None] * wz[:, None, :]),
                                     axis=(1, 2))
            dx[:, 2] += res * np.sum(gz * (wx[:, :, None] * wy[:, None, :]),
                                     axis=(1, 2))
        return dx