"""Flat parameter storage with named views.

All learnable state of one sub-scene lives in a single contiguous buffer so
that optimizer steps, gradient accumulation, checkpointing and finite
difference probing all operate on one flat array. Named views into the
buffer are plain numpy views: writing through a view mutates the buffer.
"""

from __future__ import annotations

import numpy as np


class ParamStore:
    """Registry of named parameter tensors backed by one flat buffer.

    Usage is two-phase: ``declare`` every tensor, then ``finalize()`` once.
    After finalization ``view(name)`` returns a stable numpy view and
    ``flat`` is the full buffer.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._spec = []          # (name, shape, init array or None)
        self._layout = {}        # name -> (offset, shape)
        self.flat = None

    def declare(self, name, shape, init=None):
        if self.flat is not None:
            raise RuntimeError("ParamStore already finalized")
        if name in [s[0] for s in self._spec]:
            raise ValueError(f"duplicate parameter name: {name}")
        self._spec.append((name, tuple(shape), init))

    def finalize(self):
        if self.flat is not None:
            raise RuntimeError("ParamStore already finalized")
        total = sum(int(np.prod(shape)) for _, shape, _ in self._spec)
        self.flat = np.zeros(total, dtype=self.dtype)
        off = 0
        for name, shape, init in self._spec:
            n = int(np.prod(shape))
            self._layout[name] = (off, shape)
            if init is not None:
                self.flat[off:off + n] = np.asarray(init, dtype=self.dtype).ravel()
            off += n
        return self

    @property
    def size(self):
        return 0 if self.flat is None else self.flat.size

    def view(self, name):
        off, shape = self._layout[name]
        n = int(np.prod(shape))
        return self.flat[off:off + n].reshape(shape)

    def slice_of(self, name):
        off, shape = self._layout[name]
        return off, off + int(np.prod(shape))

    def names(self):
        return list(self._layout.keys())

    def layout(self):
        """JSON-friendly description of the buffer layout."""
        return [
            {"name": name, "offset": off, "shape": list(shape)}
            for name, (off, shape) in self._layout.items()
        ]

    def new_grad(self):
        return GradBuffer(self)

    def check_finite(self):
        if not np.all(np.isfinite(self.flat)):
            bad = int(np.sum(~np.isfinite(self.flat)))
            raise FloatingPointError(f"{bad} non-finite parameter entries")


class GradBuffer:
    """Gradient buffer aligned one-to-one with a ParamStore's flat buffer."""

    def __init__(self, store: ParamStore):
        if store.flat is None:
            raise RuntimeError("ParamStore must be finalized first")
        self.store = store
        self.flat = np.zeros(store.size, dtype=store.dtype)

    def view(self, name):
        off, shape = self.store._layout[name]
        n = int(np.prod(shape))
        return self.flat[off:off + n].reshape(shape)

    def zero(self):
        self.flat[:] = 0

    def add(self, other: "GradBuffer"):
        self.flat += other.flat
        return self
