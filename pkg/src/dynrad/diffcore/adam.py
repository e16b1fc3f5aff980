"""Adam over a flat parameter buffer."""

from __future__ import annotations

import numpy as np


class GradientNanError(RuntimeError):
    """Raised when a gradient buffer contains non-finite entries."""


class Adam:
    """Standard Adam with bias correction on a flat float buffer.

    The optimizer only operates on the slice [lo, hi) of the buffer, so a
    single ParamStore can be driven by several Adam instances with
    different learning rates (pose vs field parameters).
    """

    def __init__(self, lr=1e-2, beta1=0.9, beta2=0.999, eps=1e-8,
                 size=None, lo=0, hi=None, dtype=np.float64):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        if size is None:
            raise ValueError("size required")
        self.lo = lo
        self.hi = size if hi is None else hi
        n = self.hi - self.lo
        self.m = np.zeros(n, dtype=dtype)
        self.v = np.zeros(n, dtype=dtype)

    def step(self, params, grads, lr_scale=1.0):
        """One update of params[lo:hi] in place. lr_scale multiplies the
        base learning rate (used by the decay schedules); 0 skips the
        update entirely so frozen groups stay bit-identical."""
        if lr_scale == 0.0:
            return
        g = grads[self.lo:self.hi]
        if not np.all(np.isfinite(g)):
            bad = int(np.sum(~np.isfinite(g)))
            raise GradientNanError(
                f"aborting step: {bad}/{g.size} non-finite gradient entries")
        self.t += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * g
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * (g * g)
        mhat = self.m / (1.0 - self.beta1 ** self.t)
        vhat = self.v / (1.0 - self.beta2 ** self.t)
        params[self.lo:self.hi] -= (self.lr * lr_scale) * mhat / (np.sqrt(vhat) + self.eps)

    def state_dict(self):
        return {"t": self.t, "lr": self.lr, "beta1": self.beta1,
                "beta2": self.beta2, "eps": self.eps,
                "lo": self.lo, "hi": self.hi}

    def buffers(self):
        """Moment buffers, in checkpoint order."""
        return [self.m, self.v]

    def load_state(self, state, m, v):
        self.t = int(state["t"])
        self.lr = float(state["lr"])
        self.beta1 = float(state["beta1"])
        self.beta2 = float(state["beta2"])
        self.eps = float(state["eps"])
        self.lo = int(state["lo"])
        self.hi = int(state["hi"])
        self.m = np.asarray(m, dtype=self.m.dtype).copy()
        self.v = np.asarray(v, dtype=self.v.dtype).copy()
