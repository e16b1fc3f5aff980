"""Dense MLP with hand-derived reverse-mode gradients.

Layers are affine maps followed by an activation tag. Weights live in a
ParamStore; forward returns a cache of per-layer inputs and pre-activations
that the matching backward pass consumes.
"""

from __future__ import annotations

import numpy as np

from .params import ParamStore, GradBuffer

ACTIVATIONS = ("linear", "relu", "sigmoid", "softplus", "tanh")


def sigmoid(x):
    # numerically stable on both tails
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    return np.logaddexp(0.0, x)


def activation_forward(tag, z):
    if tag == "linear":
        return z
    if tag == "relu":
        return np.maximum(z, 0.0)
    if tag == "sigmoid":
        return sigmoid(z)
    if tag == "softplus":
        return softplus(z)
    if tag == "tanh":
        return np.tanh(z)
    raise ValueError(f"unknown activation {tag!r}")


def activation_backward(tag, z, da):
    """d(act(z))/dz times upstream da."""
    if tag == "linear":
        return da
    if tag == "relu":
        return da * (z > 0)
    if tag == "sigmoid":
        s = sigmoid(z)
        return da * s * (1.0 - s)
    if tag == "softplus":
        return da * sigmoid(z)
    if tag == "tanh":
        t = np.tanh(z)
        return da * (1.0 - t * t)
    raise ValueError(f"unknown activation {tag!r}")


def activation_backward_from_output(tag, a, da):
    """Like activation_backward but from the activation output, which is
    cheaper for relu/sigmoid/tanh (no transcendental recompute)."""
    if tag == "linear":
        return da
    if tag == "relu":
        return da * (a > 0)
    if tag == "sigmoid":
        return da * a * (1.0 - a)
    if tag == "tanh":
        return da * (1.0 - a * a)
    return None  # softplus: derivative needs the pre-activation


class Mlp:
    """MLP over a ParamStore. ``dims`` chains layer sizes; ``acts`` has one
    activation tag per layer (hidden layers usually "relu")."""

    def __init__(self, store: ParamStore, name: str, dims, acts, rng=None,
                 init_scale=None):
        if len(acts) != len(dims) - 1:
            raise ValueError("need one activation per layer")
        for a in acts:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        self.store = store
        self.name = name
        self.dims = list(dims)
        self.acts = list(acts)
        self.n_layers = len(dims) - 1
        for li in range(self.n_layers):
            fan_in, fan_out = dims[li], dims[li + 1]
            if rng is None:
                w0 = np.zeros((fan_out, fan_in))
                b0 = np.zeros(fan_out)
            else:
                # He-style init keeps relu stacks well scaled; small random
                # biases keep pre-activations away from the relu kink
                scale = init_scale if init_scale is not None else np.sqrt(2.0 / fan_in)
                w0 = rng.normal(0.0, scale, size=(fan_out, fan_in))
                b0 = rng.uniform(-0.05, 0.05, size=fan_out)
            store.declare(f"{name}.w{li}", (fan_out, fan_in), w0)
            store.declare(f"{name}.b{li}", (fan_out,), b0)

    @property
    def in_dim(self):
        return self.dims[0]

    @property
    def out_dim(self):
        return self.dims[-1]

    def forward(self, x):
        """x: [B, in] -> (y: [B, out], cache)."""
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[1] != self.dims[0]:
            raise ValueError(
                f"{self.name}: expected input [B, {self.dims[0]}], got {x.shape}")
        inputs, outputs = [], []
        a = x
        for li in range(self.n_layers):
            w = self.store.view(f"{self.name}.w{li}")
            b = self.store.view(f"{self.name}.b{li}")
            z = a @ w.T
            z += b
            inputs.append(a)
            # softplus needs its pre-activation for the backward pass;
            # the other activations differentiate from their output
            a = activation_forward(self.acts[li], z) \
                if self.acts[li] != "linear" else z
            outputs.append(z if self.acts[li] == "softplus" else a)
        return a, (inputs, outputs)

    def backward(self, cache, dy, grads: GradBuffer):
        """Accumulate parameter grads into ``grads``; return dL/dx."""
        inputs, outputs = cache
        if len(inputs) != self.n_layers:
            raise ValueError(f"{self.name}: stale or mismatched cache")
        da = np.asarray(dy)
        for li in reversed(range(self.n_layers)):
            act = self.acts[li]
            if act == "softplus":
                dz = activation_backward("softplus", outputs[li], da)
            else:
                dz = activation_backward_from_output(act, outputs[li], da)
            a_prev = inputs[li]
            gw = grads.view(f"{self.name}.w{li}")
            gb = grads.view(f"{self.name}.b{li}")
            gw += dz.T @ a_prev
            gb += dz.sum(axis=0)
            w = self.store.view(f"{self.name}.w{li}")
            da = dz @ w
        return da
