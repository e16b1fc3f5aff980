"""Differentiable-math kernel: flat parameter storage, dense MLPs,
multi-resolution hash encoding, Adam, and finite-difference checking.
All gradients are analytic and hand-derived."""

from .params import ParamStore, GradBuffer
from .mlp import Mlp, sigmoid, softplus, activation_forward, activation_backward
from .hashgrid import HashGrid
from .adam import Adam, GradientNanError
from .gradcheck import grad_check, sample_indices
from .encoders import (sinusoid_encode, sinusoid_backward, sinusoid_dim,
                       sh_encode, sh_backward, SH_DIM)

__all__ = [
    "ParamStore", "GradBuffer", "Mlp", "HashGrid", "Adam", "GradientNanError",
    "grad_check", "sample_indices", "sigmoid", "softplus",
    "activation_forward", "activation_backward",
    "sinusoid_encode", "sinusoid_backward", "sinusoid_dim",
    "sh_encode", "sh_backward", "SH_DIM",
]
