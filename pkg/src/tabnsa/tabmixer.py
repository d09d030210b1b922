"""Token/channel mixer block: Z = SiLU(GELU(MLP1(X^T))^T * MLP2(X)) + X.

Applied per sample on the (N, D) token-embedding matrix. MLP1 mixes along
the token axis (so it acts on X^T and its weight is N x N), MLP2 along the
channel axis (D x D). Each MLP is a single affine layer over a layer-normed
input with its own norm parameters.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LN_EPS = 1e-5


def init_tabmixer_params(n_tokens: int, dim: int, rng: np.random.Generator) -> dict[str, Tensor]:
    def u(fan_in, *shape):
        bound = np.sqrt(1.0 / fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    return {
        "w1": u(n_tokens, n_tokens, n_tokens),
        "b1": Tensor(np.zeros(n_tokens), requires_grad=True),
        "ln1_scale": Tensor(np.ones(n_tokens), requires_grad=True),
        "ln1_shift": Tensor(np.zeros(n_tokens), requires_grad=True),
        "w2": u(dim, dim, dim),
        "b2": Tensor(np.zeros(dim), requires_grad=True),
        "ln2_scale": Tensor(np.ones(dim), requires_grad=True),
        "ln2_shift": Tensor(np.zeros(dim), requires_grad=True),
    }


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Normalize the last axis to mean 0, variance 1 (eps 1e-5), then affine."""
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / ad.sqrt(var + LN_EPS) * scale + shift


def _affine_mix(x: Tensor, w: Tensor, b: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    # x: (..., K); w: (K, K) applied as LayerNorm(x) @ w^T + b
    return layer_norm(x, scale, shift) @ w.swapaxes(-1, -2) + b


def tabmixer_forward(x: Tensor, params: dict) -> Tensor:
    """x: (B, N, D) batch of per-sample token matrices; output same shape."""
    xt = x.swapaxes(-1, -2)  # (B, D, N): last axis is tokens
    token_mix = _affine_mix(xt, params["w1"], params["b1"], params["ln1_scale"], params["ln1_shift"])
    channel_mix = _affine_mix(x, params["w2"], params["b2"], params["ln2_scale"], params["ln2_shift"])
    fused = ad.silu(ad.gelu(token_mix).swapaxes(-1, -2) * channel_mix)
    return fused + x
