"""Sparse attention over feature tokens.

Three branches per query: compressed-block attention, top-n selected-block
attention, and a sliding window, combined by per-token sigmoid gates and an
output projection. Features are unordered, so the default is non-causal:
every query sees all N tokens. causal=True keeps the prefix-masked variant
for fidelity tests.

Gate order convention everywhere: index 0 = compression, 1 = selection,
2 = window.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NEG_INF = -1e30


@dataclass(frozen=True)
class NSAConfig:
    dim: int
    heads: int
    head_dim: int
    window: int
    compress_block: int
    compress_stride: int
    select_block: int
    num_selected: int
    causal: bool = False

    def __post_init__(self):
        if self.dim != self.heads * self.head_dim:
            raise ValueError(f"dim {self.dim} != heads {self.heads} * head_dim {self.head_dim}")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if not 1 <= self.compress_stride <= self.compress_block:
            raise ValueError("need 1 <= compress_stride <= compress_block")
        if not 2 <= self.select_block <= self.compress_block:
            raise ValueError("need 2 <= select_block <= compress_block")
        if self.num_selected < 1:
            raise ValueError("num_selected must be >= 1")
        if self.compress_block % self.compress_stride != 0:
            raise ValueError("compress_block must be a multiple of compress_stride")
        if self.select_block % self.compress_stride != 0:
            raise ValueError("select_block must be a multiple of compress_stride")

    def n_compressed(self, n_tokens: int) -> int:
        if n_tokens < self.compress_block:
            return 1  # single zero-padded block spanning all tokens
        return (n_tokens - self.compress_block) // self.compress_stride + 1

    def n_select_blocks(self, n_tokens: int) -> int:
        return -(-n_tokens // self.select_block)


@dataclass
class AttentionOutput:
    output: Tensor  # (B, N, D)
    branch_outputs: tuple  # (cmp, slc, win), each (B, N, D) before gating
    gates: Tensor  # (B, N, 3) in [0, 1]
    selected: np.ndarray  # (B, 1, N, n) chosen selection-block indices
    attn_weights: dict = field(default_factory=dict)  # branch -> np array
    attn_valid: dict = field(default_factory=dict)  # branch -> bool rows with a visible key


def init_nsa_params(cfg: NSAConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) weights, zero biases."""
    d, h, dh, l = cfg.dim, cfg.heads, cfg.head_dim, cfg.compress_block
    k = l * dh

    def u(fan_in, *shape):
        bound = np.sqrt(1.0 / fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    def z(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    params = {
        "w_q": u(d, d, h * dh),
        "w_k": u(d, d, h * dh),
        "w_v": u(d, d, h * dh),
        "w_o": u(h * dh, h * dh, d),
        "b_o": z(d),
        "gate_w": u(d, d, 3),
        "gate_b": z(3),
    }
    for branch in ("k", "v"):
        params[f"phi_{branch}_w1"] = u(k, h, k, k)
        params[f"phi_{branch}_b1"] = z(h, 1, k)
        params[f"phi_{branch}_w2"] = u(k, h, k, dh)
        params[f"phi_{branch}_b2"] = z(h, 1, dh)
        params[f"phi_{branch}_pos"] = u(dh, l, dh)
    return params


def _phi(params: dict, which: str) -> dict:
    return {key: params[f"phi_{which}_{key}"] for key in ("w1", "b1", "w2", "b2", "pos")}


def masked_softmax(logits: Tensor, valid: np.ndarray | None, axis: int = -1) -> Tensor:
    """Softmax over the keys marked valid; rows with no valid key become zeros."""
    if valid is None:
        return ad.softmax(logits, axis=axis)
    neg = np.where(valid, 0.0, NEG_INF)
    y = ad.softmax(logits + Tensor(neg), axis=axis)
    any_valid = valid.any(axis=axis, keepdims=True)
    if not any_valid.all():
        y = y * Tensor(any_valid.astype(np.float64))
    return y


def project_qkv(x: Tensor, params: dict, cfg: NSAConfig):
    """(B, N, D) -> three (B, H, N, D_H) projections, bias-free."""
    b, n, d = x.shape
    if d != cfg.dim:
        raise ValueError(f"input width {d} != config dim {cfg.dim}")

    def heads(w):
        flat = x @ w  # (B, N, H*Dh)
        return flat.reshape(b, n, cfg.heads, cfg.head_dim).swapaxes(1, 2)

    return heads(params["w_q"]), heads(params["w_k"]), heads(params["w_v"])


def full_attention(q: Tensor, k: Tensor, v: Tensor, causal: bool = False) -> Tensor:
    """Dense reference: softmax(q k^T / sqrt(D_H)) v over all (or prefix) keys."""
    if q.shape != k.shape or k.shape != v.shape:
        raise ValueError("q, k, v must share shape")
    n = q.shape[2]
    scale = 1.0 / np.sqrt(q.shape[3])
    logits = (q @ k.swapaxes(-1, -2)) * scale
    valid = None
    if causal:
        valid = np.tril(np.ones((n, n), dtype=bool))
    att = masked_softmax(logits, valid)
    return att @ v


def compress_tokens(kv: Tensor, cfg: NSAConfig, phi: dict | None) -> Tensor:
    """Aggregate strided token blocks into compressed tokens.

    Block i covers tokens [i*d, i*d + l); when N < l a single zero-padded
    block spans all tokens. phi is the per-head MLP parameter dict, or None
    for the plain block-mean reduction used as a test oracle.
    """
    b, h, n, dh = kv.shape
    l, d = cfg.compress_block, cfg.compress_stride
    m = cfg.n_compressed(n)
    if n >= l:
        idx = np.arange(m)[:, None] * d + np.arange(l)[None, :]
        blocks = ad.gather_blocks(kv, idx)  # (B, H, M, l, Dh)
    else:
        idx = np.concatenate([np.arange(n), np.zeros(l - n, dtype=np.intp)])[None, :]
        keep = np.zeros((1, l, 1))
        keep[0, :n, 0] = 1.0
        blocks = ad.gather_blocks(kv, idx) * Tensor(keep)
    if phi is None:
        return blocks.mean(axis=3)
    blocks = blocks + phi["pos"]  # (l, Dh) broadcasts over (B, H, M, l, Dh)
    flat = blocks.reshape(b, h, m, l * dh)
    hidden = ad.gelu(flat @ phi["w1"] + phi["b1"])  # per-head weights (H, K, K)
    return hidden @ phi["w2"] + phi["b2"]


def compression_scores(q: Tensor, k_cmp: Tensor, valid: np.ndarray | None = None) -> Tensor:
    """softmax(q k_cmp^T / sqrt(D_H)) over compressed keys; rows sum to 1."""
    scale = 1.0 / np.sqrt(q.shape[3])
    logits = (q @ k_cmp.swapaxes(-1, -2)) * scale
    return masked_softmax(logits, valid)


def selection_map_matrix(cfg: NSAConfig, n_cmp: int, n_slc: int) -> np.ndarray:
    """(n_cmp, n_slc) weights: entry [i, j] counts the (m, n) pairs with
    (l'/d)*j - m - n = i, m < l'/d, n < l/d. Out-of-range compressed indices
    contribute nothing, so a padded tail selection block scores 0."""
    ratio_sel = cfg.select_block // cfg.compress_stride
    ratio_cmp = cfg.compress_block // cfg.compress_stride
    w = np.zeros((n_cmp, n_slc))
    for j in range(n_slc):
        for m in range(ratio_sel):
            for n in range(ratio_cmp):
                i = ratio_sel * j - m - n
                if 0 <= i < n_cmp:
                    w[i, j] += 1.0
    return w


def map_selection_scores(p_cmp: np.ndarray, cfg: NSAConfig, n_tokens: int) -> np.ndarray:
    """Map compressed-block scores (B,H,N,N_cmp) to selection-block scores
    (B,H,N,N_slc). Identity when l' = l = d and the block grids coincide."""
    n_cmp = p_cmp.shape[-1]
    n_slc = cfg.n_select_blocks(n_tokens)
    return p_cmp @ selection_map_matrix(cfg, n_cmp, n_slc)


def select_blocks(
    p_slc: np.ndarray,
    k: Tensor,
    v: Tensor,
    cfg: NSAConfig,
    block_visible: np.ndarray | None = None,
):
    """Pick the top-n selection blocks per (batch, query) and gather their tokens.

    Scores are head-averaged first so all heads share one index set; ties
    break toward the lower block index; chosen blocks are gathered in
    ascending order so token order is preserved. Returns
    (indices (B,1,N,n), k_slc, v_slc (B,H,N,n*l',Dh), token positions, token validity).
    """
    b, _, n_q, n_slc = p_slc.shape
    n_tokens = k.shape[2]
    scores = p_slc.mean(axis=1)  # (B, N, N_slc)
    if block_visible is not None:
        scores = np.where(block_visible, scores, -np.inf)
    n_eff = cfg.num_selected
    if n_eff > n_slc:
        warnings.warn(f"num_selected {n_eff} > {n_slc} selection blocks; clamping")
        n_eff = n_slc
    top = np.argsort(-scores, axis=-1, kind="stable")[..., :n_eff]
    blocks = np.sort(top, axis=-1)  # (B, N, n_eff)
    lp = cfg.select_block
    tok = blocks[..., :, None] * lp + np.arange(lp)  # (B, N, n_eff, l')
    tok = tok.reshape(b, n_q, n_eff * lp)
    valid = tok < n_tokens
    if cfg.causal:
        valid &= tok <= np.arange(n_q)[None, :, None]
    tok_safe = np.clip(tok, 0, n_tokens - 1)
    k_slc = ad.gather_selected(k, tok_safe)
    v_slc = ad.gather_selected(v, tok_safe)
    return blocks[:, None, :, :], k_slc, v_slc, tok_safe, valid


def window_indices(n_tokens: int, w: int, causal: bool):
    """Per-query window token positions (N, w_eff) plus validity mask.

    Causal: tokens [max(0, t-w+1), t]. Non-causal: w tokens centered at t,
    shifted to stay inside [0, N); with w >= N every token is visible.
    """
    w_eff = min(w, n_tokens)
    t = np.arange(n_tokens)[:, None]
    s = np.arange(w_eff)[None, :]
    if causal:
        pos = t - (w_eff - 1) + s
        valid = pos >= 0
        return np.maximum(pos, 0), valid
    start = np.clip(t - (w_eff - 1) // 2, 0, n_tokens - w_eff)
    return start + s, np.ones((n_tokens, w_eff), dtype=bool)


def _per_query_attention(q: Tensor, keys: Tensor, values: Tensor, valid: np.ndarray | None):
    """q: (B,H,N,Dh); keys/values: (B,H,N,S,Dh). Returns ((B,H,N,Dh), weights)."""
    b, h, n, dh = q.shape
    s = keys.shape[3]
    scale = 1.0 / np.sqrt(dh)
    q_e = q.reshape(b, h, n, 1, dh)
    logits = (q_e @ keys.swapaxes(-1, -2)).reshape(b, h, n, s) * scale
    att = masked_softmax(logits, valid)
    out = (att.reshape(b, h, n, 1, s) @ values).reshape(b, h, n, dh)
    return out, att


def _merge_heads(t: Tensor) -> Tensor:
    b, h, n, dh = t.shape
    return t.swapaxes(1, 2).reshape(b, n, h * dh)


def gated_combine(branches: tuple, params: dict, x: Tensor):
    """gates = sigmoid(x gate_w + gate_b); output = W_o(sum_c g_c * branch_c) + b_o."""
    gates = ad.sigmoid(x @ params["gate_w"] + params["gate_b"])  # (B, N, 3)
    combined = (
        gates[:, :, 0:1] * branches[0] + gates[:, :, 1:2] * branches[1] + gates[:, :, 2:3] * branches[2]
    )
    return combined @ params["w_o"] + params["b_o"], gates


def nsa_forward(x: Tensor, params: dict, cfg: NSAConfig) -> AttentionOutput:
    b, n, _ = x.shape
    q, k, v = project_qkv(x, params, cfg)

    # compression branch; its attention weights also drive selection
    k_cmp = compress_tokens(k, cfg, _phi(params, "k"))
    v_cmp = compress_tokens(v, cfg, _phi(params, "v"))
    n_cmp = k_cmp.shape[2]
    cmp_valid = None
    if cfg.causal:
        block_end = np.arange(n_cmp) * cfg.compress_stride + cfg.compress_block
        cmp_valid = (block_end[None, :] <= np.arange(1, n + 1)[:, None]) if n >= cfg.compress_block else np.ones(
            (n, 1), dtype=bool
        )
    p_cmp = compression_scores(q, k_cmp, cmp_valid)
    cmp_out = p_cmp @ v_cmp

    # selection branch: indices come from detached compression scores
    p_slc = map_selection_scores(p_cmp.data, cfg, n)
    block_visible = None
    if cfg.causal:
        n_slc = cfg.n_select_blocks(n)
        block_visible = (np.arange(n_slc) * cfg.select_block)[None, None, :] <= np.arange(n)[None, :, None]
        block_visible = np.broadcast_to(block_visible, (b, n, n_slc))
    selected, k_slc, v_slc, _, tok_valid = select_blocks(p_slc, k, v, cfg, block_visible)
    slc_out, slc_att = _per_query_attention(q, k_slc, v_slc, tok_valid[:, None, :, :])

    # sliding-window branch
    win_idx, win_valid = window_indices(n, cfg.window, cfg.causal)
    k_win = ad.gather_blocks(k, win_idx)
    v_win = ad.gather_blocks(v, win_idx)
    win_mask = None if win_valid.all() else win_valid[None, None, :, :]
    win_out, win_att = _per_query_attention(q, k_win, v_win, win_mask)

    branches = (_merge_heads(cmp_out), _merge_heads(slc_out), _merge_heads(win_out))
    output, gates = gated_combine(branches, params, x)

    def rows_valid(mask, shape):
        if mask is None:
            return np.ones(shape, dtype=bool)
        return np.broadcast_to(mask.any(axis=-1), shape)

    h = cfg.heads
    return AttentionOutput(
        output=output,
        branch_outputs=branches,
        gates=gates,
        selected=selected,
        attn_weights={"cmp": p_cmp.data, "slc": slc_att.data, "win": win_att.data},
        attn_valid={
            "cmp": rows_valid(None if cmp_valid is None else cmp_valid[None, None, :, :], (b, h, n)),
            "slc": rows_valid(tok_valid[:, None, :, :], (b, h, n)),
            "win": rows_valid(win_mask, (b, h, n)),
        },
    )
