"""Model assembly: feature embedding, stacked attention/mixer blocks with a
choice of fusion, mean pooling, and a small MLP head.

Every trainable tensor lives in one flat dict keyed by a stable dotted path
("blocks.0.nsa.w_q", "head.b2", ...) so gradient checks, optimizers, and
serialization address parameters uniformly. `param_shapes` is the
closed-form manifest of those paths; `init_model_params` must produce
exactly the same paths and shapes.

FLOPs accounting conventions (forward pass only):
  - multiply-accumulate = 2 FLOPs; a matmul costs 2 * output elements *
    contraction length
  - element-wise add / multiply / divide = 1 FLOP per output element
  - activations (GELU, SiLU, sigmoid) = 1 FLOP per element
  - softmax = 5 FLOPs per logit element, masked or unmasked alike; the
    additive-mask arithmetic is folded into that flat rate
  - layer norm = 5 FLOPs per normalized element
  - mean over an axis of length k = k FLOPs per output element
  - index gathers, sorts, comparisons, and mask construction are free
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nsa_attention import NSAConfig, init_nsa_params, nsa_forward
from .tabmixer import init_tabmixer_params, tabmixer_forward

FUSION_VARIANTS = ("o", "m", "c", "r")
CHECKPOINT_VERSION = 1

MAC_FLOPS = 2
SOFTMAX_FLOPS_PER_ELEMENT = 5
NORM_FLOPS_PER_ELEMENT = 5
ACT_FLOPS_PER_ELEMENT = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description. `num_classes` is ignored when `regression`
    is set; the head then emits a single linear output."""

    nsa: NSAConfig
    num_tokens: int
    num_classes: int = 2
    regression: bool = False
    hidden_head: int = 64
    num_blocks: int = 1
    fusion: str = "o"
    feature_id_embedding: bool = True

    def __post_init__(self):
        if self.num_tokens < 1:
            raise ValueError("num_tokens must be >= 1")
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if self.hidden_head < 1:
            raise ValueError("hidden_head must be >= 1")
        if self.fusion not in FUSION_VARIANTS:
            raise ValueError(f"unknown fusion variant {self.fusion!r}; expected one of {FUSION_VARIANTS}")
        if not self.regression and self.num_classes < 2:
            raise ValueError("classification needs num_classes >= 2")

    @property
    def output_dim(self) -> int:
        return 1 if self.regression else self.num_classes

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        nsa = NSAConfig(**d["nsa"])
        rest = {k: v for k, v in d.items() if k != "nsa"}
        return ModelConfig(nsa=nsa, **rest)


def _subview(params: dict, prefix: str) -> dict:
    # shares the underlying Tensors, so gradients land in the parent dict
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Closed-form path -> shape manifest, in serialization order."""
    d, h, dh = config.nsa.dim, config.nsa.heads, config.nsa.head_dim
    l = config.nsa.compress_block
    k = l * dh
    n = config.num_tokens
    shapes: dict[str, tuple[int, ...]] = {"embed.weight": (d,), "embed.bias": (d,)}
    if config.feature_id_embedding:
        shapes["feature_id"] = (n, d)
    for i in range(config.num_blocks):
        p = f"blocks.{i}."
        shapes[p + "nsa.w_q"] = (d, h * dh)
        shapes[p + "nsa.w_k"] = (d, h * dh)
        shapes[p + "nsa.w_v"] = (d, h * dh)
        shapes[p + "nsa.w_o"] = (h * dh, d)
        shapes[p + "nsa.b_o"] = (d,)
        shapes[p + "nsa.gate_w"] = (d, 3)
        shapes[p + "nsa.gate_b"] = (3,)
        for branch in ("k", "v"):
            shapes[p + f"nsa.phi_{branch}_w1"] = (h, k, k)
            shapes[p + f"nsa.phi_{branch}_b1"] = (h, 1, k)
            shapes[p + f"nsa.phi_{branch}_w2"] = (h, k, dh)
            shapes[p + f"nsa.phi_{branch}_b2"] = (h, 1, dh)
            shapes[p + f"nsa.phi_{branch}_pos"] = (l, dh)
        shapes[p + "mixer.w1"] = (n, n)
        shapes[p + "mixer.b1"] = (n,)
        shapes[p + "mixer.ln1_scale"] = (n,)
        shapes[p + "mixer.ln1_shift"] = (n,)
        shapes[p + "mixer.w2"] = (d, d)
        shapes[p + "mixer.b2"] = (d,)
        shapes[p + "mixer.ln2_scale"] = (d,)
        shapes[p + "mixer.ln2_shift"] = (d,)
        if config.fusion == "m":
            shapes[p + "fuse.w1"] = (d, d)
            shapes[p + "fuse.b1"] = (d,)
            shapes[p + "fuse.w2"] = (d, d)
            shapes[p + "fuse.b2"] = (d,)
        elif config.fusion == "c":
            shapes[p + "fuse.w"] = (2 * d, d)
            shapes[p + "fuse.b"] = (d,)
    shapes["head.w1"] = (d, config.hidden_head)
    shapes["head.b1"] = (config.hidden_head,)
    shapes["head.w2"] = (config.hidden_head, config.output_dim)
    shapes["head.b2"] = (config.output_dim,)
    return shapes


def init_model_params(config: ModelConfig, rng: np.random.Generator | int) -> dict[str, Tensor]:
    """Uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) weights, zero biases.

    The feature-identity table is treated as a linear map from a one-hot
    feature index, so its fan-in is num_tokens.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    d = config.nsa.dim
    n = config.num_tokens

    def u(fan_in, *shape):
        bound = np.sqrt(1.0 / fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    def z(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    params: dict[str, Tensor] = {"embed.weight": u(1, d), "embed.bias": z(d)}
    if config.feature_id_embedding:
        params["feature_id"] = u(n, n, d)
    for i in range(config.num_blocks):
        p = f"blocks.{i}."
        for key, t in init_nsa_params(config.nsa, rng).items():
            params[p + "nsa." + key] = t
        for key, t in init_tabmixer_params(n, d, rng).items():
            params[p + "mixer." + key] = t
        if config.fusion == "m":
            params[p + "fuse.w1"] = u(d, d, d)
            params[p + "fuse.b1"] = z(d)
            params[p + "fuse.w2"] = u(d, d, d)
            params[p + "fuse.b2"] = z(d)
        elif config.fusion == "c":
            params[p + "fuse.w"] = u(2 * d, 2 * d, d)
            params[p + "fuse.b"] = z(d)
    params["head.w1"] = u(d, d, config.hidden_head)
    params["head.b1"] = z(config.hidden_head)
    params["head.w2"] = u(config.hidden_head, config.hidden_head, config.output_dim)
    params["head.b2"] = z(config.output_dim)
    return params


def embed_features(x: np.ndarray, params: dict) -> Tensor:
    """(B, N) feature matrix -> (B, N, D) tokens: x_i * W_e + b_e, plus the
    per-feature identity vector when the table is present."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a (batch, features) matrix, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError("feature matrix contains non-finite values")
    tokens = Tensor(x[:, :, None]) * params["embed.weight"] + params["embed.bias"]
    if "feature_id" in params:
        fid = params["feature_id"]
        if fid.shape[0] != x.shape[1]:
            raise ValueError(f"feature_id table has {fid.shape[0]} rows, input has {x.shape[1]} features")
        tokens = tokens + fid
    return tokens


def fuse(y: Tensor, z: Tensor | None, variant: str, params: dict) -> Tensor:
    """Combine attention output y with mixer output z.

    o: y + z. m: two-layer GELU MLP on y + z. c: linear on concat(y, z).
    r: the mixer runs on y itself (z is ignored and may be None); the
    mixer's internal skip connection supplies the +y residual, so zeroed
    mixer MLPs make this variant return y exactly.
    """
    if variant == "o":
        return y + z
    if variant == "m":
        s = y + z
        hidden = ad.gelu(s @ params["fuse.w1"] + params["fuse.b1"])
        return hidden @ params["fuse.w2"] + params["fuse.b2"]
    if variant == "c":
        cat = ad.concatenate([y, z], axis=-1)
        return cat @ params["fuse.w"] + params["fuse.b"]
    if variant == "r":
        return tabmixer_forward(y, _subview(params, "mixer."))
    raise ValueError(f"unknown fusion variant {variant!r}; expected one of {FUSION_VARIANTS}")


def mean_pool(t: Tensor) -> Tensor:
    """(B, N, D) -> (B, D) arithmetic mean over the token axis."""
    return t.mean(axis=1)


def forward(x: np.ndarray, params: dict, config: ModelConfig) -> Tensor:
    """Logits (B, C), or (B, 1) for regression."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != config.num_tokens:
        raise ValueError(f"expected input shape (batch, {config.num_tokens}), got {x.shape}")
    if ("feature_id" in params) != config.feature_id_embedding:
        raise ValueError("feature_id table presence does not match config.feature_id_embedding")
    t = embed_features(x, params)
    for i in range(config.num_blocks):
        block = _subview(params, f"blocks.{i}.")
        y = nsa_forward(t, _subview(block, "nsa."), config.nsa).output
        if config.fusion == "r":
            t = fuse(y, None, "r", block)
        else:
            z = tabmixer_forward(t, _subview(block, "mixer."))
            t = fuse(y, z, config.fusion, block)
    pooled = mean_pool(t)
    hidden = ad.gelu(pooled @ params["head.w1"] + params["head.b1"])
    return hidden @ params["head.w2"] + params["head.b2"]


def count_params(config: ModelConfig) -> int:
    """Exact trainable-scalar count; itemization available via param_shapes."""
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


def count_flops(config: ModelConfig, batch_size: int) -> tuple[int, dict[str, int]]:
    """Forward-pass FLOPs under the module's documented conventions.

    Returns (total, breakdown). Breakdown keys are per-site components;
    "attention_computation" is a rollup of attention_selection +
    attention_window (the per-query sparse attention work) and is not part
    of the total. Per-block components are summed over all blocks.
    """
    nsa = config.nsa
    b = int(batch_size)
    n = config.num_tokens
    d, h, dh = nsa.dim, nsa.heads, nsa.head_dim
    hd = h * dh
    l = nsa.compress_block
    kk = l * dh
    m = nsa.n_compressed(n)
    n_slc = nsa.n_select_blocks(n)
    s_sel = min(nsa.num_selected, n_slc) * nsa.select_block
    w_eff = min(nsa.window, n)
    blocks = config.num_blocks
    mac = MAC_FLOPS
    sm = SOFTMAX_FLOPS_PER_ELEMENT
    act = ACT_FLOPS_PER_ELEMENT

    comp: dict[str, int] = {}
    comp["embedding"] = 2 * b * n * d + (b * n * d if config.feature_id_embedding else 0)
    comp["qkv_proj"] = blocks * 3 * mac * b * n * d * hd

    phi = 0
    if n < l:
        phi += b * h * 1 * l * dh  # zero-pad keep-mask multiply
    phi += b * h * m * l * dh  # position add
    phi += mac * b * h * m * kk * kk + b * h * m * kk + act * b * h * m * kk
    phi += mac * b * h * m * dh * kk + b * h * m * dh
    comp["compression_phi"] = blocks * 2 * phi  # key and value compressors

    def branch_attention(s: int) -> int:
        # logits + scale + softmax + weighted value sum over s visible keys
        return mac * b * h * n * s * dh + b * h * n * s + sm * b * h * n * s + mac * b * h * n * dh * s

    comp["attention_compression"] = blocks * branch_attention(m)
    comp["selection_scoring"] = blocks * (mac * b * h * n * m * n_slc + b * n * n_slc * h)
    comp["attention_selection"] = blocks * branch_attention(s_sel)
    comp["attention_window"] = blocks * branch_attention(w_eff)
    comp["gate_mlp"] = blocks * (mac * b * n * d * 3 + b * n * 3 + act * b * n * 3)
    comp["branch_combine"] = blocks * 5 * b * n * hd
    comp["output_proj"] = blocks * (mac * b * n * hd * d + b * n * d)

    norm = NORM_FLOPS_PER_ELEMENT
    mixer = (
        norm * b * d * n + mac * b * d * n * n + b * d * n + act * b * d * n  # token path
        + norm * b * n * d + mac * b * n * d * d + b * n * d  # channel path
        + b * n * d + act * b * n * d + b * n * d  # multiply, SiLU, skip
    )
    comp["tabmixer"] = blocks * mixer

    if config.fusion == "o":
        fus = b * n * d
    elif config.fusion == "m":
        fus = b * n * d + mac * b * n * d * d + b * n * d + act * b * n * d + mac * b * n * d * d + b * n * d
    elif config.fusion == "c":
        fus = mac * b * n * (2 * d) * d + b * n * d
    else:  # r: the mixer pass on y is already charged under tabmixer
        fus = 0
    comp["fusion"] = blocks * fus

    comp["pool"] = b * d * n
    hid, c_out = config.hidden_head, config.output_dim
    comp["head"] = mac * b * d * hid + b * hid + act * b * hid + mac * b * hid * c_out + b * c_out

    total = sum(comp.values())
    comp["attention_computation"] = comp["attention_selection"] + comp["attention_window"]
    return total, comp


def dense_attention_flops(config: ModelConfig, batch_size: int) -> int:
    """Cost of full attention over all N keys per query, same conventions,
    summed over blocks. Comparison baseline for the sparse
    attention_computation rollup."""
    nsa = config.nsa
    b, n, h, dh = int(batch_size), config.num_tokens, nsa.heads, nsa.head_dim
    per_block = (
        MAC_FLOPS * b * h * n * n * dh
        + b * h * n * n
        + SOFTMAX_FLOPS_PER_ELEMENT * b * h * n * n
        + MAC_FLOPS * b * h * n * dh * n
    )
    return config.num_blocks * per_block


def save_checkpoint(path: str, params: dict[str, Tensor], config: ModelConfig) -> None:
    """One JSON header line (version, config, parameter manifest) followed by
    the concatenated little-endian float64 payload in manifest order."""
    manifest = [{"path": key, "shape": list(t.shape)} for key, t in params.items()]
    header = {"version": CHECKPOINT_VERSION, "config": config.to_dict(), "params": manifest}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for t in params.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> tuple[dict[str, Tensor], ModelConfig]:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        blob = fh.read()
    header = json.loads(header_line.decode("utf-8"))
    version = header.get("version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    config = ModelConfig.from_dict(header["config"])
    params: dict[str, Tensor] = {}
    offset = 0
    for entry in header["params"]:
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = int(np.prod(shape)) * 8 if shape else 8
        chunk = blob[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise ValueError("checkpoint payload truncated")
        offset += nbytes
        data = np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64)
        params[entry["path"]] = Tensor(data, requires_grad=True)
    if offset != len(blob):
        raise ValueError("checkpoint payload has trailing bytes")
    return params, config
