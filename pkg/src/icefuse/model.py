"""High-resolution transformer: patch merging, four global/local attention
stages with MLPs, and an interpolation head producing a [0,100] SIC chip.

Token layout: a chip is split into P x P patches, each projected to F
features; windows of Hw x Ww patches form tokens. The global view is
[B, T, HW*F] (token features flattened patch-major) and the local view
[B*T, HW, F] is an exact reshape of the same data.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .util import derived_rng

CKPT_MAGIC = b"SICW"
CKPT_VERSION = 1


class ConfigError(ValueError):
    """Inconsistent model configuration or weight set."""


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 3
    chip: int = 64
    patch: int = 4
    window: int = 4
    hidden: int = 32
    heads: int = 4
    stages: int = 4
    dropout_keep: float = 0.9

    def __post_init__(self):
        if self.chip % (self.patch * self.window) != 0:
            raise ConfigError("chip must be divisible by patch * window")
        if self.hidden % self.heads != 0:
            raise ConfigError("hidden must be divisible by heads")
        if self.token_dim % self.heads != 0:
            raise ConfigError("token feature dim must be divisible by heads")
        if not 0 < self.dropout_keep <= 1:
            raise ConfigError("dropout_keep must be in (0, 1]")

    @property
    def patches_per_side(self):
        return self.chip // self.patch

    @property
    def tokens_per_side(self):
        return self.chip // (self.patch * self.window)

    @property
    def n_tokens(self):
        return self.tokens_per_side ** 2

    @property
    def window_cells(self):
        return self.window ** 2

    @property
    def token_dim(self):
        return self.hidden * self.window_cells


def attention_param_names(cfg):
    """Names of the projection weights the Bayesian extension treats as random."""
    names = []
    for s in range(cfg.stages):
        for block in ("glo", "lo"):
            for w in ("wq", "wk", "wv", "wo"):
                names.append(f"stage{s}.{block}.{w}")
    return names


def init_params(cfg, seed):
    """Deterministic weight set: N(0, 0.02^2) weights, zero biases, unit norms."""
    rng = derived_rng(seed, "init")
    params = {}

    def weight(name, shape):
        params[name] = nk.Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True)

    def zeros(name, shape):
        params[name] = nk.Tensor(np.zeros(shape), requires_grad=True)

    def ones(name, shape):
        params[name] = nk.Tensor(np.ones(shape), requires_grad=True)

    d = cfg.token_dim
    f = cfg.hidden
    weight("embed.w", (cfg.channels * cfg.patch ** 2, f))
    zeros("embed.b", (f,))
    for s in range(cfg.stages):
        ones(f"stage{s}.glo.norm.g", (d,))
        zeros(f"stage{s}.glo.norm.b", (d,))
        for w in ("wq", "wk", "wv", "wo"):
            weight(f"stage{s}.glo.{w}", (d, d))
        ones(f"stage{s}.glo_mlp.norm.g", (d,))
        zeros(f"stage{s}.glo_mlp.norm.b", (d,))
        weight(f"stage{s}.glo_mlp.w1", (d, 4 * d))
        zeros(f"stage{s}.glo_mlp.b1", (4 * d,))
        weight(f"stage{s}.glo_mlp.w2", (4 * d, d))
        zeros(f"stage{s}.glo_mlp.b2", (d,))
        ones(f"stage{s}.lo.norm.g", (f,))
        zeros(f"stage{s}.lo.norm.b", (f,))
        for w in ("wq", "wk", "wv", "wo"):
            weight(f"stage{s}.lo.{w}", (f, f))
        ones(f"stage{s}.lo_mlp.norm.g", (f,))
        zeros(f"stage{s}.lo_mlp.norm.b", (f,))
        weight(f"stage{s}.lo_mlp.w1", (f, 4 * f))
        zeros(f"stage{s}.lo_mlp.b1", (4 * f,))
        weight(f"stage{s}.lo_mlp.w2", (4 * f, f))
        zeros(f"stage{s}.lo_mlp.b2", (f,))
    for s in range(cfg.stages):
        weight(f"head.w{s}", (f, cfg.patch ** 2))
    zeros("head.b", (cfg.patch ** 2,))
    return params


class DropoutState:
    """Fresh inverted-dropout masks per site, drawn from one stream."""

    def __init__(self, keep_prob, rng):
        if keep_prob <= 0:
            raise nk.ContractError(f"keep probability must be positive, got {keep_prob}")
        self.keep_prob = float(keep_prob)
        self.rng = rng

    def apply(self, tensor):
        if self.keep_prob >= 1.0:
            return tensor
        mask = (self.rng.random(tensor.shape) < self.keep_prob) / self.keep_prob
        return nk.mul(tensor, nk.Tensor(mask))


def multi_head_attention(x, wq, wk, wv, wo, heads, return_attn=False):
    """Scaled dot-product attention over the middle axis of [N, L, D]."""
    n, length, dim = x.shape
    dk = dim // heads
    scale = 1.0 / np.sqrt(dk)

    def split(t):
        return nk.transpose(nk.reshape(t, (n, length, heads, dk)), (0, 2, 1, 3))

    q = split(nk.matmul(x, wq))
    k = split(nk.matmul(x, wk))
    v = split(nk.matmul(x, wv))
    scores = nk.scale(nk.matmul(q, nk.transpose(k, (0, 1, 3, 2))), scale)
    attn = nk.softmax_lastdim(scores)
    mixed = nk.matmul(attn, v)
    merged = nk.reshape(nk.transpose(mixed, (0, 2, 1, 3)), (n, length, dim))
    out = nk.matmul(merged, wo)
    if return_attn:
        return out, attn.data
    return out


def _attn_block(x, params, prefix, heads, dropout):
    normed = nk.layer_norm(x, params[f"{prefix}.norm.g"], params[f"{prefix}.norm.b"])
    a = multi_head_attention(
        normed,
        params[f"{prefix}.wq"], params[f"{prefix}.wk"],
        params[f"{prefix}.wv"], params[f"{prefix}.wo"],
        heads,
    )
    if dropout is not None:
        a = dropout.apply(a)
    return nk.add(x, a)


def _mlp_block(x, params, prefix, dropout):
    normed = nk.layer_norm(x, params[f"{prefix}.norm.g"], params[f"{prefix}.norm.b"])
    hidden = nk.gelu(nk.add(nk.matmul(normed, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    if dropout is not None:
        hidden = dropout.apply(hidden)
    out = nk.add(nk.matmul(hidden, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])
    return nk.add(x, out)


def patch_merge(x, params, cfg):
    """[B, C, H0, W0] -> token tensor [B, T, HW*F]."""
    x = x if isinstance(x, nk.Tensor) else nk.Tensor(x)
    b = x.shape[0]
    if x.shape[1:] != (cfg.channels, cfg.chip, cfg.chip):
        raise ConfigError(f"input shape {x.shape} does not match config")
    t, w, p = cfg.tokens_per_side, cfg.window, cfg.patch
    v = nk.reshape(x, (b, cfg.channels, t, w, p, t, w, p))
    v = nk.transpose(v, (0, 2, 5, 3, 6, 1, 4, 7))  # b, tr, tc, wr, wc, C, pr, pc
    v = nk.reshape(v, (b * cfg.n_tokens * cfg.window_cells, cfg.channels * p * p))
    v = nk.add(nk.matmul(v, params["embed.w"]), params["embed.b"])
    return nk.reshape(v, (b, cfg.n_tokens, cfg.token_dim))


def gloformer(g, params, cfg, stage, dropout=None):
    """Among-token attention block with pre-norm residual wiring."""
    return _attn_block(g, params, f"stage{stage}.glo", cfg.heads, dropout)


def loformer(g, params, cfg, stage, dropout=None):
    """Within-token attention over the [B*T, HW, F] view; no cross-token mixing."""
    return _attn_block(g, params, f"stage{stage}.lo", cfg.heads, dropout)


def forward(x, params, cfg, dropout=None):
    """Full model: patch merge, 4x (glo -> mlp -> lo -> mlp), interpolation head."""
    missing = [k for k in ("embed.w", "head.b") if k not in params]
    if missing:
        raise ConfigError(f"weight set incomplete, missing {missing}")
    g = patch_merge(x, params, cfg)
    b = g.shape[0]
    stage_outputs = []
    for s in range(cfg.stages):
        g = gloformer(g, params, cfg, s, dropout)
        g = _mlp_block(g, params, f"stage{s}.glo_mlp", dropout)
        local = nk.reshape(g, (b * cfg.n_tokens, cfg.window_cells, cfg.hidden))
        local = loformer(local, params, cfg, s, dropout)
        local = _mlp_block(local, params, f"stage{s}.lo_mlp", dropout)
        g = nk.reshape(local, (b, cfg.n_tokens, cfg.token_dim))
        stage_outputs.append(g)

    # affine over the stage-concatenated per-patch features, realized as a
    # sum of per-stage slices of the same weight matrix
    logits = None
    for s, z in enumerate(stage_outputs):
        flat = nk.reshape(z, (b * cfg.n_tokens * cfg.window_cells, cfg.hidden))
        term = nk.matmul(flat, params[f"head.w{s}"])
        logits = term if logits is None else nk.add(logits, term)
    logits = nk.add(logits, params["head.b"])

    t, w, p = cfg.tokens_per_side, cfg.window, cfg.patch
    v = nk.reshape(logits, (b, t, t, w, w, p, p))
    v = nk.transpose(v, (0, 1, 3, 5, 2, 4, 6))  # b, tr, wr, pr, tc, wc, pc
    v = nk.reshape(v, (b, 1, cfg.chip, cfg.chip))
    return nk.scale(nk.sigmoid(v), 100.0)


def write_checkpoint(entries, path):
    """SICW checkpoint: named f64 tensors, bit-exact roundtrip."""
    items = list(entries.items())
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<HI", CKPT_VERSION, len(items)))
        for name, tensor in items:
            data = np.ascontiguousarray(tensor.data if isinstance(tensor, nk.Tensor) else tensor,
                                        dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", data.ndim))
            for extent in data.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(data.tobytes(order="C"))


def read_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CKPT_MAGIC:
        raise ConfigError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    version, count = struct.unpack_from("<HI", raw, 4)
    if version != CKPT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    offset = 10
    out = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            name = raw[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", raw, offset)
            offset += 1
            shape = struct.unpack_from(f"<{rank}I", raw, offset) if rank else ()
            offset += 4 * rank
            size = int(np.prod(shape, dtype=np.int64)) if rank else 1
            data = np.frombuffer(raw, dtype="<f8", count=size, offset=offset).reshape(shape)
            offset += 8 * size
            out[name] = nk.Tensor(data.copy())
    except (struct.error, ValueError) as exc:
        raise ConfigError(f"{path}: truncated or corrupt checkpoint") from exc
    if offset != len(raw):
        raise ConfigError(f"{path}: trailing bytes after checkpoint payload")
    return out
