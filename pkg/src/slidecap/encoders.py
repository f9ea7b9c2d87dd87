"""Toy-scale text and vision transformers with hand-written backward passes.

Both towers are pre-LayerNorm transformers. The text tower embeds one window
of ``context_len`` ids, attends bidirectionally under the padding mask,
optionally average-pools along the token axis, and reads the state at the
end-of-text position. The image tower is a ViT: patchify, project, prepend a
class token, and read the class state. Each tower ends in a linear
projection into the shared ``embed_dim`` space.

Every forward function has a ``*_forward`` variant that also returns a cache,
and a matching ``*_backward`` that accumulates parameter gradients into a
dict. Parameters live in a flat name -> array mapping so optimizers and the
checkpoint format can treat them uniformly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import InvalidKernelError, ShapeError, ZeroNormError

LOG_TEMPERATURE_MIN = math.log(1 / 100)
LOG_TEMPERATURE_MAX = math.log(100)
LOG_TEMPERATURE_INIT = math.log(1 / 0.07)
_LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
# per-channel pixel statistics used by CLIP's image preprocessing
PIXEL_MEAN = np.array([0.48145466, 0.4578275, 0.40821073])
PIXEL_STD = np.array([0.26862954, 0.26130258, 0.27577711])


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    context_len: int = 77
    text_layers: int = 2
    text_heads: int = 4
    text_width: int = 128
    image_size: int = 32
    patch_size: int = 8
    image_layers: int = 2
    image_heads: int = 4
    image_width: int = 128
    embed_dim: int = 64
    pool_kernel: int = 1
    mlp_ratio: int = 4
    init_gain: float = 1.0  # multiplies every Gaussian init scale; not part of the checkpoint

    def __post_init__(self):
        if self.vocab_size < 4:
            raise ValueError(f"vocab_size must be >= 4, got {self.vocab_size}")
        if self.context_len < 3:
            raise ValueError(f"context_len must be >= 3, got {self.context_len}")
        if self.text_width % self.text_heads:
            raise ValueError("text_width must be divisible by text_heads")
        if self.image_width % self.image_heads:
            raise ValueError("image_width must be divisible by image_heads")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.pool_kernel < 1 or self.pool_kernel % 2 == 0:
            raise ValueError(f"pool_kernel must be odd and >= 1, got {self.pool_kernel}")
        if self.pool_kernel > self.context_len:
            raise ValueError("pool_kernel cannot exceed context_len")
        if not self.init_gain > 0:
            raise ValueError(f"init_gain must be > 0, got {self.init_gain}")
        for name in ("text_layers", "image_layers", "embed_dim", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


class ModelParams:
    """Named trainable tensors of both towers plus the log temperature."""

    def __init__(self, tensors: dict[str, np.ndarray]):
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.tensors[name] = value

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({k: v.astype(dtype) for k, v in self.tensors.items()})

    @property
    def dtype(self):
        return self.tensors["log_temperature"].dtype

    @property
    def log_temperature(self) -> float:
        return float(self.tensors["log_temperature"])

    def clamp_temperature(self) -> None:
        lt = self.tensors["log_temperature"]
        self.tensors["log_temperature"] = np.clip(lt, LOG_TEMPERATURE_MIN, LOG_TEMPERATURE_MAX).astype(lt.dtype)

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.tensors.values())


def param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every tensor, in canonical (checkpoint) order."""
    shapes: dict[str, tuple[int, ...]] = {}

    def blocks(prefix: str, layers: int, width: int) -> None:
        hidden = width * cfg.mlp_ratio
        for i in range(layers):
            p = f"{prefix}.blocks.{i}"
            shapes[f"{p}.ln1.g"] = (width,)
            shapes[f"{p}.ln1.b"] = (width,)
            shapes[f"{p}.attn.w_qkv"] = (width, 3 * width)
            shapes[f"{p}.attn.b_qkv"] = (3 * width,)
            shapes[f"{p}.attn.w_out"] = (width, width)
            shapes[f"{p}.attn.b_out"] = (width,)
            shapes[f"{p}.ln2.g"] = (width,)
            shapes[f"{p}.ln2.b"] = (width,)
            shapes[f"{p}.mlp.w_in"] = (width, hidden)
            shapes[f"{p}.mlp.b_in"] = (hidden,)
            shapes[f"{p}.mlp.w_out"] = (hidden, width)
            shapes[f"{p}.mlp.b_out"] = (width,)

    tw, iw = cfg.text_width, cfg.image_width
    shapes["text.token_embedding"] = (cfg.vocab_size, tw)
    shapes["text.positional"] = (cfg.context_len, tw)
    blocks("text", cfg.text_layers, tw)
    shapes["text.ln_final.g"] = (tw,)
    shapes["text.ln_final.b"] = (tw,)
    shapes["text.projection"] = (tw, cfg.embed_dim)

    shapes["image.patch_projection"] = (cfg.patch_size * cfg.patch_size * 3, iw)
    shapes["image.class_token"] = (iw,)
    shapes["image.positional"] = (cfg.num_patches + 1, iw)
    shapes["image.ln_pre.g"] = (iw,)
    shapes["image.ln_pre.b"] = (iw,)
    blocks("image", cfg.image_layers, iw)
    shapes["image.ln_post.g"] = (iw,)
    shapes["image.ln_post.b"] = (iw,)
    shapes["image.projection"] = (iw, cfg.embed_dim)

    shapes["log_temperature"] = ()
    return shapes


def init_std(name: str, cfg: EncoderConfig) -> float:
    """CLIP's published initialization scale for ``name``, times ``cfg.init_gain``."""
    return cfg.init_gain * _clip_std(name, cfg)


def _clip_std(name: str, cfg: EncoderConfig) -> float:
    tower, width, layers = (("text", cfg.text_width, cfg.text_layers) if name.startswith("text.")
                            else ("image", cfg.image_width, cfg.image_layers))
    if name == "text.token_embedding":
        return 0.02
    if name == "text.positional":
        return 0.01
    if name in ("image.class_token", "image.positional", "image.patch_projection"):
        return width ** -0.5
    if name.endswith("attn.w_qkv") or name.endswith("projection"):
        return width ** -0.5
    if name.endswith("attn.w_out"):
        return width ** -0.5 * (2 * layers) ** -0.5
    if name.endswith("mlp.w_in"):
        return (2 * width) ** -0.5
    if name.endswith("mlp.w_out"):
        return width ** -0.5 * (2 * layers) ** -0.5
    raise KeyError(name)


def init_params(cfg: EncoderConfig, seed: int = 0, dtype=np.float64) -> ModelParams:
    """Gaussian weights at CLIP's scales (times ``init_gain``), zero biases, unit LayerNorm gains."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "log_temperature":
            arr = np.array(LOG_TEMPERATURE_INIT)
        elif leaf == "g":
            arr = np.ones(shape)
        elif leaf == "b" or leaf.startswith("b_"):
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, init_std(name, cfg), size=shape)
        tensors[name] = np.asarray(arr, dtype=dtype)
    return ModelParams(tensors)


def check_params(params: ModelParams, cfg: EncoderConfig) -> None:
    expected = param_shapes(cfg)
    missing = set(expected) - set(params.tensors)
    extra = set(params.tensors) - set(expected)
    if missing or extra:
        raise ShapeError(f"parameter names mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ShapeError(f"{name}: expected shape {shape}, got {params[name].shape}")


# ---------------------------------------------------------------------------
# primitive layers


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def _layer_norm_backward(dy, cache):
    xhat, rstd, g = cache
    red = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axis=red)
    db = dy.sum(axis=red)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _gelu(x):
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), (x, t)


def _gelu_backward(dy, cache):
    x, t = cache
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def _linear_backward(dy, x, w):
    """Gradients of ``y = x @ w + b`` for x of shape (..., in)."""
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy @ w.T, x2.T @ dy2, dy2.sum(axis=0)


def _attention(x, key_mask, w_qkv, b_qkv, w_out, b_out, heads):
    n, t, width = x.shape
    dh = width // heads
    qkv = x @ w_qkv + b_qkv
    qkv = qkv.reshape(n, t, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]  # (n, h, t, dh)
    scale = 1.0 / math.sqrt(dh)
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    if key_mask is not None:
        scores = np.where(key_mask[:, None, None, :], scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    ctx = (p @ v).transpose(0, 2, 1, 3).reshape(n, t, width)
    out = ctx @ w_out + b_out
    return out, (x, q, k, v, p, ctx, scale, heads)


def _attention_backward(dout, cache, w_qkv, w_out):
    x, q, k, v, p, ctx, scale, heads = cache
    n, t, width = x.shape
    dh = width // heads
    dctx, dw_out, db_out = _linear_backward(dout, ctx, w_out)
    dctx = dctx.reshape(n, t, heads, dh).transpose(0, 2, 1, 3)
    dp = dctx @ v.transpose(0, 1, 3, 2)
    dv = p.transpose(0, 1, 3, 2) @ dctx
    dscores = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
    dq = dscores @ k
    dk = dscores.transpose(0, 1, 3, 2) @ q
    dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(n, t, 3 * width)
    dx, dw_qkv, db_qkv = _linear_backward(dqkv, x, w_qkv)
    return dx, dw_qkv, db_qkv, dw_out, db_out


def _block(x, key_mask, params, prefix, heads):
    P = params.tensors
    h1, ln1 = _layer_norm(x, P[f"{prefix}.ln1.g"], P[f"{prefix}.ln1.b"])
    a, attn = _attention(h1, key_mask, P[f"{prefix}.attn.w_qkv"], P[f"{prefix}.attn.b_qkv"],
                         P[f"{prefix}.attn.w_out"], P[f"{prefix}.attn.b_out"], heads)
    x = x + a
    h2, ln2 = _layer_norm(x, P[f"{prefix}.ln2.g"], P[f"{prefix}.ln2.b"])
    u = h2 @ P[f"{prefix}.mlp.w_in"] + P[f"{prefix}.mlp.b_in"]
    gu, gelu = _gelu(u)
    x = x + gu @ P[f"{prefix}.mlp.w_out"] + P[f"{prefix}.mlp.b_out"]
    return x, (ln1, attn, ln2, h2, gelu, gu)


def _block_backward(dx, cache, params, prefix, grads):
    P = params.tensors
    ln1, attn, ln2, h2, gelu, gu = cache
    dgu, dw, db = _linear_backward(dx, gu, P[f"{prefix}.mlp.w_out"])
    _acc(grads, f"{prefix}.mlp.w_out", dw)
    _acc(grads, f"{prefix}.mlp.b_out", db)
    du = _gelu_backward(dgu, gelu)
    dh2, dw, db = _linear_backward(du, h2, P[f"{prefix}.mlp.w_in"])
    _acc(grads, f"{prefix}.mlp.w_in", dw)
    _acc(grads, f"{prefix}.mlp.b_in", db)
    d, dg, dbeta = _layer_norm_backward(dh2, ln2)
    _acc(grads, f"{prefix}.ln2.g", dg)
    _acc(grads, f"{prefix}.ln2.b", dbeta)
    dx = dx + d
    dh1, dw_qkv, db_qkv, dw_out, db_out = _attention_backward(
        dx, attn, P[f"{prefix}.attn.w_qkv"], P[f"{prefix}.attn.w_out"])
    _acc(grads, f"{prefix}.attn.w_qkv", dw_qkv)
    _acc(grads, f"{prefix}.attn.b_qkv", db_qkv)
    _acc(grads, f"{prefix}.attn.w_out", dw_out)
    _acc(grads, f"{prefix}.attn.b_out", db_out)
    d, dg, dbeta = _layer_norm_backward(dh1, ln1)
    _acc(grads, f"{prefix}.ln1.g", dg)
    _acc(grads, f"{prefix}.ln1.b", dbeta)
    return dx + d


def _acc(grads, name, value):
    if name in grads:
        grads[name] = grads[name] + value
    else:
        grads[name] = value


# ---------------------------------------------------------------------------
# pooling and normalization


def avg_pool_sequence(hidden: np.ndarray, kernel: int, mask: np.ndarray | None = None) -> np.ndarray:
    """Mean over non-overlapping groups of ``kernel`` consecutive positions.

    Pools along the sequence axis: axis 0 for a 1-D sequence of scalars,
    otherwise the second-to-last axis of ``(..., seq_len, width)``. The last
    group may be short and is averaged over its actual size. With ``mask``
    (shape ``(..., seq_len)``) only valid positions enter each mean; a group
    with no valid position pools to zero. Position ``i`` lands in group
    ``i // kernel``. ``kernel == 1`` returns ``hidden`` unchanged.
    """
    hidden = np.asarray(hidden)
    seq_axis = 0 if hidden.ndim == 1 else hidden.ndim - 2
    seq_len = hidden.shape[seq_axis]
    if kernel < 1 or kernel % 2 == 0 or kernel > seq_len:
        raise InvalidKernelError(f"kernel must be odd and in [1, {seq_len}], got {kernel}")
    if kernel == 1:
        return hidden
    x = hidden[..., None] if hidden.ndim == 1 else hidden
    groups = -(-seq_len // kernel)
    pad = groups * kernel - seq_len
    if mask is None:
        weights = np.ones(x.shape[:-1], dtype=x.dtype)
    else:
        weights = np.broadcast_to(np.asarray(mask, dtype=x.dtype), x.shape[:-1])
    if pad:
        pad_spec = [(0, 0)] * (x.ndim - 2) + [(0, pad)]
        weights = np.pad(weights, pad_spec)
        x = np.pad(x, pad_spec + [(0, 0)])
    lead = x.shape[:-2]
    xs = x.reshape(*lead, groups, kernel, x.shape[-1])
    ws = weights.reshape(*lead, groups, kernel)
    counts = ws.sum(axis=-1)
    sums = (xs * ws[..., None]).sum(axis=-2)
    pooled = sums / np.maximum(counts, 1)[..., None]
    return pooled[..., 0] if hidden.ndim == 1 else pooled


def _avg_pool_backward(dpooled, kernel, seq_len, mask):
    """Gradient of the masked pool with respect to ``(n, seq_len, width)`` input."""
    groups = dpooled.shape[1]
    weights = np.asarray(mask, dtype=dpooled.dtype)
    pad = groups * kernel - seq_len
    if pad:
        weights = np.pad(weights, [(0, 0), (0, pad)])
    ws = weights.reshape(-1, groups, kernel)
    counts = np.maximum(ws.sum(axis=-1), 1)
    coef = ws / counts[..., None]
    dx = (dpooled[:, :, None, :] * coef[..., None]).reshape(dpooled.shape[0], groups * kernel, -1)
    return dx[:, :seq_len]


def normalize(e: np.ndarray) -> np.ndarray:
    """Scale a vector (or each row of a matrix) to unit Euclidean norm."""
    e = np.asarray(e)
    norms = np.linalg.norm(e, axis=-1, keepdims=True)
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        raise ZeroNormError("cannot normalize a zero or non-finite vector")
    return e / norms


def normalize_forward(e):
    norms = np.linalg.norm(e, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ZeroNormError("cannot normalize a zero vector")
    u = e / norms
    return u, (u, norms)


def normalize_backward(du, cache):
    u, norms = cache
    return (du - u * (du * u).sum(axis=-1, keepdims=True)) / norms


# ---------------------------------------------------------------------------
# text tower


def _check_rows(rows, masks, cfg):
    rows = np.asarray(rows)
    masks = np.asarray(masks, dtype=bool)
    if rows.ndim != 2 or rows.shape[1] != cfg.context_len:
        raise ShapeError(f"window rows must have length context_len={cfg.context_len}, got shape {rows.shape}")
    if masks.shape != rows.shape:
        raise ShapeError(f"mask shape {masks.shape} does not match rows {rows.shape}")
    if not masks[:, 0].all():
        raise ShapeError("mask must mark the start-of-text position valid")
    # valid positions must form a prefix
    if (np.diff(masks.astype(np.int8), axis=1) > 0).any():
        raise ShapeError("mask must be a contiguous prefix of valid positions")
    if rows.min(initial=0) < 0 or rows.max(initial=0) >= cfg.vocab_size:
        raise ShapeError("token id out of range for vocab_size")
    return rows, masks


def text_forward(rows, masks, params: ModelParams, cfg: EncoderConfig):
    """Projected (unnormalized) embeddings for a stack of window rows, plus cache."""
    rows, masks = _check_rows(rows, masks, cfg)
    P = params.tensors
    x = P["text.token_embedding"][rows] + P["text.positional"]
    block_caches = []
    for i in range(cfg.text_layers):
        x, c = _block(x, masks, params, f"text.blocks.{i}", cfg.text_heads)
        block_caches.append(c)
    h, ln = _layer_norm(x, P["text.ln_final.g"], P["text.ln_final.b"])
    pooled = avg_pool_sequence(h, cfg.pool_kernel, masks)
    eot = masks.sum(axis=1) - 1
    group = eot // cfg.pool_kernel
    n = rows.shape[0]
    state = pooled[np.arange(n), group]
    out = state @ P["text.projection"]
    return out, (rows, masks, block_caches, ln, group, state)


def text_backward(dout, cache, params: ModelParams, cfg: EncoderConfig, grads: dict) -> dict:
    rows, masks, block_caches, ln, group, state = cache
    P = params.tensors
    n, t = rows.shape
    _acc(grads, "text.projection", state.T @ dout)
    dstate = dout @ P["text.projection"].T
    groups = -(-t // cfg.pool_kernel)
    dpooled = np.zeros((n, groups, dstate.shape[1]), dtype=dstate.dtype)
    dpooled[np.arange(n), group] = dstate
    if cfg.pool_kernel == 1:
        dh = dpooled
    else:
        dh = _avg_pool_backward(dpooled, cfg.pool_kernel, t, masks)
    dx, dg, db = _layer_norm_backward(dh, ln)
    _acc(grads, "text.ln_final.g", dg)
    _acc(grads, "text.ln_final.b", db)
    for i in reversed(range(cfg.text_layers)):
        dx = _block_backward(dx, block_caches[i], params, f"text.blocks.{i}", grads)
    _acc(grads, "text.positional", dx.sum(axis=0))
    dtok = np.zeros_like(P["text.token_embedding"])
    np.add.at(dtok, rows.reshape(-1), dx.reshape(-1, dx.shape[-1]))
    _acc(grads, "text.token_embedding", dtok)
    return grads


def encode_text_windows(rows, masks, params: ModelParams, cfg: EncoderConfig) -> np.ndarray:
    return text_forward(rows, masks, params, cfg)[0]


def encode_text_window(window_row, mask, params: ModelParams, cfg: EncoderConfig) -> np.ndarray:
    """Projected embedding of one window row (not normalized)."""
    row = np.asarray(window_row)
    if row.ndim != 1:
        raise ShapeError(f"expected a single window row, got shape {row.shape}")
    return encode_text_windows(row[None], np.asarray(mask)[None], params, cfg)[0]


# ---------------------------------------------------------------------------
# image tower


def patchify(pixels: np.ndarray, patch_size: int) -> np.ndarray:
    """(n, S, S, 3) -> (n, (S/p)^2, p*p*3), patches in row-major order."""
    n, s, _, c = pixels.shape
    g = s // patch_size
    x = pixels.reshape(n, g, patch_size, g, patch_size, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n, g * g, patch_size * patch_size * c)


def _check_images(pixels, cfg, dtype):
    pixels = np.asarray(pixels)
    if pixels.ndim == 3:
        pixels = pixels[None]
    s = cfg.image_size
    if pixels.ndim != 4 or pixels.shape[1:] != (s, s, 3):
        raise ShapeError(f"expected images of shape ({s}, {s}, 3), got {pixels.shape[-3:]}")
    return pixels.astype(dtype, copy=False)


def image_forward(pixels, params: ModelParams, cfg: EncoderConfig):
    P = params.tensors
    pixels = _check_images(pixels, cfg, params.dtype)
    n = pixels.shape[0]
    pixels = (pixels - PIXEL_MEAN.astype(pixels.dtype)) / PIXEL_STD.astype(pixels.dtype)
    patches = patchify(pixels, cfg.patch_size)
    emb = patches @ P["image.patch_projection"]
    cls = np.broadcast_to(P["image.class_token"], (n, 1, cfg.image_width))
    x = np.concatenate([cls, emb], axis=1) + P["image.positional"]
    x, ln_pre = _layer_norm(x, P["image.ln_pre.g"], P["image.ln_pre.b"])
    block_caches = []
    for i in range(cfg.image_layers):
        x, c = _block(x, None, params, f"image.blocks.{i}", cfg.image_heads)
        block_caches.append(c)
    state, ln_post = _layer_norm(x[:, 0], P["image.ln_post.g"], P["image.ln_post.b"])
    out = state @ P["image.projection"]
    return out, (patches, ln_pre, block_caches, ln_post, state, x.shape)


def image_backward(dout, cache, params: ModelParams, cfg: EncoderConfig, grads: dict) -> dict:
    patches, ln_pre, block_caches, ln_post, state, xshape = cache
    P = params.tensors
    _acc(grads, "image.projection", state.T @ dout)
    dstate = dout @ P["image.projection"].T
    dcls, dg, db = _layer_norm_backward(dstate, ln_post)
    _acc(grads, "image.ln_post.g", dg)
    _acc(grads, "image.ln_post.b", db)
    dx = np.zeros(xshape, dtype=dout.dtype)
    dx[:, 0] = dcls
    for i in reversed(range(cfg.image_layers)):
        dx = _block_backward(dx, block_caches[i], params, f"image.blocks.{i}", grads)
    dx, dg, db = _layer_norm_backward(dx, ln_pre)
    _acc(grads, "image.ln_pre.g", dg)
    _acc(grads, "image.ln_pre.b", db)
    _acc(grads, "image.positional", dx.sum(axis=0))
    _acc(grads, "image.class_token", dx[:, 0].sum(axis=0))
    demb = dx[:, 1:]
    p2 = patches.reshape(-1, patches.shape[-1])
    _acc(grads, "image.patch_projection", p2.T @ demb.reshape(-1, demb.shape[-1]))
    return grads


def encode_images(pixels, params: ModelParams, cfg: EncoderConfig) -> np.ndarray:
    return image_forward(pixels, params, cfg)[0]


def encode_image(pixels, params: ModelParams, cfg: EncoderConfig) -> np.ndarray:
    """Projected embedding of one H x W x 3 image in [0, 1] (not normalized)."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3:
        raise ShapeError(f"expected a single H x W x 3 image, got shape {pixels.shape}")
    return encode_images(pixels[None], params, cfg)[0]
