"""Symmetric contrastive objective, backprop through both towers, and Adam."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence, TextIO

import numpy as np

from .encoders import (
    EncoderConfig,
    ModelParams,
    image_backward,
    image_forward,
    normalize_backward,
    normalize_forward,
)
from .errors import BatchTooSmallError, DatasetTooSmallError, ShapeError, TrainingDivergedError
from .longcap import LongTextConfig, caption_backward, caption_forward
from .textpipe import TokenSequence


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-6
    epochs: int = 10
    batch_size: int = 50
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("adam betas must lie in [0, 1)")
        if not self.adam_eps > 0:
            raise ValueError("adam_eps must be > 0")


@dataclass
class TrainState:
    params: ModelParams
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    epoch_losses: list[float] = field(default_factory=list)

    @classmethod
    def fresh(cls, params: ModelParams) -> "TrainState":
        zeros = {k: np.zeros_like(p) for k, p in params.items()}
        return cls(params=params, m=zeros, v={k: z.copy() for k, z in zeros.items()})


# ---------------------------------------------------------------------------
# loss


def _logsumexp(x, axis):
    mx = x.max(axis=axis, keepdims=True)
    return (mx + np.log(np.exp(x - mx).sum(axis=axis, keepdims=True))).squeeze(axis)


def _softmax(x, axis):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def contrastive_loss_from_logits(logits: np.ndarray) -> tuple[float, np.ndarray]:
    """Symmetric cross-entropy with the diagonal as targets; returns (loss, dloss/dlogits)."""
    logits = np.asarray(logits, dtype=np.float64)
    n = logits.shape[0]
    if logits.ndim != 2 or logits.shape[1] != n:
        raise ShapeError(f"logits must be square, got {logits.shape}")
    if n < 2:
        raise BatchTooSmallError("contrastive loss needs at least 2 pairs")
    diag = np.diagonal(logits)
    row = (_logsumexp(logits, axis=1) - diag).mean()
    col = (_logsumexp(logits, axis=0) - diag).mean()
    loss = 0.5 * (row + col)
    eye = np.eye(n)
    dlogits = 0.5 * ((_softmax(logits, 1) - eye) + (_softmax(logits, 0) - eye)) / n
    return float(loss), dlogits


def _contrastive(image_embs, text_embs, log_temperature):
    image_embs = np.asarray(image_embs)
    text_embs = np.asarray(text_embs)
    if image_embs.shape != text_embs.shape or image_embs.ndim != 2:
        raise ShapeError(f"embedding shapes differ: {image_embs.shape} vs {text_embs.shape}")
    if image_embs.shape[0] < 2:
        raise BatchTooSmallError("contrastive loss needs at least 2 pairs")
    scale = math.exp(float(log_temperature))
    sims = image_embs @ text_embs.T
    logits = scale * sims
    loss, dlogits = contrastive_loss_from_logits(logits)
    d_image = scale * (dlogits @ text_embs)
    d_text = scale * (dlogits.T @ image_embs)
    d_logt = float((dlogits * logits).sum())
    return loss, logits, d_image, d_text, d_logt


def contrastive_loss(image_embs, text_embs, log_temperature: float) -> tuple[float, np.ndarray]:
    """CLIP-style loss over N matched pairs (row i of each list is a positive pair).

    ``logits[i, j] = exp(log_temperature) * <image_i, text_j>``; the loss is
    the mean of image->text and text->image softmax cross-entropies.
    Embeddings are expected to be unit norm already.
    """
    loss, logits, *_ = _contrastive(image_embs, text_embs, log_temperature)
    return loss, logits


# ---------------------------------------------------------------------------
# gradients


def _forward(params, images, captions, cfg, ltc):
    if len(captions) != len(images):
        raise ShapeError(f"{len(images)} images but {len(captions)} captions")
    if len(captions) < 2:
        raise BatchTooSmallError("a training batch needs at least 2 pairs")
    img_raw, img_cache = image_forward(images, params, cfg)
    img, img_norm = normalize_forward(img_raw)
    txt, txt_cache = caption_forward(captions, params, cfg, ltc)
    out = _contrastive(img, txt, params["log_temperature"])
    return out, (img_cache, img_norm, txt_cache)


def batch_loss(params: ModelParams, images, captions: Sequence[TokenSequence],
               cfg: EncoderConfig, ltc: LongTextConfig) -> float:
    """Contrastive loss of one batch through both towers (no gradients)."""
    return _forward(params, images, captions, cfg, ltc)[0][0]


def compute_gradients(params: ModelParams, images, captions: Sequence[TokenSequence],
                      cfg: EncoderConfig, ltc: LongTextConfig) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and the gradient of every parameter tensor for one batch."""
    (loss, _, d_img, d_txt, d_logt), (img_cache, img_norm, txt_cache) = _forward(
        params, images, captions, cfg, ltc)
    if not math.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss {loss}")
    grads: dict[str, np.ndarray] = {}
    image_backward(normalize_backward(d_img, img_norm), img_cache, params, cfg, grads)
    caption_backward(d_txt, txt_cache, params, cfg, grads)
    grads["log_temperature"] = np.asarray(d_logt, dtype=params.dtype)
    grads = {k: np.asarray(grads[k], dtype=params[k].dtype).reshape(params[k].shape) for k in params}
    if not all(np.isfinite(g).all() for g in grads.values()):
        raise TrainingDivergedError("non-finite gradient")
    return loss, grads


# ---------------------------------------------------------------------------
# optimizer


def adam_step(state: TrainState, grads: dict[str, np.ndarray], cfg: TrainConfig) -> TrainState:
    """One bias-corrected Adam update; returns a new state and leaves ``state`` intact."""
    t = state.step + 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in state.params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        update = cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
        new_p[name] = (p - update).astype(p.dtype, copy=False)
        new_m[name] = m
        new_v[name] = v
    params = ModelParams(new_p)
    params.clamp_temperature()
    return TrainState(params=params, m=new_m, v=new_v, step=t,
                      epoch_losses=list(state.epoch_losses))


# ---------------------------------------------------------------------------
# loop


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled index batches for one epoch; a trailing batch of size 1 is dropped."""
    order = np.random.default_rng(seed + epoch).permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    return [b for b in batches if len(b) >= 2]


def format_log_line(epoch: int, mean_loss: float, seconds: float) -> str:
    return f"{epoch}\t{mean_loss:.9g}\t{seconds:.3f}"


def train(images: np.ndarray, captions: Sequence[TokenSequence], state: TrainState,
          train_cfg: TrainConfig, cfg: EncoderConfig, ltc: LongTextConfig,
          log: TextIO | None = None,
          on_epoch: Callable[[int, float, TrainState], None] | None = None) -> TrainState:
    """Run ``train_cfg.epochs`` epochs of Adam over the paired dataset.

    Returns the final state; its ``epoch_losses`` holds the mean batch loss
    of each epoch. On divergence a ``TrainingDivergedError`` carries the
    last finite state.
    """
    images = np.asarray(images)
    n = len(captions)
    if n < 2:
        raise DatasetTooSmallError(f"training needs at least 2 pairs, got {n}")
    if len(images) != n:
        raise ShapeError(f"{len(images)} images but {n} captions")
    for epoch in range(train_cfg.epochs):
        t0 = time.perf_counter()
        losses = []
        for idx in epoch_batches(n, train_cfg.batch_size, train_cfg.seed, epoch):
            try:
                loss, grads = compute_gradients(
                    state.params, images[idx], [captions[i] for i in idx], cfg, ltc)
            except TrainingDivergedError as exc:
                raise TrainingDivergedError(str(exc), state=state) from exc
            losses.append(loss)
            new_state = adam_step(state, grads, train_cfg)
            if not new_state.params.all_finite():
                raise TrainingDivergedError("parameters became non-finite", state=state)
            state = new_state
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        state.epoch_losses.append(mean_loss)
        if log is not None:
            log.write(format_log_line(epoch, mean_loss, time.perf_counter() - t0) + "\n")
            log.flush()
        if on_epoch is not None:
            on_epoch(epoch, mean_loss, state)
    return state
