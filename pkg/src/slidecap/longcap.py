"""Long-caption encoding: encode every sliding window, average, normalize."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .encoders import (
    EncoderConfig,
    ModelParams,
    normalize,
    normalize_backward,
    normalize_forward,
    text_backward,
    text_forward,
)
from .errors import BatchItemError, InvalidStrideError, ShapeError, SlidecapError
from .textpipe import TokenSequence, WindowBatch, default_stride, make_windows


@dataclass(frozen=True)
class LongTextConfig:
    context_len: int = 77
    stride: int | None = None  # None -> default_stride(context_len)
    normalize_before_mean: bool = False
    aggregation: str = "mean"

    def __post_init__(self):
        if self.aggregation != "mean":
            raise ValueError("only arithmetic-mean aggregation is supported")
        if self.stride is not None and not 1 <= self.stride <= self.context_len - 2:
            raise InvalidStrideError(
                f"stride must be in [1, {self.context_len - 2}], got {self.stride}")

    @property
    def effective_stride(self) -> int:
        return self.stride if self.stride is not None else default_stride(self.context_len)


def window_caption(seq: TokenSequence, ltc: LongTextConfig) -> WindowBatch:
    return make_windows(seq, ltc.context_len, ltc.effective_stride)


def _checked_windows(seq: TokenSequence, ltc: LongTextConfig, vocab_size: int) -> WindowBatch:
    if seq.ids and not 0 <= min(seq.ids) <= max(seq.ids) < vocab_size:
        raise ShapeError(f"token id out of range for vocab_size {vocab_size}")
    return window_caption(seq, ltc)


def _stack_windows(seqs: Sequence[TokenSequence], ltc: LongTextConfig, vocab_size: int):
    batches = []
    for i, seq in enumerate(seqs):
        try:
            batches.append(_checked_windows(seq, ltc, vocab_size))
        except SlidecapError as exc:
            raise BatchItemError(i, exc) from exc
    counts = np.array([len(b) for b in batches], dtype=np.int64)
    rows = np.concatenate([b.windows for b in batches])
    masks = np.concatenate([b.masks for b in batches])
    return rows, masks, counts


def _segment_mean(window_embs: np.ndarray, counts: np.ndarray) -> np.ndarray:
    # sequential sum in window order per caption keeps the reduction order fixed
    owner = np.repeat(np.arange(len(counts)), counts)
    sums = np.zeros((len(counts), window_embs.shape[1]), dtype=window_embs.dtype)
    np.add.at(sums, owner, window_embs)
    return sums / counts[:, None]


def caption_forward(seqs: Sequence[TokenSequence], params: ModelParams, cfg: EncoderConfig,
                    ltc: LongTextConfig):
    """Unit-norm caption embeddings for ``seqs`` with a cache for backprop.

    All windows of all captions run through the text tower as one stack;
    each caption's embedding is the mean of its window embeddings.
    """
    if ltc.context_len != cfg.context_len:
        raise ValueError("LongTextConfig.context_len must equal EncoderConfig.context_len")
    rows, masks, counts = _stack_windows(seqs, ltc, cfg.vocab_size)
    win, text_cache = text_forward(rows, masks, params, cfg)
    norm_cache = None
    if ltc.normalize_before_mean:
        win, norm_cache = normalize_forward(win)
    mean = _segment_mean(win, counts)
    out, final_cache = normalize_forward(mean)
    return out, (text_cache, norm_cache, counts, final_cache)


def caption_backward(dout, cache, params: ModelParams, cfg: EncoderConfig, grads: dict) -> dict:
    text_cache, norm_cache, counts, final_cache = cache
    dmean = normalize_backward(dout, final_cache)
    # each window receives 1/count of its caption's gradient
    dwin = np.repeat(dmean / counts[:, None], counts, axis=0)
    if norm_cache is not None:
        dwin = normalize_backward(dwin, norm_cache)
    return text_backward(dwin, text_cache, params, cfg, grads)


def encode_long_text(seq: TokenSequence, params: ModelParams, cfg: EncoderConfig,
                     ltc: LongTextConfig | None = None) -> np.ndarray:
    """Unit-norm embedding of a caption of any length.

    The caption is cut into overlapping windows, each window is encoded
    independently, the window embeddings are averaged (optionally after
    normalizing each one), and the mean is normalized.
    """
    ltc = ltc or LongTextConfig(context_len=cfg.context_len)
    batch = window_caption(seq, ltc)
    win = text_forward(batch.windows, batch.masks, params, cfg)[0]
    if ltc.normalize_before_mean:
        win = normalize(win)
    return normalize(win.sum(axis=0) / len(batch))


def encode_caption_batch(seqs: Sequence[TokenSequence], params: ModelParams, cfg: EncoderConfig,
                         ltc: LongTextConfig | None = None, max_windows: int = 256) -> list[np.ndarray]:
    """Encode many captions, stacking up to ``max_windows`` windows per forward pass."""
    ltc = ltc or LongTextConfig(context_len=cfg.context_len)
    counts = []
    for i, seq in enumerate(seqs):
        try:
            counts.append(len(_checked_windows(seq, ltc, cfg.vocab_size)))
        except SlidecapError as exc:
            raise BatchItemError(i, exc) from exc
    out: list[np.ndarray] = []
    start = 0
    while start < len(seqs):
        stop, budget = start, 0
        while stop < len(seqs) and (stop == start or budget + counts[stop] <= max_windows):
            budget += counts[stop]
            stop += 1
        out.extend(caption_forward(seqs[start:stop], params, cfg, ltc)[0])
        start = stop
    return out
