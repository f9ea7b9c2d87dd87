"""Caption tokenization and sliding-window segmentation.

Captions are split into lowercase words, each word is segmented by greedy
longest-match against a line-ordered vocabulary, and the resulting content
ids are cut into overlapping windows that each fit the text encoder's fixed
context (``context_len`` tokens including start/end markers).
"""
from __future__ import annotations

import io
import math
import re
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable

import numpy as np

from .errors import (
    DuplicateTokenError,
    EmptyVocabularyError,
    InvalidContextError,
    InvalidStrideError,
)

START_OF_TEXT = "<|startoftext|>"
END_OF_TEXT = "<|endoftext|>"
PAD = "<|pad|>"
SPECIAL_TOKENS = (START_OF_TEXT, END_OF_TEXT, PAD)

# letters and digits only; underscore counts as punctuation
_WORD_RE = re.compile(r"[^\W_]+")


@dataclass(frozen=True)
class Vocabulary:
    token_to_id: dict[str, int]
    id_to_token: list[str]
    start_of_text: int
    end_of_text: int
    pad: int
    max_token_len: int = field(default=1, compare=False)

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset((self.start_of_text, self.end_of_text, self.pad))

    def to_lines(self) -> str:
        return "".join(tok + "\n" for tok in self.id_to_token)


def vocabulary_from_tokens(tokens: Iterable[str]) -> Vocabulary:
    """Build a vocabulary from an iterable of tokens (ids follow iteration order)."""
    token_to_id: dict[str, int] = {}
    id_to_token: list[str] = []
    for lineno, tok in enumerate(tokens, start=1):
        if tok in token_to_id:
            raise DuplicateTokenError(f"duplicate token {tok!r} at line {lineno}")
        token_to_id[tok] = len(id_to_token)
        id_to_token.append(tok)
    if not id_to_token:
        raise EmptyVocabularyError("vocabulary source is empty")
    for special in SPECIAL_TOKENS:
        if special not in token_to_id:
            token_to_id[special] = len(id_to_token)
            id_to_token.append(special)
    longest = max(len(t) for t in id_to_token if t not in SPECIAL_TOKENS) if len(id_to_token) > 3 else 1
    return Vocabulary(
        token_to_id=token_to_id,
        id_to_token=id_to_token,
        start_of_text=token_to_id[START_OF_TEXT],
        end_of_text=token_to_id[END_OF_TEXT],
        pad=token_to_id[PAD],
        max_token_len=longest,
    )


def load_vocabulary(source: BinaryIO | bytes) -> Vocabulary:
    """Read a UTF-8, one-token-per-line vocabulary.

    Line index is the token id. The three special tokens are appended in the
    order start, end, pad when the file does not already list them.
    """
    data = source if isinstance(source, (bytes, bytearray)) else source.read()
    text = bytes(data).decode("utf-8")
    if not text:
        raise EmptyVocabularyError("vocabulary source is empty")
    lines = text.split("\n")
    if lines[-1] == "":
        lines.pop()
    lines = [ln[:-1] if ln.endswith("\r") else ln for ln in lines]
    for lineno, ln in enumerate(lines, start=1):
        if ln == "":
            raise EmptyVocabularyError(f"blank token at line {lineno}")
    return vocabulary_from_tokens(lines)


def load_vocabulary_file(path) -> Vocabulary:
    with open(path, "rb") as fh:
        return load_vocabulary(fh)


def save_vocabulary(vocab: Vocabulary, path) -> None:
    with open(path, "wb") as fh:
        fh.write(vocab.to_lines().encode("utf-8"))


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    vocab: Vocabulary = field(repr=False, compare=False)
    source_text: str = ""
    dropped_chars: int = 0

    def __len__(self) -> int:
        return len(self.ids)


def split_words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


def _greedy_pieces(word: str, vocab: Vocabulary) -> tuple[list[int], int]:
    ids: list[int] = []
    dropped = 0
    specials = vocab.special_ids
    i = 0
    n = len(word)
    while i < n:
        for j in range(min(n, i + vocab.max_token_len), i, -1):
            tid = vocab.token_to_id.get(word[i:j])
            if tid is not None and tid not in specials:
                ids.append(tid)
                i = j
                break
        else:
            dropped += 1
            i += 1
    return ids, dropped


def tokenize(text: str, vocab: Vocabulary) -> TokenSequence:
    """Lowercase, split on whitespace/punctuation, then greedy longest-match.

    Characters that no vocabulary piece covers are dropped and counted in
    ``dropped_chars``.
    """
    ids: list[int] = []
    dropped = 0
    for word in split_words(text):
        pieces, lost = _greedy_pieces(word, vocab)
        ids.extend(pieces)
        dropped += lost
    return TokenSequence(ids=tuple(ids), vocab=vocab, source_text=text, dropped_chars=dropped)


@dataclass(frozen=True)
class WindowBatch:
    windows: np.ndarray  # (n_windows, context_len) int64
    masks: np.ndarray  # (n_windows, context_len) bool
    starts: tuple[int, ...]
    context_len: int
    content_capacity: int
    stride: int

    def __len__(self) -> int:
        return len(self.starts)

    @property
    def eot_positions(self) -> np.ndarray:
        """Index of the end-of-text marker in each row (last valid position)."""
        return self.masks.sum(axis=1).astype(np.int64) - 1


def _check_window_args(context_len: int, stride: int) -> int:
    if context_len < 3:
        raise InvalidContextError(f"context_len must be >= 3, got {context_len}")
    capacity = context_len - 2
    if stride < 1 or stride > capacity:
        raise InvalidStrideError(
            f"stride must be in [1, {capacity}] for context_len {context_len}, got {stride}"
        )
    return capacity


def default_stride(context_len: int) -> int:
    """Half the content capacity, rounded up (about 50% overlap): 38 for 77."""
    return max(1, (context_len - 1) // 2)


def window_starts(sequence_length: int, content_capacity: int, stride: int) -> list[int]:
    if sequence_length <= content_capacity:
        return [0]
    starts = [0]
    last = sequence_length - content_capacity
    while starts[-1] < last:
        starts.append(min(starts[-1] + stride, last))
    return starts


def window_count(sequence_length: int, content_capacity: int, stride: int) -> int:
    """Number of windows ``make_windows`` emits, in closed form."""
    _check_window_args(content_capacity + 2, stride)
    if sequence_length <= content_capacity:
        return 1
    return 1 + math.ceil((sequence_length - content_capacity) / stride)


def make_windows(seq: TokenSequence, context_len: int = 77,
                 stride: int | None = None) -> WindowBatch:
    """Cut ``seq`` into overlapping windows of ``context_len`` tokens.

    Every row is ``[start, content..., end, pad...]``. A sequence that fits
    one window is padded; longer sequences get full windows at multiples of
    ``stride`` plus, when needed, a last window flush with the sequence end.
    """
    if stride is None:
        stride = default_stride(context_len)
    capacity = _check_window_args(context_len, stride)
    vocab = seq.vocab
    ids = seq.ids
    starts = window_starts(len(ids), capacity, stride)
    rows = np.full((len(starts), context_len), vocab.pad, dtype=np.int64)
    masks = np.zeros((len(starts), context_len), dtype=bool)
    for r, s in enumerate(starts):
        chunk = ids[s:s + capacity]
        rows[r, 0] = vocab.start_of_text
        rows[r, 1:1 + len(chunk)] = chunk
        rows[r, 1 + len(chunk)] = vocab.end_of_text
        masks[r, :2 + len(chunk)] = True
    return WindowBatch(
        windows=rows,
        masks=masks,
        starts=tuple(starts),
        context_len=context_len,
        content_capacity=capacity,
        stride=stride,
    )


def reconstruct(batch: WindowBatch) -> list[int]:
    """Reassemble content ids from a window batch, dropping overlaps."""
    out: list[int] = []
    for row, mask, start in zip(batch.windows, batch.masks, batch.starts):
        content = row[1:int(mask.sum()) - 1].tolist()
        out.extend(content[len(out) - start:])
    return out


def vocabulary_from_text(text: str) -> Vocabulary:
    return load_vocabulary(io.BytesIO(text.encode("utf-8")))
