"""Recall@K retrieval evaluation over seeded samples of image/caption pairs."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .encoders import EncoderConfig, ModelParams, encode_images, normalize
from .errors import DatasetTooSmallError, InvalidKError, ShapeError
from .longcap import LongTextConfig, encode_caption_batch
from .textpipe import TokenSequence

IMAGE_TO_TEXT = "image-to-text"
TEXT_TO_IMAGE = "text-to-image"
DIRECTIONS = (IMAGE_TO_TEXT, TEXT_TO_IMAGE)
DEFAULT_K_VALUES = (1, 5, 10, 20)
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
DEFAULT_SAMPLE_SIZE = 2000

# Published Recall@K (percent) with standard errors, shown for orientation only.
REFERENCE_ROWS = {
    "ROCO": [
        ("PubMedCLIP/RN50", [(7.1, 0.11), (21, 0.21), (32, 0.24), (45, 0.15)]),
        ("PubMedCLIP/RN50x4", [(7.7, 0.12), (23, 0.25), (34, 0.55), (48, 0.43)]),
        ("PubMedCLIP/ViT32", [(8.5, 0.17), (26, 0.32), (38, 0.22), (53, 0.45)]),
        ("MedICaT-SciBERT", [(7.6, 0.59), (26, 1.6), (41, 1.6), (58, 1.3)]),
        ("ClipMD", [(17, 0.35), (40, 0.44), (54, 0.37), (68, 0.49)]),
    ],
    "MedICaT": [
        ("CLIP/ViT32", [(3.2, 0.19), (9, 0.19), (13, 0.11), (19, 0.16)]),
        ("ClipMD", [(29, 0.43), (57, 0.44), (69, 0.44), (79, 0.58)]),
    ],
}
REFERENCE_K_VALUES = (1, 5, 10, 20)


@dataclass(frozen=True)
class SimilarityMatrix:
    values: np.ndarray
    direction: str = IMAGE_TO_TEXT

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ShapeError(f"similarity matrix must be square, got {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("similarity matrix has non-finite entries")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"unknown direction {self.direction!r}")

    @property
    def size(self) -> int:
        return self.values.shape[0]


def similarity_matrix(image_embs, text_embs, direction: str = IMAGE_TO_TEXT) -> SimilarityMatrix:
    """Inner products of queries (rows) against candidates (columns)."""
    image_embs = np.asarray(image_embs, dtype=np.float64)
    text_embs = np.asarray(text_embs, dtype=np.float64)
    if image_embs.shape != text_embs.shape or image_embs.ndim != 2:
        raise ShapeError(f"embedding shapes differ: {image_embs.shape} vs {text_embs.shape}")
    if direction == IMAGE_TO_TEXT:
        values = image_embs @ text_embs.T
    elif direction == TEXT_TO_IMAGE:
        values = text_embs @ image_embs.T
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return SimilarityMatrix(values, direction)


def true_match_ranks(values: np.ndarray) -> np.ndarray:
    """0-based rank of the diagonal entry in each row; ties go to the lower column index."""
    values = np.asarray(values)
    diag = np.diagonal(values)[:, None]
    cols = np.arange(values.shape[1])[None, :]
    rows = np.arange(values.shape[0])[:, None]
    ahead = (values > diag) | ((values == diag) & (cols < rows))
    return ahead.sum(axis=1)


def recall_at_k(sim: SimilarityMatrix | np.ndarray, k: int) -> float:
    """Fraction of queries whose true candidate is among the ``k`` best in its row."""
    values = sim.values if isinstance(sim, SimilarityMatrix) else np.asarray(sim)
    n = values.shape[0]
    if not 1 <= k <= n:
        raise InvalidKError(f"k must be in [1, {n}], got {k}")
    return float((true_match_ranks(values) < k).mean())


def mean_and_stderr(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sigma/sqrt(n) with the n-1 sample deviation; n == 1 gives stderr 0."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("no values")
    mean = float(arr.mean())
    if arr.size == 1:
        return mean, 0.0
    return mean, float(arr.std(ddof=1) / math.sqrt(arr.size))


@dataclass
class RecallReport:
    dataset: str
    direction: str
    k_values: list[int]
    seeds: list[int]
    sample_size: int
    per_seed: dict[int, list[float]]
    means: dict[int, float] = field(default_factory=dict)
    stderrs: dict[int, float] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.k_values:
            raise ValueError("k_values must not be empty")
        if not self.seeds:
            raise ValueError("seeds must not be empty")
        for k in self.k_values:
            vals = self.per_seed[k]
            if len(vals) != len(self.seeds):
                raise ValueError(f"K={k}: {len(vals)} per-seed values for {len(self.seeds)} seeds")
            if k not in self.means or k not in self.stderrs:
                self.means[k], self.stderrs[k] = mean_and_stderr(vals)
            if not 0.0 <= self.means[k] <= 1.0 or self.stderrs[k] < 0:
                raise ValueError(f"K={k}: mean/stderr out of range")

    def to_json_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "direction": self.direction,
            "sample_size": self.sample_size,
            "seeds": list(self.seeds),
            "k_values": list(self.k_values),
            "per_k": [
                {"k": k, "mean": self.means[k], "stderr": self.stderrs[k],
                 "per_seed": list(self.per_seed[k])}
                for k in self.k_values
            ],
            "metadata": self.metadata,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "RecallReport":
        per_k = {int(e["k"]): e for e in d["per_k"]}
        ks = [int(k) for k in d["k_values"]]
        return cls(
            dataset=d["dataset"],
            direction=d["direction"],
            k_values=ks,
            seeds=[int(s) for s in d["seeds"]],
            sample_size=int(d["sample_size"]),
            per_seed={k: [float(x) for x in per_k[k]["per_seed"]] for k in ks},
            means={k: float(per_k[k]["mean"]) for k in ks},
            stderrs={k: float(per_k[k]["stderr"]) for k in ks},
            metadata=d.get("metadata", {}),
        )


def embed_pairs(images, captions: Sequence[TokenSequence], params: ModelParams,
                cfg: EncoderConfig, ltc: LongTextConfig, chunk: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Unit-norm image and caption embeddings, in input order."""
    images = np.asarray(images)
    img = [normalize(encode_images(images[i:i + chunk], params, cfg)) for i in range(0, len(images), chunk)]
    txt = encode_caption_batch(captions, params, cfg, ltc)
    return np.concatenate(img), np.stack(txt)


def evaluate(images, captions: Sequence[TokenSequence], params: ModelParams, cfg: EncoderConfig,
             ltc: LongTextConfig, sample_size: int = DEFAULT_SAMPLE_SIZE,
             seeds: Sequence[int] = DEFAULT_SEEDS, k_values: Sequence[int] = DEFAULT_K_VALUES,
             direction: str = IMAGE_TO_TEXT, dataset: str = "unnamed",
             split: str = "test") -> RecallReport:
    """Recall@K averaged over seeds.

    For each seed, ``min(sample_size, len(split))`` pairs are drawn without
    replacement and every sampled query is ranked against all sampled
    candidates. Embeddings are computed once for the whole split.
    """
    n = len(captions)
    k_values = [int(k) for k in k_values]
    if not k_values:
        raise ValueError("k_values must not be empty")
    if n == 0:
        raise DatasetTooSmallError("evaluation split is empty")
    if n < max(k_values):
        raise DatasetTooSmallError(f"split has {n} pairs but max K is {max(k_values)}")
    if sample_size < max(k_values):
        raise ValueError(f"sample_size {sample_size} is smaller than max K {max(k_values)}")
    if direction not in DIRECTIONS:
        raise ValueError(f"unknown direction {direction!r}")
    img, txt = embed_pairs(images, captions, params, cfg, ltc)
    m = min(sample_size, n)
    per_seed: dict[int, list[float]] = {k: [] for k in k_values}
    for seed in seeds:
        idx = np.random.default_rng(seed).choice(n, size=m, replace=False)
        sim = similarity_matrix(img[idx], txt[idx], direction)
        for k in k_values:
            per_seed[k].append(recall_at_k(sim, k))
    metadata = {
        "split": split,
        "candidate_pool": m,
        "stderr": "sample std (n-1) / sqrt(n); 0 when n == 1",
        "single_seed": len(seeds) == 1,
    }
    return RecallReport(dataset=dataset, direction=direction, k_values=k_values,
                        seeds=[int(s) for s in seeds], sample_size=m,
                        per_seed=per_seed, metadata=metadata)


def format_cell(mean: float, stderr: float) -> str:
    """Percent display ``mean±stderr``, e.g. 0.17 / 0.0035 -> ``17.0±0.35``."""
    return f"{100 * mean:.1f}±{100 * stderr:.2f}"


def render_report(report: RecallReport, fmt: str = "table", references: bool = True) -> str:
    if fmt == "json":
        return json.dumps(report.to_json_dict(), indent=2, sort_keys=False) + "\n"
    if fmt != "table":
        raise ValueError(f"unknown format {fmt!r}")
    name = f"{report.dataset} ({report.direction})"
    header = ["Name"] + [f"R@{k}" for k in report.k_values]
    body = [[name] + [format_cell(report.means[k], report.stderrs[k]) for k in report.k_values]]
    lines = [f"Recall@K on {report.dataset}: {len(report.seeds)} seeds, "
             f"{report.sample_size} sampled pairs, {report.direction}"]
    lines += _table(header, body)
    if references:
        lines.append("")
        lines.append("Published reference values (not reproduced at desk scale):")
        ref_header = ["Name"] + [f"R@{k}" for k in REFERENCE_K_VALUES]
        ref_body = [[f"{ds}: {model}"] + [f"{m:g}±{e:g}" for m, e in cells]
                    for ds, rows in REFERENCE_ROWS.items() for model, cells in rows]
        lines += _table(ref_header, ref_body)
    return "\n".join(lines) + "\n"


def _table(header, rows) -> list[str]:
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]

    def fmt(r):
        return "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))

    return [fmt(header), "  ".join("-" * w for w in widths)] + [fmt(r) for r in rows]


def parse_report_json(text: str) -> RecallReport:
    return RecallReport.from_json_dict(json.loads(text))
