"""Dataset manifests, image decoding, splits, and the synthetic long-caption set.

Manifest files hold one JSON object per line with ``id``, ``image_path``
(relative to the manifest's directory) and ``caption``. Images are binary
PPM/PGM (P6/P5, 8-bit) or the raw float container::

    b"LCI1", height, width, channels (uint32 LE), float32 LE values (row-major)
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    DatasetTooSmallError,
    DuplicateIdError,
    ImageFormatError,
    ManifestParseError,
    TruncatedImageError,
)
from .textpipe import Vocabulary, load_vocabulary, tokenize

RAW_MAGIC = b"LCI1"
# split ratios taken from the 65K / 8K / 8K train/val/test sizes
SPLIT_PARTS = (65, 8, 8)


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    image_path: str
    caption: str


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def resolve(self, record: ManifestRecord) -> Path:
        return self.root / record.image_path


@dataclass
class Sample:
    id: str
    image: np.ndarray
    caption: str


# ---------------------------------------------------------------------------
# manifests


def load_manifest(path) -> DatasetManifest:
    """Parse a JSONL manifest; blank lines are skipped, order is preserved."""
    path = Path(path)
    records: list[ManifestRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestParseError(f"invalid JSON ({exc.msg})", lineno) from None
            if not isinstance(obj, dict):
                raise ManifestParseError("expected a JSON object", lineno)
            for key in ("id", "image_path", "caption"):
                if not isinstance(obj.get(key), str):
                    raise ManifestParseError(f"field {key!r} missing or not a string", lineno)
            if obj["id"] in seen:
                raise DuplicateIdError(f"duplicate id {obj['id']!r} at line {lineno}")
            seen.add(obj["id"])
            records.append(ManifestRecord(obj["id"], obj["image_path"], obj["caption"]))
    return DatasetManifest(records, path.parent)


def write_manifest(manifest: DatasetManifest, path) -> None:
    lines = [json.dumps({"id": r.id, "image_path": r.image_path, "caption": r.caption},
                        ensure_ascii=False) for r in manifest.records]
    Path(path).write_text("".join(ln + "\n" for ln in lines), encoding="utf-8")


def split_dataset(manifest: DatasetManifest, seed: int) -> tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    """Seeded shuffle, then train/val/test in 65:8:8 proportions.

    Validation and test sizes are rounded down; train takes the remainder.
    """
    n = len(manifest)
    if n < 3:
        raise DatasetTooSmallError(f"need at least 3 records to split, got {n}")
    total = sum(SPLIT_PARTS)
    n_val = n * SPLIT_PARTS[1] // total
    n_test = n * SPLIT_PARTS[2] // total
    n_train = n - n_val - n_test
    order = np.random.default_rng(seed).permutation(n)
    recs = [manifest.records[i] for i in order]
    parts = (recs[:n_train], recs[n_train:n_train + n_val], recs[n_train + n_val:])
    return tuple(DatasetManifest(list(p), manifest.root) for p in parts)


# ---------------------------------------------------------------------------
# images


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise TruncatedImageError("truncated PNM header")
    return data[start:pos], pos


def decode_pnm(data: bytes) -> np.ndarray:
    magic = data[:2]
    channels = {b"P6": 3, b"P5": 1}.get(magic)
    if channels is None:
        raise ImageFormatError("not a binary PPM/PGM file")
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _read_token(data, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise ImageFormatError(f"bad PNM header field {tok!r}") from None
    width, height, maxval = fields
    if not 0 < maxval < 256:
        raise ImageFormatError(f"only 8-bit PNM is supported (maxval {maxval})")
    if width <= 0 or height <= 0:
        raise ImageFormatError("PNM dimensions must be positive")
    pos += 1  # single whitespace byte after maxval
    need = width * height * channels
    body = data[pos:pos + need]
    if len(body) < need:
        raise TruncatedImageError(f"PNM body has {len(body)} of {need} bytes")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(height, width, channels)
    return arr.astype(np.float32) / np.float32(maxval)


def encode_ppm(pixels: np.ndarray) -> bytes:
    """8-bit P6 encoding of an H x W x 3 image in [0, 1] (values are rounded)."""
    pixels = np.asarray(pixels)
    h, w, _ = pixels.shape
    body = np.clip(np.rint(pixels * 255), 0, 255).astype(np.uint8).tobytes()
    return f"P6\n{w} {h}\n255\n".encode("ascii") + body


def decode_raw(data: bytes) -> np.ndarray:
    if data[:4] != RAW_MAGIC:
        raise ImageFormatError("not a raw tensor image")
    if len(data) < 16:
        raise TruncatedImageError("truncated raw image header")
    h, w, c = struct.unpack_from("<III", data, 4)
    if c not in (1, 3):
        raise ImageFormatError(f"raw image must have 1 or 3 channels, got {c}")
    need = h * w * c * 4
    if len(data) - 16 < need:
        raise TruncatedImageError(f"raw image body has {len(data) - 16} of {need} bytes")
    return np.frombuffer(data, dtype="<f4", count=h * w * c, offset=16).reshape(h, w, c).astype(np.float32)


def encode_raw(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels, dtype="<f4")
    if pixels.ndim == 2:
        pixels = pixels[..., None]
    h, w, c = pixels.shape
    return RAW_MAGIC + struct.pack("<III", h, w, c) + np.ascontiguousarray(pixels).tobytes()


def resize_nearest(pixels: np.ndarray, size: int) -> np.ndarray:
    """Nearest neighbour with floor scaling: output (i, j) reads input (i*H//size, j*W//size)."""
    h, w = pixels.shape[:2]
    if (h, w) == (size, size):
        return pixels
    rows = np.arange(size) * h // size
    cols = np.arange(size) * w // size
    return pixels[rows][:, cols]


def decode_image(data: bytes, target_size: int | None = None) -> np.ndarray:
    if data[:4] == RAW_MAGIC:
        pixels = decode_raw(data)
    elif data[:2] in (b"P6", b"P5"):
        pixels = decode_pnm(data)
    else:
        raise ImageFormatError("unsupported image format (expected P6/P5 PNM or LCI1 raw)")
    if pixels.shape[2] == 1:
        pixels = np.repeat(pixels, 3, axis=2)
    if target_size is not None:
        pixels = resize_nearest(pixels, target_size)
    return pixels


def load_image(path, target_size: int | None = None) -> np.ndarray:
    """Decode an image file to float32 H x W x 3 in [0, 1]."""
    return decode_image(Path(path).read_bytes(), target_size)


def load_samples(manifest: DatasetManifest, image_size: int) -> list[Sample]:
    return [Sample(r.id, load_image(manifest.resolve(r), image_size), r.caption) for r in manifest]


def load_pairs(manifest: DatasetManifest, vocab: Vocabulary, image_size: int):
    """Images stacked as (N, S, S, 3) plus tokenized captions, in manifest order."""
    samples = load_samples(manifest, image_size)
    images = np.stack([s.image for s in samples]) if samples else np.zeros((0, image_size, image_size, 3), np.float32)
    return images, [tokenize(s.caption, vocab) for s in samples]


# ---------------------------------------------------------------------------
# synthetic long-caption dataset

COLORS = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (40, 70, 220),
    "yellow": (235, 220, 50),
    "cyan": (50, 210, 220),
    "magenta": (210, 50, 200),
    "white": (245, 245, 245),
    "black": (15, 15, 15),
    "gray": (128, 128, 128),
    "orange": (245, 140, 30),
    "purple": (120, 50, 160),
    "brown": (120, 75, 35),
}
SHAPES = ("square", "circle", "triangle", "cross")
SIZES = ("small", "large")
ROWS = ("top", "bottom")
COLS = ("left", "right")

_FILLER = (
    "this synthetic study was rendered for a controlled retrieval experiment",
    "no additional structures are visible anywhere else in the field of view",
    "the acquisition used the standard procedural protocol with fixed parameters",
    "edges of every object are sharp and there is no motion artifact",
    "the exposure is uniform and the contrast is adequate for interpretation",
    "there is no text overlay annotation or marker on the rendered frame",
    "the findings described here are stable compared with the prior study",
    "the remaining area shows homogeneous signal without any focal abnormality",
    "the overall composition is simple and intended for matching captions to images",
    "no measurement lines calipers or arrows were added by the operator",
    "image quality is diagnostic and the frame is fully included in the scan",
    "the reader should compare this description with the rendered scene",
)
_SENTENCE_WORDS = (
    "the image shows a background",
    "the background of the frame is colored",
    "there is a object located in region of the frame",
    "the is and",
    "a sits at the",
    "near it one can also see a",
    "in summary this scene contains on field",
    "and one two three shape shapes with",
)


def synthetic_words() -> list[str]:
    """Every word the synthetic caption templates can emit, in first-seen order."""
    words: list[str] = []
    pieces = list(COLORS) + list(SHAPES) + list(SIZES) + list(ROWS) + list(COLS)
    for text in list(_SENTENCE_WORDS) + list(_FILLER) + pieces:
        for w in text.split():
            if w not in words:
                words.append(w)
    return words


def synthetic_vocabulary() -> Vocabulary:
    """Bundled vocabulary: template words, then single letters and digits."""
    data = resources.files("slidecap.resources").joinpath("synthetic_vocab.txt").read_bytes()
    return load_vocabulary(data)


def synthetic_vocab_lines() -> str:
    words = synthetic_words()
    singles = [c for c in "abcdefghijklmnopqrstuvwxyz0123456789" if c not in words]
    return "".join(w + "\n" for w in words + singles)


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    color: str
    size: str
    row: str
    col: str


@dataclass(frozen=True)
class SceneAttributes:
    background: str
    shapes: tuple[ShapeSpec, ...]

    def layout(self) -> tuple:
        """Background plus the colour in each occupied cell: what the pixels most obviously show."""
        return (self.background,) + tuple(sorted((s.row, s.col, s.color) for s in self.shapes))

    def keywords(self) -> frozenset[str]:
        words = {self.background}
        for s in self.shapes:
            words.update((s.kind, s.color, s.size, s.row, s.col))
        return frozenset(words)

    def to_dict(self) -> dict:
        return {"background": self.background,
                "shapes": [s.__dict__.copy() for s in self.shapes]}


def attribute_keywords() -> frozenset[str]:
    return frozenset(list(COLORS) + list(SHAPES) + list(SIZES) + list(ROWS) + list(COLS))


def _draw_scene(rng: np.random.Generator) -> SceneAttributes:
    names = list(COLORS)
    background = names[rng.integers(len(names))]
    n_shapes = int(rng.integers(1, 4))
    cells = rng.permutation(len(ROWS) * len(COLS))[:n_shapes]
    shapes = []
    for cell in cells:
        color = background
        while color == background:
            color = names[rng.integers(len(names))]
        shapes.append(ShapeSpec(
            kind=SHAPES[rng.integers(len(SHAPES))],
            color=color,
            size=SIZES[rng.integers(len(SIZES))],
            row=ROWS[cell // len(COLS)],
            col=COLS[cell % len(COLS)],
        ))
    return SceneAttributes(background, tuple(shapes))


def render_scene(attrs: SceneAttributes, image_size: int) -> np.ndarray:
    """uint8 H x W x 3 rendering of a scene on the placement grid."""
    img = np.empty((image_size, image_size, 3), dtype=np.uint8)
    img[:] = COLORS[attrs.background]
    cell_h = image_size / len(ROWS)
    cell_w = image_size / len(COLS)
    cell = min(cell_h, cell_w)
    yy, xx = np.mgrid[0:image_size, 0:image_size] + 0.5
    for s in attrs.shapes:
        cy = (ROWS.index(s.row) + 0.5) * cell_h
        cx = (COLS.index(s.col) + 0.5) * cell_w
        r = cell * (0.48 if s.size == "large" else 0.28)
        dy, dx = yy - cy, xx - cx
        if s.kind == "square":
            hit = (np.abs(dx) <= r) & (np.abs(dy) <= r)
        elif s.kind == "circle":
            hit = dx * dx + dy * dy <= r * r
        elif s.kind == "triangle":
            hit = (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2)
        else:
            arm = max(r / 3, 0.75)
            hit = ((np.abs(dx) <= arm) | (np.abs(dy) <= arm)) & (np.abs(dx) <= r) & (np.abs(dy) <= r)
        img[hit] = COLORS[s.color]
    return img


def _shape_sentences(s: ShapeSpec) -> list[str]:
    return [
        f"there is a {s.size} {s.color} {s.kind} located in the {s.row} {s.col} region of the frame",
        f"the {s.kind} is {s.color} and {s.size}",
        f"a {s.color} {s.kind} sits at the {s.row} {s.col}",
    ]


def describe_scene(attrs: SceneAttributes, rng: np.random.Generator, vocab: Vocabulary,
                   min_tokens: int = 120, max_tokens: int = 300) -> str:
    """Verbose caption that restates the scene attributes in varied phrasings.

    Sentences describing the background and each shape are drawn at random,
    with occasional neutral filler, until a target length in
    ``[min_tokens + 20, max_tokens - 40)`` is reached; a summary closes it.
    """
    counts = ("one", "two", "three")
    plural = "shape" if len(attrs.shapes) == 1 else "shapes"
    summary = (f"in summary this scene contains {counts[len(attrs.shapes) - 1]} {plural} "
               f"on a {attrs.background} field with "
               + " and ".join(f"{s.size} {s.color} {s.kind}" for s in attrs.shapes))
    pool = [f"the image shows a {attrs.background} background",
            f"the background of the frame is colored {attrs.background}"]
    for s in attrs.shapes:
        pool += _shape_sentences(s)
    target = int(rng.integers(min_tokens + 20, max_tokens - 40))
    # every attribute sentence appears once, in a shuffled order, before any repeats
    body = [pool[i] for i in rng.permutation(len(pool))]
    used = sum(len(tokenize(x, vocab)) for x in body) + len(tokenize(summary, vocab))
    while used < target:
        if rng.random() < 0.25:
            sentence = _FILLER[int(rng.integers(len(_FILLER)))]
        else:
            sentence = pool[int(rng.integers(len(pool)))]
        body.append(sentence)
        used += len(tokenize(sentence, vocab))
    body.append(summary)
    return ". ".join(body) + "."


@dataclass
class SyntheticDataset:
    manifest: DatasetManifest
    attributes: list[SceneAttributes]


def generate_synthetic(count: int, vocab: Vocabulary, seed: int, image_size: int,
                       out_dir) -> SyntheticDataset:
    """Write ``count`` procedurally drawn images and their long captions.

    Files: ``images/NNNNN.ppm``, ``manifest.jsonl`` and ``attributes.jsonl``
    under ``out_dir``. Scenes are redrawn until every sample has a distinct
    attribute keyword set and a distinct colour layout, so each caption
    identifies exactly one image.
    """
    if count < 2:
        raise ValueError(f"count must be >= 2, got {count}")
    missing = [w for w in synthetic_words() if w not in vocab.token_to_id]
    if missing:
        raise ValueError(f"vocabulary lacks synthetic caption words: {missing[:5]}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    width = max(5, len(str(count - 1)))
    seen: set = set()
    records, attributes = [], []
    for i in range(count):
        attrs = _draw_scene(rng)
        while attrs.keywords() in seen or attrs.layout() in seen:
            attrs = _draw_scene(rng)
        seen.add(attrs.keywords())
        seen.add(attrs.layout())
        caption = describe_scene(attrs, rng, vocab)
        rel = f"images/{i:0{width}d}.ppm"
        (out / rel).write_bytes(encode_ppm(render_scene(attrs, image_size) / 255.0))
        records.append(ManifestRecord(f"syn-{i:0{width}d}", rel, caption))
        attributes.append(attrs)
    manifest = DatasetManifest(records, out)
    write_manifest(manifest, out / "manifest.jsonl")
    with open(out / "attributes.jsonl", "w", encoding="utf-8") as fh:
        for rec, attrs in zip(records, attributes):
            fh.write(json.dumps({"id": rec.id, **attrs.to_dict()}) + "\n")
    return SyntheticDataset(manifest, attributes)


def write_splits(manifest: DatasetManifest, seed: int, out_dir=None) -> dict[str, Path]:
    """Split and write ``train.jsonl``/``val.jsonl``/``test.jsonl`` next to the images."""
    out = Path(out_dir) if out_dir is not None else manifest.root
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, part in zip(("train", "val", "test"), split_dataset(manifest, seed)):
        rel = [ManifestRecord(r.id, os.path.relpath(manifest.root / r.image_path, out), r.caption)
               for r in part.records]
        path = out / f"{name}.jsonl"
        write_manifest(DatasetManifest(rel, out), path)
        paths[name] = path
    return paths

