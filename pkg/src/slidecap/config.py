"""Flat ``key = value`` run configuration shared by every CLI command."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .encoders import EncoderConfig
from .errors import ConfigError
from .evaluation import DEFAULT_K_VALUES, DEFAULT_SAMPLE_SIZE, DEFAULT_SEEDS, DIRECTIONS, IMAGE_TO_TEXT
from .longcap import LongTextConfig
from .textpipe import Vocabulary, load_vocabulary_file
from .training import TrainConfig

BUILTIN_VOCAB = "builtin:synthetic"
BUILTIN_CONFIGS = ("desk-defaults", "paper-defaults")
SPLITS = ("all", "train", "val", "test")

# keys forwarded to EncoderConfig (vocab_size comes from the vocabulary)
ENCODER_KEYS = tuple(f.name for f in dataclasses.fields(EncoderConfig) if f.name != "vocab_size")
TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig))


@dataclass
class RunConfig:
    """Everything a train/eval run needs. Paths are absolute once loaded."""

    encoder: dict = field(default_factory=dict)
    stride: int | None = None
    normalize_before_mean: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)
    sample_size: int = DEFAULT_SAMPLE_SIZE
    eval_seeds: tuple[int, ...] = DEFAULT_SEEDS
    k_values: tuple[int, ...] = DEFAULT_K_VALUES
    direction: str = IMAGE_TO_TEXT
    eval_split: str = "test"
    train_split: str = "train"
    split_seed: int = 0
    dataset_name: str = "synthetic"
    vocab: str = BUILTIN_VOCAB
    manifest: Path | None = None
    synthetic_count: int = 0
    synthetic_seed: int = 0
    output_dir: Path = Path("runs")
    source: Path | None = None

    def vocabulary(self) -> Vocabulary:
        if self.vocab == BUILTIN_VOCAB:
            from .data import synthetic_vocabulary
            return synthetic_vocabulary()
        return load_vocabulary_file(self.vocab)

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(vocab_size=vocab_size, **self.encoder)

    def long_text_config(self) -> LongTextConfig:
        return LongTextConfig(context_len=self.encoder.get("context_len", 77), stride=self.stride,
                              normalize_before_mean=self.normalize_before_mean)

    @property
    def data_dir(self) -> Path:
        return self.output_dir / "data"

    @property
    def checkpoint_path(self) -> Path:
        return self.output_dir / "checkpoint.lcm"

    @property
    def log_path(self) -> Path:
        return self.output_dir / "train_log.tsv"


def _as_int(key, text):
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {text!r}", key) from None


def _as_float(key, text):
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {text!r}", key) from None


def _as_bool(key, text):
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"{key}: expected true/false, got {text!r}", key)


def _as_int_list(key, text):
    items = [t for t in text.replace(",", " ").split() if t]
    if not items:
        raise ConfigError(f"{key}: expected at least one integer", key)
    return tuple(_as_int(key, t) for t in items)


def parse_pairs(text: str, origin: str = "<config>") -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; later keys override earlier ones."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{origin}:{lineno}: empty key")
        out[key] = value
    return out


def builtin_config_text(name: str) -> str:
    if name not in BUILTIN_CONFIGS:
        raise ConfigError(f"unknown builtin config {name!r}")
    return resources.files("slidecap.resources").joinpath(f"{name}.cfg").read_text(encoding="utf-8")


def build_config(pairs: dict[str, str], base_dir: Path, check_paths: bool = True) -> RunConfig:
    """Turn raw pairs into a validated RunConfig; relative paths resolve against ``base_dir``."""
    cfg = RunConfig()
    train_kwargs = {}
    for key, value in pairs.items():
        if key in ENCODER_KEYS:
            cfg.encoder[key] = (_as_float if key == "init_gain" else _as_int)(key, value)
        elif key in TRAIN_KEYS:
            conv = _as_int if key in ("epochs", "batch_size", "seed") else _as_float
            train_kwargs[key] = conv(key, value)
        elif key == "stride":
            cfg.stride = None if value in ("", "default") else _as_int(key, value)
        elif key == "normalize_before_mean":
            cfg.normalize_before_mean = _as_bool(key, value)
        elif key in ("sample_size", "split_seed", "synthetic_count", "synthetic_seed"):
            setattr(cfg, key, _as_int(key, value))
        elif key in ("eval_seeds", "k_values"):
            setattr(cfg, key, _as_int_list(key, value))
        elif key == "direction":
            if value not in DIRECTIONS:
                raise ConfigError(f"direction: expected one of {DIRECTIONS}, got {value!r}", key)
            cfg.direction = value
        elif key in ("eval_split", "train_split"):
            if value not in SPLITS:
                raise ConfigError(f"{key}: expected one of {SPLITS}, got {value!r}", key)
            setattr(cfg, key, value)
        elif key == "dataset_name":
            cfg.dataset_name = value
        elif key == "vocab":
            cfg.vocab = value if value == BUILTIN_VOCAB else str(base_dir / value)
        elif key == "manifest":
            cfg.manifest = (base_dir / value) if value else None
        elif key == "output_dir":
            cfg.output_dir = base_dir / value
        else:
            raise ConfigError(f"unknown config key {key!r}", key)

    try:
        cfg.train = TrainConfig(**train_kwargs)
    except ValueError as exc:
        raise ConfigError(f"{_field_in(exc, TRAIN_KEYS)}: {exc}", _field_in(exc, TRAIN_KEYS)) from None
    try:
        cfg.encoder_config(vocab_size=4)
    except ValueError as exc:
        raise ConfigError(f"{_field_in(exc, ENCODER_KEYS)}: {exc}", _field_in(exc, ENCODER_KEYS)) from None
    try:
        cfg.long_text_config()
    except ValueError as exc:
        raise ConfigError(f"stride: {exc}", "stride") from None

    if cfg.sample_size < max(cfg.k_values):
        raise ConfigError("sample_size must be at least the largest k", "sample_size")
    if min(cfg.k_values) < 1:
        raise ConfigError("k_values must be positive", "k_values")
    if cfg.synthetic_count < 0 or cfg.synthetic_count == 1:
        raise ConfigError("synthetic_count must be 0 or >= 2", "synthetic_count")
    if cfg.manifest is None and cfg.synthetic_count == 0:
        raise ConfigError("set either manifest or synthetic_count", "manifest")
    if cfg.manifest is not None and cfg.synthetic_count:
        raise ConfigError("manifest and synthetic_count are mutually exclusive", "synthetic_count")
    if check_paths:
        if cfg.manifest is not None and not cfg.manifest.is_file():
            raise ConfigError(f"manifest: no such file {cfg.manifest}", "manifest")
        if cfg.vocab != BUILTIN_VOCAB and not Path(cfg.vocab).is_file():
            raise ConfigError(f"vocab: no such file {cfg.vocab}", "vocab")
    return cfg


def _field_in(exc: Exception, keys) -> str | None:
    msg = str(exc)
    # longest first so "text_heads" is not reported as "heads"
    for key in sorted(keys, key=len, reverse=True):
        if key in msg:
            return key
    return None


def load_config(source: str, overrides: dict[str, str] | None = None,
                output_dir: str | None = None, check_paths: bool = True) -> RunConfig:
    """Load a config file (or a builtin name) and apply ``key=value`` overrides.

    Relative paths in the file resolve against the file's directory; paths in
    overrides and ``output_dir`` resolve against the working directory.
    """
    if source in BUILTIN_CONFIGS:
        pairs = parse_pairs(builtin_config_text(source), source)
        base = Path.cwd()
        path = None
    else:
        path = Path(source)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {source}: {exc.strerror}") from None
        pairs = parse_pairs(text, source)
        base = path.resolve().parent
    cfg_pairs = dict(pairs)
    cwd = Path.cwd()
    for key, value in (overrides or {}).items():
        if key in ("vocab", "manifest", "output_dir") and value and value != BUILTIN_VOCAB:
            value = str((cwd / value).resolve())
        cfg_pairs[key] = value
    if output_dir is not None:
        cfg_pairs["output_dir"] = str((cwd / output_dir).resolve())
    elif "output_dir" not in cfg_pairs:
        # shipped configs leave it out so runs land under the caller's ./runs
        stem = source if path is None else path.stem
        cfg_pairs["output_dir"] = str(cwd / "runs" / stem)
    cfg = build_config(cfg_pairs, base, check_paths)
    cfg.source = path
    return cfg


def format_config(cfg: RunConfig) -> str:
    """Effective settings as a ``key = value`` file, written next to run outputs."""
    lines = [f"{k} = {v}" for k, v in cfg.encoder.items()]
    lines += [f"{f.name} = {getattr(cfg.train, f.name)!r}" for f in dataclasses.fields(TrainConfig)]
    lines += [
        f"stride = {'default' if cfg.stride is None else cfg.stride}",
        f"normalize_before_mean = {str(cfg.normalize_before_mean).lower()}",
        f"sample_size = {cfg.sample_size}",
        f"eval_seeds = {','.join(map(str, cfg.eval_seeds))}",
        f"k_values = {','.join(map(str, cfg.k_values))}",
        f"direction = {cfg.direction}",
        f"train_split = {cfg.train_split}",
        f"eval_split = {cfg.eval_split}",
        f"split_seed = {cfg.split_seed}",
        f"dataset_name = {cfg.dataset_name}",
        f"vocab = {cfg.vocab}",
    ]
    if cfg.manifest is not None:
        lines.append(f"manifest = {cfg.manifest}")
    else:
        lines += [f"synthetic_count = {cfg.synthetic_count}", f"synthetic_seed = {cfg.synthetic_seed}"]
    lines.append(f"output_dir = {cfg.output_dir}")
    return "\n".join(lines) + "\n"
