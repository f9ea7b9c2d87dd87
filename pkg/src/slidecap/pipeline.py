"""Config-driven train and eval runs, shared by the CLI and the demos."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .checkpoint import atomic_write_bytes, load_checkpoint, save_checkpoint
from .config import RunConfig, format_config
from .data import DatasetManifest, generate_synthetic, load_manifest, load_pairs, split_dataset
from .encoders import EncoderConfig, init_params
from .errors import TrainingDivergedError
from .evaluation import DIRECTIONS, RecallReport, evaluate, render_report
from .training import TrainState, train


def dataset_manifest(cfg: RunConfig, image_size: int) -> DatasetManifest:
    """The configured manifest, generating the synthetic set under ``output_dir/data`` if asked."""
    if cfg.manifest is not None:
        return load_manifest(cfg.manifest)
    ds = generate_synthetic(cfg.synthetic_count, cfg.vocabulary(), cfg.synthetic_seed, image_size, cfg.data_dir)
    return ds.manifest


def select_split(manifest: DatasetManifest, split: str, seed: int) -> DatasetManifest:
    if split == "all":
        return manifest
    train_m, val_m, test_m = split_dataset(manifest, seed)
    return {"train": train_m, "val": val_m, "test": test_m}[split]


def load_split(cfg: RunConfig, split: str, enc: EncoderConfig):
    vocab = cfg.vocabulary()
    manifest = select_split(dataset_manifest(cfg, enc.image_size), split, cfg.split_seed)
    return load_pairs(manifest, vocab, enc.image_size)


def run_training(cfg: RunConfig, echo=None) -> TrainState:
    """Train from a seeded init; writes the checkpoint, a per-epoch log and the effective config.

    ``echo`` (a text stream) additionally receives each log line.
    """
    vocab = cfg.vocabulary()
    enc = cfg.encoder_config(len(vocab))
    ltc = cfg.long_text_config()
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    images, captions = load_split(cfg, cfg.train_split, enc)
    state = TrainState.fresh(init_params(enc, cfg.train.seed))
    atomic_write_bytes(cfg.output_dir / "config.effective.cfg", format_config(cfg).encode("utf-8"))

    with open(cfg.log_path, "w", encoding="utf-8") as log:
        sink = _Tee(log, echo)
        try:
            state = train(images, captions, state, cfg.train, enc, ltc, log=sink)
        except TrainingDivergedError as exc:
            if exc.state is not None:
                save_checkpoint(exc.state.params, cfg.output_dir / "checkpoint.diverged.lcm")
            raise
    save_checkpoint(state.params, cfg.checkpoint_path)
    return state


class _Tee:
    def __init__(self, *streams):
        self.streams = [s for s in streams if s is not None]

    def write(self, text):
        for s in self.streams:
            s.write(text)

    def flush(self):
        for s in self.streams:
            s.flush()


def run_evaluation(cfg: RunConfig, checkpoint: Path | None = None,
                   directions=None, write: bool = True) -> list[RecallReport]:
    """Recall@K for each direction; reports go to ``output_dir/report-<direction>.{txt,json}``."""
    vocab = cfg.vocabulary()
    enc = cfg.encoder_config(len(vocab))
    ltc = cfg.long_text_config()
    params = load_checkpoint(checkpoint or cfg.checkpoint_path, enc)
    images, captions = load_split(cfg, cfg.eval_split, enc)
    reports = []
    for direction in directions or (cfg.direction,):
        if direction not in DIRECTIONS:
            raise ValueError(f"unknown direction {direction!r}")
        report = evaluate(images, captions, params, enc, ltc, sample_size=cfg.sample_size,
                          seeds=cfg.eval_seeds, k_values=cfg.k_values, direction=direction,
                          dataset=cfg.dataset_name, split=cfg.eval_split)
        reports.append(report)
        if write:
            cfg.output_dir.mkdir(parents=True, exist_ok=True)
            stem = cfg.output_dir / f"report-{direction}"
            atomic_write_bytes(stem.with_suffix(".txt"), render_report(report, "table").encode("utf-8"))
            atomic_write_bytes(stem.with_suffix(".json"), render_report(report, "json").encode("utf-8"))
    return reports


def embedding_line(vec) -> str:
    return " ".join(f"{float(x):.9g}" for x in np.asarray(vec).ravel())
