"""``slidecap`` command line.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .config import BUILTIN_VOCAB, RunConfig, load_config
from .errors import ConfigError, SlidecapError
from .evaluation import DIRECTIONS, parse_report_json, render_report

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; the contract reserves 2 for runtime failures
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _vocabulary(spec: str):
    from .textpipe import load_vocabulary_file
    if spec == BUILTIN_VOCAB:
        from .data import synthetic_vocabulary
        return synthetic_vocabulary()
    if not Path(spec).is_file():
        raise UsageError(f"vocabulary file not found: {spec}")
    return load_vocabulary_file(spec)


def _overrides(pairs) -> dict[str, str]:
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _run_config(args) -> RunConfig:
    return load_config(args.config, _overrides(args.set), args.output_dir)


def _text_arg(args) -> str:
    if args.file is not None:
        try:
            return Path(args.file).read_text(encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot read {args.file}: {exc.strerror}") from None
    return args.text if args.text is not None else ""


# -- commands -----------------------------------------------------------------

def cmd_tokenize(args) -> int:
    from .textpipe import tokenize
    seq = tokenize(_text_arg(args), _vocabulary(args.vocab))
    print(" ".join(map(str, seq.ids)))
    if seq.dropped_chars:
        print(f"warning: {seq.dropped_chars} characters had no vocabulary match", file=sys.stderr)
    return EXIT_OK


def cmd_windows(args) -> int:
    from .errors import InvalidContextError, InvalidStrideError
    from .textpipe import make_windows, tokenize
    seq = tokenize(_text_arg(args), _vocabulary(args.vocab))
    try:
        batch = make_windows(seq, args.context_len, args.stride)
    except InvalidStrideError as exc:
        raise UsageError(f"invalid stride: {exc}") from None
    except InvalidContextError as exc:
        raise UsageError(f"invalid context length: {exc}") from None
    print(f"tokens\t{len(seq)}")
    print(f"windows\t{len(batch)}")
    print(f"stride\t{batch.stride}")
    print("starts\t" + " ".join(map(str, batch.starts)))
    if args.ids:
        for row, mask in zip(batch.windows, batch.masks):
            print(" ".join(str(int(t)) for t in row[mask]))
    return EXIT_OK


def _model(cfg: RunConfig, checkpoint):
    from .checkpoint import load_checkpoint
    vocab = cfg.vocabulary()
    enc = cfg.encoder_config(len(vocab))
    path = Path(checkpoint) if checkpoint else cfg.checkpoint_path
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return vocab, enc, load_checkpoint(path, enc)


def cmd_encode_text(args) -> int:
    from .longcap import encode_long_text
    from .pipeline import embedding_line
    from .textpipe import tokenize
    cfg = _run_config(args)
    vocab, enc, params = _model(cfg, args.checkpoint)
    seq = tokenize(_text_arg(args), vocab)
    print(embedding_line(encode_long_text(seq, params, enc, cfg.long_text_config())))
    return EXIT_OK


def cmd_encode_image(args) -> int:
    from .data import load_image
    from .encoders import encode_image, normalize
    from .pipeline import embedding_line
    cfg = _run_config(args)
    _, enc, params = _model(cfg, args.checkpoint)
    if not Path(args.image).is_file():
        raise UsageError(f"image not found: {args.image}")
    pixels = load_image(args.image, enc.image_size)
    print(embedding_line(normalize(encode_image(pixels, params, enc))))
    return EXIT_OK


def cmd_train(args) -> int:
    from .pipeline import run_training
    cfg = _run_config(args)
    state = run_training(cfg, echo=None if args.quiet else sys.stdout)
    print(f"checkpoint\t{cfg.checkpoint_path}")
    print(f"log\t{cfg.log_path}")
    print(f"steps\t{state.step}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .pipeline import run_evaluation
    cfg = _run_config(args)
    if args.direction == "both":
        directions = DIRECTIONS
    else:
        directions = (args.direction or cfg.direction,)
    if args.checkpoint and not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    if not args.checkpoint and not cfg.checkpoint_path.is_file():
        raise UsageError(f"checkpoint not found: {cfg.checkpoint_path} (run train first or pass --checkpoint)")
    for report in run_evaluation(cfg, args.checkpoint and Path(args.checkpoint), directions):
        sys.stdout.write(render_report(report, "table", references=not args.no_references))
        print(f"written\t{cfg.output_dir / ('report-' + report.direction)}.{{txt,json}}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    from .data import generate_synthetic, synthetic_vocabulary, write_splits
    if args.count < 2:
        raise UsageError("--count must be >= 2")
    ds = generate_synthetic(args.count, synthetic_vocabulary(), args.seed, args.image_size, args.out)
    print(f"manifest\t{Path(args.out) / 'manifest.jsonl'}")
    if args.splits:
        for name, path in write_splits(ds.manifest, args.seed).items():
            print(f"{name}\t{path}")
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        text = Path(args.input).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read {args.input}: {exc.strerror}") from None
    try:
        report = parse_report_json(text)
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"{args.input} is not a recall report: {exc}") from None
    sys.stdout.write(render_report(report, args.format, references=not args.no_references))
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def _add_text(p):
    p.add_argument("text", nargs="?", help="input text (default: empty)")
    p.add_argument("--file", help="read the text from this file instead")


def _add_run(p):
    p.add_argument("--config", required=True,
                   help="config file, or a builtin name: desk-defaults, paper-defaults")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--output-dir", help="override output_dir")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="slidecap", description="Sliding-window long-caption dual encoder.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--threads", type=int, default=1,
                        help="BLAS threads (default 1, which keeps results bit-exact)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("tokenize", help="print token ids")
    p.add_argument("--vocab", required=True, help=f"vocabulary file or {BUILTIN_VOCAB}")
    _add_text(p)
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("windows", help="show how a caption is split into windows")
    p.add_argument("--vocab", required=True, help=f"vocabulary file or {BUILTIN_VOCAB}")
    p.add_argument("--context-len", type=int, default=77)
    p.add_argument("--stride", type=int, default=None, help="default: half the content capacity, rounded up")
    p.add_argument("--ids", action="store_true", help="also print each window's token ids")
    _add_text(p)
    p.set_defaults(func=cmd_windows)

    p = sub.add_parser("encode-text", help="unit-norm caption embedding (windows averaged)")
    _add_run(p)
    p.add_argument("--checkpoint", help="default: <output_dir>/checkpoint.lcm")
    _add_text(p)
    p.set_defaults(func=cmd_encode_text)

    p = sub.add_parser("encode-image", help="unit-norm image embedding from a trained checkpoint")
    _add_run(p)
    p.add_argument("--checkpoint", help="default: <output_dir>/checkpoint.lcm")
    p.add_argument("image")
    p.set_defaults(func=cmd_encode_image)

    p = sub.add_parser("train", help="train from a config; writes checkpoint and log")
    _add_run(p)
    p.add_argument("--quiet", action="store_true", help="do not echo the epoch log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Recall@K report for a checkpoint")
    _add_run(p)
    p.add_argument("--checkpoint", help="default: <output_dir>/checkpoint.lcm")
    p.add_argument("--direction", choices=DIRECTIONS + ("both",), help="default: from config")
    p.add_argument("--no-references", action="store_true", help="omit published reference rows")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gen-data", help="write a synthetic long-caption dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--splits", action="store_true", help="also write train/val/test manifests")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("report", help="render a saved JSON report")
    p.add_argument("input")
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.add_argument("--no-references", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"slidecap {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SlidecapError, ValueError, OSError) as exc:
        print(f"slidecap {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
