"""Command-line entry point.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .dataset import DataError, SynthConfig, synth_generate
from .gradcheck import TOLERANCE, run_gradcheck
from .train import ConfigError, NumericError, TrainConfig, ablate, decode_image, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _train_config(args) -> TrainConfig:
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    cfg = TrainConfig.from_dict(doc)
    updates = {}
    if args.manifest:
        updates["train_manifest"] = args.manifest
    if getattr(args, "val_manifest", None):
        updates["val_manifest"] = args.val_manifest
    if args.out:
        updates["out_dir"] = args.out
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.preset:
        updates["preset"] = args.preset
    if getattr(args, "batch_size", None):
        updates["batch_size"] = args.batch_size
    if getattr(args, "deterministic", False):
        updates["deterministic"] = True
    if updates:
        cfg = dataclasses.replace(cfg, **updates)
    if getattr(args, "epochs", None):
        cfg = cfg.scaled(args.epochs)
    return cfg


def _add_common(p, manifest=True):
    p.add_argument("--config", help="JSON document with TrainConfig fields (network overrides under 'network')")
    if manifest:
        p.add_argument("--manifest", help="training manifest (JSON Lines)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--preset", choices=["line", "word", "tiny"])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="htr", description="Convolutional-recurrent CTC handwriting recognizer")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--config", help="JSON SynthConfig")
    p.add_argument("--preset", choices=["line", "word", "tiny"], help="accepted for symmetry; unused")

    for name, help_ in (("train", "train a model"), ("ablate", "run the 8-cell ablation grid")):
        p = sub.add_parser(name, help=help_)
        _add_common(p)
        p.add_argument("--val-manifest")
        p.add_argument("--epochs", type=int, help="total epochs; milestones rescaled to 50%%/75%%")
        p.add_argument("--batch-size", type=int)
        p.add_argument("--deterministic", action="store_true", help="single-threaded kernels, reproducible logs")
        if name == "train":
            p.add_argument("--checkpoint", help="resume from this checkpoint")

    p = sub.add_parser("eval", help="score a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--strip-shortcut", action="store_true")

    p = sub.add_parser("decode", help="transcribe a single PGM image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("image")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=20, help="number of seeds per op")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "synth":
            cfg = SynthConfig()
            if args.config:
                cfg = SynthConfig.from_dict(json.loads(Path(args.config).read_text()))
            cfg = dataclasses.replace(cfg, seed=args.seed, size=args.size)
            print(synth_generate(cfg, args.out))
        elif args.command == "train":
            result = train(_train_config(args), resume=args.checkpoint)
            last = result.history[-1] if result.history else {}
            print(f"checkpoint {result.last_checkpoint}  metrics {result.metrics_path}  "
                  f"final train CER {last.get('cer')}  skipped {result.skipped}")
        elif args.command == "ablate":
            cfg = _train_config(args)
            rows = ablate(cfg)
            for r in rows:
                print(r)
            print(Path(cfg.out_dir) / "ablation.csv")
        elif args.command == "eval":
            rep = evaluate(args.checkpoint, args.manifest, strip_shortcut=args.strip_shortcut)
            print(json.dumps({"cer": rep.cer, "wer": rep.wer, "samples": len(rep),
                              "ref_chars": rep.ref_chars, "ref_words": rep.ref_words}))
        elif args.command == "decode":
            print(decode_image(args.checkpoint, args.image))
        elif args.command == "gradcheck":
            ok = True
            for r in run_gradcheck(args.seed):
                ok &= r.passed
                print(f"{'PASS' if r.passed else 'FAIL'} {r.op:<13} seeds={r.seeds} worst_rel_err={r.worst:.3e} tol={TOLERANCE:g}")
            return EXIT_OK if ok else EXIT_NUMERIC
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
