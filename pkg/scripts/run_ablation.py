"""Desk-scale version of the 8-cell ablation (preprocessing x flattening x shortcut).

Trains every cell on a synthetic corpus with the same seed and writes
ablation.csv next to the per-cell training logs.
"""
import argparse
import logging
from pathlib import Path

from htr.dataset import SynthConfig, synth_generate
from htr.train import ABLATION_FIELDS, TrainConfig, ablate


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--epochs", type=int, default=120)
    ap.add_argument("--batch-size", type=int, default=4)
    ap.add_argument("--train-size", type=int, default=32)
    ap.add_argument("--val-size", type=int, default=0, help="held-out synthetic lines (0 for none)")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    train_m = synth_generate(SynthConfig(size=args.train_size, seed=7), out / "train")
    val_m = synth_generate(SynthConfig(size=args.val_size, seed=8), out / "val") if args.val_size else None
    cfg = TrainConfig(train_manifest=str(train_m), val_manifest=str(val_m) if val_m else None,
                      out_dir=str(out), batch_size=args.batch_size, eval_train=False,
                      seed=args.seed).scaled(args.epochs)
    rows = ablate(cfg)
    print(",".join(ABLATION_FIELDS))
    for r in rows:
        print(",".join("" if r[k] is None else (f"{r[k]:.2f}" if isinstance(r[k], float) else r[k])
                       for k in ABLATION_FIELDS))


if __name__ == "__main__":
    main()
