"""Overfit the tiny preset on 32 synthetic lines with and without the shortcut branch.

Writes both training logs plus loss_comparison.csv (epoch, loss with weight 0.1,
loss with weight 0) for plotting the two loss curves side by side.
"""
import argparse
import csv
import logging
import time
from pathlib import Path

from htr.dataset import SynthConfig, synth_generate
from htr.train import TrainConfig, evaluate, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/overfit")
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--batch-size", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--data-seed", type=int, default=7)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    manifest = synth_generate(SynthConfig(size=32, seed=args.data_seed), out / "data")
    histories = {}
    for weight in (0.1, 0.0):
        cfg = TrainConfig(train_manifest=str(manifest), out_dir=str(out / f"weight_{weight}"),
                          batch_size=args.batch_size, shortcut_weight=weight, seed=args.seed).scaled(args.epochs)
        t0 = time.perf_counter()
        res = train(cfg)
        rep = evaluate(res.last_checkpoint, manifest)
        print(f"weight {weight}: train CER {rep.cer:.2f}% WER {rep.wer:.2f}% in {time.perf_counter() - t0:.0f}s")
        histories[weight] = [r for r in res.history if r["split"] == "train"]

    with (out / "loss_comparison.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss_main_weight_0.1", "loss_main_weight_0", "cer_weight_0.1", "cer_weight_0"])
        for a, b in zip(histories[0.1], histories[0.0]):
            w.writerow([a["epoch"], a["loss_main"], b["loss_main"], a["cer"], b["cer"]])
    print(out / "loss_comparison.csv")


if __name__ == "__main__":
    main()
