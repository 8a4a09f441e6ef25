"""Decoder-depth ablation on a 200-image synthetic set (160 train / 40 val), three seeds per depth."""

import argparse
import logging
import tempfile

from mldd.experiments import depth_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--lr", type=float, default=1e-4)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--workdir", help="keep data, runs and ablation.tsv here (default: temp dir)")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    seeds = [int(s) for s in args.seeds.split(",")]
    with tempfile.TemporaryDirectory() as tmp:
        r = depth_ablation(args.workdir or tmp, seeds=seeds, epochs=args.epochs, lr=args.lr)
    print(f"{'depth':>5}{'mDice':>9}{'mIoU':>9}   per-seed mDice   ({r.seconds / 60:.1f} min)")
    for row in r.rows:
        print(f"{row.depth:>5}{row.mean_dice:9.4f}{row.mean_iou:9.4f}   "
              + " ".join(f"{v:.4f}" for v in row.mdice))


if __name__ == "__main__":
    main()
