"""Overfit 8 synthetic images and report train mDice and the loss curve summary."""

import argparse
import logging
import tempfile

from mldd.experiments import overfit


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--lr", type=float, default=1e-4)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workdir", help="keep data and run files here (default: temp dir)")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    with tempfile.TemporaryDirectory() as tmp:
        r = overfit(args.workdir or tmp, steps=args.steps, lr=args.lr, seed=args.seed)
    ma = r.moving_average()
    print(f"steps={len(r.losses)} lr={args.lr:g} time={r.seconds:.1f}s")
    print(f"loss first={r.losses[0]:.4f} last={r.losses[-1]:.4f} ma50 start={ma[0]:.4f} end={ma[-1]:.4f}")
    print(f"train mDice={r.mdice:.4f} mIoU={r.miou:.4f}")


if __name__ == "__main__":
    main()
