"""Train the 14-layer dynamic dilated model on the 2-part task, res and plain.

Reports eval-mode mIoU on the training shapes and on the held-out shapes.
"""

import argparse
from dataclasses import replace

from deepgcn.experiments import LearnabilitySetup, learnability


def main(argv=None):
    base = LearnabilitySetup()
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--connections", default="res,plain")
    ap.add_argument("--epochs", type=int, default=base.epochs)
    ap.add_argument("--depth", type=int, default=base.depth)
    ap.add_argument("--seed", type=int, default=base.seed)
    args = ap.parse_args(argv)
    setup = replace(base, epochs=args.epochs, depth=args.depth, seed=args.seed)

    for conn in args.connections.split(","):
        def log(row, conn=conn):
            if row["miou"] is not None:
                print(f"{conn:>5} epoch {row['epoch']:>3} loss {row['loss']:.4f} train mIoU {row['miou']:.3f}",
                      flush=True)

        r = learnability(setup, conn, log)
        if r.train_miou is None:
            print(f"{conn:>5} diverged after {r.seconds:.0f}s")
        else:
            print(f"{conn:>5} best train mIoU {r.train_miou:.3f} at epoch {r.result.best_epoch}, "
                  f"held-out {r.heldout_miou:.3f}, {r.seconds:.0f}s")


if __name__ == "__main__":
    main()
