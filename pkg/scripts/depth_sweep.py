"""Plain vs residual training loss across depths on the synthetic part dataset.

Writes per-cell metrics.csv traces plus sweep.csv / sweep_final.csv and
setup.ini to --out and prints whether the residual/plain ordering holds.  With
the default arguments the output is the cache the acceptance test reuses.
"""

import argparse
import time
from dataclasses import replace

from deepgcn.experiments import ConvergenceSetup, convergence_sweep, depth_ordering


def main(argv=None):
    base = ConvergenceSetup()
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="results/depth_sweep")
    ap.add_argument("--samples", type=int, default=base.samples)
    ap.add_argument("--points", type=int, default=base.points)
    ap.add_argument("--epochs", type=int, default=base.epochs)
    ap.add_argument("--batch-size", type=int, default=base.batch_size)
    ap.add_argument("--depths", default=",".join(map(str, base.depths)))
    ap.add_argument("--connections", default=",".join(base.connections))
    ap.add_argument("--seed", type=int, default=base.seed)
    ap.add_argument("--reuse", action="store_true", help="reload a matching earlier run instead of training")
    args = ap.parse_args(argv)

    setup = replace(base, samples=args.samples, points=args.points, epochs=args.epochs,
                    batch_size=args.batch_size, seed=args.seed,
                    depths=tuple(int(d) for d in args.depths.split(",")),
                    connections=tuple(args.connections.split(",")))
    t0 = time.time()

    def log(cell):
        print(f"{cell.connection:>5}-{cell.depth:<3} diverged={cell.diverged} "
              f"smoothed_loss={cell.smoothed_loss:.4f} [{time.time() - t0:.0f}s]", flush=True)

    table = convergence_sweep(setup, args.out, reuse=args.reuse, log=log)
    lo, hi = min(setup.depths), max(setup.depths)
    if {("plain", lo), ("plain", hi), ("res", lo), ("res", hi)} <= table.keys():
        print(depth_ordering(table, lo, hi))


if __name__ == "__main__":
    main()
