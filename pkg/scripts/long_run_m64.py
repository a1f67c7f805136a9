#!/usr/bin/env python3
"""Long-run check: M = 64 on AWGN at 18 dB with the full 7 x 7 (q, r) grid.

Pass condition (Gaussian receiver, same test seed for every series):

    MI(AE-CKF) >= MI(QAM-64) - 0.01   and   MI(AE-CKF) >= MI(AE-BP) - 0.03

The CKF state has 2336 weights, so every iteration does a 2336 x 2336
Cholesky factorization and 4672 forward passes; the 49 grid cells take many
hours on one core.  Use ``--max-iterations`` and ``--q``/``--r`` to shorten a
trial run.

Usage::

    python3 scripts/long_run_m64.py [--max-iterations 2000] [--seed 0]
"""

from __future__ import annotations

import argparse
import sys
import time

from cubature_shaping import channels as ch
from cubature_shaping import trainer
from cubature_shaping.constellations import square_qam


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--snr-db", type=float, default=18.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iterations", type=int, default=2000)
    p.add_argument("--bp-iterations", type=int, default=20000)
    p.add_argument("--q", type=float, nargs="+", default=list(trainer.DEFAULT_GRID))
    p.add_argument("--r", type=float, nargs="+", default=list(trainer.DEFAULT_GRID))
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--symbols", type=int, default=100_000)
    args = p.parse_args(argv)

    channel = ch.AwgnConfig(args.snr_db)
    t0 = time.time()
    base = trainer.TrainConfig(M=64, channel=channel, max_iterations=args.max_iterations, master_seed=args.seed)
    grid = trainer.grid_search(base, args.q, args.r)
    for cell in grid.cells:
        print(f"q={cell.q:g} r={cell.r:g} {cell.status} test_mi={cell.test_mi:.4f} iters={cell.iterations}")
    print(f"selected q={grid.best.q:g} r={grid.best.r:g} ({time.time() - t0:.0f} s)")

    bp = trainer.train(
        trainer.TrainConfig(
            M=64, channel=channel, optimizer="backprop", max_iterations=args.bp_iterations, master_seed=args.seed
        )
    )

    def score(**kw):
        rng = trainer.stream(args.seed, "test")
        return trainer.evaluate(channel, args.runs, args.symbols, rng, **kw).mean

    mi_ckf = score(weights=grid.report.final_weights, M=64)
    mi_bp = score(weights=bp.final_weights, M=64)
    mi_qam = score(constellation=square_qam(64))
    ok = mi_ckf >= mi_qam - 0.01 and mi_ckf >= mi_bp - 0.03
    print(f"AE-CKF {mi_ckf:.4f}  AE-BP {mi_bp:.4f}  QAM-64 {mi_qam:.4f}")
    print(f"[criterion 9] {'PASS' if ok else 'FAIL'}  ckf-qam={mi_ckf - mi_qam:+.4f} (>= -0.01)  ckf-bp={mi_ckf - mi_bp:+.4f} (>= -0.03)")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
