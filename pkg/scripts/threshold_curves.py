"""Erasure recursion trajectories and decoding thresholds for regular ensembles.

Prints q_d trajectories for a few initial erasure rates straddling the
(3, 6) threshold, the bisected thresholds of several ensembles, and a
Monte-Carlo spot check of the decoder on a sampled graph on both sides
of the threshold.

Example:
    python3 scripts/threshold_curves.py --n 20000 --out de.csv
"""

import argparse
import csv
import sys

import numpy as np

from momentenc.codes import (
    LdpcParams,
    build_regular_ldpc,
    density_evolution,
    erasure_threshold,
    peel_decode,
)


def mc_unresolved(n, l, r, q0, seed, sweeps=200):
    h = build_regular_ldpc(LdpcParams(n=n, l=l, r=r, seed=seed))
    rng = np.random.default_rng(seed + 1)
    vals = np.where(rng.random(n) < q0, np.nan, 0.0)
    return float(np.isnan(peel_decode(h, vals, max_sweeps=sweeps).values).mean())


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=20_000, help="graph size for the MC check")
    ap.add_argument("--iters", type=int, default=30)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", help="write the trajectories as CSV")
    args = ap.parse_args()

    qstar = erasure_threshold(3, 6)
    q0s = [round(qstar - 0.02, 3), round(qstar, 3), round(qstar + 0.02, 3)]
    trajs = {q0: density_evolution(q0, 3, 6, args.iters) for q0 in q0s}

    print(f"(3,6) recursion from q0 just below / at / above q* = {qstar:.5f}")
    print("d      " + "".join(f"q0={q0:<9}" for q0 in q0s))
    for d in range(0, args.iters + 1, max(1, args.iters // 10)):
        print(f"{d:<7d}" + "".join(f"{trajs[q0][d]:<12.6f}" for q0 in q0s))

    print("\nbisected thresholds")
    for l, r in ((3, 6), (3, 4), (4, 8), (3, 9)):
        print(f"  ({l},{r}): q* = {erasure_threshold(l, r):.5f}  (rate {1 - l / r:.3f})")

    lo, hi = qstar - 0.03, qstar + 0.03
    print(f"\nMC spot check, n={args.n} sampled (3,6) graph")
    print(f"  q0 = {lo:.3f}: unresolved fraction {mc_unresolved(args.n, 3, 6, lo, args.seed):.4f}")
    print(f"  q0 = {hi:.3f}: unresolved fraction {mc_unresolved(args.n, 3, 6, hi, args.seed):.4f}")

    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["d"] + [f"q0_{q0}" for q0 in q0s])
            for d in range(args.iters + 1):
                writer.writerow([d] + [repr(float(trajs[q0][d])) for q0 in q0s])
        print(f"wrote trajectories to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
