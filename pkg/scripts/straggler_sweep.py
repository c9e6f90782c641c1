"""Compare encoding schemes under fixed-count stragglers.

Runs paired seeds (same data, same straggler draws) for each scheme and
reports the median number of steps to reach a relative distance of 1e-4
from the least-squares optimum. Slow schemes that never get there within
the step cap are reported as the cap value.

Example:
    python3 scripts/straggler_sweep.py --k 200 --m 1024 --seeds 10 --out sweep.csv
"""

import argparse
import csv
import sys

import numpy as np

from momentenc.coded_gd import build_problem
from momentenc.linalg import generate_dataset, moment_setup
from momentenc.optimize import FixedRate, OptimizerConfig, Projection, run_coded_pgd, spectral_norm
from momentenc.runtime import StragglerModel

SCHEMES = ("ldpc", "replication2", "uncoded")


def steps_for(ds, ms, eta, scheme, w, s, seed, cap):
    kw = {"l": 3, "r": 6} if scheme == "ldpc" else {}
    prob = build_problem(ms.M, scheme, w, seed=seed, **kw)
    cfg = OptimizerConfig(steps=cap, rate=FixedRate(eta), max_sweeps=10, seed=seed)
    trace = run_coded_pgd(
        ds, ms, prob, StragglerModel.fixed_count(s), cfg, Projection.none(),
        threshold=1e-4,
    )
    return trace.steps_to_threshold or cap


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--m", type=int, default=1024)
    ap.add_argument("--k", type=int, default=200)
    ap.add_argument("--w", type=int, default=40)
    ap.add_argument("--stragglers", default="0,5,10", help="comma-separated s values")
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--cap", type=int, default=3000)
    ap.add_argument("--out", help="write per-run rows as CSV")
    args = ap.parse_args()

    s_values = [int(x) for x in args.stragglers.split(",")]
    rows = []
    for seed in range(args.seeds):
        ds = generate_dataset(args.m, args.k, noise_sigma=0.0, seed=seed)
        ms = moment_setup(ds)
        eta = 1.0 / spectral_norm(ms.M)
        for s in s_values:
            for scheme in SCHEMES:
                steps = steps_for(ds, ms, eta, scheme, args.w, s, seed, args.cap)
                rows.append({"scheme": scheme, "s": s, "seed": seed, "steps": steps})

    print(f"median steps to 1e-4 over {args.seeds} seeds "
          f"(m={args.m}, k={args.k}, w={args.w}, cap={args.cap})")
    header = "s      " + "".join(f"{sch:>14}" for sch in SCHEMES)
    print(header)
    for s in s_values:
        meds = [
            int(np.median([r["steps"] for r in rows if r["s"] == s and r["scheme"] == sch]))
            for sch in SCHEMES
        ]
        print(f"{s:<7d}" + "".join(f"{v:>14d}" for v in meds))

    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["scheme", "s", "seed", "steps"])
            writer.writeheader()
            writer.writerows(rows)
        print(f"wrote {len(rows)} rows to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
