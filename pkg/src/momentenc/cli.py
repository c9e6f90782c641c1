"""Command-line front end.

Subcommands cover dataset generation, single runs (simulated or networked),
erasure-recursion utilities, parameter sweeps, and the gradient-coding
feasibility check. Run configuration lives in a flat JSON file; any field
can be overridden by a flag, and the MENC_SEED environment variable
overrides the seed last of all (config < flags < MENC_SEED).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from momentenc.codes import (
    CodeConstructionError,
    density_evolution,
    erasure_threshold,
)
from momentenc.coded_gd import (
    build_problem,
    gc_criterion_check,
    gc_fraction_repetition,
)
from momentenc.linalg import (
    generate_dataset,
    import_csv,
    load_dataset,
    loss,
    moment_setup,
    save_dataset,
)
from momentenc.optimize import (
    FixedRate,
    OptimizerConfig,
    Projection,
    BoundRate,
    estimate_gradient_bound,
    psgd_single_sample,
    run_coded_pgd,
    spectral_norm,
    averaged_iterate_bound,
    trace_summary,
    write_trace_csv,
)
from momentenc.runtime import NetMaster, NetworkError, StragglerModel, net_worker

SEED_ENV = "MENC_SEED"


@dataclass
class ExperimentConfig:
    """Everything a run needs, JSON-serializable and flat.

    projection and straggler use the same compact "kind:args" strings as
    the command-line flags; eta is a float, "auto" (1 / ||M||_2), or
    "bound" (radius / (B sqrt(T)), the rate the regret bound assumes).
    """

    scheme: str = "ldpc"  # ldpc | exact | uncoded | replication2 | psgd
    w: int = 40
    l: int = 3
    r: int = 6
    kcode: int | None = None
    steps: int = 200
    max_sweeps: int = 10
    eta: object = "auto"
    radius: float | None = None
    projection: str = "none"
    straggler: str = "bernoulli:0.1"
    seed: int = 0
    threshold: float | None = 1e-4
    data: str | None = None
    m: int = 512
    k: int = 64
    noise_sigma: float = 0.0
    sparsity: int = 0
    data_seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str) -> "ExperimentConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def write_json(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


def parse_projection(text: str) -> Projection:
    kind, _, arg = text.partition(":")
    if kind == "none":
        return Projection.none()
    if kind == "l2ball":
        return Projection.l2_ball(float(arg))
    if kind == "hardthreshold":
        return Projection.hard_threshold(int(arg))
    raise ValueError(f"unknown projection {text!r}")


def parse_straggler(text: str) -> StragglerModel:
    kind, _, arg = text.partition(":")
    if kind == "bernoulli":
        return StragglerModel.bernoulli(float(arg))
    if kind == "fixedcount":
        return StragglerModel.fixed_count(int(arg))
    if kind == "deterministic":
        members = [int(x) for x in arg.split(",")] if arg else []
        return StragglerModel.deterministic(members)
    if kind == "deadline":
        return StragglerModel.deadline(float(arg))
    raise ValueError(f"unknown straggler model {text!r}")


def parse_eta(text: str):
    if text in ("auto", "bound"):
        return text
    return float(text)


# ---------------------------------------------------------------------------
# config resolution and run plumbing

_OVERRIDE_FIELDS = [
    "scheme", "w", "l", "r", "kcode", "steps", "max_sweeps", "eta", "radius",
    "projection", "straggler", "seed", "threshold", "data", "m", "k",
    "noise_sigma", "sparsity", "data_seed",
]


def resolve_config(args) -> ExperimentConfig:
    cfg = (
        ExperimentConfig.from_json(args.config)
        if getattr(args, "config", None)
        else ExperimentConfig()
    )
    for name in _OVERRIDE_FIELDS:
        val = getattr(args, name, None)
        if val is not None:
            setattr(cfg, name, val)
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        cfg.seed = int(env_seed)
    return cfg


def _load_or_generate(cfg: ExperimentConfig):
    if cfg.data:
        if cfg.data.endswith(".csv"):
            return import_csv(cfg.data)
        return load_dataset(cfg.data)
    return generate_dataset(
        cfg.m, cfg.k, noise_sigma=cfg.noise_sigma, sparsity=cfg.sparsity,
        seed=cfg.data_seed,
    )


def _resolve_rate(cfg: ExperimentConfig, ms, projection: Projection):
    if cfg.eta == "auto":
        return FixedRate(1.0 / spectral_norm(ms.M))
    if cfg.eta == "bound":
        radius = cfg.radius
        if radius is None and projection.kind == "l2ball":
            radius = projection.radius
        if radius is None:
            raise ValueError(
                "bound rate needs a radius: use an l2ball projection or --radius"
            )
        bound = estimate_gradient_bound(ms, projection, enclosing_radius=radius)
        return BoundRate(radius=radius, grad_bound=bound)
    return FixedRate(float(cfg.eta))


def _execute(cfg: ExperimentConfig, dataset=None):
    """Build everything a config describes and run it; returns
    (trace, summary dict)."""
    if dataset is None:
        dataset = _load_or_generate(cfg)
    ms = moment_setup(dataset)
    projection = parse_projection(cfg.projection)
    rate = _resolve_rate(cfg, ms, projection)
    opt = OptimizerConfig(
        steps=cfg.steps, rate=rate, max_sweeps=cfg.max_sweeps, seed=cfg.seed
    )
    if cfg.scheme == "psgd":
        trace = psgd_single_sample(
            dataset, opt, projection, threshold=cfg.threshold
        )
        problem = None
    else:
        problem = build_problem(
            ms.M, cfg.scheme, cfg.w, l=cfg.l, r=cfg.r, kcode=cfg.kcode,
            seed=cfg.seed,
        )
        model = parse_straggler(cfg.straggler)
        trace = run_coded_pgd(
            dataset, ms, problem, model, opt, projection,
            threshold=cfg.threshold,
        )
    summary = _summarize(cfg, dataset, ms, opt, projection, trace)
    return trace, summary


def _summarize(cfg, dataset, ms, opt, projection, trace) -> dict:
    doc = {"config": cfg.to_dict(), "eta_resolved": opt.eta()}
    doc.update(trace_summary(trace, dataset.k))
    if dataset.theta_star is not None:
        loss_star = loss(dataset, dataset.theta_star)
        doc["loss_star"] = loss_star
        doc["suboptimality"] = doc["final_loss"] - loss_star
    if cfg.scheme == "ldpc" and cfg.straggler.startswith("bernoulli:"):
        q0 = float(cfg.straggler.partition(":")[2])
        doc["q_analytic"] = float(
            density_evolution(q0, cfg.l, cfg.r, cfg.max_sweeps)[-1]
        )
    if isinstance(opt.rate, BoundRate):
        q_d = doc.get("q_analytic", 0.0)
        doc["bound"] = averaged_iterate_bound(
            opt.rate.radius, opt.rate.grad_bound, q_d, opt.steps
        )
    return doc


def _write_outputs(args, trace, summary) -> None:
    if getattr(args, "trace_out", None):
        write_trace_csv(trace, args.trace_out)
    if getattr(args, "summary_out", None):
        with open(args.summary_out, "w") as f:
            json.dump(summary, f, indent=2, sort_keys=True)
            f.write("\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    if args.from_csv:
        ds = import_csv(args.from_csv)
    else:
        ds = generate_dataset(
            args.m, args.k, noise_sigma=args.noise_sigma,
            sparsity=args.sparsity, seed=args.seed,
        )
    save_dataset(ds, args.out)
    print(f"wrote {ds.m}x{ds.k} dataset to {args.out}")
    return 0


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    trace, summary = _execute(cfg)
    _write_outputs(args, trace, summary)
    hit = summary["steps_to_threshold"]
    print(
        f"{cfg.scheme}: {summary['steps_executed']} steps, "
        f"final loss {summary['final_loss']:.6g}, "
        f"final dist {summary['final_dist']:.6g}, "
        f"steps_to_threshold {hit if hit is not None else '-'}"
    )
    return 0


def cmd_de(args) -> int:
    qs = density_evolution(args.q0, args.l, args.r, args.iters)
    lines = ["d,q_d"] + [f"{d},{float(q)!r}" for d, q in enumerate(qs)]
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_threshold(args) -> int:
    q = erasure_threshold(args.l, args.r, tol=args.tol)
    print(repr(q))
    return 0


def cmd_sweep(args) -> int:
    base = resolve_config(args)
    schemes = args.schemes.split(",")
    counts = [int(x) for x in args.straggler_counts.split(",")]
    dims = [int(x) for x in args.dims.split(",")] if args.dims else [base.k]
    rows = ["scheme,s,k,seed,steps_to_threshold,final_dist,mean_erased,status"]
    for k in dims:
        for sd in range(args.seeds):
            ds_cfg = dataclasses.replace(base, k=k, data_seed=sd, data=None)
            dataset = _load_or_generate(ds_cfg)
            for scheme in schemes:
                for s in counts:
                    cfg = dataclasses.replace(
                        ds_cfg, scheme=scheme, straggler=f"fixedcount:{s}",
                        seed=base.seed + sd,
                    )
                    try:
                        trace, summary = _execute(cfg, dataset=dataset)
                        hit = summary["steps_to_threshold"]
                        rows.append(
                            f"{scheme},{s},{k},{sd},"
                            f"{hit if hit is not None else ''},"
                            f"{summary['final_dist']!r},"
                            f"{summary['mean_erased']!r},ok"
                        )
                    except (ValueError, CodeConstructionError) as e:
                        rows.append(f"{scheme},{s},{k},{sd},,,,error: {e}")
    text = "\n".join(rows) + "\n"
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_net_master(args) -> int:
    cfg = resolve_config(args)
    if cfg.scheme == "psgd":
        print("psgd has no workers; use 'run'", file=sys.stderr)
        return 1
    dataset = _load_or_generate(cfg)
    ms = moment_setup(dataset)
    projection = parse_projection(cfg.projection)
    rate = _resolve_rate(cfg, ms, projection)
    opt = OptimizerConfig(
        steps=cfg.steps, rate=rate, max_sweeps=cfg.max_sweeps, seed=cfg.seed
    )
    problem = build_problem(
        ms.M, cfg.scheme, cfg.w, l=cfg.l, r=cfg.r, kcode=cfg.kcode, seed=cfg.seed
    )
    host, _, port = args.bind.partition(":")
    master = NetMaster(
        problem, dataset, ms, opt, projection,
        host=host or "127.0.0.1", port=int(port or 0),
        deadline_ms=args.deadline_ms, threshold=cfg.threshold,
        accept_timeout=args.accept_timeout,
    )
    bound = master.listen()
    print(f"listening on {master.host}:{bound}", flush=True)
    try:
        trace = master.run()
    except NetworkError as e:
        print(f"run aborted: {e}", file=sys.stderr)
        return 1
    summary = _summarize(cfg, dataset, ms, opt, projection, trace)
    _write_outputs(args, trace, summary)
    print(
        f"finished {summary['steps_executed']} steps, "
        f"final loss {summary['final_loss']:.6g}"
    )
    return 0


def cmd_net_worker(args) -> int:
    host, _, port = args.connect.partition(":")
    slowdown = None
    if args.slowdown:
        prob, _, ms_text = args.slowdown.partition(":")
        slowdown = (float(prob), float(ms_text))
    try:
        rounds = net_worker(
            host or "127.0.0.1", int(port), worker_id=args.worker_id,
            slowdown=slowdown, seed=args.seed,
            connect_timeout=args.connect_timeout,
        )
    except NetworkError as e:
        print(str(e), file=sys.stderr)
        return 1
    print(f"served {rounds} rounds")
    return 0


def cmd_gc_check(args) -> int:
    try:
        design = gc_fraction_repetition(args.w, args.s, args.m)
        ok = gc_criterion_check(design, args.w, args.s)
    except ValueError as e:
        print(f"infeasible: {e}", file=sys.stderr)
        return 1
    if ok:
        print(
            f"PASS: every {args.w - args.s}-subset of {args.w} workers "
            f"recovers the full gradient"
        )
        return 0
    print("FAIL: some survivor subset cannot recover the gradient")
    return 1


# ---------------------------------------------------------------------------
# argument parsing


def _add_config_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--scheme", choices=["ldpc", "exact", "uncoded", "replication2", "psgd"])
    p.add_argument("--w", type=int, help="number of workers")
    p.add_argument("--l", type=int, help="variable degree")
    p.add_argument("--r", type=int, help="check degree")
    p.add_argument("--kcode", type=int, help="code dimension for the exact scheme")
    p.add_argument("--steps", type=int)
    p.add_argument("--max-sweeps", dest="max_sweeps", type=int)
    p.add_argument("--eta", type=parse_eta, help="step size, 'auto', or 'bound'")
    p.add_argument("--radius", type=float, help="radius for the bound rate")
    p.add_argument("--projection", help="none | l2ball:R | hardthreshold:u")
    p.add_argument(
        "--straggler",
        help="bernoulli:q | fixedcount:s | deterministic:i,j,... | deadline:ms",
    )
    p.add_argument("--seed", type=int)
    p.add_argument("--threshold", type=float, help="relative distance stop rule")
    p.add_argument("--data", help="dataset file (.csv or binary)")
    p.add_argument("--m", type=int, help="generated sample count")
    p.add_argument("--k", type=int, help="generated dimension")
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p.add_argument("--sparsity", type=int)
    p.add_argument("--data-seed", dest="data_seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="momentenc",
        description="coded second-moment gradient descent",
        epilog=f"{SEED_ENV} overrides the run seed when set.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate or convert a dataset")
    p.add_argument("--m", type=int, default=512)
    p.add_argument("--k", type=int, default=64)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float, default=0.0)
    p.add_argument("--sparsity", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--from-csv", dest="from_csv", help="convert a CSV instead")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("run", help="run one simulated experiment")
    _add_config_overrides(p)
    p.add_argument("--trace-out", dest="trace_out", help="per-step CSV")
    p.add_argument("--summary-out", dest="summary_out", help="summary JSON")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("de", help="erasure recursion q_d table")
    p.add_argument("--q0", type=float, required=True)
    p.add_argument("--l", type=int, required=True)
    p.add_argument("--r", type=int, required=True)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_de)

    p = sub.add_parser("threshold", help="erasure threshold of an (l, r) ensemble")
    p.add_argument("--l", type=int, required=True)
    p.add_argument("--r", type=int, required=True)
    p.add_argument("--tol", type=float, default=1e-3)
    p.set_defaults(fn=cmd_threshold)

    p = sub.add_parser("sweep", help="grid of runs over schemes and stragglers")
    _add_config_overrides(p)
    p.add_argument("--schemes", default="ldpc,uncoded,replication2")
    p.add_argument(
        "--straggler-counts", dest="straggler_counts", default="0,5,10",
        help="fixedcount values, comma-separated",
    )
    p.add_argument("--dims", help="dimension (k) values, comma-separated")
    p.add_argument("--seeds", type=int, default=5, help="run seeds 0..N-1")
    p.add_argument("--out", help="results CSV (stdout if omitted)")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("net-master", help="serve a run to TCP workers")
    _add_config_overrides(p)
    p.add_argument("--bind", default="127.0.0.1:0", help="host:port (port 0 = pick)")
    p.add_argument("--deadline-ms", dest="deadline_ms", type=float)
    p.add_argument(
        "--accept-timeout", dest="accept_timeout", type=float,
        help="give up if the fleet is incomplete after this many seconds",
    )
    p.add_argument("--trace-out", dest="trace_out")
    p.add_argument("--summary-out", dest="summary_out")
    p.set_defaults(fn=cmd_net_master)

    p = sub.add_parser("net-worker", help="serve rounds for a master")
    p.add_argument("--connect", required=True, help="host:port of the master")
    p.add_argument("--worker-id", dest="worker_id", type=int)
    p.add_argument("--slowdown", help="p:ms, sleep ms with probability p per round")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--connect-timeout", dest="connect_timeout", type=float, default=5.0)
    p.set_defaults(fn=cmd_net_worker)

    p = sub.add_parser("gc-check", help="gradient-coding feasibility check")
    p.add_argument("--w", type=int, required=True)
    p.add_argument("--s", type=int, required=True)
    p.add_argument("--m", type=int, required=True)
    p.set_defaults(fn=cmd_gc_check)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
