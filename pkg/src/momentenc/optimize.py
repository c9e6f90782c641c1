"""Projected gradient descent driven by coded gradient recoveries.

The iteration is theta <- P(theta - eta * g_t) where g_t is whatever the
round's recovery produced: the exact M theta - b, or a zero-filled
approximation of it. A stalled round (exact scheme, unrecoverable
straggler pattern) leaves theta unchanged but still counts as a step.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from momentenc.codes import UnrecoverableError
from momentenc.linalg import DataSet, MomentSystem, loss


@dataclass(frozen=True)
class Projection:
    """Feasible-set projector: none, an l2 ball, or hard thresholding.

    Hard thresholding keeps the u largest-magnitude coordinates (ties go to
    the lowest index) and is not non-expansive, unlike the other two.
    """

    kind: str = "none"
    radius: float = 0.0
    u: int = 0

    @classmethod
    def none(cls) -> "Projection":
        return cls(kind="none")

    @classmethod
    def l2_ball(cls, radius: float) -> "Projection":
        if radius <= 0:
            raise ValueError("ball radius must be positive")
        return cls(kind="l2ball", radius=float(radius))

    @classmethod
    def hard_threshold(cls, u: int) -> "Projection":
        if u < 1:
            raise ValueError("sparsity level must be at least 1")
        return cls(kind="hardthreshold", u=int(u))


def project(p: Projection, theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if p.kind == "none":
        return theta
    if p.kind == "l2ball":
        nrm = float(np.linalg.norm(theta))
        if nrm <= p.radius or nrm == 0.0:
            return theta
        return theta * (p.radius / nrm)
    if p.kind == "hardthreshold":
        if p.u > theta.size:
            raise ValueError(f"sparsity {p.u} exceeds dimension {theta.size}")
        if p.u == theta.size:
            return theta
        order = np.argsort(-np.abs(theta), kind="stable")
        out = np.zeros_like(theta)
        keep = order[: p.u]
        out[keep] = theta[keep]
        return out
    raise ValueError(f"unknown projection kind {p.kind!r}")


@dataclass(frozen=True)
class FixedRate:
    eta: float

    def __post_init__(self):
        if not (self.eta > 0 and math.isfinite(self.eta)):
            raise ValueError("eta must be positive and finite")


@dataclass(frozen=True)
class BoundRate:
    """eta = radius / (grad_bound * sqrt(T)), the rate the regret bound uses."""

    radius: float
    grad_bound: float

    def __post_init__(self):
        if self.radius <= 0 or self.grad_bound <= 0:
            raise ValueError("radius and grad_bound must be positive")


@dataclass(frozen=True)
class OptimizerConfig:
    steps: int
    rate: object  # FixedRate | BoundRate
    max_sweeps: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("need at least one step")
        if self.max_sweeps < 0:
            raise ValueError("sweep budget must be nonnegative")
        if not isinstance(self.rate, (FixedRate, BoundRate)):
            raise ValueError("rate must be FixedRate or BoundRate")

    def eta(self) -> float:
        if isinstance(self.rate, FixedRate):
            return self.rate.eta
        return self.rate.radius / (self.rate.grad_bound * math.sqrt(self.steps))


@dataclass
class IterateTrace:
    """Per-step records plus the final and averaged iterates.

    dists is NaN throughout when the optimum is unknown. ms_elapsed is real
    wall-clock only for networked runs; simulated rounds record 0.0 so that
    identical configs produce byte-identical trace files.
    """

    losses: np.ndarray
    dists: np.ndarray
    erased_counts: np.ndarray
    decode_iters: np.ndarray
    ms_elapsed: np.ndarray
    survivors: list
    thetas: np.ndarray
    theta_final: np.ndarray
    theta_bar: np.ndarray
    steps_to_threshold: int | None

    def __len__(self):
        return len(self.losses)


def pgd_step(theta: np.ndarray, g: np.ndarray, eta: float, p: Projection) -> np.ndarray:
    """One projected descent step; rejects non-finite gradients outright."""
    g = np.asarray(g, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if g.shape != theta.shape:
        raise ValueError(f"gradient shape {g.shape} does not match {theta.shape}")
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient")
    if not (eta > 0 and math.isfinite(eta)):
        raise ValueError("eta must be positive and finite")
    return project(p, theta - eta * g)


def _run_loop(
    round_fn,
    recover_fn,
    dataset: DataSet,
    cfg: OptimizerConfig,
    projection: Projection,
    theta0: np.ndarray | None,
    threshold: float | None,
    wall_clock: bool,
) -> IterateTrace:
    """Shared driver for simulated and networked runs.

    round_fn(t, theta) executes round t and returns a RoundOutcome;
    recover_fn(outcome) turns it into a RecoveredGradient or raises
    UnrecoverableError for a stalled round.
    """
    k = dataset.k
    theta = np.zeros(k) if theta0 is None else np.asarray(theta0, dtype=np.float64).copy()
    if theta.shape != (k,):
        raise ValueError(f"theta0 has shape {theta.shape}, expected ({k},)")
    eta = cfg.eta()
    tstar = dataset.theta_star
    tstar_norm = float(np.linalg.norm(tstar)) if tstar is not None else 0.0
    losses, dists, erased, iters, ms, survs = [], [], [], [], [], []
    thetas = []
    steps_hit = None
    for t in range(1, cfg.steps + 1):
        tic = time.perf_counter() if wall_clock else 0.0
        outcome = round_fn(t, theta)
        try:
            rec = recover_fn(outcome)
            theta = pgd_step(theta, rec.g, eta, projection)
            erased.append(len(rec.unresolved))
            iters.append(rec.decode_iterations)
        except UnrecoverableError:
            # stalled round: theta unchanged, still counted
            erased.append(k)
            iters.append(0)
        ms.append((time.perf_counter() - tic) * 1000.0 if wall_clock else 0.0)
        survs.append(tuple(int(j) for j in outcome.survivors))
        losses.append(loss(dataset, theta))
        if tstar is not None:
            d = float(np.linalg.norm(theta - tstar))
            dists.append(d)
        else:
            dists.append(float("nan"))
        thetas.append(theta.copy())
        if threshold is not None and tstar is not None and steps_hit is None:
            rel_ok = (
                dists[-1] <= threshold * tstar_norm
                if tstar_norm > 0
                else dists[-1] <= threshold
            )
            if rel_ok:
                steps_hit = t
                break
    thetas = np.asarray(thetas)
    return IterateTrace(
        losses=np.asarray(losses),
        dists=np.asarray(dists),
        erased_counts=np.asarray(erased, dtype=np.int64),
        decode_iters=np.asarray(iters, dtype=np.int64),
        ms_elapsed=np.asarray(ms),
        survivors=survs,
        thetas=thetas,
        theta_final=thetas[-1].copy(),
        theta_bar=thetas.mean(axis=0),
        steps_to_threshold=steps_hit,
    )


def run_coded_pgd(
    dataset: DataSet,
    ms: MomentSystem,
    problem,
    model,
    cfg: OptimizerConfig,
    projection: Projection,
    theta0: np.ndarray | None = None,
    threshold: float | None = None,
    runtime=None,
) -> IterateTrace:
    """Projected gradient descent over simulated straggler rounds.

    Each round samples stragglers from its own (seed, t) substream, asks
    the survivors for their products, and recovers a gradient according to
    the problem's scheme. Passing threshold (with a known theta_star) stops
    the run at the first step whose relative distance falls below it.
    """
    if runtime is None:
        from momentenc.runtime import SimulatedRuntime

        runtime = SimulatedRuntime(model=model, seed=cfg.seed)
    alloc = problem.alloc
    if alloc.k != dataset.k or ms.k != dataset.k:
        raise ValueError("allocation, moments and dataset disagree on dimension")

    def round_fn(t, theta):
        return runtime.run_round(alloc, theta, t)

    def recover_fn(outcome):
        return problem.recover(
            outcome.responses, outcome.survivors, ms.b, cfg.max_sweeps
        )

    return _run_loop(
        round_fn, recover_fn, dataset, cfg, projection, theta0, threshold, False
    )


def psgd_single_sample(
    dataset: DataSet,
    cfg: OptimizerConfig,
    projection: Projection,
    theta0: np.ndarray | None = None,
    threshold: float | None = None,
) -> IterateTrace:
    """Straggler-free baseline: one uniformly drawn sample per step.

    The update is theta <- P(theta - eta * m * (x_i x_i' theta - y_i x_i)),
    an unbiased estimate of the full gradient scaled by the sample count.
    With m = 1 it reduces to full-gradient descent.
    """
    k = dataset.k
    theta = np.zeros(k) if theta0 is None else np.asarray(theta0, dtype=np.float64).copy()
    eta = cfg.eta()
    tstar = dataset.theta_star
    tstar_norm = float(np.linalg.norm(tstar)) if tstar is not None else 0.0
    losses, dists, thetas = [], [], []
    steps_hit = None
    for t in range(1, cfg.steps + 1):
        rng = np.random.default_rng((cfg.seed, t))
        i = int(rng.integers(dataset.m))
        xi = dataset.X[i]
        g = dataset.m * ((xi @ theta - dataset.y[i]) * xi)
        theta = pgd_step(theta, g, eta, projection)
        losses.append(loss(dataset, theta))
        if tstar is not None:
            dists.append(float(np.linalg.norm(theta - tstar)))
        else:
            dists.append(float("nan"))
        thetas.append(theta.copy())
        if threshold is not None and tstar is not None and steps_hit is None:
            rel_ok = (
                dists[-1] <= threshold * tstar_norm
                if tstar_norm > 0
                else dists[-1] <= threshold
            )
            if rel_ok:
                steps_hit = t
                break
    thetas = np.asarray(thetas)
    n = len(losses)
    return IterateTrace(
        losses=np.asarray(losses),
        dists=np.asarray(dists),
        erased_counts=np.zeros(n, dtype=np.int64),
        decode_iters=np.zeros(n, dtype=np.int64),
        ms_elapsed=np.zeros(n),
        survivors=[()] * n,
        thetas=thetas,
        theta_final=thetas[-1].copy(),
        theta_bar=thetas.mean(axis=0),
        steps_to_threshold=steps_hit,
    )


def averaged_iterate_bound(radius: float, grad_bound: float, q_d: float, steps: int) -> float:
    """Regret-style bound on E[L(theta_bar)] - L(theta*) for the averaged
    iterate: radius * grad_bound / ((1 - q_d) * sqrt(steps))."""
    if steps < 1:
        raise ValueError("steps must be positive")
    if radius <= 0 or grad_bound <= 0:
        raise ValueError("radius and grad_bound must be positive")
    if not 0.0 <= q_d < 1.0:
        raise ValueError("q_d must lie in [0, 1); the bound diverges at 1")
    return radius * grad_bound / ((1.0 - q_d) * math.sqrt(steps))


def spectral_norm(M: np.ndarray, tol: float = 1e-6, max_iters: int = 10_000) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("need a square matrix")
    k = M.shape[0]
    v = np.ones(k) / math.sqrt(k)
    lam = 0.0
    for it in range(max_iters):
        w = M @ v
        nxt = float(np.linalg.norm(w))
        if nxt == 0.0:
            if it == 0:
                # the all-ones start can sit in the null space; re-seed
                v = np.random.default_rng(0).standard_normal(k)
                v /= np.linalg.norm(v)
                continue
            return 0.0
        v = w / nxt
        if abs(nxt - lam) <= tol * max(nxt, 1e-300):
            return nxt
        lam = nxt
    return lam


def estimate_gradient_bound(
    ms: MomentSystem,
    projection: Projection,
    enclosing_radius: float | None = None,
) -> float:
    """Upper bound on the gradient norm over the feasible set:
    ||M||_2 * R + ||b||_2 with R the radius of a ball containing the set.

    The l2 ball supplies its own radius; any other projection needs an
    explicit enclosing_radius since the set is unbounded or irregular.
    """
    if enclosing_radius is not None:
        radius = float(enclosing_radius)
    elif projection.kind == "l2ball":
        radius = projection.radius
    else:
        raise ValueError(
            "feasible set has no intrinsic radius; pass enclosing_radius"
        )
    if radius <= 0:
        raise ValueError("enclosing radius must be positive")
    return spectral_norm(ms.M) * radius + float(np.linalg.norm(ms.b))


def write_trace_csv(trace: IterateTrace, path: str) -> None:
    """Per-step trace: t, loss, dist_to_opt, erased_count, decode_iters,
    ms_elapsed. Floats use repr so equal runs produce equal bytes."""
    with open(path, "w") as f:
        f.write("t,loss,dist_to_opt,erased_count,decode_iters,ms_elapsed\n")
        for t in range(len(trace)):
            f.write(
                f"{t + 1},{float(trace.losses[t])!r},{float(trace.dists[t])!r},"
                f"{int(trace.erased_counts[t])},{int(trace.decode_iters[t])},"
                f"{float(trace.ms_elapsed[t])!r}\n"
            )


def trace_summary(trace: IterateTrace, k: int) -> dict:
    """Trace-derived summary fields, ready to merge into a run report."""
    return {
        "steps_executed": len(trace),
        "final_loss": float(trace.losses[-1]),
        "final_dist": float(trace.dists[-1]),
        "steps_to_threshold": trace.steps_to_threshold,
        "mean_erased": float(trace.erased_counts.mean()),
        "q_hat_empirical": float(trace.erased_counts.mean()) / k,
        "mean_decode_iters": float(trace.decode_iters.mean()),
    }
