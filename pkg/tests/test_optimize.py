import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from momentenc.coded_gd import build_problem
from momentenc.linalg import DataSet, MomentSystem, exact_gradient, generate_dataset, moment_setup
from momentenc.optimize import (
    FixedRate,
    IterateTrace,
    OptimizerConfig,
    Projection,
    BoundRate,
    estimate_gradient_bound,
    pgd_step,
    project,
    psgd_single_sample,
    run_coded_pgd,
    spectral_norm,
    averaged_iterate_bound,
    trace_summary,
    write_trace_csv,
)
from momentenc.runtime import StragglerModel


def test_two_steps_by_hand():
    """M = diag(2, 1), b = (1, 1), eta = 0.1 from the origin:
    theta1 = (0.1, 0.1), theta2 = (0.18, 0.19)."""
    theta = np.zeros(2)
    M = np.diag([2.0, 1.0])
    b = np.ones(2)
    p = Projection.none()
    theta = pgd_step(theta, M @ theta - b, 0.1, p)
    assert np.allclose(theta, [0.1, 0.1], atol=1e-15)
    theta = pgd_step(theta, M @ theta - b, 0.1, p)
    assert np.allclose(theta, [0.18, 0.19], atol=1e-15)


def test_driver_reproduces_hand_unrolled_steps():
    # dataset with X'X = diag(2,1), X'y = (1,1), run uncoded with nobody
    # straggling: the driver must produce exactly the hand iterates
    X = np.diag([math.sqrt(2.0), 1.0])
    y = np.array([1.0 / math.sqrt(2.0), 1.0])
    ds = DataSet(X=X, y=y)
    ms = moment_setup(ds)
    prob = build_problem(ms.M, "uncoded", 2)
    cfg = OptimizerConfig(steps=2, rate=FixedRate(0.1))
    tr = run_coded_pgd(
        ds, ms, prob, StragglerModel.bernoulli(0.0), cfg, Projection.none()
    )
    assert np.allclose(tr.thetas[0], [0.1, 0.1], atol=1e-12)
    assert np.allclose(tr.theta_final, [0.18, 0.19], atol=1e-12)
    assert np.allclose(tr.theta_bar, [0.14, 0.145], atol=1e-12)


def test_loss_monotone_under_safe_rate():
    ds = generate_dataset(50, 8, noise_sigma=0.5, seed=3)
    ms = moment_setup(ds)
    prob = build_problem(ms.M, "uncoded", 8)
    eta = 1.0 / spectral_norm(ms.M)
    cfg = OptimizerConfig(steps=40, rate=FixedRate(eta))
    tr = run_coded_pgd(
        ds, ms, prob, StragglerModel.bernoulli(0.0), cfg, Projection.none()
    )
    assert np.all(np.diff(tr.losses) <= 1e-10)


def test_projection_none_and_ball():
    x = np.array([3.0, 4.0])
    assert np.array_equal(project(Projection.none(), x), x)
    got = project(Projection.l2_ball(2.5), x)
    assert np.linalg.norm(got) == pytest.approx(2.5)
    assert np.allclose(got, [1.5, 2.0])
    inside = np.array([0.3, 0.4])
    assert np.array_equal(project(Projection.l2_ball(2.5), inside), inside)


def test_hard_threshold_keeps_largest_with_low_index_ties():
    theta = np.array([1.0, -1.0, 2.0])
    got = project(Projection.hard_threshold(2), theta)
    # |2| wins, then the tie between positions 0 and 1 goes to position 0
    assert np.array_equal(got, [1.0, 0.0, 2.0])
    assert np.array_equal(project(Projection.hard_threshold(3), theta), theta)
    with pytest.raises(ValueError):
        project(Projection.hard_threshold(4), theta)


def test_projection_validation():
    with pytest.raises(ValueError):
        Projection.l2_ball(0.0)
    with pytest.raises(ValueError):
        Projection.hard_threshold(0)


def test_pgd_step_rejects_bad_inputs():
    theta = np.zeros(3)
    with pytest.raises(FloatingPointError):
        pgd_step(theta, np.array([1.0, np.inf, 0.0]), 0.1, Projection.none())
    with pytest.raises(FloatingPointError):
        pgd_step(theta, np.array([np.nan, 0.0, 0.0]), 0.1, Projection.none())
    with pytest.raises(ValueError):
        pgd_step(theta, np.zeros(3), -0.1, Projection.none())
    with pytest.raises(ValueError):
        pgd_step(theta, np.zeros(2), 0.1, Projection.none())


def test_rate_validation_and_resolution():
    with pytest.raises(ValueError):
        FixedRate(0.0)
    with pytest.raises(ValueError):
        BoundRate(radius=-1.0, grad_bound=2.0)
    cfg = OptimizerConfig(steps=100, rate=BoundRate(radius=3.0, grad_bound=6.0))
    assert cfg.eta() == pytest.approx(3.0 / (6.0 * 10.0))
    assert OptimizerConfig(steps=4, rate=FixedRate(0.2)).eta() == pytest.approx(0.2)
    with pytest.raises(ValueError):
        OptimizerConfig(steps=0, rate=FixedRate(0.1))
    with pytest.raises(ValueError):
        OptimizerConfig(steps=5, rate=0.1)


def char_poly_eigs(A):
    """Eigenvalues of a 3x3 symmetric matrix via its characteristic
    polynomial, an independent route to the spectrum."""
    tr = A[0, 0] + A[1, 1] + A[2, 2]
    m2 = (
        A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]
        + A[0, 0] * A[2, 2] - A[0, 2] * A[2, 0]
        + A[1, 1] * A[2, 2] - A[1, 2] * A[2, 1]
    )
    det = (
        A[0, 0] * (A[1, 1] * A[2, 2] - A[1, 2] * A[2, 1])
        - A[0, 1] * (A[1, 0] * A[2, 2] - A[1, 2] * A[2, 0])
        + A[0, 2] * (A[1, 0] * A[2, 1] - A[1, 1] * A[2, 0])
    )
    return np.roots([1.0, -tr, m2, -det])


def test_spectral_norm_against_char_poly():
    rng = np.random.default_rng(5)
    X = rng.standard_normal((9, 3))
    M = X.T @ X
    lam = max(abs(r) for r in char_poly_eigs(M))
    assert spectral_norm(M, tol=1e-10) == pytest.approx(float(lam), rel=1e-6)


def test_spectral_norm_handles_null_start():
    # the all-ones vector is in this matrix's null space
    M = np.array([[1.0, -1.0], [-1.0, 1.0]])
    assert spectral_norm(M, tol=1e-10) == pytest.approx(2.0, rel=1e-6)
    assert spectral_norm(np.zeros((3, 3))) == 0.0


def test_averaged_iterate_bound_values_and_errors():
    assert averaged_iterate_bound(2.0, 5.0, 0.0, 25) == pytest.approx(2.0)
    assert averaged_iterate_bound(2.0, 5.0, 0.5, 25) == pytest.approx(4.0)
    with pytest.raises(ValueError):
        averaged_iterate_bound(2.0, 5.0, 1.0, 25)
    with pytest.raises(ValueError):
        averaged_iterate_bound(2.0, 5.0, 0.2, 0)
    with pytest.raises(ValueError):
        averaged_iterate_bound(-2.0, 5.0, 0.2, 25)


def test_estimate_gradient_bound():
    M = np.diag([4.0, 1.0])
    b = np.array([3.0, 4.0])
    ms = MomentSystem(M=M, b=b)
    got = estimate_gradient_bound(ms, Projection.l2_ball(2.0))
    assert got == pytest.approx(4.0 * 2.0 + 5.0, rel=1e-6)
    assert estimate_gradient_bound(
        ms, Projection.none(), enclosing_radius=1.0
    ) == pytest.approx(9.0, rel=1e-6)
    with pytest.raises(ValueError):
        estimate_gradient_bound(ms, Projection.none())
    with pytest.raises(ValueError):
        estimate_gradient_bound(ms, Projection.hard_threshold(1))


def test_psgd_single_row_equals_full_gradient_descent():
    """With one sample the stochastic pick is forced, so the trajectory
    must coincide with deterministic descent on that sample."""
    rng = np.random.default_rng(6)
    X = rng.standard_normal((1, 4))
    ds = DataSet(X=X, y=np.array([1.5]))
    ms = moment_setup(ds)
    cfg = OptimizerConfig(steps=25, rate=FixedRate(0.05), seed=9)
    tr = psgd_single_sample(ds, cfg, Projection.none())
    theta = np.zeros(4)
    for _ in range(25):
        theta = pgd_step(theta, exact_gradient(ms, theta), 0.05, Projection.none())
    assert np.allclose(tr.theta_final, theta, atol=1e-10)


def test_psgd_is_seed_deterministic():
    ds = generate_dataset(40, 5, noise_sigma=0.2, seed=1)
    cfg = OptimizerConfig(steps=30, rate=FixedRate(0.001), seed=4)
    a = psgd_single_sample(ds, cfg, Projection.none())
    b = psgd_single_sample(ds, cfg, Projection.none())
    assert np.array_equal(a.thetas, b.thetas)
    cfg2 = OptimizerConfig(steps=30, rate=FixedRate(0.001), seed=5)
    c = psgd_single_sample(ds, cfg2, Projection.none())
    assert not np.array_equal(a.thetas, c.thetas)


def test_stalled_rounds_leave_theta_unchanged():
    """An exact-scheme round that cannot invert stalls: no update, full
    erasure recorded, the step still consumed."""
    ds = generate_dataset(60, 10, seed=7)
    ms = moment_setup(ds)
    prob = build_problem(ms.M, "exact", 8, kcode=5, seed=0)
    model = StragglerModel.deterministic([0, 1, 2, 3])  # 4 survivors < kcode
    cfg = OptimizerConfig(steps=5, rate=FixedRate(0.01))
    tr = run_coded_pgd(ds, ms, prob, model, cfg, Projection.none())
    assert len(tr) == 5
    assert np.array_equal(tr.erased_counts, np.full(5, 10))
    assert np.array_equal(tr.decode_iters, np.zeros(5))
    assert np.allclose(tr.thetas, 0.0)


def test_theta_bar_is_iterate_mean():
    ds = generate_dataset(30, 4, seed=8)
    ms = moment_setup(ds)
    prob = build_problem(ms.M, "uncoded", 4)
    cfg = OptimizerConfig(steps=7, rate=FixedRate(0.01))
    tr = run_coded_pgd(
        ds, ms, prob, StragglerModel.bernoulli(0.0), cfg, Projection.none()
    )
    assert np.allclose(tr.theta_bar, tr.thetas.mean(axis=0), atol=1e-15)


def test_threshold_stops_early():
    ds = generate_dataset(60, 6, noise_sigma=0.0, seed=9)
    ms = moment_setup(ds)
    prob = build_problem(ms.M, "uncoded", 6)
    eta = 1.0 / spectral_norm(ms.M)
    cfg = OptimizerConfig(steps=5000, rate=FixedRate(eta))
    tr = run_coded_pgd(
        ds, ms, prob, StragglerModel.bernoulli(0.0), cfg, Projection.none(),
        threshold=1e-4,
    )
    assert tr.steps_to_threshold is not None
    assert len(tr) == tr.steps_to_threshold < 5000
    assert tr.dists[-1] <= 1e-4 * np.linalg.norm(ds.theta_star)
    assert tr.dists[-2] > 1e-4 * np.linalg.norm(ds.theta_star)


def test_trace_csv_layout_and_determinism(tmp_path):
    ds = generate_dataset(30, 4, seed=8)
    ms = moment_setup(ds)
    prob = build_problem(ms.M, "uncoded", 4)
    cfg = OptimizerConfig(steps=6, rate=FixedRate(0.01), seed=2)
    model = StragglerModel.bernoulli(0.3)
    pa, pb = tmp_path / "a.csv", tmp_path / "b.csv"
    write_trace_csv(run_coded_pgd(ds, ms, prob, model, cfg, Projection.none()), pa)
    write_trace_csv(run_coded_pgd(ds, ms, prob, model, cfg, Projection.none()), pb)
    assert pa.read_bytes() == pb.read_bytes()
    lines = pa.read_text().splitlines()
    assert lines[0] == "t,loss,dist_to_opt,erased_count,decode_iters,ms_elapsed"
    assert len(lines) == 7
    assert lines[1].split(",")[0] == "1"
    assert lines[1].split(",")[5] == "0.0"  # simulated runs record no time


def test_trace_summary_fields():
    ds = generate_dataset(30, 4, seed=8)
    ms = moment_setup(ds)
    prob = build_problem(ms.M, "uncoded", 4)
    cfg = OptimizerConfig(steps=6, rate=FixedRate(0.01), seed=2)
    tr = run_coded_pgd(
        ds, ms, prob, StragglerModel.bernoulli(0.3), cfg, Projection.none()
    )
    s = trace_summary(tr, ds.k)
    assert s["steps_executed"] == 6
    assert s["q_hat_empirical"] == pytest.approx(s["mean_erased"] / 4)
    assert s["final_loss"] == pytest.approx(float(tr.losses[-1]))


@settings(deadline=None, max_examples=60)
@given(
    x=hnp.arrays(np.float64, 5, elements=st.floats(-50, 50)),
    y=hnp.arrays(np.float64, 5, elements=st.floats(-50, 50)),
    radius=st.floats(min_value=0.1, max_value=20.0),
)
def test_ball_projection_is_nonexpansive(x, y, radius):
    p = Projection.l2_ball(radius)
    px, py = project(p, x), project(p, y)
    assert np.linalg.norm(px - py) <= np.linalg.norm(x - y) + 1e-9
    assert np.linalg.norm(px) <= radius + 1e-12


@settings(deadline=None, max_examples=60)
@given(
    x=hnp.arrays(np.float64, 6, elements=st.floats(-50, 50)),
    u=st.integers(min_value=1, max_value=6),
)
def test_hard_threshold_is_a_projection(x, u):
    p = Projection.hard_threshold(u)
    px = project(p, x)
    assert np.count_nonzero(px) <= u
    assert project(p, px) == pytest.approx(px)  # idempotent
    # no u-sparse vector is closer to x than the thresholded one
    kept = np.flatnonzero(px)
    dropped = np.setdiff1d(np.arange(6), kept)
    if kept.size == u and dropped.size:
        assert np.abs(x[kept]).min() >= np.abs(x[dropped]).max() - 1e-12
