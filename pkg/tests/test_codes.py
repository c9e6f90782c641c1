import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from momentenc.codes import (
    CodeConstructionError,
    LdpcParams,
    ParityCheck,
    UnrecoverableError,
    build_ldpc_code,
    build_regular_ldpc,
    density_evolution,
    encode,
    erasure_threshold,
    identity_generator,
    ml_erasure_decode,
    mds_decode,
    peel_decode,
    random_mds_generator,
    read_parity_check,
    replication2_generator,
    systematic_generator,
    write_parity_check,
)


# ---------------------------------------------------------------------------
# construction


def test_ldpc_params_validation():
    with pytest.raises(ValueError):
        LdpcParams(n=10, l=1, r=5)
    with pytest.raises(ValueError):
        LdpcParams(n=10, l=3, r=3)  # r must exceed l
    with pytest.raises(ValueError):
        LdpcParams(n=10, l=3, r=7)  # 30 % 7 != 0
    p = LdpcParams(n=24, l=3, r=6)
    assert p.p == 12 and p.k == 12


def test_regular_construction_degrees():
    params = LdpcParams(n=60, l=3, r=6, seed=4)
    h = build_regular_ldpc(params)
    assert np.array_equal(h.col_degrees(), np.full(60, 3))
    assert np.array_equal(h.row_degrees(), np.full(30, 6))
    # repair pass must leave no parallel edges
    pairs = [(j, c) for j, c, _ in h.edges()]
    assert len(set(pairs)) == len(pairs) == 180
    assert all(v == 1.0 for _, _, v in h.edges())


def test_construction_is_deterministic():
    a = build_regular_ldpc(LdpcParams(n=30, l=3, r=6, seed=8))
    b = build_regular_ldpc(LdpcParams(n=30, l=3, r=6, seed=8))
    c = build_regular_ldpc(LdpcParams(n=30, l=3, r=6, seed=9))
    assert np.array_equal(a.to_dense(), b.to_dense())
    assert not np.array_equal(a.to_dense(), c.to_dense())


def test_parity_check_validation():
    with pytest.raises(ValueError):
        ParityCheck(p=2, n=4, rows=[0, 0], cols=[1, 1], vals=[1.0, 1.0])  # dup
    with pytest.raises(ValueError):
        ParityCheck(p=2, n=4, rows=[2], cols=[0], vals=[1.0])  # row range
    with pytest.raises(ValueError):
        ParityCheck(p=2, n=4, rows=[0], cols=[0], vals=[0.0])  # zero coeff


def test_systematic_generator_annihilates_parity():
    params = LdpcParams(n=40, l=3, r=6, seed=1)
    h, gen = build_ldpc_code(params)
    prod = h.to_dense() @ gen.matrix
    assert np.abs(prod).max() < 1e-8
    # systematic block is the identity on the message rows
    assert np.allclose(gen.matrix[gen.systematic_rows], np.eye(params.k), atol=1e-12)


def test_encode_systematic_positions_carry_message():
    params = LdpcParams(n=30, l=3, r=6, seed=2)
    _, gen = build_ldpc_code(params)
    msg = np.arange(params.k, dtype=float)
    cw = encode(gen, msg)
    assert np.allclose(cw[gen.systematic_rows], msg, atol=1e-12)


# ---------------------------------------------------------------------------
# peeling decoder


def test_peel_no_erasures_is_identity():
    params = LdpcParams(n=30, l=3, r=6, seed=3)
    h, gen = build_ldpc_code(params)
    cw = encode(gen, np.random.default_rng(0).standard_normal(params.k))
    out = peel_decode(h, cw.copy(), max_sweeps=10)
    assert out.iterations_used == 0
    assert out.unresolved.size == 0
    assert np.array_equal(out.values, cw)


def test_peel_single_erasure():
    """One erased symbol is recovered by any check containing it."""
    params = LdpcParams(n=30, l=3, r=6, seed=3)
    h, gen = build_ldpc_code(params)
    cw = encode(gen, np.random.default_rng(1).standard_normal(params.k))
    received = cw.copy()
    received[7] = np.nan
    out = peel_decode(h, received, max_sweeps=10)
    assert out.unresolved.size == 0
    assert out.iterations_used == 1
    assert np.allclose(out.values, cw, atol=1e-8)


def test_peel_unresolved_stay_nan():
    # erase an entire check's worth of symbols plus enough others that
    # nothing resolves: all-erased input cannot start peeling
    params = LdpcParams(n=30, l=3, r=6, seed=3)
    h, _ = build_ldpc_code(params)
    received = np.full(30, np.nan)
    out = peel_decode(h, received, max_sweeps=10)
    assert out.unresolved.size == 30
    assert np.all(np.isnan(out.values))
    assert out.iterations_used == 0


def test_peel_subset_of_ml_exhaustive():
    """Every erasure pattern on a small code: whatever peeling resolves must
    agree with the codeword, and a full peel implies ML decodes too."""
    params = LdpcParams(n=10, l=2, r=5, seed=6)
    h, gen = build_ldpc_code(params)
    rng = np.random.default_rng(5)
    msg = rng.standard_normal(params.k)
    cw = encode(gen, msg)
    for bits in itertools.product([0, 1], repeat=10):
        erased = np.flatnonzero(bits)
        received = cw.copy()
        received[erased] = np.nan
        out = peel_decode(h, received.copy(), max_sweeps=20)
        resolved = np.setdiff1d(np.arange(10), out.unresolved)
        assert np.allclose(out.values[resolved], cw[resolved], rtol=1e-8, atol=1e-8)
        ml = ml_erasure_decode(h, received)
        if out.unresolved.size == 0:
            assert ml is not None
            assert np.allclose(out.values, ml, atol=1e-6)


def test_peel_progress_monotone_in_sweep_budget():
    params = LdpcParams(n=60, l=3, r=6, seed=9)
    h, gen = build_ldpc_code(params)
    rng = np.random.default_rng(10)
    cw = encode(gen, rng.standard_normal(params.k))
    received = cw.copy()
    received[rng.random(60) < 0.35] = np.nan
    prev = None
    for d in range(0, 8):
        out = peel_decode(h, received.copy(), max_sweeps=d)
        cur = set(out.unresolved.tolist())
        if prev is not None:
            assert cur <= prev  # more sweeps never lose ground
        prev = cur


def test_peel_iterations_counts_productive_sweeps():
    params = LdpcParams(n=60, l=3, r=6, seed=9)
    h, gen = build_ldpc_code(params)
    rng = np.random.default_rng(11)
    cw = encode(gen, rng.standard_normal(params.k))
    received = cw.copy()
    received[rng.random(60) < 0.2] = np.nan
    out = peel_decode(h, received, max_sweeps=50)
    # a generous budget is not "used"; only sweeps that resolved something
    assert out.iterations_used <= 10
    again = peel_decode(h, received, max_sweeps=out.iterations_used)
    assert np.array_equal(again.unresolved, out.unresolved)


def test_ml_decode_inconsistent_raises():
    params = LdpcParams(n=10, l=2, r=5, seed=6)
    h, gen = build_ldpc_code(params)
    cw = encode(gen, np.ones(params.k))
    cw[0] += 1.0  # no longer a codeword
    cw[1] = np.nan  # force a solve that cannot satisfy every check
    with pytest.raises(ValueError):
        ml_erasure_decode(h, cw)


# ---------------------------------------------------------------------------
# dense generators


def test_mds_generator_shape_and_prefix():
    gen = random_mds_generator(n=12, k=5, seed=0)
    assert gen.matrix.shape == (12, 5)
    assert np.array_equal(gen.matrix[:5], np.eye(5))
    assert gen.dmin == 8 and gen.dmin_probabilistic


def test_mds_any_k_rows_decode():
    n, k = 8, 3
    gen = random_mds_generator(n, k, seed=1)
    msg = np.random.default_rng(2).standard_normal(k)
    cw = gen.matrix @ msg
    for rows in itertools.combinations(range(n), k):
        rows = list(rows)
        got = mds_decode(gen.matrix[rows], cw[rows])
        assert np.allclose(got, msg, atol=1e-8)


def test_mds_too_few_rows_raise():
    gen = random_mds_generator(8, 3, seed=1)
    cw = gen.matrix @ np.ones(3)
    with pytest.raises(UnrecoverableError):
        mds_decode(gen.matrix[:2], cw[:2])


def test_identity_and_replication_generators():
    ident = identity_generator(4)
    assert np.array_equal(ident.matrix, np.eye(4))
    assert ident.dmin == 1
    rep = replication2_generator(3)
    assert rep.matrix.shape == (6, 3)
    msg = np.array([5.0, -1.0, 2.0])
    cw = rep.matrix @ msg
    assert np.allclose(cw, [5.0, 5.0, -1.0, -1.0, 2.0, 2.0])
    assert rep.dmin == 2


# ---------------------------------------------------------------------------
# density evolution


def test_de_hand_value():
    # q1 = 0.5 * (1 - 0.5^5)^2 = 0.5 * (31/32)^2 = 961/2048
    qs = density_evolution(0.5, 3, 6, 1)
    assert qs[0] == pytest.approx(0.5)
    assert qs[1] == pytest.approx(961.0 / 2048.0)
    assert qs[1] == pytest.approx(0.46924, abs=5e-6)


def test_de_monotone_below_threshold():
    qs = density_evolution(0.35, 3, 6, 60)
    assert np.all(np.diff(qs) <= 1e-15)
    assert qs[-1] < 1e-6


def test_de_stuck_above_threshold():
    qs = density_evolution(0.5, 3, 6, 200)
    assert qs[-1] > 0.25


def test_de_endpoints_are_fixed():
    assert density_evolution(0.0, 3, 6, 5)[-1] == 0.0
    assert density_evolution(1.0, 3, 6, 5)[-1] == pytest.approx(1.0)


def test_threshold_3_6():
    q = erasure_threshold(3, 6, tol=1e-4)
    assert 0.42 < q < 0.44
    # convergence on either side of the reported value
    assert density_evolution(q - 5e-3, 3, 6, 3000)[-1] < 1e-9
    assert density_evolution(q + 5e-3, 3, 6, 3000)[-1] > 1e-3


def test_threshold_2_4_is_one_third():
    # for l=2 the recursion linearizes to (r-1) q0 q near zero, so the
    # true threshold is exactly 1/(r-1); the finite iteration cap biases
    # the computed value slightly low because decay near the threshold is
    # subexponential
    q = erasure_threshold(2, 4, tol=1e-4)
    assert q <= 1.0 / 3.0 + 1e-4
    assert q == pytest.approx(1.0 / 3.0, abs=1e-3)


def edge_bp_unresolved_rate(h, z, sweeps, l, r):
    """Reference edge-message erasure rates on a concrete graph.

    Messages live on edges; a variable-to-check message stays erased only
    while the variable was channel-erased and every other incoming check
    message is erased. This is the quantity the q_d recursion tracks.
    """
    trip = list(h.edges())
    ec = np.array([t[0] for t in trip])
    ev = np.array([t[1] for t in trip])
    m_vc = z[ev].astype(float)
    for _ in range(sweeps):
        known = 1.0 - m_vc
        chk_known = np.bincount(ec, weights=known, minlength=h.p)
        others_known = chk_known[ec] - known
        m_cv = (others_known < r - 1).astype(float)
        var_erased_in = np.bincount(ev, weights=m_cv, minlength=h.n)
        others_erased = var_erased_in[ev] - m_cv
        m_vc = np.where((z[ev] == 1) & (others_erased >= l - 1), 1.0, 0.0)
    return float(m_vc.mean())


def test_recursion_tracks_edge_messages_on_sampled_graph():
    """The q_d recursion predicts edge-message erasure rates on a large
    sampled graph to within sampling error."""
    l, r, n = 3, 6, 20_000
    h = build_regular_ldpc(LdpcParams(n=n, l=l, r=r, seed=12))
    rng = np.random.default_rng(13)
    for q0 in (0.3, 0.4):
        z = (rng.random(n) < q0).astype(int)
        qs = density_evolution(q0, l, r, 4)
        for d in (1, 2, 4):
            emp = edge_bp_unresolved_rate(h, z, d, l, r)
            assert emp == pytest.approx(float(qs[d]), abs=0.015)


# ---------------------------------------------------------------------------
# file format


def test_parity_check_text_roundtrip(tmp_path):
    params = LdpcParams(n=30, l=3, r=6, seed=14)
    h = build_regular_ldpc(params)
    p = tmp_path / "h.txt"
    write_parity_check(h, p)
    first = p.read_text().splitlines()[0]
    assert first == "15 30 3 6"
    back = read_parity_check(p)
    assert np.array_equal(back.to_dense(), h.to_dense())


def test_parity_check_text_rejects_noninteger_coeffs(tmp_path):
    h = ParityCheck(p=1, n=2, rows=[0, 0], cols=[0, 1], vals=[1.0, 0.5])
    with pytest.raises(ValueError):
        write_parity_check(h, tmp_path / "h.txt")


# ---------------------------------------------------------------------------
# properties


@settings(deadline=None, max_examples=25)
@given(
    seed=st.integers(min_value=0, max_value=2**31),
    q=st.floats(min_value=0.0, max_value=0.45),
)
def test_peel_never_fabricates_values(seed, q):
    params = LdpcParams(n=36, l=3, r=6, seed=7)
    h, gen = build_ldpc_code(params)
    rng = np.random.default_rng(seed)
    cw = encode(gen, rng.standard_normal(params.k))
    received = cw.copy()
    received[rng.random(36) < q] = np.nan
    out = peel_decode(h, received, max_sweeps=30)
    resolved = np.setdiff1d(np.arange(36), out.unresolved)
    assert np.allclose(out.values[resolved], cw[resolved], rtol=1e-7, atol=1e-7)
    assert np.all(np.isnan(out.values[out.unresolved]))


@settings(deadline=None, max_examples=15)
@given(seed=st.integers(min_value=0, max_value=2**31))
def test_mds_roundtrip_random_survivors(seed):
    rng = np.random.default_rng(seed)
    gen = random_mds_generator(10, 4, seed=3)
    msg = rng.standard_normal(4)
    cw = gen.matrix @ msg
    rows = rng.choice(10, size=rng.integers(4, 11), replace=False)
    got = mds_decode(gen.matrix[rows], cw[rows])
    assert np.allclose(got, msg, atol=1e-7)


@settings(deadline=None, max_examples=20)
@given(
    q0=st.floats(min_value=0.01, max_value=0.99),
    d=st.integers(min_value=1, max_value=50),
)
def test_de_stays_in_unit_interval_and_below_q0(q0, d):
    qs = density_evolution(q0, 3, 6, d)
    assert np.all(qs >= 0.0) and np.all(qs <= 1.0)
    assert np.all(qs <= q0 + 1e-15)
