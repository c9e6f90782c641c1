"""Erasure codes over the reals: regular LDPC ensembles with peeling
decoding, dense random generators with least-squares recovery, and the
density-evolution analysis that predicts peeling behaviour.

Codewords live in R^n. A parity-check matrix H (p rows, n columns) defines
the code {c : Hc = 0}; a systematic generator G (n rows, k = n - p columns)
maps a message to a codeword that carries the message verbatim on the rows
listed in systematic_rows. Stragglers turn into erasures, so decoding here
means filling NaN coordinates back in.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class CodeConstructionError(Exception):
    """Raised when a code cannot be built from the given parameters or seed."""


class UnrecoverableError(Exception):
    """Raised when the surviving rows cannot determine the coded values."""


@dataclass(frozen=True)
class LdpcParams:
    """Regular ensemble parameters: length n, column weight l, row weight r."""

    n: int
    l: int
    r: int
    seed: int = 0

    def __post_init__(self):
        if self.l < 2:
            raise ValueError("column weight l must be at least 2")
        if self.r <= self.l:
            raise ValueError("row weight r must exceed column weight l")
        if self.n <= 0 or (self.n * self.l) % self.r != 0:
            raise ValueError("need r to divide n*l so all checks have degree r")
        if self.k <= 0:
            raise ValueError("parameters leave no message coordinates")

    @property
    def p(self) -> int:
        return self.n * self.l // self.r

    @property
    def k(self) -> int:
        return self.n - self.p


class ParityCheck:
    """Sparse p-by-n parity-check matrix stored as adjacency lists."""

    def __init__(self, p, n, rows, cols, vals):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        if not (rows.shape == cols.shape == vals.shape):
            raise ValueError("rows, cols, vals must have equal length")
        if rows.size and (rows.min() < 0 or rows.max() >= p):
            raise ValueError("row index out of range")
        if cols.size and (cols.min() < 0 or cols.max() >= n):
            raise ValueError("column index out of range")
        if np.any(vals == 0.0):
            raise ValueError("stored coefficients must be nonzero")
        key = rows * n + cols
        if np.unique(key).size != key.size:
            raise ValueError("duplicate (row, col) entry")
        self.p = int(p)
        self.n = int(n)
        order = np.argsort(key, kind="stable")
        rows, cols, vals = rows[order], cols[order], vals[order]
        self.row_cols = []
        self.row_vals = []
        starts = np.searchsorted(rows, np.arange(p + 1))
        for j in range(p):
            self.row_cols.append(cols[starts[j] : starts[j + 1]].copy())
            self.row_vals.append(vals[starts[j] : starts[j + 1]].copy())
        self.col_rows = [[] for _ in range(n)]
        for rr, cc in zip(rows, cols):
            self.col_rows[cc].append(rr)
        self.col_rows = [np.asarray(x, dtype=np.int64) for x in self.col_rows]

    @classmethod
    def from_dense(cls, a) -> "ParityCheck":
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2:
            raise ValueError("need a 2-d matrix")
        rr, cc = np.nonzero(a)
        return cls(a.shape[0], a.shape[1], rr, cc, a[rr, cc])

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.p, self.n))
        for j in range(self.p):
            out[j, self.row_cols[j]] = self.row_vals[j]
        return out

    def edges(self):
        """All (row, col, value) triples in canonical row-major order."""
        for j in range(self.p):
            for c, v in zip(self.row_cols[j], self.row_vals[j]):
                yield j, int(c), float(v)

    def col_degrees(self) -> np.ndarray:
        return np.array([len(x) for x in self.col_rows])

    def row_degrees(self) -> np.ndarray:
        return np.array([len(x) for x in self.row_cols])


@dataclass
class GeneratorMatrix:
    """Dense n-by-k generator; systematic_rows index the identity rows.

    dmin is the known minimum distance when exact. For the dense random
    construction it is n - k + 1 only almost surely, which the
    dmin_probabilistic flag records.
    """

    matrix: np.ndarray
    systematic_rows: np.ndarray
    dmin: int | None = None
    dmin_probabilistic: bool = False

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        self.systematic_rows = np.asarray(self.systematic_rows, dtype=np.int64)
        n, k = self.matrix.shape
        if self.systematic_rows.shape != (k,):
            raise ValueError("need exactly k systematic rows")
        sub = self.matrix[self.systematic_rows, :]
        if not np.allclose(sub, np.eye(k), atol=1e-12):
            raise ValueError("systematic rows do not form the identity")

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def k(self) -> int:
        return self.matrix.shape[1]


@dataclass
class DecodeOutcome:
    """Peeling result: values (NaN where unresolved), the unresolved index
    set, and how many productive sweeps ran."""

    values: np.ndarray
    unresolved: np.ndarray
    iterations_used: int


def build_regular_ldpc(params: LdpcParams) -> ParityCheck:
    """Sample a regular code by random socket matching.

    Each of the n variables exposes l sockets, each of the p checks exposes
    r sockets, and a uniform permutation pairs them up. Colliding pairs
    (parallel edges) are repaired by swapping the check sockets of the
    colliding edges with uniformly chosen partners, up to 100 passes; all
    coefficients are 1.
    """
    n, l, r, p = params.n, params.l, params.r, params.p
    rng = np.random.default_rng(params.seed)
    edge_var = np.repeat(np.arange(n), l)
    edge_chk = np.repeat(np.arange(p), r)[rng.permutation(n * l)]
    for _ in range(100):
        key = edge_chk * np.int64(n) + edge_var
        order = np.argsort(key, kind="stable")
        sk = key[order]
        dup = np.zeros(sk.size, dtype=bool)
        dup[1:] = sk[1:] == sk[:-1]
        bad = order[dup]
        if bad.size == 0:
            return ParityCheck(p, n, edge_chk, edge_var, np.ones(n * l))
        # swap one colliding edge at a time so check degrees are preserved
        for idx in bad:
            j = int(rng.integers(0, edge_chk.size))
            edge_chk[idx], edge_chk[j] = edge_chk[j], edge_chk[idx]
    raise CodeConstructionError(
        "could not remove parallel edges within 100 repair passes"
    )


def systematic_generator(h: ParityCheck) -> GeneratorMatrix:
    """Solve for a systematic generator of the code {c : Hc = 0}.

    Parity positions are chosen by scanning columns right to left for
    pivots, so for a generic H the message occupies the first k
    coordinates of the codeword. Raises CodeConstructionError when H is
    rank deficient over the reals (rebuild with a fresh seed).
    """
    hd = h.to_dense()
    p, n = hd.shape
    k = n - p
    if k <= 0:
        raise CodeConstructionError("no message coordinates: p >= n")
    scale = max(1.0, float(np.abs(hd).max()))
    work = hd.copy()
    used = np.zeros(p, dtype=bool)
    parity_cols = []
    for col in range(n - 1, -1, -1):
        colvals = np.where(used, 0.0, work[:, col])
        i = int(np.argmax(np.abs(colvals)))
        if abs(colvals[i]) <= 1e-10 * scale:
            continue
        used[i] = True
        parity_cols.append(col)
        factors = work[:, col] / work[i, col]
        factors[i] = 0.0
        work -= np.outer(factors, work[i])
        if len(parity_cols) == p:
            break
    if len(parity_cols) < p:
        raise CodeConstructionError("parity-check matrix is rank deficient")
    parity_cols = np.array(sorted(parity_cols), dtype=np.int64)
    sys_cols = np.setdiff1d(np.arange(n, dtype=np.int64), parity_cols)
    gpar = -np.linalg.solve(hd[:, parity_cols], hd[:, sys_cols])
    g = np.zeros((n, k))
    g[sys_cols, :] = np.eye(k)
    g[parity_cols, :] = gpar
    resid = float(np.abs(hd @ g).max())
    if resid > 1e-9 * scale * max(1.0, float(np.abs(g).max())):
        raise CodeConstructionError(f"generator residual {resid:.3e} too large")
    return GeneratorMatrix(matrix=g, systematic_rows=sys_cols)


def build_ldpc_code(params: LdpcParams, seed_attempts: int = 25):
    """Build (H, G), bumping the seed until the ensemble draw is usable."""
    last = None
    for i in range(seed_attempts):
        trial = LdpcParams(params.n, params.l, params.r, params.seed + i)
        try:
            h = build_regular_ldpc(trial)
            return h, systematic_generator(h)
        except CodeConstructionError as exc:
            last = exc
    raise CodeConstructionError(
        f"no usable code after {seed_attempts} seeds: {last}"
    )


def encode(g: GeneratorMatrix, msg: np.ndarray) -> np.ndarray:
    """Map a length-k message to its length-n codeword."""
    msg = np.asarray(msg, dtype=np.float64)
    if msg.shape != (g.k,):
        raise ValueError(f"message has shape {msg.shape}, expected ({g.k},)")
    return g.matrix @ msg


def _peel(h: ParityCheck, vals, erased, max_sweeps):
    """Shared peeling core; vals is (n, nrhs) with zeros at erased rows."""
    if max_sweeps < 0:
        raise ValueError("iteration budget must be nonnegative")
    cnt = np.zeros(h.p, dtype=np.int64)
    for j in range(h.p):
        cnt[j] = int(erased[h.row_cols[j]].sum())
    total = int(erased.sum())
    sweeps_used = 0
    for _ in range(max_sweeps):
        if total == 0:
            break
        progress = False
        # fixed row order, newly resolved values usable later in the sweep
        for j in range(h.p):
            if cnt[j] != 1:
                continue
            cols = h.row_cols[j]
            rv = h.row_vals[j]
            local = int(np.argmax(erased[cols]))
            e = cols[local]
            # every other participant is known, so the check pins c_e
            s = rv @ vals[cols, :]
            vals[e, :] = -s / rv[local]
            erased[e] = False
            total -= 1
            progress = True
            for c in h.col_rows[e]:
                cnt[c] -= 1
        if not progress:
            break
        sweeps_used += 1
    return vals, erased, sweeps_used


def peel_decode(
    h: ParityCheck, received: np.ndarray, max_sweeps: int
) -> DecodeOutcome:
    """Iterative erasure correction by check-by-check peeling.

    received marks erased coordinates with NaN. One iteration is a full
    sweep over all p checks in row order; a check with exactly one erased
    participant solves for it on the spot. Decoding stops after max_sweeps
    sweeps or after a sweep that resolves nothing, whichever comes first.
    iterations_used counts the sweeps that made progress, so an erasure-free
    word reports 0.
    """
    received = np.asarray(received, dtype=np.float64)
    if received.shape != (h.n,):
        raise ValueError(f"received has shape {received.shape}, expected ({h.n},)")
    erased = np.isnan(received)
    vals = np.where(erased, 0.0, received)[:, None]
    vals, erased, used = _peel(h, vals, erased.copy(), max_sweeps)
    out = vals[:, 0]
    unresolved = np.flatnonzero(erased)
    out = out.copy()
    out[unresolved] = np.nan
    return DecodeOutcome(values=out, unresolved=unresolved, iterations_used=used)


def ml_erasure_decode(h: ParityCheck, received: np.ndarray) -> np.ndarray | None:
    """Oracle decoder: solve H restricted to the erased columns.

    Returns the full codeword when the restricted submatrix has full column
    rank (the linear system pins every erased value), otherwise None.
    """
    received = np.asarray(received, dtype=np.float64)
    if received.shape != (h.n,):
        raise ValueError(f"received has shape {received.shape}, expected ({h.n},)")
    e = np.flatnonzero(np.isnan(received))
    if e.size == 0:
        return received.copy()
    hd = h.to_dense()
    known = np.setdiff1d(np.arange(h.n), e)
    a = hd[:, e]
    if np.linalg.matrix_rank(a) < e.size:
        return None
    rhs = -hd[:, known] @ received[known]
    sol = np.linalg.lstsq(a, rhs, rcond=None)[0]
    resid = float(np.abs(a @ sol - rhs).max())
    if resid > 1e-8 * max(1.0, float(np.abs(rhs).max())):
        raise ValueError("received word is inconsistent with the code")
    out = received.copy()
    out[e] = sol
    return out


def random_mds_generator(n: int, k: int, seed: int = 0) -> GeneratorMatrix:
    """Dense Gaussian generator, row-reduced so the first k rows are I_k.

    Every k-subset of rows is invertible almost surely, which gives minimum
    distance n - k + 1 with probability one (recorded as probabilistic).
    """
    if not 0 < k <= n:
        raise ValueError("need 0 < k <= n")
    rng = np.random.default_rng(seed)
    for _ in range(16):
        a = rng.standard_normal((n, k))
        top = a[:k, :]
        if abs(np.linalg.det(top)) > 1e-12:
            g = np.empty((n, k))
            g[:k, :] = np.eye(k)
            g[k:, :] = np.linalg.solve(top.T, a[k:, :].T).T
            return GeneratorMatrix(
                matrix=g,
                systematic_rows=np.arange(k, dtype=np.int64),
                dmin=n - k + 1,
                dmin_probabilistic=True,
            )
    raise CodeConstructionError("could not draw an invertible leading block")


def mds_decode(gsub: np.ndarray, received: np.ndarray) -> np.ndarray:
    """Recover the message from any full-rank subset of generator rows."""
    gsub = np.asarray(gsub, dtype=np.float64)
    received = np.asarray(received, dtype=np.float64)
    if gsub.ndim != 2 or received.shape != (gsub.shape[0],):
        raise ValueError("received length must match the row subset")
    k = gsub.shape[1]
    sol, _, rank, _ = np.linalg.lstsq(gsub, received, rcond=None)
    if rank < k:
        raise UnrecoverableError(
            f"surviving rows have rank {rank} < {k}, cannot recover"
        )
    resid = float(np.linalg.norm(gsub @ sol - received))
    if resid > 1e-8 * max(1.0, float(np.linalg.norm(received))):
        raise UnrecoverableError(f"inconsistent survivors, residual {resid:.3e}")
    return sol


def identity_generator(k: int) -> GeneratorMatrix:
    """The n = k identity code (no redundancy, dmin = 1)."""
    if k <= 0:
        raise ValueError("k must be positive")
    return GeneratorMatrix(
        matrix=np.eye(k), systematic_rows=np.arange(k, dtype=np.int64), dmin=1
    )


def replication2_generator(k: int) -> GeneratorMatrix:
    """Duplicate every message coordinate: rows 2a and 2a+1 both carry a."""
    if k <= 0:
        raise ValueError("k must be positive")
    g = np.zeros((2 * k, k))
    idx = np.arange(k)
    g[2 * idx, idx] = 1.0
    g[2 * idx + 1, idx] = 1.0
    return GeneratorMatrix(
        matrix=g, systematic_rows=(2 * idx).astype(np.int64), dmin=2
    )


def density_evolution(q0: float, l: int, r: int, iters: int) -> np.ndarray:
    """Iterate q_d = q0 * (1 - (1 - q_{d-1})^(r-1))^(l-1) from q_0 = q0.

    Returns the length iters+1 sequence [q_0, ..., q_iters]. The recursion
    is the large-n erasure-probability fixed point for the regular (l, r)
    ensemble under iterative correction.
    """
    if not 0.0 <= q0 <= 1.0:
        raise ValueError("q0 must lie in [0, 1]")
    if l < 2 or r < 2:
        raise ValueError("need l >= 2 and r >= 2")
    if iters < 0:
        raise ValueError("iters must be nonnegative")
    out = np.empty(iters + 1)
    out[0] = q0
    q = q0
    for d in range(1, iters + 1):
        q = q0 * (1.0 - (1.0 - q) ** (r - 1)) ** (l - 1)
        out[d] = q
    return out


def _de_converges(q0, l, r, max_iters=10_000, target=1e-10):
    q = q0
    for _ in range(max_iters):
        nxt = q0 * (1.0 - (1.0 - q) ** (r - 1)) ** (l - 1)
        if nxt < target:
            return True
        if nxt >= q:  # stalled at a nonzero fixed point
            return False
        q = nxt
    return False


def erasure_threshold(l: int, r: int, tol: float = 1e-3) -> float:
    """Largest initial erasure rate the recursion drives to zero.

    Bisection on [0, 1]; a point converges when density evolution falls
    below 1e-10 within 10^4 iterations. The result is accurate to +-tol.
    """
    if l < 2 or r < 2:
        raise ValueError("need l >= 2 and r >= 2")
    if tol <= 0:
        raise ValueError("tol must be positive")
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if _de_converges(mid, l, r):
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def write_parity_check(h: ParityCheck, path: str) -> None:
    """Text exchange format: header "p n l r", then one "row col" pair per
    line in row-major order. Only unit coefficients are representable."""
    cd = h.col_degrees()
    rd = h.row_degrees()
    l = int(cd[0]) if h.n and np.all(cd == cd[0]) else 0
    r = int(rd[0]) if h.p and np.all(rd == rd[0]) else 0
    with open(path, "w") as f:
        f.write(f"{h.p} {h.n} {l} {r}\n")
        for row, col, val in h.edges():
            if val != 1.0:
                raise ValueError("text format stores positions only; need unit coefficients")
            f.write(f"{row} {col}\n")


def read_parity_check(path: str) -> ParityCheck:
    """Read the text format written by write_parity_check."""
    with open(path) as f:
        header = f.readline().split()
        if len(header) != 4:
            raise ValueError(f"{path}: header must be 'p n l r'")
        p, n = int(header[0]), int(header[1])
        rows, cols = [], []
        for lineno, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'row col'")
            rows.append(int(parts[0]))
            cols.append(int(parts[1]))
    return ParityCheck(p, n, rows, cols, np.ones(len(rows)))
