"""Coded distribution of the moment matrix across workers.

The rows of M (padded to a multiple of the code dimension) are split into
contiguous partitions. Each partition is encoded column-for-column, giving
one coded row per codeword position, and position j of every partition's
codeword lands on worker j. A worker's round trip is then alpha inner
products against the current iterate; the master reassembles M theta from
whichever workers respond, either exactly (dense random code, least
squares over any full-rank row subset) or approximately (sparse code,
peeling with a sweep budget and zero fill for what remains unresolved).
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field

import numpy as np

from momentenc.codes import (
    GeneratorMatrix,
    ParityCheck,
    UnrecoverableError,
    _peel,
    identity_generator,
    build_ldpc_code,
    LdpcParams,
    mds_decode,
    random_mds_generator,
    replication2_generator,
)

_BLOCK_HEADER = struct.Struct("<II")  # worker id, alpha


@dataclass
class TaskAllocation:
    """Everything a round of workers needs: per-worker coded rows plus the
    layout metadata required to reassemble results."""

    w: int
    alpha: int
    k: int
    k_padded: int
    kcode: int
    n: int
    rows: list  # per worker, an (alpha, k) array of coded rows
    tags: list  # per worker, per row: (partition index, codeword position)
    systematic_rows: np.ndarray

    def __post_init__(self):
        if len(self.rows) != self.w or len(self.tags) != self.w:
            raise ValueError("need exactly one row bundle and tag list per worker")
        for j in range(self.w):
            if self.rows[j].shape != (self.alpha, self.k):
                raise ValueError(f"worker {j} bundle has shape {self.rows[j].shape}")
            if len(self.tags[j]) != self.alpha:
                raise ValueError(f"worker {j} has {len(self.tags[j])} tags")

    @property
    def n_partitions(self) -> int:
        return self.k_padded // self.kcode


@dataclass
class WorkerResponse:
    worker: int
    round: int
    products: np.ndarray  # alpha inner products, one per coded row


@dataclass
class RecoveredGradient:
    """g is the full-length gradient estimate with zeros at the unresolved
    coordinates; exact means nothing was left unresolved."""

    g: np.ndarray
    unresolved: np.ndarray
    exact: bool
    decode_iterations: int


def partition_rows(k: int, kcode: int) -> list[np.ndarray]:
    """Contiguous index blocks of size kcode covering k rows, zero-padding
    the tail block when kcode does not divide k."""
    if k <= 0 or kcode <= 0:
        raise ValueError("k and kcode must be positive")
    n_parts = -(-k // kcode)
    return [
        np.arange(i * kcode, (i + 1) * kcode, dtype=np.int64)
        for i in range(n_parts)
    ]


def _encode_rows(M: np.ndarray, gen: GeneratorMatrix) -> TaskAllocation:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"M must be square, got {M.shape}")
    k = M.shape[0]
    kcode = gen.k
    parts = partition_rows(k, kcode)
    k_padded = len(parts) * kcode
    mpad = M
    if k_padded != k:
        mpad = np.vstack([M, np.zeros((k_padded - k, k))])
    n = gen.n
    rows = [np.empty((len(parts), k)) for _ in range(n)]
    tags = [[(i, j) for i in range(len(parts))] for j in range(n)]
    for i, pidx in enumerate(parts):
        coded = gen.matrix @ mpad[pidx, :]
        for j in range(n):
            rows[j][i, :] = coded[j, :]
    return TaskAllocation(
        w=n,
        alpha=len(parts),
        k=k,
        k_padded=k_padded,
        kcode=kcode,
        n=n,
        rows=rows,
        tags=tags,
        systematic_rows=gen.systematic_rows.copy(),
    )


def encode_moment_exact(M: np.ndarray, gen: GeneratorMatrix) -> TaskAllocation:
    """Spread G M_P across n = w workers, one codeword position each.

    Any kcode responding workers determine every partition exactly, so up
    to n - kcode stragglers per round are tolerated outright.
    """
    return _encode_rows(M, gen)


def encode_moment_ldpc(M: np.ndarray, gen: GeneratorMatrix) -> TaskAllocation:
    """Same layout with a sparse systematic code; workers on systematic
    positions hold rows of M verbatim."""
    return _encode_rows(M, gen)


def worker_compute(alloc: TaskAllocation, j: int, theta: np.ndarray, t: int = 0) -> WorkerResponse:
    """One worker's round: alpha inner products of its coded rows with theta."""
    theta = np.asarray(theta, dtype=np.float64)
    if not 0 <= j < alloc.w:
        raise ValueError(f"worker id {j} out of range")
    if theta.shape != (alloc.k,):
        raise ValueError(f"theta has shape {theta.shape}, expected ({alloc.k},)")
    return WorkerResponse(worker=j, round=t, products=alloc.rows[j] @ theta)


def _check_responses(alloc, responses, survivors):
    sset = set(int(j) for j in survivors)
    if len(sset) != len(survivors):
        raise ValueError("duplicate worker in surviving set")
    rounds = set()
    for j, resp in responses.items():
        if j not in sset:
            raise ValueError(f"response from worker {j} outside the surviving set")
        if resp.products.shape != (alloc.alpha,):
            raise ValueError(f"worker {j} returned {resp.products.shape} products")
        rounds.add(resp.round)
    if len(rounds) > 1:
        raise ValueError(f"responses span rounds {sorted(rounds)}")
    missing = sset - set(responses)
    if missing:
        raise ValueError(f"no response recorded for survivors {sorted(missing)}")


def recover_exact(
    alloc: TaskAllocation,
    gen: GeneratorMatrix,
    responses: dict,
    survivors: np.ndarray,
    b: np.ndarray,
) -> RecoveredGradient:
    """Least-squares recovery of M theta from the surviving rows.

    Succeeds whenever the surviving generator rows have full column rank,
    which for the dense random construction is every straggler pattern of
    size < n - kcode + 1 almost surely. Raises UnrecoverableError otherwise.
    """
    survivors = np.asarray(sorted(int(j) for j in survivors), dtype=np.int64)
    _check_responses(alloc, responses, survivors)
    if survivors.size < alloc.kcode:
        raise UnrecoverableError(
            f"{survivors.size} survivors < code dimension {alloc.kcode}"
        )
    gsub = gen.matrix[survivors, :]
    mtheta = np.empty(alloc.k_padded)
    for i in range(alloc.n_partitions):
        received = np.array([responses[j].products[i] for j in survivors])
        mtheta[i * alloc.kcode : (i + 1) * alloc.kcode] = mds_decode(gsub, received)
    g = mtheta[: alloc.k] - np.asarray(b, dtype=np.float64)
    return RecoveredGradient(
        g=g,
        unresolved=np.empty(0, dtype=np.int64),
        exact=True,
        decode_iterations=0,
    )


def recover_approx(
    alloc: TaskAllocation,
    h: ParityCheck,
    responses: dict,
    survivors: np.ndarray,
    b: np.ndarray,
    max_sweeps: int,
) -> RecoveredGradient:
    """Peel each partition's codeword, then zero-fill what stays erased.

    All partitions share the straggler pattern (worker j is position j in
    every codeword), so a single peeling schedule applies to all of them
    and the values are propagated for every partition at once. Message
    coordinates left unresolved after the sweep budget form the unresolved
    set; both the estimate of M theta and b are zeroed there, matching a
    gradient that simply skips those coordinates for the round.
    """
    survivors = np.asarray(sorted(int(j) for j in survivors), dtype=np.int64)
    _check_responses(alloc, responses, survivors)
    b = np.asarray(b, dtype=np.float64)
    nparts = alloc.n_partitions
    erased = np.ones(alloc.n, dtype=bool)
    erased[survivors] = False
    vals = np.zeros((alloc.n, nparts))
    for j in survivors:
        vals[j, :] = responses[j].products
    vals, still_erased, used = _peel(h, vals, erased, max_sweeps)
    msg = vals[alloc.systematic_rows, :].T.reshape(-1)  # (i, a) -> i*kcode + a
    msg_erased = np.tile(still_erased[alloc.systematic_rows], nparts)
    chat = msg[: alloc.k]
    umask = msg_erased[: alloc.k]
    g = np.where(umask, 0.0, chat - b)
    unresolved = np.flatnonzero(umask).astype(np.int64)
    return RecoveredGradient(
        g=g,
        unresolved=unresolved,
        exact=unresolved.size == 0,
        decode_iterations=used,
    )


def _recover_replicated(alloc, gen, responses, survivors, b):
    """Direct read for codes whose columns are plain replica indicators."""
    survivors = np.asarray(sorted(int(j) for j in survivors), dtype=np.int64)
    _check_responses(alloc, responses, survivors)
    b = np.asarray(b, dtype=np.float64)
    alive = np.zeros(alloc.n, dtype=bool)
    alive[survivors] = True
    mtheta = np.zeros(alloc.k_padded)
    got = np.zeros(alloc.k_padded, dtype=bool)
    for a in range(alloc.kcode):
        replicas = np.flatnonzero(gen.matrix[:, a])
        source = next((int(p) for p in replicas if alive[p]), None)
        if source is None:
            continue
        prods = responses[source].products
        for i in range(alloc.n_partitions):
            mtheta[i * alloc.kcode + a] = prods[i]
            got[i * alloc.kcode + a] = True
    umask = ~got[: alloc.k]
    g = np.where(umask, 0.0, mtheta[: alloc.k] - b)
    unresolved = np.flatnonzero(umask).astype(np.int64)
    return RecoveredGradient(
        g=g,
        unresolved=unresolved,
        exact=unresolved.size == 0,
        decode_iterations=0,
    )


@dataclass
class EncodedProblem:
    """A scheme bound to a concrete allocation, ready to run rounds."""

    kind: str  # exact | ldpc | uncoded | replication2
    alloc: TaskAllocation
    gen: GeneratorMatrix | None = None
    pch: ParityCheck | None = None

    def recover(self, responses, survivors, b, max_sweeps) -> RecoveredGradient:
        if self.kind == "exact":
            return recover_exact(self.alloc, self.gen, responses, survivors, b)
        if self.kind == "ldpc":
            return recover_approx(
                self.alloc, self.pch, responses, survivors, b, max_sweeps
            )
        if self.kind in ("uncoded", "replication2"):
            return _recover_replicated(self.alloc, self.gen, responses, survivors, b)
        raise ValueError(f"unknown scheme kind {self.kind!r}")


def build_problem(
    M: np.ndarray,
    scheme: str,
    w: int,
    l: int | None = None,
    r: int | None = None,
    kcode: int | None = None,
    seed: int = 0,
) -> EncodedProblem:
    """Construct the allocation for one of the supported schemes.

    exact: dense random (w, kcode) code, kcode required.
    ldpc: regular (l, r) ensemble of length w, message length derived.
    uncoded: identity placement, one block of rows per worker.
    replication2: every block stored on a worker pair, w must be even.
    """
    if w <= 0:
        raise ValueError("w must be positive")
    if scheme == "exact":
        if kcode is None:
            raise ValueError("exact scheme needs kcode")
        gen = random_mds_generator(w, kcode, seed=seed)
        return EncodedProblem("exact", encode_moment_exact(M, gen), gen=gen)
    if scheme == "ldpc":
        if l is None or r is None:
            raise ValueError("ldpc scheme needs l and r")
        h, gen = build_ldpc_code(LdpcParams(w, l, r, seed))
        return EncodedProblem("ldpc", encode_moment_ldpc(M, gen), gen=gen, pch=h)
    if scheme == "uncoded":
        gen = identity_generator(w)
        return EncodedProblem("uncoded", _encode_rows(M, gen), gen=gen)
    if scheme == "replication2":
        if w % 2 != 0:
            raise ValueError("replication2 needs an even worker count")
        gen = replication2_generator(w // 2)
        return EncodedProblem("replication2", _encode_rows(M, gen), gen=gen)
    raise ValueError(f"unknown scheme {scheme!r}")


@dataclass
class GradientCodingDesign:
    """Support-constrained combination matrix for baseline gradient coding.

    Row i of b_matrix may only touch the samples in assignments[i]; the
    design targets tolerance of up to s stragglers per round.
    """

    b_matrix: np.ndarray
    assignments: list
    s: int

    def __post_init__(self):
        self.b_matrix = np.asarray(self.b_matrix, dtype=np.float64)
        for i, a in enumerate(self.assignments):
            outside = np.setdiff1d(np.flatnonzero(self.b_matrix[i]), a)
            if outside.size:
                raise ValueError(
                    f"row {i} uses samples {outside.tolist()} outside its assignment"
                )


def gc_fraction_repetition(w: int, s: int, m: int) -> GradientCodingDesign:
    """Fraction repetition construction: w/(s+1) groups of s+1 workers,
    each group sharing one block of m(s+1)/w samples with unit weights.
    Any surviving group member alone reproduces the block's partial sum."""
    if s < 0 or w <= 0:
        raise ValueError("need w > 0 and s >= 0")
    if w % (s + 1) != 0:
        raise ValueError("fraction repetition needs (s+1) to divide w")
    groups = w // (s + 1)
    if m % groups != 0:
        raise ValueError(f"need {groups} groups to evenly split {m} samples")
    bs = m // groups
    b = np.zeros((w, m))
    assignments = []
    for i in range(w):
        g = i // (s + 1)
        block = np.arange(g * bs, (g + 1) * bs, dtype=np.int64)
        b[i, block] = 1.0
        assignments.append(block)
    return GradientCodingDesign(b_matrix=b, assignments=assignments, s=s)


def gc_criterion_check(design: GradientCodingDesign, w: int, s: int) -> bool:
    """Exhaustively test the span condition that defines straggler tolerance.

    For every surviving set S of size w - s, the all-ones row must lie in
    the row space of B restricted to S; numerically, the least-squares
    residual per sample must stay below 1e-8.
    """
    if design.b_matrix.shape[0] != w:
        raise ValueError("design was built for a different worker count")
    if not 0 <= s < w:
        raise ValueError("need 0 <= s < w")
    m = design.b_matrix.shape[1]
    ones = np.ones(m)
    for surv in itertools.combinations(range(w), w - s):
        bs = design.b_matrix[list(surv), :]
        z = np.linalg.lstsq(bs.T, ones, rcond=None)[0]
        resid = np.linalg.norm(bs.T @ z - ones)
        if resid > 1e-8 * np.sqrt(m):
            return False
    return True


def dump_allocation(alloc: TaskAllocation, path: str) -> None:
    """Binary allocation dump: per worker, u32 id, u32 alpha, then the
    alpha*k coded row entries as little-endian f64, row-major."""
    with open(path, "wb") as f:
        for j in range(alloc.w):
            f.write(_BLOCK_HEADER.pack(j, alloc.alpha))
            f.write(np.ascontiguousarray(alloc.rows[j], dtype="<f8").tobytes())


def read_allocation(path: str, k: int) -> list:
    """Parse a dump back into (worker_id, rows) pairs; k sets the row width."""
    out = []
    with open(path, "rb") as f:
        raw = f.read()
    off = 0
    while off < len(raw):
        if off + _BLOCK_HEADER.size > len(raw):
            raise ValueError("truncated block header")
        wid, alpha = _BLOCK_HEADER.unpack_from(raw, off)
        off += _BLOCK_HEADER.size
        nbytes = alpha * k * 8
        if off + nbytes > len(raw):
            raise ValueError(f"truncated row payload for worker {wid}")
        rows = np.frombuffer(raw, dtype="<f8", count=alpha * k, offset=off)
        out.append((wid, rows.reshape(alpha, k).copy()))
        off += nbytes
    return out
