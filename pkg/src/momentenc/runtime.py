"""Round execution: simulated stragglers and a small TCP master/worker pair.

Simulation draws each round's straggler set from an independent substream
seeded by (seed, t), so round t's outcome never depends on how many rounds
ran before it. The networked mode speaks a length-prefixed binary protocol
and treats any worker missing the round deadline as erased for that round;
a disconnected worker is a permanent straggler.

Frame layout (all integers little-endian):
    u32 length of what follows, u8 message type, payload.
    HELLO  0x01: u32 requested worker id (0xFFFFFFFF = any)
    ASSIGN 0x02: u32 worker id, u32 alpha, u32 k, alpha*k f64 coded rows
    THETA  0x03: u32 round, u32 k, k f64
    RESULT 0x04: u32 round, u32 worker id, u32 alpha, alpha f64 products
    STOP   0x05: empty
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from momentenc.coded_gd import TaskAllocation, WorkerResponse, worker_compute


class NetworkError(Exception):
    """Raised when the cluster cannot make progress (no live workers, no
    master to connect to)."""


class ProtocolError(Exception):
    """Raised on malformed or truncated frames."""


# ---------------------------------------------------------------------------
# straggler models


@dataclass(frozen=True)
class StragglerModel:
    """Which workers fail to respond in a round.

    bernoulli: each worker independently straggles with probability q0.
    fixedcount: a uniformly random subset of exactly s workers.
    deterministic: the same fixed set every round.
    deadline: whoever misses the wall-clock deadline (networked runs only).
    """

    kind: str = "bernoulli"
    q0: float = 0.0
    s: int = 0
    members: tuple = ()
    deadline_ms: float = 0.0

    @classmethod
    def bernoulli(cls, q0: float) -> "StragglerModel":
        if not 0.0 <= q0 <= 1.0:
            raise ValueError("straggler probability must lie in [0, 1]")
        return cls(kind="bernoulli", q0=float(q0))

    @classmethod
    def fixed_count(cls, s: int) -> "StragglerModel":
        if s < 0:
            raise ValueError("straggler count must be nonnegative")
        return cls(kind="fixedcount", s=int(s))

    @classmethod
    def deterministic(cls, members) -> "StragglerModel":
        mem = tuple(sorted(int(j) for j in members))
        if len(set(mem)) != len(mem):
            raise ValueError("duplicate worker ids in straggler set")
        if mem and mem[0] < 0:
            raise ValueError("worker ids must be nonnegative")
        return cls(kind="deterministic", members=mem)

    @classmethod
    def deadline(cls, deadline_ms: float) -> "StragglerModel":
        if deadline_ms <= 0:
            raise ValueError("deadline must be positive")
        return cls(kind="deadline", deadline_ms=float(deadline_ms))


def sample_stragglers(model: StragglerModel, w: int, rng: np.random.Generator) -> np.ndarray:
    """Sorted straggler indices for one round of a w-worker cluster."""
    if w < 1:
        raise ValueError("need at least one worker")
    if model.kind == "bernoulli":
        return np.flatnonzero(rng.random(w) < model.q0)
    if model.kind == "fixedcount":
        if model.s > w:
            raise ValueError(f"cannot pick {model.s} stragglers from {w} workers")
        return np.sort(rng.choice(w, size=model.s, replace=False))
    if model.kind == "deterministic":
        if model.members and model.members[-1] >= w:
            raise ValueError("straggler set references a worker outside the cluster")
        return np.asarray(model.members, dtype=np.int64)
    if model.kind == "deadline":
        raise ValueError("deadline stragglers only exist in networked runs")
    raise ValueError(f"unknown straggler model {model.kind!r}")


@dataclass(frozen=True)
class RoundOutcome:
    round: int
    survivors: tuple
    responses: dict  # worker id -> WorkerResponse


def simulate_round(
    alloc: TaskAllocation,
    theta: np.ndarray,
    model: StragglerModel,
    rng: np.random.Generator,
    t: int,
) -> RoundOutcome:
    """One simulated round: sample stragglers, compute survivor products."""
    stragglers = set(int(j) for j in sample_stragglers(model, alloc.w, rng))
    survivors = tuple(j for j in range(alloc.w) if j not in stragglers)
    responses = {j: worker_compute(alloc, j, theta, t) for j in survivors}
    return RoundOutcome(round=t, survivors=survivors, responses=responses)


@dataclass(frozen=True)
class SimulatedRuntime:
    """In-process cluster; round t uses the (seed, t) substream."""

    model: StragglerModel
    seed: int = 0

    def run_round(self, alloc: TaskAllocation, theta: np.ndarray, t: int) -> RoundOutcome:
        rng = np.random.default_rng((self.seed, t))
        return simulate_round(alloc, theta, self.model, rng, t)


# ---------------------------------------------------------------------------
# wire protocol

MSG_HELLO = 0x01
MSG_ASSIGN = 0x02
MSG_THETA = 0x03
MSG_RESULT = 0x04
MSG_STOP = 0x05

ANY_ID = 0xFFFFFFFF

_LEN = struct.Struct("<I")
_MAX_FRAME = 1 << 28  # 256 MB; anything bigger is a corrupt length


def _send_frame(sock: socket.socket, mtype: int, payload: bytes = b"") -> None:
    sock.sendall(_LEN.pack(1 + len(payload)) + bytes([mtype]) + payload)


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    """n bytes, or None on a clean EOF at a frame boundary."""
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 16))
        if not chunk:
            if got == 0:
                return None
            raise ProtocolError(f"connection dropped mid-frame ({got}/{n} bytes)")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def _recv_frame(sock: socket.socket) -> tuple[int, bytes] | None:
    head = _recv_exact(sock, _LEN.size)
    if head is None:
        return None
    (length,) = _LEN.unpack(head)
    if not 1 <= length <= _MAX_FRAME:
        raise ProtocolError(f"bad frame length {length}")
    body = _recv_exact(sock, length)
    if body is None or len(body) != length:
        raise ProtocolError("truncated frame body")
    return body[0], body[1:]


# ---------------------------------------------------------------------------
# master side


class NetMaster:
    """Serves one optimization run to a fleet of TCP workers.

    Usage: construct, listen() to learn the port, then run() once the
    workers are starting up. run() blocks until the schedule finishes and
    returns the recovered IterateTrace. Workers that miss deadline_ms in a
    round are treated as that round's stragglers; with no deadline the
    master waits for every live worker. A run with zero live workers left
    raises NetworkError.
    """

    def __init__(
        self,
        problem,
        dataset,
        ms,
        cfg,
        projection,
        host: str = "127.0.0.1",
        port: int = 0,
        deadline_ms: float | None = None,
        theta0=None,
        threshold: float | None = None,
        accept_timeout: float | None = None,
    ):
        self.problem = problem
        self.dataset = dataset
        self.ms = ms
        self.cfg = cfg
        self.projection = projection
        self.host = host
        self._want_port = port
        self.deadline_ms = deadline_ms
        self.theta0 = theta0
        self.threshold = threshold
        self.accept_timeout = accept_timeout
        self.port: int | None = None
        self._listener: socket.socket | None = None
        self._conns: dict[int, socket.socket] = {}
        self._live: set[int] = set()
        self._results: queue.Queue = queue.Queue()
        self._readers: list[threading.Thread] = []

    def listen(self) -> int:
        srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        srv.bind((self.host, self._want_port))
        srv.listen(self.problem.alloc.w)
        self._listener = srv
        self.port = srv.getsockname()[1]
        return self.port

    def _accept_workers(self) -> None:
        alloc = self.problem.alloc
        w = alloc.w
        assigned: set[int] = set()
        deadline = (
            time.monotonic() + self.accept_timeout if self.accept_timeout else None
        )
        while len(assigned) < w:
            if deadline is not None:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise NetworkError(
                        f"only {len(assigned)}/{w} workers connected before timeout"
                    )
                self._listener.settimeout(remaining)
            try:
                conn, _addr = self._listener.accept()
            except socket.timeout:
                continue
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            frame = _recv_frame(conn)
            if frame is None or frame[0] != MSG_HELLO or len(frame[1]) != 4:
                conn.close()
                continue
            (wanted,) = struct.unpack("<I", frame[1])
            if wanted != ANY_ID and wanted < w and wanted not in assigned:
                wid = wanted
            else:
                wid = min(set(range(w)) - assigned)
            assigned.add(wid)
            payload = struct.pack("<III", wid, alloc.alpha, alloc.k)
            payload += alloc.rows[wid].astype("<f8").tobytes()
            _send_frame(conn, MSG_ASSIGN, payload)
            self._conns[wid] = conn
            self._live.add(wid)
        for wid, conn in self._conns.items():
            th = threading.Thread(
                target=self._reader, args=(wid, conn), daemon=True
            )
            th.start()
            self._readers.append(th)

    def _reader(self, wid: int, conn: socket.socket) -> None:
        alpha = self.problem.alloc.alpha
        try:
            while True:
                frame = _recv_frame(conn)
                if frame is None:
                    break
                mtype, payload = frame
                if mtype != MSG_RESULT:
                    raise ProtocolError(f"unexpected message type {mtype} from worker")
                if len(payload) != 12 + 8 * alpha:
                    raise ProtocolError("result payload size mismatch")
                t, rep_wid, rep_alpha = struct.unpack("<III", payload[:12])
                if rep_wid != wid or rep_alpha != alpha:
                    raise ProtocolError("result header disagrees with assignment")
                products = np.frombuffer(payload[12:], dtype="<f8").copy()
                self._results.put(("result", wid, t, products))
        except (ProtocolError, OSError):
            pass
        finally:
            self._results.put(("gone", wid, -1, None))

    def _round_fn(self, t: int, theta: np.ndarray) -> RoundOutcome:
        if not self._live:
            raise NetworkError("no live workers remain; aborting run")
        payload = struct.pack("<II", t, theta.size) + theta.astype("<f8").tobytes()
        for wid in sorted(self._live):
            try:
                _send_frame(self._conns[wid], MSG_THETA, payload)
            except OSError:
                self._live.discard(wid)
        need = set(self._live)
        got: dict[int, np.ndarray] = {}
        stop_at = (
            time.monotonic() + self.deadline_ms / 1000.0
            if self.deadline_ms is not None
            else None
        )
        while need - set(got):
            timeout = None
            if stop_at is not None:
                timeout = stop_at - time.monotonic()
                if timeout <= 0:
                    break
            try:
                item = self._results.get(timeout=timeout)
            except queue.Empty:
                break
            kind, wid, rt, products = item
            if kind == "gone":
                self._live.discard(wid)
                need.discard(wid)
                continue
            if rt != t or wid not in need:
                continue  # stale result from an earlier round
            got[wid] = products
        if not self._live and not got:
            raise NetworkError("no live workers remain; aborting run")
        survivors = tuple(sorted(got))
        responses = {
            j: WorkerResponse(worker=j, round=t, products=got[j]) for j in survivors
        }
        return RoundOutcome(round=t, survivors=survivors, responses=responses)

    def run(self):
        from momentenc.optimize import _run_loop

        if self._listener is None:
            self.listen()
        try:
            self._accept_workers()

            def recover_fn(outcome):
                return self.problem.recover(
                    outcome.responses, outcome.survivors, self.ms.b, self.cfg.max_sweeps
                )

            return _run_loop(
                self._round_fn,
                recover_fn,
                self.dataset,
                self.cfg,
                self.projection,
                self.theta0,
                self.threshold,
                True,
            )
        finally:
            self.close()

    def close(self) -> None:
        for conn in self._conns.values():
            try:
                _send_frame(conn, MSG_STOP)
            except OSError:
                pass
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            conn.close()
        self._conns.clear()
        self._live.clear()
        if self._listener is not None:
            self._listener.close()
            self._listener = None
        for th in self._readers:
            th.join(timeout=1.0)
        self._readers.clear()


# ---------------------------------------------------------------------------
# worker side


def net_worker(
    host: str,
    port: int,
    worker_id: int | None = None,
    slowdown: tuple[float, float] | None = None,
    seed: int = 0,
    connect_timeout: float = 5.0,
) -> int:
    """Serve one run as a worker; returns the number of rounds answered.

    slowdown is (probability, ms): before answering a round the worker
    sleeps ms milliseconds with that probability, drawn from the (seed, t)
    substream so behaviour is reproducible per round.
    """
    deadline = time.monotonic() + connect_timeout
    sock = None
    last_err: Exception | None = None
    while time.monotonic() < deadline:
        try:
            sock = socket.create_connection((host, port), timeout=connect_timeout)
            break
        except OSError as e:
            last_err = e
            time.sleep(0.05)
    if sock is None:
        raise NetworkError(f"could not reach master at {host}:{port}: {last_err}")
    rounds = 0
    try:
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.settimeout(None)
        wanted = ANY_ID if worker_id is None else int(worker_id)
        _send_frame(sock, MSG_HELLO, struct.pack("<I", wanted))
        frame = _recv_frame(sock)
        if frame is None:
            raise NetworkError("master closed the connection before assigning work")
        mtype, payload = frame
        if mtype != MSG_ASSIGN or len(payload) < 12:
            raise ProtocolError("expected an assignment frame")
        wid, alpha, k = struct.unpack("<III", payload[:12])
        if len(payload) != 12 + 8 * alpha * k:
            raise ProtocolError("assignment payload size mismatch")
        rows = np.frombuffer(payload[12:], dtype="<f8").reshape(alpha, k).copy()
        while True:
            frame = _recv_frame(sock)
            if frame is None:
                break
            mtype, payload = frame
            if mtype == MSG_STOP:
                break
            if mtype != MSG_THETA:
                raise ProtocolError(f"unexpected message type {mtype} from master")
            t, kk = struct.unpack("<II", payload[:8])
            if kk != k or len(payload) != 8 + 8 * k:
                raise ProtocolError("theta payload size mismatch")
            theta = np.frombuffer(payload[8:], dtype="<f8")
            if slowdown is not None:
                prob, ms = slowdown
                rng = np.random.default_rng((seed, wid, t))
                if rng.random() < prob:
                    time.sleep(ms / 1000.0)
            products = rows @ theta
            out = struct.pack("<III", t, wid, alpha) + products.astype("<f8").tobytes()
            _send_frame(sock, MSG_RESULT, out)
            rounds += 1
    finally:
        sock.close()
    return rounds
