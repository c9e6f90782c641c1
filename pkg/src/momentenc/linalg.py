"""Least-squares problem setup around the second-moment system.

For data X (m samples, k features) and labels y, the loss is
L(theta) = 0.5 * ||y - X theta||^2 and its gradient is M theta - b with
M = X'X and b = X'y. Everything downstream works off (M, b), which is
computed once per run; the raw samples are only needed again for loss
reporting and for the single-sample stochastic baseline.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"MENC1"
_HEADER = struct.Struct("<QQQ")  # m, k, flags
_FLAG_THETA_STAR = 0x1


@dataclass
class DataSet:
    """A regression instance, optionally carrying the planted coefficients."""

    X: np.ndarray
    y: np.ndarray
    theta_star: np.ndarray | None = None
    noise_sigma: float = 0.0

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.X.ndim != 2:
            raise ValueError(f"X must be 2-d, got shape {self.X.shape}")
        if self.y.shape != (self.X.shape[0],):
            raise ValueError(
                f"y has shape {self.y.shape}, expected ({self.X.shape[0]},)"
            )
        if self.theta_star is not None:
            self.theta_star = np.asarray(self.theta_star, dtype=np.float64)
            if self.theta_star.shape != (self.X.shape[1],):
                raise ValueError("theta_star length does not match feature count")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")

    @property
    def m(self) -> int:
        return self.X.shape[0]

    @property
    def k(self) -> int:
        return self.X.shape[1]


@dataclass
class MomentSystem:
    """The pair (M, b) with M = X'X and b = X'y."""

    M: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.M = np.asarray(self.M, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.M.ndim != 2 or self.M.shape[0] != self.M.shape[1]:
            raise ValueError(f"M must be square, got shape {self.M.shape}")
        if self.b.shape != (self.M.shape[0],):
            raise ValueError("b length does not match M")

    @property
    def k(self) -> int:
        return self.M.shape[0]


def gram(X: np.ndarray) -> np.ndarray:
    """Return X'X for an m-by-k sample matrix."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
        raise ValueError(f"need a nonempty 2-d matrix, got shape {X.shape}")
    return X.T @ X


def moment_setup(dataset: DataSet) -> MomentSystem:
    """Compute the second-moment system once, up front."""
    return MomentSystem(gram(dataset.X), dataset.X.T @ dataset.y)


def loss(dataset: DataSet, theta: np.ndarray) -> float:
    """0.5 * ||y - X theta||^2."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (dataset.k,):
        raise ValueError(f"theta has shape {theta.shape}, expected ({dataset.k},)")
    r = dataset.y - dataset.X @ theta
    return 0.5 * float(r @ r)


def exact_gradient(ms: MomentSystem, theta: np.ndarray) -> np.ndarray:
    """Gradient of the loss through the moment system: M theta - b."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (ms.k,):
        raise ValueError(f"theta has shape {theta.shape}, expected ({ms.k},)")
    return ms.M @ theta - ms.b


def generate_dataset(
    m: int,
    k: int,
    noise_sigma: float = 0.0,
    sparsity: int = 0,
    seed: int = 0,
) -> DataSet:
    """Draw a synthetic instance with standard normal design.

    sparsity = 0 plants dense standard normal coefficients. sparsity = u > 0
    plants u coordinates with values +-1 on a uniformly chosen support and
    zeros elsewhere. Labels are y = X theta_star + noise_sigma * normal noise.
    Draw order is fixed (X, support, values, noise) so runs are reproducible
    from the seed alone.
    """
    if m <= 0 or k <= 0:
        raise ValueError("m and k must be positive")
    if sparsity < 0 or sparsity > k:
        raise ValueError("sparsity must lie in [0, k]")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((m, k))
    theta = np.zeros(k)
    if sparsity == 0:
        theta = rng.standard_normal(k)
    else:
        support = rng.choice(k, size=sparsity, replace=False)
        theta[support] = rng.choice([-1.0, 1.0], size=sparsity)
    y = X @ theta
    if noise_sigma > 0:
        y = y + noise_sigma * rng.standard_normal(m)
    return DataSet(X, y, theta_star=theta, noise_sigma=noise_sigma)


def save_dataset(dataset: DataSet, path: str) -> None:
    """Write the binary dataset container.

    Layout: 5-byte magic "MENC1", then three u64 little-endian fields
    (m, k, flags with bit 0 marking a stored theta_star), then float64
    little-endian payloads: X row-major, y, and theta_star when present.
    """
    flags = _FLAG_THETA_STAR if dataset.theta_star is not None else 0
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(_HEADER.pack(dataset.m, dataset.k, flags))
        f.write(np.ascontiguousarray(dataset.X, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(dataset.y, dtype="<f8").tobytes())
        if dataset.theta_star is not None:
            f.write(np.ascontiguousarray(dataset.theta_star, dtype="<f8").tobytes())


def load_dataset(path: str) -> DataSet:
    """Read a container written by save_dataset."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a MENC1 file")
    off = len(MAGIC)
    if len(raw) < off + _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    m, k, flags = _HEADER.unpack_from(raw, off)
    off += _HEADER.size
    need = m * k + m + (k if flags & _FLAG_THETA_STAR else 0)
    if len(raw) != off + 8 * need:
        raise ValueError(
            f"{path}: payload has {len(raw) - off} bytes, expected {8 * need}"
        )
    flat = np.frombuffer(raw, dtype="<f8", offset=off)
    X = flat[: m * k].reshape(m, k).copy()
    y = flat[m * k : m * k + m].copy()
    theta = None
    if flags & _FLAG_THETA_STAR:
        theta = flat[m * k + m :].copy()
    return DataSet(X, y, theta_star=theta)


def import_csv(path: str) -> DataSet:
    """Read one sample per line, features first, label in the last column."""
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: non-numeric field") from exc
            if len(rows[-1]) != len(rows[0]):
                raise ValueError(
                    f"{path}:{lineno}: expected {len(rows[0])} columns, "
                    f"got {len(rows[-1])}"
                )
    if not rows or len(rows[0]) < 2:
        raise ValueError(f"{path}: need at least one row with features and a label")
    arr = np.asarray(rows, dtype=np.float64)
    return DataSet(arr[:, :-1], arr[:, -1])
