"""Random streams, Haar orthogonal matrices and factored sensing operators.

All randomness in the package flows through :class:`RngStream`, a thin
wrapper over numpy's counter-based Philox bit generator.  Streams are
keyed by ``(seed, labels...)`` so that sub-streams obtained with
:meth:`RngStream.split` are independent of each other and of the order in
which they are created.

Gaussian variates are produced with the Marsaglia polar method on top of
Philox uniforms, so a given seed yields the same stream on every platform
that ships the same numpy Philox implementation.

Matrix products go through :func:`matmul`, which keeps results independent
of the thread count: BLAS is pinned to one thread and the left operand is
cut into fixed row blocks that a small worker pool (:func:`set_workers`)
processes in parallel.  Multithreaded OpenBLAS splits its reductions
differently for different thread counts, so plain ``@`` is not bitwise
reproducible across ``--threads`` settings.
"""

from __future__ import annotations

import hashlib
import threading
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from threadpoolctl import ThreadpoolController

__all__ = [
    "RngStream",
    "seeded_rng",
    "sample_gaussian_vector",
    "random_orthogonal",
    "SensingMatrix",
    "build_rri_matrix",
    "random_modulate",
    "matmul",
    "set_workers",
    "get_workers",
    "deterministic_blas",
]

MATMUL_BLOCK = 256

_controller = None
_state = threading.local()
_workers = 1
_pool = None
_pool_lock = threading.Lock()


def set_workers(count: int) -> None:
    """Number of threads :func:`matmul` may use.  Results do not depend on it."""
    global _workers, _pool
    if count < 1:
        raise ValueError("worker count must be >= 1")
    with _pool_lock:
        if count != _workers and _pool is not None:
            _pool.shutdown()
            _pool = None
        _workers = int(count)


def get_workers() -> int:
    return _workers


@contextmanager
def deterministic_blas():
    """Pin BLAS/LAPACK to one thread for the duration (re-entrant).

    Only the outermost entry touches the global BLAS setting, so nested
    calls and the worker threads never race on it.
    """
    global _controller
    depth = getattr(_state, "depth", 0)
    if depth:
        _state.depth = depth + 1
        try:
            yield
        finally:
            _state.depth -= 1
        return
    if _controller is None:
        _controller = ThreadpoolController()
    with _controller.limit(limits=1, user_api="blas"):
        _state.depth = 1
        try:
            yield
        finally:
            _state.depth = 0


def _get_pool():
    global _pool
    with _pool_lock:
        if _pool is None:
            _pool = ThreadPoolExecutor(max_workers=_workers)
        return _pool


def matmul(a, b) -> np.ndarray:
    """``a @ b`` with results that are bitwise independent of the thread count.

    ``a`` may carry leading batch axes; ``b`` is a 2-D matrix.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    lead = a.shape[:-1]
    a2 = a.reshape(-1, a.shape[-1])
    rows = a2.shape[0]
    out = np.empty((rows, b.shape[1]))
    starts = range(0, rows, MATMUL_BLOCK)

    def block(lo):
        np.matmul(a2[lo:lo + MATMUL_BLOCK], b, out=out[lo:lo + MATMUL_BLOCK])

    with deterministic_blas():
        if _workers == 1 or rows <= MATMUL_BLOCK:
            for lo in starts:
                block(lo)
        else:
            list(_get_pool().map(block, starts))
    return out.reshape(lead + (b.shape[1],))

_MASK64 = (1 << 64) - 1


def _label_key(label: str) -> int:
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class RngStream:
    """Deterministic, splittable random stream.

    Parameters
    ----------
    seed : int
        64-bit seed.  Negative values are reduced modulo 2**64.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        self.seed = int(seed) & _MASK64
        self._path = tuple(_path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self._path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={self._path})"

    def split(self, label: str) -> "RngStream":
        """Child stream identified by ``label``; the parent state is untouched."""
        return RngStream(self.seed, self._path + (_label_key(label),))

    def uniform(self, size=None, low=0.0, high=1.0):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def standard_normal(self, size=None):
        """Standard normal draws via the polar method."""
        if size is None:
            return float(self.standard_normal(1)[0])
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        out = np.empty(n)
        filled = 0
        while filled < n:
            pairs = (n - filled + 1) // 2
            # acceptance rate is pi/4; oversample so one pass usually suffices
            chunk = int(pairs / 0.78) + 16
            uv = self._gen.uniform(-1.0, 1.0, size=(chunk, 2))
            s = uv[:, 0] ** 2 + uv[:, 1] ** 2
            ok = (s > 0.0) & (s < 1.0)
            uv, s = uv[ok], s[ok]
            factor = np.sqrt(-2.0 * np.log(s) / s)
            z = (uv * factor[:, None]).ravel()
            take = min(z.size, n - filled)
            out[filled:filled + take] = z[:take]
            filled += take
        return out.reshape(shape)


def seeded_rng(seed: int) -> RngStream:
    return RngStream(seed)


def sample_gaussian_vector(rng: RngStream, n: int, mean: float = 0.0,
                           var: float = 1.0) -> np.ndarray:
    """``n`` i.i.d. draws from N(mean, var)."""
    if var < 0:
        raise ValueError(f"variance must be non-negative, got {var}")
    if var == 0:
        return np.full(n, float(mean))
    return mean + np.sqrt(var) * rng.standard_normal(n)


def random_orthogonal(rng: RngStream, n: int) -> np.ndarray:
    """Haar-distributed ``n x n`` orthogonal matrix.

    QR of a Gaussian matrix, with columns flipped so that ``diag(R) > 0``.
    Without the sign fix the distribution is not Haar.
    """
    if n < 1:
        raise ValueError("dimension must be >= 1")
    g = rng.standard_normal((n, n))
    with deterministic_blas():
        q, r = np.linalg.qr(g)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


@dataclass(frozen=True)
class SensingMatrix:
    """Factored ``m x n`` operator ``A = U diag(d) V^T``.

    ``U`` is ``m x m``, ``V`` is ``n x n`` and ``d`` has ``min(m, n)``
    non-negative entries.  The dense matrix is never formed by the solvers.
    Vectors may carry leading batch axes: ``apply`` maps ``(..., n)`` to
    ``(..., m)``.
    """

    u: np.ndarray
    d: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        m, n = self.u.shape[0], self.v.shape[0]
        if self.u.shape != (m, m) or self.v.shape != (n, n):
            raise ValueError("U and V must be square")
        if self.d.shape != (min(m, n),):
            raise ValueError(
                f"expected {min(m, n)} singular values, got {self.d.shape}")
        if np.any(self.d < 0):
            raise ValueError("singular values must be non-negative")

    @property
    def m(self) -> int:
        return self.u.shape[0]

    @property
    def n(self) -> int:
        return self.v.shape[0]

    @property
    def rank_dim(self) -> int:
        return self.d.size

    def apply(self, x):
        k = self.rank_dim
        return matmul(matmul(x, self.v[:, :k]) * self.d, self.u[:, :k].T)

    def apply_transpose(self, y):
        k = self.rank_dim
        return matmul(matmul(y, self.u[:, :k]) * self.d, self.v[:, :k].T)

    def dense(self) -> np.ndarray:
        k = self.rank_dim
        return matmul(self.u[:, :k] * self.d, self.v[:, :k].T)

    def padded_singular_values(self) -> np.ndarray:
        """Singular values extended with zeros to length ``n``."""
        out = np.zeros(self.n)
        out[:self.rank_dim] = self.d
        return out


def build_rri_matrix(rng: RngStream, m: int, n: int,
                     singular_values) -> SensingMatrix:
    """Right-rotationally invariant ``A = U D V^T`` with Haar ``U`` and ``V``."""
    if m < 1 or n < 1:
        raise ValueError("m and n must be >= 1")
    d = np.asarray(singular_values, dtype=float)
    if d.shape != (min(m, n),):
        raise ValueError(
            f"need {min(m, n)} singular values for a {m}x{n} matrix, "
            f"got shape {d.shape}")
    u = random_orthogonal(rng, m)
    v = random_orthogonal(rng, n)
    return SensingMatrix(u, d, v)


def random_modulate(a: SensingMatrix, rng: RngStream | None = None,
                    modulation: np.ndarray | None = None) -> SensingMatrix:
    """Return ``A @ Xi`` for a Haar orthogonal ``Xi``.

    Only the right basis changes (``V -> Xi^T V``), so the singular values
    are carried over untouched.  ``modulation`` overrides the random draw.
    """
    if modulation is None:
        if rng is None:
            raise ValueError("need an rng or an explicit modulation matrix")
        modulation = random_orthogonal(rng, a.n)
    xi = np.asarray(modulation, dtype=float)
    if xi.shape != (a.n, a.n):
        raise ValueError("modulation must be n x n")
    return SensingMatrix(a.u, a.d, matmul(xi.T, a.v))
