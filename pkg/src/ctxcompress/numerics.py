"""Dense numerics: stable reductions, spectral utilities, seeded RNG, FD oracle.

Matrices are plain ``numpy`` arrays. Everything here is a pure function
except :class:`Rng`, whose counter advances on each draw.
"""

from __future__ import annotations

import hashlib
import math
from typing import Callable

import numpy as np

from .errors import DegenerateInputError, EvaluationError, InvalidArgumentError

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x ^ (x >> np.uint64(30))
    x = x * _MIX1
    x = x ^ (x >> np.uint64(27))
    x = x * _MIX2
    return x ^ (x >> np.uint64(31))


class Rng:
    """Counter-based 64-bit generator (SplitMix64 over a counter).

    Draw ``i`` is a pure function of ``(seed, i)``, so sequences are identical
    across runs and platforms. Sub-streams are derived by label with
    :meth:`child`; drawing from a child never perturbs the parent.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter)

    def child(self, label: str | int) -> Rng:
        digest = hashlib.blake2b(
            f"{self.seed}/{label}".encode(), digest_size=8
        ).digest()
        return Rng(int.from_bytes(digest, "little"))

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        return _splitmix64(np.uint64(self.seed) + (idx + np.uint64(1)) * _GOLDEN)

    def uniform(self, size: int | tuple[int, ...] = ()) -> np.ndarray:
        """Uniform draws in [0, 1) with 53 bits of resolution."""
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape)) if shape else 1
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return u.reshape(shape) if shape else u[0]

    def normal(self, size: int | tuple[int, ...], std: float = 1.0) -> np.ndarray:
        """Gaussian draws by Box-Muller on the uniform stream."""
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape))
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * math.pi * u[:, 1]
        z = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)
        return std * z.reshape(-1)[:n].reshape(shape)

    def orthogonal(self, shape: tuple[int, int], gain: float = 1.0) -> np.ndarray:
        """Matrix with orthonormal rows or columns (whichever is fewer), times ``gain``.

        Entries have RMS ``gain / sqrt(max(shape))``, matching ``normal`` with
        that std on the larger side but with every singular value equal.
        """
        rows, cols = shape
        q, r = np.linalg.qr(self.normal((max(rows, cols), min(rows, cols))))
        q = q * np.where(np.diag(r) < 0, -1.0, 1.0)  # unique sign convention
        return gain * (q if rows >= cols else q.T)

    def integers(self, low: int, high: int, size: int | None = None):
        """Integers in [low, high). Modulo bias is below 2**-40 for small ranges."""
        if high <= low:
            raise InvalidArgumentError(f"empty integer range [{low}, {high})")
        n = 1 if size is None else size
        out = (self.next_u64(n) % np.uint64(high - low)).astype(np.int64) + low
        return int(out[0]) if size is None else out

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")


def softmax(values, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    """Temperature softmax computed with max-subtraction."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise InvalidArgumentError("softmax of an empty vector")
    if not temperature > 0:
        raise InvalidArgumentError(f"temperature must be positive, got {temperature}")
    return _softmax(x / temperature, axis=axis)


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return z / np.sum(z, axis=axis, keepdims=True)


def logsumexp(x: np.ndarray, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    return x - logsumexp(x, axis=axis, keepdims=True)


def _check_finite_matrix(m) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or min(a.shape) < 1:
        raise InvalidArgumentError(f"expected a non-empty 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidArgumentError("matrix contains non-finite entries")
    return a


def singular_values(m) -> np.ndarray:
    """Singular values in nonincreasing order, length ``min(rows, cols)``."""
    a = _check_finite_matrix(m)
    s = np.linalg.svd(a, compute_uv=False)
    return np.sort(np.maximum(s, 0.0))[::-1]


def spectrum_entropy_rank(s: np.ndarray) -> float:
    total = float(np.sum(s))
    if total <= 0.0:
        raise DegenerateInputError("all singular values are zero")
    p = s[s > 0] / total
    return float(np.exp(-np.sum(p * np.log(p))))


def effective_rank(m) -> float:
    """Exponentiated Shannon entropy of the L1-normalised singular values."""
    return spectrum_entropy_rank(singular_values(m))


def pearson_rows(m, var_floor: float = 1e-300) -> tuple[np.ndarray, np.ndarray]:
    """Pairwise Pearson correlation between the rows of ``m``.

    Returns ``(corr, degenerate)``. Rows with zero variance cannot be
    correlated; their off-diagonal entries are set to 0 and flagged in the
    boolean ``degenerate`` vector. The diagonal is always exactly 1.
    """
    a = _check_finite_matrix(m)
    if a.shape[1] < 2:
        raise InvalidArgumentError("pearson_rows needs at least two columns")
    centered = a - a.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.sum(centered * centered, axis=1))
    degenerate = norms * norms <= var_floor
    safe = np.where(degenerate, 1.0, norms)
    unit = centered / safe[:, None]
    corr = np.clip(unit @ unit.T, -1.0, 1.0)
    corr[degenerate, :] = 0.0
    corr[:, degenerate] = 0.0
    np.fill_diagonal(corr, 1.0)
    return corr, degenerate


def finite_diff_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` in float64."""
    if not h > 0:
        raise InvalidArgumentError(f"step must be positive, got {h}")
    x0 = np.array(x, dtype=np.float64).reshape(-1)
    grad = np.empty_like(x0)
    for i in range(x0.size):
        xp = x0.copy()
        xm = x0.copy()
        xp[i] += h
        xm[i] -= h
        fp, fm = float(f(xp)), float(f(xm))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise EvaluationError(f"non-finite evaluation at coordinate {i}", index=i)
        grad[i] = (fp - fm) / (2.0 * h)
    return grad
