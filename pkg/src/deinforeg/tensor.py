"""Dense 2-D float64 matrices and deterministic random sampling.

Every value that moves through the engine (batches, weights, similarity
matrices, adjoints) is a Matrix: an immutable, row-major, always-finite
wrapper around a 2-D numpy array. RngState wraps a counter-based PCG64
generator so identical seeds give identical streams on every platform.
"""

from __future__ import annotations

import zlib
from typing import Iterable, Sequence

import numpy as np

# Added under the square root of every per-column std computation so the
# gradient at zero variance stays finite.
VAR_EPS = 1e-7

_F64 = np.dtype(np.float64)


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested operation."""


class Matrix:
    """Immutable dense 2-D matrix of float64 values."""

    __slots__ = ("_a",)

    def __init__(self, data):
        a = np.array(data, dtype=np.float64, order="C", copy=True)
        if a.ndim != 2:
            raise ShapeError(f"Matrix requires 2-D data, got ndim={a.ndim}")
        a.flags.writeable = False
        self._a = a

    @classmethod
    def _wrap(cls, a: np.ndarray) -> "Matrix":
        # Internal fast path: takes ownership of `a` without copying.
        m = object.__new__(cls)
        if a.dtype is not _F64 or not a.flags.c_contiguous:
            a = np.ascontiguousarray(a, dtype=np.float64)
        if a.flags.writeable:
            a.flags.writeable = False
        m._a = a
        return m

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "Matrix":
        return cls._wrap(np.zeros((rows, cols)))

    @classmethod
    def ones(cls, rows: int, cols: int) -> "Matrix":
        return cls._wrap(np.ones((rows, cols)))

    @classmethod
    def full(cls, rows: int, cols: int, value: float) -> "Matrix":
        return cls._wrap(np.full((rows, cols), float(value)))

    @classmethod
    def eye(cls, n: int) -> "Matrix":
        return cls._wrap(np.eye(n))

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]]) -> "Matrix":
        return cls(rows)

    @property
    def a(self) -> np.ndarray:
        """Read-only numpy view of the data."""
        return self._a

    @property
    def rows(self) -> int:
        return self._a.shape[0]

    @property
    def cols(self) -> int:
        return self._a.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self._a.shape

    def tolist(self) -> list[list[float]]:
        return self._a.tolist()

    def allclose(self, other: "Matrix", atol: float = 0.0, rtol: float = 0.0) -> bool:
        return bool(np.allclose(self._a, other._a, atol=atol, rtol=rtol))

    def equals(self, other: "Matrix") -> bool:
        """Bitwise equality of shape and every entry."""
        return self._a.shape == other._a.shape and bool(np.array_equal(self._a, other._a))

    def __repr__(self) -> str:
        return f"Matrix({self.rows}x{self.cols})"


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Standard matrix product; raises ShapeError naming both shapes."""
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    return Matrix._wrap(a.a @ b.a)


def column_mean_std(m: Matrix) -> tuple[Matrix, Matrix]:
    """Per-column mean and population standard deviation.

    The std of column j is sqrt(var_j + 1e-7) with the population (divisor
    N) variance, so a constant column reports sqrt(1e-7) rather than zero.
    """
    if m.rows < 1:
        raise ValueError("column_mean_std: matrix has no rows")
    means = m.a.mean(axis=0, keepdims=True)
    var = np.mean((m.a - means) ** 2, axis=0, keepdims=True)
    stds = np.sqrt(var + VAR_EPS)
    return Matrix._wrap(means), Matrix._wrap(stds)


def row_l2_normalize(m: Matrix, eps: float) -> Matrix:
    """Divide each row by (its L2 norm + eps); a zero row stays zero."""
    norms = np.linalg.norm(m.a, axis=1, keepdims=True)
    return Matrix._wrap(m.a / (norms + eps)) if eps > 0 else Matrix._wrap(
        np.divide(m.a, np.where(norms == 0.0, 1.0, norms))
    )


def _branch_entropy(parts: Iterable) -> list[int]:
    out = []
    for p in parts:
        if isinstance(p, str):
            out.append(zlib.crc32(p.encode("utf-8")))
        else:
            out.append(int(p) & 0xFFFFFFFFFFFFFFFF)
    return out


class RngState:
    """Deterministic random stream keyed by a 64-bit seed plus branch labels.

    Two RngStates built from the same (seed, branches) produce identical
    sample streams; `derive` creates an independent stream without
    consuming draws from the parent.
    """

    def __init__(self, seed: int, *branches):
        self.seed = int(seed)
        self._branches = tuple(branches)
        entropy = [self.seed & 0xFFFFFFFFFFFFFFFF] + _branch_entropy(self._branches)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def derive(self, *branches) -> "RngState":
        return RngState(self.seed, *(self._branches + tuple(branches)))

    def normal(self, rows: int, cols: int, mean: float = 0.0, std: float = 1.0) -> Matrix:
        if std < 0:
            raise ValueError("normal: std must be >= 0")
        if std == 0.0:
            return Matrix.full(rows, cols, mean)
        return Matrix._wrap(self._gen.normal(mean, std, size=(rows, cols)))

    def uniform(self, rows: int, cols: int, low: float = 0.0, high: float = 1.0) -> Matrix:
        return Matrix._wrap(self._gen.uniform(low, high, size=(rows, cols)))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size: int) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def random(self, size: int) -> np.ndarray:
        return self._gen.random(size)


def rng_normal(state: RngState, rows: int, cols: int, mean: float, std: float) -> Matrix:
    """Draw a rows x cols Gaussian sample, advancing `state`."""
    return state.normal(rows, cols, mean, std)
