"""Dense 2-D float64 containers and the primitive ops everything else builds on.

Rows are samples, columns are features or units.  Every operation is pure:
inputs are never mutated and each result is a freshly allocated `Matrix`.
Results are reproducible bit for bit across runs on the same platform.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ShapeError

__all__ = [
    "Matrix",
    "Rng",
    "matmul",
    "transpose",
    "slice_cols",
    "take_rows",
    "concat_cols",
    "ewise",
    "scale",
]

_EWISE_OPS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "max": np.maximum,
}


class Matrix:
    """Immutable 2-D float64 array.

    Wraps a C-contiguous, write-protected ndarray.  `array` exposes it
    read-only for numeric code; `values` is the flat row-major view.
    """

    __slots__ = ("_a",)

    def __init__(self, data) -> None:
        a = np.array(data, dtype=np.float64, order="C")
        if a.ndim != 2:
            raise ShapeError(f"Matrix needs 2-D data, got shape {a.shape}")
        if a.shape[0] < 1 or a.shape[1] < 1:
            raise ShapeError(f"Matrix needs at least one row and column, got {a.shape}")
        a.setflags(write=False)
        self._a = a

    @classmethod
    def from_flat(cls, rows: int, cols: int, values: Iterable[float]) -> "Matrix":
        flat = np.fromiter((float(v) for v in values), dtype=np.float64)
        if flat.size != rows * cols:
            raise ShapeError(
                f"from_flat: expected {rows * cols} values for {rows}x{cols}, got {flat.size}"
            )
        return cls(flat.reshape(rows, cols))

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "Matrix":
        return cls(np.zeros((rows, cols)))

    @property
    def rows(self) -> int:
        return self._a.shape[0]

    @property
    def cols(self) -> int:
        return self._a.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self._a.shape

    @property
    def array(self) -> np.ndarray:
        """The underlying read-only ndarray (no copy)."""
        return self._a

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the entries (read-only)."""
        return self._a.reshape(-1)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Matrix({self.rows}x{self.cols})"


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product with a fixed accumulation order.

    Accumulates rank-1 terms in k order so the result is bit-identical to a
    naive i,j,k triple loop; BLAS-backed `a @ b` reorders partial sums and
    does not reproduce that reference exactly.
    """
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} x {b.shape}")
    left, right = a.array, b.array
    out = np.zeros((a.rows, b.cols))
    for k in range(a.cols):
        out += left[:, k : k + 1] * right[k]
    return Matrix(out)


def transpose(m: Matrix) -> Matrix:
    return Matrix(m.array.T)


def slice_cols(m: Matrix, cols: Sequence[int]) -> Matrix:
    """Select columns by index, preserving the requested order."""
    idx = [int(c) for c in cols]
    if not idx:
        raise IndexError("slice_cols: empty column selection")
    seen = set()
    for c in idx:
        if c < 0 or c >= m.cols:
            raise IndexError(f"slice_cols: column {c} out of range for {m.cols} columns")
        if c in seen:
            raise IndexError(f"slice_cols: duplicate column {c}")
        seen.add(c)
    return Matrix(m.array[:, idx])


def take_rows(m: Matrix, rows: Sequence[int]) -> Matrix:
    """Select rows by index (used for mini-batching)."""
    idx = np.asarray(rows, dtype=np.intp)
    return Matrix(m.array[idx])


def concat_cols(parts: Sequence[Matrix]) -> Matrix:
    """Stack matrices side by side; all parts must agree on row count."""
    if not parts:
        raise ShapeError("concat_cols: need at least one part")
    rows = parts[0].rows
    for i, p in enumerate(parts):
        if p.rows != rows:
            raise ShapeError(
                f"concat_cols: part 0 has {rows} rows but part {i} has {p.rows}"
            )
    return Matrix(np.concatenate([p.array for p in parts], axis=1))


def ewise(op: str, a: Matrix, b: Matrix) -> Matrix:
    """Elementwise combine two equal-shape matrices; op is add|sub|mul|max."""
    fn = _EWISE_OPS.get(op)
    if fn is None:
        raise ValueError(f"ewise: unknown op {op!r}, expected one of {sorted(_EWISE_OPS)}")
    if a.shape != b.shape:
        raise ShapeError(f"ewise {op}: shapes differ, {a.shape} vs {b.shape}")
    return Matrix(fn(a.array, b.array))


def scale(m: Matrix, s: float) -> Matrix:
    return Matrix(m.array * float(s))


class Rng:
    """Deterministic random stream (PCG64 behind numpy's Generator).

    Equal seeds give equal draw sequences.  `derive` folds extra integer
    keys into the seed (via SeedSequence spawn keys) so each component of a
    run - per-party init, per-epoch shuffles, per-iteration drop masks -
    owns an independent, reproducible stream.
    """

    __slots__ = ("seed", "key", "_gen")

    def __init__(self, seed: int, key: tuple[int, ...] = ()) -> None:
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self.key = tuple(int(k) for k in key)
        if any(k < 0 for k in self.key):
            raise ConfigError(f"derivation keys must be non-negative, got {self.key}")
        ss = np.random.SeedSequence(entropy=seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def derive(self, *key: int) -> "Rng":
        """A fresh stream for (seed, key); independent of draws made so far."""
        return Rng(self.seed, self.key + tuple(int(k) for k in key))

    def uniform(self, low: float, high: float, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def standard_normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def integers(self, low: int, high: int | None = None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, candidates: Sequence[int], size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(np.asarray(candidates), size=size, replace=replace)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Rng(seed={self.seed}, key={self.key})"
