"""Cut-layer aggregation: fuse per-client activations into one server input
and split the server's gradient back out, honouring presence masks.

Five strategies are supported.  `concat` stacks client blocks side by side
and cannot tolerate an absent client; the elementwise family (`max`, `avg`,
`sum`, `mul`) needs equal cut widths and simply skips absent clients, whose
gradient slots come back as exact zeros.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import ProtocolError, ShapeError, StragglerError
from .tensor import Matrix, concat_cols, ewise, scale, slice_cols

__all__ = [
    "MergeStrategy",
    "PresenceMask",
    "MergeCache",
    "merge_forward",
    "merge_backward",
    "validate_cut_shapes",
]


class MergeStrategy(str, Enum):
    CONCAT = "concat"
    MAX = "max"
    AVG = "avg"
    SUM = "sum"
    MUL = "mul"

    @property
    def elementwise(self) -> bool:
        return self is not MergeStrategy.CONCAT

    @classmethod
    def from_name(cls, name: str) -> "MergeStrategy":
        try:
            return cls(str(name))
        except ValueError:
            raise ShapeError(
                f"unknown merge strategy {name!r}, expected one of "
                f"{[s.value for s in cls]}"
            ) from None


@dataclass(frozen=True)
class PresenceMask:
    """Which clients participated in an iteration; at least one must."""

    flags: tuple[bool, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "flags", tuple(bool(f) for f in self.flags))
        if not any(self.flags):
            raise ProtocolError("presence mask has zero present clients")

    @classmethod
    def all_present(cls, n: int) -> "PresenceMask":
        return cls((True,) * n)

    @property
    def n_present(self) -> int:
        return sum(self.flags)

    @property
    def present(self) -> tuple[int, ...]:
        return tuple(i for i, f in enumerate(self.flags) if f)

    @property
    def absent(self) -> tuple[int, ...]:
        return tuple(i for i, f in enumerate(self.flags) if not f)

    def __len__(self) -> int:
        return len(self.flags)

    def __getitem__(self, i: int) -> bool:
        return self.flags[i]

    def __iter__(self):
        return iter(self.flags)


@dataclass(frozen=True, eq=False)
class MergeCache:
    """Everything `merge_backward` needs: the strategy, the mask, and the
    present activations (absent slots are None)."""

    strategy: MergeStrategy
    parts: tuple[Matrix | None, ...]
    mask: PresenceMask

    @property
    def rows(self) -> int:
        return self.parts[self.mask.present[0]].rows

    @property
    def widths(self) -> tuple[int, ...]:
        """Cut width per client; for absent elementwise clients this is the
        shared width of the present ones."""
        present = self.mask.present
        if self.strategy.elementwise:
            w = self.parts[present[0]].cols
            return (w,) * len(self.parts)
        return tuple(self.parts[i].cols for i in range(len(self.parts)))

    @property
    def merged_width(self) -> int:
        if self.strategy.elementwise:
            return self.parts[self.mask.present[0]].cols
        return sum(self.widths)


def validate_cut_shapes(strategy: MergeStrategy, widths: Sequence[int]) -> None:
    """Reject cut widths the strategy cannot merge."""
    widths = [int(w) for w in widths]
    if not widths:
        raise ShapeError("need at least one cut width")
    if any(w < 1 for w in widths):
        raise ShapeError(f"cut widths must be positive, got {widths}")
    if strategy.elementwise and len(set(widths)) > 1:
        raise ShapeError(
            f"elementwise strategy {strategy.value!r} needs equal cut widths, got {widths}"
        )


def merge_forward(
    strategy: MergeStrategy,
    parts: Sequence[Matrix | None],
    mask: PresenceMask | None = None,
) -> tuple[Matrix, MergeCache]:
    """Combine present client activations into the server's input.

    `parts` is indexed by client; entries for absent clients are ignored
    (and may be None).  Returns the merged batch plus the cache backward
    needs to route gradients.
    """
    if mask is None:
        mask = PresenceMask.all_present(len(parts))
    if len(parts) != len(mask):
        raise ShapeError(f"{len(parts)} parts but mask covers {len(mask)} clients")
    present = mask.present
    kept: list[Matrix | None] = [None] * len(mask)
    for i in present:
        if parts[i] is None:
            raise ProtocolError(f"client {i} is marked present but sent no activation")
        kept[i] = parts[i]
    rows = kept[present[0]].rows
    for i in present:
        if kept[i].rows != rows:
            raise ShapeError(
                f"client {present[0]} sent {rows} rows but client {i} sent {kept[i].rows}"
            )
    if strategy is MergeStrategy.CONCAT:
        if mask.n_present != len(mask):
            raise StragglerError(
                f"concat requires every client; absent: {list(mask.absent)}"
            )
        merged = concat_cols([kept[i] for i in range(len(mask))])
        return merged, MergeCache(strategy, tuple(kept), mask)

    validate_cut_shapes(strategy, [kept[i].cols for i in present])
    acc = kept[present[0]]
    for i in present[1:]:
        if strategy is MergeStrategy.MAX:
            acc = ewise("max", acc, kept[i])
        elif strategy is MergeStrategy.MUL:
            acc = ewise("mul", acc, kept[i])
        else:  # sum and avg share the running total
            acc = ewise("add", acc, kept[i])
    if strategy is MergeStrategy.AVG:
        acc = scale(acc, 1.0 / mask.n_present)
    return acc, MergeCache(strategy, tuple(kept), mask)


def merge_backward(cache: MergeCache, upstream: Matrix) -> list[Matrix]:
    """Split d loss/d merged into one gradient block per client.

    Absent clients get exact-zero blocks.  Routing rules:
    concat slices by width; sum copies; avg scales by 1/n_present; max sends
    each entry to the lowest-indexed client attaining the maximum; mul sends
    upstream times the product of the other present activations.
    """
    mask = cache.mask
    expected = (cache.rows, cache.merged_width)
    if upstream.shape != expected:
        raise ShapeError(f"upstream shape {upstream.shape}, merged output was {expected}")
    n = len(mask)
    widths = cache.widths
    grads: list[Matrix] = [Matrix.zeros(cache.rows, widths[i]) for i in range(n)]
    present = mask.present
    strategy = cache.strategy

    if strategy is MergeStrategy.CONCAT:
        offset = 0
        for i in range(n):
            grads[i] = slice_cols(upstream, range(offset, offset + widths[i]))
            offset += widths[i]
        return grads

    if strategy is MergeStrategy.SUM:
        for i in present:
            grads[i] = upstream
        return grads

    if strategy is MergeStrategy.AVG:
        shared = scale(upstream, 1.0 / mask.n_present)
        for i in present:
            grads[i] = shared
        return grads

    if strategy is MergeStrategy.MAX:
        stacked = np.stack([cache.parts[i].array for i in present])
        # argmax takes the first maximal slot, i.e. ties go to the lowest
        # present client index.
        winner = stacked.argmax(axis=0)
        for pos, i in enumerate(present):
            grads[i] = Matrix(upstream.array * (winner == pos))
        return grads

    # mul: leave-one-out product of the other present activations; with a
    # single present client the merge was an identity, so the gradient is
    # passed through untouched.
    for i in present:
        others: np.ndarray | None = None
        for j in present:
            if j != i:
                part = cache.parts[j].array
                others = part if others is None else others * part
        grads[i] = upstream if others is None else Matrix(upstream.array * others)
    return grads
