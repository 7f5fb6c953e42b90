"""Datasets, vertical partitioning, and evaluation metrics.

CSV loading is deliberately simple: every categorical column is one-hot
encoded over the categories seen in the training rows (unseen test-time
categories encode to all zeros), every numeric column is z-scored with
training-row statistics, and the train/test split is a stratified 80/20
cut drawn from a fixed seed so the same file always produces the same
encoded matrix and the same split.

Feature indices used by partition plans refer to columns of the *encoded*
matrix, not the raw file.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError, PlanError
from .tensor import Matrix, Rng, slice_cols

__all__ = [
    "DEFAULT_SPLIT_SEED",
    "DEFAULT_TEST_FRACTION",
    "Dataset",
    "PartitionPlan",
    "SplitDataset",
    "MetricsReport",
    "load_csv",
    "train_test_indices",
    "make_plan",
    "vertical_split",
    "synth_blobs",
    "evaluate",
]

DEFAULT_SPLIT_SEED = 1729
DEFAULT_TEST_FRACTION = 0.2
_STD_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class Dataset:
    """Encoded feature matrix plus integer class labels."""

    features: Matrix
    labels: np.ndarray
    feature_names: tuple[str, ...]
    n_classes: int

    def __post_init__(self) -> None:
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if y.shape[0] != self.features.rows:
            raise DataError(
                f"{self.features.rows} feature rows but {y.shape[0]} labels"
            )
        if self.n_classes < 1:
            raise DataError(f"n_classes must be positive, got {self.n_classes}")
        if y.min(initial=0) < 0 or y.max(initial=0) >= self.n_classes:
            raise DataError(f"labels out of range for {self.n_classes} classes")
        if len(self.feature_names) != self.features.cols:
            raise DataError(
                f"{len(self.feature_names)} feature names for {self.features.cols} columns"
            )
        y.setflags(write=False)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    @property
    def n_samples(self) -> int:
        return self.features.rows

    @property
    def n_features(self) -> int:
        return self.features.cols


@dataclass(frozen=True)
class PartitionPlan:
    """Which encoded feature columns each client owns.

    Column lists must be disjoint, non-empty, and together cover exactly
    0..n_features-1.
    """

    columns: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        cols = tuple(tuple(int(c) for c in group) for group in self.columns)
        object.__setattr__(self, "columns", cols)
        if not cols:
            raise PlanError("a plan needs at least one client")
        seen: set[int] = set()
        for i, group in enumerate(cols):
            if not group:
                raise PlanError(f"client {i} owns no columns")
            overlap = seen.intersection(group)
            if overlap or len(set(group)) != len(group):
                raise PlanError(f"column(s) assigned twice: {sorted(overlap) or list(group)}")
            seen.update(group)
        total = sum(len(g) for g in cols)
        if seen != set(range(total)):
            missing = sorted(set(range(max(seen) + 1)) - seen)
            raise PlanError(f"plan does not cover every column; missing {missing}")

    @property
    def n_clients(self) -> int:
        return len(self.columns)

    @property
    def n_features(self) -> int:
        return sum(len(g) for g in self.columns)

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(len(g) for g in self.columns)


@dataclass(frozen=True, eq=False)
class SplitDataset:
    """One feature block per client; labels live with one designated client."""

    parts: tuple[Matrix, ...]
    labels: np.ndarray
    label_client: int
    n_classes: int

    def __post_init__(self) -> None:
        parts = tuple(self.parts)
        object.__setattr__(self, "parts", parts)
        if not parts:
            raise PlanError("split dataset needs at least one part")
        rows = parts[0].rows
        for i, p in enumerate(parts):
            if p.rows != rows:
                raise PlanError(f"part 0 has {rows} rows but part {i} has {p.rows}")
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if y.shape[0] != rows:
            raise DataError(f"{rows} rows but {y.shape[0]} labels")
        y.setflags(write=False)
        object.__setattr__(self, "labels", y)
        if not 0 <= self.label_client < len(parts):
            raise ConfigError(
                f"label_client {self.label_client} out of range for {len(parts)} clients"
            )

    @property
    def n_samples(self) -> int:
        return self.parts[0].rows

    @property
    def n_clients(self) -> int:
        return len(self.parts)


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    f1: float
    loss: float = float("nan")
    epoch: int = 0


def train_test_indices(
    labels: Sequence[int] | np.ndarray,
    test_fraction: float = DEFAULT_TEST_FRACTION,
    seed: int = DEFAULT_SPLIT_SEED,
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic stratified split; returns sorted (train, test) row indices.

    Each class contributes floor(test_fraction * count) rows to the test
    side, and always keeps at least one training row.
    """
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.size == 0:
        raise DataError("cannot split an empty label vector")
    if not 0.0 <= test_fraction < 1.0:
        raise ConfigError(f"test_fraction must lie in [0, 1), got {test_fraction}")
    rng = Rng(seed)
    test: list[np.ndarray] = []
    train: list[np.ndarray] = []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        perm = idx[rng.permutation(idx.size)]
        n_test = min(int(test_fraction * idx.size), idx.size - 1)
        test.append(perm[:n_test])
        train.append(perm[n_test:])
    train_idx = np.sort(np.concatenate(train))
    test_idx = np.sort(np.concatenate(test)) if any(t.size for t in test) else np.array([], dtype=np.int64)
    return train_idx, test_idx


def _sniff_delimiter(header_line: str) -> str:
    # Accept semicolon-delimited files (the raw UCI bank export) but default
    # to plain commas.
    return ";" if header_line.count(";") > header_line.count(",") else ","


def _looks_numeric(values: Sequence[str]) -> bool:
    for v in values:
        try:
            float(v)
        except ValueError:
            return False
    return True


def load_csv(
    path: str | os.PathLike,
    label_column: str,
    schema: Mapping[str, str] | None = None,
    *,
    delimiter: str | None = None,
    test_fraction: float = DEFAULT_TEST_FRACTION,
    split_seed: int = DEFAULT_SPLIT_SEED,
) -> Dataset:
    """Load a headered CSV into an encoded Dataset.

    `schema` maps column names to "numeric" or "categorical"; unlisted
    columns are inferred (numeric iff every value parses as a float).
    Labels map to class indices by sorted distinct value.  Encoding
    statistics (z-score mean/std, one-hot vocabularies) come from the
    training rows of the stratified split only; rerun `train_test_indices`
    on `dataset.labels` with the same seed to recover that split.
    """
    path = os.fspath(path)
    if not os.path.exists(path):
        raise DataError(f"dataset file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        first = fh.readline()
        if not first.strip():
            raise DataError(f"{path}: empty file")
        delim = delimiter if delimiter is not None else _sniff_delimiter(first)
        fh.seek(0)
        reader = csv.reader(fh, delimiter=delim)
        header = [h.strip() for h in next(reader)]
        rows: list[list[str]] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}"
                )
            rows.append([v.strip() for v in row])
    if not rows:
        raise DataError(f"{path}: no data rows")
    if label_column not in header:
        raise DataError(f"{path}: no column named {label_column!r} in {header}")
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate column names in header")

    label_pos = header.index(label_column)
    feature_cols = [h for h in header if h != label_column]
    if schema is not None:
        unknown = set(schema) - set(feature_cols)
        if unknown:
            raise DataError(f"schema mentions unknown column(s): {sorted(unknown)}")
        for col, kind in schema.items():
            if kind not in ("numeric", "categorical"):
                raise DataError(f"schema[{col!r}] must be numeric|categorical, got {kind!r}")

    raw_labels = [r[label_pos] for r in rows]
    classes = sorted(set(raw_labels))
    class_index = {c: i for i, c in enumerate(classes)}
    y = np.array([class_index[v] for v in raw_labels], dtype=np.int64)
    train_idx, _ = train_test_indices(y, test_fraction, split_seed)
    train_set = set(train_idx.tolist())

    blocks: list[np.ndarray] = []
    names: list[str] = []
    for col in feature_cols:
        pos = header.index(col)
        values = [r[pos] for r in rows]
        kind = (schema or {}).get(col)
        if kind is None:
            kind = "numeric" if _looks_numeric(values) else "categorical"
        if kind == "numeric":
            try:
                x = np.array([float(v) for v in values])
            except ValueError:
                bad = next(
                    (i, v) for i, v in enumerate(values)
                    if not _looks_numeric([v])
                )
                raise DataError(
                    f"{path}: column {col!r} is declared numeric but row "
                    f"{bad[0] + 2} holds {bad[1]!r}"
                ) from None
            train_vals = x[train_idx]
            mean = train_vals.mean()
            std = max(float(train_vals.std()), _STD_FLOOR)
            blocks.append(((x - mean) / std).reshape(-1, 1))
            names.append(col)
        else:
            vocab = sorted({values[i] for i in range(len(values)) if i in train_set})
            onehot = np.zeros((len(values), len(vocab)))
            lookup = {v: j for j, v in enumerate(vocab)}
            for i, v in enumerate(values):
                j = lookup.get(v)
                if j is not None:
                    onehot[i, j] = 1.0
            blocks.append(onehot)
            names.extend(f"{col}={v}" for v in vocab)
    features = Matrix(np.concatenate(blocks, axis=1))
    return Dataset(features, y, tuple(names), len(classes))


def make_plan(
    n_features: int,
    n_clients: int,
    mode: str = "contiguous",
    columns: Sequence[Sequence[int]] | None = None,
) -> PartitionPlan:
    """Build a partition plan.

    `contiguous` slices 0..n_features-1 into n_clients runs, handing any
    remainder to the earliest clients; `by_list` validates explicit column
    lists against n_features.
    """
    if mode == "contiguous":
        if n_clients < 1:
            raise PlanError(f"need at least one client, got {n_clients}")
        if n_clients > n_features:
            raise PlanError(f"cannot split {n_features} columns across {n_clients} clients")
        base, rem = divmod(n_features, n_clients)
        groups: list[tuple[int, ...]] = []
        start = 0
        for i in range(n_clients):
            width = base + (1 if i < rem else 0)
            groups.append(tuple(range(start, start + width)))
            start += width
        return PartitionPlan(tuple(groups))
    if mode == "by_list":
        if columns is None:
            raise PlanError("by_list mode needs explicit column lists")
        plan = PartitionPlan(tuple(tuple(g) for g in columns))
        if plan.n_features != n_features:
            raise PlanError(
                f"plan covers {plan.n_features} columns but the dataset has {n_features}"
            )
        return plan
    raise PlanError(f"unknown plan mode {mode!r}, expected contiguous|by_list")


def vertical_split(
    dataset: Dataset, plan: PartitionPlan, label_client: int | None = None
) -> SplitDataset:
    """Slice the encoded features into per-client blocks.

    Labels are attached to `label_client` (default: the last client), which
    plays the label-holding role in the protocol.
    """
    if plan.n_features != dataset.n_features:
        raise PlanError(
            f"plan covers {plan.n_features} columns but the dataset has {dataset.n_features}"
        )
    if label_client is None:
        label_client = plan.n_clients - 1
    parts = tuple(slice_cols(dataset.features, group) for group in plan.columns)
    return SplitDataset(parts, dataset.labels, label_client, dataset.n_classes)


def synth_blobs(
    n_samples: int,
    n_features: int,
    n_classes: int,
    informative_per_client: Sequence[int],
    rng: Rng,
    separation: float = 4.0,
) -> Dataset:
    """Class-conditional Gaussian blobs spread across client feature blocks.

    The feature axis is carved into len(informative_per_client) contiguous
    blocks (same rule as `make_plan`), and the first `informative_per_client[i]`
    columns of block i carry class signal; the rest are pure noise.  The
    same `rng` seed reproduces the dataset exactly.
    """
    k = len(informative_per_client)
    informative = [int(c) for c in informative_per_client]
    if n_samples < 1 or n_features < 1 or n_classes < 1 or k < 1:
        raise ConfigError("blob sizes must be positive")
    if any(c < 0 for c in informative):
        raise ConfigError(f"informative counts must be >= 0, got {informative}")
    if sum(informative) > n_features:
        raise ConfigError(
            f"{sum(informative)} informative columns do not fit in {n_features} features"
        )
    plan = make_plan(n_features, k)
    for i, (width, c) in enumerate(zip(plan.widths, informative)):
        if c > width:
            raise ConfigError(
                f"client {i} owns {width} columns but was asked for {c} informative ones"
            )
    labels = rng.integers(0, n_classes, n_samples)
    total_informative = sum(informative)
    centers = rng.standard_normal((n_classes, total_informative)) * float(separation)
    x = rng.standard_normal((n_samples, n_features))
    offset = 0
    for group, c in zip(plan.columns, informative):
        for j in range(c):
            x[:, group[j]] += centers[labels, offset]
            offset += 1
    names = tuple(f"f{i}" for i in range(n_features))
    return Dataset(Matrix(x), labels, names, n_classes)


def _binary_f1(predicted: np.ndarray, labels: np.ndarray, positive: int) -> float:
    tp = int(np.sum((predicted == positive) & (labels == positive)))
    fp = int(np.sum((predicted == positive) & (labels != positive)))
    fn = int(np.sum((predicted != positive) & (labels == positive)))
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


def evaluate(
    predicted: Sequence[int] | np.ndarray,
    labels: Sequence[int] | np.ndarray,
    n_classes: int,
) -> MetricsReport:
    """Accuracy and F1 for integer predictions.

    Two classes: F1 of the positive class (index 1).  More: macro F1,
    averaging one-vs-rest F1 over every class that occurs in the labels or
    the predictions (classes absent from both are skipped, not counted as
    zeros).
    """
    pred = np.asarray(predicted, dtype=np.int64).reshape(-1)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if pred.shape[0] != y.shape[0]:
        raise DataError(f"{pred.shape[0]} predictions for {y.shape[0]} labels")
    if y.size == 0:
        raise DataError("cannot score an empty label vector")
    for name, v in (("predictions", pred), ("labels", y)):
        if v.min() < 0 or v.max() >= n_classes:
            raise DataError(f"{name} out of range for {n_classes} classes")
    accuracy = float((pred == y).mean())
    if n_classes == 2:
        f1 = _binary_f1(pred, y, positive=1)
    else:
        scores = [
            _binary_f1(pred, y, positive=c)
            for c in range(n_classes)
            if (c in pred) or (c in y)
        ]
        f1 = float(np.mean(scores))
    return MetricsReport(accuracy=accuracy, f1=f1)
