"""Experiment configuration: typed dataclasses with a lossless JSON form.

A config file is a single JSON object.  Every field has a default except
the dataset source, so a minimal synthetic run is just
``{"dataset": {"kind": "synthetic"}}``.  `--set a.b.c=value` style
overrides edit the raw dict before validation; the last writer wins.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

from .errors import ConfigError
from .nn import SgdConfig

__all__ = [
    "SyntheticSpec",
    "CsvSpec",
    "PartitionSpec",
    "ModelSpec",
    "DropSpec",
    "ExperimentConfig",
    "apply_overrides",
    "load_config",
]


def _check_keys(d: Mapping[str, Any], allowed: Sequence[str], where: str) -> None:
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


def _int_tuple(v, where: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in v)
    except (TypeError, ValueError):
        raise ConfigError(f"{where} must be a list of integers, got {v!r}") from None


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian-blob dataset generated in process; see `data.synth_blobs`."""

    n_samples: int = 2000
    n_features: int = 20
    n_classes: int = 3
    informative_per_client: tuple[int, ...] = (2, 2, 2, 2)
    separation: float = 4.0
    seed: int = 7

    kind = "synthetic"

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SyntheticSpec":
        _check_keys(
            d,
            ["kind", "n_samples", "n_features", "n_classes",
             "informative_per_client", "separation", "seed"],
            "dataset",
        )
        kw: dict[str, Any] = {}
        for key in ("n_samples", "n_features", "n_classes", "seed"):
            if key in d:
                kw[key] = int(d[key])
        if "informative_per_client" in d:
            kw["informative_per_client"] = _int_tuple(
                d["informative_per_client"], "dataset.informative_per_client"
            )
        if "separation" in d:
            kw["separation"] = float(d["separation"])
        return cls(**kw)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": "synthetic",
            "n_samples": self.n_samples,
            "n_features": self.n_features,
            "n_classes": self.n_classes,
            "informative_per_client": list(self.informative_per_client),
            "separation": self.separation,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class CsvSpec:
    """A headered CSV on disk; see `data.load_csv` for encoding rules."""

    path: str
    label_column: str
    schema: Mapping[str, str] | None = None
    schema_path: str | None = None

    kind = "csv"

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CsvSpec":
        _check_keys(d, ["kind", "path", "label_column", "schema", "schema_path"], "dataset")
        if "path" not in d or "label_column" not in d:
            raise ConfigError("csv dataset needs 'path' and 'label_column'")
        schema = d.get("schema")
        if schema is not None:
            schema = {str(k): str(v) for k, v in dict(schema).items()}
        return cls(
            path=str(d["path"]),
            label_column=str(d["label_column"]),
            schema=schema,
            schema_path=d.get("schema_path"),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": "csv",
            "path": self.path,
            "label_column": self.label_column,
            "schema": dict(self.schema) if self.schema is not None else None,
            "schema_path": self.schema_path,
        }

    def resolved_schema(self) -> Mapping[str, str] | None:
        """Inline schema wins; otherwise read the schema JSON file."""
        if self.schema is not None:
            return self.schema
        if self.schema_path is None:
            return None
        with open(self.schema_path, encoding="utf-8") as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise ConfigError(f"{self.schema_path}: schema file must hold a JSON object")
        return {str(k): str(v) for k, v in raw.items()}


@dataclass(frozen=True)
class PartitionSpec:
    """How encoded feature columns are dealt out to clients."""

    mode: str = "contiguous"
    clients: int = 2
    columns: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self) -> None:
        if self.mode not in ("contiguous", "by_list"):
            raise ConfigError(f"partition.mode must be contiguous|by_list, got {self.mode!r}")
        if self.mode == "by_list":
            if self.columns is None:
                raise ConfigError("partition.mode by_list needs partition.columns")
            object.__setattr__(
                self, "columns", tuple(tuple(int(c) for c in g) for g in self.columns)
            )
            object.__setattr__(self, "clients", len(self.columns))
        if self.clients < 1:
            raise ConfigError(f"partition.clients must be positive, got {self.clients}")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PartitionSpec":
        _check_keys(d, ["mode", "clients", "columns"], "partition")
        kw: dict[str, Any] = {}
        if "mode" in d:
            kw["mode"] = str(d["mode"])
        if "clients" in d:
            kw["clients"] = int(d["clients"])
        if d.get("columns") is not None:
            kw["columns"] = tuple(tuple(int(c) for c in g) for g in d["columns"])
        return cls(**kw)

    def to_dict(self) -> dict[str, Any]:
        return {
            "mode": self.mode,
            "clients": self.clients,
            "columns": [list(g) for g in self.columns] if self.columns is not None else None,
        }


@dataclass(frozen=True)
class ModelSpec:
    """Layer widths for each party.

    `client_dims` lists hidden widths appended after the client's input
    width (the last entry is the cut width); it is either one template
    shared by all clients or a list with one entry per client.
    `server_dims` follows the merged input the same way.  `head_dims` are
    extra layers owned by the label holder between the server output and
    the logits; `[]` means a single linear layer to the class count, and
    null means no head at all (the server output is used as logits, so its
    width must equal the class count).
    """

    client_dims: tuple = (8, 4)
    client_activation: str = "tanh"
    server_dims: tuple[int, ...] = (16, 8)
    server_activation: str = "tanh"
    head_dims: tuple[int, ...] | None = ()
    head_activation: str = "tanh"

    def __post_init__(self) -> None:
        cd = tuple(self.client_dims)
        if cd and all(isinstance(x, (list, tuple)) for x in cd):
            cd = tuple(tuple(int(v) for v in group) for group in cd)
        else:
            cd = tuple(int(v) for v in cd)
        object.__setattr__(self, "client_dims", cd)
        object.__setattr__(self, "server_dims", tuple(int(v) for v in self.server_dims))
        if self.head_dims is not None:
            object.__setattr__(self, "head_dims", tuple(int(v) for v in self.head_dims))

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ModelSpec":
        _check_keys(
            d,
            ["client_dims", "client_activation", "server_dims",
             "server_activation", "head_dims", "head_activation"],
            "model",
        )
        kw: dict[str, Any] = {}
        for key in ("client_dims", "server_dims"):
            if key in d:
                kw[key] = tuple(d[key])
        if "head_dims" in d:
            kw["head_dims"] = tuple(d["head_dims"]) if d["head_dims"] is not None else None
        for key in ("client_activation", "server_activation", "head_activation"):
            if key in d:
                kw[key] = str(d[key])
        return cls(**kw)

    def to_dict(self) -> dict[str, Any]:
        cd = self.client_dims
        if cd and isinstance(cd[0], tuple):
            cd_out: Any = [list(g) for g in cd]
        else:
            cd_out = list(cd)
        return {
            "client_dims": cd_out,
            "client_activation": self.client_activation,
            "server_dims": list(self.server_dims),
            "server_activation": self.server_activation,
            "head_dims": list(self.head_dims) if self.head_dims is not None else None,
            "head_activation": self.head_activation,
        }

    def per_client_dims(self, n_clients: int) -> list[list[int]]:
        """Expand the template (or validate the explicit list) to one
        hidden-dims list per client."""
        cd = self.client_dims
        if cd and isinstance(cd[0], tuple):
            if len(cd) != n_clients:
                raise ConfigError(
                    f"model.client_dims lists {len(cd)} clients but the plan has {n_clients}"
                )
            dims = [list(g) for g in cd]
        else:
            dims = [list(cd) for _ in range(n_clients)]
        for i, g in enumerate(dims):
            if not g:
                raise ConfigError(f"client {i} needs at least one layer width")
        return dims


@dataclass(frozen=True)
class DropSpec:
    """Client dropout: when (train/test), how (fixed count or independent
    probability), and whether the label holder's feature branch is exempt
    (null = protect it for fixed_count, allow dropping it for probability)."""

    phase: str = "train"
    mode: str = "none"
    count: int = 0
    probability: float = 0.0
    seed: int | None = None
    protect_label_client: bool | None = None

    def __post_init__(self) -> None:
        if self.phase not in ("train", "test"):
            raise ConfigError(f"drop.phase must be train|test, got {self.phase!r}")
        if self.mode not in ("none", "fixed_count", "probability"):
            raise ConfigError(
                f"drop.mode must be none|fixed_count|probability, got {self.mode!r}"
            )
        if self.count < 0:
            raise ConfigError(f"drop.count must be >= 0, got {self.count}")
        if not 0.0 <= self.probability <= 1.0:
            raise ConfigError(f"drop.probability must lie in [0, 1], got {self.probability}")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "DropSpec":
        _check_keys(
            d,
            ["phase", "mode", "count", "probability", "seed", "protect_label_client"],
            "drop",
        )
        kw: dict[str, Any] = {}
        if "phase" in d:
            kw["phase"] = str(d["phase"])
        if "mode" in d:
            kw["mode"] = str(d["mode"])
        if "count" in d:
            kw["count"] = int(d["count"])
        if "probability" in d:
            kw["probability"] = float(d["probability"])
        if "seed" in d:
            kw["seed"] = int(d["seed"]) if d["seed"] is not None else None
        if "protect_label_client" in d:
            v = d["protect_label_client"]
            kw["protect_label_client"] = bool(v) if v is not None else None
        return cls(**kw)

    def to_dict(self) -> dict[str, Any]:
        return {
            "phase": self.phase,
            "mode": self.mode,
            "count": self.count,
            "probability": self.probability,
            "seed": self.seed,
            "protect_label_client": self.protect_label_client,
        }


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: SyntheticSpec | CsvSpec = field(default_factory=SyntheticSpec)
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    optimizer: SgdConfig = field(default_factory=SgdConfig)
    drop: DropSpec = field(default_factory=DropSpec)
    merge: str = "max"
    label_client: int = -1
    epochs: int = 20
    batch_size: int = 32
    seed: int = 42
    wire_element_size: int = 4
    out_dir: str = "runs/out"

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.wire_element_size < 1:
            raise ConfigError(
                f"wire_element_size must be positive, got {self.wire_element_size}"
            )
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExperimentConfig":
        _check_keys(
            d,
            ["dataset", "partition", "model", "optimizer", "drop", "merge",
             "label_client", "epochs", "batch_size", "seed",
             "wire_element_size", "out_dir"],
            "config",
        )
        kw: dict[str, Any] = {}
        ds = d.get("dataset")
        if ds is not None:
            kind = str(ds.get("kind", "synthetic"))
            if kind == "synthetic":
                kw["dataset"] = SyntheticSpec.from_dict(ds)
            elif kind == "csv":
                kw["dataset"] = CsvSpec.from_dict(ds)
            else:
                raise ConfigError(f"dataset.kind must be synthetic|csv, got {kind!r}")
        if "partition" in d:
            kw["partition"] = PartitionSpec.from_dict(d["partition"])
        if "model" in d:
            kw["model"] = ModelSpec.from_dict(d["model"])
        if "optimizer" in d:
            opt = d["optimizer"]
            _check_keys(opt, ["learning_rate", "momentum"], "optimizer")
            kw["optimizer"] = SgdConfig(
                learning_rate=float(opt.get("learning_rate", 0.01)),
                momentum=float(opt.get("momentum", 0.9)),
            )
        if "drop" in d:
            kw["drop"] = DropSpec.from_dict(d["drop"])
        if "merge" in d:
            kw["merge"] = str(d["merge"])
        for key in ("label_client", "epochs", "batch_size", "seed", "wire_element_size"):
            if key in d:
                kw[key] = int(d[key])
        if "out_dir" in d:
            kw["out_dir"] = str(d["out_dir"])
        return cls(**kw)

    def to_dict(self) -> dict[str, Any]:
        return {
            "dataset": self.dataset.to_dict(),
            "partition": self.partition.to_dict(),
            "model": self.model.to_dict(),
            "optimizer": {
                "learning_rate": self.optimizer.learning_rate,
                "momentum": self.optimizer.momentum,
            },
            "drop": self.drop.to_dict(),
            "merge": self.merge,
            "label_client": self.label_client,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "wire_element_size": self.wire_element_size,
            "out_dir": self.out_dir,
        }

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    def digest(self) -> str:
        """sha256 over the canonical JSON form; stable across field order."""
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def resolve_label_client(self, n_clients: int) -> int:
        lc = self.label_client
        if lc < 0:
            lc += n_clients
        if not 0 <= lc < n_clients:
            raise ConfigError(
                f"label_client {self.label_client} out of range for {n_clients} clients"
            )
        return lc


def apply_overrides(raw: dict[str, Any], assignments: Sequence[str]) -> dict[str, Any]:
    """Apply `key.path=value` assignments to a raw config dict.

    Values parse as JSON when possible (numbers, lists, booleans, null) and
    fall back to plain strings, so ``--set merge=avg`` and
    ``--set model.client_dims=[8,4]`` both work.  Later assignments win.
    """
    out = json.loads(json.dumps(raw))  # deep copy, JSON types only
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key.path=value")
        path, text = item.split("=", 1)
        keys = [k for k in path.strip().split(".") if k]
        if not keys:
            raise ConfigError(f"override {item!r} has an empty key path")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        node = out
        for k in keys[:-1]:
            nxt = node.get(k)
            if not isinstance(nxt, dict):
                nxt = {}
                node[k] = nxt
            node = nxt
        node[keys[-1]] = value
    return out


def load_config(path: str | os.PathLike, overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Read a JSON config file, apply overrides, and validate.

    Relative dataset/schema paths are resolved against the config file's
    directory; `out_dir` stays relative to the working directory.
    """
    path = os.fspath(path)
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    raw = apply_overrides(raw, overrides)
    base = os.path.dirname(os.path.abspath(path))
    ds = raw.get("dataset")
    if isinstance(ds, dict) and ds.get("kind") == "csv":
        for key in ("path", "schema_path"):
            p = ds.get(key)
            if isinstance(p, str) and p and not os.path.isabs(p):
                ds[key] = os.path.join(base, p)
    return ExperimentConfig.from_dict(raw)
