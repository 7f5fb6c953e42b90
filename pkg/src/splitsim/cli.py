"""Command-line front end.

Four subcommands:

- ``run``        train from a JSON config; writes metrics.jsonl + report.json
- ``gradcheck``  compare protocol gradients against central finite differences
- ``cost``       predicted per-party bytes/params/flops, optionally verified
                 against a measured epoch
- ``dropsweep``  accuracy as a function of dropped-client count

Exit codes: 0 success, 1 configuration/data problems, 2 verification
failure (a gradcheck or cost mismatch).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import statistics
import sys
from typing import Sequence

import numpy as np

from .config import ExperimentConfig, ModelSpec, PartitionSpec, SyntheticSpec, load_config
from .data import (
    Dataset,
    SplitDataset,
    load_csv,
    make_plan,
    synth_blobs,
    train_test_indices,
    vertical_split,
)
from .errors import SplitSimError
from .merge import MergeStrategy, PresenceMask, merge_forward
from .nn import Mlp, finite_diff_grads, forward, softmax_cross_entropy
from .protocol import (
    DropSchedule,
    Simulation,
    build_simulation,
    compute_gradients,
    evaluate_with_drop,
    party_costs,
    predict_epoch_traffic,
    run_training,
    schedule_from_config,
)
from .tensor import Matrix, Rng, take_rows

__all__ = ["main", "cmd_run", "cmd_gradcheck", "cmd_cost", "cmd_dropsweep"]

_STRATEGY_NAMES = [s.value for s in MergeStrategy]


# ---------------------------------------------------------------------------
# shared plumbing


def _load_cfg(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config, list(args.set or []))
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _build_dataset(cfg: ExperimentConfig) -> Dataset:
    ds = cfg.dataset
    if isinstance(ds, SyntheticSpec):
        return synth_blobs(
            ds.n_samples,
            ds.n_features,
            ds.n_classes,
            ds.informative_per_client,
            Rng(ds.seed),
            ds.separation,
        )
    return load_csv(ds.path, ds.label_column, ds.resolved_schema())


def _subset(split: SplitDataset, idx: np.ndarray) -> SplitDataset:
    return SplitDataset(
        tuple(take_rows(p, idx) for p in split.parts),
        split.labels[idx],
        split.label_client,
        split.n_classes,
    )


def _prepare(cfg: ExperimentConfig):
    """Dataset -> plan -> per-client train/test splits."""
    dataset = _build_dataset(cfg)
    plan = make_plan(
        dataset.n_features, cfg.partition.clients, cfg.partition.mode, cfg.partition.columns
    )
    label_client = cfg.resolve_label_client(plan.n_clients)
    whole = vertical_split(dataset, plan, label_client)
    train_idx, test_idx = train_test_indices(dataset.labels)
    return dataset, plan, _subset(whole, train_idx), _subset(whole, test_idx)


def _write_json(path: str, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _traffic_per_role(sim: Simulation, phase: str = "train") -> dict:
    """Byte totals aggregated over parties sharing a role."""
    per_role: dict[str, dict[str, int]] = {}
    for p in sim.parties:
        block = per_role.setdefault(p.role.value, {"sent": 0, "received": 0})
        block["sent"] += sim.traffic.bytes_sent(p.id, phase)
        block["received"] += sim.traffic.bytes_received(p.id, phase)
    return per_role


# ---------------------------------------------------------------------------
# run


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    dataset, plan, train_split, test_split = _prepare(cfg)
    sim = build_simulation(cfg, plan, dataset.n_classes)
    drop = schedule_from_config(cfg, plan.n_clients)
    records, _ = run_training(
        sim, train_split, test_split, cfg.epochs, cfg.batch_size, drop
    )
    out_dir = args.out or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)

    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    with open(metrics_path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(
                json.dumps(
                    {
                        "epoch": rec.epoch,
                        "train_loss": rec.train_loss,
                        "train_accuracy": rec.train.accuracy,
                        "train_f1": rec.train.f1,
                        "test_loss": rec.test.loss,
                        "test_accuracy": rec.test.accuracy,
                        "test_f1": rec.test.f1,
                    },
                    sort_keys=True,
                )
                + "\n"
            )

    # The report schema is a stable contract: config_digest, epochs,
    # final{acc,f1,loss} (held-out metrics at the last epoch),
    # traffic{per_role{sent,received}} (training-phase bytes), and
    # parties[{id,role,params,flops_per_sample}].
    costs = party_costs(sim)
    final = records[-1]
    report = {
        "config_digest": cfg.digest(),
        "epochs": cfg.epochs,
        "final": {
            "acc": final.test.accuracy,
            "f1": final.test.f1,
            "loss": final.test.loss,
        },
        "traffic": {"per_role": _traffic_per_role(sim, "train")},
        "parties": [
            {
                "id": p.id,
                "role": p.role.value,
                "params": costs[p.id]["params"],
                "flops_per_sample": costs[p.id]["flops_per_sample"],
            }
            for p in sim.parties
        ],
    }
    _write_json(os.path.join(out_dir, "report.json"), report)

    print(f"merge={sim.strategy.value} clients={plan.n_clients} "
          f"train={train_split.n_samples} test={test_split.n_samples} "
          f"features={dataset.n_features} classes={dataset.n_classes}")
    for rec in records:
        print(
            f"epoch {rec.epoch:3d}  train_loss {rec.train_loss:.4f}  "
            f"train_acc {rec.train.accuracy:.4f}  test_acc {rec.test.accuracy:.4f}  "
            f"test_f1 {rec.test.f1:.4f}"
        )
    print(f"wrote {metrics_path} and {os.path.join(out_dir, 'report.json')}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def _gradcheck_sim(strategy: str, n_clients: int, n_classes: int, seed: int) -> Simulation:
    """A small all-tanh stack: clients 4->3, server (cut)->4->n_classes,
    no head, so the loss sits directly on the server output."""
    cfg = ExperimentConfig(
        partition=PartitionSpec(clients=n_clients),
        model=ModelSpec(
            client_dims=(3,),
            client_activation="tanh",
            server_dims=(4, n_classes),
            server_activation="tanh",
            head_dims=None,
        ),
        merge=strategy,
        seed=seed,
    )
    plan = make_plan(4 * n_clients, n_clients)
    return build_simulation(cfg, plan, n_classes)


def _rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-3) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def _max_grad_gap(analytic, fd) -> float:
    worst = 0.0
    for ga, gf in zip(analytic.weights, fd.weights):
        worst = max(worst, _rel_err(ga.array, gf.array))
    for ga, gf in zip(analytic.biases, fd.biases):
        worst = max(worst, _rel_err(ga, gf))
    return worst


def _pipeline_loss(
    client_models: Sequence[Mlp],
    server_model: Mlp,
    head_model: Mlp | None,
    parts: Sequence[Matrix],
    labels,
    strategy: MergeStrategy,
    mask: PresenceMask,
) -> float:
    """Forward-only loss of the whole pipeline; the finite-difference side."""
    acts = [
        forward(client_models[i], parts[i])[0] if mask[i] else None
        for i in range(len(client_models))
    ]
    merged, _ = merge_forward(strategy, acts, mask)
    out = forward(server_model, merged)[0]
    logits = forward(head_model, out)[0] if head_model is not None else out
    return softmax_cross_entropy(logits, labels)[0]


def gradcheck_report(
    strategy: str,
    n_clients: int,
    seed: int,
    batch: int = 8,
    n_classes: int = 3,
    h: float = 1e-6,
    tol: float = 1e-5,
) -> list[dict]:
    """Backprop-vs-finite-difference gap for every party; one row each."""
    sim = _gradcheck_sim(strategy, n_clients, n_classes, seed)
    rng = Rng(seed).derive(97)
    parts = [
        Matrix(rng.standard_normal((batch, c.model.in_dim))) for c in sim.clients
    ]
    labels = rng.integers(0, n_classes, batch)
    mask = PresenceMask.all_present(n_clients)
    _, client_grads, server_grads, _, _ = compute_gradients(sim, parts, labels, mask)

    models = [c.model for c in sim.clients]
    rows = []
    for i, party in enumerate(sim.clients):
        def loss_with_client(m: Mlp, _i=i) -> float:
            swapped = list(models)
            swapped[_i] = m
            return _pipeline_loss(swapped, sim.server.model, None, parts, labels,
                                  sim.strategy, mask)

        fd = finite_diff_grads(loss_with_client, party.model, h)
        gap = _max_grad_gap(client_grads[i], fd)
        rows.append(
            {"strategy": strategy, "party": party.id, "role": party.role.value,
             "max_rel_err": gap, "ok": gap <= tol}
        )

    def loss_with_server(m: Mlp) -> float:
        return _pipeline_loss(models, m, None, parts, labels, sim.strategy, mask)

    fd = finite_diff_grads(loss_with_server, sim.server.model, h)
    gap = _max_grad_gap(server_grads, fd)
    rows.append(
        {"strategy": strategy, "party": sim.server.id, "role": sim.server.role.value,
         "max_rel_err": gap, "ok": gap <= tol}
    )
    return rows


def cmd_gradcheck(args: argparse.Namespace) -> int:
    strategies = _STRATEGY_NAMES if args.strategy == "all" else [args.strategy]
    seed = args.seed if args.seed is not None else 42
    all_ok = True
    print(f"{'strategy':8} {'party':>5} {'role':6} {'max_rel_err':>12}  status")
    for name in strategies:
        for row in gradcheck_report(
            name, args.clients, seed, batch=args.batch, h=args.h, tol=args.tol
        ):
            status = "ok" if row["ok"] else "FAIL"
            all_ok = all_ok and row["ok"]
            print(
                f"{row['strategy']:8} {row['party']:5d} {row['role']:6} "
                f"{row['max_rel_err']:12.3e}  {status}"
            )
    if not all_ok:
        print("gradcheck: FAIL", file=sys.stderr)
        return 2
    print("gradcheck: ok")
    return 0


# ---------------------------------------------------------------------------
# cost


def cmd_cost(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    dataset, plan, train_split, test_split = _prepare(cfg)
    sim = build_simulation(cfg, plan, dataset.n_classes)
    predicted = predict_epoch_traffic(sim, train_split.n_samples)
    costs = party_costs(sim)
    print(
        f"{'party':>5} {'role':6} {'params':>10} {'flops/sample':>12} "
        f"{'bytes_sent/epoch':>16} {'bytes_recv/epoch':>16}"
    )
    for p in sim.parties:
        print(
            f"{p.id:5d} {p.role.value:6} {costs[p.id]['params']:10d} "
            f"{costs[p.id]['flops_per_sample']:12d} "
            f"{predicted[p.id]['sent']:16d} {predicted[p.id]['received']:16d}"
        )
    total_sent = sum(v["sent"] for v in predicted.values())
    total_recv = sum(v["received"] for v in predicted.values())
    print(f"predicted totals per training epoch: sent {total_sent}, received {total_recv} "
          f"(element size {sim.wire_element_size} bytes, every client present)")

    if not args.measure:
        return 0

    fresh = build_simulation(cfg, plan, dataset.n_classes)
    run_training(fresh, train_split, test_split, 1, cfg.batch_size, None)
    mismatch = False
    for p in fresh.parties:
        sent = fresh.traffic.bytes_sent(p.id, "train", 0)
        recv = fresh.traffic.bytes_received(p.id, "train", 0)
        if sent != predicted[p.id]["sent"] or recv != predicted[p.id]["received"]:
            mismatch = True
            print(
                f"party {p.id}: measured sent/received {sent}/{recv} != "
                f"predicted {predicted[p.id]['sent']}/{predicted[p.id]['received']}",
                file=sys.stderr,
            )
    if mismatch:
        print("cost: measured traffic diverges from prediction", file=sys.stderr)
        return 2
    print("measured 1-epoch traffic matches the prediction exactly")
    return 0


# ---------------------------------------------------------------------------
# dropsweep


def cmd_dropsweep(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    dataset, plan, train_split, test_split = _prepare(cfg)
    k = plan.n_clients
    label_client = cfg.resolve_label_client(k)
    counts = args.counts if args.counts is not None else list(range(k))
    for c in counts:
        if not 0 <= c < k:
            raise SplitSimError(f"cannot drop {c} of {k} clients")

    by_count: dict[int, list] = {c: [] for c in counts}
    for j in range(args.seeds):
        cfg_j = dataclasses.replace(cfg, seed=cfg.seed + j)
        if args.phase == "test":
            sim = build_simulation(cfg_j, plan, dataset.n_classes)
            run_training(sim, train_split, test_split, cfg.epochs, cfg.batch_size, None)
            for c in counts:
                sched = DropSchedule(
                    phase="test", mode="fixed_count", count=c,
                    seed=cfg_j.seed, protected=label_client,
                )
                by_count[c].append(evaluate_with_drop(sim, test_split, sched))
        else:
            for c in counts:
                sim = build_simulation(cfg_j, plan, dataset.n_classes)
                sched = DropSchedule(
                    phase="train", mode="fixed_count", count=c,
                    seed=cfg_j.seed, protected=label_client,
                )
                records, _ = run_training(
                    sim, train_split, test_split, cfg.epochs, cfg.batch_size, sched
                )
                by_count[c].append(records[-1].test)

    rows = []
    print(f"{'dropped':>7} {'accuracy':>9} {'f1':>7}   (medians over {args.seeds} seed(s), "
          f"{args.phase}-time drops)")
    for c in counts:
        acc = statistics.median(r.accuracy for r in by_count[c])
        f1 = statistics.median(r.f1 for r in by_count[c])
        rows.append(
            {
                "count": c,
                "accuracy": acc,
                "f1": f1,
                "per_seed": [
                    {"accuracy": r.accuracy, "f1": r.f1} for r in by_count[c]
                ],
            }
        )
        print(f"{c:7d} {acc:9.4f} {f1:7.4f}")

    out_dir = args.out or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    sweep_path = os.path.join(out_dir, "dropsweep.json")
    _write_json(
        sweep_path,
        {
            "config_digest": cfg.digest(),
            "phase": args.phase,
            "seeds": args.seeds,
            "base_seed": cfg.seed,
            "merge": cfg.merge,
            "rows": rows,
        },
    )
    print(f"wrote {sweep_path}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="path to a JSON experiment config")
    p.add_argument(
        "--set",
        action="append",
        metavar="KEY.PATH=VALUE",
        help="override a config entry (repeatable; JSON values or bare strings)",
    )
    p.add_argument("--seed", type=int, default=None,
                   help="override the config's master seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splitsim",
        description="Deterministic split-learning simulator over vertically partitioned features.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train a configured experiment")
    _add_config_flags(p_run)
    p_run.add_argument("--out", default=None, help="output directory (default: config out_dir)")
    p_run.set_defaults(func=cmd_run)

    p_grad = sub.add_parser(
        "gradcheck", help="verify protocol gradients against finite differences"
    )
    p_grad.add_argument(
        "--strategy", choices=[*_STRATEGY_NAMES, "all"], default="all"
    )
    p_grad.add_argument("--clients", type=int, default=2)
    p_grad.add_argument("--seed", type=int, default=None)
    p_grad.add_argument("--batch", type=int, default=8)
    p_grad.add_argument("--h", type=float, default=1e-6, help="finite-difference step")
    p_grad.add_argument("--tol", type=float, default=1e-5, help="max relative error allowed")
    p_grad.set_defaults(func=cmd_gradcheck)

    p_cost = sub.add_parser(
        "cost", help="predicted communication/parameter/flop costs"
    )
    _add_config_flags(p_cost)
    p_cost.add_argument(
        "--measure",
        action="store_true",
        help="also train one epoch and require measured bytes to match exactly",
    )
    p_cost.set_defaults(func=cmd_cost)

    p_sweep = sub.add_parser(
        "dropsweep", help="metrics as a function of dropped-client count"
    )
    _add_config_flags(p_sweep)
    p_sweep.add_argument("--phase", choices=["train", "test"], default="test",
                         help="when clients drop")
    p_sweep.add_argument(
        "--counts",
        type=lambda s: [int(v) for v in s.split(",") if v != ""],
        default=None,
        help="comma-separated drop counts (default: 0..clients-1)",
    )
    p_sweep.add_argument("--seeds", type=int, default=3,
                         help="number of seeds to aggregate (median)")
    p_sweep.add_argument("--out", default=None, help="output directory (default: config out_dir)")
    p_sweep.set_defaults(func=cmd_dropsweep)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SplitSimError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
