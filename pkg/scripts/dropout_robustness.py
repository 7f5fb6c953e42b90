#!/usr/bin/env python3
"""How gracefully does each merge strategy tolerate missing clients?

For every absence-tolerant strategy (concat is excluded: it hard-fails when
any feature holder is away), this trains the configured experiment with all
clients present and then scores the held-out split while dropping
0, 1, ..., K-1 clients at test time.  The label holder's feature branch is
protected so the protocol stays runnable.  Accuracies are medians over
seeds; drop masks are a pure function of (seed, batch index), so the sweep
is exactly reproducible.

Usage:
    python3 scripts/dropout_robustness.py --config configs/blobs4.json \
        --epochs 15 --seeds 5 --out runs/dropout_robustness.json
"""

import argparse
import dataclasses
import json
import os
import statistics
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from splitsim import (
    DropSchedule,
    build_simulation,
    evaluate_with_drop,
    load_config,
    make_plan,
    run_training,
    train_test_indices,
    vertical_split,
)
from splitsim.cli import _build_dataset, _subset

TOLERANT = ("max", "avg", "sum", "mul")


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/blobs4.json")
    ap.add_argument("--epochs", type=int, default=15)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--out", default=None, help="optional JSON summary path")
    args = ap.parse_args()

    base = load_config(args.config)
    dataset = _build_dataset(base)
    plan = make_plan(
        dataset.n_features, base.partition.clients, base.partition.mode,
        base.partition.columns,
    )
    k = plan.n_clients
    counts = list(range(k))
    train_idx, test_idx = train_test_indices(dataset.labels)

    results = {}
    print(f"config: {args.config}  clients: {k}  epochs: {args.epochs}  seeds: {args.seeds}")
    header = " ".join(f"{'drop ' + str(c):>9}" for c in counts)
    print(f"{'strategy':8} {header}")
    for strategy in TOLERANT:
        per_count = {c: [] for c in counts}
        for j in range(args.seeds):
            cfg = dataclasses.replace(
                base, merge=strategy, epochs=args.epochs, seed=base.seed + j
            )
            sim = build_simulation(cfg, plan, dataset.n_classes)
            split = vertical_split(dataset, plan, sim.label_client)
            run_training(
                sim, _subset(split, train_idx), _subset(split, test_idx),
                cfg.epochs, cfg.batch_size,
            )
            for c in counts:
                sched = DropSchedule(
                    phase="test", mode="fixed_count", count=c,
                    seed=cfg.seed, protected=sim.label_client,
                )
                report = evaluate_with_drop(sim, _subset(split, test_idx), sched)
                per_count[c].append(report.accuracy)
        medians = [statistics.median(per_count[c]) for c in counts]
        results[strategy] = {
            "median_accuracy_by_dropped": medians,
            "per_seed": {str(c): per_count[c] for c in counts},
        }
        print(f"{strategy:8} " + " ".join(f"{m:9.4f}" for m in medians))

    if args.out:
        os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(
                {"config": os.path.abspath(args.config), "epochs": args.epochs,
                 "seeds": args.seeds, "counts": counts, "strategies": results},
                fh, indent=2, sort_keys=True,
            )
            fh.write("\n")
        print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
