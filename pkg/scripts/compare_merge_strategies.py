#!/usr/bin/env python3
"""Head-to-head comparison of the five cut-layer merge strategies.

Trains the same configured experiment once per (strategy, seed) pair and
reports, per strategy:

  * median final held-out accuracy / F1 across seeds,
  * the first epoch at which held-out accuracy crossed a target,
  * measured training-phase bytes per epoch (identical across seeds by
    construction, so it is reported once).

Everything is deterministic given the config: rerunning this script
reproduces the table byte for byte.

Usage:
    python3 scripts/compare_merge_strategies.py --config configs/blobs4.json \
        --epochs 15 --seeds 3 --target-acc 0.9 --out runs/merge_comparison.json
"""

import argparse
import dataclasses
import json
import os
import statistics
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from splitsim import (
    Rng,
    build_simulation,
    load_config,
    make_plan,
    run_training,
    synth_blobs,
    train_test_indices,
    vertical_split,
)
from splitsim.cli import _build_dataset, _subset

STRATEGIES = ("concat", "max", "avg", "sum", "mul")


def train_once(cfg):
    dataset = _build_dataset(cfg)
    plan = make_plan(
        dataset.n_features, cfg.partition.clients, cfg.partition.mode, cfg.partition.columns
    )
    sim = build_simulation(cfg, plan, dataset.n_classes)
    split = vertical_split(dataset, plan, sim.label_client)
    train_idx, test_idx = train_test_indices(dataset.labels)
    records, traffic = run_training(
        sim,
        _subset(split, train_idx),
        _subset(split, test_idx),
        cfg.epochs,
        cfg.batch_size,
    )
    return records, traffic


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/blobs4.json")
    ap.add_argument("--epochs", type=int, default=15)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--target-acc", type=float, default=0.9,
                    help="report the first epoch reaching this held-out accuracy")
    ap.add_argument("--out", default=None, help="optional JSON summary path")
    args = ap.parse_args()

    base = load_config(args.config)
    summary = {}
    target_col = f"epoch@{args.target_acc:.2f}"
    print(f"config: {args.config}  epochs: {args.epochs}  seeds: {args.seeds}")
    print(f"{'strategy':8} {'test_acc':>9} {'test_f1':>8} {target_col:>11} {'train_MB/epoch':>14}")
    for strategy in STRATEGIES:
        accs, f1s, hits = [], [], []
        bytes_per_epoch = None
        for j in range(args.seeds):
            cfg = dataclasses.replace(
                base, merge=strategy, epochs=args.epochs, seed=base.seed + j
            )
            records, traffic = train_once(cfg)
            accs.append(records[-1].test.accuracy)
            f1s.append(records[-1].test.f1)
            crossing = next(
                (r.epoch for r in records if r.test.accuracy >= args.target_acc), None
            )
            hits.append(crossing if crossing is not None else args.epochs)
            bytes_per_epoch = traffic.bytes_sent(phase="train", epoch=0)
        med_acc = statistics.median(accs)
        med_f1 = statistics.median(f1s)
        med_hit = statistics.median(hits)
        summary[strategy] = {
            "median_test_accuracy": med_acc,
            "median_test_f1": med_f1,
            "median_epoch_reaching_target": med_hit,
            "train_bytes_per_epoch": bytes_per_epoch,
            "per_seed_accuracy": accs,
        }
        print(
            f"{strategy:8} {med_acc:9.4f} {med_f1:8.4f} {med_hit:11.1f} "
            f"{bytes_per_epoch / 1e6:14.3f}"
        )

    if args.out:
        os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(
                {"config": os.path.abspath(args.config), "epochs": args.epochs,
                 "seeds": args.seeds, "strategies": summary},
                fh, indent=2, sort_keys=True,
            )
            fh.write("\n")
        print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
