"""Recall/compute trade-off of stopping the probing loop early.

Runs a trained bank over a dataset once per probing floor (P3, P4, P5)
and writes one CSV row per floor: overall and per-class recall, mean
anchors per image, and the FLOP tallies. This is the table to look at
when deciding how deep to probe on a compute budget.

Usage:
    python scripts/probe_depth_tradeoff.py --data runs/reference/held/dataset.bin \
        --weights runs/reference/run/weights.bin --out tradeoff.csv
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from anchorgen.generator import GenConfig, generate
from anchorgen.metrics import average_recall, flop_count
from anchorgen.predictor import bank_from_tensors
from anchorgen.synthetic import read_dataset
from anchorgen.tensorio import read_tensors

FIELDS = [
    "floor", "ar", "ar50", "ar_small", "ar_medium", "ar_large",
    "mean_anchors", "mean_predictor_flops", "mean_sparse_flops", "mean_dense_flops",
]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data", required=True)
    ap.add_argument("--weights", required=True)
    ap.add_argument("--out", type=Path, default=Path("tradeoff.csv"))
    ap.add_argument("--budget", type=int, default=200)
    args = ap.parse_args()

    scenes = read_dataset(args.data)
    tensors, meta = read_tensors(args.weights)
    bank = bank_from_tensors(tensors, meta)
    specs = [s.spec for s in scenes]

    rows = []
    for floor in (3, 4, 5):
        cfg = GenConfig(lowest_level=floor)
        results = [generate(s.pyramid, bank, cfg) for s in scenes]
        live = [[a for a, ok in zip(r.anchors, r.valid) if ok] for r in results]
        report = average_recall(live, specs, budget=args.budget)
        tallies = [flop_count(r.trace, bank.channels, bank.hidden, floor) for r in results]
        n = len(results)
        rows.append({
            "floor": floor,
            "ar": round(report.ar, 4),
            "ar50": round(report.ar50, 4),
            "ar_small": round(report.per_class.get("small", float("nan")), 4),
            "ar_medium": round(report.per_class.get("medium", float("nan")), 4),
            "ar_large": round(report.per_class.get("large", float("nan")), 4),
            "mean_anchors": round(sum(r.trace.valid_count for r in results) / n, 1),
            "mean_predictor_flops": round(sum(t.predictor for t in tallies) / n),
            "mean_sparse_flops": round(sum(t.sparse_total for t in tallies) / n),
            "mean_dense_flops": round(sum(t.dense_baseline for t in tallies) / n),
        })

    with open(args.out, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    for row in rows:
        print(" ".join(f"{k}={row[k]}" for k in FIELDS))


if __name__ == "__main__":
    sys.exit(main())
