"""Reproduce the reference experiment end to end.

Generates the train/held-out datasets, trains for the default schedule,
then evaluates recall at probing floors 3 and 5, dumps count statistics,
and runs the threshold ablation sweep. Everything lands under --out;
rerunning with the same seeds is bitwise identical.

Usage:
    python scripts/reference_run.py --out runs/reference
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from anchorgen.cli import main as anchorgen_main


def run(argv: list[str]) -> None:
    code = anchorgen_main(argv)
    if code != 0:
        raise SystemExit(f"step {argv[0]!r} failed with exit code {code}")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("runs/reference"))
    ap.add_argument("--train-scenes", type=int, default=200)
    ap.add_argument("--held-scenes", type=int, default=50)
    ap.add_argument("--train-seed", type=int, default=0)
    ap.add_argument("--held-seed", type=int, default=777)
    args = ap.parse_args()

    out = args.out
    train_data = out / "train" / "dataset.bin"
    held_data = out / "held" / "dataset.bin"
    weights = out / "run" / "weights.bin"

    run(["synth", "--out", str(out / "train"), "--scenes", str(args.train_scenes),
         "--seed", str(args.train_seed)])
    run(["synth", "--out", str(out / "held"), "--scenes", str(args.held_scenes),
         "--seed", str(args.held_seed)])
    run(["train", "--data", str(train_data), "--out", str(out / "run")])

    for floor in (3, 5):
        run(["eval", "--data", str(held_data), "--weights", str(weights),
             "--out", str(out / f"eval_floor{floor}"), "--lowest-level", str(floor)])
    run(["infer", "--data", str(held_data), "--weights", str(weights),
         "--out", str(out / "infer")])
    run(["stats", "--data", str(held_data), "--weights", str(weights),
         "--out", str(out / "stats")])
    run(["sweep", "--data", str(held_data), "--weights", str(weights),
         "--out", str(out / "sweep")])

    summary = {}
    for floor in (3, 5):
        with open(out / f"eval_floor{floor}" / "recall.json", encoding="utf-8") as f:
            summary[f"floor{floor}"] = json.load(f)
    with open(out / "stats" / "stats.json", encoding="utf-8") as f:
        summary["stats"] = json.load(f)
    print(json.dumps(summary, indent=2, sort_keys=True))


if __name__ == "__main__":
    sys.exit(main())
