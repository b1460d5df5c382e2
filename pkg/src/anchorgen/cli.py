"""Command-line surface: synth / train / infer / eval / stats / sweep.

Every command resolves its configuration the same way: built-in defaults,
then an optional preset, then a JSON config file, then ``--set`` dotted
overrides, then ``--seed``. Unknown keys are rejected loudly, and each
run writes the fully resolved configuration next to its artifacts so any
output can be reproduced from the snapshot alone.

Exit codes: 0 success, 2 configuration error, 3 data/file error,
4 numeric failure during optimization.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

from .generator import GenConfig, anchor_records, generate, trace_record, write_jsonl
from .losses import WeightConfig
from .metrics import (
    ablation_sweep,
    average_recall,
    count_correlation,
    flop_count,
    level_histogram,
    sweep_csv,
)
from .predictor import init_bank, load_params
from .rng import derive_seed
from .synthetic import SynthConfig, make_dataset, read_dataset, write_dataset
from .tensorio import ChecksumError, FormatVersionError, ShapeError
from .training import NumericError, TrainConfig, read_checkpoint, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class ConfigError(ValueError):
    """Bad configuration: unknown key, invalid value, missing argument."""


class DataError(RuntimeError):
    """Missing or malformed input artifacts."""


DEFAULT_CONFIG: dict = {
    "seed": 0,
    "synth": {
        "image_size": 512,
        "channels": 16,
        "mean_gt": 5.0,
        "class_mix": [0.45, 0.35, 0.20],
        "small_range": [0.05, 0.1],
        "medium_range": [0.1, 0.3],
        "large_range": [0.3, 0.6],
        "aspect_range": [0.5, 2.0],
        "amplitude": 2.0,
        "echo": 0.5,
        "noise_sigma": 0.005,
        "iou_cap": 0.3,
        "max_attempts": 1000,
    },
    "gen": {
        "patch_size": 15,
        "interp_size": 30,
        "k_fixed": 50,
        "k_adapt": 20,
        "eta_l": 0.1,
        "eta_h": 0.7,
        "eta_f": 0.1,
        "eta_iou": 0.25,
        "patch_cap": 15,
        "early_stop_min": 3,
        "count_range": [5, 200],
        "lowest_level": 3,
        "replace_selected": True,
        "topk_mode": False,
    },
    "bank": {
        "channels": 8,
        "hidden": [256, 256],
        "share_p5_p6": False,
    },
    "train": {
        "epochs": 12,
        "steps_per_epoch": None,
        "lr": 2e-4,
        "lr_drop_factor": 0.1,
        "lr_drops": None,
        "n_tp": 4,
        "clip_norm": 1.0,
        "betas": [0.9, 0.999],
        "eps": 1e-8,
        "weight_decay": 1e-4,
        "grad_accum": 1,
        "checkpoint_every": 0,
        "lambda_anchor": 1.0,
        "gamma1": 0.4,
        "gamma2": 0.6,
    },
}

# The 300-query operating point; everything else inherits the defaults.
PRESETS: dict[str, dict] = {
    "q100": {},
    "q300": {"gen": {"count_range": [50, 500], "eta_f": 0.05, "k_fixed": 150, "k_adapt": 50}},
}


def _merge(base: dict, override: dict, path: str = "") -> None:
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{here} must be an object, got {type(value).__name__}")
            _merge(base[key], value, here)
        else:
            base[key] = value


def _apply_set(cfg: dict, spec: str) -> None:
    if "=" not in spec:
        raise ConfigError(f"--set needs KEY=VALUE, got {spec!r}")
    dotted, raw = spec.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    keys = dotted.split(".")
    for key in keys[:-1]:
        if key not in node or not isinstance(node[key], dict):
            raise ConfigError(f"unknown config key: {dotted}")
        node = node[key]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key: {dotted}")
    if isinstance(node[keys[-1]], dict):
        raise ConfigError(f"{dotted} is a section, not a value")
    node[keys[-1]] = value


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults <- preset <- config file <- --set overrides <- --seed."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    preset = getattr(args, "preset", None)
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r} (have {sorted(PRESETS)})")
        _merge(cfg, copy.deepcopy(PRESETS[preset]))
    path = getattr(args, "config", None)
    if path:
        try:
            with open(path, "r", encoding="utf-8") as f:
                loaded = json.load(f)
        except FileNotFoundError as exc:
            raise DataError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        _merge(cfg, loaded)
    for spec in getattr(args, "set", None) or []:
        _apply_set(cfg, spec)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    return cfg


def _pair(value, name: str) -> tuple:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ConfigError(f"{name} must be a pair, got {value!r}")
    return tuple(value)


def build_synth_config(cfg: dict) -> SynthConfig:
    s = cfg["synth"]
    try:
        return SynthConfig(
            image_size=s["image_size"],
            channels=s["channels"],
            mean_gt=s["mean_gt"],
            class_mix=tuple(s["class_mix"]),
            small_range=_pair(s["small_range"], "synth.small_range"),
            medium_range=_pair(s["medium_range"], "synth.medium_range"),
            large_range=_pair(s["large_range"], "synth.large_range"),
            aspect_range=_pair(s["aspect_range"], "synth.aspect_range"),
            amplitude=s["amplitude"],
            echo=s["echo"],
            noise_sigma=s["noise_sigma"],
            iou_cap=s["iou_cap"],
            max_attempts=s["max_attempts"],
        )
    except ValueError as exc:
        raise ConfigError(f"synth config: {exc}") from exc


def build_gen_config(cfg: dict) -> GenConfig:
    g = cfg["gen"]
    try:
        return GenConfig(
            patch_size=g["patch_size"],
            interp_size=g["interp_size"],
            k_fixed=g["k_fixed"],
            k_adapt=g["k_adapt"],
            eta_l=g["eta_l"],
            eta_h=g["eta_h"],
            eta_f=g["eta_f"],
            eta_iou=g["eta_iou"],
            patch_cap=g["patch_cap"],
            early_stop_min=g["early_stop_min"],
            count_range=tuple(_pair(g["count_range"], "gen.count_range")),
            lowest_level=g["lowest_level"],
            replace_selected=g["replace_selected"],
            topk_mode=g["topk_mode"],
        )
    except ValueError as exc:
        raise ConfigError(f"gen config: {exc}") from exc


def build_train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    try:
        return TrainConfig(
            epochs=t["epochs"],
            steps_per_epoch=t["steps_per_epoch"],
            lr=t["lr"],
            lr_drop_factor=t["lr_drop_factor"],
            lr_drops=None if t["lr_drops"] is None else tuple(_pair(t["lr_drops"], "train.lr_drops")),
            seed=cfg["seed"],
            n_tp=t["n_tp"],
            clip_norm=t["clip_norm"],
            betas=_pair(t["betas"], "train.betas"),
            eps=t["eps"],
            weight_decay=t["weight_decay"],
            grad_accum=t["grad_accum"],
            checkpoint_every=t["checkpoint_every"],
            lambda_anchor=t["lambda_anchor"],
            weights=WeightConfig(gamma1=t["gamma1"], gamma2=t["gamma2"]),
        )
    except ValueError as exc:
        raise ConfigError(f"train config: {exc}") from exc


def build_fresh_bank(cfg: dict):
    gen_cfg = build_gen_config(cfg)
    b = cfg["bank"]
    return init_bank(
        seed=derive_seed(cfg["seed"], "bank"),
        patch_size=gen_cfg.patch_size,
        raw_channels=cfg["synth"]["channels"],
        channels=b["channels"],
        hidden=tuple(b["hidden"]),
        k_fixed=gen_cfg.k_fixed,
        k_adapt=gen_cfg.k_adapt,
        share_p5_p6=b["share_p5_p6"],
    )


def _write_snapshot(out_dir: Path, command: str, cfg: dict, extra: dict) -> None:
    snapshot = {"command": command, "config": cfg, "args": extra}
    with open(out_dir / "resolved_config.json", "w", encoding="utf-8") as f:
        json.dump(snapshot, f, sort_keys=True, indent=2)
        f.write("\n")


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_scenes(path: str):
    try:
        return read_dataset(path)
    except FileNotFoundError as exc:
        raise DataError(f"dataset not found: {path}") from exc
    except (ChecksumError, FormatVersionError, ShapeError, ValueError) as exc:
        raise DataError(f"dataset {path}: {exc}") from exc


def _load_bank(path: str):
    try:
        return load_params(path)
    except FileNotFoundError as exc:
        raise DataError(f"weights not found: {path}") from exc
    except (ChecksumError, FormatVersionError, ShapeError, ValueError) as exc:
        raise DataError(f"weights {path}: {exc}") from exc


def _map_scenes(fn, scenes, jobs: int) -> list:
    if jobs <= 1:
        return [fn(s) for s in scenes]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, scenes))


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if args.scenes < 1:
        raise ConfigError(f"--scenes must be >= 1, got {args.scenes}")
    out = _out_dir(args)
    synth_cfg = build_synth_config(cfg)
    scenes = make_dataset(args.scenes, cfg["seed"], synth_cfg)
    path = out / "dataset.bin"
    write_dataset(path, scenes)
    _write_snapshot(out, "synth", cfg, {"scenes": args.scenes, "out": str(out)})
    total_gt = sum(s.spec.difficulty for s in scenes)
    truncated = sum(1 for s in scenes if s.spec.truncated)
    print(
        f"synth: wrote {len(scenes)} scenes to {path} "
        f"({total_gt} boxes, {truncated} truncated, {path.stat().st_size} bytes)"
    )
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args)
    scenes = _load_scenes(args.data)
    gen_cfg = build_gen_config(cfg)
    train_cfg = build_train_config(cfg)
    train_gen = replace(gen_cfg, lowest_level=3)  # training probes the full pyramid
    if args.resume:
        try:
            bank, opt, done_epoch = read_checkpoint(args.resume, train_cfg)
        except FileNotFoundError as exc:
            raise DataError(f"checkpoint not found: {args.resume}") from exc
        except (ChecksumError, FormatVersionError, ShapeError, ValueError) as exc:
            raise DataError(f"checkpoint {args.resume}: {exc}") from exc
        start = done_epoch + 1
    else:
        bank, opt, start = build_fresh_bank(cfg), None, 1
    _write_snapshot(out, "train", cfg, {"data": args.data, "out": str(out), "resume": args.resume})
    bank, history = train(scenes, train_cfg, bank, train_gen, out_dir=str(out), opt=opt, start_epoch=start)
    last = history[-1] if history else {"total": float("nan")}
    print(f"train: {len(scenes)} scenes, epochs {start}..{train_cfg.epochs}, final loss {last['total']:.4f}")
    print(f"train: weights at {out / 'weights.bin'}")
    return EXIT_OK


def _infer_all(scenes, bank, gen_cfg: GenConfig, jobs: int):
    try:
        return _map_scenes(lambda s: generate(s.pyramid, bank, gen_cfg), scenes, jobs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    except KeyError as exc:
        raise DataError(f"dataset incompatible with config: {exc.args[0]}") from exc


def cmd_infer(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if args.lowest_level is not None:
        cfg["gen"]["lowest_level"] = args.lowest_level
    out = _out_dir(args)
    scenes = _load_scenes(args.data)
    bank = _load_bank(args.weights)
    gen_cfg = build_gen_config(cfg)
    results = _infer_all(scenes, bank, gen_cfg, args.jobs)
    anchors = []
    traces = []
    for scene, result in zip(scenes, results):
        anchors.extend(anchor_records(scene.spec.scene_id, result))
        traces.append(trace_record(scene.spec.scene_id, result.trace))
    write_jsonl(out / "anchors.jsonl", anchors)
    write_jsonl(out / "traces.jsonl", traces)
    _write_snapshot(
        out,
        "infer",
        cfg,
        {"data": args.data, "weights": args.weights, "out": str(out), "jobs": args.jobs},
    )
    mean_valid = sum(r.trace.valid_count for r in results) / max(1, len(results))
    print(f"infer: {len(scenes)} scenes, mean {mean_valid:.1f} anchors/image, dumps in {out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if args.lowest_level is not None:
        cfg["gen"]["lowest_level"] = args.lowest_level
    out = _out_dir(args)
    scenes = _load_scenes(args.data)
    bank = _load_bank(args.weights)
    gen_cfg = build_gen_config(cfg)
    budget = args.budget or gen_cfg.count_range[1]
    results = _infer_all(scenes, bank, gen_cfg, args.jobs)
    valid = [[a for a, ok in zip(r.anchors, r.valid) if ok] for r in results]
    report = average_recall(valid, [s.spec for s in scenes], budget)
    with open(out / "recall.json", "w", encoding="utf-8") as f:
        json.dump(report.as_json(), f, sort_keys=True, indent=2)
        f.write("\n")
    _write_snapshot(
        out,
        "eval",
        cfg,
        {"data": args.data, "weights": args.weights, "out": str(out), "budget": budget, "jobs": args.jobs},
    )
    per_class = " ".join(f"{c}={v:.3f}" for c, v in sorted(report.per_class.items()))
    print(f"eval: AR={report.ar:.3f} AR50={report.ar50:.3f} budget={budget} {per_class}")
    return EXIT_OK


def cmd_stats(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args)
    scenes = _load_scenes(args.data)
    bank = _load_bank(args.weights)
    gen_cfg = build_gen_config(cfg)
    results = _infer_all(scenes, bank, gen_cfg, args.jobs)
    traces = [r.trace for r in results]
    stats: dict = {"n_scenes": len(scenes)}
    try:
        stats["count_spearman"] = count_correlation(traces, [s.spec for s in scenes])
    except ValueError as exc:
        stats["count_spearman"] = None
        stats["count_spearman_error"] = str(exc)
    stats["level_histogram"] = {str(k): v for k, v in level_histogram(traces).items()}
    tallies = [flop_count(t, bank.channels, bank.hidden, gen_cfg.lowest_level) for t in traces]
    n = len(tallies)
    stats["flops"] = {
        "mean_predictor": sum(t.predictor for t in tallies) / n,
        "mean_sparse_total": sum(t.sparse_total for t in tallies) / n,
        "mean_dense_baseline": sum(t.dense_baseline for t in tallies) / n,
    }
    with open(out / "stats.json", "w", encoding="utf-8") as f:
        json.dump(stats, f, sort_keys=True, indent=2)
        f.write("\n")
    _write_snapshot(
        out,
        "stats",
        cfg,
        {"data": args.data, "weights": args.weights, "out": str(out), "jobs": args.jobs},
    )
    hist = " ".join(f"P{k}:{v:.2f}" for k, v in sorted(stats["level_histogram"].items()))
    rho = stats["count_spearman"]
    rho_txt = "n/a" if rho is None else f"{rho:.3f}"
    print(f"stats: spearman={rho_txt} levels[{hist}] sparse/dense=" f"{stats['flops']['mean_sparse_total'] / stats['flops']['mean_dense_baseline']:.3f}")
    return EXIT_OK


ETA_L_SWEEP = (0.3, 0.2, 0.1, 0.05)
ETA_IOU_SWEEP = (0.4, 0.25, 0.2, 0.1)


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args)
    scenes = _load_scenes(args.data)
    bank = _load_bank(args.weights)
    base = build_gen_config(cfg)
    configs = []
    if args.param in ("eta_l", "both"):
        configs.extend(replace(base, eta_l=v) for v in ETA_L_SWEEP)
    if args.param in ("eta_iou", "both"):
        configs.extend(replace(base, eta_iou=v) for v in ETA_IOU_SWEEP)
    try:
        rows = ablation_sweep(scenes, bank, configs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    with open(out / "sweep.csv", "w", encoding="utf-8") as f:
        f.write(sweep_csv(rows))
    _write_snapshot(
        out,
        "sweep",
        cfg,
        {"data": args.data, "weights": args.weights, "out": str(out), "param": args.param, "jobs": args.jobs},
    )
    print(f"sweep: {len(rows)} configs evaluated on {len(scenes)} scenes, table at {out / 'sweep.csv'}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anchorgen",
        description="Sparse anchor generation on synthetic feature pyramids.",
        epilog="Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric error.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, jobs: bool = False) -> None:
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--preset", choices=sorted(PRESETS), help="named operating point")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--out", required=True, help="output directory")
        if jobs:
            p.add_argument("--jobs", type=int, default=1, help="worker threads (results stay ordered)")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--scenes", type=int, required=True, help="number of scenes")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a predictor bank")
    common(p)
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="run generation, dump anchors and traces")
    common(p, jobs=True)
    p.add_argument("--data", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--lowest-level", type=int, choices=(3, 4, 5), dest="lowest_level")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="average-recall report")
    common(p, jobs=True)
    p.add_argument("--data", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--budget", type=int, help="proposal budget (default: count_range max)")
    p.add_argument("--lowest-level", type=int, choices=(3, 4, 5), dest="lowest_level")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("stats", help="count correlation, level usage, FLOP accounting")
    common(p, jobs=True)
    p.add_argument("--data", required=True)
    p.add_argument("--weights", required=True)
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("sweep", help="inference-time ablation table")
    common(p, jobs=True)
    p.add_argument("--data", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--param", choices=("eta_l", "eta_iou", "both"), default="both")
    p.set_defaults(fn=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entry() -> None:
    sys.exit(main())
