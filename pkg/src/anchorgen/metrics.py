"""Proposal-quality metrics and the ablation sweep driver.

Average recall follows the standard proposal protocol: per image, keep
the top-budget anchors by score; per IoU threshold, greedily give each
ground-truth box its best not-yet-used anchor and count it matched when
that IoU clears the threshold. Count correlation is Spearman's rank
coefficient (the anchor/GT relation is monotone, not linear), computed
here directly since ties need average ranks and a constant series must
be a loud error rather than a NaN.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .generator import GenConfig, GenTrace, generate
from .geometry import boxes_to_array, pairwise_iou
from .predictor import PredictorBank, ScoredAnchor
from .synthetic import SIZE_LARGE, SIZE_MEDIUM, SIZE_SMALL, Scene, SceneSpec

IOU_THRESHOLDS = tuple(np.linspace(0.5, 0.95, 10))
SIZE_CLASSES = (SIZE_SMALL, SIZE_MEDIUM, SIZE_LARGE)


class UndefinedCorrelationError(ValueError):
    """Correlation asked of a constant series."""


@dataclass
class RecallReport:
    """Recall averaged over IoU thresholds 0.5:0.05:0.95."""

    ar: float
    ar50: float
    per_class: dict[str, float]
    budget: int
    total_gts: int

    def as_json(self) -> dict:
        return {
            "ar": self.ar,
            "ar50": self.ar50,
            "per_class": dict(self.per_class),
            "budget": self.budget,
            "total_gts": self.total_gts,
        }


def average_recall(
    anchors_per_image: list[list[ScoredAnchor]],
    specs: list[SceneSpec],
    budget: int,
) -> RecallReport:
    """Greedy best-unused-anchor recall under a proposal budget.

    Per-class entries appear only for classes present in the ground
    truth. Zero ground truth overall yields AR 0.0 by convention.

    Raises:
        ValueError: budget < 1 or mismatched list lengths.
    """
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    if len(anchors_per_image) != len(specs):
        raise ValueError(f"{len(anchors_per_image)} anchor lists vs {len(specs)} specs")
    n_thr = len(IOU_THRESHOLDS)
    matched = {c: np.zeros(n_thr) for c in SIZE_CLASSES}
    totals = {c: 0 for c in SIZE_CLASSES}

    for anchors, spec in zip(anchors_per_image, specs):
        if not spec.boxes:
            continue
        for c in spec.size_classes:
            totals[c] += 1
        if not anchors:
            continue
        scores = np.array([a.score for a in anchors], dtype=np.float64)
        order = np.argsort(-scores, kind="stable")[:budget]
        kept = boxes_to_array([anchors[int(i)].box for i in order])
        ious = pairwise_iou(boxes_to_array(spec.boxes), kept)
        for ti, thr in enumerate(IOU_THRESHOLDS):
            used = np.zeros(len(order), dtype=bool)
            for gi, cls in enumerate(spec.size_classes):
                open_idx = np.flatnonzero(~used)
                if open_idx.size == 0:
                    break
                best = open_idx[int(np.argmax(ious[gi, open_idx]))]
                if ious[gi, best] >= thr:
                    used[best] = True
                    matched[cls][ti] += 1.0

    total = sum(totals.values())
    if total == 0:
        overall = np.zeros(n_thr)
    else:
        overall = sum(matched[c] for c in SIZE_CLASSES) / total
    per_class = {
        c: float(np.mean(matched[c] / totals[c])) for c in SIZE_CLASSES if totals[c] > 0
    }
    return RecallReport(
        ar=float(np.mean(overall)),
        ar50=float(overall[0]),
        per_class=per_class,
        budget=budget,
        total_gts=total,
    )


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks; ties share the average of their positions."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(xs, ys) -> float:
    """Rank correlation with average-rank tie handling.

    Raises:
        ValueError: fewer than 3 points or mismatched lengths.
        UndefinedCorrelationError: either series is constant.
    """
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"need equal-length 1-d series, got {x.shape} vs {y.shape}")
    if len(x) < 3:
        raise ValueError(f"need at least 3 points, got {len(x)}")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedCorrelationError("rank correlation of a constant series is undefined")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    return float((rx * ry).sum() / np.sqrt((rx * rx).sum() * (ry * ry).sum()))


def count_correlation(traces: list[GenTrace], specs: list[SceneSpec]) -> float:
    """Spearman correlation between GT counts and valid-anchor counts."""
    if len(traces) != len(specs):
        raise ValueError(f"{len(traces)} traces vs {len(specs)} specs")
    return spearman([s.difficulty for s in specs], [t.valid_count for t in traces])


def level_histogram(traces: list[GenTrace]) -> dict[int, float]:
    """Fraction of images whose deepest probing level is 5 (none), 4, or 3."""
    if not traces:
        raise ValueError("no traces")
    counts = {5: 0, 4: 0, 3: 0}
    for t in traces:
        counts[t.deepest_probe_level] += 1
    return {level: n / len(traces) for level, n in counts.items()}


@dataclass
class FlopTally:
    """Multiply-accumulate counts for one generated image (x2 per MAC)."""

    predictor: int
    compress: int
    interp: int
    dense_baseline: int
    dense_cells: int

    @property
    def sparse_total(self) -> int:
        return self.predictor + self.compress + self.interp


def flop_count(
    trace: GenTrace,
    channels: int = 8,
    hidden: tuple[int, ...] = (256, 256),
    lowest_level: int = 3,
) -> FlopTally:
    """Tally from a trace plus the dense per-grid-cell baseline.

    The baseline runs a per-cell MLP (``channels`` in, ``hidden``, 5 out)
    on every cell of the derived P6 map and of levels 5 down to
    ``lowest_level``; dims for levels the sparse pass never compressed
    follow the stride-halving convention from the level-5 dims.
    """
    chain = [channels, *hidden, 5]
    per_cell = 2 * sum(a * b for a, b in zip(chain[:-1], chain[1:]))
    h5, w5 = trace.map_dims[5]
    cells = trace.map_dims[6][0] * trace.map_dims[6][1]
    for level in range(5, lowest_level - 1, -1):
        h, w = trace.map_dims.get(level, (h5 << (5 - level), w5 << (5 - level)))
        cells += h * w
    return FlopTally(
        predictor=trace.macs_predictor,
        compress=trace.macs_compress,
        interp=trace.macs_interp,
        dense_baseline=cells * per_cell,
        dense_cells=cells,
    )


@dataclass
class SweepRow:
    """One ablation configuration and its evaluation."""

    eta_l: float
    eta_h: float
    eta_f: float
    eta_iou: float
    lowest_level: int
    topk_mode: bool
    replace_selected: bool
    ar: float
    ar50: float
    mean_anchors: float
    mean_patches_l4: float
    mean_patches_l3: float


SWEEP_COLUMNS = [
    "eta_l",
    "eta_h",
    "eta_f",
    "eta_iou",
    "lowest_level",
    "topk_mode",
    "replace_selected",
    "ar",
    "ar50",
    "mean_anchors",
    "mean_patches_l4",
    "mean_patches_l3",
]


def ablation_sweep(scenes: list[Scene], bank: PredictorBank, configs: list[GenConfig]) -> list[SweepRow]:
    """Evaluate inference-time configurations against one trained bank.

    Raises:
        ValueError: a config's patch size does not match the bank
            (patch-size ablations need their own trained banks).
    """
    for cfg in configs:
        if cfg.patch_size != bank.patch_size:
            raise ValueError(
                f"config patch_size {cfg.patch_size} incompatible with bank {bank.patch_size}"
            )
    rows = []
    specs = [s.spec for s in scenes]
    for cfg in configs:
        results = [generate(s.pyramid, bank, cfg) for s in scenes]
        anchors = [[a for a, ok in zip(r.anchors, r.valid) if ok] for r in results]
        report = average_recall(anchors, specs, budget=cfg.count_range[1])
        n = len(scenes)
        rows.append(
            SweepRow(
                eta_l=cfg.eta_l,
                eta_h=cfg.eta_h,
                eta_f=cfg.eta_f,
                eta_iou=cfg.eta_iou,
                lowest_level=cfg.lowest_level,
                topk_mode=cfg.topk_mode,
                replace_selected=cfg.replace_selected,
                ar=report.ar,
                ar50=report.ar50,
                mean_anchors=sum(r.trace.valid_count for r in results) / n,
                mean_patches_l4=sum(len(r.trace.patches.get(4, [])) for r in results) / n,
                mean_patches_l3=sum(len(r.trace.patches.get(3, [])) for r in results) / n,
            )
        )
    return rows


def sweep_csv(rows: list[SweepRow]) -> str:
    """Render sweep rows as CSV with the documented column order."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    for r in rows:
        writer.writerow([getattr(r, c) for c in SWEEP_COLUMNS])
    return buf.getvalue()
