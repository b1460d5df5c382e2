"""Sparse anchor generation: fixed quadrant stage plus adaptive probing.

The fixed stage compresses P5, resamples it to a 2S x 2S grid, and runs
the quadrant predictor on its four S x S quarters plus the P6 predictor
on a pooled full-image patch. Probing then walks down the pyramid: mid
confidence anchors that are small relative to their source patch spawn
S x S windows on the next finer level (deduplicated by NMS, capped per
level), the adaptive predictor refines inside those windows, and in
correct-and-replace mode the spawning anchors are dropped in favor of
their refinements. Iteration stops at ``lowest_level`` or as soon as too
few anchors ask for another look.

The final gather keeps confident anchors that were not consumed by
probing, clamps the count into ``count_range`` (stable-index ties), and
pads to the range maximum with zero entries plus a validity mask.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box, nms
from .predictor import PredictorBank, ScoredAnchor, predict
from .pyramid import (
    KIND_PROBE,
    FeatureMap,
    FeaturePyramid,
    Patch,
    compress_channels,
    crop_patch,
    downsample2,
    full_map_patch,
    interpolate_bilinear,
    split_quadrants,
)


@dataclass
class GenConfig:
    """Generation thresholds and shape parameters.

    ``eta_l``/``eta_h`` bound the probing confidence band, ``eta_f`` gates
    the final gather, ``eta_iou`` is the probe-window NMS threshold.
    ``count_range`` clamps the per-image anchor count; outputs are padded
    to its maximum.
    """

    patch_size: int = 15
    interp_size: int = 30
    k_fixed: int = 50
    k_adapt: int = 20
    eta_l: float = 0.1
    eta_h: float = 0.7
    eta_f: float = 0.1
    eta_iou: float = 0.25
    patch_cap: int = 15
    early_stop_min: int = 3
    count_range: tuple[int, int] = (5, 200)
    lowest_level: int = 3
    replace_selected: bool = True
    topk_mode: bool = False

    def __post_init__(self):
        if self.interp_size != 2 * self.patch_size:
            raise ValueError(f"interp_size must be 2 * patch_size, got {self.interp_size} vs {self.patch_size}")
        if not (0.0 <= self.eta_l <= self.eta_h <= 1.0):
            raise ValueError(f"need 0 <= eta_l <= eta_h <= 1, got ({self.eta_l}, {self.eta_h})")
        if not (0.0 <= self.eta_f <= 1.0):
            raise ValueError(f"eta_f out of [0, 1]: {self.eta_f}")
        lo, hi = self.count_range
        if not (0 < lo <= hi):
            raise ValueError(f"bad count_range {self.count_range}")
        if self.lowest_level not in (3, 4, 5):
            raise ValueError(f"lowest_level must be 3, 4, or 5, got {self.lowest_level}")
        if self.patch_cap < 1 or self.early_stop_min < 1:
            raise ValueError("patch_cap and early_stop_min must be positive")


@dataclass
class GenTrace:
    """Diagnostics from one :func:`generate` call."""

    patches: dict[int, list[Patch]] = field(default_factory=dict)
    selected_counts: dict[int, int] = field(default_factory=dict)
    levels_used: list[int] = field(default_factory=list)
    deepest_probe_level: int = 5  # 5 means no probing ran
    pool: list[ScoredAnchor] = field(default_factory=list)
    valid_count: int = 0
    padded_len: int = 0
    macs_predictor: int = 0
    macs_compress: int = 0
    macs_interp: int = 0
    invocations: dict[int, int] = field(default_factory=dict)
    map_dims: dict[int, tuple[int, int]] = field(default_factory=dict)
    final_ids: set[int] = field(default_factory=set)


@dataclass
class GenResult:
    """Padded anchors, validity mask, and the trace."""

    anchors: list[ScoredAnchor]
    valid: np.ndarray
    trace: GenTrace


def mlp_macs(weights: list[np.ndarray]) -> int:
    """Multiply-accumulates of one MLP pass: sum of fan_in * fan_out."""
    return int(sum(w.size for w in weights))


def mark_eligibility(anchors: list[ScoredAnchor], cfg: GenConfig) -> None:
    """Set the pure probing-eligibility flag on freshly predicted anchors.

    An anchor is eligible when its score sits inside [eta_l, eta_h] and
    its larger box side is below half the extent of the patch that
    produced it. The flag is mode independent: it is computed identically
    whatever ``lowest_level`` is, so non-eligible anchors compare equal
    across efficient-inference modes.
    """
    for a in anchors:
        a.probe_eligible = (
            cfg.eta_l <= a.score <= cfg.eta_h and max(a.box.w, a.box.h) < 0.5 * a.source_extent
        )


def select_probe_anchors(anchors: list[ScoredAnchor], cfg: GenConfig) -> list[ScoredAnchor]:
    """Eligible subset of a stage's outputs, flagged selected_for_probe.

    The caller resets the flag on anchors whose probe window is dropped
    (NMS, cap, early stop) or kept alongside its refinements.
    """
    selected = [a for a in anchors if a.probe_eligible]
    for a in selected:
        a.selected_for_probe = True
    return selected


def build_probe_patches(
    selected: list[ScoredAnchor], fm: FeatureMap, cfg: GenConfig
) -> tuple[list[Patch], list[int]]:
    """Crop deduplicated probe windows around selected anchor centers.

    Candidate windows are ``patch_size`` cells square, centered on each
    anchor's cell (center * dims, floored). NMS at ``eta_iou`` over the
    nominal window footprints drops overlaps (scores = anchor scores,
    ties by input order); survivors are truncated to ``patch_cap`` in
    descending score order.

    Returns:
        (patches, indices into ``selected`` whose windows survived).
    """
    h, w = fm.height, fm.width
    size = cfg.patch_size
    cells = []
    windows = []
    for a in selected:
        r = min(int(a.box.cy * h), h - 1)
        c = min(int(a.box.cx * w), w - 1)
        cells.append((r, c))
        r0 = r - size // 2
        c0 = c - size // 2
        windows.append(Box((c0 + size / 2.0) / w, (r0 + size / 2.0) / h, size / w, size / h))
    keep = nms(windows, [a.score for a in selected], cfg.eta_iou)[: cfg.patch_cap]
    patches = [crop_patch(fm, cells[i], size, source_kind=KIND_PROBE) for i in keep]
    return patches, keep


def run_fixed_part(
    pyramid: FeaturePyramid, bank: PredictorBank, cfg: GenConfig, trace: GenTrace
) -> tuple[list[ScoredAnchor], list[Patch]]:
    """Predict the fixed-stage anchors: 4 quadrant patches plus P6.

    Compresses P5, resamples to ``interp_size`` square, splits quadrants,
    and derives P6 by 2x2 mean pooling. Emits 5 * k_fixed anchors.
    """
    p5 = pyramid[5]
    c5 = compress_channels(p5, bank.proj, bank.proj_bias)
    trace.macs_compress += p5.height * p5.width * bank.proj.size
    i5 = interpolate_bilinear(c5, cfg.interp_size, cfg.interp_size)
    trace.macs_interp += cfg.interp_size * cfg.interp_size * c5.channels * 4
    quads = split_quadrants(i5)
    i6 = downsample2(i5)
    p6_patch = full_map_patch(i6)
    trace.map_dims[5] = (p5.height, p5.width)
    trace.map_dims[6] = (i6.height, i6.width)

    anchors: list[ScoredAnchor] = []
    patches: list[Patch] = []
    for patch in quads:
        out, _ = predict(bank.p5, patch, patch_id=len(patches))
        trace.macs_predictor += 2 * mlp_macs(bank.p5.weights)
        trace.invocations[5] = trace.invocations.get(5, 0) + 1
        anchors.extend(out)
        patches.append(patch)
    out, _ = predict(bank.p6, p6_patch, patch_id=len(patches))
    trace.macs_predictor += 2 * mlp_macs(bank.p6.weights)
    trace.invocations[6] = trace.invocations.get(6, 0) + 1
    anchors.extend(out)
    patches.append(p6_patch)

    mark_eligibility(anchors, cfg)
    trace.patches[6] = [p6_patch]
    trace.patches[5] = quads
    trace.levels_used = [6, 5]
    return anchors, patches


def _stable_top_by_score(anchors: list[ScoredAnchor], k: int) -> list[ScoredAnchor]:
    scores = np.array([a.score for a in anchors], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")[:k]
    return [anchors[int(i)] for i in sorted(order)]


def generate(pyramid: FeaturePyramid, bank: PredictorBank, cfg: GenConfig) -> GenResult:
    """Run the full generation pipeline on one image.

    Returns anchors padded to ``count_range[1]`` (invalid rows are zero
    boxes with score 0) plus a validity mask and the trace. Probing stops
    below ``lowest_level`` even when anchors would qualify; anchors that
    never became probe spawners are identical across ``lowest_level``
    settings.

    Raises:
        KeyError: the pyramid lacks a level at or above ``lowest_level``.
        ValueError: bank geometry does not match the config.
    """
    if bank.patch_size != cfg.patch_size:
        raise ValueError(f"bank patch size {bank.patch_size} != config {cfg.patch_size}")
    for level in range(5, cfg.lowest_level - 1, -1):
        if level not in pyramid:
            raise KeyError(f"pyramid missing level {level} needed before the probing floor")

    trace = GenTrace()
    anchors, patch_registry = run_fixed_part(pyramid, bank, cfg, trace)
    pool = list(anchors)
    prev_stage = anchors

    for level in range(4, cfg.lowest_level - 1, -1):
        selected = select_probe_anchors(prev_stage, cfg)
        trace.selected_counts[level] = len(selected)
        if len(selected) < cfg.early_stop_min:
            for a in selected:
                a.selected_for_probe = False
            break
        raw = pyramid[level]
        trace.map_dims[level] = (raw.height, raw.width)
        compressed = compress_channels(raw, bank.proj, bank.proj_bias)
        trace.macs_compress += raw.height * raw.width * bank.proj.size
        patches, keep = build_probe_patches(selected, compressed, cfg)
        kept_set = set(keep)
        for i, a in enumerate(selected):
            if i not in kept_set:
                a.selected_for_probe = False
        new_anchors: list[ScoredAnchor] = []
        for patch in patches:
            pid = len(patch_registry)
            patch_registry.append(patch)
            out, _ = predict(bank.adaptive, patch, patch_id=pid)
            trace.macs_predictor += 2 * mlp_macs(bank.adaptive.weights)
            trace.invocations[level] = trace.invocations.get(level, 0) + 1
            new_anchors.extend(out)
        mark_eligibility(new_anchors, cfg)
        spawners = [selected[i] for i in keep]
        if cfg.replace_selected:
            for a in spawners:
                a.replaced = True
        else:
            # Keep-both ablation: spawners stay gatherable.
            for a in spawners:
                a.selected_for_probe = False
        trace.patches[level] = patches
        trace.levels_used.append(level)
        trace.deepest_probe_level = level
        pool.extend(new_anchors)
        prev_stage = new_anchors

    trace.pool = pool
    lo, hi = cfg.count_range
    if cfg.topk_mode:
        final = _stable_top_by_score([a for a in pool if not a.replaced], hi)
    else:
        final = [a for a in pool if a.score > cfg.eta_f and not a.selected_for_probe]
        if len(final) > hi:
            final = _stable_top_by_score(final, hi)
        elif len(final) < lo:
            in_final = {id(a) for a in final}
            spare = [a for a in pool if not a.selected_for_probe and id(a) not in in_final]
            final = final + _stable_top_by_score(spare, lo - len(final))

    trace.valid_count = len(final)
    trace.final_ids = {id(a) for a in final}
    padded = list(final)
    while len(padded) < hi:
        padded.append(
            ScoredAnchor(Box(0.0, 0.0, 0.0, 0.0), 0.0, origin_level=0, origin_patch=-1, source_extent=0.0)
        )
    valid = np.zeros(hi, dtype=bool)
    valid[: len(final)] = True
    trace.padded_len = hi
    return GenResult(anchors=padded, valid=valid, trace=trace)


def export_proposals(
    pyramid: FeaturePyramid,
    bank: PredictorBank,
    anchors: list[ScoredAnchor],
    out: int = 7,
    sampling: int = 2,
) -> np.ndarray:
    """RoI-aligned features from the compressed P5 map, one per anchor.

    Returns (N, C, out, out) float32; padded/degenerate anchor rows come
    back as zero blocks.
    """
    from .pyramid import roi_align

    c5 = compress_channels(pyramid[5], bank.proj, bank.proj_bias)
    blocks = np.zeros((len(anchors), c5.channels, out, out), dtype=np.float32)
    for i, a in enumerate(anchors):
        if a.box.w > 0.0 and a.box.h > 0.0:
            blocks[i] = roi_align(c5, a.box, out=out, sampling=sampling)
    return blocks


def anchor_records(image_id: int | str, result: GenResult) -> list[dict]:
    """JSON-ready per-anchor records (pool order, includes flags)."""
    records = []
    for a in result.trace.pool:
        records.append(
            {
                "image": image_id,
                "level": a.origin_level,
                "patch": a.origin_patch,
                "cx": a.box.cx,
                "cy": a.box.cy,
                "w": a.box.w,
                "h": a.box.h,
                "score": a.score,
                "eligible": a.probe_eligible,
                "selected": a.selected_for_probe,
                "replaced": a.replaced,
                "final": id(a) in result.trace.final_ids,
            }
        )
    return records


def trace_record(image_id: int | str, trace: GenTrace) -> dict:
    """JSON-ready one-line summary of a trace."""
    return {
        "image": image_id,
        "levels_used": list(trace.levels_used),
        "deepest_probe": trace.deepest_probe_level,
        "patch_counts": {str(l): len(ps) for l, ps in trace.patches.items()},
        "selected_counts": {str(l): n for l, n in trace.selected_counts.items()},
        "valid_count": trace.valid_count,
        "macs": {
            "predictor": trace.macs_predictor,
            "compress": trace.macs_compress,
            "interp": trace.macs_interp,
        },
    }


def write_jsonl(path, records: list[dict]) -> None:
    """One sorted-key JSON object per line; bytes are deterministic."""
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True))
            f.write("\n")


def read_jsonl(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
