"""Per-patch one-to-one assignment and training-patch composition.

Matching is class agnostic: the cost couples box distance (L1 over center
form, generalized IoU) with predicted confidence, and a Hungarian solve
picks one anchor per target inside each patch. Query-weighting never
enters these costs; weights only scale losses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import Box, boxes_to_array, pairwise_giou
from .pyramid import (
    KIND_GT,
    KIND_RANDOM,
    FeatureMap,
    Patch,
    crop_patch,
    flip_patch,
)
from .predictor import ScoredAnchor
from .rng import SplitMix, derive_seed

PAD_COST = 1.0e6  # rectangular problems are padded square with this value


@dataclass
class Assignment:
    """One-to-one matching result; pairs are sorted by anchor index."""

    pairs: list[tuple[int, int]]
    unmatched_anchors: list[int]
    unmatched_gts: list[int]


@dataclass
class GroundTruth:
    """Targets that fall inside one patch.

    ``small`` flags boxes with max(w, h) below half the patch extent;
    ``indices`` point back into the scene's full target list.
    """

    boxes: list[Box]
    small: list[bool]
    indices: list[int]

    def __len__(self) -> int:
        return len(self.boxes)


def hungarian(cost: np.ndarray) -> Assignment:
    """Minimum-cost one-to-one assignment of rows to columns.

    Rectangular inputs are padded to square with ``PAD_COST`` and the
    padded pairs dropped, leaving exactly ``min(R, C)`` pairs. Among
    co-optimal solutions the lexicographically smallest pair list wins:
    dual potentials recovered from the solver's answer expose every
    zero-reduced-cost edge (which jointly carry all optimal solutions),
    and rows greedily take the smallest column that keeps a complete
    matching reachable. Tie detection is exact whenever tied totals are
    exactly representable (integer-valued costs, duplicated entries).

    Raises:
        ValueError: empty or non-finite cost matrix.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.size == 0:
        raise ValueError(f"cost must be a non-empty 2-d matrix, got shape {cost.shape}")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")
    rows, cols = cost.shape
    n = max(rows, cols)
    padded = np.full((n, n), PAD_COST, dtype=np.float64)
    padded[:rows, :cols] = cost
    rr, cc = linear_sum_assignment(padded)
    col_of = _canonical_pairs(padded, rows, cols, rr, cc)
    pairs = sorted(col_of.items())
    matched_cols = set(col_of.values())
    return Assignment(
        pairs=pairs,
        unmatched_anchors=[r for r in range(rows) if r not in col_of],
        unmatched_gts=[c for c in range(cols) if c not in matched_cols],
    )


def _canonical_pairs(
    padded: np.ndarray, rows: int, cols: int, row_ind: np.ndarray, col_ind: np.ndarray
) -> dict[int, int]:
    """Lexicographically smallest co-optimal real-pair assignment.

    Column potentials come from Bellman-Ford over alternating moves of
    the solver's matching (optimality guarantees no negative cycle), so
    every optimal assignment lives in the zero-reduced-cost subgraph.
    Rows then greedily bind to their smallest feasible real column,
    repairing the incumbent matching with one augmenting path per probe;
    a row is left out only when no real column admits a completion.
    """
    n = padded.shape[0]
    col_of = np.empty(n, dtype=np.int64)
    col_of[row_ind] = col_ind
    row_of = np.empty(n, dtype=np.int64)
    row_of[col_ind] = row_ind

    # moves[c, c2]: cost change from handing column c's matched row to c2.
    at_rows = padded[row_of]
    base = at_rows[np.arange(n), np.arange(n)]
    moves = at_rows - base[:, None]
    v = np.zeros(n, dtype=np.float64)
    for _ in range(n):
        relaxed = np.minimum(v, (v[:, None] + moves).min(axis=0))
        if np.array_equal(relaxed, v):
            break
        v = relaxed
    u = padded[np.arange(n), col_of] - v[col_of]
    tight = (padded - u[:, None]) - v[None, :] == 0.0
    # Matched edges are tight by construction; re-assert against rounding.
    tight[np.arange(n), col_of] = True

    owner = {int(c): int(r) for r, c in enumerate(col_of)}  # col -> row
    mine = {int(r): int(c) for r, c in enumerate(col_of)}  # row -> col
    avail_cols = set(range(n))
    real_cols = list(range(cols))
    fixed: dict[int, int] = {}
    for r in range(rows):
        if not real_cols:
            break
        chosen = None
        for c in real_cols:
            if tight[r, c] and (mine[r] == c or _reroute(r, c, tight, owner, mine, avail_cols)):
                chosen = c
                break
        if chosen is None:
            continue  # every optimal completion leaves this row unmatched
        fixed[r] = chosen
        avail_cols.discard(chosen)
        real_cols.remove(chosen)
        del owner[chosen]
        del mine[r]
    return fixed


def _reroute(r: int, c: int, tight: np.ndarray, owner: dict[int, int], mine: dict[int, int], avail_cols: set[int]) -> bool:
    """Rewire the incumbent matching so row ``r`` takes column ``c``.

    Displaces the current owner of ``c`` and hunts an alternating path to
    the column ``r`` freed, mutating ``owner``/``mine`` only on success.
    """
    displaced = owner[c]
    freed = mine[r]
    owner[c], mine[r] = r, c
    seen = {c}

    def assign(row: int) -> bool:
        for c2 in avail_cols:
            if c2 not in seen and tight[row, c2]:
                seen.add(c2)
                if c2 == freed or assign(owner[c2]):
                    owner[c2] = row
                    mine[row] = c2
                    return True
        return False

    if assign(displaced):
        return True
    owner[c], mine[r] = displaced, freed
    return False


def match_cost(
    anchors: list[ScoredAnchor] | np.ndarray,
    gts: list[Box] | np.ndarray,
    l1_coeff: float = 5.0,
    giou_coeff: float = 2.0,
    score_coeff: float = 2.0,
) -> np.ndarray:
    """(K, G) matching cost: 5*L1 + 2*(1 - GIoU) - 2*score.

    L1 is the mean absolute difference over the four center-form
    coordinates. The score term rewards confident anchors so matching
    prefers them at equal geometry; loss weights never appear here.
    """
    if isinstance(anchors, np.ndarray):
        arr = np.asarray(anchors, dtype=np.float64)
        boxes = arr[:, :4]
        scores = arr[:, 4]
    else:
        boxes = boxes_to_array([a.box for a in anchors])
        scores = np.array([a.score for a in anchors], dtype=np.float64)
    gt_arr = gts if isinstance(gts, np.ndarray) else boxes_to_array(list(gts))
    l1 = np.abs(boxes[:, None, :] - gt_arr[None, :, :]).mean(axis=2)
    g = pairwise_giou(boxes, gt_arr)
    return l1_coeff * l1 + giou_coeff * (1.0 - g) - score_coeff * scores[:, None]


def targets_in_patch(patch: Patch, gts: list[Box], indices: list[int] | None = None) -> GroundTruth:
    """Targets whose centers fall inside the patch footprint.

    Containment is half-open on the right/bottom edges so a center sitting
    exactly on a shared quadrant boundary belongs to one patch only.
    """
    x1, y1, x2, y2 = patch.footprint.corners()
    half = 0.5 * patch.extent
    boxes: list[Box] = []
    small: list[bool] = []
    kept: list[int] = []
    src = indices if indices is not None else range(len(gts))
    for idx, box in zip(src, gts):
        if x1 <= box.cx < x2 and y1 <= box.cy < y2:
            boxes.append(box)
            small.append(max(box.w, box.h) < half)
            kept.append(idx)
    return GroundTruth(boxes=boxes, small=small, indices=kept)


def flip_box(box: Box, mode: str) -> Box:
    """Mirror a box like :func:`pyramid.flip_patch` mirrors values."""
    cx = 1.0 - box.cx if "h" in mode else box.cx
    cy = 1.0 - box.cy if "v" in mode else box.cy
    return Box(cx, cy, box.w, box.h)


_FLIP_OF_KIND = {"flip_h": "h", "flip_v": "v", "flip_hv": "hv"}


def targets_for_patch(patch: Patch, gts: list[Box]) -> GroundTruth:
    """Like :func:`targets_in_patch` but honoring flip provenance."""
    mode = _FLIP_OF_KIND.get(patch.source_kind)
    if mode is None:
        return targets_in_patch(patch, gts)
    flipped = [flip_box(b, mode) for b in gts]
    return targets_in_patch(patch, flipped)


def group_gt_patches(fm: FeatureMap, gts: list[Box], patch_size: int) -> list[Patch]:
    """Greedy grouping of small targets into GT-centered patches.

    Iterates targets smaller than half the patch extent in input order,
    seeds a patch at the first ungrouped box's center cell, and absorbs
    every small target whose center falls inside that patch's footprint.
    """
    extent = max(patch_size / fm.height, patch_size / fm.width)
    half = 0.5 * extent
    smalls = [(i, b) for i, b in enumerate(gts) if max(b.w, b.h) < half]
    grouped: set[int] = set()
    patches: list[Patch] = []
    for idx, box in smalls:
        if idx in grouped:
            continue
        r = min(int(box.cy * fm.height), fm.height - 1)
        c = min(int(box.cx * fm.width), fm.width - 1)
        patch = crop_patch(fm, (r, c), patch_size, source_kind=KIND_GT)
        x1, y1, x2, y2 = patch.footprint.corners()
        for jdx, other in smalls:
            if jdx not in grouped and x1 <= other.cx < x2 and y1 <= other.cy < y2:
                grouped.add(jdx)
        patches.append(patch)
    return patches


def build_training_patches(
    maps: dict[int, FeatureMap],
    generated: dict[int, list[Patch]],
    gts: list[Box],
    patch_size: int,
    n_tp: int,
    seed: int,
) -> list[Patch]:
    """Compose the per-step training patch set.

    For levels 5..3 (order preserved): all generated patches, then
    GT-group patches, then random patches, each appended only until the
    per-level count reaches ``n_tp``. The single P6 patch expands to
    exactly four variants: identity plus h/v/hv flips.

    Args:
        maps: level -> source map patches are cut from (5 maps to the
            interpolated-compressed P5).
        generated: level -> patches recorded by the generator's forward
            (level 6 holds the single full-image patch).
        seed: stream for random patch placement.
    """
    out: list[Patch] = []
    p6 = generated.get(6, [])
    if p6:
        base = p6[0]
        out.append(base)
        out.extend(flip_patch(base, mode) for mode in ("h", "v", "hv"))
    for level in (5, 4, 3):
        if level not in maps:
            continue
        fm = maps[level]
        patches = list(generated.get(level, []))
        if len(patches) < n_tp:
            for patch in group_gt_patches(fm, gts, patch_size):
                if len(patches) >= n_tp:
                    break
                patches.append(patch)
        if len(patches) < n_tp:
            gen = SplitMix(derive_seed(seed, "random_patch", level))
            while len(patches) < n_tp:
                r = gen.randint(fm.height)
                c = gen.randint(fm.width)
                patches.append(crop_patch(fm, (r, c), patch_size, source_kind=KIND_RANDOM))
        out.extend(patches)
    return out
