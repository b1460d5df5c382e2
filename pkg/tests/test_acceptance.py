"""Acceptance harness: the nine release gates, one test per gate.

Each test asserts its gate at the stated tolerance and prints a single
summary line. The slow pieces (a 200-scene training run and the derived
held-out inference passes) live in one session fixture shared by gates
5 through 8; gate 9 runs its own reduced end-to-end twice to compare
artifacts byte for byte.
"""

import itertools
import json
import math
import struct
import time

import numpy as np
import pytest

from anchorgen.cli import ETA_IOU_SWEEP, ETA_L_SWEEP, EXIT_OK, main
from anchorgen.generator import GenConfig, generate
from anchorgen.geometry import Box
from anchorgen.losses import (
    WeightConfig,
    box_loss,
    cls_loss_negative,
    cls_loss_positive,
    giou_loss_and_grad,
    neg_weight,
    norm_weight,
    pos_weight,
)
from anchorgen.matching import hungarian
from anchorgen.metrics import (
    ablation_sweep,
    average_recall,
    count_correlation,
    flop_count,
)
from anchorgen.predictor import (
    Patch,
    init_bank,
    init_params,
    predict,
    predict_backward,
    zero_bank,
)
from anchorgen.pyramid import KIND_RANDOM
from anchorgen.rng import SplitMix
from anchorgen.synthetic import read_dataset
from anchorgen.tensorio import read_tensors, write_tensors

TRAIN_SCENES = 200
HELD_SCENES = 50
TRAIN_SEED = 0
HELD_SEED = 777
TRAIN_BUDGET_SECONDS = 900


def _ok(n: int, detail: str) -> None:
    print(f"criterion {n}: PASS ({detail})")


@pytest.fixture(scope="session")
def harness(tmp_path_factory):
    """Reference run: synth 200 + 50 scenes, train 12 epochs, infer held-out."""
    root = tmp_path_factory.mktemp("acceptance")
    train_dir, held_dir, run_dir = root / "train", root / "held", root / "run"
    assert main(["synth", "--out", str(train_dir), "--scenes", str(TRAIN_SCENES),
                 "--seed", str(TRAIN_SEED)]) == EXIT_OK
    assert main(["synth", "--out", str(held_dir), "--scenes", str(HELD_SCENES),
                 "--seed", str(HELD_SEED)]) == EXIT_OK
    t0 = time.time()
    assert main(["train", "--data", str(train_dir / "dataset.bin"),
                 "--out", str(run_dir)]) == EXIT_OK
    train_seconds = time.time() - t0

    from anchorgen.predictor import bank_from_tensors

    scenes = read_dataset(held_dir / "dataset.bin")
    tensors, meta = read_tensors(run_dir / "weights.bin")
    bank = bank_from_tensors(tensors, meta)
    results = {
        lvl: [generate(s.pyramid, bank, GenConfig(lowest_level=lvl)) for s in scenes]
        for lvl in (3, 4, 5)
    }
    return {
        "root": root,
        "scenes": scenes,
        "specs": [s.spec for s in scenes],
        "bank": bank,
        "results": results,
        "train_seconds": train_seconds,
        "weights": run_dir / "weights.bin",
        "dataset": held_dir / "dataset.bin",
    }


def test_criterion_1_weighting_constants():
    cfg = WeightConfig()
    assert norm_weight(1.0, 1.0) == 1.0
    lo_pos = pos_weight(0.0, 1.0, cfg)
    assert 0.191 <= lo_pos <= 0.192
    hi_neg = neg_weight(1.0, 0.0, cfg)
    assert 0.817 <= hi_neg <= 0.818
    lo_neg = neg_weight(0.0, 1.0, cfg)
    assert 0.009 <= lo_neg <= 0.010
    _ok(1, f"pos in [{lo_pos:.4f}, 1.0], neg in [{lo_neg:.4f}, {hi_neg:.4f}]")


def test_criterion_2_matching_oracle():
    gen = SplitMix(4242)
    start = time.time()
    for trial in range(200):
        rows = 1 + gen.randint(6)
        cols = 1 + gen.randint(6)
        # Integer-valued costs make exact total equality meaningful.
        cost = np.array(
            [[float(gen.randint(1001) - 500) for _ in range(cols)] for _ in range(rows)],
            dtype=np.float64,
        )
        pairs = hungarian(cost).pairs
        assert len(pairs) == min(rows, cols)
        total = sum(cost[r, c] for r, c in pairs)
        if rows <= cols:
            best = min(
                sum(cost[r, perm[r]] for r in range(rows))
                for perm in itertools.permutations(range(cols), rows)
            )
        else:
            best = min(
                sum(cost[perm[c], c] for c in range(cols))
                for perm in itertools.permutations(range(rows), cols)
            )
        assert total == best, f"trial {trial}: {total} != {best}"
    elapsed = time.time() - start
    assert elapsed < 5.0
    _ok(2, f"200 matrices, exact equality, {elapsed:.2f}s")


def _rel_err(fd: float, an: float) -> float:
    return abs(fd - an) / max(abs(fd), abs(an), 1e-6)


def _random_box(gen: SplitMix) -> Box:
    return Box(
        0.2 + 0.6 * gen.uniform(),
        0.2 + 0.6 * gen.uniform(),
        0.05 + 0.5 * gen.uniform(),
        0.05 + 0.5 * gen.uniform(),
    )


def test_criterion_3_gradient_suite():
    start = time.time()
    gen = SplitMix(515)
    h = 1e-6

    probes = 0
    for _ in range(50):
        pred, gt = _random_box(gen), _random_box(gen)
        _, grad = giou_loss_and_grad(pred, gt)
        arr = pred.to_array()
        for i in range(4):
            shifted = lambda d: Box(*(arr + np.eye(4)[i] * d))
            fd = (giou_loss_and_grad(shifted(h), gt)[0]
                  - giou_loss_and_grad(shifted(-h), gt)[0]) / (2 * h)
            assert _rel_err(fd, grad[i]) < 1e-3
            probes += 1
    assert probes >= 50

    probes = 0
    for _ in range(50):
        pred, gt = _random_box(gen), _random_box(gen)
        w_pos = 0.1 + 0.9 * gen.uniform()
        _, grad = box_loss(pred, gt, w_pos)
        arr = pred.to_array()
        for i in range(4):
            shifted = lambda d: Box(*(arr + np.eye(4)[i] * d))
            fd = (box_loss(shifted(h), gt, w_pos)[0]
                  - box_loss(shifted(-h), gt, w_pos)[0]) / (2 * h)
            assert _rel_err(fd, grad[i]) < 1e-3
            probes += 1
    assert probes >= 50

    def sig(x: float) -> float:
        return 1.0 / (1.0 + math.exp(-x))

    probes = 0
    for _ in range(50):
        logit = -3.0 + 6.0 * gen.uniform()
        wp, wn = 0.3 + 0.7 * gen.uniform(), gen.uniform()
        _, grad = cls_loss_positive(sig(logit), wp, wn)
        fd = (cls_loss_positive(sig(logit + h), wp, wn)[0]
              - cls_loss_positive(sig(logit - h), wp, wn)[0]) / (2 * h)
        assert _rel_err(fd, grad) < 1e-3
        probes += 1
    assert probes >= 50

    probes = 0
    for _ in range(50):
        logit = -3.0 + 6.0 * gen.uniform()
        _, grad = cls_loss_negative(sig(logit))
        fd = (cls_loss_negative(sig(logit + h))[0]
              - cls_loss_negative(sig(logit - h))[0]) / (2 * h)
        assert _rel_err(fd, grad) < 1e-3
        probes += 1
    assert probes >= 50

    # 32-bit-representable parameters, evaluated in f64 so central
    # differences resolve at the 1e-3 gate (the forward follows the
    # parameter dtype).
    p32 = init_params(seed=606, in_dim=3 * 5 * 5, hidden=(24,), k=4)
    params = init_params(seed=606, in_dim=3 * 5 * 5, hidden=(24,), k=4)
    params.pos_embed = p32.pos_embed.astype(np.float64)
    params.weights = [w.astype(np.float64) for w in p32.weights]
    params.biases = [b.astype(np.float64) for b in p32.biases]
    values = (SplitMix(707).uniforms(3 * 5 * 5).reshape(3, 5, 5) - 0.5).astype(np.float32)
    patch = Patch(
        level=4, size=5, origin=(0, 0), footprint=Box(0.5, 0.5, 1.0, 1.0),
        extent=1.0, source_kind=KIND_RANDOM, values=values,
    )
    grad_out = (SplitMix(808).uniforms(4 * 5).reshape(4, 5) - 0.5)

    def scalar() -> float:
        _, cache = predict(params, patch)
        return float((cache.mapped[:, :4] * grad_out[:, :4]).sum()
                     + (cache.raw[:, 4] * grad_out[:, 4]).sum())

    _, cache = predict(params, patch)
    grads, _ = predict_backward(params, cache, grad_out)
    groups = [(params.pos_embed, grads.pos_embed)]
    groups += list(zip(params.weights, grads.weights))
    groups += list(zip(params.biases, grads.biases))
    probes = 0
    pick = SplitMix(909)
    for tensor, grad in groups:
        flat = tensor.reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        for _ in range(12):
            idx = pick.randint(flat.shape[0])
            step = 1e-6 * max(1.0, abs(float(flat[idx])))
            orig = float(flat[idx])
            flat[idx] = orig + step
            up = scalar()
            flat[idx] = orig - step
            down = scalar()
            flat[idx] = orig
            fd = (up - down) / (2 * step)
            if abs(fd) < 1e-7 and abs(gflat[idx]) < 1e-7:
                probes += 1
                continue
            assert _rel_err(fd, float(gflat[idx])) < 1e-3
            probes += 1
    assert probes >= 50
    elapsed = time.time() - start
    assert elapsed < 30.0
    _ok(3, f"giou/box/cls/mlp families, rel err < 1e-3, {elapsed:.1f}s")


def test_criterion_4_zero_parameter_trace(harness):
    bank = zero_bank(init_bank(seed=1))
    result = generate(harness["scenes"][0].pyramid, bank, GenConfig())
    pool = result.trace.pool
    assert len(pool) == 250
    assert all(a.score == 0.5 for a in pool)
    assert result.trace.levels_used == [6, 5]
    assert result.trace.deepest_probe_level == 5
    assert result.trace.selected_counts.get(4, 0) < 3
    assert result.trace.valid_count == 200
    assert int(result.valid.sum()) == 200
    _ok(4, "250 fixed anchors at 0.5, early stop before P4, clamped to 200")


def _ineligible_fixed_bits(results) -> list[bytes]:
    out = []
    for r in results:
        for a in r.trace.pool:
            if a.origin_level in (5, 6) and not a.probe_eligible:
                out.append(struct.pack(
                    "<ii5d", a.origin_level, a.origin_patch,
                    a.box.cx, a.box.cy, a.box.w, a.box.h, a.score,
                ))
    return out


def test_criterion_5_efficient_inference_invariance(harness):
    start = time.time()
    sets = {lvl: _ineligible_fixed_bits(harness["results"][lvl]) for lvl in (3, 4, 5)}
    assert len(sets[5]) > 0
    assert sets[3] == sets[4] == sets[5]
    elapsed = time.time() - start
    assert elapsed < 10.0
    _ok(5, f"{len(sets[5])} ineligible anchors bitwise stable across floors 3/4/5")


def test_criterion_6_synthetic_end_to_end(harness):
    assert harness["train_seconds"] < TRAIN_BUDGET_SECONDS
    specs = harness["specs"]
    live = {
        lvl: [[a for a, ok in zip(r.anchors, r.valid) if ok] for r in harness["results"][lvl]]
        for lvl in (3, 5)
    }
    rep3 = average_recall(live[3], specs, budget=200)
    rep5 = average_recall(live[5], specs, budget=200)
    assert rep3.ar50 >= 0.80
    gap = rep3.per_class["small"] - rep5.per_class.get("small", 0.0)
    assert gap >= 0.10
    rho = count_correlation([r.trace for r in harness["results"][3]], specs)
    assert rho > 0.5
    _ok(6, f"ar50={rep3.ar50:.3f}, small gap={gap:.3f}, spearman={rho:.3f}, "
           f"train {harness['train_seconds']:.0f}s")


def test_criterion_7_ablation_monotonicity(harness):
    start = time.time()
    scenes, bank = harness["scenes"], harness["bank"]

    rows = ablation_sweep(scenes, bank, [GenConfig(eta_l=v) for v in ETA_L_SWEEP])
    counts_l = [row.mean_patches_l4 + row.mean_patches_l3 for row in rows]
    assert all(b >= a - 1e-12 for a, b in zip(counts_l, counts_l[1:]))

    rows = ablation_sweep(scenes, bank, [GenConfig(eta_iou=v) for v in ETA_IOU_SWEEP])
    counts_iou = [row.mean_patches_l4 + row.mean_patches_l3 for row in rows]
    assert all(b <= a + 1e-12 for a, b in zip(counts_iou, counts_iou[1:]))

    elapsed = time.time() - start
    assert elapsed < 60.0
    _ok(7, f"eta_l {counts_l[0]:.1f}->{counts_l[-1]:.1f} up, "
           f"eta_iou {counts_iou[0]:.1f}->{counts_iou[-1]:.1f} down, {elapsed:.1f}s")


def test_criterion_8_sparsity_accounting(harness):
    start = time.time()
    tallies = [flop_count(r.trace) for r in harness["results"][3]]
    sparse = np.mean([t.predictor + t.compress + t.interp for t in tallies])
    dense = np.mean([t.dense_baseline for t in tallies])
    assert sparse <= dense / 5.0
    predictor = np.mean([t.predictor for t in tallies])
    assert 1e7 <= predictor <= 1e8
    elapsed = time.time() - start
    assert elapsed < 10.0
    _ok(8, f"sparse/dense = {sparse / dense:.3f}, predictor {predictor:.2e} flops/image")


def test_criterion_9_determinism_and_persistence(tmp_path):
    scale = ["--set", "train.epochs=2"]
    data = tmp_path / "data"
    assert main(["synth", "--out", str(data), "--scenes", "20", "--seed", "3"]) == EXIT_OK
    data_again = tmp_path / "data2"
    assert main(["synth", "--out", str(data_again), "--scenes", "20", "--seed", "3"]) == EXIT_OK
    blob = (data / "dataset.bin").read_bytes()
    assert blob == (data_again / "dataset.bin").read_bytes()

    artifacts = {}
    for tag in ("a", "b"):
        run = tmp_path / f"run_{tag}"
        infer = tmp_path / f"infer_{tag}"
        ev = tmp_path / f"eval_{tag}"
        assert main(["train", "--data", str(data / "dataset.bin"),
                     "--out", str(run), *scale]) == EXIT_OK
        assert main(["infer", "--data", str(data / "dataset.bin"),
                     "--weights", str(run / "weights.bin"), "--out", str(infer)]) == EXIT_OK
        assert main(["eval", "--data", str(data / "dataset.bin"),
                     "--weights", str(run / "weights.bin"), "--out", str(ev)]) == EXIT_OK
        artifacts[tag] = {
            "weights": (run / "weights.bin").read_bytes(),
            "anchors": (infer / "anchors.jsonl").read_bytes(),
            "traces": (infer / "traces.jsonl").read_bytes(),
            "recall": (ev / "recall.json").read_bytes(),
        }
    assert artifacts["a"] == artifacts["b"]

    tensors, meta = read_tensors(tmp_path / "run_a" / "weights.bin")
    write_tensors(tmp_path / "rt.bin", tensors, meta)
    assert (tmp_path / "rt.bin").read_bytes() == artifacts["a"]["weights"]
    _ok(9, "train/infer/eval reruns and file round trips byte-identical")
