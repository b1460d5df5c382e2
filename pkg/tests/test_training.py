"""Tests for the optimizer, clipping, and the training loop."""

import math

import numpy as np
import pytest
from conftest import fresh_tiny_bank, small_gen_cfg

from anchorgen.training import (
    HISTORY_COLUMNS,
    AdamW,
    NumericError,
    TrainConfig,
    _epoch_order,
    clip_gradients,
    history_csv,
    read_checkpoint,
    scene_gradients,
    train,
    training_forward,
    write_checkpoint,
)


def _adamw_reference(p0, grads, lr, betas=(0.9, 0.999), eps=1e-8, wd=1e-4):
    """Float64 re-derivation of the decoupled-decay update."""
    p = p0.astype(np.float64).copy()
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        g = g.astype(np.float64)
        m = betas[0] * m + (1 - betas[0]) * g
        v = betas[1] * v + (1 - betas[1]) * g * g
        mh = m / (1 - betas[0] ** t)
        vh = v / (1 - betas[1] ** t)
        p -= lr * (mh / (np.sqrt(vh) + eps) + wd * p)
    return p


class TestTrainConfig:
    def test_drop_epochs(self):
        assert TrainConfig(epochs=12).drop_epochs() == (8, 11)
        assert TrainConfig(epochs=300).drop_epochs() == (200, 275)
        assert TrainConfig(epochs=12, lr_drops=(3, 5)).drop_epochs() == (3, 5)

    def test_lr_schedule(self):
        cfg = TrainConfig(epochs=12, lr=2e-4)
        assert cfg.lr_at(1) == 2e-4
        assert cfg.lr_at(7) == 2e-4
        assert cfg.lr_at(8) == pytest.approx(2e-5)
        assert cfg.lr_at(10) == pytest.approx(2e-5)
        assert cfg.lr_at(11) == pytest.approx(2e-6)
        assert cfg.lr_at(12) == pytest.approx(2e-6)

    def test_validation(self):
        with pytest.raises(ValueError, match="epochs"):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError, match="lr"):
            TrainConfig(lr=0.0)
        with pytest.raises(ValueError, match="steps_per_epoch"):
            TrainConfig(steps_per_epoch=0)
        with pytest.raises(ValueError, match="n_tp"):
            TrainConfig(n_tp=0)


class TestAdamW:
    def test_first_step_hand_value(self):
        cfg = TrainConfig(lr=0.01)
        opt = AdamW(["a"], {"a": (2,)}, cfg)
        p = np.array([1.0, -2.0], dtype=np.float32)
        g = np.array([3.0, -2.0], dtype=np.float32)
        opt.apply({"a": p}, {"a": g}, lr=0.01)
        # Bias correction cancels on step 1: update = g / (|g| + eps).
        np.testing.assert_allclose(p, [1.0 - 0.01 * 1.0001, -2.0 + 0.01 * 1.0002], rtol=1e-5)
        assert opt.step == 1

    def test_multi_step_matches_float64_reference(self):
        cfg = TrainConfig(lr=0.02)
        opt = AdamW(["a"], {"a": (3,)}, cfg)
        p = np.array([0.5, -1.5, 2.0], dtype=np.float32)
        rng = np.random.default_rng(5)
        grads = [rng.normal(size=3).astype(np.float32) for _ in range(4)]
        for g in grads:
            opt.apply({"a": p}, {"a": g}, lr=0.02)
        np.testing.assert_allclose(p, _adamw_reference(np.array([0.5, -1.5, 2.0]), grads, 0.02), rtol=2e-5)

    def test_zero_lr_freezes_parameters(self):
        opt = AdamW(["a"], {"a": (2,)}, TrainConfig())
        p = np.array([1.0, -2.0], dtype=np.float32)
        before = p.copy()
        opt.apply({"a": p}, {"a": np.array([5.0, 5.0], dtype=np.float32)}, lr=0.0)
        np.testing.assert_array_equal(p, before)

    def test_decay_is_decoupled(self):
        # Zero gradient still shrinks weights by lr * wd exactly.
        cfg = TrainConfig(lr=0.1, weight_decay=0.01)
        opt = AdamW(["a"], {"a": (2,)}, cfg)
        p = np.array([4.0, -8.0], dtype=np.float32)
        opt.apply({"a": p}, {"a": np.zeros(2, dtype=np.float32)}, lr=0.1)
        np.testing.assert_allclose(p, [4.0 * (1 - 0.001), -8.0 * (1 - 0.001)], rtol=1e-6)

    def test_for_bank_covers_every_tensor(self):
        bank = fresh_tiny_bank()
        opt = AdamW.for_bank(bank, TrainConfig())
        tensors = bank.named_tensors()
        assert set(opt.m) == set(tensors)
        for name, t in tensors.items():
            assert opt.m[name].shape == t.shape
            assert opt.v[name].shape == t.shape


class TestClip:
    def test_rescales_to_budget(self):
        grads = {"a": np.array([3.0, 4.0], dtype=np.float32)}
        norm = clip_gradients(grads, 1.0)
        assert norm == pytest.approx(5.0)
        np.testing.assert_allclose(grads["a"], [0.6, 0.8], rtol=1e-6)

    def test_under_budget_untouched(self):
        g = np.array([0.3, 0.4], dtype=np.float32)
        grads = {"a": g.copy()}
        norm = clip_gradients(grads, 1.0)
        assert norm == pytest.approx(0.5)
        np.testing.assert_array_equal(grads["a"], g)

    def test_global_norm_spans_tensors(self):
        grads = {
            "a": np.full(4, 2.0, dtype=np.float32),
            "b": np.full(9, 2.0, dtype=np.float32),
        }
        norm = clip_gradients(grads, 2.0)
        assert norm == pytest.approx(math.sqrt(13 * 4.0))
        total = sum(float(np.dot(g.ravel(), g.ravel())) for g in grads.values())
        assert math.sqrt(total) == pytest.approx(2.0, rel=1e-6)

    def test_non_finite_raises(self):
        with pytest.raises(NumericError):
            clip_gradients({"a": np.array([np.inf], dtype=np.float32)}, 1.0)
        with pytest.raises(NumericError):
            clip_gradients({"a": np.array([np.nan], dtype=np.float32)}, 1.0)


class TestEpochOrder:
    def test_full_pass_is_a_permutation(self):
        order = _epoch_order(0, 1, 8, 8)
        assert sorted(order) == list(range(8))

    def test_truncation_and_chaining(self):
        assert len(_epoch_order(0, 1, 8, 3)) == 3
        long = _epoch_order(0, 1, 4, 10)
        assert len(long) == 10
        assert sorted(long[:4]) == list(range(4))
        assert sorted(long[4:8]) == list(range(4))

    def test_varies_by_epoch_and_seed(self):
        assert _epoch_order(0, 1, 16, 16) != _epoch_order(0, 2, 16, 16)
        assert _epoch_order(0, 1, 16, 16) != _epoch_order(1, 1, 16, 16)
        assert _epoch_order(3, 5, 16, 16) == _epoch_order(3, 5, 16, 16)


class TestSceneGradients:
    def test_forward_exposes_compressed_maps(self, tiny_scenes, tiny_bank):
        gen_cfg = small_gen_cfg()
        result, maps = training_forward(tiny_bank, tiny_scenes[0].pyramid, gen_cfg)
        assert set(maps) == {3, 4, 5}
        assert maps[5].values.shape[1:] == (gen_cfg.interp_size, gen_cfg.interp_size)
        assert maps[4].values.shape == (4, 16, 16)
        assert maps[3].values.shape == (4, 32, 32)
        assert result.trace.padded_len == gen_cfg.count_range[1]

    def test_gradients_cover_bank_and_are_finite(self, tiny_scenes):
        bank = fresh_tiny_bank()
        breakdown, grads = scene_gradients(bank, tiny_scenes[0], TrainConfig(), small_gen_cfg(), step_seed=7)
        assert set(grads) == set(bank.named_tensors())
        assert math.isfinite(breakdown.total)
        assert breakdown.total > 0.0
        for name, g in grads.items():
            assert np.all(np.isfinite(g)), name
        assert float(np.abs(grads["proj.weight"]).sum()) > 0.0
        assert float(np.abs(grads["p5.w0"]).sum()) > 0.0

    def test_saturated_scores_stay_finite(self, tiny_scenes):
        # Score clamping keeps log terms finite even at sigmoid(1000).
        bank = fresh_tiny_bank()
        for params in (bank.p5, bank.p6, bank.adaptive):
            params.biases[-1][4::5] = 1000.0
        breakdown, grads = scene_gradients(bank, tiny_scenes[0], TrainConfig(), small_gen_cfg(), step_seed=7)
        assert math.isfinite(breakdown.total)
        for name, g in grads.items():
            assert np.all(np.isfinite(g)), name


class TestTrainLoop:
    def test_two_runs_are_bitwise_identical(self, tiny_scenes):
        cfg = TrainConfig(epochs=2, seed=3)
        gen_cfg = small_gen_cfg()
        banks = []
        histories = []
        for _ in range(2):
            bank, history = train(list(tiny_scenes), cfg, fresh_tiny_bank(), gen_cfg)
            banks.append(bank)
            histories.append(history)
        assert histories[0] == histories[1]
        a, b = banks[0].named_tensors(), banks[1].named_tensors()
        for name in a:
            np.testing.assert_array_equal(a[name], b[name], err_msg=name)

    def test_resume_matches_uninterrupted_run(self, tiny_scenes, tmp_path):
        cfg = TrainConfig(epochs=4, seed=9, checkpoint_every=2)
        gen_cfg = small_gen_cfg()
        straight, _ = train(list(tiny_scenes), cfg, fresh_tiny_bank(), gen_cfg)

        half_cfg = TrainConfig(epochs=2, seed=9, lr_drops=cfg.drop_epochs())
        half_bank = fresh_tiny_bank()
        opt = AdamW.for_bank(half_bank, half_cfg)
        # Reuse the loop for epochs 1..2, then checkpoint and resume 3..4.
        train(list(tiny_scenes), half_cfg, half_bank, gen_cfg, opt=opt)
        ckpt = tmp_path / "ckpt.bin"
        write_checkpoint(ckpt, half_bank, opt, epoch=2)

        resumed_bank, resumed_opt, epoch = read_checkpoint(ckpt, cfg)
        assert epoch == 2
        train(list(tiny_scenes), cfg, resumed_bank, gen_cfg, opt=resumed_opt, start_epoch=3)

        a, b = straight.named_tensors(), resumed_bank.named_tensors()
        for name in a:
            np.testing.assert_array_equal(a[name], b[name], err_msg=name)

    def test_checkpoint_round_trip_preserves_moments(self, tiny_scenes, tmp_path):
        cfg = TrainConfig(epochs=1, seed=2)
        bank = fresh_tiny_bank()
        opt = AdamW.for_bank(bank, cfg)
        train(list(tiny_scenes), cfg, bank, small_gen_cfg(), opt=opt)
        path = tmp_path / "c.bin"
        write_checkpoint(path, bank, opt, epoch=1)
        bank2, opt2, _ = read_checkpoint(path, cfg)
        assert opt2.step == opt.step
        for name in opt.m:
            np.testing.assert_array_equal(opt2.m[name], opt.m[name])
            np.testing.assert_array_equal(opt2.v[name], opt.v[name])
        for name, t in bank.named_tensors().items():
            np.testing.assert_array_equal(bank2.named_tensors()[name], t)

    def test_wrong_kind_checkpoint_rejected(self, tmp_path):
        from anchorgen.tensorio import write_tensors

        path = tmp_path / "bad.bin"
        write_tensors(path, {"x": np.zeros(1, dtype=np.float32)}, {"kind": "other"})
        with pytest.raises(ValueError, match="checkpoint"):
            read_checkpoint(path, TrainConfig())

    def test_loss_trends_down(self, tiny_scenes):
        cfg = TrainConfig(epochs=6, seed=1, lr=1e-3)
        _, history = train(list(tiny_scenes), cfg, fresh_tiny_bank(), small_gen_cfg())
        assert history[-1]["total"] < history[0]["total"]

    def test_grad_accum_is_deterministic(self, tiny_scenes):
        cfg = TrainConfig(epochs=1, seed=4, grad_accum=2)
        runs = []
        for _ in range(2):
            bank, history = train(list(tiny_scenes), cfg, fresh_tiny_bank(), small_gen_cfg())
            runs.append((bank.named_tensors(), history))
        assert runs[0][1] == runs[1][1]
        for name in runs[0][0]:
            np.testing.assert_array_equal(runs[0][0][name], runs[1][0][name])

    def test_outputs_written(self, tiny_scenes, tmp_path):
        cfg = TrainConfig(epochs=2, seed=6, checkpoint_every=1)
        train(list(tiny_scenes), cfg, fresh_tiny_bank(), small_gen_cfg(), out_dir=tmp_path)
        assert (tmp_path / "weights.bin").exists()
        assert (tmp_path / "history.csv").exists()
        assert (tmp_path / "checkpoint_ep001.bin").exists()
        assert (tmp_path / "checkpoint_ep002.bin").exists()
        text = (tmp_path / "history.csv").read_text()
        assert text.splitlines()[0] == ",".join(HISTORY_COLUMNS)
        assert len(text.splitlines()) == 3

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            train([], TrainConfig(), fresh_tiny_bank(), small_gen_cfg())


class TestHistoryCsv:
    def test_floats_round_trip_via_repr(self):
        row = {c: 0 for c in HISTORY_COLUMNS}
        row.update(epoch=1, lr=2e-4, steps=10, total=0.1 + 0.2, matched=5)
        text = history_csv([row])
        value = text.splitlines()[1].split(",")[HISTORY_COLUMNS.index("total")]
        assert float(value) == 0.1 + 0.2
