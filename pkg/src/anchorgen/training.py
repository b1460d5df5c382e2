"""Training loop for the predictor bank and channel projection.

One step processes one scene: run the generator forward (recording its
patches), assemble the per-level training patch set, and for every patch
predict, match, and differentiate the anchor loss. Patch-value gradients
are routed back through the crop / flip / pooling / interpolation
adjoints into the shared channel projection, so the projection trains
jointly with the three predictor heads. Updates use decoupled-decay
adaptive moments with a global-norm gradient clip; the learning rate
drops by 10x at two-thirds and eleven-twelfths of the schedule.

Everything derives from the config seed: epoch shuffles, random training
patches, and therefore the final weights are bitwise reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .generator import GenConfig, GenResult, generate
from .losses import LossBreakdown, WeightConfig, anchor_loss
from .matching import Assignment, build_training_patches, hungarian, match_cost, targets_for_patch
from .predictor import (
    PredictorBank,
    bank_from_tensors,
    bank_meta,
    predict,
    predict_backward,
    save_params,
)
from .pyramid import (
    FeatureMap,
    FeaturePyramid,
    compress_channels,
    compress_channels_grads,
    downsample2_adjoint,
    interpolate_adjoint,
    interpolate_bilinear,
    scatter_patch_grad,
    unflip_grad,
)
from .rng import SplitMix, derive_seed
from .synthetic import Scene
from .tensorio import read_tensors, write_tensors


class NumericError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    """Optimization schedule and step protocol."""

    epochs: int = 12
    steps_per_epoch: int | None = None  # None: one pass over the dataset
    lr: float = 2e-4
    lr_drop_factor: float = 0.1
    lr_drops: tuple[int, int] | None = None  # None: derived from epochs
    seed: int = 0
    n_tp: int = 4
    clip_norm: float = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    grad_accum: int = 1
    checkpoint_every: int = 0  # epochs; 0 disables intermediate checkpoints
    lambda_anchor: float = 1.0
    weights: WeightConfig = field(default_factory=WeightConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ValueError(f"steps_per_epoch must be >= 1, got {self.steps_per_epoch}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.n_tp < 1 or self.grad_accum < 1:
            raise ValueError("n_tp and grad_accum must be >= 1")

    def drop_epochs(self) -> tuple[int, int]:
        if self.lr_drops is not None:
            return self.lr_drops
        return (math.ceil(2 * self.epochs / 3), math.ceil(11 * self.epochs / 12))

    def lr_at(self, epoch: int) -> float:
        """Learning rate during 1-based ``epoch``."""
        drops = sum(1 for d in self.drop_epochs() if epoch >= d)
        return self.lr * self.lr_drop_factor**drops


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay.

    State is keyed by tensor name; updates apply in sorted-name order in
    float32, so a (state, gradients, lr) triple maps to one exact result.
    """

    def __init__(self, names: list[str], shapes: dict[str, tuple[int, ...]], cfg: TrainConfig):
        self.betas = cfg.betas
        self.eps = cfg.eps
        self.weight_decay = cfg.weight_decay
        self.step = 0
        self.m = {n: np.zeros(shapes[n], dtype=np.float32) for n in names}
        self.v = {n: np.zeros(shapes[n], dtype=np.float32) for n in names}

    @classmethod
    def for_bank(cls, bank: PredictorBank, cfg: TrainConfig) -> "AdamW":
        tensors = bank.named_tensors()
        return cls(sorted(tensors), {n: t.shape for n, t in tensors.items()}, cfg)

    def apply(self, tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.step += 1
        b1, b2 = self.betas
        c1 = np.float32(1.0 - b1**self.step)
        c2 = np.float32(1.0 - b2**self.step)
        for name in sorted(tensors):
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= np.float32(b1)
            m += np.float32(1.0 - b1) * g
            v *= np.float32(b2)
            v += np.float32(1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + np.float32(self.eps))
            p = tensors[name]
            p -= np.float32(lr) * (update + np.float32(self.weight_decay) * p)


def clip_gradients(grads: dict[str, np.ndarray], clip_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most ``clip_norm``.

    Returns the pre-clip norm.

    Raises:
        NumericError: the norm is not finite.
    """
    sq = 0.0
    for name in sorted(grads):
        g = grads[name]
        sq += float(np.dot(g.ravel().astype(np.float64), g.ravel().astype(np.float64)))
    norm = math.sqrt(sq)
    if not math.isfinite(norm):
        raise NumericError(f"non-finite gradient norm {norm}")
    if norm > clip_norm and norm > 0.0:
        scale = np.float32(clip_norm / norm)
        for g in grads.values():
            g *= scale
    return norm


def zero_gradients(bank: PredictorBank) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(t) for name, t in bank.named_tensors().items()}


def training_forward(
    bank: PredictorBank, pyramid: FeaturePyramid, gen_cfg: GenConfig
) -> tuple[GenResult, dict[int, FeatureMap]]:
    """Generator forward plus the compressed maps training patches cut from.

    ``maps[5]`` is the interpolated compressed P5 (the quadrants' frame);
    lower levels are compressed at native resolution whether or not the
    probing loop reached them.
    """
    result = generate(pyramid, bank, gen_cfg)
    c5 = compress_channels(pyramid[5], bank.proj, bank.proj_bias)
    maps = {5: interpolate_bilinear(c5, gen_cfg.interp_size, gen_cfg.interp_size)}
    for level in (4, 3):
        if level in pyramid:
            maps[level] = compress_channels(pyramid[level], bank.proj, bank.proj_bias)
    return result, maps


def scene_gradients(
    bank: PredictorBank,
    scene: Scene,
    cfg: TrainConfig,
    gen_cfg: GenConfig,
    step_seed: int,
) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Loss and parameter gradients for one scene (no update applied)."""
    result, maps = training_forward(bank, scene.pyramid, gen_cfg)
    patches = build_training_patches(
        maps, result.trace.patches, scene.spec.boxes, bank.patch_size, cfg.n_tp, step_seed
    )
    grads = zero_gradients(bank)
    d_maps = {level: np.zeros_like(fm.values) for level, fm in maps.items()}
    total = LossBreakdown(0.0, 0.0, 0.0, 0.0, 0.0, 0)

    for patch in patches:
        params = bank.params_for(patch)
        anchors, cache = predict(params, patch)
        targets = targets_for_patch(patch, scene.spec.boxes)
        if len(targets):
            assignment = hungarian(match_cost(anchors, targets.boxes))
        else:
            assignment = Assignment(pairs=[], unmatched_anchors=list(range(len(anchors))), unmatched_gts=[])
        breakdown, grad_box, grad_logit = anchor_loss(
            anchors, targets, assignment, cfg.weights, cfg.lambda_anchor
        )
        total = total + breakdown
        grad_out = np.concatenate([grad_box, grad_logit[:, None]], axis=1)
        pgrads, d_patch = predict_backward(params, cache, grad_out)

        prefix = bank.prefix_for(params)
        grads[f"{prefix}.pos"] += pgrads.pos_embed
        for i in range(len(params.weights)):
            grads[f"{prefix}.w{i}"] += pgrads.weights[i]
            grads[f"{prefix}.b{i}"] += pgrads.biases[i]

        if patch.level == 6:
            d_maps[5] += downsample2_adjoint(unflip_grad(d_patch, patch.source_kind))
        else:
            scatter_patch_grad(d_maps[patch.level], patch, d_patch)

    d_c5 = interpolate_adjoint(d_maps[5], scene.pyramid[5].height, scene.pyramid[5].width)
    d_proj, d_bias = compress_channels_grads(scene.pyramid[5], d_c5)
    for level in (4, 3):
        if level in d_maps:
            dp, db = compress_channels_grads(scene.pyramid[level], d_maps[level])
            d_proj += dp
            d_bias += db
    grads["proj.weight"] += d_proj
    grads["proj.bias"] += d_bias

    if not math.isfinite(total.total):
        raise NumericError(f"non-finite loss on scene {scene.spec.scene_id}: {total}")
    return total, grads


def train_step(
    bank: PredictorBank,
    scene: Scene,
    cfg: TrainConfig,
    gen_cfg: GenConfig,
    opt: AdamW,
    lr: float,
    step_seed: int,
) -> LossBreakdown:
    """One scene forward/backward plus an in-place parameter update."""
    breakdown, grads = scene_gradients(bank, scene, cfg, gen_cfg, step_seed)
    clip_gradients(grads, cfg.clip_norm)
    opt.apply(bank.named_tensors(), grads, lr)
    return breakdown


def _epoch_order(seed: int, epoch: int, n_scenes: int, steps: int) -> list[int]:
    """Scene indices for one epoch: chained fresh shuffles, truncated."""
    order: list[int] = []
    chunk = 0
    while len(order) < steps:
        gen = SplitMix(derive_seed(seed, "epoch_order", epoch, chunk))
        order.extend(gen.shuffled(n_scenes))
        chunk += 1
    return order[:steps]


def write_checkpoint(path, bank: PredictorBank, opt: AdamW, epoch: int) -> None:
    """Bank tensors plus optimizer moments in one container."""
    tensors = {f"bank/{n}": t for n, t in bank.named_tensors().items()}
    for name, m in opt.m.items():
        tensors[f"opt.m/{name}"] = m
        tensors[f"opt.v/{name}"] = opt.v[name]
    meta = {"kind": "train_checkpoint", "epoch": epoch, "opt_step": opt.step, "bank": bank_meta(bank)}
    write_tensors(path, tensors, meta)


def read_checkpoint(path, cfg: TrainConfig) -> tuple[PredictorBank, AdamW, int]:
    """Inverse of :func:`write_checkpoint`; returns (bank, opt, epoch)."""
    tensors, meta = read_tensors(path)
    if meta.get("kind") != "train_checkpoint":
        raise ValueError(f"{path}: not a training checkpoint (kind={meta.get('kind')!r})")
    bank_tensors = {n[len("bank/") :]: t for n, t in tensors.items() if n.startswith("bank/")}
    bank = bank_from_tensors(bank_tensors, meta["bank"], context=str(path))
    opt = AdamW.for_bank(bank, cfg)
    opt.step = meta["opt_step"]
    for name in opt.m:
        opt.m[name] = tensors[f"opt.m/{name}"]
        opt.v[name] = tensors[f"opt.v/{name}"]
    return bank, opt, meta["epoch"]


HISTORY_COLUMNS = ["epoch", "lr", "steps", "l1", "giou", "cls_pos", "cls_neg", "total", "matched"]


def history_csv(history: list[dict]) -> str:
    lines = [",".join(HISTORY_COLUMNS)]
    for row in history:
        lines.append(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in HISTORY_COLUMNS))
    return "\n".join(lines) + "\n"


def train(
    scenes: list[Scene],
    cfg: TrainConfig,
    bank: PredictorBank,
    gen_cfg: GenConfig,
    out_dir=None,
    opt: AdamW | None = None,
    start_epoch: int = 1,
) -> tuple[PredictorBank, list[dict]]:
    """Run the epoch loop, mutating ``bank`` in place.

    Pass ``opt``/``start_epoch`` from :func:`read_checkpoint` to resume;
    the continuation is bitwise identical to an uninterrupted run because
    every random stream derives from (seed, epoch, step), not from
    consumed state.

    Returns:
        (bank, history): one history row per epoch with mean losses.
    """
    if not scenes:
        raise ValueError("cannot train on an empty dataset")
    opt = opt or AdamW.for_bank(bank, cfg)
    steps = cfg.steps_per_epoch or len(scenes)
    history: list[dict] = []

    for epoch in range(start_epoch, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        order = _epoch_order(cfg.seed, epoch, len(scenes), steps)
        epoch_total = LossBreakdown(0.0, 0.0, 0.0, 0.0, 0.0, 0)
        pending: dict[str, np.ndarray] | None = None
        pending_count = 0
        for si, scene_idx in enumerate(order):
            step_seed = derive_seed(cfg.seed, "step", epoch, si)
            if cfg.grad_accum == 1:
                breakdown = train_step(bank, scenes[scene_idx], cfg, gen_cfg, opt, lr, step_seed)
            else:
                breakdown, grads = scene_gradients(bank, scenes[scene_idx], cfg, gen_cfg, step_seed)
                if pending is None:
                    pending = grads
                else:
                    for name in pending:
                        pending[name] += grads[name]
                pending_count += 1
                if pending_count == cfg.grad_accum or si == len(order) - 1:
                    inv = np.float32(1.0 / pending_count)
                    for g in pending.values():
                        g *= inv
                    clip_gradients(pending, cfg.clip_norm)
                    opt.apply(bank.named_tensors(), pending, lr)
                    pending = None
                    pending_count = 0
            epoch_total = epoch_total + breakdown
        row = {
            "epoch": epoch,
            "lr": lr,
            "steps": steps,
            "l1": epoch_total.l1 / steps,
            "giou": epoch_total.giou / steps,
            "cls_pos": epoch_total.cls_pos / steps,
            "cls_neg": epoch_total.cls_neg / steps,
            "total": epoch_total.total / steps,
            "matched": epoch_total.matched,
        }
        history.append(row)
        if out_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            write_checkpoint(f"{out_dir}/checkpoint_ep{epoch:03d}.bin", bank, opt, epoch)

    if out_dir is not None:
        save_params(bank, f"{out_dir}/weights.bin")
        with open(f"{out_dir}/history.csv", "w", encoding="utf-8") as f:
            f.write(history_csv(history))
    return bank, history
