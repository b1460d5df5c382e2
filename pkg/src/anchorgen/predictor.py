"""Patch-to-anchors MLP predictor with exact manual backward.

A predictor flattens a (C, S, S) patch channel-major, adds a learnable
positional embedding, runs a ReLU MLP, and reshapes the final layer into
K rows of (cx, cy, w, h, score) logits. Sigmoids map each row to an
anchor: the center lands inside the patch's image footprint, width and
height are fractions of the full image, and the score is a confidence
in (0, 1).

`predict_backward` consumes upstream gradients as a (K, 5) array whose
first four columns are w.r.t. the mapped box fields and whose last column
is w.r.t. the raw score logit (losses differentiate the score through the
logit for numerical stability).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensorio
from .geometry import Box
from .pyramid import Patch
from .rng import SplitMix, derive_seed

SCORE_BIAS_INIT = math.log(0.02 / 0.98)  # logit(0.02), well below the keep gate
SIZE_BIAS_INIT = math.log(0.15 / 0.85)  # logit(0.15), near typical box sizes


@dataclass
class ScoredAnchor:
    """One predicted anchor plus its probing lifecycle flags.

    ``origin_level``/``origin_patch`` identify the patch that produced it.
    ``probe_eligible`` is the pure score/size gate (set by the generator,
    identically across inference modes); ``selected_for_probe`` marks
    anchors whose probe patch survived NMS and the per-level cap;
    ``replaced`` marks spawners dropped in correct-and-replace mode.
    """

    box: Box
    score: float
    origin_level: int
    origin_patch: int
    source_extent: float = 1.0
    probe_eligible: bool = False
    selected_for_probe: bool = False
    replaced: bool = False


@dataclass
class PredictorParams:
    """MLP parameters: y = W_n(...relu(W_0(x + pos_embed) + b_0)...) + b_n."""

    pos_embed: np.ndarray  # (D,)
    weights: list[np.ndarray]  # each (fan_out, fan_in)
    biases: list[np.ndarray]  # each (fan_out,)
    k: int  # anchors per patch; final fan_out == 5 * k

    def __post_init__(self):
        d = self.pos_embed.shape[0]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape[1] != d:
                raise ValueError(f"layer {i} expects fan-in {w.shape[1]}, got {d}")
            if b.shape[0] != w.shape[0]:
                raise ValueError(f"layer {i} bias {b.shape} vs weight {w.shape}")
            d = w.shape[0]
        if d != 5 * self.k:
            raise ValueError(f"final fan-out {d} != 5 * k = {5 * self.k}")

    @property
    def in_dim(self) -> int:
        return self.pos_embed.shape[0]


@dataclass
class ForwardCache:
    """Activations saved by :func:`predict` for the manual backward."""

    params: PredictorParams
    patch: Patch
    x0: np.ndarray  # post-embedding input
    pre_acts: list[np.ndarray]  # hidden-layer pre-activations
    acts: list[np.ndarray]  # hidden-layer post-ReLU activations
    raw: np.ndarray  # (K, 5) final-layer logits
    sig: np.ndarray  # (K, 5) sigmoid(raw)
    mapped: np.ndarray  # (K, 5) mapped (cx, cy, w, h, score)


@dataclass
class PredictorGrads:
    pos_embed: np.ndarray
    weights: list[np.ndarray]
    biases: list[np.ndarray]


@dataclass
class PredictorBank:
    """All trainable parameters of the generation pipeline.

    ``p5`` runs on interpolated-P5 quadrants, ``p6`` on the pooled
    full-image patch, ``adaptive`` is shared by every probing level.
    ``proj``/``proj_bias`` form the shared 1x1 channel compression.
    """

    p5: PredictorParams
    p6: PredictorParams
    adaptive: PredictorParams
    proj: np.ndarray  # (C_raw, C)
    proj_bias: np.ndarray  # (C,)
    patch_size: int
    channels: int
    hidden: tuple[int, ...] = (256, 256)

    def params_for(self, patch: Patch) -> PredictorParams:
        if patch.source_kind in ("fixed_p6", "flip_h", "flip_v", "flip_hv"):
            return self.p6
        if patch.source_kind == "fixed_quadrant":
            return self.p5
        return self.adaptive

    def prefix_for(self, params: PredictorParams) -> str:
        if params is self.p5:
            return "p5"
        if params is self.p6:
            return "p6"
        return "adaptive"

    def named_tensors(self) -> dict[str, np.ndarray]:
        """Live references to every trainable tensor, stable names."""
        out: dict[str, np.ndarray] = {"proj.weight": self.proj, "proj.bias": self.proj_bias}
        members = [("p5", self.p5), ("p6", self.p6), ("adaptive", self.adaptive)]
        seen: set[int] = set()
        for prefix, params in members:
            if id(params) in seen:  # shared p5/p6 variant
                continue
            seen.add(id(params))
            out[f"{prefix}.pos"] = params.pos_embed
            for i, (w, b) in enumerate(zip(params.weights, params.biases)):
                out[f"{prefix}.w{i}"] = w
                out[f"{prefix}.b{i}"] = b
        return out


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign to avoid overflow in exp for large |x|.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def predict(params: PredictorParams, patch: Patch, patch_id: int = 0) -> tuple[list[ScoredAnchor], ForwardCache]:
    """Run the MLP on one patch.

    Returns K anchors (centers inside ``patch.footprint``, w/h in [0, 1])
    and the cache consumed by :func:`predict_backward`. Arithmetic follows
    the parameter dtype (float32 in the pipeline).
    """
    flat = patch.values.ravel()
    if flat.shape[0] != params.in_dim:
        raise ValueError(f"patch dim {flat.shape[0]} != predictor fan-in {params.in_dim}")
    dtype = params.pos_embed.dtype
    x0 = flat.astype(dtype, copy=False) + params.pos_embed
    acts: list[np.ndarray] = []
    pre_acts: list[np.ndarray] = []
    a = x0
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        z = w @ a + b
        pre_acts.append(z)
        a = np.maximum(z, 0)
        acts.append(a)
    raw = (params.weights[-1] @ a + params.biases[-1]).reshape(params.k, 5)
    sig = sigmoid(raw)

    fx1, fy1, _, _ = patch.footprint.corners()
    fw = patch.footprint.w
    fh = patch.footprint.h
    mapped = np.empty_like(sig)
    mapped[:, 0] = fx1 + sig[:, 0] * fw
    mapped[:, 1] = fy1 + sig[:, 1] * fh
    mapped[:, 2] = sig[:, 2]
    mapped[:, 3] = sig[:, 3]
    mapped[:, 4] = sig[:, 4]

    anchors = [
        ScoredAnchor(
            box=Box(float(mapped[i, 0]), float(mapped[i, 1]), float(mapped[i, 2]), float(mapped[i, 3])),
            score=float(mapped[i, 4]),
            origin_level=patch.level,
            origin_patch=patch_id,
            source_extent=patch.extent,
        )
        for i in range(params.k)
    ]
    cache = ForwardCache(params, patch, x0, pre_acts, acts, raw, sig, mapped)
    return anchors, cache


def predict_backward(
    params: PredictorParams, cache: ForwardCache, grad_out: np.ndarray
) -> tuple[PredictorGrads, np.ndarray]:
    """Exact reverse-mode gradients for one patch.

    Args:
        grad_out: (K, 5); columns 0..3 are w.r.t. the mapped box fields
            (cx, cy, w, h), column 4 w.r.t. the raw score logit.

    Returns:
        (parameter grads, patch-value grads shaped like the patch).
    """
    if cache.params is not params:
        raise ValueError("cache was produced by different parameters")
    if grad_out.shape != (params.k, 5):
        raise ValueError(f"grad_out must be ({params.k}, 5), got {grad_out.shape}")
    dtype = cache.raw.dtype
    g = grad_out.astype(dtype, copy=False)
    sig = cache.sig
    dsig = sig * (1.0 - sig)
    fw = dtype.type(cache.patch.footprint.w)
    fh = dtype.type(cache.patch.footprint.h)

    d_raw = np.empty_like(cache.raw)
    d_raw[:, 0] = g[:, 0] * fw * dsig[:, 0]
    d_raw[:, 1] = g[:, 1] * fh * dsig[:, 1]
    d_raw[:, 2] = g[:, 2] * dsig[:, 2]
    d_raw[:, 3] = g[:, 3] * dsig[:, 3]
    d_raw[:, 4] = g[:, 4]  # upstream already in logit space

    delta = d_raw.ravel()
    d_weights: list[np.ndarray] = [None] * len(params.weights)  # type: ignore[list-item]
    d_biases: list[np.ndarray] = [None] * len(params.biases)  # type: ignore[list-item]
    inputs = [cache.x0] + cache.acts  # input to each layer
    d = delta
    for li in range(len(params.weights) - 1, -1, -1):
        d_weights[li] = np.outer(d, inputs[li])
        d_biases[li] = d.copy()
        d = params.weights[li].T @ d
        if li > 0:
            d = d * (cache.pre_acts[li - 1] > 0)
    d_patch = d.reshape(cache.patch.values.shape)
    return PredictorGrads(d.copy(), d_weights, d_biases), d_patch


def grid_centers(k: int) -> tuple[np.ndarray, np.ndarray]:
    """Patch-relative (cx, cy) positions tiling k anchors row-major.

    Rows = floor(sqrt(k)), columns = ceil(k / rows); cell centers in
    (0, 1) so their logits are finite.
    """
    rows = max(1, int(math.isqrt(k)))
    cols = -(-k // rows)
    idx = np.arange(k)
    cxs = ((idx % cols) + 0.5) / cols
    cys = ((idx // cols) + 0.5) / rows
    return cxs, cys


def init_params(seed: int, in_dim: int, hidden: tuple[int, ...], k: int) -> PredictorParams:
    """He-style uniform init: weights ~ U(-b, b), b = sqrt(6 / fan_in).

    Output-head biases are structured so a fresh bank is already a coarse
    anchor grid: centers tile the patch (via :func:`grid_centers`), widths
    and heights start at logit(0.15) (a plausible object scale), and
    scores start at ``SCORE_BIAS_INIT``, well below the final keep gate.
    Tiled centers make the per-patch matching winner consistent from the
    first steps, which keeps runner-up anchors unmatched and therefore
    quiet. Hidden biases and the positional embedding start at zero.
    """
    gen = SplitMix(seed)
    dims = [in_dim, *hidden, 5 * k]
    weights = []
    biases = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = math.sqrt(6.0 / fan_in)
        u = gen.uniforms(fan_out * fan_in)
        w = ((u * 2.0 - 1.0) * bound).astype(np.float32).reshape(fan_out, fan_in)
        weights.append(w)
        biases.append(np.zeros(fan_out, dtype=np.float32))
    cxs, cys = grid_centers(k)
    biases[-1][0::5] = np.log(cxs / (1.0 - cxs)).astype(np.float32)
    biases[-1][1::5] = np.log(cys / (1.0 - cys)).astype(np.float32)
    biases[-1][2::5] = np.float32(SIZE_BIAS_INIT)
    biases[-1][3::5] = np.float32(SIZE_BIAS_INIT)
    biases[-1][4::5] = np.float32(SCORE_BIAS_INIT)
    return PredictorParams(np.zeros(in_dim, dtype=np.float32), weights, biases, k)


def init_bank(
    seed: int,
    patch_size: int,
    raw_channels: int,
    channels: int,
    hidden: tuple[int, ...],
    k_fixed: int,
    k_adapt: int,
    share_p5_p6: bool = False,
) -> PredictorBank:
    """Fresh bank; every tensor derives from ``seed`` deterministically."""
    in_dim = channels * patch_size * patch_size
    p5 = init_params(derive_seed(seed, "p5"), in_dim, hidden, k_fixed)
    p6 = p5 if share_p5_p6 else init_params(derive_seed(seed, "p6"), in_dim, hidden, k_fixed)
    adaptive = init_params(derive_seed(seed, "adaptive"), in_dim, hidden, k_adapt)
    gen = SplitMix(derive_seed(seed, "proj"))
    bound = math.sqrt(6.0 / raw_channels)
    proj = ((gen.uniforms(raw_channels * channels) * 2.0 - 1.0) * bound).astype(np.float32)
    proj = proj.reshape(raw_channels, channels)
    return PredictorBank(
        p5=p5,
        p6=p6,
        adaptive=adaptive,
        proj=proj,
        proj_bias=np.zeros(channels, dtype=np.float32),
        patch_size=patch_size,
        channels=channels,
        hidden=tuple(hidden),
    )


def save_params(bank: PredictorBank, path) -> None:
    """Write the bank to the versioned tensor container (bit-exact)."""
    meta = {"kind": "predictor_bank", **bank_meta(bank)}
    tensorio.write_tensors(path, bank.named_tensors(), meta)


def bank_meta(bank: PredictorBank) -> dict:
    """Geometry metadata stored alongside bank tensors."""
    return {
        "patch_size": bank.patch_size,
        "channels": bank.channels,
        "hidden": list(bank.hidden),
        "k_fixed": bank.p5.k,
        "k_adapt": bank.adaptive.k,
        "share_p5_p6": bank.p6 is bank.p5,
        "layers": len(bank.p5.weights),
    }


def bank_from_tensors(tensors: dict[str, np.ndarray], meta: dict, context: str = "bank") -> PredictorBank:
    """Rebuild a bank from named tensors plus :func:`bank_meta` metadata.

    Raises:
        ValueError: a required tensor is missing.
    """

    def build(prefix: str, k: int) -> PredictorParams:
        n_layers = meta["layers"]
        try:
            pos = tensors[f"{prefix}.pos"]
            weights = [tensors[f"{prefix}.w{i}"] for i in range(n_layers)]
            biases = [tensors[f"{prefix}.b{i}"] for i in range(n_layers)]
        except KeyError as exc:
            raise ValueError(f"{context}: missing tensor {exc}") from exc
        return PredictorParams(pos, weights, biases, k)

    p5 = build("p5", meta["k_fixed"])
    p6 = p5 if meta.get("share_p5_p6") else build("p6", meta["k_fixed"])
    return PredictorBank(
        p5=p5,
        p6=p6,
        adaptive=build("adaptive", meta["k_adapt"]),
        proj=tensors["proj.weight"],
        proj_bias=tensors["proj.bias"],
        patch_size=meta["patch_size"],
        channels=meta["channels"],
        hidden=tuple(meta["hidden"]),
    )


def load_params(path) -> PredictorBank:
    """Read a bank written by :func:`save_params`.

    Raises tensorio errors on version/checksum/shape problems and
    ValueError when required tensors are missing.
    """
    tensors, meta = tensorio.read_tensors(path)
    if meta.get("kind") != "predictor_bank":
        raise ValueError(f"{path}: not a predictor bank (kind={meta.get('kind')!r})")
    return bank_from_tensors(tensors, meta, context=str(path))


def zero_bank(bank_like: PredictorBank) -> PredictorBank:
    """Same-shape bank with every tensor zeroed (diagnostic baseline)."""
    import copy

    clone = copy.deepcopy(bank_like)
    for arr in clone.named_tensors().values():
        arr[...] = 0.0
    return clone
