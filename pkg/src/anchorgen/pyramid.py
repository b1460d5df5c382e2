"""Feature pyramid containers and patch extraction.

A :class:`FeatureMap` stores one pyramid level as a (C, H, W) float32
array; level ``l`` nominally corresponds to stride ``2**l``. Patches are
square windows cut from a map, carrying the image-space footprint they
cover so downstream predictions can be mapped back to image coordinates.

The resampling ops (bilinear interpolation, 2x2 mean pooling, channel
compression, cropping) all come with linear adjoints used to route patch
gradients back into the trained channel projection.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import Box, DegenerateBoxError

# Patch provenance tags.
KIND_QUADRANT = "fixed_quadrant"
KIND_P6 = "fixed_p6"
KIND_PROBE = "probe"
KIND_GT = "gt"
KIND_RANDOM = "random"
KIND_FLIP_H = "flip_h"
KIND_FLIP_V = "flip_v"
KIND_FLIP_HV = "flip_hv"


@dataclass
class FeatureMap:
    """One pyramid level: ``values`` is (C, H, W) float32, all finite."""

    level: int
    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError(f"feature map must be (C, H, W), got {self.values.shape}")
        if self.values.dtype != np.float32:
            self.values = self.values.astype(np.float32)
        if not np.isfinite(self.values).all():
            raise ValueError("feature map contains non-finite values")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass
class FeaturePyramid:
    """Maps pyramid level -> FeatureMap."""

    levels: dict[int, FeatureMap]

    def __getitem__(self, level: int) -> FeatureMap:
        if level not in self.levels:
            raise KeyError(f"pyramid has no level {level} (has {sorted(self.levels)})")
        return self.levels[level]

    def __contains__(self, level: int) -> bool:
        return level in self.levels


@dataclass
class Patch:
    """Square window of a feature map.

    Attributes:
        level: pyramid level of the source map.
        size: window side length in cells.
        origin: (row, col) of the window's top-left cell in the source map;
            may be negative for windows clipped at a border.
        footprint: image-space box covered by the in-map part of the window,
            clipped to the unit square.
        extent: nominal (unclipped) image fraction the window spans,
            ``size / source map width`` (max over axes for non-square maps).
        source_kind: provenance tag, one of the KIND_* constants.
        values: (C, size, size) float32, zero outside the source map.
    """

    level: int
    size: int
    origin: tuple[int, int]
    footprint: Box
    extent: float
    source_kind: str
    values: np.ndarray


def interp_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) bilinear resampling matrix, half-cell-center aligned.

    Output sample ``j`` reads input position ``(j + 0.5) * n_in/n_out - 0.5``
    with border clamping; ``n_in == n_out`` yields the identity.
    """
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(src).astype(np.int64)
    t = src - i0
    lo = np.clip(i0, 0, n_in - 1)
    hi = np.clip(i0 + 1, 0, n_in - 1)
    w = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(w, (rows, lo), 1.0 - t)
    np.add.at(w, (rows, hi), t)
    return w.astype(np.float32)


def interpolate_bilinear(fm: FeatureMap, out_h: int, out_w: int) -> FeatureMap:
    """Resample to (out_h, out_w); preserves the level tag."""
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"bad target size ({out_h}, {out_w})")
    wy = interp_weights(fm.height, out_h)
    wx = interp_weights(fm.width, out_w)
    out = np.einsum("oi,cij,pj->cop", wy, fm.values, wx, optimize=True)
    return FeatureMap(level=fm.level, values=out.astype(np.float32))


def interpolate_adjoint(grad: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    """Adjoint of :func:`interpolate_bilinear`: (C, out_h, out_w) -> (C, in_h, in_w)."""
    wy = interp_weights(in_h, grad.shape[1])
    wx = interp_weights(in_w, grad.shape[2])
    return np.einsum("oi,cop,pj->cij", wy, grad, wx, optimize=True).astype(np.float32)


def downsample2(fm: FeatureMap) -> FeatureMap:
    """2x2 mean pooling; level tag increments by one."""
    c, h, w = fm.values.shape
    if h % 2 or w % 2:
        raise ValueError(f"downsample2 needs even dims, got ({h}, {w})")
    pooled = fm.values.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
    return FeatureMap(level=fm.level + 1, values=pooled.astype(np.float32))


def downsample2_adjoint(grad: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`downsample2`: spreads each cell's gradient / 4."""
    g = (grad * np.float32(0.25)).astype(np.float32)
    return np.repeat(np.repeat(g, 2, axis=1), 2, axis=2)


def compress_channels(fm: FeatureMap, proj: np.ndarray, bias: np.ndarray) -> FeatureMap:
    """1x1 channel projection: (C_in, H, W) -> (C_out, H, W).

    ``proj`` is (C_in, C_out); ``bias`` is (C_out,).
    """
    if proj.shape[0] != fm.channels:
        raise ValueError(f"projection expects {proj.shape[0]} channels, map has {fm.channels}")
    out = np.tensordot(proj.T.astype(np.float32), fm.values, axes=1)
    out += bias.astype(np.float32)[:, None, None]
    return FeatureMap(level=fm.level, values=out.astype(np.float32))


def compress_channels_grads(fm: FeatureMap, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Projection gradients from upstream (C_out, H, W) grads.

    Returns:
        (d_proj (C_in, C_out), d_bias (C_out,)) in float32.
    """
    d_proj = np.einsum("chw,ohw->co", fm.values, grad, optimize=True)
    d_bias = grad.sum(axis=(1, 2))
    return d_proj.astype(np.float32), d_bias.astype(np.float32)


def split_quadrants(fm: FeatureMap) -> list[Patch]:
    """Split a (C, 2S, 2S) map into four S x S quadrant patches.

    Order: top-left, top-right, bottom-left, bottom-right. Each footprint
    is the matching image quarter; extent is 0.5.
    """
    c, h, w = fm.values.shape
    if h != w or h % 2:
        raise ValueError(f"quadrant split needs a square even-sided map, got ({h}, {w})")
    s = h // 2
    patches = []
    for qi, (r0, c0) in enumerate(((0, 0), (0, s), (s, 0), (s, s))):
        x1 = c0 / w
        y1 = r0 / h
        footprint = Box.from_corners(x1, y1, x1 + 0.5, y1 + 0.5)
        patches.append(
            Patch(
                level=fm.level,
                size=s,
                origin=(r0, c0),
                footprint=footprint,
                extent=0.5,
                source_kind=KIND_QUADRANT,
                values=np.ascontiguousarray(fm.values[:, r0 : r0 + s, c0 : c0 + s]),
            )
        )
    return patches


def full_map_patch(fm: FeatureMap, source_kind: str = KIND_P6) -> Patch:
    """Wrap an entire map as one patch with a full-image footprint."""
    if fm.height != fm.width:
        raise ValueError(f"full-map patch needs a square map, got ({fm.height}, {fm.width})")
    return Patch(
        level=fm.level,
        size=fm.height,
        origin=(0, 0),
        footprint=Box(0.5, 0.5, 1.0, 1.0),
        extent=1.0,
        source_kind=source_kind,
        values=fm.values.copy(),
    )


def crop_patch(fm: FeatureMap, center: tuple[int, int], size: int, source_kind: str = KIND_PROBE) -> Patch:
    """Cut a ``size`` x ``size`` window centered on a cell, zero-padded.

    ``center`` is a (row, col) cell index; the window's top-left is
    ``center - size // 2``. The footprint covers only the in-map extent,
    clipped to the unit square.
    """
    c, h, w = fm.values.shape
    r0 = center[0] - size // 2
    c0 = center[1] - size // 2
    values = np.zeros((c, size, size), dtype=np.float32)
    rlo, rhi = max(r0, 0), min(r0 + size, h)
    clo, chi = max(c0, 0), min(c0 + size, w)
    if rlo < rhi and clo < chi:
        values[:, rlo - r0 : rhi - r0, clo - c0 : chi - c0] = fm.values[:, rlo:rhi, clo:chi]
    x1 = min(max(clo / w, 0.0), 1.0)
    x2 = min(max(chi / w, 0.0), 1.0)
    y1 = min(max(rlo / h, 0.0), 1.0)
    y2 = min(max(rhi / h, 0.0), 1.0)
    footprint = Box.from_corners(x1, y1, max(x1, x2), max(y1, y2))
    return Patch(
        level=fm.level,
        size=size,
        origin=(r0, c0),
        footprint=footprint,
        extent=max(size / h, size / w),
        source_kind=source_kind,
        values=values,
    )


def scatter_patch_grad(grad_map: np.ndarray, patch: Patch, grad_patch: np.ndarray) -> None:
    """Adjoint of :func:`crop_patch`: add in-map patch grads into ``grad_map``."""
    _, h, w = grad_map.shape
    r0, c0 = patch.origin
    size = patch.size
    rlo, rhi = max(r0, 0), min(r0 + size, h)
    clo, chi = max(c0, 0), min(c0 + size, w)
    if rlo < rhi and clo < chi:
        grad_map[:, rlo:rhi, clo:chi] += grad_patch[:, rlo - r0 : rhi - r0, clo - c0 : chi - c0]


_FLIP_KINDS = {"h": KIND_FLIP_H, "v": KIND_FLIP_V, "hv": KIND_FLIP_HV}


def flip_patch(patch: Patch, mode: str) -> Patch:
    """Mirror patch values horizontally ('h'), vertically ('v'), or both.

    The footprint is unchanged; training must flip target coordinates the
    same way (cx -> 1 - cx for 'h', cy -> 1 - cy for 'v').
    """
    if mode not in _FLIP_KINDS:
        raise ValueError(f"flip mode must be one of {sorted(_FLIP_KINDS)}, got {mode!r}")
    values = patch.values
    if "h" in mode:
        values = values[:, :, ::-1]
    if "v" in mode:
        values = values[:, ::-1, :]
    return replace(patch, source_kind=_FLIP_KINDS[mode], values=np.ascontiguousarray(values))


def unflip_grad(grad: np.ndarray, source_kind: str) -> np.ndarray:
    """Map a flipped patch's gradient back to the unflipped layout."""
    if source_kind in (KIND_FLIP_H, KIND_FLIP_HV):
        grad = grad[:, :, ::-1]
    if source_kind in (KIND_FLIP_V, KIND_FLIP_HV):
        grad = grad[:, ::-1, :]
    return np.ascontiguousarray(grad)


def roi_align(fm: FeatureMap, box: Box, out: int = 7, sampling: int = 2) -> np.ndarray:
    """RoI-aligned (C, out, out) crop of a normalized-coordinate box.

    Each output bin averages ``sampling x sampling`` bilinear samples taken
    at regular offsets inside the bin. Samples use the half-cell-center
    convention with border clamping.

    Raises:
        DegenerateBoxError: box has zero width or height.
    """
    if box.w <= 0.0 or box.h <= 0.0:
        raise DegenerateBoxError(f"roi_align needs positive box extent, got w={box.w!r} h={box.h!r}")
    c, h, w = fm.values.shape
    x1, y1, x2, y2 = box.corners()
    # Sample positions in map units, one axis at a time.
    steps = (np.arange(out * sampling, dtype=np.float64) + 0.5) / sampling
    xs = (x1 + steps / out * (x2 - x1)) * w
    ys = (y1 + steps / out * (y2 - y1)) * h

    def gather(axis_pos: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        g = axis_pos - 0.5
        i0 = np.floor(g).astype(np.int64)
        t = (g - i0).astype(np.float32)
        lo = np.clip(i0, 0, n - 1)
        hi = np.clip(i0 + 1, 0, n - 1)
        return lo, hi, t

    xlo, xhi, tx = gather(xs, w)
    ylo, yhi, ty = gather(ys, h)
    v = fm.values
    top = v[:, ylo][:, :, xlo] * (1 - tx) + v[:, ylo][:, :, xhi] * tx
    bot = v[:, yhi][:, :, xlo] * (1 - tx) + v[:, yhi][:, :, xhi] * tx
    sampled = top * (1 - ty[:, None]) + bot * ty[:, None]
    pooled = sampled.reshape(c, out, sampling, out, sampling).mean(axis=(2, 4))
    return pooled.astype(np.float32)
