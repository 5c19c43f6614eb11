"""Mask generation: foreground-filtered training rectangles, multi-scale
inference grids, and latent-resolution downsampling."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ParameterError, SamplingExhaustedError
from .imageops import block_any, load_binary_mask, to_gray

log = logging.getLogger(__name__)

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass
class MaskProposal:
    """A binary mask plus where it came from.

    provenance is "training_rect", "prototype", or "grid(k,i,j)".
    """

    mask: np.ndarray
    provenance: str

    def __post_init__(self):
        self.mask = np.asarray(self.mask).astype(np.uint8)
        if self.mask.ndim != 2 or not np.isin(self.mask, (0, 1)).all():
            raise ParameterError("mask must be a 2-D binary array")

    @property
    def coverage(self) -> float:
        return float(self.mask.mean())


@dataclass
class ForegroundMask:
    mask: np.ndarray
    method: str


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks."""
    a = a.astype(bool)
    b = b.astype(bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def sample_training_mask(
    fg: ForegroundMask,
    gamma: float,
    rng: np.random.Generator,
    max_tries: int = 100,
) -> MaskProposal:
    """Rejection-sample a rectangle whose IoU with the foreground exceeds gamma.

    Side lengths are drawn log-uniformly in [H/16, H/2] x [W/16, W/2] so
    small and large defect sizes are covered evenly.
    """
    if not 0.0 <= gamma < 1.0:
        raise ParameterError(f"gamma must lie in [0, 1), got {gamma}")
    if max_tries < 1:
        raise ParameterError(f"max_tries must be >= 1, got {max_tries}")
    h, w = fg.mask.shape
    last_iou = float("nan")
    for _ in range(max_tries):
        rh = _log_uniform_side(rng, h)
        rw = _log_uniform_side(rng, w)
        top = int(rng.integers(0, h - rh + 1))
        left = int(rng.integers(0, w - rw + 1))
        rect = np.zeros((h, w), dtype=np.uint8)
        rect[top:top + rh, left:left + rw] = 1
        last_iou = mask_iou(rect, fg.mask)
        if last_iou > gamma:
            return MaskProposal(mask=rect, provenance="training_rect")
    raise SamplingExhaustedError(
        f"no rectangle with IoU > {gamma} in {max_tries} tries", last_iou=last_iou)


def _log_uniform_side(rng: np.random.Generator, dim: int) -> int:
    lo = max(dim // 16, 1)
    hi = max(dim // 2, lo)
    side = int(round(np.exp(rng.uniform(np.log(lo), np.log(hi)))))
    return min(max(side, 1), dim)


def multiscale_masks(H: int, W: int, scales=(1, 2, 4, 8)) -> list[MaskProposal]:
    """For each scale k, the k*k disjoint grid-cell masks tiling the image."""
    for k in scales:
        if k < 1 or H % k != 0 or W % k != 0:
            raise ParameterError(
                f"image dims {(H, W)} not divisible by scale {k}; resize the image first")
    out = []
    for k in sorted(scales):
        ch, cw = H // k, W // k
        for i in range(k):
            for j in range(k):
                m = np.zeros((H, W), dtype=np.uint8)
                m[i * ch:(i + 1) * ch, j * cw:(j + 1) * cw] = 1
                out.append(MaskProposal(mask=m, provenance=f"grid({k},{i},{j})"))
    return out


def grid_scale(mp: MaskProposal) -> int:
    """Scale k encoded in a grid mask's provenance."""
    if not mp.provenance.startswith("grid("):
        raise ParameterError(f"not a grid mask: {mp.provenance!r}")
    return int(mp.provenance[5:-1].split(",")[0])


def downsample_mask(m: MaskProposal, latent_h: int, latent_w: int) -> np.ndarray:
    """Block-reduce to latent resolution with the any-rule: a latent cell
    is masked iff any covered pixel is masked."""
    return block_any(m.mask, (latent_h, latent_w))


def otsu_threshold(gray: np.ndarray, bins: int = 256) -> float:
    """Between-class-variance-maximizing split over a [0, 1] grayscale.

    Returns the upper edge of the low-class bin run, so values at the
    background spike fall strictly below the threshold.
    """
    hist, edges = np.histogram(gray.ravel(), bins=bins, range=(0.0, 1.0))
    hist = hist.astype(np.float64)
    centers = (edges[:-1] + edges[1:]) / 2.0
    weight_lo = np.cumsum(hist)
    weight_hi = weight_lo[-1] - weight_lo
    sum_lo = np.cumsum(hist * centers)
    mean_lo = np.divide(sum_lo, weight_lo, out=np.zeros_like(sum_lo), where=weight_lo > 0)
    mean_hi = np.divide(sum_lo[-1] - sum_lo, weight_hi,
                        out=np.zeros_like(sum_lo), where=weight_hi > 0)
    between = weight_lo * weight_hi * (mean_lo - mean_hi) ** 2
    return float(edges[int(np.argmax(between)) + 1])


def foreground_mask(image: np.ndarray, method: str = "otsu_morph", params: dict | None = None) -> ForegroundMask:
    """Binary object-region mask.

    otsu_morph thresholds the grayscale against the border-estimated
    background polarity, fills holes, and keeps the largest 8-connected
    component. Texture categories should use all_ones.
    """
    params = params or {}
    if method == "all_ones":
        return ForegroundMask(np.ones(image.shape[:2], dtype=np.uint8), "all_ones")
    if method == "file":
        mask = load_binary_mask(params["path"], params.get("size"))
        if mask.shape != image.shape[:2]:
            raise ParameterError(f"foreground file shape {mask.shape} != image {image.shape[:2]}")
        return ForegroundMask(mask, "file")
    if method != "otsu_morph":
        raise ParameterError(f"unknown foreground method {method!r}")

    gray = to_gray(image)
    if float(gray.max() - gray.min()) < 1e-6:
        log.warning("constant image: foreground mask degenerates to all-ones")
        return ForegroundMask(np.ones(gray.shape, dtype=np.uint8), "otsu_morph")
    thr = otsu_threshold(gray)
    border = np.concatenate([gray[0, :], gray[-1, :], gray[1:-1, 0], gray[1:-1, -1]])
    if border.mean() <= thr:
        fg = gray > thr
    else:
        fg = gray <= thr
    fg = ndimage.binary_fill_holes(fg)
    labels, n = ndimage.label(fg, structure=EIGHT_CONNECTED)
    if n == 0:
        log.warning("empty foreground after morphology; falling back to all-ones")
        return ForegroundMask(np.ones(gray.shape, dtype=np.uint8), "otsu_morph")
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, n + 1))
    keep = 1 + int(np.argmax(sizes))
    return ForegroundMask((labels == keep).astype(np.uint8), "otsu_morph")
