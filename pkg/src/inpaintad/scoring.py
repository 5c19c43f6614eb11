"""Anomaly scoring: perceptual distance maps between original and
inpainted images, per-scale assembly, harmonic multi-scale fusion,
prototype blending, smoothing, and the image-level score."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, ParameterError
from .imageops import gaussian_smooth, resize_bilinear, save_image
from .masks import MaskProposal
from .pipeline import InpaintResult
from .ports import PerceptualExtractor

_SMAP_MAGIC = b"SMAP1\n"

KINDS = ("per_scale", "multiscale", "prototype", "final")


@dataclass
class ScoreMap:
    values: np.ndarray
    kind: str
    smoothed: bool = False
    scale: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown score map kind {self.kind!r}")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ParameterError("score map must be 2-D")
        if not np.isfinite(self.values).all() or np.any(self.values < 0):
            raise ParameterError("score map values must be finite and >= 0")


def perceptual_layer_maps(x: np.ndarray, x_hat: np.ndarray, perc: PerceptualExtractor) -> list[np.ndarray]:
    """Per-layer maps of squared channel-weighted feature differences,
    at each layer's native resolution."""
    if x.shape != x_hat.shape:
        raise ParameterError(f"image shapes differ: {x.shape} vs {x_hat.shape}")
    maps = []
    for level, (fa, fb) in enumerate(zip(perc.layers(x), perc.layers(x_hat))):
        w = np.asarray(perc.channel_weights(level), dtype=np.float64)
        if w.shape[0] != fa.shape[0]:
            raise ParameterError(f"layer {level}: {w.shape[0]} weights for {fa.shape[0]} channels")
        maps.append(((w[:, None, None] * (fa - fb)) ** 2).sum(axis=0))
    return maps


def perceptual_distance_map(x: np.ndarray, x_hat: np.ndarray, perc: PerceptualExtractor) -> np.ndarray:
    """Bilinear-upsample each layer map to image size and sum layers."""
    h, w = x.shape[:2]
    total = np.zeros((h, w))
    for layer_map in perceptual_layer_maps(x, x_hat, perc):
        total += resize_bilinear(layer_map, (h, w))
    return total


def scale_score_map(
    x: np.ndarray,
    results: list[InpaintResult],
    perc: PerceptualExtractor,
    k: int,
) -> ScoreMap:
    """Assemble the scale-k map: each pixel scored from exactly the
    inpainting whose grid cell covers it."""
    h, w = x.shape[:2]
    coverage = np.zeros((h, w), dtype=np.int64)
    for r in results:
        coverage += r.mask.mask
    if not np.array_equal(coverage, np.ones((h, w), dtype=np.int64)):
        raise ContractError(
            f"scale {k}: masks do not tile the image exactly once "
            f"(coverage range {coverage.min()}..{coverage.max()})")
    values = np.zeros((h, w))
    for r in results:
        d = perceptual_distance_map(x, r.inpainted, perc)
        values += r.mask.mask * d
    return ScoreMap(values=values, kind="per_scale", scale=k)


def harmonic_fuse(maps: list[ScoreMap], epsilon: float = 1e-8) -> ScoreMap:
    """Elementwise epsilon-corrected harmonic mean across scales:
    |K| / sum_k 1/(S_k + eps) - eps.

    The correction keeps equal inputs a fixed point and pins the
    zero-anomaly limit at exactly zero.
    """
    if not maps:
        raise ParameterError("nothing to fuse")
    shapes = {m.values.shape for m in maps}
    if len(shapes) != 1:
        raise ParameterError(f"score map shapes differ: {shapes}")
    stack = np.stack([m.values for m in maps], axis=0)
    with np.errstate(divide="ignore"):
        inv = 1.0 / (stack + epsilon)
        fused = len(maps) / inv.sum(axis=0) - epsilon
    fused = np.maximum(fused, 0.0)
    return ScoreMap(values=fused, kind="multiscale")


def prototype_score(m_p: MaskProposal, D: np.ndarray) -> ScoreMap:
    """Distance masked to the prototype-guided region; zero elsewhere."""
    if m_p.mask.shape != D.shape:
        raise ParameterError(f"mask {m_p.mask.shape} != distance map {D.shape}")
    return ScoreMap(values=m_p.mask * D, kind="prototype")


def fuse_final(s_ms: ScoreMap, s_pg: ScoreMap, alpha: float) -> ScoreMap:
    """Convex combination (1 - alpha) * multiscale + alpha * prototype."""
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must lie in [0, 1], got {alpha}")
    if s_ms.values.shape != s_pg.values.shape:
        raise ParameterError("fused maps must share a shape")
    return ScoreMap(values=(1.0 - alpha) * s_ms.values + alpha * s_pg.values, kind="final")


def smooth_and_image_score(s: ScoreMap, sigma: float) -> tuple[ScoreMap, float]:
    """Gaussian-smooth the map (reflect padding), then take the max as
    the image-level score."""
    smoothed = gaussian_smooth(s.values, sigma)
    out = ScoreMap(values=smoothed, kind=s.kind, smoothed=True, scale=s.scale)
    return out, float(smoothed.max())


# --------------------------------------------------------------------------
# Persistence: self-describing float32 maps + PNG + JSON sidecar
# --------------------------------------------------------------------------

def save_score_map(s: ScoreMap, path, config_hash: str | None = None) -> None:
    header = {
        "kind": s.kind,
        "smoothed": bool(s.smoothed),
        "shape": list(s.values.shape),
        "dtype": "float32",
    }
    if config_hash:
        header["config_hash"] = config_hash
    with open(path, "wb") as fh:
        fh.write(_SMAP_MAGIC)
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        fh.write(s.values.astype(np.float32).tobytes())


def load_score_map(path) -> ScoreMap:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(_SMAP_MAGIC))
        if magic != _SMAP_MAGIC:
            raise ParameterError(f"{path} is not a score map file")
        header = json.loads(fh.readline().decode("utf-8"))
        data = np.frombuffer(fh.read(), dtype=np.float32)
    shape = tuple(header["shape"])
    if data.size != shape[0] * shape[1]:
        raise ParameterError(f"{path} truncated")
    return ScoreMap(values=data.reshape(shape).astype(np.float64),
                    kind=header["kind"], smoothed=header["smoothed"])


def save_score_png(s: ScoreMap, path) -> None:
    """8-bit visualization normalized by the map's own max."""
    peak = float(s.values.max())
    viz = s.values / peak if peak > 0 else s.values
    save_image(viz, path)


def save_score_sidecar(path, image_score: float, config_hash: str, extra: dict | None = None) -> None:
    payload = {"image_score": image_score, "config_hash": config_hash}
    payload.update(extra or {})
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")
