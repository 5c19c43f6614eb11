"""Masked inpainting: encode, partially noise, iterate conditioned
reverse steps on the [z_t; masked latent; mask] stack, decode."""

from __future__ import annotations

import hashlib
import json
import logging
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParameterError, PipelineError
from .masks import MaskProposal, downsample_mask
from .ports import Denoiser, LatentCodec
from .schedule import (
    NoiseSchedule,
    forward_diffuse,
    reverse_step,
    start_step,
    subsample_schedule,
    uniform_timesteps,
)

log = logging.getLogger(__name__)


@dataclass
class InpaintRequest:
    image: np.ndarray            # (H, W, 3) in [0, 1]
    mask: MaskProposal
    condition: np.ndarray
    lam: float
    n_steps: int
    seed: int = 0


@dataclass
class InpaintResult:
    inpainted: np.ndarray
    mask: MaskProposal
    steps_run: int


def request_noise(seed: int, shape: tuple[int, ...]) -> np.ndarray:
    """The request-scoped Gaussian draw; one call per request keeps
    batched multi-mask inference reproducible and order-independent."""
    return np.random.default_rng(seed).standard_normal(shape)


def inpaint(
    req: InpaintRequest,
    codec: LatentCodec,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
) -> InpaintResult:
    """Run one masked inpainting pass.

    The masked-image latent encodes (1-m) * x literally (masked pixels
    zeroed), and the denoiser sees [noisy latent; masked latent;
    downsampled mask] in that fixed channel order.
    """
    image = np.asarray(req.image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ParameterError(f"expected (H, W, 3) image, got {image.shape}")
    h, w = image.shape[:2]
    if req.mask.mask.shape != (h, w):
        raise ParameterError(f"mask {req.mask.mask.shape} != image plane {(h, w)}")
    if h % codec.scale_factor or w % codec.scale_factor:
        raise ParameterError(f"image dims {(h, w)} not divisible by codec scale {codec.scale_factor}")
    if not 0.0 <= req.lam <= 1.0:
        raise ParameterError(f"lambda must lie in [0, 1], got {req.lam}")

    z = codec.encode(image)
    t_start = start_step(req.lam, req.n_steps)
    if t_start == 0:
        # no noising: inpainting degenerates to a codec round-trip
        return InpaintResult(inpainted=codec.decode(z), mask=req.mask, steps_run=0)

    masked = (1.0 - req.mask.mask)[..., None] * image
    z_masked = codec.encode(masked)
    lat_h, lat_w = z.data.shape[1:]
    m_latent = downsample_mask(req.mask, lat_h, lat_w).astype(np.float64)[None]

    taus = uniform_timesteps(schedule.T, req.n_steps)
    sub = subsample_schedule(schedule, taus)

    eps = request_noise(req.seed, z.data.shape)
    z_t = forward_diffuse(z, t_start, eps, sub)
    for step in range(t_start, 0, -1):
        z_in = np.concatenate([z_t.data, z_masked.data, m_latent], axis=0)
        try:
            eps_hat = denoiser.predict_noise(z_in, int(taus[step - 1]), req.condition)
        except Exception as exc:
            raise PipelineError(f"denoiser failed at step {step}: {exc}", step=step) from exc
        if eps_hat.shape != z_t.data.shape:
            raise PipelineError(
                f"denoiser output {eps_hat.shape} != latent {z_t.data.shape} at step {step}",
                step=step)
        z_t = reverse_step(z_t, eps_hat, step, None, sub)
        if not np.isfinite(z_t.data).all():
            raise PipelineError(f"non-finite latent after step {step}", step=step)

    return InpaintResult(inpainted=codec.decode(z_t), mask=req.mask, steps_run=t_start)


def inpaint_batch(
    requests: list[InpaintRequest],
    codec: LatentCodec,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
) -> list[InpaintResult]:
    """Sequential batch executor; requests are independent, so results
    are identical to any grouped or parallel execution order."""
    return [inpaint(r, codec, denoiser, schedule) for r in requests]


# --------------------------------------------------------------------------
# Optional on-disk cache keyed by the full request identity
# --------------------------------------------------------------------------

def _array_digest(arr: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(str(arr.shape).encode())
    h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def request_key(req: InpaintRequest) -> str:
    """Cache key over (image, mask, lambda, condition, seed, n_steps)."""
    h = hashlib.sha256()
    h.update(_array_digest(req.image).encode())
    h.update(_array_digest(req.mask.mask).encode())
    h.update(f"{req.lam!r}|{req.n_steps}|{req.seed}".encode())
    h.update(_array_digest(np.asarray(req.condition)).encode())
    return h.hexdigest()


class InpaintCache:
    """Resumable store of inpaint results; payloads carry their own hash
    so corruption is detected and recomputed with a warning."""

    def __init__(self, directory):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        return self.dir / f"{key}.npz"

    def get(self, req: InpaintRequest) -> InpaintResult | None:
        path = self._path(request_key(req))
        if not path.exists():
            return None
        try:
            with np.load(path, allow_pickle=False) as data:
                arr = data["inpainted"]
                steps = int(data["steps_run"])
                stored = str(data["payload_sha"])
        except (OSError, ValueError, KeyError, zipfile.BadZipFile):
            log.warning("inpaint cache entry %s unreadable; recomputing", path.name)
            return None
        if _array_digest(arr) != stored:
            log.warning("inpaint cache entry %s corrupt; recomputing", path.name)
            return None
        return InpaintResult(inpainted=arr, mask=req.mask, steps_run=steps)

    def put(self, req: InpaintRequest, result: InpaintResult) -> None:
        path = self._path(request_key(req))
        np.savez(path,
                 inpainted=result.inpainted,
                 steps_run=result.steps_run,
                 payload_sha=_array_digest(result.inpainted))

    def manifest(self) -> dict:
        return {"entries": sorted(p.name for p in self.dir.glob("*.npz"))}


def config_digest(obj) -> str:
    """Stable short hash of any JSON-serializable config mapping."""
    blob = json.dumps(obj, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]
