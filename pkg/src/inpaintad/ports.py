"""Stable contracts for every pretrained component, plus deterministic
mock implementations used by the test suite and desk-scale runs.

Real-weight adapters plug in through the same interfaces (see
``config.ports_factory``); ``validate_ports`` probes any implementation
the same way it probes the mocks.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from .errors import ParameterError, PortError
from .schedule import LatentArray

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# Contracts
# --------------------------------------------------------------------------

@runtime_checkable
class LatentCodec(Protocol):
    scale_factor: int
    latent_channels: int

    def encode(self, image: np.ndarray) -> LatentArray: ...

    def decode(self, z: LatentArray) -> np.ndarray: ...


@runtime_checkable
class Denoiser(Protocol):
    expected_input_channels: int

    def predict_noise(self, z_in: np.ndarray, t: int, condition: np.ndarray) -> np.ndarray: ...


@runtime_checkable
class TextEncoder(Protocol):
    width: int
    seq_len: int

    def embed(self, prompt: str) -> np.ndarray: ...


@runtime_checkable
class PatchFeatureExtractor(Protocol):
    def features_at(self, level: int, image: np.ndarray) -> np.ndarray: ...


@runtime_checkable
class PerceptualExtractor(Protocol):
    def layers(self, image: np.ndarray) -> list[np.ndarray]: ...

    def channel_weights(self, level: int) -> np.ndarray: ...


@dataclass
class PortsBundle:
    """Everything the workflow needs, bundled for one backend choice."""

    codec: LatentCodec
    denoiser: Denoiser
    text: TextEncoder
    patch_extractor: PatchFeatureExtractor
    perceptual: PerceptualExtractor


# --------------------------------------------------------------------------
# Mock implementations
# --------------------------------------------------------------------------

class IdentityCodec:
    """Lossless codec: latent = channel-first image, scale factor 1."""

    scale_factor = 1
    latent_channels = 3

    def encode(self, image: np.ndarray) -> LatentArray:
        if image.ndim != 3 or image.shape[2] != 3:
            raise ParameterError(f"expected (H, W, 3) image, got {image.shape}")
        return LatentArray(data=image.transpose(2, 0, 1).copy(), timestep=0)

    def decode(self, z: LatentArray) -> np.ndarray:
        return z.data.transpose(1, 2, 0).copy()


class StoredNoiseDenoiser:
    """Returns a stored noise tensor regardless of input.

    Pairing this with the noise actually used by forward_diffuse makes
    reverse trajectories exactly recover the clean latent.
    """

    def __init__(self, noise: np.ndarray, latent_channels: int = 3):
        self.noise = np.asarray(noise, dtype=np.float64)
        self.expected_input_channels = 2 * latent_channels + 1
        self._latent_channels = latent_channels

    def predict_noise(self, z_in: np.ndarray, t: int, condition: np.ndarray) -> np.ndarray:
        c = self._latent_channels
        target_shape = (c,) + z_in.shape[1:]
        if self.noise.shape != target_shape:
            raise PortError(f"stored noise {self.noise.shape} != latent slice {target_shape}")
        return self.noise


class BiasDenoiser:
    """Trainable mock: predicts a constant bias everywhere.

    MSE against any noise target is convex in the bias, so loss traces
    must decrease monotonically under a sane optimizer.
    """

    def __init__(self, latent_channels: int = 3, init_bias: float = 0.0):
        self.expected_input_channels = 2 * latent_channels + 1
        self._latent_channels = latent_channels
        self.params: dict[str, np.ndarray] = {"bias": np.array(float(init_bias))}

    def predict_noise(self, z_in: np.ndarray, t: int, condition: np.ndarray) -> np.ndarray:
        c = self._latent_channels
        return np.full((c,) + z_in.shape[1:], float(self.params["bias"]))

    def loss_and_grads(self, batch: Sequence) -> tuple[float, dict[str, np.ndarray]]:
        losses = []
        grad = 0.0
        for sample in batch:
            pred = self.predict_noise(sample.z_in, sample.t, sample.condition)
            diff = pred - sample.eps
            losses.append(float(np.mean(diff**2)))
            grad += 2.0 * float(np.mean(diff))
        n = len(batch)
        return float(np.mean(losses)), {"bias": np.array(grad / n)}


class OffsetCodec(IdentityCodec):
    """Trainable mock codec whose decoder adds a constant offset.

    decoder loss is quadratic in the offset; gradients come from a
    central finite difference so any perceptual mock can be attached.
    """

    def __init__(self, init_offset: float = 0.0):
        self.params: dict[str, np.ndarray] = {"offset": np.array(float(init_offset))}

    def decode(self, z: LatentArray) -> np.ndarray:
        return z.data.transpose(1, 2, 0) + float(self.params["offset"])

    def loss_and_grads(self, images: Sequence[np.ndarray], loss_fn) -> tuple[float, dict[str, np.ndarray]]:
        def batch_loss() -> float:
            vals = [loss_fn(x, self.decode(self.encode(x))) for x in images]
            return float(np.mean(vals))

        loss = batch_loss()
        h = 1e-4
        base = float(self.params["offset"])
        self.params["offset"] = np.array(base + h)
        up = batch_loss()
        self.params["offset"] = np.array(base - h)
        down = batch_loss()
        self.params["offset"] = np.array(base)
        return loss, {"offset": np.array((up - down) / (2.0 * h))}


class HashTextEncoder:
    """Deterministic stand-in text encoder: embeddings are seeded by a
    digest of the prompt, so equal prompts map to equal embeddings."""

    def __init__(self, width: int = 16, seq_len: int = 4):
        self.width = width
        self.seq_len = seq_len

    def embed(self, prompt: str) -> np.ndarray:
        if not isinstance(prompt, str) or not prompt:
            raise ParameterError("prompt must be a non-empty string")
        digest = hashlib.sha256(prompt.encode("utf-8")).digest()
        seed = int.from_bytes(digest[:8], "big")
        rng = np.random.default_rng(seed)
        return rng.standard_normal((self.seq_len, self.width))


class PooledFeatureExtractor:
    """Block-mean pyramid over the image; level 3 pools twice as coarsely
    as level 2, mirroring a conv backbone's spatial hierarchy."""

    def __init__(self, pool2: int = 8):
        if pool2 < 1:
            raise ParameterError("pool2 must be >= 1")
        self.pool2 = pool2

    def _pool(self, image: np.ndarray, p: int) -> np.ndarray:
        h, w = image.shape[:2]
        if h % p != 0 or w % p != 0:
            raise PortError(f"image dims {(h, w)} not divisible by pool {p}")
        blocks = image.reshape(h // p, p, w // p, p, 3).mean(axis=(1, 3))
        return blocks.transpose(2, 0, 1)

    def features_at(self, level: int, image: np.ndarray) -> np.ndarray:
        if level == 2:
            return self._pool(image, self.pool2)
        if level == 3:
            return self._pool(image, self.pool2 * 2)
        raise PortError(f"extractor provides levels 2 and 3, not {level}")


class IdentityPerceptual:
    """Single identity feature layer with unit channel weights.

    mode="rgb" keeps 3 channels; mode="gray" collapses to one, which
    makes hand arithmetic in tests come out to per-pixel squared error.
    """

    def __init__(self, mode: str = "rgb"):
        if mode not in ("rgb", "gray"):
            raise ParameterError(f"unknown mode {mode!r}")
        self.mode = mode

    def layers(self, image: np.ndarray) -> list[np.ndarray]:
        if self.mode == "gray":
            return [image.mean(axis=2)[None, :, :]]
        return [image.transpose(2, 0, 1)]

    def channel_weights(self, level: int) -> np.ndarray:
        return np.ones(1 if self.mode == "gray" else 3)


class MultiScalePerceptual:
    """Identity layer plus block-mean pooled layers, exercising the
    per-layer upsample-and-sum path of the distance map."""

    def __init__(self, pools: tuple[int, ...] = (1, 2)):
        self.pools = pools

    def layers(self, image: np.ndarray) -> list[np.ndarray]:
        out = []
        for p in self.pools:
            if p == 1:
                out.append(image.transpose(2, 0, 1))
            else:
                h, w = image.shape[:2]
                if h % p or w % p:
                    raise PortError(f"image dims {(h, w)} not divisible by pool {p}")
                out.append(image.reshape(h // p, p, w // p, p, 3).mean(axis=(1, 3)).transpose(2, 0, 1))
        return out

    def channel_weights(self, level: int) -> np.ndarray:
        return np.ones(3)


def load_channel_weights(path, n_channels: int) -> np.ndarray:
    """Load calibrated perceptual channel weights; fall back to ones."""
    try:
        weights = np.load(path)
    except (OSError, ValueError):
        log.warning("channel weight file %s unavailable; using all-ones weights", path)
        return np.ones(n_channels)
    weights = np.asarray(weights, dtype=np.float64).ravel()
    if weights.size != n_channels or np.any(weights < 0):
        raise PortError(f"weight file {path} invalid for {n_channels} channels")
    return weights


# --------------------------------------------------------------------------
# Probes
# --------------------------------------------------------------------------

@dataclass
class ProbeResult:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class PortReport:
    probes: list[ProbeResult] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(p.passed for p in self.probes)

    def failures(self) -> list[ProbeResult]:
        return [p for p in self.probes if not p.passed]


def validate_ports(
    codec: LatentCodec,
    denoiser: Denoiser,
    text: TextEncoder,
    *,
    image_size: int = 64,
    expected_text_width: int | None = None,
) -> PortReport:
    """Shape-probe the three inference-critical ports.

    Failures are reported, never raised, so callers can present the full
    diagnostic picture before refusing to run.
    """
    report = PortReport()
    rng = np.random.default_rng(0)
    probe_img = rng.uniform(0.0, 1.0, (image_size, image_size, 3))

    try:
        z = codec.encode(probe_img)
        back = codec.decode(z)
        err = float(np.max(np.abs(back - probe_img)))
        tol = float(getattr(codec, "roundtrip_tolerance", 0.0))
        report.probes.append(ProbeResult(
            "codec_roundtrip", err <= tol, f"max abs error {err:.3g} (tolerance {tol:.3g})"))
        expect_hw = (image_size // codec.scale_factor, image_size // codec.scale_factor)
        got_hw = z.data.shape[1:]
        report.probes.append(ProbeResult(
            "codec_scale", got_hw == expect_hw, f"latent spatial {got_hw}, expected {expect_hw}"))
    except Exception as exc:  # surface, don't hide
        report.probes.append(ProbeResult("codec_roundtrip", False, f"raised {exc!r}"))
        return report

    c = z.data.shape[0]
    want = 2 * c + 1
    report.probes.append(ProbeResult(
        "denoiser_channels",
        denoiser.expected_input_channels == want,
        f"declares {denoiser.expected_input_channels}, latent implies {want}"))
    try:
        z_in = np.concatenate([z.data, z.data, np.zeros((1,) + z.data.shape[1:])], axis=0)
        cond = text.embed("probe")
        out = denoiser.predict_noise(z_in, 1, cond)
        report.probes.append(ProbeResult(
            "denoiser_output", out.shape == z.data.shape,
            f"output {out.shape}, expected {z.data.shape}"))
    except Exception as exc:
        report.probes.append(ProbeResult("denoiser_output", False, f"raised {exc!r}"))

    try:
        e1 = text.embed("probe")
        e2 = text.embed("probe")
        report.probes.append(ProbeResult(
            "text_deterministic", bool(np.array_equal(e1, e2)), "equal prompts, equal embeddings"))
        width_ok = e1.shape[-1] == text.width
        if expected_text_width is not None:
            width_ok = width_ok and text.width == expected_text_width
        report.probes.append(ProbeResult(
            "text_width", width_ok,
            f"embedding width {e1.shape[-1]}, declared {text.width}, "
            f"expected {expected_text_width if expected_text_width is not None else 'declared'}"))
    except Exception as exc:
        report.probes.append(ProbeResult("text_width", False, f"raised {exc!r}"))

    return report


# --------------------------------------------------------------------------
# Oracle inpainter
# --------------------------------------------------------------------------

class OracleInpainter:
    """Pipeline stub that inpaints perfectly: clean reference inside the
    mask, untouched input outside it."""

    def __init__(self, clean_reference: np.ndarray):
        self.clean = np.asarray(clean_reference, dtype=np.float64)

    def inpaint(self, image: np.ndarray, mask: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if image.shape != self.clean.shape:
            raise ParameterError(f"image {image.shape} != reference {self.clean.shape}")
        if mask.shape != image.shape[:2]:
            raise ParameterError(f"mask {mask.shape} != image plane {image.shape[:2]}")
        m = mask.astype(np.float64)[..., None]
        return self.clean * m + image * (1.0 - m)


def oracle_inpainter(clean_reference: np.ndarray) -> OracleInpainter:
    """Build the perfect-inpainting stub around a clean reference image."""
    return OracleInpainter(clean_reference)
