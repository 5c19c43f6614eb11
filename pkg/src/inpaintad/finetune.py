"""Fine-tuning of the denoiser and the codec decoder on the k-shot
multi-class support set: loss definitions, augmentation, the Adam
optimizer, and the two training loops.

Ports that can be trained expose a ``params`` dict of arrays plus a
``loss_and_grads`` method; the loops stay agnostic of how gradients are
produced (analytic for the mocks, backprop for real adapters).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, SamplingExhaustedError, TrainingDivergedError
from .imageops import resize_bilinear, resize_nearest
from .masks import ForegroundMask, downsample_mask, foreground_mask, sample_training_mask
from .pipeline import request_noise
from .ports import PerceptualExtractor, PortsBundle
from .prompts import PromptSet, sample_training_prompt
from .schedule import NoiseSchedule, forward_diffuse
from .scoring import perceptual_layer_maps

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------

def denoiser_loss(eps: np.ndarray, eps_hat: np.ndarray) -> float:
    """Mean squared error between true and predicted noise."""
    if eps.shape != eps_hat.shape:
        raise ParameterError(f"shape mismatch {eps.shape} vs {eps_hat.shape}")
    return float(np.mean((eps - eps_hat) ** 2))


def decoder_loss(x: np.ndarray, x_hat: np.ndarray, perc: PerceptualExtractor, beta: float) -> float:
    """Reconstruction MSE plus beta times the weighted perceptual term
    (per layer: spatial mean of the squared weighted feature difference)."""
    if x.shape != x_hat.shape:
        raise ParameterError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    mse = float(np.mean((x - x_hat) ** 2))
    lpips = sum(float(np.mean(m)) for m in perceptual_layer_maps(x, x_hat, perc))
    return mse + beta * lpips


# --------------------------------------------------------------------------
# Augmentation
# --------------------------------------------------------------------------

@dataclass
class AugmentPolicy:
    """Factor ranges for contrast/brightness jitter, scaling with center
    crop/pad, and right-angle rotation."""

    contrast: tuple[float, float] = (0.9, 1.1)
    brightness: tuple[float, float] = (-0.05, 0.05)
    scale: tuple[float, float] = (0.9, 1.1)
    rotations: tuple[int, ...] = (0, 90, 180, 270)

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(contrast=(1.0, 1.0), brightness=(0.0, 0.0), scale=(1.0, 1.0), rotations=(0,))


@dataclass
class AugmentDraw:
    """One sampled set of augmentation factors, so an image and its
    foreground mask can be transformed consistently."""

    contrast: float
    brightness: float
    scale: float
    angle: int


def draw_augment(rng: np.random.Generator, policy: AugmentPolicy) -> AugmentDraw:
    return AugmentDraw(
        contrast=float(rng.uniform(*policy.contrast)),
        brightness=float(rng.uniform(*policy.brightness)),
        scale=float(rng.uniform(*policy.scale)),
        angle=int(policy.rotations[int(rng.integers(len(policy.rotations)))]),
    )


def apply_augment(x: np.ndarray, draw: AugmentDraw) -> np.ndarray:
    """Contrast, brightness, scale, then rotation; neutral factors leave
    the image bit-identical and output stays in [0, 1]."""
    out = x
    if draw.contrast != 1.0:
        out = (out - 0.5) * draw.contrast + 0.5
    if draw.brightness != 0.0:
        out = out + draw.brightness
    if draw.scale != 1.0:
        out = _rescale_center(out, draw.scale)
    if draw.angle % 360 != 0:
        if draw.angle % 180 != 0 and x.shape[0] != x.shape[1]:
            raise ParameterError("90-degree rotation needs a square image")
        out = np.rot90(out, (draw.angle // 90) % 4, axes=(0, 1))
    return np.clip(out, 0.0, 1.0)


def apply_augment_mask(mask: np.ndarray, draw: AugmentDraw) -> np.ndarray:
    """Geometric part of a draw only (nearest for the scale step)."""
    out = mask
    if draw.scale != 1.0:
        h, w = mask.shape
        nh, nw = max(int(round(h * draw.scale)), 1), max(int(round(w * draw.scale)), 1)
        resized = resize_nearest(out, (nh, nw))
        if nh >= h:
            top, left = (nh - h) // 2, (nw - w) // 2
            out = resized[top:top + h, left:left + w]
        else:
            pt, pl = (h - nh) // 2, (w - nw) // 2
            out = np.pad(resized, ((pt, h - nh - pt), (pl, w - nw - pl)), mode="edge")
    if draw.angle % 360 != 0:
        if draw.angle % 180 != 0 and mask.shape[0] != mask.shape[1]:
            raise ParameterError("90-degree rotation needs a square mask")
        out = np.rot90(out, (draw.angle // 90) % 4)
    return out.astype(np.uint8)


def augment(x: np.ndarray, rng: np.random.Generator, policy: AugmentPolicy) -> np.ndarray:
    return apply_augment(x, draw_augment(rng, policy))


def _rescale_center(x: np.ndarray, s: float) -> np.ndarray:
    h, w = x.shape[:2]
    nh, nw = max(int(round(h * s)), 1), max(int(round(w * s)), 1)
    resized = resize_bilinear(x.transpose(2, 0, 1), (nh, nw)).transpose(1, 2, 0)
    if nh >= h:
        top, left = (nh - h) // 2, (nw - w) // 2
        return resized[top:top + h, left:left + w]
    pt, pl = (h - nh) // 2, (w - nw) // 2
    return np.pad(resized, ((pt, h - nh - pt), (pl, w - nw - pl), (0, 0)), mode="edge")


# --------------------------------------------------------------------------
# Optimizer
# --------------------------------------------------------------------------

class Adam:
    """Plain Adam over a dict of parameter arrays, updated in place."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
        self.v = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for key, g in grads.items():
            g = np.asarray(g, dtype=np.float64)
            self.m[key] = self.beta1 * self.m[key] + (1 - self.beta1) * g
            self.v[key] = self.beta2 * self.v[key] + (1 - self.beta2) * g * g
            m_hat = self.m[key] / (1 - self.beta1**self.t)
            v_hat = self.v[key] / (1 - self.beta2**self.t)
            self.params[key] = self.params[key] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# --------------------------------------------------------------------------
# Config and training samples
# --------------------------------------------------------------------------

@dataclass
class FinetuneConfig:
    epochs_denoiser: int = 4000
    epochs_decoder: int = 200
    lr: float = 1e-4
    beta_lpips: float = 0.1
    batch_size: int = 8
    gamma_choices: tuple[float, ...] = (0.0, 0.2, 0.5)
    seed: int = 0
    checkpoint_every: int = 0      # 0 = final checkpoint only
    mask_max_tries: int = 200

    def __post_init__(self):
        if min(self.epochs_denoiser, self.epochs_decoder) < 0 or self.lr <= 0 \
                or self.beta_lpips < 0 or self.batch_size < 1:
            raise ParameterError("invalid fine-tune configuration")
        for g in self.gamma_choices:
            if not 0.0 <= g < 1.0:
                raise ParameterError(f"gamma {g} outside [0, 1)")


@dataclass
class DenoiserSample:
    z_in: np.ndarray
    t: int
    condition: np.ndarray
    eps: np.ndarray


@dataclass
class LossTrace:
    values: list[float] = field(default_factory=list)

    def append(self, value: float) -> None:
        if not np.isfinite(value) or value < 0:
            raise TrainingDivergedError(f"non-finite or negative loss {value}", trace=list(self.values))
        self.values.append(float(value))

    def write_csv(self, path, config_hash: str | None = None) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            if config_hash:
                fh.write(f"# config_hash={config_hash}\n")
            fh.write("epoch,loss\n")
            for i, v in enumerate(self.values):
                fh.write(f"{i},{v:.10g}\n")


def training_step(port, batch, opt: Adam) -> float:
    """One optimizer step on a trainable port; returns the batch loss."""
    loss, grads = port.loss_and_grads(batch)
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"non-finite batch loss {loss}", trace=[])
    opt.step(grads)
    return float(loss)


def build_denoiser_sample(
    image: np.ndarray,
    category: str,
    prompt_set: PromptSet,
    ports: PortsBundle,
    schedule: NoiseSchedule,
    cfg: FinetuneConfig,
    rng: np.random.Generator,
    *,
    policy: AugmentPolicy | None = None,
    fg_method: str = "otsu_morph",
    fg_file_mask: np.ndarray | None = None,
) -> DenoiserSample:
    """Draw one training sample: augment, mask, prompt, timestep, noise.

    A curated foreground mask (the optional `_fg` sibling file) rides
    through the same geometric transforms as the image.
    """
    policy = policy or AugmentPolicy()
    draw = draw_augment(rng, policy)
    x = apply_augment(image, draw)
    if fg_file_mask is not None:
        fg = ForegroundMask(apply_augment_mask(fg_file_mask, draw), "file")
    elif fg_method == "all_ones":
        fg = ForegroundMask(np.ones(x.shape[:2], dtype=np.uint8), "all_ones")
    else:
        fg = foreground_mask(x, method=fg_method)
    # a drawn gamma can be unsatisfiable (strict IoU against a large
    # foreground caps below 0.5 for H/2-sided rectangles); redraw it
    mask = None
    for _ in range(10):
        gamma = float(cfg.gamma_choices[int(rng.integers(len(cfg.gamma_choices)))])
        try:
            mask = sample_training_mask(fg, gamma, rng, max_tries=cfg.mask_max_tries)
            break
        except SamplingExhaustedError:
            continue
    if mask is None:
        raise SamplingExhaustedError(
            "no training mask satisfied any drawn gamma", last_iou=float("nan"))
    prompt = sample_training_prompt(prompt_set, rng)
    condition = ports.text.embed(prompt)

    z = ports.codec.encode(x)
    z_masked = ports.codec.encode((1.0 - mask.mask)[..., None] * x)
    m_latent = downsample_mask(mask, z.data.shape[1], z.data.shape[2]).astype(np.float64)[None]
    t = int(rng.integers(1, schedule.T + 1))
    eps = request_noise(int(rng.integers(2**63)), z.data.shape)
    z_t = forward_diffuse(z, t, eps, schedule)
    z_in = np.concatenate([z_t.data, z_masked.data, m_latent], axis=0)
    return DenoiserSample(z_in=z_in, t=t, condition=condition, eps=eps)


def finetune_denoiser(
    support: dict[str, list[np.ndarray]],
    ports: PortsBundle,
    cfg: FinetuneConfig,
    prompt_sets: dict[str, PromptSet],
    schedule: NoiseSchedule,
    *,
    texture_categories: tuple[str, ...] = (),
    policy: AugmentPolicy | None = None,
    foregrounds: dict[str, list[np.ndarray | None]] | None = None,
    checkpoint_cb=None,
) -> tuple[dict[str, np.ndarray], LossTrace]:
    """Fine-tune the denoiser port; one epoch is one freshly augmented
    pass over the whole support set.

    checkpoint_cb(epoch, params) fires every cfg.checkpoint_every epochs
    when that interval is positive.
    """
    items = [(c, i) for c, images in sorted(support.items()) for i in range(len(images))]
    if not items:
        raise ParameterError("support set is empty")
    rng = np.random.default_rng(cfg.seed)
    trace = LossTrace()
    trainable = hasattr(ports.denoiser, "params") and hasattr(ports.denoiser, "loss_and_grads")
    opt = Adam(ports.denoiser.params, lr=cfg.lr) if trainable else None

    for epoch in range(cfg.epochs_denoiser):
        order = rng.permutation(len(items))
        batch: list[DenoiserSample] = []
        epoch_losses: list[float] = []
        for pos in order:
            cat, idx = items[pos]
            fg_method = "all_ones" if cat in texture_categories else "otsu_morph"
            fg_file = foregrounds.get(cat, [None] * len(support[cat]))[idx] \
                if foregrounds else None
            batch.append(build_denoiser_sample(
                support[cat][idx], cat, prompt_sets[cat], ports, schedule, cfg, rng,
                policy=policy, fg_method=fg_method, fg_file_mask=fg_file))
            if len(batch) == cfg.batch_size:
                epoch_losses.append(_denoiser_batch(ports, batch, opt))
                batch = []
        if batch:
            epoch_losses.append(_denoiser_batch(ports, batch, opt))
        trace.append(float(np.mean(epoch_losses)))
        if checkpoint_cb and cfg.checkpoint_every > 0 and (epoch + 1) % cfg.checkpoint_every == 0:
            checkpoint_cb(epoch + 1, {k: v.copy() for k, v in ports.denoiser.params.items()}
                          if trainable else {})

    weights = {k: v.copy() for k, v in ports.denoiser.params.items()} if trainable else {}
    return weights, trace


def _denoiser_batch(ports: PortsBundle, batch: list[DenoiserSample], opt: Adam | None) -> float:
    if opt is not None:
        return training_step(ports.denoiser, batch, opt)
    losses = [denoiser_loss(s.eps, ports.denoiser.predict_noise(s.z_in, s.t, s.condition))
              for s in batch]
    return float(np.mean(losses))


def finetune_decoder(
    support: dict[str, list[np.ndarray]],
    ports: PortsBundle,
    cfg: FinetuneConfig,
    *,
    policy: AugmentPolicy | None = None,
) -> tuple[dict[str, np.ndarray], LossTrace]:
    """Fine-tune the codec decoder on reconstruction pairs (x, D(E(x)))."""
    images = [img for _, imgs in sorted(support.items()) for img in imgs]
    if not images:
        raise ParameterError("support set is empty")
    policy = policy or AugmentPolicy()
    rng = np.random.default_rng(cfg.seed)
    trace = LossTrace()
    trainable = hasattr(ports.codec, "params") and hasattr(ports.codec, "loss_and_grads")
    opt = Adam(ports.codec.params, lr=cfg.lr) if trainable else None

    def loss_fn(x, x_hat):
        return decoder_loss(x, x_hat, ports.perceptual, cfg.beta_lpips)

    for _ in range(cfg.epochs_decoder):
        order = rng.permutation(len(images))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            xs = [augment(images[i], rng, policy) for i in order[start:start + cfg.batch_size]]
            if opt is not None:
                loss, grads = ports.codec.loss_and_grads(xs, loss_fn)
                if not np.isfinite(loss):
                    raise TrainingDivergedError(f"non-finite batch loss {loss}", trace=trace.values)
                opt.step(grads)
            else:
                loss = float(np.mean([loss_fn(x, ports.codec.decode(ports.codec.encode(x)))
                                      for x in xs]))
            epoch_losses.append(float(loss))
        trace.append(float(np.mean(epoch_losses)))

    weights = {k: v.copy() for k, v in ports.codec.params.items()} if trainable else {}
    return weights, trace
