"""Diffusion noise schedule and the pure forward/reverse step arithmetic.

Timesteps are 1-based: t in [1, T], with t=0 denoting clean data. The
cumulative signal level alpha_bar(0) is 1 by the empty-product
convention, which makes the posterior coefficient vanish at t=1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ParameterError


@dataclass(frozen=True)
class NoiseSchedule:
    """Beta/alpha sequences driving forward noising and reverse denoising.

    Invariants (checked at construction): alphas[t] = 1 - betas[t]
    exactly, alpha_bars is the running product of alphas, every
    alpha_bar lies in (0, 1) and the sequence is strictly decreasing.
    """

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ParameterError("betas must be a non-empty 1-D sequence")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ParameterError("every beta must lie in (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        if np.any(alpha_bars <= 0.0) or np.any(alpha_bars >= 1.0):
            raise ParameterError("alpha_bars left (0, 1); schedule too long or betas too large")
        if alpha_bars.size > 1 and np.any(np.diff(alpha_bars) >= 0.0):
            raise ParameterError("alpha_bars must be strictly decreasing")
        return cls(betas=betas, alphas=alphas, alpha_bars=alpha_bars)

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ParameterError(f"timestep {t} outside [1, {self.T}]")

    def beta(self, t: int) -> float:
        self._check_t(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check_t(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bars[t - 1])


@dataclass
class LatentArray:
    """A latent tensor (C, H, W) tagged with its noise level t in [0, T]."""

    data: np.ndarray
    timestep: int

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


def build_schedule(
    T: int,
    beta_start: float,
    beta_end: float,
    interpolation: str = "linear",
) -> NoiseSchedule:
    """Construct a T-step schedule.

    "linear" interpolates beta directly; "scaled_linear" interpolates in
    sqrt(beta) space (the convention of the pretrained latent-diffusion
    checkpoints this package is designed to host).
    """
    if T < 1:
        raise ParameterError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ParameterError(f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    if interpolation == "linear":
        betas = np.linspace(beta_start, beta_end, T)
    elif interpolation == "scaled_linear":
        betas = np.linspace(np.sqrt(beta_start), np.sqrt(beta_end), T) ** 2
    else:
        raise ParameterError(f"unknown interpolation {interpolation!r}")
    return NoiseSchedule.from_betas(betas)


def forward_diffuse(z0: LatentArray, t: int, eps: np.ndarray, s: NoiseSchedule) -> LatentArray:
    """Jump straight to noise level t: z_t = z0*sqrt(ab_t) + eps*sqrt(1-ab_t)."""
    if not 1 <= t <= s.T:
        raise ParameterError(f"timestep {t} outside [1, {s.T}]")
    if eps.shape != z0.data.shape:
        raise ParameterError(f"noise shape {eps.shape} != latent shape {z0.data.shape}")
    ab = s.alpha_bar(t)
    data = z0.data * np.sqrt(ab) + eps * np.sqrt(1.0 - ab)
    return LatentArray(data=data, timestep=t)


def reverse_step(
    z_t: LatentArray,
    eps_hat: np.ndarray,
    t: int,
    eta: np.ndarray | None,
    s: NoiseSchedule,
) -> LatentArray:
    """One denoising step t -> t-1 given the predicted noise.

    z_{t-1} = (z_t - ((1-a_t)/sqrt(1-ab_t)) * eps_hat) / sqrt(a_t)
              + ((1-ab_{t-1})/(1-ab_t)) * b_t * eta

    With eta=None the step is deterministic; the posterior coefficient
    is zero at t=1 because ab_0 = 1.
    """
    if t == 0:
        raise ContractError("nothing to denoise at t=0")
    if z_t.timestep != t:
        raise ParameterError(f"latent tagged t={z_t.timestep} but step asked for t={t}")
    if not 1 <= t <= s.T:
        raise ParameterError(f"timestep {t} outside [1, {s.T}]")
    if eps_hat.shape != z_t.data.shape:
        raise ParameterError(f"eps_hat shape {eps_hat.shape} != latent shape {z_t.data.shape}")
    a = s.alpha(t)
    ab = s.alpha_bar(t)
    mean = (z_t.data - ((1.0 - a) / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(a)
    if eta is not None:
        beta_tilde = (1.0 - s.alpha_bar(t - 1)) / (1.0 - ab) * s.beta(t)
        mean = mean + beta_tilde * eta
    return LatentArray(data=mean, timestep=t - 1)


def start_step(lam: float, n_steps: int) -> int:
    """Denoising start index round(lam * n_steps), clamped to [0, n_steps]."""
    if n_steps < 1:
        raise ParameterError(f"n_steps must be >= 1, got {n_steps}")
    raw = int(np.floor(lam * n_steps + 0.5))
    return min(max(raw, 0), n_steps)


def uniform_timesteps(T: int, n_steps: int) -> np.ndarray:
    """n_steps original timesteps uniformly spaced over [1, T], increasing."""
    if not 1 <= n_steps <= T:
        raise ParameterError(f"need 1 <= n_steps <= T, got n_steps={n_steps}, T={T}")
    taus = np.unique(np.round(np.linspace(1, T, n_steps)).astype(int))
    if taus.size != n_steps:
        raise ParameterError(f"cannot place {n_steps} distinct steps in [1, {T}]")
    return taus


def subsample_schedule(s: NoiseSchedule, timesteps: np.ndarray) -> NoiseSchedule:
    """Derive the coarse schedule whose step i is original step timesteps[i-1].

    The derived alpha_bars are the original ones at the selected steps, so
    forward_diffuse/reverse_step keep their meaning on the coarse grid.
    """
    timesteps = np.asarray(timesteps, dtype=int)
    if timesteps.ndim != 1 or timesteps.size < 1 or np.any(np.diff(timesteps) <= 0):
        raise ParameterError("timesteps must be strictly increasing and non-empty")
    if timesteps[0] < 1 or timesteps[-1] > s.T:
        raise ParameterError(f"timesteps must lie in [1, {s.T}]")
    ab = np.array([s.alpha_bar(int(t)) for t in timesteps])
    prev = np.concatenate(([1.0], ab[:-1]))
    betas = 1.0 - ab / prev
    return NoiseSchedule.from_betas(betas)
