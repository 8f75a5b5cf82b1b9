"""Latent-diffusion machinery: schedules, noising, losses, and sampling.

RNG contract: every stochastic routine takes an explicit torch.Generator
and consumes draws in a documented fixed order (per batch item: one
timestep, then one noise tensor), so scripted oracles can replay streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol, Sequence, runtime_checkable

import numpy as np
import torch

from .errors import ConfigurationError, SamplerUnavailableError, SingularityError

SCHEDULER_DDIM = "ddim_deterministic"
SCHEDULER_ADAPTER = "adapter_native"
SCHEDULER_KINDS = (SCHEDULER_DDIM, SCHEDULER_ADAPTER)

DEFAULT_TIMESTEPS = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 2e-2


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep noise constants; timesteps are 1-based (t in 1..T)."""

    betas: torch.Tensor  # (T,) float64
    alpha_bars: torch.Tensor  # (T,) float64, cumulative products of (1 - beta)

    def __post_init__(self):
        betas = self.betas.to(torch.float64)
        alpha_bars = self.alpha_bars.to(torch.float64)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", alpha_bars)
        if betas.ndim != 1 or betas.shape != alpha_bars.shape or betas.shape[0] < 1:
            raise ValueError("betas and alpha_bars must be equal-length 1-D tensors")
        if not torch.isfinite(betas).all() or not torch.isfinite(alpha_bars).all():
            raise ValueError("schedule constants must be finite")
        if not ((betas > 0) & (betas < 1)).all():
            raise ValueError("betas must lie in (0, 1)")
        if not ((alpha_bars > 0) & (alpha_bars <= 1)).all():
            raise ValueError("alpha_bars must lie in (0, 1]")
        if (alpha_bars.diff() >= 0).any():
            raise ValueError("alpha_bars must be strictly decreasing")
        expected = torch.cumprod(1.0 - betas, dim=0)
        if (alpha_bars - expected).abs().max() > 1e-10:
            raise ValueError("alpha_bars inconsistent with cumulative product of (1 - beta)")

    @classmethod
    def from_betas(cls, betas: torch.Tensor) -> "NoiseSchedule":
        betas = betas.to(torch.float64)
        return cls(betas=betas, alpha_bars=torch.cumprod(1.0 - betas, dim=0))

    @classmethod
    def linear(
        cls,
        timesteps: int = DEFAULT_TIMESTEPS,
        beta_start: float = DEFAULT_BETA_START,
        beta_end: float = DEFAULT_BETA_END,
    ) -> "NoiseSchedule":
        """Linear beta ramp; the toy pipeline default."""
        if timesteps < 1:
            raise ValueError("timesteps must be >= 1")
        return cls.from_betas(torch.linspace(beta_start, beta_end, timesteps, dtype=torch.float64))

    @property
    def timesteps(self) -> int:
        return self.betas.shape[0]

    def alpha_bar(self, t: int) -> float:
        """Cumulative alpha at 1-based timestep t."""
        if not 1 <= t <= self.timesteps:
            raise ValueError(f"timestep {t} out of range [1, {self.timesteps}]")
        return float(self.alpha_bars[t - 1])


def diffuse(
    z0: torch.Tensor, eps: torch.Tensor, alpha_bar: float | torch.Tensor
) -> torch.Tensor:
    """Closed-form noising: sqrt(ab)*z0 + sqrt(1-ab)*eps.

    alpha_bar may be a scalar or a tensor broadcastable against z0
    (per-item signal levels for a batch).
    """
    if eps.shape != z0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != z0 shape {tuple(z0.shape)}")
    if isinstance(alpha_bar, torch.Tensor):
        if not bool(((alpha_bar >= 0.0) & (alpha_bar <= 1.0)).all()):
            raise ValueError("alpha_bar entries outside [0, 1]")
        return alpha_bar.sqrt() * z0 + (1.0 - alpha_bar).sqrt() * eps
    if not 0.0 <= alpha_bar <= 1.0:
        raise ValueError(f"alpha_bar {alpha_bar} outside [0, 1]")
    return math.sqrt(alpha_bar) * z0 + math.sqrt(1.0 - alpha_bar) * eps


def forward_noise(z0: torch.Tensor, t: int, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Noise a clean latent to timestep t under the schedule."""
    return diffuse(z0, eps, schedule.alpha_bar(t))


def denoised_estimate(z_t: torch.Tensor, eps_pred: torch.Tensor, alpha_bar: float) -> torch.Tensor:
    """Algebraic inverse of `diffuse`: (z_t - sqrt(1-ab)*eps_pred) / sqrt(ab).

    Differentiable w.r.t. both inputs, which lets image-space losses reach
    the noise predictor through a one-step denoised estimate.
    """
    if eps_pred.shape != z_t.shape:
        raise ValueError(f"eps_pred shape {tuple(eps_pred.shape)} != z_t shape {tuple(z_t.shape)}")
    if alpha_bar <= 0.0:
        raise SingularityError(f"alpha_bar must be positive, got {alpha_bar}")
    return (z_t - math.sqrt(1.0 - alpha_bar) * eps_pred) / math.sqrt(alpha_bar)


def predict_x0(z_t: torch.Tensor, t: int, eps_pred: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """One-step denoised estimate at 1-based timestep t."""
    return denoised_estimate(z_t, eps_pred, schedule.alpha_bar(t))


@runtime_checkable
class ImageCodecAdapter(Protocol):
    """Encoder/decoder between pixel space and latent space."""

    differentiable_decode: bool
    image_shape: tuple[int, int, int]  # (3, H, W)
    latent_shape: tuple[int, int, int]  # (c, h, w)

    def encode(self, images: torch.Tensor) -> torch.Tensor: ...

    def decode(self, latents: torch.Tensor) -> torch.Tensor: ...


@runtime_checkable
class NoisePredictorAdapter(Protocol):
    """Conditional noise predictor; output shape equals input latent shape.

    Adapters with their own sampling loop may additionally expose
    `native_sample(prompt, models, schedule, config) -> image`.
    """

    def predict(self, z_t: torch.Tensor, t: int, cond: torch.Tensor) -> torch.Tensor: ...

    def parameters(self) -> Sequence[torch.Tensor]: ...


@runtime_checkable
class TextEncoderAdapter(Protocol):
    """Prompt string -> (L, E) embedding sequence; deterministic per checkpoint."""

    def encode(self, prompt: str) -> torch.Tensor: ...

    def parameters(self) -> Sequence[torch.Tensor]: ...


@dataclass
class DiffusionModels:
    codec: ImageCodecAdapter
    predictor: NoisePredictorAdapter
    text_encoder: TextEncoderAdapter


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 25
    guidance_scale: float = 7.5
    seed: int = 0
    scheduler_kind: str = SCHEDULER_DDIM

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1")
        if self.guidance_scale < 0:
            raise ConfigurationError("guidance_scale must be nonnegative")
        if self.scheduler_kind not in SCHEDULER_KINDS:
            raise ConfigurationError(
                f"unknown scheduler_kind {self.scheduler_kind!r}, expected one of {SCHEDULER_KINDS}"
            )


def draw_timestep(rng: torch.Generator, timesteps: int) -> int:
    """Uniform draw from {1..T}; the first draw per batch item."""
    return int(torch.randint(1, timesteps + 1, (1,), generator=rng).item())


def draw_noise(rng: torch.Generator, shape: Sequence[int], dtype: torch.dtype) -> torch.Tensor:
    """Standard normal tensor; the second draw per batch item."""
    return torch.randn(*shape, generator=rng, dtype=dtype)


def _squared_error_mean(eps: torch.Tensor, eps_pred: torch.Tensor) -> torch.Tensor:
    return ((eps - eps_pred) ** 2).mean()


def denoising_loss(
    images: torch.Tensor,
    prompts: Sequence[str],
    models: DiffusionModels,
    schedule: NoiseSchedule,
    rng: torch.Generator,
) -> torch.Tensor:
    """Noise-prediction objective on an image/prompt batch.

    Per item i, in rng order: t_i ~ U{1..T}, then eps_i ~ N(0, I) over the
    latent shape. The loss is the squared error between injected and
    predicted noise, averaged over latent elements and then over the batch.
    Differentiable w.r.t. predictor and text-encoder parameters.
    """
    if images.ndim != 4 or images.shape[0] == 0:
        raise ValueError(f"expected nonempty (B, 3, H, W) batch, got shape {tuple(images.shape)}")
    if len(prompts) != images.shape[0]:
        raise ValueError(f"{images.shape[0]} images but {len(prompts)} prompts")
    terms = []
    for i in range(images.shape[0]):
        t = draw_timestep(rng, schedule.timesteps)
        eps = draw_noise(rng, models.codec.latent_shape, images.dtype)
        z0 = models.codec.encode(images[i : i + 1])[0]
        z_t = forward_noise(z0, t, eps, schedule)
        cond = models.text_encoder.encode(prompts[i])
        eps_pred = models.predictor.predict(z_t.unsqueeze(0), t, cond)[0]
        if eps_pred.shape != z_t.shape:
            raise ValueError(
                f"predictor output shape {tuple(eps_pred.shape)} != latent shape {tuple(z_t.shape)}"
            )
        terms.append(_squared_error_mean(eps, eps_pred))
    return torch.stack(terms).mean()


def prior_preservation_loss(
    prior_images: torch.Tensor,
    prior_prompts: Sequence[str],
    models: DiffusionModels,
    schedule: NoiseSchedule,
    rng: torch.Generator,
) -> torch.Tensor:
    """Same objective as `denoising_loss`, applied to the frozen prior set."""
    if prior_images.ndim != 4 or prior_images.shape[0] == 0:
        raise ValueError("prior set must be a nonempty (B, 3, H, W) batch")
    return denoising_loss(prior_images, prior_prompts, models, schedule, rng)


def ddim_timestep_path(timesteps: int, steps: int) -> list[int]:
    """Strictly decreasing 1-based timesteps visited by the sampler."""
    if steps > timesteps:
        raise ConfigurationError(f"steps {steps} exceeds schedule length {timesteps}")
    path = [int(v) for v in np.round(np.linspace(timesteps, 1, steps))]
    if sorted(set(path), reverse=True) != path:
        raise RuntimeError(f"non-monotone sampler path for T={timesteps}, steps={steps}")
    return path


def _pooled_guidance(
    models: DiffusionModels,
    z: torch.Tensor,
    t: int,
    cond: torch.Tensor,
    uncond: torch.Tensor,
    scale: float,
) -> torch.Tensor:
    eps_u = models.predictor.predict(z, t, uncond)
    if scale == 0.0:
        return eps_u
    eps_c = models.predictor.predict(z, t, cond)
    return eps_u + scale * (eps_c - eps_u)


def sample(
    prompt: str,
    models: DiffusionModels,
    schedule: NoiseSchedule,
    config: SamplerConfig,
    *,
    dtype: torch.dtype = torch.float32,
    return_trajectory: bool = False,
):
    """Generate one image; deterministic given (seed, config, checkpoints).

    The deterministic reverse path starts from seed-drawn noise and, at
    each visited timestep, combines unconditional and conditional noise
    predictions with the configured guidance scale, forms the one-step
    denoised estimate, and re-noises it to the next timestep (eta = 0).
    """
    if config.scheduler_kind == SCHEDULER_ADAPTER:
        native = getattr(models.predictor, "native_sample", None)
        if native is None:
            raise SamplerUnavailableError(
                "scheduler_kind 'adapter_native' requested but the predictor has no native_sample"
            )
        return native(prompt, models, schedule, config)

    rng = torch.Generator().manual_seed(config.seed)
    with torch.no_grad():
        z = draw_noise(rng, models.codec.latent_shape, dtype).unsqueeze(0)
        cond = models.text_encoder.encode(prompt)
        uncond = models.text_encoder.encode("")
        trajectory = [z[0].clone()]
        path = ddim_timestep_path(schedule.timesteps, config.steps)
        for i, t in enumerate(path):
            eps = _pooled_guidance(models, z, t, cond, uncond, config.guidance_scale)
            x0 = denoised_estimate(z, eps, schedule.alpha_bar(t))
            ab_next = schedule.alpha_bar(path[i + 1]) if i + 1 < len(path) else 1.0
            z = math.sqrt(ab_next) * x0 + math.sqrt(1.0 - ab_next) * eps
            trajectory.append(z[0].clone())
        image = models.codec.decode(z)[0].clamp(0.0, 1.0)
    if return_trajectory:
        return image, trajectory
    return image
