"""Forward-diffusion noise schedule and the single-step noising operation."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .seeding import rng

_TAG_NOISE = 201

DEFAULT_TIMESTEPS = 1000
DEFAULT_BETA_START = 0.00085
DEFAULT_BETA_END = 0.012


@dataclass(frozen=True)
class NoiseSchedule:
    """Beta sequence with its cumulative signal-retention coefficients.

    ``alpha_bar[t]`` is the product of (1 - beta_i) for i <= t, so it is
    strictly decreasing and sits in (0, 1) for every timestep.
    """

    beta: np.ndarray
    alpha_bar: np.ndarray = field(init=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size == 0:
            raise InvalidInputError("beta must be a non-empty 1-D sequence")
        if not ((beta > 0) & (beta < 1)).all():
            raise InvalidInputError("beta values must lie in (0, 1)")
        alpha_bar = np.cumprod(1.0 - beta)
        if not (np.diff(alpha_bar) < 0).all():
            raise InvalidInputError("alpha_bar must be strictly decreasing")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha_bar", alpha_bar)

    @property
    def num_timesteps(self) -> int:
        return int(self.beta.size)

    def content_hash(self) -> str:
        return hashlib.sha256(self.beta.tobytes()).hexdigest()


def scaled_linear_schedule(num_timesteps: int = DEFAULT_TIMESTEPS,
                           beta_start: float = DEFAULT_BETA_START,
                           beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    """Schedule with betas linear in sqrt space, as used by the pretrained latent model."""
    if num_timesteps < 1:
        raise InvalidInputError("num_timesteps must be positive")
    beta = np.linspace(beta_start ** 0.5, beta_end ** 0.5, num_timesteps) ** 2
    return NoiseSchedule(beta=beta)


def add_noise(latent: np.ndarray, t: int, schedule: NoiseSchedule,
              noise: np.ndarray | None = None, seed: int = 0) -> np.ndarray:
    """Blend a latent with Gaussian noise at timestep t.

    Returns sqrt(alpha_bar_t) * latent + sqrt(1 - alpha_bar_t) * eps, drawing
    eps from a seeded standard normal when not supplied.

    Args:
        latent: clean latent array, any shape.
        t: timestep, 1 <= t < schedule.num_timesteps.
        schedule: the noise schedule.
        noise: optional forced eps, shaped like the latent.
        seed: stream seed for the eps draw when noise is None.
    """
    latent = np.asarray(latent, dtype=np.float64)
    if not (1 <= t < schedule.num_timesteps):
        raise InvalidInputError(
            f"timestep {t} outside [1, {schedule.num_timesteps})")
    if noise is None:
        eps = rng(seed, _TAG_NOISE).standard_normal(latent.shape)
    else:
        eps = np.asarray(noise, dtype=np.float64)
        if eps.shape != latent.shape:
            raise InvalidInputError(
                f"noise shape {eps.shape} does not match latent {latent.shape}")
    a = schedule.alpha_bar[t]
    return np.sqrt(a) * latent + np.sqrt(1.0 - a) * eps
