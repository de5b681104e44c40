"""Linear-beta DDPM forward process."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DiffusionConfig:
    num_steps: int = 150
    beta_start: float = 1e-4
    beta_end: float = 0.025
    schedule: str = "linear"
    sampler: str = "ddpm"

    def __post_init__(self) -> None:
        if not 0 < self.beta_start < self.beta_end < 1:
            raise ValueError("need 0 < beta_start < beta_end < 1")
        if self.num_steps < 2:
            raise ValueError("num_steps must be at least 2")
        if self.schedule != "linear" or self.sampler != "ddpm":
            raise ValueError("only the linear schedule and DDPM sampler are supported")


def noise_schedule(cfg: DiffusionConfig) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(betas, alphas_bar)`` as float64 arrays of length ``num_steps``."""
    betas = np.linspace(cfg.beta_start, cfg.beta_end, cfg.num_steps, dtype=np.float64)
    alphas_bar = np.cumprod(1.0 - betas)
    return betas, alphas_bar


def q_sample(x0, t: int, eps, alphas_bar: np.ndarray):
    """Noise ``x0`` to step ``t``: ``sqrt(ab) * x0 + sqrt(1 - ab) * eps``.

    Works for numpy arrays and torch tensors alike.
    """
    if not 0 <= t < len(alphas_bar):
        raise ValueError(f"t={t} outside [0, {len(alphas_bar)})")
    ab = float(alphas_bar[t])
    return ab**0.5 * x0 + (1.0 - ab) ** 0.5 * eps
