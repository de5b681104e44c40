"""Ancestral DDPM sampling."""

from __future__ import annotations

from typing import Callable

import numpy as np
import torch

from ..encoding import ActionImage, DeltaImage, DepthImage
from .schedule import DiffusionConfig, noise_schedule
from .unet import UNet

EpsFn = Callable[[torch.Tensor, int], torch.Tensor]


def ddpm_sample(eps_fn: EpsFn, shape: tuple[int, ...], cfg: DiffusionConfig,
                generator: torch.Generator, dtype=torch.float32) -> torch.Tensor:
    """Run the reverse chain from pure noise with the posterior variance.

    ``eps_fn(x_t, t)`` returns the predicted noise at step ``t``.
    """
    betas, ab = noise_schedule(cfg)
    x = torch.randn(shape, generator=generator, dtype=dtype)
    for t in range(cfg.num_steps - 1, -1, -1):
        eps = eps_fn(x, t)
        beta = float(betas[t])
        mean = (x - beta / (1.0 - ab[t]) ** 0.5 * eps) / (1.0 - beta) ** 0.5
        if t > 0:
            var = beta * (1.0 - ab[t - 1]) / (1.0 - ab[t])
            x = mean + var**0.5 * torch.randn(shape, generator=generator, dtype=dtype)
        else:
            x = mean
    return x


def gaussian_eps(mu: float, sigma: float, alphas_bar: np.ndarray) -> EpsFn:
    """Exact noise predictor for data distributed as N(mu, sigma^2)."""

    def eps(x: torch.Tensor, t: int) -> torch.Tensor:
        a = float(alphas_bar[t])
        var = a * sigma**2 + 1.0 - a
        return (1.0 - a) ** 0.5 * (x - a**0.5 * mu) / var

    return eps


def conditioned_eps(model: UNet, cond: torch.Tensor) -> EpsFn:
    def eps(x: torch.Tensor, t: int) -> torch.Tensor:
        tt = torch.full((x.shape[0],), t, dtype=torch.long)
        return model(torch.cat([x, cond], dim=1), tt)

    return eps


@torch.no_grad()
def sample_f_e_batch(model: UNet, depths: list[DepthImage], actions: list[ActionImage],
                     cfg: DiffusionConfig, seeds: list[int]) -> list[DeltaImage]:
    """Sample environment deltas; each item uses its own noise stream."""
    model.eval()
    cond = torch.from_numpy(np.stack([
        np.concatenate([d.values[None], a.channels_first()], axis=0) for d, a in zip(depths, actions)
    ]).astype(np.float32))
    h, w = depths[0].shape
    gens = [torch.Generator().manual_seed(int(s)) for s in seeds]
    betas, ab = noise_schedule(cfg)
    n = len(depths)
    x = torch.stack([torch.randn((1, h, w), generator=g) for g in gens])
    eps_fn = conditioned_eps(model, cond)
    for t in range(cfg.num_steps - 1, -1, -1):
        eps = eps_fn(x, t)
        beta = float(betas[t])
        mean = (x - beta / (1.0 - ab[t]) ** 0.5 * eps) / (1.0 - beta) ** 0.5
        if t > 0:
            var = beta * (1.0 - ab[t - 1]) / (1.0 - ab[t])
            z = torch.stack([torch.randn((1, h, w), generator=g) for g in gens])
            x = mean + var**0.5 * z
        else:
            x = mean
    out = x.numpy().astype(np.float64)[:, 0]
    return [DeltaImage(np.clip(out[i], -2.0, 2.0)) for i in range(n)]


def sample_f_e(model: UNet, depth: DepthImage, action: ActionImage, cfg: DiffusionConfig,
               seed: int) -> DeltaImage:
    return sample_f_e_batch(model, [depth], [action], cfg, [seed])[0]
