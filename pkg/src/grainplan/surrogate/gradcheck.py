"""Central finite-difference check of autograd gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .unet import UNet, UNetConfig


class GradientCheckError(RuntimeError):
    pass


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: dict[str, float]

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values())


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """``|a - b| / max(|a|, |b|)``; entries where both are below ``floor`` count as exact."""
    scale = np.maximum(np.abs(a), np.abs(b))
    return np.where(scale < floor, 0.0, np.abs(a - b) / np.maximum(scale, floor))


def finite_difference_grads(loss_fn, tensor: torch.Tensor, eps: float = 1e-4,
                            entries: np.ndarray | None = None) -> np.ndarray:
    """Central differences of ``loss_fn()`` w.r.t. ``tensor`` (flattened).

    Only the flat indices in ``entries`` are perturbed when given.
    """
    flat = tensor.data.view(-1)
    idx = np.arange(flat.numel()) if entries is None else entries
    out = np.empty(len(idx))
    with torch.no_grad():
        for k, i in enumerate(idx):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = float(loss_fn())
            flat[i] = orig - eps
            down = float(loss_fn())
            flat[i] = orig
            out[k] = (up - down) / (2.0 * eps)
    return out


def micro_config(time_embed: bool = True) -> UNetConfig:
    return UNetConfig(base_channels=4, channel_multipliers=(1, 2), res_blocks_per_level=1, dropout=0.0,
                      time_embed_dim=4 if time_embed else None, in_channels=5 if time_embed else 4,
                      out_channels=1, groups=2, zero_init_output=False)


def check_unet_gradients(cfg: UNetConfig | None = None, size: int = 4, eps: float = 1e-4,
                         seed: int = 0, max_entries: int | None = 8) -> GradCheckReport:
    """Compare autograd and finite differences for every parameter block and the input.

    All weights are re-drawn at random first so zero-initialised layers do not
    mask gradient paths.
    """
    cfg = cfg or micro_config()
    gen = torch.Generator().manual_seed(seed)
    model = UNet(cfg).double().eval()
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.5)
    x = torch.randn(2, cfg.in_channels, size, size, generator=gen, dtype=torch.float64, requires_grad=True)
    t = torch.tensor([3, 17]) if cfg.time_embed_dim else None
    proj = torch.randn(2, cfg.out_channels, size, size, generator=gen, dtype=torch.float64)

    def loss_fn():
        return (model(x, t) * proj).sum()

    model.zero_grad()
    loss = loss_fn()
    loss.backward()
    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    for name, p in [*model.named_parameters(), ("input", x)]:
        n = p.numel()
        idx = np.arange(n) if max_entries is None or n <= max_entries else np.sort(
            rng.choice(n, max_entries, replace=False))
        fd = finite_difference_grads(loss_fn, p, eps, idx)
        errors[name] = float(relative_error(p.grad.numpy().reshape(-1)[idx], fd).max())
    return GradCheckReport(errors)


def assert_gradients(tol: float = 1e-3, **kwargs) -> GradCheckReport:
    report = check_unet_gradients(**kwargs)
    bad = {k: v for k, v in report.max_rel_error.items() if not v < tol}
    if bad:
        raise GradientCheckError(f"gradient check failed: {bad}")
    return report
