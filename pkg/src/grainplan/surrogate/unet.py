"""Residual U-Net with an optional sinusoidal time embedding."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F


@dataclass(frozen=True)
class UNetConfig:
    base_channels: int = 64
    channel_multipliers: tuple[int, ...] = (1, 2, 4, 8)
    res_blocks_per_level: int = 2
    dropout: float = 0.1
    time_embed_dim: int | None = None
    activation: str = "relu"
    in_channels: int = 4
    out_channels: int = 1
    groups: int = 4
    zero_init_output: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "channel_multipliers", tuple(int(m) for m in self.channel_multipliers))
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.activation != "relu":
            raise ValueError("only relu activation is supported")
        if not self.channel_multipliers or self.base_channels < 1:
            raise ValueError("need at least one level and positive base width")

    @property
    def downsample_factor(self) -> int:
        return 2 ** (len(self.channel_multipliers) - 1)

    def check_resolution(self, h: int, w: int) -> None:
        f = self.downsample_factor
        if h % f or w % f:
            raise ValueError(f"resolution {h}x{w} not divisible by {f}")


# Appendix hyperparameters (full-scale networks).
F_E_PAPER = UNetConfig(base_channels=64, channel_multipliers=(1, 2, 4, 8, 16), res_blocks_per_level=2,
                       dropout=0.1, time_embed_dim=32, in_channels=5, out_channels=1)
F_R_PAPER = UNetConfig(base_channels=64, channel_multipliers=(1, 2, 4, 8), res_blocks_per_level=2,
                       dropout=0.1, time_embed_dim=None, in_channels=4, out_channels=1)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _norm(ch: int, groups: int) -> nn.GroupNorm:
    g = math.gcd(ch, groups)
    return nn.GroupNorm(g, ch)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, temb: int | None, dropout: float, groups: int):
        super().__init__()
        self.norm1 = _norm(c_in, groups)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(temb, c_out) if temb else None
        self.norm2 = _norm(c_out, groups)
        self.drop = nn.Dropout(dropout)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, emb=None):
        h = self.conv1(F.relu(self.norm1(x)))
        if self.temb is not None:
            # Time embedding is injected additively after the first convolution.
            h = h + self.temb(emb)[:, :, None, None]
        h = self.conv2(self.drop(F.relu(self.norm2(h))))
        return self.skip(x) + h


class Downsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class UNet(nn.Module):
    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        base = cfg.base_channels
        widths = [base * m for m in cfg.channel_multipliers]
        temb = None
        if cfg.time_embed_dim:
            temb = 4 * cfg.time_embed_dim
            self.time_mlp = nn.Sequential(
                nn.Linear(cfg.time_embed_dim, temb), nn.ReLU(), nn.Linear(temb, temb)
            )
        self.inp = nn.Conv2d(cfg.in_channels, base, 3, padding=1)
        self.down = nn.ModuleList()
        skips = [base]
        ch = base
        for i, w in enumerate(widths):
            for _ in range(cfg.res_blocks_per_level):
                self.down.append(ResBlock(ch, w, temb, cfg.dropout, cfg.groups))
                ch = w
                skips.append(ch)
            if i < len(widths) - 1:
                self.down.append(Downsample(ch))
                skips.append(ch)
        self.mid = nn.ModuleList([
            ResBlock(ch, ch, temb, cfg.dropout, cfg.groups),
            ResBlock(ch, ch, temb, cfg.dropout, cfg.groups),
        ])
        self.up = nn.ModuleList()
        for i, w in reversed(list(enumerate(widths))):
            for _ in range(cfg.res_blocks_per_level + 1):
                self.up.append(ResBlock(ch + skips.pop(), w, temb, cfg.dropout, cfg.groups))
                ch = w
            if i > 0:
                self.up.append(Upsample(ch))
        self.out_norm = _norm(ch, cfg.groups)
        self.out = nn.Conv2d(ch, cfg.out_channels, 3, padding=1)
        # Convolutions keep torch's He-uniform default (kaiming_uniform_, a=sqrt(5)).
        if cfg.zero_init_output:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor, t: torch.Tensor | None = None) -> torch.Tensor:
        if x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected {self.cfg.in_channels} input channels, got {x.shape[1]}")
        self.cfg.check_resolution(x.shape[2], x.shape[3])
        emb = None
        if self.cfg.time_embed_dim:
            if t is None:
                raise ValueError("time step required")
            t = torch.as_tensor(t).reshape(-1).expand(x.shape[0])
            emb = self.time_mlp(timestep_embedding(t, self.cfg.time_embed_dim).to(x.dtype))
        h = self.inp(x)
        hs = [h]
        for m in self.down:
            h = m(h, emb) if isinstance(m, ResBlock) else m(h)
            hs.append(h)
        for m in self.mid:
            h = m(h, emb)
        for m in self.up:
            if isinstance(m, ResBlock):
                h = m(torch.cat([h, hs.pop()], dim=1), emb)
            else:
                h = m(h)
        return self.out(F.relu(self.out_norm(h)))

    def bottleneck_resolution(self, h: int, w: int) -> tuple[int, int]:
        f = self.cfg.downsample_factor
        return h // f, w // f
