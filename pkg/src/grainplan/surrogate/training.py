"""Training loops for the environment (diffusion) and robot (regression) predictors."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from ..encoding import DepthImage, paste_obstacle_augment
from ..terrain import RobotGeometry
from .gradcheck import assert_gradients, micro_config
from .schedule import DiffusionConfig, noise_schedule
from .unet import UNet, UNetConfig

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adamw"
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 1
    epochs: int = 20
    rng_seed: int = 0
    val_fraction: float = 0.0
    patience: int | None = None

    def __post_init__(self) -> None:
        if self.optimizer != "adamw":
            raise ValueError("only adamw is supported")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")


F_E_TRAIN_PAPER = TrainConfig(learning_rate=1e-5, weight_decay=1e-5, batch_size=1)
F_R_TRAIN_PAPER = TrainConfig(learning_rate=1e-4, weight_decay=1e-4, batch_size=1)


@dataclass
class TripletDataset:
    """Stacked ``(depth, action, delta)`` samples.

    depth: (N, H, W) in [-1, 1]; action: (N, 3, H, W); target: (N, H, W).
    """

    depth: np.ndarray
    action: np.ndarray
    target: np.ndarray
    cm_per_px: float = 1.0

    def __post_init__(self) -> None:
        n = len(self.depth)
        if n == 0:
            raise ValueError("dataset is empty")
        if len(self.action) != n or len(self.target) != n:
            raise ValueError("dataset arrays differ in length")

    def __len__(self) -> int:
        return len(self.depth)

    def split(self, val_fraction: float, rng: np.random.Generator):
        n_val = int(round(len(self) * val_fraction))
        if n_val == 0 or n_val >= len(self):
            return self, None
        perm = rng.permutation(len(self))
        va, tr = perm[:n_val], perm[n_val:]
        pick = lambda idx: TripletDataset(self.depth[idx], self.action[idx], self.target[idx], self.cm_per_px)
        return pick(tr), pick(va)


@dataclass
class TrainResult:
    model: UNet
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)

    def write_loss_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss"])
            for i, tl in enumerate(self.train_loss):
                vl = self.val_loss[i] if i < len(self.val_loss) else ""
                w.writerow([i + 1, f"{tl:.8g}", vl if vl == "" else f"{vl:.8g}"])


def _seed_all(seed: int) -> torch.Generator:
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


def _as_tensor(a: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))


def _optimizer(model: UNet, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)


def _check_finite(loss: torch.Tensor, epoch: int, step: int) -> None:
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")


def _batches(n: int, size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for i in range(0, n, size):
        yield perm[i : i + size]


def _diffusion_loss(model, depth, action, target, alphas_bar_t, gen, T):
    b = target.shape[0]
    t = torch.randint(0, T, (b,), generator=gen)
    eps = torch.randn(target.shape, generator=gen)
    ab = alphas_bar_t[t].view(-1, 1, 1, 1)
    x_t = ab.sqrt() * target + (1 - ab).sqrt() * eps
    pred = model(torch.cat([x_t, depth, action], dim=1), t)
    return F.mse_loss(pred, eps)


def train_f_e(
    data: TripletDataset,
    unet_cfg: UNetConfig,
    diff_cfg: DiffusionConfig,
    train_cfg: TrainConfig,
    gradient_check: bool = True,
) -> TrainResult:
    """Train the conditional epsilon-prediction diffusion model.

    Input channels: noisy delta, depth, RGB action (5 total).
    """
    if unet_cfg.in_channels != 5 or unet_cfg.out_channels != 1 or not unet_cfg.time_embed_dim:
        raise ValueError("f_e needs 5 input channels, 1 output channel and a time embedding")
    if gradient_check:
        assert_gradients(cfg=micro_config(True))
    gen = _seed_all(train_cfg.rng_seed)
    rng = np.random.default_rng(train_cfg.rng_seed)
    train, val = data.split(train_cfg.val_fraction, rng)
    model = UNet(unet_cfg)
    opt = _optimizer(model, train_cfg)
    _, ab = noise_schedule(diff_cfg)
    ab_t = torch.tensor(ab, dtype=torch.float32)
    T = diff_cfg.num_steps
    depth, action, target = (_as_tensor(train.depth[:, None]), _as_tensor(train.action),
                             _as_tensor(train.target[:, None]))
    result = TrainResult(model)
    best, stale = math.inf, 0
    for epoch in range(1, train_cfg.epochs + 1):
        model.train()
        total, count = 0.0, 0
        for step, idx in enumerate(_batches(len(train), train_cfg.batch_size, rng)):
            idx = torch.from_numpy(idx)
            loss = _diffusion_loss(model, depth[idx], action[idx], target[idx], ab_t, gen, T)
            _check_finite(loss, epoch, step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        result.train_loss.append(total / count)
        if val is not None:
            vgen = torch.Generator().manual_seed(train_cfg.rng_seed + 1)
            model.eval()
            with torch.no_grad():
                vl = float(_diffusion_loss(model, _as_tensor(val.depth[:, None]), _as_tensor(val.action),
                                           _as_tensor(val.target[:, None]), ab_t, vgen, T))
            result.val_loss.append(vl)
            if train_cfg.patience is not None:
                best, stale = (vl, 0) if vl < best else (best, stale + 1)
                if stale > train_cfg.patience:
                    log.info("f_e early stop at epoch %d", epoch)
                    break
        log.debug("f_e epoch %d loss %.5f", epoch, result.train_loss[-1])
    model.eval()
    return result


def train_f_r(
    data: TripletDataset,
    unet_cfg: UNetConfig,
    train_cfg: TrainConfig,
    augment: bool = False,
    geom: RobotGeometry | None = None,
    gradient_check: bool = True,
) -> TrainResult:
    """Direct regression of the robot delta image from (depth, action).

    With ``augment`` each epoch sees the depth input with 1-3 pasted
    obstacles; the label is left untouched.
    """
    if unet_cfg.in_channels != 4 or unet_cfg.out_channels != 1 or unet_cfg.time_embed_dim:
        raise ValueError("f_r needs 4 input channels, 1 output channel and no time embedding")
    if gradient_check:
        assert_gradients(cfg=micro_config(False))
    geom = geom or RobotGeometry()
    _seed_all(train_cfg.rng_seed)
    rng = np.random.default_rng(train_cfg.rng_seed)
    train, val = data.split(train_cfg.val_fraction, rng)
    model = UNet(unet_cfg)
    opt = _optimizer(model, train_cfg)
    action = _as_tensor(train.action)
    target = _as_tensor(train.target[:, None])
    result = TrainResult(model)
    best, stale = math.inf, 0
    for epoch in range(1, train_cfg.epochs + 1):
        model.train()
        depth_np = augmented_inputs(train, rng, geom) if augment else train.depth
        depth = _as_tensor(depth_np[:, None])
        total, count = 0.0, 0
        for step, idx in enumerate(_batches(len(train), train_cfg.batch_size, rng)):
            idx = torch.from_numpy(idx)
            pred = model(torch.cat([depth[idx], action[idx]], dim=1))
            loss = F.mse_loss(pred, target[idx])
            _check_finite(loss, epoch, step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        result.train_loss.append(total / count)
        if val is not None:
            model.eval()
            with torch.no_grad():
                pred = model(torch.cat([_as_tensor(val.depth[:, None]), _as_tensor(val.action)], dim=1))
                vl = float(F.mse_loss(pred, _as_tensor(val.target[:, None])))
            result.val_loss.append(vl)
            if train_cfg.patience is not None:
                best, stale = (vl, 0) if vl < best else (best, stale + 1)
                if stale > train_cfg.patience:
                    break
    model.eval()
    return result


def augmented_inputs(data: TripletDataset, rng: np.random.Generator, geom: RobotGeometry) -> np.ndarray:
    out = np.empty_like(data.depth)
    for i, d in enumerate(data.depth):
        out[i] = paste_obstacle_augment(DepthImage(d, data.cm_per_px), rng, geom).values
    return out
