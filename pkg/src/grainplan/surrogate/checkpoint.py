"""Binary parameter checkpoints.

Layout (little-endian throughout)::

    b"GPCK"  u32 version  u32 config_len  config_json
    u32 n_tensors
    n_tensors x (u16 name_len, name_utf8, u8 ndim, ndim x u32 dims, float32 data)
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .schedule import DiffusionConfig
from .unet import UNet, UNetConfig

MAGIC = b"GPCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, model: UNet, kind: str, diffusion: DiffusionConfig | None = None,
                    extra: dict | None = None) -> None:
    cfg = {"kind": kind, "unet": asdict(model.cfg)}
    if diffusion is not None:
        cfg["diffusion"] = asdict(diffusion)
    if extra:
        cfg["extra"] = extra
    blob = json.dumps(cfg, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(blob)))
    buf.write(blob)
    state = model.state_dict()
    buf.write(struct.pack("<I", len(state)))
    for name, t in state.items():
        arr = t.detach().cpu().numpy().astype("<f4")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[UNet, dict]:
    """Rebuild the model from its config echo and load the tensors."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    version, n = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    cfg = json.loads(data[pos : pos + n].decode("utf-8"))
    pos += n
    ucfg = cfg["unet"]
    ucfg["channel_multipliers"] = tuple(ucfg["channel_multipliers"])
    model = UNet(UNetConfig(**ucfg))
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    state = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + ln].decode("utf-8")
        pos += ln
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        state[name] = torch.from_numpy(arr.astype(np.float32))
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(str(exc)) from exc
    model.eval()
    if "diffusion" in cfg:
        cfg["diffusion"] = DiffusionConfig(**cfg["diffusion"])
    return model, cfg
