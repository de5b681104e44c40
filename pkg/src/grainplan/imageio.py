"""Netpbm persistence for depth, delta and action images.

Depth and delta images are 16-bit binary PGM (P5, big-endian samples as the
format requires); action images are 8-bit binary PPM (P6).  The header is
always::

    P5
    # cm_per_px=<float> lo=<float> hi=<float> h_max=<float>
    <width> <height>
    <maxval>

so identical images always produce identical bytes.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .encoding import H_MAX, ActionImage, DeltaImage, DepthImage


GRAY_MAX = 65534


class ImageFormatError(ValueError):
    pass


def _header(magic: str, width: int, height: int, maxval: int, meta: dict[str, float]) -> bytes:
    comment = " ".join(f"{k}={v!r}" for k, v in meta.items())
    return f"{magic}\n# {comment}\n{width} {height}\n{maxval}\n".encode("ascii")


def _parse(data: bytes) -> tuple[str, dict[str, float], int, int, int, bytes]:
    tokens: list[bytes] = []
    meta: dict[str, float] = {}
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            end = data.index(b"\n", pos)
            for k, v in re.findall(r"(\w+)=([-+0-9.eE]+)", data[pos + 1 : end].decode("ascii")):
                meta[k] = float(v)
            pos = end + 1
            continue
        m = re.match(rb"\S+", data[pos:])
        if m is None:
            raise ImageFormatError("truncated header")
        tokens.append(m.group())
        pos += m.end()
    pos += 1  # single whitespace before the raster
    magic = tokens[0].decode("ascii")
    width, height, maxval = (int(t) for t in tokens[1:])
    return magic, meta, width, height, maxval, data[pos:]


def encode_gray(values: np.ndarray, lo: float, hi: float, cm_per_px: float, h_max: float = H_MAX) -> bytes:
    # An even maxval puts the midpoint of symmetric ranges (zero) on a level.
    q = np.rint((np.clip(values, lo, hi) - lo) / (hi - lo) * GRAY_MAX).astype(">u2")
    h, w = values.shape
    meta = {"cm_per_px": float(cm_per_px), "lo": float(lo), "hi": float(hi), "h_max": float(h_max)}
    return _header("P5", w, h, GRAY_MAX, meta) + q.tobytes()


def decode_gray(data: bytes) -> tuple[np.ndarray, dict[str, float]]:
    magic, meta, w, h, maxval, raster = _parse(data)
    if magic != "P5":
        raise ImageFormatError(f"expected P5, got {magic}")
    dtype = ">u2" if maxval > 255 else "u1"
    n = w * h * np.dtype(dtype).itemsize
    if len(raster) < n:
        raise ImageFormatError("raster shorter than header declares")
    q = np.frombuffer(raster[:n], dtype=dtype).reshape(h, w).astype(np.float64)
    lo, hi = meta.get("lo", -1.0), meta.get("hi", 1.0)
    return lo + q / maxval * (hi - lo), meta


def write_depth(path: str | Path, img: DepthImage) -> None:
    Path(path).write_bytes(encode_gray(img.values, -1.0, 1.0, img.cm_per_px, img.h_max))


def read_depth(path: str | Path) -> DepthImage:
    values, meta = decode_gray(Path(path).read_bytes())
    return DepthImage(values, meta.get("cm_per_px", 1.0), meta.get("h_max", H_MAX))


def write_delta(path: str | Path, img: DeltaImage, cm_per_px: float) -> None:
    Path(path).write_bytes(encode_gray(img.values, -2.0, 2.0, cm_per_px))


def read_delta(path: str | Path) -> DeltaImage:
    values, _ = decode_gray(Path(path).read_bytes())
    return DeltaImage(values)


def write_action(path: str | Path, img: ActionImage, cm_per_px: float) -> None:
    h, w, _ = img.values.shape
    q = np.rint(np.clip(img.values, 0.0, 1.0) * 255).astype(np.uint8)
    Path(path).write_bytes(_header("P6", w, h, 255, {"cm_per_px": float(cm_per_px)}) + q.tobytes())


def read_action(path: str | Path) -> ActionImage:
    magic, _, w, h, maxval, raster = _parse(Path(path).read_bytes())
    if magic != "P6" or maxval != 255:
        raise ImageFormatError("expected 8-bit P6")
    if len(raster) < w * h * 3:
        raise ImageFormatError("raster shorter than header declares")
    q = np.frombuffer(raster[: w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return ActionImage(q.astype(np.float64) / 255.0)
