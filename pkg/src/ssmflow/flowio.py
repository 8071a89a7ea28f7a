"""Middlebury ``.flo`` files, flow colour coding, and PPM/PNG images."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

FLO_MAGIC = 202021.25


class FlowFormatError(ValueError):
    pass


class FlowTruncatedError(FlowFormatError):
    pass


def write_flo(flow: np.ndarray, path: str | Path) -> None:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be (H, W, 2), got {flow.shape}")
    h, w = flow.shape[:2]
    header = struct.pack("<fii", FLO_MAGIC, w, h)
    Path(path).write_bytes(header + np.ascontiguousarray(flow, dtype="<f4").tobytes())


def parse_flo(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 12:
        raise FlowTruncatedError(f"{source}: {len(buf)} bytes is shorter than the 12-byte header")
    magic, w, h = struct.unpack("<fii", buf[:12])
    if magic != np.float32(FLO_MAGIC):
        raise FlowFormatError(f"{source}: bad magic {magic!r}, expected {FLO_MAGIC}")
    if w <= 0 or h <= 0:
        raise FlowFormatError(f"{source}: invalid size {w}x{h}")
    need = 12 + 8 * w * h
    if len(buf) < need:
        raise FlowTruncatedError(f"{source}: expected {need} bytes for {w}x{h}, got {len(buf)}")
    return np.frombuffer(buf[12:need], dtype="<f4").reshape(h, w, 2).copy()


def read_flo(path: str | Path) -> np.ndarray:
    return parse_flo(Path(path).read_bytes(), str(path))


# -- colour wheel -------------------------------------------------------------


def make_color_wheel() -> np.ndarray:
    """55 RGB colours: 15 red-yellow, 6 yellow-green, 4 green-cyan, 11 cyan-blue,
    13 blue-magenta, 6 magenta-red."""
    RY, YG, GC, CB, BM, MR = 15, 6, 4, 11, 13, 6
    wheel = np.zeros((RY + YG + GC + CB + BM + MR, 3))
    col = 0
    wheel[col:col + RY, 0] = 255
    wheel[col:col + RY, 1] = np.floor(255 * np.arange(RY) / RY)
    col += RY
    wheel[col:col + YG, 0] = 255 - np.floor(255 * np.arange(YG) / YG)
    wheel[col:col + YG, 1] = 255
    col += YG
    wheel[col:col + GC, 1] = 255
    wheel[col:col + GC, 2] = np.floor(255 * np.arange(GC) / GC)
    col += GC
    wheel[col:col + CB, 1] = 255 - np.floor(255 * np.arange(CB) / CB)
    wheel[col:col + CB, 2] = 255
    col += CB
    wheel[col:col + BM, 2] = 255
    wheel[col:col + BM, 0] = np.floor(255 * np.arange(BM) / BM)
    col += BM
    wheel[col:col + MR, 2] = 255 - np.floor(255 * np.arange(MR) / MR)
    wheel[col:col + MR, 0] = 255
    return wheel


def flow_to_color(flow: np.ndarray, max_norm: float | None = None) -> np.ndarray:
    """Render ``(H, W, 2)`` flow as ``(H, W, 3)`` uint8.

    Hue follows the flow direction (+x maps to wheel entry 0, red), saturation
    the magnitude divided by ``max_norm`` (default: 99th percentile), clamped to
    1. Zero flow is white.
    """
    flow = np.asarray(flow, dtype=np.float64)
    u, v = flow[..., 0], flow[..., 1]
    mag = np.hypot(u, v)
    if max_norm is None:
        max_norm = float(np.percentile(mag, 99)) if mag.size else 0.0
    elif max_norm <= 0:
        raise ValueError("max_norm must be positive")
    rad = np.clip(mag / max_norm, 0.0, 1.0) if max_norm > 0 else np.zeros_like(mag)
    wheel = make_color_wheel()
    ncols = wheel.shape[0]
    angle = np.mod(np.arctan2(v, u), 2 * np.pi) / (2 * np.pi)  # [0, 1), 0 = +x
    fk = angle * ncols
    k0 = np.floor(fk).astype(int) % ncols
    k1 = (k0 + 1) % ncols
    f = fk - np.floor(fk)
    img = np.empty(flow.shape[:-1] + (3,), dtype=np.uint8)
    for c in range(3):
        col = ((1 - f) * wheel[k0, c] + f * wheel[k1, c]) / 255.0
        col = 1 - rad * (1 - col)
        img[..., c] = np.floor(255 * col + 0.5).astype(np.uint8)
    return img


# -- images -------------------------------------------------------------------


def write_ppm(img: np.ndarray, path: str | Path) -> None:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: only binary P6 PPM is supported, got {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported (maxval {maxval})")
    data = buf[pos + 1:pos + 1 + 3 * w * h]
    if len(data) != 3 * w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


def read_image(path: str | Path) -> np.ndarray:
    """Load PPM or PNG as float ``(H, W, 3)`` in ``[0, 1]``."""
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pnm"):
        img = read_ppm(path)
    else:
        from PIL import Image

        with Image.open(path) as im:
            img = np.asarray(im.convert("RGB"))
    return img.astype(np.float64) / 255.0


def write_image(img: np.ndarray, path: str | Path) -> None:
    """Write uint8 (or [0, 1] float) RGB as PPM or PNG by extension."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pnm"):
        write_ppm(img, path)
    else:
        from PIL import Image

        Image.fromarray(img, "RGB").save(path)
