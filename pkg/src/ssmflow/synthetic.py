"""Procedural image pairs with exact ground-truth flow.

A texture canvas larger than the frame is drawn once. Frame 2 is the centre
crop; frame 1 samples the canvas at ``x + V(x)``, so backward-warping frame 2
by the ground truth reproduces frame 1 wherever ``x + V(x)`` stays inside the
frame. Pixels whose target leaves the frame are marked occluded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class FlowSample:
    img1: np.ndarray  # (H, W, 3) in [0, 1]
    img2: np.ndarray
    flow: np.ndarray  # (H, W, 2), (dx, dy)
    valid: np.ndarray  # (H, W) bool
    occluded: np.ndarray  # (H, W) bool: target outside frame 2


def sample_bilinear(img: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Sample ``(H, W, C)`` at ``(..., 2)`` (x, y) positions, zero outside."""
    H, W = img.shape[:2]
    x, y = pts[..., 0], pts[..., 1]
    x0, y0 = np.floor(x).astype(int), np.floor(y).astype(int)
    fx, fy = (x - x0)[..., None], (y - y0)[..., None]
    out = np.zeros(pts.shape[:-1] + img.shape[2:])
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xi, yi = x0 + dx, y0 + dy
        ok = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        val = img[np.clip(yi, 0, H - 1), np.clip(xi, 0, W - 1)] * ok[..., None]
        out += val * (fx if dx else 1 - fx) * (fy if dy else 1 - fy)
    return out


def procedural_texture(rng: np.random.Generator, H: int, W: int) -> np.ndarray:
    """Gaussian blobs over bilinear value ("checker") noise, scaled to [0, 1]."""
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    img = np.zeros((H, W, 3))
    for _ in range(max(4, H * W // 40)):
        cx, cy = rng.uniform(0, W), rng.uniform(0, H)
        sigma = rng.uniform(1.5, 4.0)
        amp = rng.uniform(-1.0, 1.0, size=3)
        img += np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma**2))[..., None] * amp
    cell = 4
    lattice = rng.uniform(-1.0, 1.0, size=(H // cell + 2, W // cell + 2, 3))
    img += 0.6 * sample_bilinear(lattice, np.stack([xs / cell, ys / cell], axis=-1))
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo + 1e-12)


def render_pair(canvas: np.ndarray, margin: int, flow: np.ndarray) -> FlowSample:
    H, W = flow.shape[:2]
    img2 = canvas[margin:margin + H, margin:margin + W].copy()
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    grid = np.stack([xs, ys], axis=-1)
    target = grid + flow
    img1 = sample_bilinear(canvas, target + margin)
    tx, ty = target[..., 0], target[..., 1]
    occluded = (tx < 0) | (tx > W - 1) | (ty < 0) | (ty > H - 1)
    return FlowSample(img1, img2, flow.copy(), np.ones((H, W), dtype=bool), occluded)


def motion_field(H: int, W: int, translation, rotation_deg: float = 0.0) -> np.ndarray:
    """Translation plus rotation about the frame centre."""
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    cx, cy = (W - 1) / 2, (H - 1) / 2
    th = np.deg2rad(rotation_deg)
    c, s = np.cos(th), np.sin(th)
    rx = c * (xs - cx) - s * (ys - cy) + cx
    ry = s * (xs - cx) + c * (ys - cy) + cy
    return np.stack([rx - xs + translation[0], ry - ys + translation[1]], axis=-1)


def gen_synthetic(
    seed: int,
    count: int,
    size: int | tuple[int, int] = 32,
    max_disp: float = 4.0,
    max_rotation_deg: float = 0.0,
    integer: bool = False,
) -> list[FlowSample]:
    """Deterministic list of samples; translations are drawn uniformly from the
    disc of radius ``max_disp``."""
    H, W = (size, size) if isinstance(size, int) else size
    rng = np.random.default_rng(seed)
    margin = int(np.ceil(max_disp + np.deg2rad(max_rotation_deg) * max(H, W))) + 2
    out = []
    for _ in range(count):
        r = max_disp * np.sqrt(rng.uniform())
        phi = rng.uniform(0, 2 * np.pi)
        t = np.array([r * np.cos(phi), r * np.sin(phi)])
        if integer:
            t = np.round(t)
        rot = rng.uniform(-max_rotation_deg, max_rotation_deg) if max_rotation_deg else 0.0
        canvas = procedural_texture(rng, H + 2 * margin, W + 2 * margin)
        out.append(render_pair(canvas, margin, motion_field(H, W, t, rot)))
    return out


def translation_sample(seed: int, size: int, shift: tuple[float, float]) -> FlowSample:
    H = W = size
    rng = np.random.default_rng(seed)
    margin = int(np.ceil(max(abs(shift[0]), abs(shift[1])))) + 2
    canvas = procedural_texture(rng, H + 2 * margin, W + 2 * margin)
    return render_pair(canvas, margin, motion_field(H, W, shift))


def split_holdout(samples: list[FlowSample], holdout_fraction: float = 0.2) -> tuple[list[FlowSample], list[FlowSample]]:
    n_hold = max(1, int(round(len(samples) * holdout_fraction)))
    return samples[:-n_hold], samples[-n_hold:]


def stack(samples: list[FlowSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (
        np.stack([s.img1 for s in samples]),
        np.stack([s.img2 for s in samples]),
        np.stack([s.flow for s in samples]),
    )
