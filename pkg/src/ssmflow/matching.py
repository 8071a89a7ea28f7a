"""Global matching: all-pairs cost volume, softmax matching distribution and
flow as the expected target coordinate minus the source coordinate.

Coordinates are ``(x, y) = (column, row)``; flow is stored ``(dx, dy)``.
Inputs may be ``(H, W, D)`` or batched ``(B, H, W, D)``.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

MAX_PIXELS = 4096


class CapacityError(MemoryError):
    """The all-pairs volume would exceed the configured pixel cap."""


def coordinate_grid(H: int, W: int, dtype=None) -> np.ndarray:
    """``G[i, j] = (j, i)``."""
    ys, xs = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    return np.stack([xs, ys], axis=-1).astype(dtype or T.get_dtype())


def _batched(F: Tensor) -> tuple[Tensor, bool]:
    if F.ndim == 3:
        return F.reshape((1,) + F.shape), True
    if F.ndim != 4:
        raise ShapeError(f"features must be (H, W, D) or (B, H, W, D), got {F.shape}")
    return F, False


def build_cost_volume(F_q: Tensor, F_v: Tensor, max_pixels: int = MAX_PIXELS) -> Tensor:
    """``cost[..., i, j, k, l] = <F_q[i, j], F_v[k, l]> / sqrt(D)``."""
    if F_q.shape != F_v.shape:
        raise ShapeError(f"feature shapes differ: {F_q.shape} vs {F_v.shape}")
    fq, unbatched = _batched(F_q)
    fv, _ = _batched(F_v)
    B, H, W, D = fq.shape
    if H * W > max_pixels:
        raise CapacityError(
            f"{H}x{W} = {H * W} pixels exceeds the all-pairs cap of {max_pixels} "
            f"(volume would hold {(H * W) ** 2 * B} entries)"
        )
    q = fq.reshape(B, H * W, D)
    v = fv.reshape(B, H * W, D)
    cost = T.matmul(q, T.swap_last(v)) * (1.0 / math.sqrt(D))
    cost = cost.reshape(B, H, W, H, W)
    return cost.reshape(H, W, H, W) if unbatched else cost


def matching_distribution(cost: Tensor) -> Tensor:
    """Softmax over the two target axes for every source pixel."""
    return T.softmax(cost, axes=(-2, -1))


def initial_flow(M: Tensor, G: np.ndarray | Tensor | None = None) -> Tensor:
    """``V[i, j] = sum_{k,l} M[i, j, k, l] G[k, l] - G[i, j]``."""
    H, W = M.shape[-4], M.shape[-3]
    if M.shape[-2:] != (H, W):
        raise ShapeError(f"matching distribution must be (..., H, W, H, W), got {M.shape}")
    if G is None:
        G = coordinate_grid(H, W, M.dtype)
    G = G if isinstance(G, Tensor) else Tensor(np.asarray(G, dtype=M.dtype))
    if G.shape != (H, W, 2):
        raise ShapeError(f"grid {G.shape} does not match distribution {M.shape}")
    lead = M.shape[:-4]
    m = M.reshape(lead + (H * W, H * W)) if lead else M.reshape(H * W, H * W)
    target = T.matmul(m, G.reshape(H * W, 2))
    return target.reshape(lead + (H, W, 2)) - G


def global_match(F_q: Tensor, F_v: Tensor, max_pixels: int = MAX_PIXELS) -> tuple[Tensor, Tensor]:
    """Returns ``(V_initial, cost_volume)``; the volume is reused for refinement."""
    cost = build_cost_volume(F_q, F_v, max_pixels)
    return initial_flow(matching_distribution(cost)), cost
