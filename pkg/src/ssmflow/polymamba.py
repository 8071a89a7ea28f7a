"""PolyMamba feature enhancement: positional embedding followed by a stack of
(Self-Mamba -> Cross-Mamba -> MLP) blocks applied to both image streams.

Every sub-layer is pre-normalised and wrapped in a residual connection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .mamba import CrossMambaBlock, MambaConfig, SelfMambaBlock
from .nn import MLP, LayerNorm, Module, param
from .tensor import ShapeError, Tensor


@dataclass
class PolyMambaConfig:
    dim: int = 128
    depth: int = 8
    mlp_ratio: int = 4
    use_self: bool = True
    use_cross: bool = True
    use_mlp: bool = True
    use_pos: bool = True
    tie_cross: bool = False  # one Cross-Mamba for both 1->2 and 2->1
    pos_hw: tuple[int, int] = (8, 8)
    mamba: MambaConfig = field(default_factory=MambaConfig)


def flatten_2d(F: Tensor) -> Tensor:
    """``(..., H, W, D) -> (..., H*W, D)`` in row-major order."""
    return F.reshape(F.shape[:-3] + (F.shape[-3] * F.shape[-2], F.shape[-1]))


def unflatten_2d(F: Tensor, H: int, W: int) -> Tensor:
    if F.shape[-2] != H * W:
        raise ShapeError(f"cannot unflatten length {F.shape[-2]} into {H}x{W}")
    return F.reshape(F.shape[:-2] + (H, W, F.shape[-1]))


class PositionalEmbedding(Module):
    """Learnable ``(H, W, D)`` table, bilinearly resampled for other sizes."""

    def __init__(self, H: int, W: int, D: int, rng: np.random.Generator):
        self.table = param(0.02 * rng.standard_normal((H, W, D)))

    def resized(self, H: int, W: int) -> Tensor:
        if self.table.shape[:2] == (H, W):
            return self.table
        return T.resize_bilinear(self.table, (H, W))

    def forward(self, F: Tensor) -> Tensor:
        return add_positional(F, self.resized(F.shape[-3], F.shape[-2]))


def add_positional(F: Tensor, P: Tensor) -> Tensor:
    if F.shape[-3:] != P.shape:
        raise ShapeError(f"positional embedding {P.shape} does not match features {F.shape}")
    return F + P


class PolyMambaBlock(Module):
    def __init__(self, cfg: PolyMambaConfig, rng: np.random.Generator):
        D = cfg.dim
        if cfg.use_self:
            self.norm_self = LayerNorm(D)
            self.self_mamba = SelfMambaBlock(D, cfg.mamba, rng)
        if cfg.use_cross:
            self.norm_cross = LayerNorm(D)
            self.cross_12 = CrossMambaBlock(D, cfg.mamba, rng)
            self.cross_21 = self.cross_12 if cfg.tie_cross else CrossMambaBlock(D, cfg.mamba, rng)
        if cfg.use_mlp:
            self.norm_mlp = LayerNorm(D)
            self.mlp = MLP(D, cfg.mlp_ratio, rng)
        self.cfg = cfg

    def forward(self, f1: Tensor, f2: Tensor) -> tuple[Tensor, Tensor]:
        cfg = self.cfg
        if cfg.use_self:
            # one set of weights for both streams
            f1 = f1 + self.self_mamba(self.norm_self(f1))
            f2 = f2 + self.self_mamba(self.norm_self(f2))
        if cfg.use_cross:
            n1, n2 = self.norm_cross(f1), self.norm_cross(f2)
            f1, f2 = f1 + self.cross_12(n1, n2), f2 + self.cross_21(n2, n1)
        if cfg.use_mlp:
            f1 = f1 + self.mlp(self.norm_mlp(f1))
            f2 = f2 + self.mlp(self.norm_mlp(f2))
        return f1, f2


class PolyMamba(Module):
    def __init__(self, cfg: PolyMambaConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.pos = PositionalEmbedding(*cfg.pos_hw, cfg.dim, rng) if cfg.use_pos else None
        self.blocks = [PolyMambaBlock(cfg, rng) for _ in range(cfg.depth)]

    def forward(self, F1: Tensor, F2: Tensor) -> tuple[Tensor, Tensor]:
        """``(B, H, W, D)`` pair -> enhanced pair ``(F_q, F_v)`` of the same shape."""
        if F1.shape != F2.shape:
            raise ShapeError(f"feature maps differ: {F1.shape} vs {F2.shape}")
        H, W = F1.shape[-3], F1.shape[-2]
        if self.pos is not None:
            F1, F2 = self.pos(F1), self.pos(F2)
        f1, f2 = flatten_2d(F1), flatten_2d(F2)
        for block in self.blocks:
            f1, f2 = block(f1, f2)
        return unflatten_2d(f1, H, W), unflatten_2d(f2, H, W)


def polymamba_forward(stack: PolyMamba, F1: Tensor, F2: Tensor) -> tuple[Tensor, Tensor]:
    return stack(F1, F2)
