"""Autoregressive flow refinement.

Each step looks up local cost evidence around the current flow, encodes motion,
fuses (motion, context, hidden) features with the attention guidance
aggregator, updates the hidden features with a bidirectional Mamba layer and
adds the predicted flow increment. One parameter set serves every iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .mamba import MambaConfig, SelfMambaBlock
from .matching import coordinate_grid
from .nn import Conv2d, LayerNorm, Module
from .polymamba import flatten_2d, unflatten_2d
from .tensor import ArgumentError, ShapeError, Tensor


@dataclass
class PulseConfig:
    feat_dim: int = 128
    hidden_dim: int = 128
    motion_dim: int = 64
    radius: int = 4
    iters: int = 2
    use_aga: bool = True
    mamba_layers: int = 1
    detach_flow: bool = False  # stop gradients through lookup coordinates
    mamba: MambaConfig = field(default_factory=MambaConfig)


@dataclass
class RefinementState:
    h: Tensor
    V: Tensor
    i: int = 0
    attention: Tensor | None = None


def window_offsets(radius: int) -> np.ndarray:
    """``(2r+1)^2`` integer ``(dx, dy)`` offsets in row-major window order."""
    if radius < 0:
        raise ArgumentError("lookup radius must be >= 0")
    d = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(d, d, indexing="ij")
    return np.stack([dx.ravel(), dy.ravel()], axis=-1).astype(np.float64)


def lookup_cost(cost: Tensor, V: Tensor, radius: int) -> Tensor:
    """Bilinearly sample each source pixel's cost map around ``G + V``.

    cost: ``(B, H, W, H, W)``; V: ``(B, H, W, 2)``. Returns
    ``(B, H, W, (2r+1)^2)``; samples falling outside the map read as zero.
    """
    B, H, W = V.shape[:3]
    if cost.shape != (B, H, W, H, W):
        raise ShapeError(f"cost volume {cost.shape} does not match flow {V.shape}")
    G = coordinate_grid(H, W, V.dtype)
    centers = (V + G).reshape(B, H * W, 2)
    maps = cost.reshape(B, H * W, H, W)
    out = T.bilinear_sample(maps, centers, window_offsets(radius))
    return out.reshape(B, H, W, out.shape[-1])


class MotionEncoder(Module):
    """Conv branch on the flow, conv branch on the cost features, fused by a conv."""

    def __init__(self, cost_channels: int, motion_dim: int, rng: np.random.Generator):
        half = motion_dim // 2
        self.flow_conv = Conv2d(2, half, 3, rng)
        self.cost_conv = Conv2d(cost_channels, motion_dim - half, 1, rng)
        self.fuse = Conv2d(motion_dim, motion_dim, 3, rng)

    def forward(self, V: Tensor, costfeat: Tensor) -> Tensor:
        f = T.gelu(self.flow_conv(V))
        c = T.gelu(self.cost_conv(costfeat))
        return T.gelu(self.fuse(T.concat([f, c], axis=-1)))


class _Aligned(Module):
    """1x1 projections of motion, context and hidden features to a shared width."""

    def __init__(self, motion_dim: int, feat_dim: int, hidden_dim: int, rng: np.random.Generator):
        self.align_m = Conv2d(motion_dim, hidden_dim, 1, rng)
        self.align_f = Conv2d(feat_dim, hidden_dim, 1, rng)
        self.align_h = Conv2d(hidden_dim, hidden_dim, 1, rng)

    def aligned(self, M: Tensor, F_q: Tensor, h: Tensor) -> Tensor:
        if not (M.shape[:-1] == F_q.shape[:-1] == h.shape[:-1]):
            raise ShapeError(f"spatial dims disagree: {M.shape}, {F_q.shape}, {h.shape}")
        return T.concat([self.align_m(M), self.align_f(F_q), self.align_h(h)], axis=-1)


def attention_pool(weights: Tensor, stacked: Tensor) -> Tensor:
    """``sum_f A_f * f`` for ``weights (..., S)`` and ``stacked (..., S*C)``."""
    lead, S = weights.shape[:-1], weights.shape[-1]
    C = stacked.shape[-1] // S
    n = int(np.prod(lead))
    out = T.matmul(weights.reshape(n, 1, S), stacked.reshape(n, S, C))
    return out.reshape(lead + (C,))


class AGA(_Aligned):
    """Attention guidance aggregator: per-pixel softmax weights over the three
    aligned feature slots (motion, context, hidden), then a convex combination."""

    def __init__(self, motion_dim: int, feat_dim: int, hidden_dim: int, rng: np.random.Generator):
        super().__init__(motion_dim, feat_dim, hidden_dim, rng)
        self.conv1 = Conv2d(3 * hidden_dim, hidden_dim, 3, rng)
        self.conv2 = Conv2d(hidden_dim, 3, 1, rng)

    def attention_params(self) -> int:
        return self.conv1.num_parameters() + self.conv2.num_parameters()

    def forward(self, M: Tensor, F_q: Tensor, h: Tensor) -> tuple[Tensor, Tensor]:
        cat = self.aligned(M, F_q, h)
        A = T.softmax(self.conv2(T.gelu(self.conv1(cat))), axes=-1)
        return attention_pool(A, cat), A


class ConcatFuse(_Aligned):
    """Ablation baseline: aligned features concatenated and mixed by a 1x1 conv."""

    def __init__(self, motion_dim: int, feat_dim: int, hidden_dim: int, rng: np.random.Generator):
        super().__init__(motion_dim, feat_dim, hidden_dim, rng)
        self.fuse = Conv2d(3 * hidden_dim, hidden_dim, 1, rng)

    def forward(self, M: Tensor, F_q: Tensor, h: Tensor) -> tuple[Tensor, None]:
        return self.fuse(self.aligned(M, F_q, h)), None


class MambaLayer(Module):
    """Pre-norm residual bidirectional Mamba over the flattened feature map."""

    def __init__(self, dim: int, cfg: MambaConfig, rng: np.random.Generator):
        self.norm = LayerNorm(dim)
        self.mixer = SelfMambaBlock(dim, cfg, rng)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.mixer(self.norm(x))


class FlowHead(Module):
    def __init__(self, hidden_dim: int, rng: np.random.Generator):
        self.conv1 = Conv2d(hidden_dim, hidden_dim // 2, 3, rng)
        self.conv2 = Conv2d(hidden_dim // 2, 2, 3, rng)

    def forward(self, h: Tensor) -> Tensor:
        return self.conv2(T.gelu(self.conv1(h)))


def aga(module: AGA, M: Tensor, F_q: Tensor, h: Tensor) -> tuple[Tensor, Tensor]:
    return module(M, F_q, h)


def concat_fuse(module: ConcatFuse, M: Tensor, F_q: Tensor, h: Tensor) -> Tensor:
    return module(M, F_q, h)[0]


class PulseMamba(Module):
    def __init__(self, cfg: PulseConfig, rng: np.random.Generator):
        self.cfg = cfg
        K = (2 * cfg.radius + 1) ** 2
        self.motion = MotionEncoder(K, cfg.motion_dim, rng)
        fuse_cls = AGA if cfg.use_aga else ConcatFuse
        self.aggregator = fuse_cls(cfg.motion_dim, cfg.feat_dim, cfg.hidden_dim, rng)
        self.layers = [MambaLayer(cfg.hidden_dim, cfg.mamba, rng) for _ in range(cfg.mamba_layers)]
        self.head = FlowHead(cfg.hidden_dim, rng)

    def init_state(self, V: Tensor) -> RefinementState:
        h = Tensor(np.zeros(V.shape[:-1] + (self.cfg.hidden_dim,), dtype=V.dtype))
        return RefinementState(h=h, V=V, i=0)

    def step(self, state: RefinementState, F_q: Tensor, cost: Tensor) -> RefinementState:
        V = state.V.detach() if self.cfg.detach_flow else state.V
        costfeat = lookup_cost(cost, V, self.cfg.radius)
        M = self.motion(V, costfeat)
        x, A = self.aggregator(M, F_q, state.h)
        H, W = x.shape[-3], x.shape[-2]
        seq = flatten_2d(x)
        for layer in self.layers:
            seq = layer(seq)
        h = unflatten_2d(seq, H, W)
        return RefinementState(h=h, V=state.V + self.head(h), i=state.i + 1, attention=A)

    def refine(self, V_initial: Tensor, F_q: Tensor, cost: Tensor, iters: int | None = None) -> tuple[Tensor, list[Tensor]]:
        """Returns the final flow and ``[V_initial, V_1, ..., V_N]``."""
        n = self.cfg.iters if iters is None else iters
        if n < 0:
            raise ArgumentError("iteration count must be >= 0")
        state = self.init_state(V_initial)
        flows = [V_initial]
        for _ in range(n):
            state = self.step(state, F_q, cost)
            flows.append(state.V)
        return flows[-1], flows


def pulse_step(module: PulseMamba, state: RefinementState, F_q: Tensor, cost: Tensor) -> RefinementState:
    return module.step(state, F_q, cost)


def refine(module: PulseMamba, V_initial: Tensor, F_q: Tensor, cost: Tensor, iters: int | None = None):
    return module.refine(V_initial, F_q, cost, iters)
