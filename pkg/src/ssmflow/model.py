"""End-to-end flow network: shared conv encoder -> PolyMamba -> global matching
-> PulseMamba -> bilinear upsampling."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .matching import global_match
from .nn import Conv2d, Module, instance_norm
from .polymamba import PolyMamba
from .pulsemamba import PulseMamba
from .tensor import ArgumentError, ShapeError, Tensor


class ResidualBlock(Module):
    def __init__(self, c_in: int, c_out: int, stride: int, rng: np.random.Generator):
        self.conv1 = Conv2d(c_in, c_out, 3, rng, stride=stride)
        self.conv2 = Conv2d(c_out, c_out, 3, rng)
        self.skip = Conv2d(c_in, c_out, 1, rng, stride=stride) if (stride != 1 or c_in != c_out) else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.gelu(instance_norm(self.conv1(x)))
        y = instance_norm(self.conv2(y))
        return T.gelu(y + (instance_norm(self.skip(x)) if self.skip is not None else x))


_STRIDES = {4: (2, 1, 2, 1, 1, 1), 8: (2, 1, 2, 1, 2, 1)}


class Backbone(Module):
    """Stem conv, six residual blocks reaching the configured stride, 1x1 output
    head. Every conv is followed by a per-image instance normalisation; without
    it the signal fades through the stack at initialisation and the padded
    border dominates the features."""

    def __init__(self, dim: int, downsample: int, rng: np.random.Generator):
        widths = (dim // 2, dim // 2, 3 * dim // 4, 3 * dim // 4, dim, dim)
        self.downsample = downsample
        self.stem = Conv2d(3, widths[0], 3, rng)
        c = widths[0]
        self.blocks = []
        for w, s in zip(widths, _STRIDES[downsample]):
            self.blocks.append(ResidualBlock(c, w, s, rng))
            c = w
        self.head = Conv2d(c, dim, 1, rng)

    def forward(self, img: Tensor) -> Tensor:
        x = T.gelu(instance_norm(self.stem(img * 2.0 - 1.0)))
        for block in self.blocks:
            x = block(x)
        return instance_norm(self.head(x))


@dataclass
class FlowOutput:
    flow: Tensor  # image resolution, (B, Himg, Wimg, 2)
    flows: list[Tensor]  # feature resolution, [V_initial, V_1, ..., V_N]
    cost: Tensor | None = None
    timings: dict[str, float] = field(default_factory=dict)


def upsample_flow(V: Tensor, factor: int) -> Tensor:
    H, W = V.shape[-3], V.shape[-2]
    return T.resize_bilinear(V, (H * factor, W * factor)) * float(factor)


class MambaFlow(Module):
    def __init__(self, cfg: ModelConfig):
        T.set_precision(cfg.precision)
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.backbone = Backbone(cfg.dim, cfg.downsample, rng)
        self.polymamba = PolyMamba(cfg.polymamba(), rng)
        self.pulse = PulseMamba(cfg.pulse(), rng)

    def extract_features(self, I1: Tensor, I2: Tensor) -> tuple[Tensor, Tensor]:
        """Same encoder weights on both images; output is ``1/downsample`` resolution."""
        s = self.cfg.downsample
        for img in (I1, I2):
            H, W = img.shape[-3], img.shape[-2]
            if H % s or W % s:
                raise ShapeError(
                    f"image size {H}x{W} is not divisible by the encoder stride {s}; "
                    f"pad to {-(-H // s) * s}x{-(-W // s) * s}"
                )
        if I1.shape != I2.shape:
            raise ShapeError(f"image shapes differ: {I1.shape} vs {I2.shape}")
        return self.backbone(I1), self.backbone(I2)

    def forward(self, I1: Tensor, I2: Tensor, iters: int | None = None) -> FlowOutput:
        unbatched = I1.ndim == 3
        if unbatched:
            I1, I2 = I1.reshape((1,) + I1.shape), I2.reshape((1,) + I2.shape)
        timings = {}
        t0 = time.perf_counter()
        F1, F2 = self.extract_features(I1, I2)
        t1 = time.perf_counter()
        F_q, F_v = self.polymamba(F1, F2)
        t2 = time.perf_counter()
        V0, cost = global_match(F_q, F_v, self.cfg.max_pixels)
        t3 = time.perf_counter()
        _, flows = self.pulse.refine(V0, F_q, cost, iters)
        flow = upsample_flow(flows[-1], self.cfg.downsample)
        t4 = time.perf_counter()
        timings.update(backbone=t1 - t0, polymamba=t2 - t1, matching=t3 - t2, pulsemamba=t4 - t3)
        if unbatched:
            flow = flow.reshape(flow.shape[1:])
            flows = [f.reshape(f.shape[1:]) for f in flows]
        return FlowOutput(flow=flow, flows=flows, cost=cost, timings=timings)


def model_forward(model: MambaFlow, I1: Tensor, I2: Tensor, iters: int | None = None) -> FlowOutput:
    return model(I1, I2, iters)


def sequence_loss(flows: list[Tensor], gt: Tensor | np.ndarray, gamma: float = 0.8) -> Tensor:
    """``sum_i gamma^(N-i) * mean_pixels(|du| + |dv|)`` over ``flows[0..N]``."""
    if not 0.0 < gamma <= 1.0:
        raise ArgumentError(f"gamma must lie in (0, 1], got {gamma}")
    gt = gt if isinstance(gt, Tensor) else Tensor(np.asarray(gt, dtype=flows[0].dtype))
    n = len(flows) - 1
    total = None
    for i, V in enumerate(flows):
        if V.shape != gt.shape:
            raise ShapeError(f"prediction {i} has shape {V.shape}, ground truth {gt.shape}")
        l1 = T.abs_(V - gt).sum(axis=-1).mean()
        term = l1 * (gamma ** (n - i))
        total = term if total is None else total + term
    return total


def count_parameters(model: MambaFlow) -> dict[str, int]:
    counts = {
        "backbone": model.backbone.num_parameters(),
        "polymamba": model.polymamba.num_parameters(),
        "pulsemamba": model.pulse.num_parameters(),
    }
    counts["total"] = model.num_parameters()
    return counts
