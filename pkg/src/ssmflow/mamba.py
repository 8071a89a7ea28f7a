"""Bidirectional Self-Mamba and Cross-Mamba blocks over ``(..., L, D)`` sequences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import CausalDWConv1d, Linear, Module, param
from .ssm import init_A_log, init_dt_bias, selective_scan
from .tensor import ShapeError, Tensor


@dataclass
class MambaConfig:
    d_state: int = 16
    expand: int = 2
    conv_width: int = 4
    tied: bool = False  # share parameters between the two scan directions
    skip: bool = False  # D*x feed-through; off keeps y = C h
    bidirectional: bool = True


def _dt_linear(d_in: int, d_out: int, rng: np.random.Generator) -> Linear:
    lin = Linear(d_in, d_out, rng)
    lin.weight.data = lin.weight.data * 0.1
    lin.bias.data = init_dt_bias(d_out, rng).astype(lin.bias.dtype)
    return lin


class SelfMambaDirection(Module):
    """One scan direction of a gated Mamba block (expansion D -> E = expand*D)."""

    def __init__(self, d_model: int, cfg: MambaConfig, rng: np.random.Generator):
        E, N = cfg.expand * d_model, cfg.d_state
        self.expanded = E
        self.in_proj = Linear(d_model, 2 * E, rng)
        self.conv = CausalDWConv1d(E, cfg.conv_width, rng)
        self.s_delta = _dt_linear(E, E, rng)
        self.s_B = Linear(E, N, rng)
        self.s_C = Linear(E, N, rng)
        self.A_log = param(init_A_log(E, N))
        self.D_skip = param(np.ones(E)) if cfg.skip else None
        self.out_proj = Linear(E, d_model, rng)

    def forward(self, x: Tensor) -> Tensor:
        E = self.expanded
        xz = self.in_proj(x)
        xi, gate = xz[..., :E], xz[..., E:]
        xc = T.silu(self.conv(xi))
        delta = T.softplus(self.s_delta(xc))
        A = -T.exp(self.A_log)
        y = selective_scan(xc, delta, A, self.s_B(xc), self.s_C(xc))
        if self.D_skip is not None:
            y = y + xc * self.D_skip
        return self.out_proj(y * T.silu(gate))


class SelfMambaBlock(Module):
    """``fwd(F) + rev(bwd(rev(F)))`` with reversal along the sequence axis."""

    def __init__(self, d_model: int, cfg: MambaConfig, rng: np.random.Generator):
        self.fwd = SelfMambaDirection(d_model, cfg, rng)
        if cfg.bidirectional:
            self.bwd = self.fwd if cfg.tied else SelfMambaDirection(d_model, cfg, rng)
        else:
            self.bwd = None

    def forward(self, F: Tensor) -> Tensor:
        out = self.fwd(F)
        if self.bwd is not None:
            out = out + T.reverse(self.bwd(T.reverse(F, -2)), -2)
        return out


class CrossMambaDirection(Module):
    """One direction of Cross-Mamba.

    The first stream is the scanned signal (causal depthwise conv + SiLU); the
    second stream enters only through the projected scan parameters
    ``[delta; B; C] = Linear([x_conv; Proj(F2)])``.
    """

    def __init__(self, d_model: int, cfg: MambaConfig, rng: np.random.Generator):
        D, N = d_model, cfg.d_state
        self.d_model, self.d_state = D, N
        self.conv = CausalDWConv1d(D, cfg.conv_width, rng)
        self.proj = Linear(D, D, rng)
        self.joint = Linear(2 * D, D + 2 * N, rng)
        self.joint.weight.data[:, :D] *= 0.1
        self.joint.bias.data[:D] = init_dt_bias(D, rng)
        self.A_log = param(init_A_log(D, N))
        self.out_proj = Linear(D, D, rng)

    def forward(self, f1: Tensor, f2: Tensor) -> Tensor:
        D, N = self.d_model, self.d_state
        x_conv = T.silu(self.conv(f1))
        x_mod = self.proj(f2)
        p = self.joint(T.concat([x_conv, x_mod], axis=-1))
        delta = T.softplus(p[..., :D])
        A = -T.exp(self.A_log)
        y = selective_scan(x_conv, delta, A, p[..., D:D + N], p[..., D + N:])
        return self.out_proj(y)


class CrossMambaBlock(Module):
    """Both directions summed; the backward pass reverses both streams."""

    def __init__(self, d_model: int, cfg: MambaConfig, rng: np.random.Generator):
        self.fwd = CrossMambaDirection(d_model, cfg, rng)
        self.bwd = self.fwd if cfg.tied else CrossMambaDirection(d_model, cfg, rng)

    def forward(self, f1: Tensor, f2: Tensor) -> Tensor:
        if f1.shape != f2.shape:
            raise ShapeError(f"cross-mamba streams differ in shape: {f1.shape} vs {f2.shape}")
        back = self.bwd(T.reverse(f1, -2), T.reverse(f2, -2))
        return self.fwd(f1, f2) + T.reverse(back, -2)


def self_mamba_forward(block: SelfMambaBlock, F: Tensor) -> Tensor:
    return block(F)


def cross_mamba_forward(block: CrossMambaBlock, F1: Tensor, F2: Tensor) -> Tensor:
    return block(F1, F2)
