"""Parameter containers and the small set of layers the model is built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


def param(arr: np.ndarray) -> Tensor:
    return Tensor(np.asarray(arr, dtype=T.get_dtype()), requires_grad=True)


def uniform_param(rng: np.random.Generator, shape, bound: float) -> Tensor:
    return param(rng.uniform(-bound, bound, size=shape))


class Module:
    """Walks attributes in definition order to enumerate parameters.

    Parameters are ``Tensor`` attributes with ``requires_grad`` set; child
    modules and lists of child modules are recursed into.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        # shared submodules appear once
        seen: set[int] = set()
        out = []
        for _, p in self.named_parameters():
            if id(p) not in seen:
                seen.add(id(p))
                out.append(p)
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise T.ShapeError(f"{name}: stored shape {arr.shape} != parameter shape {p.shape}")
            p.data = arr.astype(p.dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """``y = x @ W + b`` over the last axis of any-rank input."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / np.sqrt(d_in)
        self.weight = uniform_param(rng, (d_in, d_out), bound)
        self.bias = uniform_param(rng, (d_out,), bound) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        y = T.matmul(x.reshape(-1, x.shape[-1]), self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y.reshape(lead + (y.shape[-1],))


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1, padding: int | None = None):
        bound = 1.0 / np.sqrt(c_in * k * k)
        self.weight = uniform_param(rng, (k, k, c_in, c_out), bound)
        self.bias = uniform_param(rng, (c_out,), bound)
        self.stride = stride
        self.padding = k // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = param(np.ones(d))
        self.bias = param(np.zeros(d))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each channel of ``(..., H, W, C)`` over its spatial positions."""
    lead, (H, W, C) = x.shape[:-3], x.shape[-3:]
    seq = T.swap_last(x.reshape(lead + (H * W, C)))
    ones = Tensor(np.ones(H * W, dtype=x.dtype))
    zeros = Tensor(np.zeros(H * W, dtype=x.dtype))
    return T.swap_last(T.layer_norm(seq, ones, zeros, eps)).reshape(x.shape)


class CausalDWConv1d(Module):
    def __init__(self, channels: int, width: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(width)
        self.kernel = uniform_param(rng, (channels, width), bound)
        self.bias = uniform_param(rng, (channels,), bound)

    def forward(self, x: Tensor) -> Tensor:
        return T.conv1d_depthwise_causal(x, self.kernel, self.bias)


class MLP(Module):
    """Two linear layers with GELU in between."""

    def __init__(self, d: int, ratio: int, rng: np.random.Generator):
        self.fc1 = Linear(d, ratio * d, rng)
        self.fc2 = Linear(ratio * d, d, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))
