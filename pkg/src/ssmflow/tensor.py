"""Dense tensors on top of numpy with a dynamic reverse-mode tape.

Each differentiable op records its parents and a closure mapping the upstream
gradient to one gradient per parent. :func:`backward` sorts the recorded graph
into a :class:`GradTape` and replays it in reverse.

Broadcasting is deliberately narrow: two operands must have equal shapes, or
one of them is a scalar, or one of them matches the *trailing* extents of the
other (bias-style addition). Anything else raises :class:`ShapeError`.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf, expit

__all__ = [
    "Tensor",
    "GradTape",
    "ShapeError",
    "ArgumentError",
    "backward",
    "no_grad",
    "set_precision",
    "get_dtype",
    "precision",
    "tensor",
    "zeros",
    "ones",
    "matmul",
    "softmax",
    "silu",
    "gelu",
    "softplus",
    "sigmoid",
    "exp",
    "log",
    "abs_",
    "sqrt",
    "reverse",
    "concat",
    "conv2d",
    "conv1d_depthwise_causal",
    "layer_norm",
    "resize_bilinear",
    "bilinear_sample",
    "make_op",
]


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class ArgumentError(ValueError):
    """An argument is outside the operation's domain."""


_DTYPES = {"float32": np.float32, "float64": np.float64}
_state = {"dtype": np.float64, "grad": True}


def set_precision(name: str) -> None:
    """Switch the default element type for newly created tensors."""
    if name not in _DTYPES:
        raise ArgumentError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _state["dtype"] = _DTYPES[name]


def get_dtype() -> type:
    return _state["dtype"]


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    old = _state["dtype"]
    set_precision(name)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block."""
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


def _as_array(data, dtype=None) -> np.ndarray:
    if dtype is None and isinstance(data, (np.ndarray, np.generic)) and data.dtype in (np.float32, np.float64):
        return np.asarray(data)
    return np.asarray(data, dtype=dtype or get_dtype())


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = _as_array(data)
        if any(s < 1 for s in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    # -- metadata ---------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=get_dtype()), requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=get_dtype()), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=get_dtype()), requires_grad=requires_grad)


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or get_dtype()))


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Create an op output, recording it on the tape when any parent needs grads.

    ``backward_fn(g)`` must return a tuple with one entry per parent (``None``
    allowed for parents that do not require gradients).
    """
    out = Tensor(data)
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


# -- tape ---------------------------------------------------------------------


@dataclass
class GradTape:
    """Topologically ordered record of the ops reachable from a loss."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> GradTape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if not n._parents]

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar loss.

    Returns a map from every ``requires_grad`` leaf reachable from ``loss`` to
    its gradient; the same arrays are stored on ``leaf.grad`` (overwriting).
    Fan-out contributions are summed.
    """
    if not isinstance(loss, Tensor) or loss.ndim != 0:
        shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
        raise ArgumentError(f"backward() needs a rank-0 loss, got shape {shape}")
    if not loss.requires_grad:
        raise ArgumentError("loss is not on the tape (no input requires grad)")
    tape = GradTape.from_loss(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    result: dict[Tensor, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            g = np.zeros_like(node.data)
        if not node._parents:
            node.grad = g
            result[node] = g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise ShapeError(f"op {node.op}: gradient shape {pg.shape} != input shape {p.shape}")
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
    return result


# -- broadcasting helpers -------------------------------------------------------


def _check_broadcast(a: tuple, b: tuple, op: str) -> None:
    if a == b or a == () or b == ():
        return
    if len(a) >= len(b) and a[len(a) - len(b):] == b:
        return
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return
    raise ShapeError(f"{op}: shapes {a} and {b} are not equal, scalar, or trailing-compatible")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum(), dtype=g.dtype)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    _check_broadcast(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    _check_broadcast(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    _check_broadcast(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _reduce_to(g * bd, ad.shape) if a.requires_grad else None,
            _reduce_to(g * ad, bd.shape) if b.requires_grad else None,
        )

    return make_op(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    _check_broadcast(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            _reduce_to(g / bd, ad.shape) if a.requires_grad else None,
            _reduce_to(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return make_op(out, (a, b), bw, "div")


def _unary(x: Tensor, out: np.ndarray, dydx: Callable[[], np.ndarray], op: str) -> Tensor:
    dt = x.data.dtype
    return make_op(out.astype(dt, copy=False), (x,), lambda g: ((g * dydx()).astype(dt, copy=False),), op)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _unary(x, out, lambda: out, "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _unary(x, np.log(xd), lambda: 1.0 / xd, "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _unary(x, out, lambda: 0.5 / out, "sqrt")


def abs_(x: Tensor) -> Tensor:
    xd = x.data
    return _unary(x, np.abs(xd), lambda: np.sign(xd), "abs")


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return _unary(x, s, lambda: s * (1.0 - s), "sigmoid")


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = expit(xd)
    return _unary(x, xd * s, lambda: s * (1.0 + xd * (1.0 - s)), "silu")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    return _unary(x, xd * cdf, lambda: cdf + xd * _INV_SQRT2PI * np.exp(-0.5 * xd * xd), "gelu")


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    return _unary(x, np.logaddexp(0.0, xd), lambda: expit(xd), "softplus")


# -- reductions and shape ops ------------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ArgumentError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ArgumentError(f"repeated axes {tuple(axis)}")
    return tuple(out)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op(x.data.sum(axis=axes, keepdims=keepdims), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return sum_(x, axes, keepdims) * (1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(a % x.ndim for a in axes)
    inv = tuple(np.argsort(axes))
    return make_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def reverse(x: Tensor, axis: int) -> Tensor:
    """Flip ``x`` along ``axis``; the gradient is the flipped upstream gradient."""
    (ax,) = _norm_axes(axis, x.ndim)
    return make_op(np.flip(x.data, ax).copy(), (x,), lambda g: (np.flip(g, ax).copy(),), "reverse")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    ax = axis % tensors[0].ndim
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=ax))

    return make_op(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[idx] += g
        return (out,)

    return make_op(x.data[idx].copy(), (x,), bw, "getitem")


def pad(x: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` has one (before, after) pair per axis."""
    sl = tuple(slice(b, b + n) for (b, _), n in zip(widths, x.shape))
    return make_op(np.pad(x.data, widths), (x,), lambda g: (g[sl],), "pad")


# -- linear algebra --------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``(..., m, k) @ (..., k, n)``.

    ``b`` may also be a plain 2-D matrix shared by every batch element.
    """
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return make_op(ad @ bd, (a, b), bw, "matmul")


def softmax(x: Tensor, axes=-1) -> Tensor:
    """Max-stabilised softmax normalised jointly over ``axes``."""
    if isinstance(axes, (list, tuple)) and len(axes) == 0:
        raise ArgumentError("softmax needs at least one axis")
    ax = _norm_axes(axes, x.ndim)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=ax, keepdims=True)),)

    return make_op(s, (x,), bw, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply a per-channel affine map."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = _reduce_to(g * xhat, gd.shape) if gain.requires_grad else None
        gb = _reduce_to(g, bias.shape) if bias.requires_grad else None
        return gx, gg, gb

    return make_op(xhat * gd + bias.data, (x, gain, bias), bw, "layer_norm")


# -- convolutions ------------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation on channels-last input.

    x: ``(B, H, W, Cin)`` or ``(H, W, Cin)``; weight: ``(kh, kw, Cin, Cout)``;
    bias: ``(Cout,)``. Output extent per axis is ``floor((H + 2p - k) / s) + 1``.
    """
    unbatched = x.ndim == 3
    if unbatched:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects (B,H,W,C) input and (kh,kw,Cin,Cout) kernel, got {x.shape}, {weight.shape}")
    B, H, W, cin = x.shape
    kh, kw, wcin, cout = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, kernel expects {wcin}")
    ho = (H + 2 * padding - kh) // stride + 1
    wo = (W + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output extent ({ho}, {wo}) is non-positive for input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    wd = weight.data
    out = np.zeros((B, ho, wo, cout), dtype=xp.dtype)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i:i + hs:stride, j:j + ws:stride, :] @ wd[i, j]
    if bias is not None:
        out += bias.data

    def bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + hs:stride, j:j + ws:stride, :] += g @ wd[i, j].T
            gx = gxp[:, padding:padding + H, padding:padding + W, :] if padding else gxp
        if weight.requires_grad:
            g2 = g.reshape(-1, cout)
            gw = np.empty_like(wd)
            for i in range(kh):
                for j in range(kw):
                    gw[i, j] = xp[:, i:i + hs:stride, j:j + ws:stride, :].reshape(-1, cin).T @ g2
        if bias is not None and bias.requires_grad:
            gb = g.reshape(-1, cout).sum(axis=0)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    y = make_op(out, parents, bw, "conv2d")
    return reshape(y, y.shape[1:]) if unbatched else y


def conv1d_depthwise_causal(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel causal convolution along the sequence axis.

    x: ``(..., L, C)``; kernel: ``(C, k)`` where tap ``k-1`` multiplies the
    current step and tap ``0`` the step ``k-1`` positions back (zeros before
    the start).
    """
    C, k = kernel.shape
    if k < 1:
        raise ArgumentError("kernel width must be >= 1")
    if x.shape[-1] != C:
        raise ShapeError(f"conv1d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    L = x.shape[-2]
    lead = x.data.ndim - 2
    xp = np.pad(x.data, [(0, 0)] * lead + [(k - 1, 0), (0, 0)])
    kd = kernel.data
    out = np.zeros_like(x.data)
    for j in range(k):
        out += xp[..., j:j + L, :] * kd[:, j]
    if bias is not None:
        out += bias.data

    def bw(g):
        gx = gk = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[..., j:j + L, :] += g * kd[:, j]
            gx = gxp[..., k - 1:, :]
        if kernel.requires_grad:
            gk = np.empty_like(kd)
            for j in range(k):
                gk[:, j] = (g * xp[..., j:j + L, :]).reshape(-1, C).sum(axis=0)
        if bias is not None and bias.requires_grad:
            gb = g.reshape(-1, C).sum(axis=0)
        return (gx, gk, gb) if bias is not None else (gx, gk)

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return make_op(out, parents, bw, "conv1d_dw_causal")


# -- resampling --------------------------------------------------------------------


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """(n_out, n_in) interpolation weights, half-pixel centres, edge clamped."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for o in range(n_out):
        src = min(max((o + 0.5) * scale - 0.5, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        w = src - lo
        m[o, lo] += 1.0 - w
        m[o, hi] += w
    return m


def resize_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinear resize of ``(B, H, W, C)`` (or ``(H, W, C)``) to ``size``."""
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    _, H, W, _ = xd.shape
    mh = bilinear_matrix(H, size[0], xd.dtype)
    mw = bilinear_matrix(W, size[1], xd.dtype)
    out = np.einsum("yh,bhwc,xw->byxc", mh, xd, mw, optimize=True)

    def bw(g):
        gb = g[None] if unbatched else g
        gx = np.einsum("yh,byxc,xw->bhwc", mh, gb, mw, optimize=True)
        return (gx[0] if unbatched else gx,)

    return make_op(out[0] if unbatched else out, (x,), bw, "resize_bilinear")


def bilinear_sample(maps: Tensor, coords: Tensor, offsets: np.ndarray | None = None) -> Tensor:
    """Sample 2-D maps at fractional positions with zero outside the map.

    maps: ``(B, P, H, W)``; coords: ``(B, P, K, 2)`` holding ``(x, y)`` pixel
    positions (x indexes W). With ``offsets`` of shape ``(K, 2)``, coords is
    ``(B, P, 2)`` and sample ``k`` is taken at ``coords + offsets[k]``.
    Returns ``(B, P, K)``; differentiable in map values and coordinates.
    """
    md, cd = maps.data, coords.data
    B, P, H, W = md.shape
    if offsets is not None:
        if cd.shape != (B, P, 2):
            raise ShapeError(f"coords {cd.shape} must be (B, P, 2) = {(B, P, 2)} when offsets are given")
        cd = cd[:, :, None, :] + np.asarray(offsets, dtype=cd.dtype)
    elif cd.shape[:2] != (B, P) or cd.shape[-1] != 2:
        raise ShapeError(f"coords {cd.shape} must be (B, P, K, 2) for maps {md.shape}")
    x, y = cd[..., 0], cd[..., 1]
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx, fy = x - x0, y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    bi = np.arange(B)[:, None, None]
    pi = np.arange(P)[None, :, None]

    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xi, yi = x0 + dx, y0 + dy
        valid = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        xc, yc = np.clip(xi, 0, W - 1), np.clip(yi, 0, H - 1)
        val = np.where(valid, md[bi, pi, yc, xc], 0.0)
        wx = fx if dx else 1.0 - fx
        wy = fy if dy else 1.0 - fy
        corners.append((xc, yc, valid, val, wx, wy, dx, dy))
    out = sum(c[3] * c[4] * c[5] for c in corners)

    def bw(g):
        gm = gc = None
        if maps.requires_grad:
            flat = np.zeros(md.size, dtype=md.dtype)
            base = (bi * P + pi) * (H * W)
            for xc, yc, valid, _, wx, wy, _, _ in corners:
                idx = np.broadcast_to(base + yc * W + xc, g.shape)
                contrib = np.where(valid, g * wx * wy, 0.0)
                flat += np.bincount(idx.ravel(), weights=contrib.ravel(), minlength=flat.size)
            gm = flat.reshape(md.shape)
        if coords.requires_grad:
            gx = np.zeros_like(x)
            gy = np.zeros_like(y)
            for _, _, _, val, wx, wy, dx, dy in corners:
                gx += val * wy * (1.0 if dx else -1.0)
                gy += val * wx * (1.0 if dy else -1.0)
            gc = np.stack([g * gx, g * gy], axis=-1)
            if offsets is not None:
                gc = gc.sum(axis=2)
        return gm, gc

    return make_op(out, (maps, coords), bw, "bilinear_sample")
