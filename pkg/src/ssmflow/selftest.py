"""Quick oracle checks across every module, with a pass/fail summary.

Each check is a small function that raises ``AssertionError`` on failure.
Checks that need a trained model are not part of this suite; they live in the
acceptance tests.
"""

from __future__ import annotations

import math
import struct
import tempfile
import traceback
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKS: list[tuple[str, str, Callable[[], None]]] = []


def oracle(module: str, name: str):
    def deco(fn):
        CHECKS.append((module, name, fn))
        return fn

    return deco


def _close(a, b, tol=1e-12):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    assert a.shape == b.shape, f"shape {a.shape} != {b.shape}"
    err = float(np.abs(a - b).max()) if a.size else 0.0
    assert err <= tol, f"max abs error {err:.3e} > {tol:.0e}"


def _rng(seed=0):
    return np.random.default_rng(seed)


# -- tensor-core ---------------------------------------------------------------


@oracle("tensor-core", "matmul identity / hand case / zeros")
def _():
    B = _rng().normal(size=(3, 5))
    _close(T.matmul(Tensor(np.eye(3)), Tensor(B)).data, B, 0)
    _close(T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]])).data, [[3.0], [7.0]], 0)
    _close(T.matmul(Tensor(np.zeros((2, 3))), Tensor(_rng().uniform(size=(3, 4)))).data, np.zeros((2, 4)), 0)


@oracle("tensor-core", "softmax uniform / log-ratio / shift invariance")
def _():
    _close(T.softmax(Tensor(np.zeros(3)), axes=0).data, np.full(3, 1 / 3))
    _close(T.softmax(Tensor(np.log([1.0, 2.0, 3.0])), axes=0).data, [1 / 6, 2 / 6, 3 / 6])
    x = _rng().normal(size=(4, 5))
    _close(T.softmax(Tensor(x), axes=-1).data, T.softmax(Tensor(x + 7.3), axes=-1).data, 1e-15)


@oracle("tensor-core", "activations at zero")
def _():
    z = Tensor(np.zeros(1))
    _close(T.silu(z).data, [0.0], 0)
    _close(T.gelu(z).data, [0.0], 0)
    _close(T.softplus(z).data, [math.log(2.0)])


@oracle("tensor-core", "causal depthwise conv: identity, impulse, causality")
def _():
    x = _rng().normal(size=(6, 2))
    ident = np.zeros((2, 3))
    ident[:, -1] = 1.0
    _close(T.conv1d_depthwise_causal(Tensor(x), Tensor(ident)).data, x, 0)
    k = np.array([[1.0, 2.0, 3.0]])
    imp = np.zeros((5, 1))
    imp[0] = 1.0
    y = T.conv1d_depthwise_causal(Tensor(imp), Tensor(k)).data[:, 0]
    _close(y[:3], [3.0, 2.0, 1.0], 0)
    x2 = x.copy()
    x2[4] += 1.0
    kk = Tensor(_rng(1).normal(size=(2, 3)))
    a, b = T.conv1d_depthwise_causal(Tensor(x), kk).data, T.conv1d_depthwise_causal(Tensor(x2), kk).data
    assert np.array_equal(a[:4], b[:4])


@oracle("tensor-core", "conv2d identity / ones kernel / stride shape")
def _():
    x = _rng().normal(size=(5, 6, 3))
    _close(T.conv2d(Tensor(x), Tensor(np.eye(3).reshape(1, 1, 3, 3))).data, x, 0)
    y = T.conv2d(Tensor(np.ones((5, 5, 1))), Tensor(np.ones((3, 3, 1, 1))), padding=1).data
    _close(y[1:-1, 1:-1], np.full((3, 3, 1), 9.0), 0)
    assert T.conv2d(Tensor(np.ones((8, 8, 1))), Tensor(np.ones((3, 3, 1, 1))), stride=2, padding=1).shape == (4, 4, 1)


@oracle("tensor-core", "reverse values, involution, gradient")
def _():
    _close(T.reverse(Tensor([1.0, 2.0, 3.0]), 0).data, [3.0, 2.0, 1.0], 0)
    x = Tensor(_rng().normal(size=(4, 3)), requires_grad=True)
    _close(T.reverse(T.reverse(x, 0), 0).data, x.data, 0)
    w = _rng(1).normal(size=(4, 3))
    g = T.backward((T.reverse(x, 0) * Tensor(w)).sum())[x]
    _close(g, w[::-1], 0)


@oracle("tensor-core", "backward of sum and sum of squares")
def _():
    x = Tensor(_rng().normal(size=(3, 2)), requires_grad=True)
    _close(T.backward(x.sum())[x], np.ones((3, 2)), 0)
    _close(T.backward((x * x).sum())[x], 2 * x.data, 0)


@oracle("tensor-core", "AdamW: zero grad, first step, decay")
def _():
    from .optim import AdamWState, adamw_step

    p = Tensor(np.array([1.5]))
    adamw_step([p], [np.zeros(1)], AdamWState(), lr=0.1)
    _close(p.data, [1.5], 0)
    p = Tensor(np.array([1.5]))
    adamw_step([p], [np.ones(1)], AdamWState(), lr=0.01)
    _close(p.data, [1.5 - 0.01], 1e-8)
    p = Tensor(np.array([2.0]))
    adamw_step([p], [np.zeros(1)], AdamWState(), lr=0.1, weight_decay=0.5)
    _close(p.data, [2.0 * (1 - 0.05)], 1e-15)


# -- ssm-scan ------------------------------------------------------------------


@oracle("ssm-scan", "ZOH hand case, small-step limit, series branch")
def _():
    from .ssm import discretize

    a, b = discretize(-1.0, 1.0, math.log(2.0))
    _close([a, b], [0.5, 0.5])
    a, b = discretize(-1.0, 1.0, 1e-300)
    _close([a, b], [1.0, 0.0])
    a, b = discretize(-1.0, 1.0, 1e-9)
    assert np.isfinite(b) and abs(b / 1e-9 - 1.0) < 1e-8


@oracle("ssm-scan", "sequential scan: hand case, zero input, memoryless")
def _():
    from .ssm import DiscreteSSM, scan_sequential

    disc = DiscreteSSM(np.array([[0.5]]), np.array([[0.5]]), np.array([1.0]), True)
    _close(scan_sequential(disc, np.ones((3, 1)))[:, 0], [0.5, 0.75, 0.875])
    _close(scan_sequential(disc, np.zeros((4, 1))), np.zeros((4, 1)), 0)
    x = _rng().normal(size=(5, 1))
    mem = DiscreteSSM(np.array([[0.0]]), np.array([[0.7]]), np.array([2.0]), True)
    _close(scan_sequential(mem, x), 2.0 * 0.7 * x)


@oracle("ssm-scan", "kernel form: hand kernel, equivalence, C = 0")
def _():
    from .ssm import DiscreteSSM, apply_kernel, kernel_form, scan_sequential

    disc = DiscreteSSM(np.array([[0.5]]), np.array([[0.5]]), np.array([1.0]), True)
    K = kernel_form(disc, 3)
    _close(K[:, 0], [0.5, 0.25, 0.125])
    _close(apply_kernel(K, np.ones((3, 1))), scan_sequential(disc, np.ones((3, 1))))
    zero = DiscreteSSM(np.array([[0.5]]), np.array([[0.5]]), np.array([0.0]), True)
    _close(kernel_form(zero, 4), np.zeros((4, 1)), 0)


@oracle("ssm-scan", "selective params: constant, permutation, positivity")
def _():
    from .ssm import selective_params

    rng = _rng()
    L, D, N = 7, 3, 4
    x = rng.normal(size=(L, D))
    zeroW = lambda n, b: (np.zeros((D, n)), b)  # noqa: E731
    bB, bC, bd = rng.normal(size=N), rng.normal(size=N), rng.normal(size=D)
    p = selective_params(x, zeroW(N, bB), zeroW(N, bC), zeroW(D, bd))
    _close(p.delta, np.tile(np.logaddexp(0, bd), (L, 1)))
    S = [(rng.normal(size=(D, n)), rng.normal(size=n)) for n in (N, N, D)]
    perm = rng.permutation(L)
    p1, p2 = selective_params(x, *S), selective_params(x[perm], *S)
    _close(p2.B, p1.B[perm], 0)
    _close(p2.delta, p1.delta[perm], 0)
    assert np.all(p1.delta > 0)


@oracle("ssm-scan", "parallel scan: L = 1, random instance, prefix sum")
def _():
    from .ssm import DiscreteSSM, StaticSSM, linear_recurrence_parallel, scan_parallel, scan_sequential

    rng = _rng()
    ssm = StaticSSM(-rng.uniform(0.1, 2, size=(8, 16)), rng.normal(size=16), rng.normal(size=16), 0.3)
    disc = ssm.discretize()
    x1 = rng.normal(size=(1, 8))
    _close(scan_parallel(disc, x1), scan_sequential(disc, x1), 1e-15)
    x = rng.normal(size=(64, 8))
    _close(scan_parallel(disc, x), scan_sequential(disc, x), 1e-10)
    b = rng.normal(size=(13, 3))
    _close(linear_recurrence_parallel(np.ones_like(b), b), np.cumsum(b, axis=0), 1e-12)
    sel = DiscreteSSM(rng.uniform(0, 1, size=(20, 2, 3)), rng.normal(size=(20, 2, 3)), rng.normal(size=(20, 3)))
    xs = rng.normal(size=(20, 2))
    _close(scan_parallel(sel, xs), scan_sequential(sel, xs), 1e-10)


# -- mamba-blocks ----------------------------------------------------------------


def _mcfg(**kw):
    from .mamba import MambaConfig

    return MambaConfig(d_state=4, expand=2, conv_width=3, **kw)


def _zero_biases(module):
    for name, p in module.named_parameters():
        if name.endswith("bias"):
            p.data = np.zeros_like(p.data)


@oracle("mamba-blocks", "Self-Mamba: length 1, tied reversal, zero input")
def _():
    from .mamba import SelfMambaBlock

    rng = _rng()
    blk = SelfMambaBlock(4, _mcfg(), rng)
    x = Tensor(rng.normal(size=(1, 4)))
    _close(blk(x).data, (blk.fwd(x) + blk.bwd(x)).data, 1e-15)
    tied = SelfMambaBlock(4, _mcfg(tied=True), rng)
    F = Tensor(rng.normal(size=(9, 4)))
    _close(tied(T.reverse(F, 0)).data, T.reverse(tied(F), 0).data, 1e-13)
    _zero_biases(blk)
    _close(blk(Tensor(np.zeros((5, 4)))).data, np.zeros((5, 4)), 0)


@oracle("mamba-blocks", "Cross-Mamba: modulation sensitivity, null modulation, shapes")
def _():
    from .mamba import CrossMambaBlock

    rng = _rng()
    blk = CrossMambaBlock(4, _mcfg(), rng)
    F1, F2 = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    base = blk(Tensor(F1), Tensor(F2)).data
    moved = blk(Tensor(F1), Tensor(F2 + 0.1 * rng.normal(size=F2.shape))).data
    assert np.abs(base - moved).max() > 1e-6
    for d in (blk.fwd, blk.bwd):
        d.proj.bias.data[:] = 0.0
    null = blk(Tensor(F1), Tensor(np.zeros_like(F2))).data
    for d in (blk.fwd, blk.bwd):
        d.joint.weight.data[4:] = 0.0  # rows fed by the modulating stream
    restricted = blk(Tensor(F1), Tensor(F2)).data
    _close(null, restricted, 1e-13)
    for L in (4, 37, 64):
        assert blk(Tensor(rng.normal(size=(L, 4))), Tensor(rng.normal(size=(L, 4)))).shape == (L, 4)


# -- polymamba -----------------------------------------------------------------


@oracle("polymamba", "positional add, flatten order and roundtrip")
def _():
    from .polymamba import add_positional, flatten_2d, unflatten_2d

    F = _rng().normal(size=(2, 3, 4))
    _close(add_positional(Tensor(F), Tensor(np.zeros((2, 3, 4)))).data, F, 0)
    _close(add_positional(Tensor(np.zeros((2, 3, 4))), Tensor(F)).data, F, 0)
    g = np.array([[[1.0], [2.0]], [[3.0], [4.0]]])
    _close(flatten_2d(Tensor(g)).data[:, 0], [1, 2, 3, 4], 0)
    _close(unflatten_2d(flatten_2d(Tensor(F)), 2, 3).data, F, 0)
    row = _rng(1).normal(size=(1, 5, 2))
    _close(flatten_2d(Tensor(row)).data, row[0], 0)


@oracle("polymamba", "swap symmetry with tied cross, empty stack identity")
def _():
    from .polymamba import PolyMamba, PolyMambaConfig

    rng = _rng()
    pm = PolyMamba(PolyMambaConfig(dim=4, depth=2, mlp_ratio=2, tie_cross=True, pos_hw=(3, 3), mamba=_mcfg()), rng)
    F1, F2 = Tensor(rng.normal(size=(1, 3, 3, 4))), Tensor(rng.normal(size=(1, 3, 3, 4)))
    q, v = pm(F1, F2)
    v2, q2 = pm(F2, F1)
    _close(q.data, q2.data, 1e-13)
    _close(v.data, v2.data, 1e-13)
    empty = PolyMamba(PolyMambaConfig(dim=4, depth=0, use_pos=False, mamba=_mcfg()), rng)
    a, b = empty(F1, F2)
    _close(a.data, F1.data, 0)
    _close(b.data, F2.data, 0)


# -- matching ------------------------------------------------------------------


def _onehot_codes(H, W, scale=1.0):
    return scale * np.eye(H * W).reshape(H, W, H * W)


@oracle("matching", "cost volume: orthonormal, ones, direct dot products")
def _():
    from .matching import build_cost_volume

    H, W = 3, 4
    D = H * W
    c = build_cost_volume(Tensor(_onehot_codes(H, W)), Tensor(_onehot_codes(H, W))).data
    _close(c.reshape(D, D), np.eye(D) / math.sqrt(D), 1e-15)
    _close(build_cost_volume(Tensor(np.ones((2, 2, 1))), Tensor(np.ones((2, 2, 1)))).data, np.ones((2, 2, 2, 2)), 0)
    rng = _rng()
    fq, fv = rng.normal(size=(3, 2, 5)), rng.normal(size=(3, 2, 5))
    c = build_cost_volume(Tensor(fq), Tensor(fv)).data
    for i, j, k, l in np.ndindex(3, 2, 3, 2):
        assert abs(c[i, j, k, l] - float(np.dot(fq[i, j], fv[k, l])) / math.sqrt(5)) < 1e-12


@oracle("matching", "distribution: uniform, sharpening, row sums")
def _():
    from .matching import matching_distribution

    M = matching_distribution(Tensor(np.full((2, 3, 2, 3), 0.7))).data
    _close(M, np.full(M.shape, 1 / 6), 1e-15)
    eye = np.eye(6).reshape(2, 3, 2, 3)
    _close(matching_distribution(Tensor(50.0 * eye)).data, eye, 1e-20 + 6 * math.exp(-50))
    R = matching_distribution(Tensor(_rng().normal(size=(3, 4, 3, 4)) * 5)).data
    _close(R.sum(axis=(-2, -1)), np.ones((3, 4)), 1e-12)


@oracle("matching", "initial flow: self-match, one-hot shift, uniform centroid")
def _():
    from .matching import coordinate_grid, initial_flow

    H, W = 4, 5
    eye = np.eye(H * W).reshape(H, W, H, W)
    _close(initial_flow(Tensor(eye)).data, np.zeros((H, W, 2)), 0)
    M = np.zeros((H, W, H, W))
    for i in range(H):
        for j in range(W):
            M[i, j, i, min(j + 2, W - 1)] = 1.0
    V = initial_flow(Tensor(M)).data
    _close(V[:, : W - 2], np.broadcast_to([2.0, 0.0], (H, W - 2, 2)), 0)
    G = coordinate_grid(H, W, np.float64)
    U = initial_flow(Tensor(np.full((H, W, H, W), 1.0 / (H * W)))).data
    _close(U, G.reshape(-1, 2).mean(0) - G, 1e-12)


@oracle("matching", "global match: orthonormal self-match, cyclic shift recovery")
def _():
    from .matching import global_match

    H, W = 6, 6
    D = H * W
    scale = math.sqrt(50.0 * math.sqrt(D))  # diagonal cost 50
    codes = _onehot_codes(H, W, scale)
    V, _ = global_match(Tensor(codes), Tensor(codes))
    assert np.abs(V.data).max() < 1e-3
    rng = _rng()
    Q, _ = np.linalg.qr(rng.normal(size=(D, D)))
    fv = scale * Q.reshape(H, W, D)
    dx, dy = 2, 1
    fq = np.roll(fv, shift=(-dy, -dx), axis=(0, 1))
    V, _ = global_match(Tensor(fq), Tensor(fv))
    interior = V.data[: H - dy, : W - dx]
    _close(interior, np.broadcast_to([dx, dy], interior.shape), 0.1)


# -- pulsemamba ----------------------------------------------------------------


def _bilinear_oracle(cmap, x, y):
    H, W = cmap.shape
    total = 0.0
    x0, y0 = math.floor(x), math.floor(y)
    for yy in (y0, y0 + 1):
        for xx in (x0, x0 + 1):
            if 0 <= xx < W and 0 <= yy < H:
                total += cmap[yy, xx] * (1 - abs(x - xx)) * (1 - abs(y - yy))
    return total


@oracle("pulsemamba", "cost lookup: diagonal, lattice, bilinear oracle")
def _():
    from .pulsemamba import lookup_cost, window_offsets

    rng = _rng()
    H, W, r = 3, 4, 1
    cost = rng.normal(size=(1, H, W, H, W))
    out = lookup_cost(Tensor(cost), Tensor(np.zeros((1, H, W, 2))), 0).data
    _close(out[0, :, :, 0], np.einsum("ijij->ij", cost[0]), 0)
    Vi = np.zeros((1, H, W, 2))
    Vi[..., 0] = 1.0
    out = lookup_cost(Tensor(cost), Tensor(Vi), 0).data[0, :, : W - 1, 0]
    _close(out, np.array([[cost[0, i, j, i, j + 1] for j in range(W - 1)] for i in range(H)]), 0)
    V = rng.uniform(-1.5, 1.5, size=(1, H, W, 2))
    out = lookup_cost(Tensor(cost), Tensor(V), r).data
    offs = window_offsets(r)
    for i, j in np.ndindex(H, W):
        for k, (ox, oy) in enumerate(offs):
            ref = _bilinear_oracle(cost[0, i, j], j + V[0, i, j, 0] + ox, i + V[0, i, j, 1] + oy)
            assert abs(out[0, i, j, k] - ref) < 1e-10


@oracle("pulsemamba", "motion encoder: zero case, shape")
def _():
    from .pulsemamba import MotionEncoder

    me = MotionEncoder(9, 64, _rng())
    _zero_biases(me)
    _close(me(Tensor(np.zeros((1, 3, 3, 2))), Tensor(np.zeros((1, 3, 3, 9)))).data, np.zeros((1, 3, 3, 64)), 0)
    assert me(Tensor(np.ones((1, 3, 5, 2))), Tensor(np.ones((1, 3, 5, 9)))).shape == (1, 3, 5, 64)


@oracle("pulsemamba", "AGA: convexity, slot sums, saturation; concat baseline")
def _():
    from .pulsemamba import AGA, ConcatFuse

    rng = _rng()
    Dh = 4
    ag = AGA(Dh, Dh, Dh, rng)
    for conv in (ag.align_m, ag.align_f, ag.align_h):
        conv.weight.data = np.eye(Dh).reshape(1, 1, Dh, Dh)
        conv.bias.data[:] = 0.0
    f = rng.normal(size=(1, 3, 3, Dh))
    x, A = ag(Tensor(f), Tensor(f), Tensor(f))
    _close(x.data, f, 1e-13)
    _close(A.data.sum(-1), np.ones((1, 3, 3)), 1e-12)
    ag.conv2.weight.data[:] = 0.0
    ag.conv2.bias.data[:] = [60.0, 0.0, 0.0]
    M, Fq, h = (rng.normal(size=(1, 3, 3, Dh)) for _ in range(3))
    x, _ = ag(Tensor(M), Tensor(Fq), Tensor(h))
    _close(x.data, M, 1e-6)
    cf = ConcatFuse(Dh, Dh, Dh, rng)
    _zero_biases(cf)
    z = Tensor(np.zeros((1, 2, 2, Dh)))
    _close(cf(z, z, z)[0].data, np.zeros((1, 2, 2, Dh)), 0)
    cf2 = ConcatFuse(3, 5, Dh, rng)
    ag2 = AGA(3, 5, Dh, rng)
    assert ag2.num_parameters() - cf2.num_parameters() == ag2.attention_params() - cf2.fuse.num_parameters()


@oracle("pulsemamba", "pulse step: zero head, determinism; refine contract")
def _():
    from .pulsemamba import PulseConfig, PulseMamba, RefinementState

    rng = _rng()
    pm = PulseMamba(PulseConfig(feat_dim=4, hidden_dim=4, motion_dim=4, radius=1, iters=2, mamba=_mcfg()), rng)
    V = Tensor(rng.uniform(-1, 1, size=(1, 3, 3, 2)))
    Fq = Tensor(rng.normal(size=(1, 3, 3, 4)))
    cost = Tensor(rng.normal(size=(1, 3, 3, 3, 3)))
    s1 = pm.step(pm.init_state(V), Fq, cost)
    s2 = pm.step(pm.init_state(V), Fq, cost)
    assert np.array_equal(s1.V.data, s2.V.data) and np.array_equal(s1.h.data, s2.h.data)
    final, flows = pm.refine(V, Fq, cost, 0)
    assert final is V and len(flows) == 1
    _, flows = pm.refine(V, Fq, cost, 2)
    assert len(flows) == 3
    pm.head.conv2.weight.data[:] = 0.0
    pm.head.conv2.bias.data[:] = 0.0
    s = pm.step(RefinementState(h=Tensor(np.zeros((1, 3, 3, 4))), V=V), Fq, cost)
    _close(s.V.data, V.data, 0)
    assert np.abs(s.h.data).max() > 0


# -- pipeline ------------------------------------------------------------------


def _tiny64():
    from .config import tiny_config

    return tiny_config(dim=8, depth=1, d_state=4, hidden_dim=8, motion_dim=4, radius=1, precision="float64")


@oracle("pipeline", "shared encoder, feature shapes, N_iter = 0")
def _():
    from .config import ModelConfig
    from .model import MambaFlow, upsample_flow

    rng = _rng()
    m = MambaFlow(_tiny64())
    img = Tensor(rng.uniform(size=(1, 16, 16, 3)))
    F1, F2 = m.extract_features(img, img)
    assert np.array_equal(F1.data, F2.data)
    big = MambaFlow(ModelConfig(depth=1, precision="float64"))
    F, _ = big.extract_features(Tensor(rng.uniform(size=(64, 64, 3))), Tensor(rng.uniform(size=(64, 64, 3))))
    assert F.shape == (8, 8, 128)
    out = m(img, Tensor(rng.uniform(size=(1, 16, 16, 3))), iters=0)
    _close(out.flow.data, upsample_flow(out.flows[0], 4).data, 0)
    assert out.flow.shape == (1, 16, 16, 2)


@oracle("pipeline", "sequence loss: exact, unit offset, gamma weighting")
def _():
    from .model import sequence_loss

    gt = _rng().normal(size=(4, 5, 2))
    assert sequence_loss([Tensor(gt)], gt).item() == 0.0
    assert abs(sequence_loss([Tensor(gt + [1.0, 0.0])], gt).item() - 1.0) < 1e-12
    a = sequence_loss([Tensor(gt + [1.0, 0.0]), Tensor(gt)], gt).item()
    b = sequence_loss([Tensor(gt), Tensor(gt + [1.0, 0.0])], gt).item()
    assert abs(a / b - 0.8) < 1e-12


@oracle("pipeline", "weight store: roundtrip, truncation, bad magic, config mismatch")
def _():
    from .model import MambaFlow
    from .weights import BadMagicError, ConfigMismatchError, TruncatedFileError, WeightStore, load_weights, save_weights

    cfg = _tiny64()
    store = WeightStore.from_model(MambaFlow(cfg))
    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "w.ssmf"
        save_weights(store, p)
        assert load_weights(p).equals(store)
        raw = p.read_bytes()
        (Path(d) / "t.ssmf").write_bytes(raw[: len(raw) // 2])
        try:
            load_weights(Path(d) / "t.ssmf")
            raise AssertionError("truncation not detected")
        except TruncatedFileError:
            pass
        (Path(d) / "m.ssmf").write_bytes(b"XXXX" + raw[4:])
        try:
            load_weights(Path(d) / "m.ssmf")
            raise AssertionError("bad magic not detected")
        except BadMagicError:
            pass
        try:
            load_weights(p, expected=cfg.replace(dim=16))
            raise AssertionError("config mismatch not detected")
        except ConfigMismatchError as exc:
            assert "dim" in exc.fields


@oracle("pipeline", "training: zero rate keeps weights, fixed seed repeats")
def _():
    from .synthetic import gen_synthetic, split_holdout
    from .train import train_toy

    cfg = _tiny64().replace(precision="float32")
    data = split_holdout(gen_synthetic(3, 5, size=16, max_disp=2))
    r0 = train_toy(cfg, data, steps=2, lr=0.0, batch=2, eval_every=1)
    from .model import MambaFlow
    from .weights import WeightStore

    init = WeightStore.from_model(MambaFlow(cfg.replace(seed=0)))
    assert r0.store.equals(init)
    assert r0.log[0]["epe"] == r0.log[1]["epe"]
    a = train_toy(cfg, data, steps=2, lr=1e-3, batch=2, eval_every=1)
    b = train_toy(cfg, data, steps=2, lr=1e-3, batch=2, eval_every=1)
    assert a.log == b.log and a.store.equals(b.store)


# -- metrics-io ------------------------------------------------------------------


@oracle("metrics-io", "EPE, F1-all and s40 hand cases")
def _():
    from .metrics import epe, f1_all, s40

    gt = _rng().normal(size=(4, 4, 2))
    assert epe(gt, gt) == 0.0
    assert abs(epe(gt + [3.0, 4.0], gt) - 5.0) < 1e-12
    pred = gt.copy()
    pred[0, 0] += 10.0
    mask = np.ones((4, 4), bool)
    mask[0, 0] = False
    assert epe(pred, gt, mask) == 0.0
    assert f1_all(gt, gt) == 0.0
    g100 = np.zeros((3, 3, 2))
    g100[..., 0] = 100.0
    assert f1_all(g100 + [0.0, 4.0], g100) == 0.0
    g10 = np.zeros((3, 3, 2))
    g10[..., 0] = 10.0
    assert f1_all(g10 + [0.0, 4.0], g10) == 100.0
    assert math.isnan(s40(gt, gt))
    one = np.array([[[50.0, 0.0]]])
    assert abs(s40(one + [0.0, 2.0], one) - 2.0) < 1e-12
    mixed = _rng(1).normal(size=(6, 6, 2)) * 40
    pm = mixed + _rng(2).normal(size=mixed.shape)
    sel = np.linalg.norm(mixed, axis=-1) > 40
    assert abs(s40(pm, mixed) - np.linalg.norm(pm - mixed, axis=-1)[sel].mean()) < 1e-12


@oracle("metrics-io", ".flo roundtrip, bad magic, 28-byte oracle")
def _():
    from .flowio import FlowFormatError, parse_flo, read_flo, write_flo

    flow = _rng().normal(size=(3, 5, 2)).astype(np.float32)
    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "a.flo"
        write_flo(flow, p)
        assert np.array_equal(read_flo(p), flow)
        oracle_bytes = struct.pack("<f", 202021.25) + struct.pack("<i", 2) + struct.pack("<i", 1) + struct.pack("<4f", 1, 2, 3, 4)
        assert len(oracle_bytes) == 28
        write_flo(np.array([[[1.0, 2.0], [3.0, 4.0]]]), p)
        assert p.read_bytes() == oracle_bytes
        _close(parse_flo(oracle_bytes), [[[1, 2], [3, 4]]], 0)
    try:
        parse_flo(struct.pack("<f", 1.5) + oracle_bytes[4:])
        raise AssertionError("bad magic accepted")
    except FlowFormatError as exc:
        assert "1.5" in str(exc)


@oracle("metrics-io", "colour coding: white zero, +x hue, rotational symmetry")
def _():
    from .flowio import flow_to_color, make_color_wheel

    assert (flow_to_color(np.zeros((4, 4, 2))) == 255).all()
    img = flow_to_color(np.broadcast_to([2.0, 0.0], (3, 3, 2)), max_norm=2.0)
    assert (img == np.round(make_color_wheel()[0]).astype(np.uint8)).all()
    n = 9
    ys, xs = np.mgrid[0:n, 0:n] - (n - 1) / 2
    field = np.stack([-ys, xs], axis=-1)  # rotational field
    c = flow_to_color(field, max_norm=6.0)
    # quarter turn maps the field onto itself with hue shifted by 90 degrees; the
    # magnitude pattern (saturation) must be invariant
    sat = 255 - c.min(axis=-1).astype(int)
    assert np.array_equal(sat, np.rot90(sat))


@oracle("metrics-io", "synthetic pairs: zero motion, pure shift, warp consistency")
def _():
    from .synthetic import gen_synthetic, sample_bilinear, translation_sample

    z = translation_sample(0, 16, (0.0, 0.0))
    assert np.array_equal(z.img1, z.img2) and not z.flow.any()
    s = translation_sample(1, 16, (2.0, 0.0))
    _close(s.img1[:, :-2], s.img2[:, 2:], 1e-12)
    assert not s.occluded[:, :-2].any()
    for smp in gen_synthetic(5, 3, size=24, max_disp=4, max_rotation_deg=5):
        H, W = smp.flow.shape[:2]
        ys, xs = np.mgrid[0:H, 0:W]
        warped = sample_bilinear(smp.img2, np.stack([xs, ys], -1) + smp.flow)
        assert np.abs(warped - smp.img1)[~smp.occluded].max(initial=0.0) < 1e-3


@dataclass
class SelftestResult:
    module: str
    name: str
    passed: bool
    message: str = ""


def run_selftest(verbose: bool = True) -> list[SelftestResult]:
    results = []
    with T.precision("float64"):
        for module, name, fn in CHECKS:
            try:
                fn()
                results.append(SelftestResult(module, name, True))
            except Exception as exc:  # noqa: BLE001 - report and continue
                msg = f"{type(exc).__name__}: {exc}" if str(exc) else traceback.format_exc(limit=2)
                results.append(SelftestResult(module, name, False, msg))
            if verbose:
                r = results[-1]
                print(f"{'PASS' if r.passed else 'FAIL'} [{module}] {name}" + ("" if r.passed else f"\n    {r.message}"), flush=True)
    if verbose:
        n_pass = sum(r.passed for r in results)
        print(f"{n_pass} passed, {len(results) - n_pass} failed")
    return results
