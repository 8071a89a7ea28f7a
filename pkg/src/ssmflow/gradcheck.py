"""Central finite-difference checks of the tape gradients.

Every check runs in float64. A scalar loss ``sum(f(...) * R)`` with a fixed
random ``R`` turns any output into a scalar. An entry passes when
``|num - ana| / max(|num|, |ana|)`` is below the relative tolerance or
``|num - ana|`` is below ``ABS_TOL``. Both conditions are folded into one
score, ``|num - ana| / max(|num|, |ana|, ABS_TOL / tol)``, which is below
``tol`` exactly when the entry passes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor

PRIMITIVE_TOL = 1e-4
END2END_TOL = 1e-3
STEP = 1e-5
# The cost lookup is piecewise linear in the flow, so a full model has kinks.
# A smaller step makes it less likely that a perturbation straddles one.
END2END_STEP = 1e-6
ABS_TOL = 1e-6


@dataclass
class CheckResult:
    name: str
    rel_error: float
    tol: float
    entries: int
    abs_error: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(self.rel_error < self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<32} rel_err={self.rel_error:.2e} abs_err={self.abs_error:.1e} tol={self.tol:.0e} entries={self.entries}"


def _projected(out: Tensor, proj: np.ndarray | None) -> Tensor:
    return (out * Tensor(proj)).sum() if proj is not None else out.sum()


def check(
    name: str,
    fn: Callable[[], Tensor],
    wrt: list[Tensor],
    tol: float = PRIMITIVE_TOL,
    h: float = STEP,
    max_entries: int | None = None,
    seed: int = 0,
) -> CheckResult:
    """Compare tape gradients of ``fn`` with respect to ``wrt`` against central differences.

    ``fn`` takes no arguments and reads the tensors in ``wrt`` by closure;
    their ``data`` is perturbed in place. With ``max_entries`` only that many
    randomly chosen entries of each tensor are differenced.
    """
    rng = np.random.default_rng(seed)
    with T.precision("float64"):
        for t in wrt:
            t.data = t.data.astype(np.float64)
            t.requires_grad = True
        out = fn()
        proj = rng.normal(size=out.shape) if out.ndim else None
        grads = T.backward(_projected(out, proj))

        def value() -> float:
            with T.no_grad():
                return float(_projected(fn(), proj).item())

        worst, worst_abs, count = 0.0, 0.0, 0
        for t in wrt:
            ana = grads.get(t, np.zeros_like(t.data))
            flat_idx = np.arange(t.data.size)
            if max_entries is not None and t.data.size > max_entries:
                flat_idx = rng.choice(t.data.size, max_entries, replace=False)
            num = np.empty(len(flat_idx))
            flat = t.data.reshape(-1)
            for j, k in enumerate(flat_idx):
                orig = flat[k]
                flat[k] = orig + h
                fp = value()
                flat[k] = orig - h
                fm = value()
                flat[k] = orig
                num[j] = (fp - fm) / (2 * h)
            a = ana.reshape(-1)[flat_idx]
            diff = np.abs(num - a)
            scale = np.maximum(np.abs(num), np.abs(a))
            rel = diff / np.maximum(scale, ABS_TOL / tol)
            worst = max(worst, float(rel.max(initial=0.0)))
            worst_abs = max(worst_abs, float(diff.max(initial=0.0)))
            count += len(flat_idx)
    return CheckResult(name, worst, tol, count, worst_abs)


def _rand(rng, *shape, low=None, high=None) -> Tensor:
    arr = rng.normal(size=shape) if low is None else rng.uniform(low, high, size=shape)
    return Tensor(arr, requires_grad=True)


def primitive_checks(seed: int = 0) -> list[CheckResult]:
    from .ssm import selective_scan

    rng = np.random.default_rng(seed)
    r = lambda *s, **kw: _rand(rng, *s, **kw)  # noqa: E731
    res = []
    with T.precision("float64"):
        a, b = r(3, 4), r(3, 4)
        bias = r(4)
        res.append(check("add (bias broadcast)", lambda: a + bias, [a, bias]))
        res.append(check("sub", lambda: a - b, [a, b]))
        res.append(check("mul", lambda: a * b, [a, b]))
        pos = r(3, 4, low=0.5, high=2.0)
        res.append(check("div", lambda: a / pos, [a, pos]))
        res.append(check("neg", lambda: -a, [a]))
        res.append(check("exp", lambda: T.exp(a), [a]))
        res.append(check("log", lambda: T.log(pos), [pos]))
        res.append(check("sqrt", lambda: T.sqrt(pos), [pos]))
        away = Tensor(np.sign(a.data) * (np.abs(a.data) + 0.1), requires_grad=True)
        res.append(check("abs", lambda: T.abs_(away), [away]))
        for fname in ("sigmoid", "silu", "gelu", "softplus"):
            f = getattr(T, fname)
            res.append(check(fname, lambda f=f: f(a), [a]))
        x3 = r(2, 3, 4)
        res.append(check("sum(axis=1)", lambda: T.sum_(x3, axis=1), [x3]))
        res.append(check("mean(keepdims)", lambda: T.mean(x3, axis=(0, 2), keepdims=True), [x3]))
        res.append(check("reshape", lambda: T.reshape(x3, (6, 4)), [x3]))
        res.append(check("transpose", lambda: T.transpose(x3, (2, 0, 1)), [x3]))
        res.append(check("reverse", lambda: T.reverse(x3, 1), [x3]))
        y3 = r(2, 2, 4)
        res.append(check("concat", lambda: T.concat([x3, y3], axis=1), [x3, y3]))
        res.append(check("getitem", lambda: x3[:, 1:, ::2], [x3]))
        res.append(check("pad", lambda: T.pad(x3, [(0, 0), (1, 2), (0, 1)]), [x3]))
        m1, m2, w2 = r(2, 3, 4), r(2, 4, 5), r(4, 5)
        res.append(check("matmul (batched)", lambda: T.matmul(m1, m2), [m1, m2]))
        res.append(check("matmul (2-D rhs)", lambda: T.matmul(m1, w2), [m1, w2]))
        res.append(check("softmax (two axes)", lambda: T.softmax(x3, axes=(-2, -1)), [x3]))
        g, bb = r(4), r(4)
        res.append(check("layer_norm", lambda: T.layer_norm(x3, g, bb), [x3, g, bb]))
        img, k, kb = r(1, 5, 6, 2), r(3, 3, 2, 3), r(3)
        res.append(check("conv2d stride 2", lambda: T.conv2d(img, k, kb, stride=2, padding=1), [img, k, kb]))
        seq, dk, db = r(2, 7, 3), r(3, 4), r(3)
        res.append(check("conv1d_depthwise_causal", lambda: T.conv1d_depthwise_causal(seq, dk, db), [seq, dk, db]))
        res.append(check("resize_bilinear", lambda: T.resize_bilinear(img, (7, 9)), [img]))
        maps = r(2, 3, 5, 6)
        pts = Tensor(rng.uniform(-0.7, 5.6, size=(2, 3, 4, 2)) + 0.137, requires_grad=True)
        centers = Tensor(rng.uniform(-0.7, 5.6, size=(2, 3, 2)) + 0.137, requires_grad=True)
        offs = np.array([[0.0, 0.0], [1.0, -1.0], [-2.0, 1.0]])
        res.append(check("bilinear_sample", lambda: T.bilinear_sample(maps, pts), [maps, pts]))
        res.append(check("bilinear_sample (window)", lambda: T.bilinear_sample(maps, centers, offs), [maps, centers]))
        sx, sd = r(2, 9, 3), r(2, 9, 3, low=0.05, high=1.0)
        sA = Tensor(-rng.uniform(0.5, 3.0, size=(3, 4)), requires_grad=True)
        sB, sC = r(2, 9, 4), r(2, 9, 4)
        res.append(check("selective_scan", lambda: selective_scan(sx, sd, sA, sB, sC), [sx, sd, sA, sB, sC]))
        res.append(check("selective_scan (numpy)", lambda: selective_scan(sx, sd, sA, sB, sC, reference=True), [sx, sd, sA, sB, sC]))
    return res


def block_checks(seed: int = 0, max_entries: int = 8) -> list[CheckResult]:
    from .mamba import CrossMambaBlock, MambaConfig, SelfMambaBlock
    from .matching import global_match
    from .polymamba import PolyMambaBlock, PolyMambaConfig
    from .pulsemamba import AGA, ConcatFuse, MotionEncoder, PulseConfig, PulseMamba, RefinementState, lookup_cost

    rng = np.random.default_rng(seed)
    r = lambda *s, **kw: _rand(rng, *s, **kw)  # noqa: E731
    res = []
    with T.precision("float64"):
        mc = MambaConfig(d_state=4, expand=2, conv_width=3)
        D = 4

        sm = SelfMambaBlock(D, mc, rng)
        F = r(1, 6, D)
        res.append(check("Self-Mamba", lambda: sm(F), [F] + sm.parameters(), max_entries=max_entries))

        cm = CrossMambaBlock(D, mc, rng)
        F1, F2 = r(1, 6, D), r(1, 6, D)
        res.append(check("Cross-Mamba", lambda: cm(F1, F2), [F1, F2] + cm.parameters(), max_entries=max_entries))

        pb = PolyMambaBlock(PolyMambaConfig(dim=D, depth=1, mlp_ratio=2, mamba=mc), rng)
        G1, G2 = r(1, 2, 3, D), r(1, 2, 3, D)
        res.append(check("PolyMamba block", lambda: T.concat(list(pb(G1, G2)), axis=-1), [G1, G2] + pb.parameters(), max_entries=max_entries))

        Fq, Fv = r(1, 3, 3, D), r(1, 3, 3, D)
        res.append(check("global_match", lambda: global_match(Fq, Fv)[0], [Fq, Fv]))

        cost = r(1, 3, 3, 3, 3)
        V = Tensor(rng.uniform(-1.2, 1.2, size=(1, 3, 3, 2)) + 0.0731, requires_grad=True)
        res.append(check("lookup_cost", lambda: lookup_cost(cost, V, 1), [cost, V]))

        Dm, Dh = 3, 4
        me = MotionEncoder(9, Dm, rng)
        cf = r(1, 3, 3, 9)
        res.append(check("MotionEncoder", lambda: me(V, cf), [V, cf] + me.parameters(), max_entries=max_entries))

        M, Fq2, h = r(1, 3, 3, Dm), r(1, 3, 3, D), r(1, 3, 3, Dh)
        ag = AGA(Dm, D, Dh, rng)
        res.append(check("AGA", lambda: ag(M, Fq2, h)[0], [M, Fq2, h] + ag.parameters(), max_entries=max_entries))
        cc = ConcatFuse(Dm, D, Dh, rng)
        res.append(check("concat fuse", lambda: cc(M, Fq2, h)[0], [M, Fq2, h] + cc.parameters(), max_entries=max_entries))

        pm = PulseMamba(PulseConfig(feat_dim=D, hidden_dim=Dh, motion_dim=Dm, radius=1, iters=1, mamba=mc), rng)

        def one_step():
            st = pm.step(RefinementState(h=h, V=V), Fq2, cost)
            return T.concat([st.h, st.V], axis=-1)

        res.append(check("pulse_step", one_step, [V, h, Fq2, cost] + pm.parameters(), max_entries=max_entries))
    return res


def end2end_check(seed: int = 0, max_entries: int = 3, size: int = 16) -> CheckResult:
    """Loss gradient of a tiny model on a ``size``-square pair, sampled entries."""
    from .config import tiny_config
    from .model import MambaFlow, sequence_loss, upsample_flow

    rng = np.random.default_rng(seed)
    cfg = tiny_config(dim=8, depth=1, d_state=4, hidden_dim=8, motion_dim=4, radius=1, precision="float64", seed=seed)
    model = MambaFlow(cfg)
    I1 = Tensor(rng.uniform(size=(1, size, size, 3)), requires_grad=True)
    I2 = Tensor(rng.uniform(size=(1, size, size, 3)))
    gt = rng.uniform(-2, 2, size=(1, size, size, 2))

    def loss():
        out = model(I1, I2)
        return sequence_loss([upsample_flow(V, cfg.downsample) for V in out.flows], gt)

    return check(f"end-to-end {size}x{size}", loss, [I1] + model.parameters(), tol=END2END_TOL, h=END2END_STEP, max_entries=max_entries, seed=seed)


def run(scope: str = "primitives", seed: int = 0) -> list[CheckResult]:
    if scope == "primitives":
        return primitive_checks(seed)
    if scope == "blocks":
        return block_checks(seed)
    if scope == "end2end":
        return [end2end_check(seed)]
    if scope == "all":
        return primitive_checks(seed) + block_checks(seed) + [end2end_check(seed)]
    raise ValueError(f"unknown gradcheck scope {scope!r}")
