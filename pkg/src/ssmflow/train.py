"""Desk-scale training loop on synthetic flow pairs."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .metrics import epe, f1_all, s40
from .model import MambaFlow, sequence_loss, upsample_flow
from .optim import AdamW
from .synthetic import FlowSample, gen_synthetic, split_holdout, stack
from .weights import WeightStore


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient.

    ``last_good`` holds the weights from the last step whose loss was finite.
    """

    def __init__(self, step: int, reason: str, last_good: WeightStore):
        self.step = step
        self.last_good = last_good
        super().__init__(f"training diverged at step {step}: {reason}")


@dataclass
class TrainSettings:
    steps: int = 600
    lr: float = 1e-3
    batch: int = 8
    weight_decay: float = 1e-4
    clip: float = 1.0
    gamma: float = 0.8
    eval_every: int = 100
    seed: int = 0
    n_samples: int = 240
    size: int = 32
    max_disp: float = 4.0


@dataclass
class EvalResult:
    epe: float
    f1_all: float
    s40: float
    epe_per_iter: list[float]


@dataclass
class TrainResult:
    store: WeightStore
    log: list[dict[str, float]]
    initial: EvalResult
    final: EvalResult
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)


LOG_FIELDS = ("step", "train_loss", "epe", "f1_all", "s40")


def toy_dataset(seed: int, n_samples: int = 240, size: int = 32, max_disp: float = 4.0):
    """Translations up to ``max_disp`` px with an 80/20 train/holdout split."""
    return split_holdout(gen_synthetic(seed, n_samples, size=size, max_disp=max_disp))


def evaluate(model: MambaFlow, samples: list[FlowSample], batch: int = 16) -> EvalResult:
    """Held-out metrics at image resolution; ``epe_per_iter[i]`` scores ``V^(i)``."""
    dt = T.get_dtype()
    preds: list[list[np.ndarray]] = []
    gts = []
    with T.no_grad():
        for lo in range(0, len(samples), batch):
            i1, i2, gt = stack(samples[lo:lo + batch])
            out = model(T.Tensor(i1.astype(dt)), T.Tensor(i2.astype(dt)))
            preds.append([upsample_flow(V, model.cfg.downsample).data for V in out.flows])
            gts.append(gt)
    gt = np.concatenate(gts)
    per_iter = [np.concatenate([p[i] for p in preds]) for i in range(len(preds[0]))]
    final = per_iter[-1]
    return EvalResult(epe(final, gt), f1_all(final, gt), s40(final, gt), [epe(p, gt) for p in per_iter])


def clip_grad_norm(grads: dict[T.Tensor, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = (grads[k] * scale).astype(grads[k].dtype)
    return total


def write_log(log: list[dict[str, float]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for row in log:
            w.writerow({k: row[k] for k in LOG_FIELDS})


def train_toy(
    config: ModelConfig,
    dataset: tuple[list[FlowSample], list[FlowSample]] | None = None,
    settings: TrainSettings | None = None,
    log_path: str | Path | None = None,
    verbose: bool = False,
    **overrides,
) -> TrainResult:
    """Train ``config`` on ``(train, holdout)`` with AdamW and a constant rate.

    Model initialisation and batch order both derive from ``settings.seed``, so
    a fixed seed reproduces the metric log exactly. ``overrides`` replace
    fields of ``settings`` (``steps=0`` returns the initial weights).
    """
    s = settings or TrainSettings()
    if overrides:
        s = TrainSettings(**{**s.__dict__, **overrides})
    if s.steps < 0 or s.batch < 1:
        raise ValueError(f"steps must be >= 0 and batch >= 1 (got {s.steps}, {s.batch})")
    config = config.replace(seed=s.seed)
    train, holdout = dataset if dataset is not None else toy_dataset(s.seed, s.n_samples, s.size, s.max_disp)
    model = MambaFlow(config)
    dt = T.get_dtype()
    params = model.parameters()
    opt = AdamW(params, lr=s.lr, weight_decay=s.weight_decay)
    rng = np.random.default_rng(s.seed + 1)
    t_start = time.perf_counter()

    initial = evaluate(model, holdout)
    log: list[dict[str, float]] = []
    last_good = WeightStore.from_model(model)
    loss_ema = math.nan
    order = np.array([], dtype=int)
    final = initial
    # non-finite values are detected explicitly below, so numpy's warnings are noise
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(1, s.steps + 1):
            if len(order) < s.batch:
                order = np.concatenate([order, rng.permutation(len(train))])
            idx, order = order[:s.batch], order[s.batch:]
            i1, i2, gt = stack([train[i] for i in idx])
            out = model(T.Tensor(i1.astype(dt)), T.Tensor(i2.astype(dt)))
            flows = [upsample_flow(V, config.downsample) for V in out.flows]
            loss = sequence_loss(flows, gt.astype(dt), s.gamma)
            value = float(loss.item())
            if not math.isfinite(value):
                raise DivergenceError(step, f"loss is {value}", last_good)
            grads = T.backward(loss)
            norm = clip_grad_norm(grads, s.clip)
            if not math.isfinite(norm):
                raise DivergenceError(step, "non-finite gradient norm", last_good)
            opt.step(grads)
            loss_ema = value if math.isnan(loss_ema) else 0.9 * loss_ema + 0.1 * value
            if step % s.eval_every == 0 or step == s.steps:
                ev = final = evaluate(model, holdout)
                if math.isfinite(ev.epe):
                    last_good = WeightStore.from_model(model)
                log.append({"step": step, "train_loss": loss_ema, "epe": ev.epe, "f1_all": ev.f1_all, "s40": ev.s40})
                if verbose:
                    print(f"step {step:5d}  loss {loss_ema:.4f}  holdout epe {ev.epe:.4f}  per-iter {[round(e, 3) for e in ev.epe_per_iter]}", flush=True)

    if log_path is not None:
        write_log(log, log_path)
    return TrainResult(WeightStore.from_model(model), log, initial, final, time.perf_counter() - t_start)
