"""Timing of the scan forms over doubling sequence lengths."""

from __future__ import annotations

import csv
import math
import timeit
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ssm import StaticSSM, apply_kernel, kernel_form, scan_parallel, scan_sequential

CSV_HEADER = ("form", "L", "N", "D", "ns_per_element")
FORMS = ("sequential", "parallel", "kernel")


@dataclass
class BenchRow:
    form: str
    L: int
    N: int
    D: int
    ns_per_element: float

    @property
    def seconds(self) -> float:
        return self.ns_per_element * self.L * self.N * self.D * 1e-9


def _lengths(min_len: int, max_len: int) -> list[int]:
    out, L = [], min_len
    while L <= max_len:
        out.append(L)
        L *= 2
    return out


def _runner(form: str, ssm: StaticSSM, x: np.ndarray):
    disc = ssm.discretize()
    if form == "sequential":
        return lambda: scan_sequential(disc, x)
    if form == "parallel":
        return lambda: scan_parallel(disc, x, workers=1)
    if form == "kernel":
        return lambda: apply_kernel(kernel_form(disc, x.shape[0]), x)
    raise ValueError(f"unknown scan form {form!r}")


def _timer(form: str, L: int, N: int, D: int, seed: int, min_time: float) -> tuple[timeit.Timer, int]:
    """A ``timeit`` timer for one scan and the loop count that fills ``min_time``."""
    rng = np.random.default_rng(seed)
    ssm = StaticSSM(A=-rng.uniform(0.5, 2.0, size=(D, N)), B=rng.normal(size=N), C=rng.normal(size=N), delta=0.05)
    x = rng.normal(size=(L, D))
    timer = timeit.Timer(_runner(form, ssm, x))
    return timer, max(1, math.ceil(min_time / max(timer.timeit(1), 1e-9)))


def time_form(form: str, L: int, N: int, D: int, repeats: int = 3, seed: int = 0, min_time: float = 0.2) -> float:
    """Fastest per-scan wall time over ``repeats`` loops of at least ``min_time`` seconds."""
    timer, number = _timer(form, L, N, D, seed, min_time)
    return min(timer.repeat(repeats, number)) / number


def bench_scan(
    max_len: int = 16384,
    state: int = 16,
    channels: int = 4,
    min_len: int = 256,
    forms: tuple[str, ...] = FORMS,
    kernel_max_len: int = 8192,
    repeats: int = 3,
    seed: int = 0,
    min_time: float = 0.2,
) -> list[BenchRow]:
    """Time each form at ``min_len, 2*min_len, ..., max_len``.

    The kernel form is quadratic, so it stops at ``kernel_max_len``. Repeats
    are interleaved: each round times every (form, length) once and each keeps
    its fastest round, so a transient slowdown of the machine costs one round
    rather than biasing one length.
    """
    cases = [(f, L) for f in forms for L in _lengths(min_len, max_len) if not (f == "kernel" and L > kernel_max_len)]
    timers = {c: _timer(*c, state, channels, seed, min_time) for c in cases}
    best = dict.fromkeys(cases, math.inf)
    for _ in range(repeats):
        for c, (timer, number) in timers.items():
            best[c] = min(best[c], timer.timeit(number) / number)
    return [BenchRow(f, L, state, channels, best[f, L] / (L * state * channels) * 1e9) for f, L in cases]


def doubling_ratios(rows: list[BenchRow]) -> dict[str, list[tuple[int, float]]]:
    """``t(2L) / t(L)`` per form, keyed by the larger length."""
    out: dict[str, list[tuple[int, float]]] = {}
    for form in dict.fromkeys(r.form for r in rows):
        sel = sorted((r for r in rows if r.form == form), key=lambda r: r.L)
        out[form] = [(b.L, b.seconds / a.seconds) for a, b in zip(sel, sel[1:]) if b.L == 2 * a.L]
    return out


def amortized_ratio(rows: list[BenchRow], form: str, min_len: int = 4096) -> float:
    """Geometric mean of the doubling ratios whose larger length is above ``min_len``."""
    ratios = [r for L, r in doubling_ratios(rows).get(form, []) if L > min_len]
    if not ratios:
        return math.nan
    return float(np.exp(np.mean(np.log(ratios))))


def write_csv(rows: list[BenchRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow([r.form, r.L, r.N, r.D, f"{r.ns_per_element:.4f}"])


def read_csv(path: str | Path) -> list[BenchRow]:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        return [BenchRow(r["form"], int(r["L"]), int(r["N"]), int(r["D"]), float(r["ns_per_element"])) for r in rd]


def format_table(rows: list[BenchRow]) -> str:
    lines = [f"{'form':<11}{'L':>8}{'ns/elem':>12}{'t(2L)/t(L)':>12}"]
    ratios = doubling_ratios(rows)
    for r in rows:
        ratio = dict(ratios.get(r.form, [])).get(r.L)
        lines.append(f"{r.form:<11}{r.L:>8}{r.ns_per_element:>12.3f}{'' if ratio is None else f'{ratio:.2f}':>12}")
    return "\n".join(lines)
