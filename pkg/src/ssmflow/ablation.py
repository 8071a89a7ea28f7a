"""Component ablations at toy scale, compared by held-out EPE across seeds."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .config import ModelConfig, tiny_config
from .train import TrainResult, TrainSettings, train_toy

VARIANTS: dict[str, dict[str, bool]] = {
    "full": {},
    "concat": {"use_aga": False},
    "no_self": {"use_self": False},
    "no_cross": {"use_cross": False},
    "no_mlp": {"use_mlp": False},
    "no_pos": {"use_pos": False},
}
COMPONENT_TOGGLES = ("no_self", "no_cross", "no_mlp", "no_pos")


def ablation_settings(steps: int, seed: int) -> TrainSettings:
    """The toy-training protocol with a single evaluation at the end."""
    return TrainSettings(steps=steps, seed=seed, eval_every=steps or 1)


@dataclass
class AblationReport:
    steps: int
    seeds: list[int]
    epe: dict[str, list[float]] = field(default_factory=dict)
    seconds: dict[str, float] = field(default_factory=dict)

    def mean(self, variant: str) -> float:
        return float(np.mean(self.epe[variant]))

    def aga_vs_concat(self) -> tuple[bool, float]:
        """AGA no worse than concatenation, or within 5% of it."""
        a, c = self.mean("full"), self.mean("concat")
        return a <= 1.05 * c, a / c

    def worst_toggle(self) -> str:
        return max((t for t in COMPONENT_TOGGLES if t in self.epe), key=self.mean)

    def table(self) -> str:
        base = self.mean("full")
        lines = [f"{'variant':<10}{'mean EPE':>10}{'vs full':>9}  per seed"]
        for v in self.epe:
            per = " ".join(f"{e:.3f}" for e in self.epe[v])
            lines.append(f"{v:<10}{self.mean(v):>10.4f}{self.mean(v) - base:>+9.4f}  {per}")
        return "\n".join(lines)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.__dict__, indent=2))

    @classmethod
    def load(cls, path: str | Path) -> AblationReport:
        return cls(**json.loads(Path(path).read_text()))


def run_ablation(
    steps: int = 300,
    seeds: tuple[int, ...] = (0, 1, 2),
    variants: tuple[str, ...] = tuple(VARIANTS),
    base: ModelConfig | None = None,
    progress: Callable[[str], None] | None = None,
    cache: dict[tuple[str, int], TrainResult] | None = None,
) -> AblationReport:
    """Train every variant once per seed; variants sharing a seed see the same data.

    ``cache`` maps ``(variant, seed)`` to finished runs of the same protocol.
    Hits are reused and new runs are added to it.
    """
    cache = {} if cache is None else cache
    base = base or tiny_config()
    report = AblationReport(steps, list(seeds))
    for v in variants:
        report.epe[v] = []
        report.seconds[v] = 0.0
        for seed in seeds:
            if (v, seed) not in cache:
                cache[v, seed] = train_toy(base.replace(**VARIANTS[v]), settings=ablation_settings(steps, seed))
            res = cache[v, seed]
            report.epe[v].append(res.final.epe)
            report.seconds[v] += res.seconds
            if progress:
                progress(f"{v:<10} seed {seed}  holdout EPE {res.final.epe:.4f}  ({res.seconds:.0f} s)")
    return report
