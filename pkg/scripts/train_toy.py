"""Train the tiny configuration on synthetic translations and report per-iteration EPE.

Usage: python3 scripts/train_toy.py [--steps 300] [--seed 0] [--variant full] [--out toy.ssmf]
"""

import argparse

from ssmflow.ablation import VARIANTS
from ssmflow.config import tiny_config
from ssmflow.train import TrainSettings, train_toy
from ssmflow.weights import save_weights


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--eval-every", type=int, default=50)
    p.add_argument("--variant", default="full", choices=list(VARIANTS))
    p.add_argument("--out", default="toy.ssmf")
    args = p.parse_args()
    settings = TrainSettings(steps=args.steps, seed=args.seed, lr=args.lr, eval_every=args.eval_every)
    res = train_toy(tiny_config(**VARIANTS[args.variant]), settings=settings, log_path=args.out.rsplit(".", 1)[0] + ".csv", verbose=True)
    save_weights(res.store, args.out)
    per_iter = " ".join(f"V{i}={e:.3f}" for i, e in enumerate(res.final.epe_per_iter))
    print(f"holdout EPE {res.initial.epe:.3f} -> {res.final.epe:.3f} ({res.seconds:.0f} s); per iteration: {per_iter}")


if __name__ == "__main__":
    main()
