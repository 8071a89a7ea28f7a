"""Train each component variant over several seeds and report held-out EPE.

Usage: python3 scripts/ablations.py [--steps 300] [--seeds 0 1 2] [--out ablations.json]
"""

import argparse

from ssmflow.ablation import VARIANTS, run_ablation


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=list(VARIANTS))
    p.add_argument("--out", default="ablations.json")
    args = p.parse_args()
    report = run_ablation(args.steps, tuple(args.seeds), tuple(args.variants), progress=lambda s: print(s, flush=True))
    report.save(args.out)
    print(report.table())
    if "full" in report.epe and "concat" in report.epe:
        ok, ratio = report.aga_vs_concat()
        print(f"AGA / concat EPE ratio {ratio:.3f} ({'ok' if ok else 'worse than concat by more than 5%'})")
    print(f"largest degradation: {report.worst_toggle()}")


if __name__ == "__main__":
    main()
