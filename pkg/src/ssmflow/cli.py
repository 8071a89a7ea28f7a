"""Command-line entry point.

Exit codes: 0 success, 1 validation failure (bad arguments, unreadable or
incompatible inputs, failing checks), 2 internal error (including training
divergence).
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_INVALID, EXIT_INTERNAL = 0, 1, 2


class ValidationError(Exception):
    """A user-facing input problem; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError(f"{self.prog}: {message}")


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"{what} not found: {p}")
    return p


# -- subcommands ---------------------------------------------------------------


def cmd_infer(args) -> int:
    from . import tensor as T
    from .flowio import flow_to_color, read_image, write_flo, write_image
    from .model import MambaFlow
    from .weights import load_weights

    store = load_weights(_require_file(args.weights, "weights file"))
    img1 = read_image(_require_file(args.img1, "image"))
    img2 = read_image(_require_file(args.img2, "image"))
    if img1.shape != img2.shape:
        raise ValidationError(f"image sizes differ: {img1.shape[:2]} vs {img2.shape[:2]}")
    if args.iters is not None and args.iters < 0:
        raise ValidationError("--iters must be >= 0")
    model = MambaFlow(store.config)
    store.apply_to(model)
    dt = T.get_dtype()
    t0 = time.perf_counter()
    with T.no_grad():
        out = model(T.Tensor(img1.astype(dt)), T.Tensor(img2.astype(dt)), iters=args.iters)
    total = time.perf_counter() - t0
    flow = out.flow.data
    write_flo(flow, args.out)
    if args.viz:
        write_image(flow_to_color(flow), args.viz)
    for stage, sec in out.timings.items():
        print(f"{stage:<12}{sec * 1e3:10.1f} ms")
    print(f"{'total':<12}{total * 1e3:10.1f} ms")
    mag = np.linalg.norm(flow, axis=-1)
    print(f"wrote {args.out} ({flow.shape[1]}x{flow.shape[0]}, median |V| {np.median(mag):.3f} px)")
    return EXIT_OK


def cmd_train_toy(args) -> int:
    from .config import ModelConfig, tiny_config
    from .train import DivergenceError, TrainSettings, train_toy
    from .weights import save_weights

    cfg = ModelConfig.from_text(_require_file(args.config, "config file").read_text(), tiny_config()) if args.config else tiny_config()
    if args.steps < 0:
        raise ValidationError("--steps must be >= 0")
    settings = TrainSettings(steps=args.steps, seed=args.seed, lr=args.lr, batch=args.batch, eval_every=args.eval_every)
    log_path = args.log or str(Path(args.out).with_suffix(".csv"))
    try:
        res = train_toy(cfg, settings=settings, log_path=log_path, verbose=not args.quiet)
    except DivergenceError as exc:
        save_weights(exc.last_good, args.out)
        print(f"error: {exc}; last good weights written to {args.out}", file=sys.stderr)
        return EXIT_INTERNAL
    save_weights(res.store, args.out)
    print(f"initial holdout EPE {res.initial.epe:.4f}  final {res.final.epe:.4f}  ({res.seconds:.1f} s)")
    print(f"wrote {args.out} and {log_path}")
    return EXIT_OK


def cmd_bench_scan(args) -> int:
    from .bench import amortized_ratio, bench_scan, format_table, write_csv

    if args.max_len < args.min_len:
        raise ValidationError("--max-len must be >= --min-len")
    rows = bench_scan(max_len=args.max_len, state=args.state, channels=args.channels, min_len=args.min_len, repeats=args.repeats)
    write_csv(rows, args.out)
    print(format_table(rows))
    for form in ("sequential", "parallel", "kernel"):
        print(f"amortized doubling ratio {form:<11}{amortized_ratio(rows, form, min_len=args.ratio_from):.3f}")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run

    results = run(args.scope, seed=args.seed)
    for r in results:
        print(r.line(), flush=True)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)} passed, {len(failed)} failed")
    if failed:
        print("failing: " + ", ".join(failed), file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    results = run_selftest(verbose=True)
    failed = [f"[{r.module}] {r.name}" for r in results if not r.passed]
    if failed:
        print("failing: " + "; ".join(failed), file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


def cmd_viz(args) -> int:
    from .flowio import flow_to_color, read_flo, write_image

    if args.max_norm is not None and args.max_norm <= 0:
        raise ValidationError("--max-norm must be positive")
    flow = read_flo(_require_file(args.flo, "flow file"))
    write_image(flow_to_color(flow, args.max_norm), args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ssmflow", description="Selective state-space optical flow toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("infer", help="estimate flow between two images")
    s.add_argument("--weights", required=True)
    s.add_argument("--img1", required=True)
    s.add_argument("--img2", required=True)
    s.add_argument("--out", required=True, help="output .flo path")
    s.add_argument("--viz", help="optional PNG/PPM colour rendering")
    s.add_argument("--iters", type=int, help="refinement iterations (default: from config)")
    s.set_defaults(fn=cmd_infer)

    s = sub.add_parser("train-toy", help="train on synthetic translations")
    s.add_argument("--config", help="key=value config file (defaults to the tiny config)")
    s.add_argument("--steps", type=int, default=600)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--batch", type=int, default=8)
    s.add_argument("--eval-every", type=int, default=100)
    s.add_argument("--out", required=True, help="output weight file")
    s.add_argument("--log", help="CSV metric log (default: --out with .csv suffix)")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(fn=cmd_train_toy)

    s = sub.add_parser("bench-scan", help="time scan forms over doubling lengths")
    s.add_argument("--max-len", type=int, default=16384)
    s.add_argument("--min-len", type=int, default=256)
    s.add_argument("--state", type=int, default=16)
    s.add_argument("--channels", type=int, default=4)
    s.add_argument("--repeats", type=int, default=3)
    s.add_argument("--ratio-from", type=int, default=4096, help="amortize ratios above this length")
    s.add_argument("--out", required=True, help="output CSV")
    s.set_defaults(fn=cmd_bench_scan)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    s.add_argument("--scope", choices=("primitives", "blocks", "end2end", "all"), default="primitives")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("selftest", help="run the built-in oracle checks")
    s.set_defaults(fn=cmd_selftest)

    s = sub.add_parser("viz", help="render a .flo file as a colour image")
    s.add_argument("--flo", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--max-norm", type=float, help="saturation magnitude (default: 99th percentile)")
    s.set_defaults(fn=cmd_viz)
    return p


def main(argv: list[str] | None = None) -> int:
    from .config import ConfigError
    from .flowio import FlowFormatError
    from .weights import WeightFormatError

    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ConfigError, FlowFormatError, WeightFormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - last-resort boundary
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
