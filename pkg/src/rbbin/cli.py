"""Command-line entry point: ``rbbin binarize | evaluate | synth``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
import traceback
from pathlib import Path

from .background import DEFAULT_LAMBDA_GRID, HuberConfig
from .errors import BinarizationError
from .harness import (METHODS, RunConfig, gen_synthetic_suite, load_manifest, run_dataset,
                      run_single)

log = logging.getLogger("rbbin")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _add_model_options(p):
    g = p.add_argument_group("background model (proposed method only)")
    g.add_argument("--lambda-grid", type=float, nargs="+", metavar="LAM",
                   help=f"smoothing grid (default {' '.join(f'{x:g}' for x in DEFAULT_LAMBDA_GRID)})")
    g.add_argument("--lambda-rule", choices=("smoothest", "objective"),
                   help="per-stage lambda choice (default objective)")
    g.add_argument("--lambda-rtol", type=float,
                   help="relative objective slack for preferring a larger lambda (default 0.5)")
    g.add_argument("--delta", type=float, help="Huber cutoff in 8-bit gray levels (default 1.346)")
    g.add_argument("--max-stages", type=_positive_int, help="boosting stage limit (default 20)")
    g.add_argument("--cap", type=_positive_int, help="exact threshold candidate cap (default 4096)")
    g = p.add_argument_group("local thresholds (niblack / sauvola only)")
    g.add_argument("--window", type=int, help="odd window size (default 25)")
    g.add_argument("--k", type=float, help="method constant (niblack -0.2, sauvola 0.5)")
    p.add_argument("--invert", action="store_true",
                   help="foreground is light on a dark background")


def build_parser():
    parser = argparse.ArgumentParser(prog="rbbin", description="Robust background subtraction binarization.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("binarize", help="binarize one image")
    p.add_argument("input", type=Path)
    p.add_argument("--method", choices=METHODS, default="proposed")
    p.add_argument("--out", type=Path, default=Path("rb_out"), help="output directory")
    _add_model_options(p)

    p = sub.add_parser("evaluate", help="score methods over a manifest")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--methods", nargs="+", choices=METHODS, default=["proposed"])
    p.add_argument("--report", choices=("csv", "json"), default="csv")
    p.add_argument("--jobs", type=_positive_int, default=1)
    p.add_argument("--out", type=Path, default=Path("rb_out"), help="output directory")
    p.add_argument("--no-timing", action="store_true",
                   help="leave the seconds column blank so reports are byte-reproducible")
    _add_model_options(p)

    p = sub.add_parser("synth", help="write the synthetic evaluation suite")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _huber_from(args):
    fields = {"lambda_grid": args.lambda_grid and tuple(args.lambda_grid),
              "lambda_rule": args.lambda_rule, "lambda_rtol": args.lambda_rtol,
              "delta": args.delta, "max_stages": args.max_stages}
    given = {k: v for k, v in fields.items() if v is not None}
    return HuberConfig(**given) if given else None


def _config(args, method, lenient=False, **extra):
    """RunConfig for `method`; with `lenient`, options for other methods are dropped."""
    huber, cap, window, k = _huber_from(args), args.cap, args.window, args.k
    if method != "proposed" and (huber is not None or cap is not None):
        if not lenient:
            raise UsageError(f"background-model options do not apply to --method {method}")
        huber = cap = None
    if method not in ("niblack", "sauvola") and (window is not None or k is not None):
        if not lenient:
            raise UsageError(f"--window/--k do not apply to --method {method}")
        window = k = None
    try:
        return RunConfig(method=method, huber=huber, cap=cap, window=window, k=k,
                         polarity="light" if args.invert else "dark", out_dir=args.out, **extra)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _cmd_binarize(args):
    cfg = _config(args, args.method)
    record = run_single(args.input, cfg)
    tau = "n/a" if record.tau is None else f"{record.tau:.6g}"
    print(f"{args.input}: tau={tau} foreground={record.sidecar['foreground_fraction']:.4f} "
          f"-> {record.files['mask']}")
    return EXIT_OK


def _cmd_evaluate(args):
    methods = list(dict.fromkeys(args.methods))
    multi = len(methods) > 1
    if multi:
        # every given option must apply to at least one requested method
        if (args.window is not None or args.k is not None) and not {"niblack", "sauvola"} & set(methods):
            raise UsageError("--window/--k need niblack or sauvola among --methods")
        if (_huber_from(args) is not None or args.cap is not None) and "proposed" not in methods:
            raise UsageError("background-model options need proposed among --methods")
    manifest = load_manifest(args.manifest)
    for method in methods:
        cfg = _config(args, method, lenient=multi, report=args.report, jobs=args.jobs,
                      timing=not args.no_timing)
        report = run_dataset(manifest, cfg)
        for row in report.errors:
            log.warning("%s/%s: %s", method, row["id"], row["error"])
        fm = report.mean["FM"]
        print(f"{method}: {len(report.rows) - len(report.errors)}/{len(report.rows)} images, "
              f"mean FM={'n/a' if fm is None else f'{fm:.4f}'} "
              f"-> {cfg.out_dir / method / ('report.' + cfg.report)}")
        if report.errors:
            print(f"warning: {len(report.errors)} image(s) failed; see report", file=sys.stderr)
    return EXIT_OK


def _cmd_synth(args):
    manifest = gen_synthetic_suite(args.out, args.seed)
    print(f"wrote {len(manifest)} scenes and {Path(args.out) / 'manifest.json'}")
    return EXIT_OK


COMMANDS = {"binarize": _cmd_binarize, "evaluate": _cmd_evaluate, "synth": _cmd_synth}


def _setup_logging(verbose):
    level = os.environ.get("RB_LOG", "").upper() or ("DEBUG" if verbose > 1 else "INFO" if verbose else "WARNING")
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    _setup_logging(args.verbose)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"rbbin: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"rbbin: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BinarizationError as exc:
        log.debug("%s", traceback.format_exc())
        print(f"rbbin: error: {_where(exc)}{exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, TypeError) as exc:
        print(f"rbbin: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"rbbin: error: {exc}", file=sys.stderr)
        return EXIT_IO


def _where(exc):
    """``file:line: `` of the innermost frame that raised `exc`."""
    tb = traceback.extract_tb(exc.__traceback__)
    return f"{Path(tb[-1].filename).name}:{tb[-1].lineno}: " if tb else ""


if __name__ == "__main__":
    sys.exit(main())
