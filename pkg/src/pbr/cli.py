"""Command line interface: ``pbr simulate|estimate|montecarlo|codec``."""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import sys
from typing import Optional, Sequence

from .codec import DEFAULT_BITS, MAX_BITS, CodecBounds, RoundTripReport, roundtrip_trace
from .estimator import EstimatorConfig, count_full_windows, estimate_trace, rtt_estimate
from .metrics import compute_metrics, empty_metrics
from .montecarlo import run_montecarlo
from .sim import ConfigError, TraceFormatError, load_config, read_trace, simulate_trace, write_trace

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2

ESTIMATE_COLUMNS = ["n", "t_A", "d_hat", "delta_hat", "a0", "a1", "a2", "median_abs_residual"]


@contextlib.contextmanager
def _output(path: Optional[str]):
    if path is None or path == "-":
        yield sys.stdout
    else:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            yield fh


def _load_trace(path: str):
    with open(path, encoding="utf-8", newline="") as fh:
        return read_trace(fh, path)


def _emit_json(obj, path: Optional[str], fallback) -> None:
    text = json.dumps(obj, indent=2, allow_nan=False)
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text, file=fallback)


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    records = simulate_trace(cfg, args.seed)
    with _output(args.out) as fh:
        write_trace(records, fh)
    return EXIT_OK


def cmd_estimate(args) -> int:
    records = _load_trace(args.trace)
    rows = []
    errors = []
    if args.method == "pbr":
        cfg = EstimatorConfig(w=args.window, robust_iters=args.robust_iters)
        estimates = estimate_trace(records, cfg)
        skipped = count_full_windows(records, cfg.w) - len(estimates)
        truth = {r.n: r.truth_d_A for r in records}
        for e in estimates:
            rows.append(
                [e.n, e.t_A_n, f"{e.d_hat:.9f}", f"{e.delta_hat:.6e}", f"{e.a0:.9f}", f"{e.a1:.9f}",
                 f"{e.a2:.9f}", f"{e.diagnostics.median_abs_residual:.6e}"]
            )
            if truth[e.n] is not None:
                errors.append(e.d_hat - truth[e.n])
    else:
        skipped = sum(r.s_D is None for r in records)
        for r in records:
            if r.s_D is None:
                continue
            d = rtt_estimate(r)
            rows.append([r.n, r.t_A, f"{d:.9f}", "", "", "", "", ""])
            if r.truth_d_A is not None:
                errors.append(d - r.truth_d_A)

    with _output(args.out) as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(ESTIMATE_COLUMNS)
        out.writerows(rows)
    has_truth = bool(errors) and len(errors) == len(rows)
    report = compute_metrics(errors, skipped) if has_truth else empty_metrics(skipped)
    body = report.to_dict()
    body["method"] = args.method
    body["estimates"] = len(rows)
    to_stdout = args.out not in (None, "-")
    _emit_json(body, args.report, sys.stdout if to_stdout else sys.stderr)
    return EXIT_OK


def cmd_montecarlo(args) -> int:
    cfg = load_config(args.config)
    windows = [int(w) for w in args.windows.split(",") if w.strip()]
    if not windows or min(windows) < 2:
        raise ValueError("--windows needs window sizes >= 2")
    result = run_montecarlo(
        cfg, windows, args.trials, base_seed=args.seed, robust_iters=args.robust_iters, jobs=args.jobs
    )
    with _output(args.out) as fh:
        result.write_csv(fh)
    return EXIT_OK


def _report_dict(rep: RoundTripReport) -> dict:
    return {
        "total_deltas": rep.total_deltas,
        "exact_recoveries": rep.exact_recoveries,
        "failures": rep.failures,
        "undecoded": rep.undecoded,
        "resyncs": rep.resyncs,
        "ambiguous_bootstraps": rep.ambiguous_bootstraps,
    }


def cmd_codec(args) -> int:
    if not 1 <= args.bits <= MAX_BITS:
        raise ValueError(f"--bits must lie in 1..{MAX_BITS}")
    records = _load_trace(args.trace)
    reports = roundtrip_trace(records, args.bits, CodecBounds())
    total = RoundTripReport()
    for rep in reports.values():
        for key in _report_dict(rep):
            setattr(total, key, getattr(total, key) + getattr(rep, key))
    body = {"bits": args.bits, **_report_dict(total), "all_exact": total.all_exact}
    body["streams"] = {name: _report_dict(rep) for name, rep in reports.items()}
    _emit_json(body, args.out, sys.stdout)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pbr", description="Periodic broadcast ranging toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log decoder warnings")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a two-vehicle timestamp trace")
    p.add_argument("config")
    p.add_argument("out", nargs="?", default=None, help="trace CSV path (default: stdout)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="estimate ranges from a trace")
    p.add_argument("trace")
    p.add_argument("--window", type=int, default=8)
    p.add_argument("--robust-iters", type=int, default=5)
    p.add_argument("--method", choices=("pbr", "rtt"), default="pbr")
    p.add_argument("--out", default=None, help="estimates CSV path (default: stdout)")
    p.add_argument("--report", default=None, help="metrics JSON path")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("montecarlo", help="RMSE versus time for several window sizes")
    p.add_argument("config")
    p.add_argument("--windows", default="2,4,8,16,32")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0, help="base seed; trial t uses seed ^ t")
    p.add_argument("--robust-iters", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default=None, help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_montecarlo)

    p = sub.add_parser("codec", help="compress/decompress round-trip of a trace")
    p.add_argument("trace")
    p.add_argument("action", nargs="?", choices=("roundtrip",), default="roundtrip")
    p.add_argument("--bits", type=int, default=DEFAULT_BITS)
    p.add_argument("--out", default=None, help="report JSON path (default: stdout)")
    p.set_defaults(func=cmd_codec)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses status 2 for usage errors; that code is reserved for I/O
        return EXIT_VALIDATION if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except OSError as exc:
        name = getattr(exc, "filename", None)
        print(f"pbr: I/O error: {name + ': ' if name else ''}{exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, TraceFormatError, ValueError) as exc:
        print(f"pbr: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
