"""Command-line interface: ``trajtensor simulate | fit | export``.

Exit codes: 0 success, 1 configuration error, 2 I/O error, 3 data error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys

import numpy as np

from . import __version__
from .cep import CepConfig
from .data_io import (
    generate_synthetic,
    load_events,
    rescale_timestamps,
    split_train_test,
    write_events,
)
from .engine import create_model, factor_trajectory, finalize, load_checkpoint, process_batch, save_checkpoint
from .errors import (
    CorruptCheckpoint,
    DimensionMismatch,
    EmptyModel,
    IndexOutOfRange,
    NonMonotoneTimestamp,
    ParseError,
    UnknownObject,
)
from .evaluation import CurvePoint, ErrorReport, score, write_report
from .kernel_sde import MaternKernel

log = logging.getLogger("trajtensor")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DATA = 0, 1, 2, 3
DATA_ERRORS = (ParseError, DimensionMismatch, IndexOutOfRange, NonMonotoneTimestamp, EmptyModel,
               UnknownObject, CorruptCheckpoint)


class ConfigError(Exception):
    pass


def _int_list(text, name):
    try:
        vals = [int(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError(f"{name} must be comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise ConfigError(f"{name} entries must be positive, got {text!r}")
    return vals


def parse_grid(text):
    """``t_lo:t_hi:G`` -> ``G`` evenly spaced points (inclusive)."""
    parts = text.split(":")
    try:
        lo, hi, n = float(parts[0]), float(parts[1]), int(parts[2])
    except (IndexError, ValueError):
        raise ConfigError(f"grid must look like t_lo:t_hi:G, got {text!r}") from None
    if len(parts) != 3 or n < 1 or (n > 1 and not hi > lo):
        raise ConfigError(f"invalid grid {text!r}")
    return np.linspace(lo, hi, n)


def _kernel(args):
    nu_to_p = {0.5: 0, 1.5: 1, 2.5: 2}
    if args.nu not in nu_to_p:
        raise ConfigError(f"--nu must be one of 0.5, 1.5, 2.5, got {args.nu}")
    if not (args.amplitude > 0 and args.lengthscale > 0):
        raise ConfigError("--amplitude and --lengthscale must be positive")
    return MaternKernel(nu_to_p[args.nu], args.amplitude, args.lengthscale)


def cmd_simulate(args):
    stream, truth = generate_synthetic(args.seed, args.n_times, args.per_time, args.noise)
    write_events(stream, args.out)
    if args.truth_out:
        grid = np.linspace(0.0, 1.0, 1001)
        with open(args.truth_out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["mode", "object", "t", "value"])
            for (m, j), f in sorted(truth.items()):
                for t, v in zip(grid, f(grid)):
                    w.writerow([m, j, repr(float(t)), repr(float(v))])
    print(f"wrote {len(stream)} events to {args.out}")
    return EXIT_OK


def cmd_fit(args):
    dims = _int_list(args.dims, "--dims")
    ranks = _int_list(str(args.rank), "--rank")
    if len(ranks) == 1:
        ranks = ranks * len(dims)
    if len(ranks) != len(dims):
        raise ConfigError("--rank needs one value or one per mode")
    if args.form == "cp" and len(set(ranks)) != 1:
        raise ConfigError("the CP form needs a single rank")
    if not 0 < args.split <= 1:
        raise ConfigError("--split must lie in (0, 1]")
    if args.eval_every < 0:
        raise ConfigError("--eval-every must be non-negative")
    if not (args.noise_shape > 0 and args.noise_rate > 0):
        raise ConfigError("noise prior parameters must be positive")
    try:
        cep = CepConfig(max_iters=args.max_iters, tol=args.tol, damping=args.damping)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    kernel = _kernel(args)

    stream = load_events(args.input, mode_dims=dims)
    if args.rescale and len(stream):
        stream = rescale_timestamps(stream)
    train, test = split_train_test(stream, args.split, args.seed)
    model = create_model(dims, ranks if args.form == "tucker" else ranks[0], args.form, kernel,
                         noise_prior=(args.noise_shape, args.noise_rate), cep=cep, seed=args.seed)
    curve = []
    processed = 0
    for k, batch in enumerate(train.batches(), start=1):
        process_batch(model, batch)
        processed += len(batch.entries)
        if args.eval_every and len(test) and k % args.eval_every == 0:
            rep = score(model, test, smoothed=False)
            curve.append(CurvePoint(processed, rep.rmse, rep.mae))
    finalize(model)
    report = None
    if len(test):
        final = score(model, test, smoothed=True)
        report = ErrorReport(final.rmse, final.mae, final.n, curve)
    extra = {
        "n_train": len(train),
        "n_batches": model.n_batches,
        "noise_precision": model.noise.mean,
        "objects": [[m, j] for m, j in sorted(model.chains)],
    }
    if args.report:
        write_report(report, args.report, extra)
    if args.checkpoint:
        save_checkpoint(model, args.checkpoint)
    summary = report.to_dict() if report else {"rmse": None, "mae": None, "n": 0}
    print(json.dumps({k: summary[k] for k in ("rmse", "mae", "n")}))
    return EXIT_OK


def cmd_export(args):
    grid = parse_grid(args.grid)
    model = load_checkpoint(args.checkpoint)
    if any(ch.smoothed is None for ch in model.chains.values()):
        finalize(model)
    if args.mode is not None and args.object is not None:
        model.chain(args.mode, args.object)
        keys = [(args.mode, args.object)]
    else:
        keys = [k for k in sorted(model.chains)
                if (args.mode is None or k[0] == args.mode) and (args.object is None or k[1] == args.object)]
        if not keys:
            raise UnknownObject(f"no chain matches the selection; known: {sorted(model.chains)}")
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "object", "factor", "t", "mean", "std"])
        for m, j in keys:
            mean, std = factor_trajectory(model, m, j, grid)
            for r in range(mean.shape[1]):
                for g, t in enumerate(grid):
                    w.writerow([m, j, r + 1, repr(float(t)), repr(float(mean[g, r])), repr(float(std[g, r]))])
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="trajtensor", description="Streaming factor trajectory learning for temporal tensors.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write the two-mode synthetic event stream")
    s.add_argument("--out", required=True, help="output .jsonl or .csv path")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--n-times", type=int, default=500)
    s.add_argument("--per-time", type=int, default=2)
    s.add_argument("--noise", type=float, default=0.05, help="noise standard deviation")
    s.add_argument("--truth-out", help="CSV of true trajectories on a 1001-point grid")
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="stream events through the model and score held-out entries")
    f.add_argument("--input", required=True)
    f.add_argument("--dims", required=True, help="mode dimensions, e.g. 20,30,10")
    f.add_argument("--form", choices=("cp", "tucker"), default="cp")
    f.add_argument("--rank", default="2", help="rank, or per-mode ranks for tucker (e.g. 2,2,3)")
    f.add_argument("--nu", type=float, default=1.5)
    f.add_argument("--amplitude", type=float, default=0.3)
    f.add_argument("--lengthscale", type=float, default=0.3)
    f.add_argument("--noise-shape", type=float, default=1.0)
    f.add_argument("--noise-rate", type=float, default=0.1)
    f.add_argument("--max-iters", type=int, default=50)
    f.add_argument("--tol", type=float, default=1e-4)
    f.add_argument("--damping", type=float, default=0.5)
    f.add_argument("--no-rescale", dest="rescale", action="store_false", help="keep raw timestamps")
    f.add_argument("--split", type=float, default=0.8, help="training fraction")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--eval-every", type=int, default=0, help="score the test set every K batches (0: off)")
    f.add_argument("--checkpoint", help="write the fitted model here")
    f.add_argument("--report", help="write the JSON error report here")
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("export", help="write posterior trajectories on a time grid as CSV")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--grid", required=True, help="t_lo:t_hi:G")
    e.add_argument("--out", required=True)
    e.add_argument("--mode", type=int)
    e.add_argument("--object", type=int)
    e.set_defaults(func=cmd_export)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
