"""Command-line front end: ``emaccel generate | fit | bench | report``.

Exit codes: 0 success (fit: converged), 1 error, 2 usage error,
3 fit hit max iterations, 4 fit degenerated, 5 fit stopped in a flat region.
The default seed comes from ``EMACCEL_SEED`` (0 when unset); ``--seed``
overrides it.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench
from .model import GmmError, Priors, load_dataset, save_dataset, save_params
from .optimizers import METHODS, StoppingRule, fit

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_MAX_ITERS, EXIT_DEGENERATE, EXIT_FLAT = 0, 1, 2, 3, 4, 5
TERMINATION_EXIT = {"converged": EXIT_OK, "max-iters": EXIT_MAX_ITERS, "degenerate": EXIT_DEGENERATE,
                    "flat-region": EXIT_FLAT}
SEED_ENV = "EMACCEL_SEED"


class CliError(Exception):
    pass


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise CliError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def load_model(ref: str) -> bench.ModelSpec:
    """A builtin model name or a JSON file with weights, means and covariances."""
    if ref in bench.BUILTIN_MODELS:
        return bench.BUILTIN_MODELS[ref]
    path = Path(ref)
    if not path.is_file():
        raise CliError(f"unknown model {ref!r} (builtin: {', '.join(bench.BUILTIN_MODELS)})")
    d = json.loads(path.read_text())
    spec = bench.ModelSpec(d.get("name", path.stem), np.asarray(d["weights"], float),
                           np.asarray(d["means"], float), np.asarray(d["covariances"], float))
    spec.params()  # validates shapes
    return spec


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    epilog = (
        f"methods: {', '.join(METHODS)}\n"
        f"builtin models: {', '.join(bench.BUILTIN_MODELS)}\n"
        f"builtin bench configs: {', '.join(bench.BUILTIN_CONFIGS)}\n"
        "exit codes: 0 ok/converged, 1 error, 2 usage, 3 max-iters, 4 degenerate, 5 flat-region\n"
        f"default seed: ${SEED_ENV} or 0"
    )
    parser = argparse.ArgumentParser(prog="emaccel", description="EM and accelerated EM for Gaussian mixtures.",
                                     epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="sample a dataset from a mixture model", epilog=epilog,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    g.add_argument("--model", required=True, help="builtin model name or JSON model file")
    g.add_argument("--n", type=_positive_int, default=None, help="number of points (default: the model's own)")
    g.add_argument("--seed", type=int, default=None, help="random seed (default: $%s or 0)" % SEED_ENV)
    g.add_argument("--out", required=True, help="dataset file to write")

    f = sub.add_parser("fit", help="fit a mixture with one method", epilog=epilog,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    f.add_argument("--data", required=True, help="dataset file")
    f.add_argument("--m", type=_positive_int, required=True, help="number of components")
    f.add_argument("--method", choices=METHODS, default="em", help="default: em")
    f.add_argument("--gamma", type=float, default=None,
                   help="step for pem-fixed (default 1.5) and ga-fixed (default 1e-4)")
    f.add_argument("--chart", choices=("natural", "omega"), default=None,
                   help="parameter chart (default: omega for cg-em-rp, natural otherwise)")
    f.add_argument("--objective", choices=("ml", "map"), default="ml", help="default: ml")
    f.add_argument("--mode", choices=("full", "diagonal"), default=None,
                   help="covariance form (default: full for ml, diagonal for map)")
    f.add_argument("--stop", choices=("abs", "scaled"), default="abs", help="stopping rule (default: abs)")
    f.add_argument("--threshold", type=float, default=1e-5, help="stopping threshold (default: 1e-5)")
    f.add_argument("--max-iters", type=_positive_int, default=50_000, help="default: 50000")
    f.add_argument("--seed", type=int, default=None, help="initialisation seed (default: $%s or 0)" % SEED_ENV)
    f.add_argument("--out", required=True, help="run record (JSON) to write")
    f.add_argument("--params-out", default=None, help="final parameter file (default: <out>.params)")

    b = sub.add_parser("bench", help="run a benchmark matrix", epilog=epilog,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    b.add_argument("--config", required=True, help="builtin config name or JSON config file")
    b.add_argument("--out-dir", required=True, help="directory for records, tables and plot data")
    b.add_argument("--jobs", type=_positive_int, default=1, help="worker processes (default: 1)")
    b.add_argument("--seed", type=int, default=None, help="override the config's master seed")
    b.add_argument("--format", choices=("tsv", "csv"), default="tsv", help="table format (default: tsv)")

    r = sub.add_parser("report", help="re-aggregate saved run records", epilog=epilog,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    r.add_argument("--records", required=True, help="records directory or a bench output directory")
    r.add_argument("--format", choices=("tsv", "csv", "text"), default="text", help="default: text")
    r.add_argument("--out-dir", default=None, help="where to write tables (default: print only)")
    return parser


def cmd_generate(args) -> int:
    spec = load_model(args.model)
    seed = default_seed() if args.seed is None else args.seed
    n = args.n or spec.default_n
    data = bench.generate_dataset(spec, n, seed)
    save_dataset(data, args.out, header=f"model {spec.name} N {n} seed {seed}")
    print(f"wrote {data.N} points, d={data.d}, model {spec.name} -> {args.out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    data = load_dataset(args.data)
    seed = default_seed() if args.seed is None else args.seed
    mode = args.mode or ("diagonal" if args.objective == "map" else "full")
    priors = Priors.paper_defaults(args.m, data) if args.objective == "map" else None
    if priors is not None and mode != "diagonal":
        raise CliError("MAP fitting is defined for diagonal mode only")
    try:
        init = bench.init_params(data, args.m, seed, mode)
    except ValueError as exc:
        raise CliError(f"could not initialise: {exc}") from None
    stop = StoppingRule("absolute" if args.stop == "abs" else "scaled", args.threshold)
    rec = fit(init, data, args.method, gamma=args.gamma, chart=args.chart, priors=priors, stop=stop,
              max_iters=args.max_iters)
    rec.seed = seed
    rec.dataset = str(args.data)
    Path(args.out).write_text(rec.dumps())
    params_out = args.params_out or f"{args.out}.params"
    if rec.final_params is not None:
        save_params(rec.final_params, params_out)
    print(f"{rec.method}: {rec.termination} after {rec.em_equivalent_count} EM-equivalent iterations, "
          f"objective {rec.final_objective:.10g}")
    return TERMINATION_EXIT.get(rec.termination, EXIT_ERROR)


def cmd_bench(args) -> int:
    try:
        config = bench.load_config(args.config)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CliError(f"bad config {args.config!r}: {exc}") from None
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    out = Path(args.out_dir)
    records = bench.run_matrix(config, jobs=args.jobs)
    bench.save_records(records, out / "records")
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        text = bench.emit_report(records, out, args.format, K=config.bootstrap_resamples)
    print(text)
    failed = [r for r in records if not r.converged]
    if failed:
        kinds = {}
        for r in failed:
            kinds[r.termination] = kinds.get(r.termination, 0) + 1
        print("non-converged runs: " + ", ".join(f"{k} {v}" for k, v in sorted(kinds.items())))
    return EXIT_OK


def cmd_report(args) -> int:
    root = Path(args.records)
    rec_dir = root / "records" if (root / "records").is_dir() else root
    if not rec_dir.is_dir():
        raise CliError(f"no records directory at {root}")
    records, bad = bench.load_records(rec_dir)
    for name, err in bad:
        print(f"skipped corrupted record {name}: {err}", file=sys.stderr)
    if not records:
        raise CliError(f"no readable records in {rec_dir}")
    K = 10_000
    cfg_path = rec_dir.parent / "config.json"
    if cfg_path.is_file():
        K = json.loads(cfg_path.read_text()).get("bootstrap_resamples", K)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if args.out_dir is not None:
            fmt = "tsv" if args.format == "text" else args.format
            text = bench.emit_report(records, args.out_dir, fmt, K=K)
        else:
            text = bench.format_report(bench.summarize(records, K))
    print(text)
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "fit": cmd_fit, "bench": cmd_bench, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (CliError, GmmError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
