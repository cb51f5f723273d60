"""Command-line entry point.

    openpimd run-1d --config run.ini --out runs/dw
    openpimd analyze runs/dw --compare
    openpimd extrapolate runs/b3000 runs/b4000 runs/b5000 --index 0
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .potentials import ConfigurationError
from .rdm import extrapolate_to_zero_T
from .runner import (
    AnalysisError,
    RunConfig,
    analyze,
    compare_to_oracle,
    read_spectrum,
    run_oracle,
    run_variational,
)

log = logging.getLogger("openpimd")


def _load_config(args, mode: str) -> RunConfig:
    overrides = {"mode": mode, "seed": args.seed, "walkers": args.walkers, "out": args.out}
    if args.config:
        return RunConfig.from_ini(args.config, **overrides)
    return RunConfig(**{k: v for k, v in overrides.items() if v is not None})


def _cmd_run(args) -> int:
    config = _load_config(args, args.command)

    def progress(it, rec):
        if it % args.report_every == 0 or it == config.var_steps:
            log.info("iteration %d/%d  |g| = %.4g", it, config.var_steps, rec.grad_norm)

    result = run_variational(config, restart=args.restart, progress=progress)
    log.info("finished %d iterations; output in %s", len(result.records), result.out)
    return 0


def _cmd_oracle(args) -> int:
    config = _load_config(args, "oracle")
    result = run_oracle(config)
    lam = result["eigenvalues"]
    log.info("exact occupations: %s", ", ".join(f"{v:.6g}" for v in lam[:4]))
    return 0


def _cmd_analyze(args) -> int:
    result = analyze(args.run_dir, args.out, figures=not args.no_figures)
    summary = result["summary"]
    if args.compare:
        config = RunConfig.from_dict(json.load(open(Path(args.run_dir) / "manifest.json"))["config"])
        if config.mode != "run-1d":
            raise ConfigurationError("--compare needs a run-1d directory")
        report = compare_to_oracle(result, config)
        summary["oracle"] = {k: v for k, v in report.items() if k != "exact"}
        out = Path(args.out) if args.out else Path(args.run_dir) / "analysis"
        report["exact"].write_csv(out / "np_exact.csv")
        with open(out / "comparison.json", "w") as fh:
            json.dump(summary["oracle"], fh, indent=1)
            fh.write("\n")
        if not args.no_figures:
            from .plotting import plot_distributions
            plot_distributions(out / "comparison.png", result["ntilde"], result["np"], report["exact"])
    json.dump(summary, sys.stdout, indent=1)
    sys.stdout.write("\n")
    return 0


def _pairs_from_inputs(inputs, index: int):
    pairs = []
    for item in inputs:
        path = Path(item)
        if path.is_dir():
            manifest = json.load(open(path / "manifest.json"))
            spec = path / "spectrum.csv" if (path / "spectrum.csv").exists() else path / "analysis" / "spectrum.csv"
            values, _ = read_spectrum(spec)
            pairs.append((manifest["config"]["beta"], values[index]))
        else:
            with open(path) as fh:
                rows = [r for r in csv.reader(line for line in fh if not line.startswith("#")) if r]
            for r in rows:
                try:
                    pairs.append((float(r[0]), float(r[1])))
                except ValueError:
                    continue  # header
    return np.array(pairs)


def _cmd_extrapolate(args) -> int:
    fit = extrapolate_to_zero_T(_pairs_from_inputs(args.inputs, args.index))
    text = fit.report()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="openpimd", description=__doc__.splitlines()[0] if __doc__ else None)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI configuration file")
        p.add_argument("--seed", type=int)
        p.add_argument("--walkers", type=int)
        p.add_argument("--out", help="output directory")

    for name, helptext in (("run-1d", "VES on x for a one-dimensional model"),
                           ("run-many", "VES on x for the many-body model"),
                           ("run-rdm", "2D VES on the endpoint pair (r, r')")):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("--restart", help="checkpoint to continue from")
        p.add_argument("--report-every", type=int, default=10)
        p.set_defaults(func=_cmd_run)

    p = sub.add_parser("oracle", help="exact 1D results on a grid")
    common(p)
    p.set_defaults(func=_cmd_oracle)

    p = sub.add_parser("analyze", help="distributions and errors from a finished run")
    p.add_argument("run_dir")
    p.add_argument("--out")
    p.add_argument("--compare", action="store_true", help="compare n(p) with the exact 1D result")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("extrapolate", help="linear zero-temperature extrapolation of an eigenvalue")
    p.add_argument("inputs", nargs="+", help="rdm run directories or CSV files of beta,value pairs")
    p.add_argument("--index", type=int, default=0, help="eigenvalue index (0 = largest)")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_extrapolate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, AnalysisError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
