"""Command-line front end.

``screenlab [global flags] <subcommand> [options]`` runs one pipeline
stage (plus any upstream stage whose artifact is missing from the output
directory).  Exit status is 0 on success; otherwise a single JSON error
line is written to stderr and the status is 2 for usage or configuration
errors and 1 for a failed stage.
"""
from __future__ import annotations

import argparse
import json
import sys

from .pipeline import STAGES, ConfigError, ExperimentConfig, load_config, plan_stages, run_pipeline

HELP = {
    "solve": "solve the discretized monopoly problem and write menu.csv",
    "simulate": "draw consumer records and write dataset.csv",
    "identify-linear": "recover pseudo-types, their density and the cost under linear utility",
    "identify-bilinear": "detect the bunching flat, build its index and invert the projections",
    "identify-nonlinear": "recover types, marginal utility and both regime costs from two regimes",
    "diagnose": "run the rationalizability checks and write verdicts.txt",
    "deconvolve": "separate a market-level taste shifter from individual types",
    "report": "summarize the run in report.md",
}


def error_line(kind: str, message: str, **extra) -> str:
    return json.dumps({"error": kind, "message": message, **extra}, sort_keys=True)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        sys.stderr.write(error_line("UsageError", message) + "\n")
        raise SystemExit(2)


def _globals(p: argparse.ArgumentParser, suppress: bool):
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="YAML or JSON experiment config")
    p.add_argument("--out", default=d, help="output directory")
    p.add_argument("--seed", type=int, default=d, help="seed for every random stage")
    p.add_argument("--tolerance-scale", type=float, default=d, dest="tolerance_scale",
                   help="multiplier on diagnostic tolerances")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="screenlab", description="Multidimensional screening: solve, simulate, identify, diagnose.")
    _globals(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in STAGES:
        sp = sub.add_parser(name, help=HELP[name], description=HELP[name])
        _globals(sp, suppress=True)
        if name == "solve":
            sp.add_argument("--mesh", type=int, help="nodes per axis")
        elif name == "simulate":
            sp.add_argument("--generator", help="menu, closed_form, separable or bilinear_band")
            sp.add_argument("--n", type=int, help="number of records")
        elif name == "diagnose":
            sp.add_argument("--model-class", dest="model_class", choices=("M1", "M2", "M3"))
        elif name == "deconvolve":
            sp.add_argument("--n-markets", type=int, dest="n_markets")
    return p


def config_from_args(args) -> ExperimentConfig:
    raw = load_config(args.config) if args.config else {}
    raw = dict(raw)
    raw["stages"] = [args.command]
    for key in ("solver", "simulation", "diagnose", "deconvolve"):
        raw[key] = dict(raw.get(key, {}))
    if getattr(args, "mesh", None) is not None:
        raw["solver"]["mesh"] = args.mesh
    if getattr(args, "generator", None) is not None:
        raw["simulation"]["generator"] = args.generator
    if getattr(args, "n", None) is not None:
        raw["simulation"]["n"] = args.n
    if getattr(args, "model_class", None) is not None:
        raw["diagnose"]["model_class"] = args.model_class
    if getattr(args, "n_markets", None) is not None:
        raw["deconvolve"]["n_markets"] = args.n_markets
    if args.seed is not None:
        raw.setdefault("simulation", {}).pop("seed", None)
    return ExperimentConfig.from_mapping(raw, out=args.out, seed=args.seed, tolerance_scale=args.tolerance_scale)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
    except ConfigError as exc:
        sys.stderr.write(error_line("ConfigError", str(exc), field=exc.field) + "\n")
        return 2
    except (OSError, ValueError) as exc:
        sys.stderr.write(error_line(type(exc).__name__, str(exc)) + "\n")
        return 2
    planned = plan_stages(cfg)
    man = run_pipeline(cfg)
    # earlier runs in the same directory are carried in the manifest; judge only this one
    ran = [s for s in planned if s in man.stages]
    bad = [s for s in ran if man.stages[s] != "ok"]
    if bad:
        stage = bad[0]
        err = man.errors.get(stage, {"type": "Skipped", "message": "upstream stage failed"})
        sys.stderr.write(error_line(err["type"], err["message"], stage=stage) + "\n")
        return 1
    summary = {"stages": {s: man.stages[s] for s in ran}, "artifacts": sorted(man.artifacts)}
    sys.stdout.write(json.dumps(summary, sort_keys=True) + "\n")
    return 0
