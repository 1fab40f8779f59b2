"""Command-line front end: ``pnlcausal {fit,discover,benchmark,synth}``.

JSON results go to stdout, logs to stderr. Exit status is 0 on success and
1 on any error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import dataio, discovery, flows, svgp
from .dataio import load_pair, normalise
from .gp_core import fit_anm, posterior_mean, posterior_var
from .optim import FitConfig
from .pnl import fit_pnl

logger = logging.getLogger("pnlcausal")

CRITERION_NAMES = {"hsic-stat": "hsic_stat", "hsic-p": "hsic_p", "likelihood": "likelihood"}
PLOT_GRID = 200


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    group = p.add_argument_group("fit configuration")
    group.add_argument("--config", type=Path, help="JSON FitConfig; explicit flags override it")
    for f in dataclasses.fields(FitConfig):
        group.add_argument(_flag(f.name), dest=f.name, type=type(f.default), default=None,
                           help=f"default {f.default}")


def _add_model_flags(p: argparse.ArgumentParser, criterion: bool = True) -> None:
    p.add_argument("--model", choices=("anm", "pnl"), default="pnl")
    if criterion:
        p.add_argument("--criterion", choices=tuple(CRITERION_NAMES), default="hsic-stat")
        p.add_argument("--runs", type=int, default=25)
        p.add_argument("--threshold", type=float, default=None,
                       help="combined ANM/PNL rule with this p-value threshold")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pnlcausal", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("fit", help="fit one regression and write the model")
    p.add_argument("--input", type=Path, required=True, help="two-column pair file (x y)")
    p.add_argument("--output", type=Path, required=True, help="output directory")
    p.add_argument("--emit-plots", action="store_true", help="write TSV plot data")
    _add_model_flags(p, criterion=False)
    _add_config_flags(p)

    p = sub.add_parser("discover", help="decide the causal direction of one pair")
    p.add_argument("--input", type=Path, required=True)
    _add_model_flags(p)
    _add_config_flags(p)

    p = sub.add_parser("benchmark", help="run discovery over a directory of pairs")
    p.add_argument("--input", type=Path, required=True, help="directory with pairmeta.txt")
    p.add_argument("--output", type=Path, required=True, help="output directory")
    p.add_argument("--threshold-sweep", action="store_true",
                   help="also fit both models and write accuracy against threshold")
    p.add_argument("--workers", type=int, default=1)
    _add_model_flags(p)
    _add_config_flags(p)

    p = sub.add_parser("synth", help="write the synthetic post-nonlinear pair")
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _config(args) -> FitConfig:
    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(FitConfig)
                 if getattr(args, f.name, None) is not None}
    if args.config is not None:
        return FitConfig.from_json(args.config, overrides)
    return FitConfig(**overrides)


def _validate(args) -> None:
    if getattr(args, "runs", 1) < 1:
        raise ValueError("--runs must be >= 1")
    t = getattr(args, "threshold", None)
    if t is not None and not 0 <= t <= 1:
        raise ValueError("--threshold must lie in [0, 1]")
    if getattr(args, "workers", 1) < 1:
        raise ValueError("--workers must be >= 1")
    if getattr(args, "n", 1) < 1:
        raise ValueError("--n must be >= 1")


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_tsv(path: Path, header: List[str], columns) -> None:
    rows = np.column_stack(columns)
    with open(path, "w") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(repr(float(v)) for v in row) + "\n")


def _grid(v: np.ndarray, pad: float = 0.1) -> np.ndarray:
    lo, hi = float(v.min()), float(v.max())
    span = hi - lo
    return np.linspace(lo - pad * span, hi + pad * span, PLOT_GRID)


def _plots_svgp(state, xs, ys, out: Path, seed: int) -> None:
    grid = _grid(xs)
    mean, var, _ = svgp.predict(state, grid, 0)
    band = 2 * np.sqrt(var)
    _write_tsv(out / "posterior_mean.tsv", ["x", "mean", "lower", "upper"],
               [grid, mean, mean - band, mean + band])
    res = svgp.residuals_of(state, xs, ys)
    e = _grid(res, 0.25)
    _write_tsv(out / "noise_density.tsv", ["eps", "density"],
               [e, np.exp(flows.log_density(state.noise_flow, e))])
    if state.post_flow is not None:
        s = _grid(flows.forward(state.post_flow, ys)[0])
        g = flows.inverse(state.post_flow, s)[0]
    else:
        s = _grid(ys)
        g = s
    _write_tsv(out / "g.tsv", ["s", "g"], [s, g])
    _, _, samples = svgp.predict(state, xs, 1, seed)
    _write_tsv(out / "replication.tsv", ["x", "y"], [xs, samples[0]])


def _plots_anm(model, xs, ys, out: Path, seed: int) -> None:
    grid = _grid(xs)
    mean, var = posterior_mean(model, grid), posterior_var(model, grid)
    band = 2 * np.sqrt(var)
    _write_tsv(out / "posterior_mean.tsv", ["x", "mean", "lower", "upper"],
               [grid, mean, mean - band, mean + band])
    sd = math.sqrt(model.noise_var)
    e = np.linspace(-5 * sd, 5 * sd, PLOT_GRID)
    _write_tsv(out / "noise_density.tsv", ["eps", "density"],
               [e, np.exp(-0.5 * (e / sd) ** 2) / (sd * math.sqrt(2 * math.pi))])
    s = _grid(ys)
    _write_tsv(out / "g.tsv", ["s", "g"], [s, s])
    rng = np.random.default_rng(seed)
    m, v = posterior_mean(model, xs), posterior_var(model, xs)
    _write_tsv(out / "replication.tsv", ["x", "y"],
               [xs, m + np.sqrt(v + model.noise_var) * rng.standard_normal(xs.size)])


def run_fit(args) -> int:
    config = _config(args)
    pair = normalise(load_pair(args.input))
    args.output.mkdir(parents=True, exist_ok=True)
    if args.model == "pnl":
        model, result = fit_pnl(pair.x, pair.y, config, config.seed)
        model_json, state = model.to_dict(), model.svgp_state
    else:
        result = fit_anm(pair.x, pair.y, config, config.seed)
        model_json, state = {"model": "anm", **result.model.to_dict()}, None
    model_json["config"] = config.to_dict()
    (args.output / "model.json").write_text(json.dumps(model_json, indent=2, sort_keys=True) + "\n")
    summary = result.summary()
    (args.output / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if args.emit_plots:
        if state is not None:
            _plots_svgp(state, pair.x, pair.y, args.output, config.seed)
        else:
            _plots_anm(result.model, pair.x, pair.y, args.output, config.seed)
    _emit(summary)
    return 0


def run_discover(args) -> int:
    config = _config(args)
    pair = normalise(load_pair(args.input))
    criterion = CRITERION_NAMES[args.criterion]
    if args.threshold is not None:
        verdict = discovery.discover_combined(pair, args.threshold, args.runs, config, criterion)
    else:
        verdict = discovery.discover_median(pair, args.model, criterion, args.runs, config)
    _emit(verdict.to_dict())
    return 0


def run_benchmark(args) -> int:
    config = _config(args)
    criterion = CRITERION_NAMES[args.criterion]
    model_class = "combined" if args.threshold is not None else args.model
    report = discovery.benchmark(args.input, model_class, criterion, args.runs, config,
                                 args.workers, with_sweep=args.threshold_sweep)
    if not report.entries:
        raise ValueError(f"no usable pairs in {args.input}")
    args.output.mkdir(parents=True, exist_ok=True)
    summary = report.to_dict()
    if args.threshold is not None:
        scored = []
        for e in report.entries:
            v = discovery.combine(e.verdicts["anm"], e.verdicts.get("pnl"), args.threshold)
            scored.append((e.weight, v.direction == e.true_direction))
        summary["combined"] = {"threshold": args.threshold,
                               "accuracy": discovery.accuracy(scored),
                               "weighted_accuracy": discovery.weighted_accuracy(scored)}
    (args.output / "table.tsv").write_text(report.to_tsv())
    if args.threshold_sweep:
        rows = report.sweep()
        _write_tsv(args.output / "sweep.tsv", ["threshold", "accuracy", "weighted_accuracy"],
                   [np.array(c) for c in zip(*rows)])
        summary["sweep"] = [{"threshold": t, "accuracy": a, "weighted_accuracy": w}
                            for t, a, w in rows]
    (args.output / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _emit({k: summary[k] for k in ("accuracy", "weighted_accuracy", "num_pairs", "skipped")}
          | ({"combined": summary["combined"]} if "combined" in summary else {}))
    return 0


def run_synth(args) -> int:
    pair = dataio.generate_synthetic(args.n, args.seed)
    args.output.parent.mkdir(parents=True, exist_ok=True)
    dataio.write_pair(pair, args.output)
    _emit({"output": str(args.output), "n": args.n, "seed": args.seed,
           "true_direction": pair.true_direction})
    return 0


COMMANDS = {"fit": run_fit, "discover": run_discover, "benchmark": run_benchmark,
            "synth": run_synth}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # usage errors share the generic failure status
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        _validate(args)
        if args.subcommand != "synth":
            _config(args)
        return COMMANDS[args.subcommand](args)
    except Exception as exc:  # noqa: BLE001 - every module error maps to exit 1
        logger.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
