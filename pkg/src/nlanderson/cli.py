"""Command-line entry point ``nlanderson``.

Subcommands: simulate, normal-form, measure, fit, tame-check, plot.
Exit codes: 0 success, 2 configuration error, 3 numerical abort
(resonance, boundary mass, bound violation, failed check), 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .dynamics import BoundaryMassError
from .experiment import (
    ConfigError, ExperimentConfig, FitError, emit_plots, ensemble_quartiles,
    fit_power_law, run_ensemble, tail_rate_check, tame_check,
)
from .lattice import DiffusionTrace

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("nlanderson")


class NumericalAbort(RuntimeError):
    pass


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, float) and not math.isfinite(x):
        return repr(x)
    return str(x)


def _dump_json(obj, path: Path | None = None) -> str:
    text = json.dumps(obj, indent=2, default=_json_default)
    if path is not None:
        path.write_text(text + "\n")
    return text


# ---------------------------------------------------------------- config plumbing

# flag name -> config key, for flags that map one-to-one
_FLAG_KEYS = {
    "simulate": ["epsilon", "delta", "window", "dt", "boundary", "propagator", "seeds", "t_final",
                 "per_decade", "tail_j0", "initial_site", "fit_t_min", "fit_t_max", "outdir", "workers"],
    "normal-form": ["epsilon", "tau", "j0", "kappa", "window", "degree_cap", "window_constant",
                    "steps", "outdir", "seeds"],
    "measure": ["epsilon", "tau", "j0", "kappa", "samples", "seeds", "outdir"],
    "tame-check": ["window", "j0", "tame_s", "tame_states", "seeds", "outdir"],
}


def build_config(args, mode: str) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    over = {"mode": mode}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        over[k.strip()] = v.strip()
    for key in _FLAG_KEYS.get(mode, []):
        v = getattr(args, key, None)
        if v is not None:
            over[key] = v
    return cfg.with_overrides(over).validate()


def _add_common(p):
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")


# ---------------------------------------------------------------- subcommands

def cmd_simulate(args) -> int:
    cfg = build_config(args, "simulate")
    out = Path(cfg.outdir)
    res = run_ensemble(cfg, outdir=out)
    summary = {"seeds": list(cfg.seeds), "completed": sorted(res.traces), "skipped": res.skipped,
               "failures": {str(k): v for k, v in res.failures.items()}}
    if res.traces:
        q = ensemble_quartiles(res)
        try:
            fit = fit_power_law(q, cfg.fit_t_min or None, cfg.fit_t_max or None)
            summary["fit"] = {"kappa": fit.kappa, "stderr": fit.stderr, "r2": fit.r2,
                              "t_min": fit.t_min, "t_max": fit.t_max, "n": fit.n}
        except FitError as exc:
            fit = None
            summary["fit_error"] = str(exc)
        summary["plots"] = [str(p) for p in emit_plots(res, out / "plots", fit)]
        if cfg.tail_j0 and len(q["t"]) >= 3:
            rates = [tail_rate_check(tr, cfg.tail_j0[0], cfg.kappa) for tr in res.ordered()]
            summary["tail_rate"] = {"j0": cfg.tail_j0[0], "kappa": cfg.kappa,
                                    "max_rate": max(r.max_rate for r in rates), "bound": rates[0].bound}
    print(_dump_json(summary, out / "summary.json"))
    if not res.traces:
        raise NumericalAbort("every seed failed")
    return EXIT_OK


def cmd_normal_form(args) -> int:
    from .normal_form import ScheduleError, find_nonresonant_seed, run_normal_form, build_schedule
    from .potential import sample_potential, save_potential_csv

    cfg = build_config(args, "normal-form")
    steps = cfg.steps or None
    try:
        sched = build_schedule(cfg.epsilon, cfg.tau, cfg.j0, cfg.kappa, steps=steps,
                               window_constant=cfg.window_constant)
    except ScheduleError as exc:
        raise ConfigError(str(exc)) from exc
    if args.find_seed:
        seed = find_nonresonant_seed(lambda k: sample_potential(k, cfg.window), sched,
                                     range(cfg.seeds[0], cfg.seeds[0] + args.find_seed))
        if seed is None:
            raise NumericalAbort(f"no seed in {args.find_seed} candidates passed the prescreen")
    else:
        seed = cfg.seeds[0]
    pot = sample_potential(seed, cfg.window)
    dump = Path(args.dump_dir) if args.dump_dir else Path(cfg.outdir)
    dump.mkdir(parents=True, exist_ok=True)
    save_potential_csv(pot, dump / "potential.csv")

    def progress(rec):
        bad = [c["name"] for c in rec["checks"] if not c["ok"]]
        log.info("step %d: removed %d, counts %s, %.2fs%s", rec["s"], rec["removed"], rec["counts_out"],
                 rec["wall_time"], f", violated {bad}" if bad else "")

    _, rep = run_normal_form(pot, cfg.epsilon, cfg.tau, cfg.j0, cfg.kappa, cfg.window, steps=steps,
                             window_constant=cfg.window_constant, degree_cap=cfg.degree_cap or None,
                             strict=args.strict, dump_dir=dump, progress=progress)
    print(_dump_json({"seed": seed, "M": rep["M"], "all_bounds_hold": rep["all_bounds_hold"],
                      "max_homological_residual": rep["max_homological_residual"],
                      "final_checks": rep["final_checks"], "wall_time": rep["wall_time"],
                      "report": str(dump / "report.json")}))
    return EXIT_OK


def cmd_measure(args) -> int:
    from .measure import nonresonant_measure, union_measure_bound
    from .normal_form import ScheduleError, build_schedule

    cfg = build_config(args, "measure")
    try:
        sched = build_schedule(cfg.epsilon, cfg.tau, cfg.j0, cfg.kappa)
    except ScheduleError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(cfg.outdir)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.seeds[0]
    lj = math.log(cfg.j0)
    ks = [k for k in range(cfg.j0 - math.ceil(lj), cfg.j0 + math.ceil(lj) + 1) if abs(k - cfg.j0) < lj]
    rows = []
    for s in range(1, sched.M + 1):
        for k in ks:
            r = union_measure_bound(k, s, sched, samples=cfg.samples, seed=seed)
            rows.append((k, s, r.n_monomials, r.estimate, r.stderr, r.analytic_bound, r.holds))
    with open(out / "union.csv", "w") as fh:
        fh.write("k,s,n_monomials,estimate,stderr,bound,holds\n")
        for row in rows:
            fh.write(",".join(repr(x) if isinstance(x, float) else str(x) for x in row) + "\n")
    nr = nonresonant_measure(cfg.j0, cfg.epsilon, cfg.tau, cfg.kappa, samples=cfg.samples, seed=seed,
                             schedule=sched)
    summary = {"j0": cfg.j0, "epsilon": cfg.epsilon, "tau": cfg.tau, "kappa": cfg.kappa, "M": sched.M,
               "samples": cfg.samples, "seed": seed, "cells": len(rows),
               "union_bounds_hold": all(r[-1] for r in rows),
               "nonresonant": {"estimate": nr.estimate, "stderr": nr.stderr, "lower_bound": nr.lower_bound,
                               "classes": nr.n_classes, "holds": nr.holds}}
    print(_dump_json(summary, out / "summary.json"))
    return EXIT_OK


def _load_traces(paths) -> list[DiffusionTrace]:
    files = []
    for p in map(Path, paths):
        files.extend(sorted(p.glob("**/seed_*.csv")) if p.is_dir() else [p])
    if not files:
        raise FileNotFoundError(f"no trace CSV files under {paths}")
    return [DiffusionTrace.read_csv(f) for f in files]


def cmd_fit(args) -> int:
    traces = _load_traces(args.traces)
    data = traces[0] if len(traces) == 1 else traces
    fit = fit_power_law(data, args.t_min, args.t_max)
    print(_dump_json({"traces": len(traces), "kappa": fit.kappa, "stderr": fit.stderr, "r2": fit.r2,
                      "t_min": fit.t_min, "t_max": fit.t_max, "n": fit.n}))
    return EXIT_OK


def cmd_tame_check(args) -> int:
    cfg = build_config(args, "tame-check")
    rows = tame_check(cfg.window, cfg.j0, cfg.tame_s, cfg.tame_states, cfg.seeds[0])
    worst = max(rows, key=lambda r: r["lhs"] / r["rhs"])
    summary = {"window": cfg.window, "j0": cfg.j0, "s": cfg.tame_s, "states": len(rows),
               "all_hold": all(r["holds"] for r in rows), "worst_ratio": worst["lhs"] / worst["rhs"]}
    print(_dump_json(summary))
    if not summary["all_hold"]:
        raise NumericalAbort("tame inequality violated")
    return EXIT_OK


def cmd_plot(args) -> int:
    traces = _load_traces([args.traces])
    fit = None
    try:
        fit = fit_power_law(traces, args.t_min, args.t_max)
    except FitError as exc:
        log.warning("no fit line: %s", exc)
    paths = emit_plots(traces, args.outdir, fit, name=args.name)
    print("\n".join(map(str, paths)))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nlanderson", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a seed ensemble and fit D(t)")
    _add_common(p)
    for flag, typ in [("epsilon", float), ("delta", float), ("window", int), ("dt", float),
                      ("t-final", float), ("per-decade", int), ("initial-site", int),
                      ("fit-t-min", float), ("fit-t-max", float), ("workers", int)]:
        p.add_argument(f"--{flag}", type=typ, dest=flag.replace("-", "_"))
    p.add_argument("--boundary", choices=["periodic", "dirichlet"])
    p.add_argument("--propagator", choices=["split", "exact"])
    p.add_argument("--seeds", help='e.g. "0-19" or "3,5,8"')
    p.add_argument("--tail-j0", dest="tail_j0", help="tail-mass cutoff site")
    p.add_argument("--outdir")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("normal-form", help="run the iterative normal form on one potential")
    _add_common(p)
    for flag, typ in [("epsilon", float), ("tau", float), ("j0", int), ("kappa", float),
                      ("window", int), ("degree-cap", int), ("window-constant", float), ("steps", int)]:
        p.add_argument(f"--{flag}", type=typ, dest=flag.replace("-", "_"))
    p.add_argument("--seed", dest="seeds", help="potential seed (first seed tried with --find-seed)")
    p.add_argument("--find-seed", type=int, default=0, metavar="N",
                   help="scan N seeds for one passing the low-order non-resonance prescreen")
    p.add_argument("--dump-dir", dest="dump_dir")
    p.add_argument("--outdir")
    p.add_argument("--no-strict", dest="strict", action="store_false",
                   help="record bound violations instead of aborting")
    p.set_defaults(func=cmd_normal_form)

    p = sub.add_parser("measure", help="Monte-Carlo resonant-set measures")
    _add_common(p)
    for flag, typ in [("epsilon", float), ("tau", float), ("j0", int), ("kappa", float), ("samples", int)]:
        p.add_argument(f"--{flag}", type=typ, dest=flag)
    p.add_argument("--seed", dest="seeds")
    p.add_argument("--outdir")
    p.set_defaults(func=cmd_measure)

    p = sub.add_parser("fit", help="power-law fit of D(t) from trace CSV files")
    p.add_argument("traces", nargs="+", help="trace CSV files or directories")
    p.add_argument("--t-min", type=float)
    p.add_argument("--t-max", type=float)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("tame-check", help="self-convolution tame bound on random tail states")
    _add_common(p)
    p.add_argument("--window", type=int)
    p.add_argument("--j0", type=int)
    p.add_argument("--s", type=float, dest="tame_s")
    p.add_argument("--states", type=int, dest="tame_states")
    p.add_argument("--seed", dest="seeds")
    p.set_defaults(func=cmd_tame_check)

    p = sub.add_parser("plot", help="aggregate traces into CSV and PNG")
    p.add_argument("traces", help="directory of trace CSV files")
    p.add_argument("--outdir", default="plots")
    p.add_argument("--name", default="diffusion")
    p.add_argument("--t-min", type=float)
    p.add_argument("--t-max", type=float)
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv=None) -> int:
    from .normal_form import BoundViolation, LieSeriesDivergence, ResonanceError

    ap = make_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FitError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ResonanceError, BoundaryMassError, BoundViolation, LieSeriesDivergence,
            NumericalAbort) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
