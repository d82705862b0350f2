"""Command-line interface.

Subcommands::

    relaxround round INPUT.csv [-o OUT.csv] [--report REPORT.json]
    relaxround experiment {heat,lotka} [--config FILE] [--out DIR] ...
    relaxround verify {rounding,minmax,gradient,integrator,estimate,all}

Exit codes: 0 success, 1 internal failure (including failed checks),
2 invalid input.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .combinatorial import SwitchBudget, switch_counts
from .driver import AlgorithmConfig, run_algorithm1, run_algorithm2, write_history_csv, write_manifest
from .rounding import (
    ControlsFormatError,
    RelaxedControl,
    TimeGrid,
    accumulated_deviation,
    read_controls_csv,
    sur_round,
    write_controls_csv,
)

log = logging.getLogger("relaxround")

EXIT_OK, EXIT_FAILURE, EXIT_INVALID = 0, 1, 2


class ConfigError(ValueError):
    pass


# -- experiment presets ------------------------------------------------------
# Keys of [model] are forwarded to the model builder; [algorithm] and [grid]
# feed AlgorithmConfig.

PRESETS = {
    "heat": {
        "model": {"nx": 20, "ny": 40, "rho": 0.01, "lx": 1.0, "ly": 2.0, "t_final": 15.0,
                  "lam1": 2.0, "lam2": 1 / 500, "actuator_width": 1e-3, "normalization": "unit", "u_max": 10.0},
        "grid": {"n_cells": 8, "nodes": ""},
        "algorithm": {"epsilon": 1e-3, "k_max": 2, "mode": "sur", "eps0": 1e-2, "max_iters": 200,
                      "integration_tol": 2.0, "warm_start": True, "parametrization": "simplex"},
    },
    "lotka": {
        "model": {"h": 0.1, "radius": 1.0, "a1": 1.0, "a2": 1.0, "b1": 0.7, "b2": 0.5, "c1": 1.0,
                  "c2": 1.0, "d1": 0.05, "d2": 0.01, "t_final": 15.0, "init_width": 0.5,
                  "init_scale1": 0.5, "init_scale2": 0.7, "interaction": "predator_prey"},
        "grid": {"n_cells": 0, "nodes": "0,2,4,6,8,10,12,14,15"},
        "algorithm": {"epsilon": 1e-3, "k_max": 2, "mode": "sur", "eps0": 1e-2, "max_iters": 200,
                      "integration_tol": 1e-2, "warm_start": True, "parametrization": "simplex"},
    },
}

BUILDERS = {"heat": "build_heat2d", "lotka": "build_lotka_volterra"}


def _coerce(default, text: str, key: str):
    try:
        if isinstance(default, bool):
            low = text.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None
    return text.strip()


def load_config(name: str, path: str | None = None) -> dict:
    """Preset for `name`, overlaid with an INI file. Unknown sections or keys are errors."""
    if name not in PRESETS:
        raise ConfigError(f"unknown experiment {name!r}")
    cfg = {sec: dict(vals) for sec, vals in PRESETS[name].items()}
    cfg["budget"] = []
    if path is None:
        return cfg
    parser = configparser.ConfigParser()
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for section in parser.sections():
        if section == "budget":
            for key, val in parser[section].items():
                cfg["budget"].append(_parse_budget(f"{key},{val}"))
            continue
        if section not in cfg:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, val in parser[section].items():
            if key not in cfg[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            cfg[section][key] = _coerce(cfg[section][key], val, f"[{section}] {key}")
    return cfg


def _parse_budget(text: str):
    """``i,j,K`` with 1-based modes, or ``i->j,K`` / ``i->j = K`` in config files."""
    parts = [p.strip() for p in text.replace("->", ",").split(",") if p.strip()]
    if len(parts) != 3:
        raise ConfigError(f"budget entry {text!r} is not of the form i,j,K")
    try:
        i, j, K = (int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"budget entry {text!r} is not of the form i,j,K") from None
    if i < 1 or j < 1 or i == j or K < 0:
        raise ConfigError(f"budget entry {text!r}: need distinct modes >= 1 and K >= 0")
    return i, j, K


def build_model(name: str, params: dict):
    from . import evolution

    if params.get("t_final", 1.0) <= 0:
        raise ConfigError("t_final must be positive")
    try:
        return getattr(evolution, BUILDERS[name])(**params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def build_grid(grid_cfg: dict, t_final: float) -> TimeGrid:
    nodes = grid_cfg.get("nodes", "")
    try:
        if nodes:
            grid = TimeGrid([float(x) for x in str(nodes).split(",")])
        else:
            grid = TimeGrid.uniform(t_final, int(grid_cfg["n_cells"]))
    except ValueError as exc:
        raise ConfigError(f"grid: {exc}") from None
    if not np.isclose(grid.t_final, t_final):
        raise ConfigError(f"grid ends at {grid.t_final}, model horizon is {t_final}")
    return grid


def build_algorithm_config(cfg: dict, grid: TimeGrid, n_modes: int) -> AlgorithmConfig:
    alg = dict(cfg["algorithm"])
    budget = None
    if cfg["budget"]:
        budget = SwitchBudget({(i - 1, j - 1): K for i, j, K in cfg["budget"]})
        try:
            budget.check_modes(n_modes)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    if alg["mode"] == "minmax" and budget is None:
        raise ConfigError("mode 'minmax' needs at least one --budget")
    try:
        return AlgorithmConfig(
            epsilon=alg["epsilon"], initial_grid=grid, k_max=alg["k_max"], mode=alg["mode"],
            budget=budget, eps0=alg["eps0"], max_iters=alg["max_iters"],
            integration_tol=alg["integration_tol"] or None, warm_start=alg["warm_start"],
            parametrization=alg["parametrization"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def run_experiment(name: str, cfg: dict, out: Path, seed: int = 0) -> list:
    model = build_model(name, cfg["model"])
    grid = build_grid(cfg["grid"], model.t_final)
    config = build_algorithm_config(cfg, grid, model.n_modes)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    runner = run_algorithm2 if config.mode == "minmax" else run_algorithm1
    result = runner(model, config)
    elapsed = time.perf_counter() - t0
    sol, history = result.solution, result.history
    write_history_csv(out / "history.csv", history)
    om = sol.omega if sol.omega.size else None
    write_controls_csv(out / "controls.csv", sol.beta.grid, sol.beta.beta, om)
    write_controls_csv(out / "relaxed_controls.csv", sol.relaxed.control.grid,
                       sol.relaxed.control.alpha, om)
    with open(out / "state_norm.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "norm_rounded", "norm_relaxed"])
        for t, a, b in zip(sol.trajectory.times, sol.trajectory.norms(model),
                           sol.relaxed_trajectory.norms(model)):
            writer.writerow([repr(float(t)), repr(float(a)), repr(float(b))])
    write_manifest(out / "manifest.json", config, model, history,
                   extra={"experiment": name, "seed": seed, "seconds": elapsed,
                          "switches": {f"{i + 1}->{j + 1}": c
                                       for (i, j), c in sorted(switch_counts(sol.beta).items())}})
    return history


# -- subcommands -------------------------------------------------------------

def cmd_round(args) -> int:
    try:
        grid, modes, omega = read_controls_csv(args.input)
    except ControlsFormatError as exc:
        print(f"error: {args.input}: line {exc.line}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, ValueError) as exc:
        print(f"error: {args.input}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        ctl = RelaxedControl(grid, modes, omega)
    except ValueError as exc:
        print(f"error: {args.input}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    beta = sur_round(ctl)
    rep = accumulated_deviation(ctl, beta)
    out = args.output or str(Path(args.input).with_suffix("")) + "_rounded.csv"
    write_controls_csv(out, grid, beta.beta, omega if omega.size else None)
    report = {
        "output": out,
        "per_mode_max": rep.per_mode_max.tolist(),
        "overall_max": rep.overall_max,
        "bound": rep.bound,
        "within_bound": rep.within_bound(),
    }
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2), encoding="utf-8")
    print(json.dumps(report))
    return EXIT_OK


def cmd_experiment(args) -> int:
    try:
        cfg = load_config(args.name, args.config)
        alg = cfg["algorithm"]
        if args.mode:
            alg["mode"] = args.mode
        if args.refinements is not None:
            alg["k_max"] = args.refinements
        if args.epsilon is not None:
            alg["epsilon"] = args.epsilon
        for text in args.budget or []:
            cfg["budget"].append(_parse_budget(text))
        for text in args.set or []:
            _apply_override(cfg, text)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    out = Path(args.out or f"runs/{args.name}")
    try:
        history = run_experiment(args.name, cfg, out, seed=args.seed)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    with open(out / "history.csv", encoding="utf-8") as fh:
        sys.stdout.write(fh.read())
    return EXIT_OK


def _apply_override(cfg, text):
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    lhs, val = text.split("=", 1)
    section, key = lhs.strip().split(".", 1)
    if section not in cfg or section == "budget" or key not in cfg[section]:
        raise ConfigError(f"unknown setting {lhs!r}")
    cfg[section][key] = _coerce(cfg[section][key], val, lhs)
    if key == "t_final" and cfg[section][key] <= 0:
        raise ConfigError("t_final must be positive")


def _run_suite(name_seed):
    from .verify import SUITES
    name, seed = name_seed
    fn = SUITES[name]
    return name, [r.to_dict() for r in (fn() if name == "integrator" else fn(seed=seed))]


def cmd_verify(args) -> int:
    from .verify import SUITES

    names = list(SUITES) if args.suite == "all" else [args.suite]
    jobs = [(n, args.seed) for n in names]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_suite, jobs))
    else:
        results = [_run_suite(j) for j in jobs]
    ok = True
    report = []
    for _, checks in results:
        for c in checks:
            ok &= c["passed"]
            report.append(c)
            print(json.dumps(c, default=float))
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, default=float), encoding="utf-8")
    return EXIT_OK if ok else EXIT_FAILURE


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="relaxround", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("round", help="sum-up rounding of a relaxed controls CSV")
    r.add_argument("input")
    r.add_argument("-o", "--output")
    r.add_argument("--report", help="write the deviation report as JSON")
    r.set_defaults(func=cmd_round)

    e = sub.add_parser("experiment", help="run a preset experiment")
    e.add_argument("name", choices=sorted(PRESETS))
    e.add_argument("--config")
    e.add_argument("--out")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--mode", choices=("sur", "minmax"))
    e.add_argument("--budget", action="append", metavar="i,j,K",
                   help="cap on i->j switches (1-based modes); repeatable")
    e.add_argument("--refinements", type=int, metavar="K_MAX")
    e.add_argument("--epsilon", type=float)
    e.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override a single config value; repeatable")
    e.set_defaults(func=cmd_experiment)

    v = sub.add_parser("verify", help="run self-check suites")
    v.add_argument("suite", choices=["rounding", "minmax", "gradient", "integrator", "estimate", "all"])
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--jobs", type=int, default=1)
    v.add_argument("--out", help="write the report as JSON")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - top-level guard maps to exit code 1
        log.error("%s: %s", type(exc).__name__, exc)
        if args.verbose:
            raise
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
