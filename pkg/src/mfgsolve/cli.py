"""Command line front end: run / compare / sweep with CSV and manifest output.

Configuration is flat ``key = value`` text.  Recognized keys:

    scenario     example1 | example2 | example3
    algorithm    pi1 | pi2 | fixed_point            (run)
    algorithms   comma list of algorithms           (compare)
    beta         congestion exponent override
    zeta         crowd-aversion coefficient override
    T, I, N      horizon, nodes per dimension, time steps
    epsilon      viscosity
    R            control bound ("inf" for unconstrained)
    tol          density stopping tolerance
    max_iters    outer iteration cap
    output_dir   where CSVs and the manifest go
    betas, zetas, t_ladder   comma lists            (sweep)

Unknown keys are hard errors.  Exit codes: 0 converged, 1 usage/config/IO
error, 2 declared divergence.
"""

from __future__ import annotations

import argparse
import datetime
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import max_t_sweep
from .models import build_scenario
from .solvers import SolverConfig, solve

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_DIVERGED = 2

_FLOAT_FMT = "%.17g"

_KEYS = {
    "scenario": str,
    "algorithm": str,
    "algorithms": "list_str",
    "beta": float,
    "zeta": float,
    "T": float,
    "I": int,
    "N": int,
    "epsilon": float,
    "R": "float_inf",
    "tol": float,
    "max_iters": int,
    "output_dir": str,
    "betas": "list_float",
    "zetas": "list_float",
    "t_ladder": "list_float",
}

_DEFAULTS = {
    "scenario": "example1",
    "algorithm": "pi1",
    "R": "inf",
    "tol": "1e-08",
    "max_iters": "500",
    "output_dir": ".",
}


class ConfigError(ValueError):
    pass


def _parse_value(key: str, raw: str):
    kind = _KEYS[key]
    try:
        if kind is str:
            return raw
        if kind is int:
            value = int(raw)
        elif kind is float:
            value = float(raw)
        elif kind == "float_inf":
            return np.inf if raw.lower() in ("inf", "infinity") else float(raw)
        elif kind == "list_str":
            return [part.strip() for part in raw.split(",") if part.strip()]
        elif kind == "list_float":
            return [float(part) for part in raw.split(",") if part.strip()]
        else:  # pragma: no cover
            raise AssertionError(kind)
    except ValueError as exc:
        raise ConfigError(f"invalid value for '{key}': {raw!r}") from exc
    return value


def read_config_file(path: str) -> dict:
    """Parse flat key=value text; '#' starts a comment."""
    raw = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown config key '{key}'")
        raw[key] = value
    return raw


def _merge_settings(args) -> dict:
    raw = dict(_DEFAULTS)
    if args.config:
        raw.update(read_config_file(args.config))
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"unknown config key '{key}'")
        raw[key] = value
    if args.output_dir is not None:
        raw["output_dir"] = args.output_dir
    return raw


def _build_scenario_config(raw: dict):
    overrides = {}
    for cfg_key, override_key in (("beta", "beta"), ("zeta", "zeta"), ("T", "T"),
                                  ("I", "I"), ("N", "N"), ("epsilon", "epsilon")):
        if cfg_key in raw:
            overrides[override_key] = _parse_value(cfg_key, raw[cfg_key])
    try:
        scenario = build_scenario(raw["scenario"], overrides)
        config = SolverConfig(
            scenario=scenario,
            algorithm=_parse_value("algorithm", raw["algorithm"]),
            tol_density=_parse_value("tol", raw["tol"]),
            max_outer_iters=_parse_value("max_iters", raw["max_iters"]),
            control_bound=_parse_value("R", raw["R"]),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return scenario, config


def _fmt(x) -> str:
    if isinstance(x, float) and np.isinf(x):
        return "inf"
    if isinstance(x, float):
        return _FLOAT_FMT % x
    return str(x)


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(x) for x in row) + "\n")


def _field_rows(times, grid, field):
    coords = [c.ravel() for c in grid.coordinates()]
    for n, t in enumerate(times):
        values = field[n].ravel()
        for j in range(values.size):
            yield (t, *(c[j] for c in coords), values[j])


def _write_solution_files(outdir: Path, prefix: str, scenario, solution, report) -> list[str]:
    grid = scenario.space_grid()
    tgrid = scenario.time_grid()
    times = tgrid.times()
    axes = [f"x{j + 1}" for j in range(grid.dim)]
    files = []

    name = f"{prefix}density.csv"
    _write_csv(outdir / name, ["t", *axes, "m"], _field_rows(times, grid, solution.M))
    files.append(name)

    name = f"{prefix}value.csv"
    _write_csv(outdir / name, ["t", *axes, "u"], _field_rows(times, grid, solution.U))
    files.append(name)

    policy_cols = [f"q_{side}_{ax}" for ax in axes for side in ("left", "right")]
    name = f"{prefix}policy.csv"
    rows = []
    coords = [c.ravel() for c in grid.coordinates()]
    for n in range(tgrid.steps):
        comps = [solution.Q[n, j, s].ravel() for j in range(grid.dim) for s in (0, 1)]
        for idx in range(grid.num_nodes):
            rows.append((times[n], *(c[idx] for c in coords), *(comp[idx] for comp in comps)))
    _write_csv(outdir / name, ["t", *axes, *policy_cols], rows)
    files.append(name)

    name = f"{prefix}history.csv"
    _write_csv(outdir / name,
               ["iteration", "d_density", "res_hjb", "res_fp", "gap_u", "gap_m", "gap_q"],
               ((k + 1, report.d_density[k], report.res_hjb[k], report.res_fp[k],
                 report.gap_u[k], report.gap_m[k], report.gap_q[k])
                for k in range(report.iterations())))
    files.append(name)
    return files


def _write_manifest(outdir: Path, raw: dict, command: str, verdicts: dict,
                    timings: dict, files: list[str], started: float) -> None:
    echo_name = "config_echo.cfg"
    with open(outdir / echo_name, "w") as fh:
        for key in sorted(raw):
            fh.write(f"{key} = {raw[key]}\n")
    manifest = {
        "version": __version__,
        "command": command,
        "created_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "wall_clock_seconds": time.perf_counter() - started,
        "config": dict(sorted(raw.items())),
        "verdicts": verdicts,
        "phase_seconds": timings,
        "files": files + [echo_name, "manifest.json"],
    }
    with open(outdir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def _prepare_outdir(raw: dict) -> Path:
    outdir = Path(raw["output_dir"])
    try:
        outdir.mkdir(parents=True, exist_ok=True)
        probe = outdir / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {outdir} is not writable: {exc}") from exc
    return outdir


def cmd_run(args) -> int:
    started = time.perf_counter()
    raw = _merge_settings(args)
    scenario, config = _build_scenario_config(raw)
    outdir = _prepare_outdir(raw)
    solution, report = solve(config)
    files = _write_solution_files(outdir, "", scenario, solution, report)
    verdicts = {"status": solution.status, "converged": solution.converged,
                "iterations": solution.iterations,
                "fitted_rate": report.fitted_rate, "fit_r2": report.fit_r2}
    _write_manifest(outdir, raw, "run", verdicts, report.timings, files, started)
    if not solution.converged:
        print(f"run: {raw['algorithm']} did not converge "
              f"({solution.status} after {solution.iterations} iterations)")
        return EXIT_DIVERGED
    print(f"run: {raw['algorithm']} converged in {solution.iterations} iterations")
    return EXIT_OK


def cmd_compare(args) -> int:
    started = time.perf_counter()
    raw = _merge_settings(args)
    algorithms = _parse_value("algorithms", raw.get("algorithms", ""))
    if len(algorithms) < 2:
        raise ConfigError("compare needs at least 2 algorithms (key 'algorithms')")
    outdir = _prepare_outdir(raw)

    # the fixed point solution, when requested, is the reference for the gaps
    ordered = sorted(algorithms, key=lambda a: a != "fixed_point")
    reference = None
    results = {}
    for algorithm in ordered:
        raw_one = dict(raw, algorithm=algorithm)
        _, config = _build_scenario_config(raw_one)
        if algorithm != "fixed_point" and reference is not None:
            config.reference = reference
        solution, report = solve(config)
        results[algorithm] = (solution, report)
        if algorithm == "fixed_point" and solution.converged:
            reference = solution

    files = []
    scenario, _ = _build_scenario_config(raw)
    for algorithm in algorithms:
        solution, report = results[algorithm]
        files += _write_solution_files(outdir, f"{algorithm}_", scenario, solution, report)

    rows = []
    most = max(report.iterations() for _, report in results.values())
    for k in range(most):
        row = [k + 1]
        for algorithm in algorithms:
            _, report = results[algorithm]
            if k < report.iterations():
                row += [report.d_density[k], report.res_hjb[k], report.res_fp[k],
                        report.gap_u[k], report.gap_m[k], report.gap_q[k]]
            else:
                row += [np.nan] * 6
        rows.append(row)
    header = ["iteration"]
    for algorithm in algorithms:
        header += [f"{algorithm}_{col}" for col in
                   ("d_density", "res_hjb", "res_fp", "gap_u", "gap_m", "gap_q")]
    _write_csv(outdir / "compare_convergence.csv", header, rows)
    files.append("compare_convergence.csv")

    timing_rows = []
    for algorithm in algorithms:
        solution, report = results[algorithm]
        t = report.timings
        timing_rows.append((algorithm, solution.iterations, t["fp_solve"],
                            t["hjb_solve"], t["policy_update"], t["newton_inner"],
                            t["total"]))
    _write_csv(outdir / "compare_timing.csv",
               ["algorithm", "iterations", "fp_solve_s", "hjb_solve_s",
                "policy_update_s", "newton_inner_s", "total_s"], timing_rows)
    files.append("compare_timing.csv")

    verdicts = {a: {"status": s.status, "iterations": s.iterations}
                for a, (s, _) in results.items()}
    timings = {a: results[a][1].timings for a in algorithms}
    _write_manifest(outdir, raw, "compare", verdicts, timings, files, started)
    for algorithm in algorithms:
        solution, _ = results[algorithm]
        print(f"compare: {algorithm}: {solution.status} after "
              f"{solution.iterations} iterations")
    if all(results[a][0].converged for a in algorithms):
        return EXIT_OK
    return EXIT_DIVERGED


def cmd_sweep(args) -> int:
    started = time.perf_counter()
    raw = _merge_settings(args)
    for key in ("betas", "zetas", "t_ladder"):
        if key not in raw or not _parse_value(key, raw[key]):
            raise ConfigError(f"sweep needs a non-empty '{key}' list")
    betas = _parse_value("betas", raw["betas"])
    zetas = _parse_value("zetas", raw["zetas"])
    ladder = _parse_value("t_ladder", raw["t_ladder"])
    outdir = _prepare_outdir(raw)

    overrides = {}
    for key in ("T", "I", "N", "epsilon"):
        if key in raw:
            overrides[key] = _parse_value(key, raw[key])
    try:
        base = build_scenario(raw["scenario"], overrides)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    result = max_t_sweep(base, betas, zetas, ladder,
                         tol_density=_parse_value("tol", raw["tol"]),
                         max_outer_iters=min(_parse_value("max_iters", raw["max_iters"]), 200),
                         jobs=args.jobs)

    rows = [(f"{zeta:g}", *(result.cell_label(beta, zeta) for beta in betas))
            for zeta in zetas]
    _write_csv(outdir / "sweep.csv",
               ["zeta_beta", *[f"{beta:g}" for beta in betas]], rows)
    files = ["sweep.csv"]
    verdicts = {f"beta={beta:g},zeta={zeta:g}": result.cell_label(beta, zeta)
                for beta in betas for zeta in zetas}
    _write_manifest(outdir, raw, "sweep",
                    {"cells": verdicts, "warnings": result.warnings}, {}, files, started)
    print(f"sweep: wrote {len(betas)}x{len(zetas)} grid to {outdir / 'sweep.csv'}")
    for message in result.warnings:
        print(f"sweep: warning: {message}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mfgsolve",
        description="Mean field game solvers: policy iteration and fixed point.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("run", cmd_run), ("compare", cmd_compare), ("sweep", cmd_sweep)):
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--output-dir", help="output directory")
        if name == "sweep":
            p.add_argument("--jobs", type=int, default=1,
                           help="parallel workers for sweep cells")
        p.set_defaults(handler=fn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_ERROR if exc.code not in (0, None) else 0
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
