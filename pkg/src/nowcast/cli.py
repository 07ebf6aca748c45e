"""Batch command-line driver: ``simulate``, ``indicators``, ``nowcast`` and ``evaluate``.

Settings come from defaults, then an optional flat ``key = value`` config
file (``--config``), then command-line flags. Every command writes its
primary outputs plus a ``<command>.json`` sidecar recording the resolved
config, its hash and the package version.

Exit codes: 0 ok, 2 input error, 3 convergence warning (R-hat above the
threshold; files are still written), 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    AnalysisWindow,
    DataError,
    build_triangle,
    load_graph,
    onset_series,
    read_edges_csv,
    read_line_list,
    read_population_csv,
    rook_grid,
    write_graph_csv,
    write_line_list,
)
from .diagnostics import RHAT_THRESHOLD, diagnostics, scalar_columns
from .evaluation import WEEK, EvaluationReport, confusion, true_increase
from .indicators import rolling_indicator, spline_indicator
from .model import DivergentStateError, HyperPriorSpec, ModelData
from .posterior import CUTPOINTS, QUANTILE_METHOD, classify, nowcast_intervals, trend_summary
from .sampler import SamplerConfig, SamplerError, run_chains
from .simulate import FIXABLE, SimulationConfig, censor, desk_scenario, simulate

EXIT_OK, EXIT_INPUT, EXIT_CONVERGENCE, EXIT_NUMERIC = 0, 2, 3, 4
MIN_DIAGNOSTIC_DRAWS = 100


class InputError(Exception):
    pass


def _date(value: str) -> dt.date:
    try:
        return dt.date.fromisoformat(str(value).strip())
    except ValueError as exc:
        raise InputError(f"bad date {value!r}") from exc


def _dates(value: str) -> tuple:
    return tuple(_date(v) for v in str(value).split(",") if v.strip())


def _paths(value: str) -> tuple:
    return tuple(v.strip() for v in str(value).split(",") if v.strip())


def _bool(value) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise InputError(f"bad boolean {value!r}")


# key -> (parser, default); defaults follow the published analysis settings
COMMON = {
    "seed": (int, 0),
    "out": (str, "."),
}
SETTINGS = {
    "simulate": {
        "rows": (int, 3), "cols": (int, 3), "population": (int, 200),
        "scenario": (str, "desk"),
        "population_file": (str, None), "edges_file": (str, None),
        "window": (int, 90), "max_delay": (int, 30),
        "start_date": (_date, dt.date(2020, 6, 1)),
        "as_of_date": (_date, None),
    },
    "indicators": {
        "linelist": (str, None), "population_file": (str, None),
        "as_of_date": (_dates, None), "window": (int, 90),
    },
    "nowcast": {
        "linelist": (str, None), "population_file": (str, None), "edges_file": (str, None),
        "as_of_date": (_date, None), "window": (int, 90), "max_delay": (int, 30),
        "iterations": (int, 30000), "burn_in": (int, 15000), "thin": (int, 10),
        "chains": (int, 2), "adapt_interval": (int, 200), "threads": (int, 1),
        "drop_last_day": (_bool, True), "full_state": (_bool, False),
    },
    "evaluate": {
        "truth": (str, None), "indicators": (_paths, ()), "trend": (_paths, ()),
        "nowcast": (_paths, ()),
    },
}
REQUIRED = {
    "simulate": (),
    "indicators": ("linelist", "population_file", "as_of_date"),
    "nowcast": ("linelist", "population_file", "edges_file", "as_of_date"),
    "evaluate": ("truth",),
}


def read_config_file(path: str | Path) -> dict:
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    for n, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve_config(command: str, file_values: dict, flag_values: dict) -> dict:
    schema = {**COMMON, **SETTINGS[command]}
    cfg = {k: default for k, (_, default) in schema.items()}
    fixed = {}
    for source in (file_values, flag_values):
        for key, value in source.items():
            if value is None:
                continue
            if command == "simulate" and key.startswith("fix_"):
                name = key[4:]
                if name not in FIXABLE:
                    raise InputError(f"cannot fix {name!r}")
                try:
                    nums = [float(v) for v in str(value).split(",")]
                except ValueError as exc:
                    raise InputError(f"bad value for {key}: {value!r}") from exc
                fixed[name] = nums[0] if len(nums) == 1 else nums
                continue
            if key not in schema:
                raise InputError(f"unknown setting {key!r} for {command}")
            parse = schema[key][0]
            try:
                cfg[key] = value if not isinstance(value, str) else parse(value)
            except (TypeError, ValueError) as exc:
                raise InputError(f"bad value for {key}: {value!r}") from exc
    if command == "simulate":
        cfg["fixed"] = dict(sorted(fixed.items()))
    missing = [k for k in REQUIRED[command] if not cfg.get(k)]
    if missing:
        raise InputError(f"missing required settings: {', '.join(missing)}")
    return cfg


def config_hash(command: str, cfg: dict) -> str:
    # the output directory does not affect results, so it is left out
    settings = {k: v for k, v in cfg.items() if k != "out"}
    canonical = json.dumps({"command": command, "config": _jsonable(settings), "version": __version__},
                           sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, dt.date):
        return x.isoformat()
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, float) and not np.isfinite(x):
        return None
    return x


def _write_json(path: Path, payload: dict):
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _sidecar(out: Path, command: str, cfg: dict, **extra):
    payload = {"command": command, "version": __version__, "config": cfg,
               "config_hash": config_hash(command, cfg)}
    payload.update(extra)
    _write_json(out / f"{command}.json", payload)


def _writer(fh):
    return csv.writer(fh, lineterminator="\n")


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))   # shortest string that round-trips exactly


def _graph_from_files(pop_path, edge_path=None):
    try:
        pops = read_population_csv(pop_path)
        edges = read_edges_csv(edge_path) if edge_path else []
    except OSError as exc:
        raise InputError(str(exc)) from exc
    except KeyError as exc:
        raise InputError(f"missing column {exc}") from exc
    if edge_path is None:
        return tuple(c for c, _ in pops)
    return load_graph(pops, edges)


def _read_line_list(path):
    try:
        return read_line_list(path)
    except OSError as exc:
        raise InputError(str(exc)) from exc


# ------------------------------------------------------------ commands

def cmd_simulate(cfg: dict) -> int:
    out = Path(cfg["out"])
    if cfg["population_file"] or cfg["edges_file"]:
        if not (cfg["population_file"] and cfg["edges_file"]):
            raise InputError("population_file and edges_file must be given together")
        graph = _graph_from_files(cfg["population_file"], cfg["edges_file"])
    else:
        graph = rook_grid(cfg["rows"], cfg["cols"], cfg["population"])
    if cfg["scenario"] not in ("desk", "prior"):
        raise InputError("scenario must be 'desk' or 'prior'")
    try:
        AnalysisWindow(cfg["start_date"] + dt.timedelta(days=cfg["window"] - 1),
                       cfg["window"], cfg["max_delay"])
        fixed = desk_scenario(cfg["max_delay"]) if cfg["scenario"] == "desk" else {}
        fixed.update(cfg["fixed"])
        sim_cfg = SimulationConfig(graph, cfg["window"], cfg["max_delay"], cfg["start_date"],
                                   fixed=fixed, seed=cfg["seed"])
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    try:
        result = simulate(sim_cfg)
    except ValueError as exc:
        # e.g. rates too large for the Poisson generator
        raise InputError(f"cannot simulate: {exc}") from exc
    as_of = cfg["as_of_date"] or sim_cfg.as_of_date
    out.mkdir(parents=True, exist_ok=True)
    write_line_list(out / "linelist.csv", result.line_list)
    write_line_list(out / "linelist_censored.csv", censor(result.line_list, as_of))
    write_graph_csv(graph, out / "population.csv", out / "edges.csv")
    with open(out / "truth_counts.csv", "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        w.writerow(["county_id", "onset_date", "count"])
        for i, c in enumerate(graph.county_ids):
            for day, y in zip(sim_cfg.onset_dates, result.full_counts[i]):
                w.writerow([c, day.isoformat(), int(y)])
    truth = result.truth
    params = {name: getattr(truth, name) for name in (
        "delta_bar", "d", "eta_bar", "eta", "xi_bar", "xi", "beta", "phi", "rho_delta", "rho_psi",
        "tau2_alpha", "tau2_delta", "tau2_d", "tau2_eta", "tau2_xi", "tau2_psi")}
    params["alpha1"] = truth.alpha[:, 0]
    params["delta"] = truth.delta
    _write_json(out / "truth.json", {
        "county_ids": list(graph.county_ids),
        "start_date": sim_cfg.start_date, "as_of_date": as_of,
        "parameters": params,
    })
    _sidecar(out, "simulate", cfg)
    return EXIT_OK


def cmd_indicators(cfg: dict) -> int:
    out = Path(cfg["out"])
    ids = _graph_from_files(cfg["population_file"])
    records = _read_line_list(cfg["linelist"])
    rows = []
    for as_of in cfg["as_of_date"]:
        try:
            window = AnalysisWindow(as_of, cfg["window"], 1)
        except ValueError as exc:
            raise InputError(str(exc)) from exc
        series = onset_series(records, ids, window, as_of=as_of)
        for i, c in enumerate(ids):
            rows.append(rolling_indicator(series[i], c, as_of))
        for i, c in enumerate(ids):
            rows.append(spline_indicator(series[i], c, as_of))
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "indicators.csv", "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        w.writerow(["county_id", "method", "flagged", "as_of_date"])
        for r in rows:
            w.writerow([r.county_id, r.method, _fmt(r.flagged), r.as_of_date.isoformat()])
    _sidecar(out, "indicators", cfg)
    return EXIT_OK


def write_draws(path: Path, draws):
    """Columnar draws: one row per retained draw, one column per monitored scalar."""
    cols = scalar_columns(draws)
    fmt = {k: (str if np.issubdtype(v.dtype, np.integer) else (lambda v: repr(float(v))))
           for k, v in cols.items()}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        w.writerow(["chain", "draw"] + list(cols))
        for c in range(draws.n_chains):
            for k in range(draws.n_draws):
                w.writerow([c, k] + [fmt[label](x[c, k]) for label, x in cols.items()])


def cmd_nowcast(cfg: dict) -> int:
    out = Path(cfg["out"])
    graph = _graph_from_files(cfg["population_file"], cfg["edges_file"])
    records = _read_line_list(cfg["linelist"])
    try:
        window = AnalysisWindow(cfg["as_of_date"], cfg["window"], cfg["max_delay"])
        tri = build_triangle(records, window, graph)
        data = ModelData.from_triangle(tri, graph, cfg["drop_last_day"])
        sampler_cfg = SamplerConfig(
            iterations=cfg["iterations"], burn_in=cfg["burn_in"], thin=cfg["thin"],
            chains=cfg["chains"], seed=cfg["seed"], adapt_interval=cfg["adapt_interval"],
            full_state=cfg["full_state"],
        )
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    if sampler_cfg.n_draws < 1:
        raise InputError("no draws retained; check iterations, burn_in and thin")

    started = time.perf_counter()
    try:
        with np.errstate(all="ignore"):
            draws = run_chains(data, sampler_cfg, HyperPriorSpec(), threads=max(1, cfg["threads"]))
    except (SamplerError, DivergentStateError, FloatingPointError) as exc:
        print(f"nowcast: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    wall = time.perf_counter() - started

    out.mkdir(parents=True, exist_ok=True)
    write_draws(out / "draws.csv", draws)

    summary = nowcast_intervals(draws)
    with open(out / "nowcast.csv", "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        w.writerow(["county_id", "onset_date", "observed", "mean", "lo90", "hi90", "as_of_date"])
        for c, day, obs, mean, lo, hi in summary.rows():
            w.writerow([c, day.isoformat(), obs, _fmt(mean), _fmt(lo), _fmt(hi),
                        cfg["as_of_date"].isoformat()])

    trend = trend_summary(draws)
    flags = {cut: classify(trend, cut) for cut in CUTPOINTS}
    with open(out / "trend.csv", "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        w.writerow(["county_id", "p_increase"] + [f"flag{int(round(c * 100))}" for c in CUTPOINTS]
                   + ["as_of_date"])
        for i, c in enumerate(trend.county_ids):
            w.writerow([c, _fmt(float(trend.probability_increase[i]))]
                       + [_fmt(flags[cut][i].flagged) for cut in CUTPOINTS]
                       + [cfg["as_of_date"].isoformat()])

    table = None
    note = None
    if draws.n_draws >= MIN_DIAGNOSTIC_DRAWS:
        table = diagnostics(draws, min_draws=MIN_DIAGNOSTIC_DRAWS)
        if draws.n_chains == 1:
            for row in table.values():
                row["rhat"] = "unavailable"
    else:
        note = f"diagnostics need at least {MIN_DIAGNOSTIC_DRAWS} draws per chain"
    worst = None
    if table and draws.n_chains > 1:
        rhats = [row["rhat"] for row in table.values() if np.isfinite(row["rhat"])]
        worst = max(rhats) if rhats else None
    _sidecar(
        out, "nowcast", cfg,
        sampler={"iterations": sampler_cfg.iterations, "burn_in": sampler_cfg.burn_in,
                 "thin": sampler_cfg.thin, "chains": sampler_cfg.chains, "seed": sampler_cfg.seed},
        quantile_method=QUANTILE_METHOD,
        acceptance=draws.acceptance,
        diagnostics=table, diagnostics_note=note, max_rhat=worst,
        rhat_threshold=RHAT_THRESHOLD, converged=trend.converged,
        chain_seconds=draws.runtime_seconds, wall_clock_seconds=wall,
        dropped_late=tri.dropped_late, not_yet_reported=tri.not_yet_reported,
    )
    if worst is not None and worst > RHAT_THRESHOLD:
        print(f"nowcast: max R-hat {worst:.3f} exceeds {RHAT_THRESHOLD}", file=sys.stderr)
        return EXIT_CONVERGENCE
    return EXIT_OK


def _read_csv(path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            return list(csv.DictReader(fh))
    except OSError as exc:
        raise InputError(str(exc)) from exc


def _read_truth(path):
    series = {}
    for row in _read_csv(path):
        try:
            series.setdefault(row["county_id"], {})[_date(row["onset_date"])] = int(row["count"])
        except (KeyError, ValueError) as exc:
            raise InputError(f"{path}: bad truth row {row}") from exc
    return series


def _truth_window(series: dict, county: str, as_of: dt.date, days: int) -> np.ndarray:
    if county not in series:
        raise InputError(f"no truth for county {county!r}")
    counts = series[county]
    want = [as_of - dt.timedelta(days=k) for k in range(days - 1, -1, -1)]
    missing = [d for d in want if d not in counts]
    if missing:
        raise InputError(f"truth for {county} lacks {missing[0].isoformat()}")
    return np.array([counts[d] for d in want])


def cmd_evaluate(cfg: dict) -> int:
    out = Path(cfg["out"])
    if not Path(cfg["truth"]).is_file():
        raise InputError(f"truth file {cfg['truth']} not found")
    truth = _read_truth(cfg["truth"])
    methods = {}   # (method, cutpoint) -> {(county, as_of): flag}
    for path in cfg["indicators"]:
        for row in _read_csv(path):
            try:
                key = (row["county_id"], _date(row["as_of_date"]))
                methods.setdefault((row["method"], None), {})[key] = _bool(row["flagged"])
            except KeyError as exc:
                raise InputError(f"{path}: missing column {exc}") from exc
    for path in cfg["trend"]:
        for row in _read_csv(path):
            try:
                key = (row["county_id"], _date(row["as_of_date"]))
                for cut in CUTPOINTS:
                    flag = _bool(row[f"flag{int(round(cut * 100))}"])
                    methods.setdefault(("model", cut), {})[key] = flag
            except KeyError as exc:
                raise InputError(f"{path}: missing column {exc}") from exc
    if not methods and not cfg["nowcast"]:
        raise InputError("nothing to evaluate; give indicators, trend or nowcast files")

    report = EvaluationReport()
    pairs = None
    for (method, cut), flags in methods.items():
        keys = sorted(flags)
        if pairs is None:
            pairs = keys
            truths = [true_increase(_truth_window(truth, c, d, 21)) for c, d in pairs]
        elif keys != pairs:
            raise InputError(f"method {method} covers different county-dates than the others")
        report.add(confusion([flags[k] for k in pairs], truths, method, cut))

    coverage = {}
    for path in cfg["nowcast"]:
        for row in _read_csv(path):
            try:
                c, day, as_of = row["county_id"], _date(row["onset_date"]), _date(row["as_of_date"])
                y = _truth_window(truth, c, day, 1)[0]
                inside = float(row["lo90"]) <= y <= float(row["hi90"])
            except (KeyError, ValueError) as exc:
                raise InputError(f"{path}: bad nowcast row") from exc
            regions = ["incomplete"] + (["last7"] if (as_of - day).days < WEEK else [])
            for region in regions:
                n, k = coverage.get(region, (0, 0))
                coverage[region] = (n + 1, k + int(inside))

    out.mkdir(parents=True, exist_ok=True)
    with open(out / "evaluation.csv", "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        w.writerow(["method", "cutpoint", "TP", "FP", "TN", "FN", "sensitivity", "specificity"])
        for r in sorted(report.rows, key=lambda r: (r.method, r.cutpoint or 0.0)):
            w.writerow([r.method, _fmt(r.cutpoint), r.tp, r.fp, r.tn, r.fn,
                        _fmt(r.sensitivity), _fmt(r.specificity)])
    with open(out / "coverage.csv", "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        w.writerow(["region", "cells", "covered", "coverage"])
        for region in ("incomplete", "last7"):
            if region in coverage:
                n, k = coverage[region]
                w.writerow([region, n, k, _fmt(k / n)])
    _sidecar(out, "evaluate", cfg, county_dates=len(pairs or ()))
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "indicators": cmd_indicators,
    "nowcast": cmd_nowcast,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nowcast", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value settings file")
        for key in {**COMMON, **SETTINGS[name]}:
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None)
        if name == "simulate":
            p.add_argument("--fix", action="append", default=[], metavar="NAME=VALUE",
                           help="pin a generating parameter (repeatable)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    command = args.command
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "fix")}
    for item in getattr(args, "fix", []):
        name, _, value = item.partition("=")
        flags["fix_" + name.strip()] = value
    try:
        file_values = read_config_file(args.config) if args.config else {}
        cfg = resolve_config(command, file_values, flags)
        return COMMANDS[command](cfg)
    except (InputError, DataError) as exc:
        print(f"{command}: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
