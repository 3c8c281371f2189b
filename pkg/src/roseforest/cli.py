"""Command-line front end: fit CSV data, simulate built-in processes, tune depth.

Configuration precedence is flags > TOML file (``--config``) > defaults.
All randomness flows from a single ``--seed``; omitting it picks a random
seed and prints it on stderr.  Exit codes: 0 success, 2 usage error,
3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import re
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .cart import ForestParams
from .estimator import (
    ConfigurationError,
    FitConfig,
    FoldReport,
    ThetaReport,
    fit,
    normal_quantile,
    solve_theta,
    tune_rose_depth,
)
from .model import (
    Dataset,
    LinkDomainError,
    ModelSpec,
    NumericError,
    epsilon_values,
)
from .rootfind import SingularInformationError, feasible_theta0
from .rose import RoseTreeParams
from .schemes import NuisanceFitError, OracleNuisances, Scheme, fit_scheme
from .sim import DGP_KINDS, Dgp, replication_seed, run_monte_carlo, sample

__all__ = ["main", "load_dataset", "load_schema", "read_csv_table"]

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_LINK_NAMES = ("identity", "log", "sqrt")
_MOMENT_NAMES = ("identity", "zero_indicator")
_SCHEME_NAMES = (
    "unweighted",
    "rose",
    "rose1",
    "rose2",
    "locally_efficient",
    "loceff",
    "semiparametric_efficient",
    "eff",
    "oracle",
)
_SCHEME_ALIASES = {
    "loceff": "locally_efficient",
    "eff": "semiparametric_efficient",
    "rose1": "rose",
    "rose2": "rose",
}

_TOP_KEYS = {
    "seed", "threads", "out", "csv",
    "model", "data", "fit", "scheme", "simulate", "tune",
}
_SECTION_KEYS = {
    "model": {"link", "moments"},
    "data": {"y", "x", "z"},
    "fit": {"k_folds", "alpha", "max_fisher_iters", "fisher_tol", "strict_honest"},
    "scheme": {
        "kind", "n_moments", "oracle_weight", "zero_nuisances",
        "n_trees", "mtry", "min_node_size", "max_depth", "sample_fraction",
        "honest", "n_rose_trees", "c_split", "clip_bound", "rose_max_depth",
        "rose_min_node_size", "rose_mtry", "rose_honest", "alpha_regularity",
    },
    "simulate": {"dgp", "n", "theta0", "reps", "schemes", "trim", "parallel"},
    "tune": {"dgp", "n", "theta0", "grid"},
}


class UsageError(Exception):
    """Bad flags, config keys or argument combinations (exit code 2)."""


class DataError(Exception):
    """Unreadable or malformed input data (exit code 3)."""


def load_schema(name: str) -> dict:
    """Load one of the JSON schemas shipped with the package."""
    path = Path(__file__).parent / "schemas" / name
    return json.loads(path.read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# CSV input


def read_csv_table(path):
    """Read a comma-separated UTF-8 table with a mandatory header row.

    Returns (header, rows) where rows are (line_number, cells) pairs.
    """
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror or exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = None
        rows = []
        for cells in reader:
            if header is None:
                header = [cell.strip() for cell in cells]
                continue
            rows.append((reader.line_num, cells))
    if header is None or header == [""]:
        raise DataError(
            f"{path}: parse error at line 1: empty file, expected a header row"
        )
    return header, rows


def _column_index(header, name, path):
    try:
        return header.index(name)
    except ValueError:
        raise DataError(
            f"{path}: parse error at line 1: missing column {name!r} "
            f"(header has: {', '.join(header)})"
        ) from None


def load_dataset(path, column_map=None) -> Dataset:
    """Parse a data CSV into y, x and z arrays.

    Default column names are ``y``, ``x`` and ``z1..zd``; ``column_map`` may
    rename them ({"y": ..., "x": ..., "z": [...]}).  A file without z
    columns gets a single constant z column of zeros.
    """
    column_map = column_map or {}
    header, rows = read_csv_table(path)
    y_name = column_map.get("y", "y")
    x_name = column_map.get("x", "x")
    z_names = column_map.get("z")
    if z_names is None:
        numbered = []
        for name in header:
            match = re.fullmatch(r"z(\d+)", name)
            if match:
                numbered.append((int(match.group(1)), name))
        z_names = [name for _, name in sorted(numbered)]
    elif isinstance(z_names, str):
        z_names = [z_names]

    y_idx = _column_index(header, y_name, path)
    x_idx = _column_index(header, x_name, path)
    z_idx = [_column_index(header, name, path) for name in z_names]

    if not rows:
        raise DataError(f"{path}: parse error at line 2: no data rows")

    def cell_value(line_num, cells, idx, name):
        try:
            value = float(cells[idx])
        except (ValueError, IndexError):
            raise DataError(
                f"{path}: parse error at line {line_num}: non-numeric value "
                f"{cells[idx] if idx < len(cells) else ''!r} in column {name!r}"
            ) from None
        if not np.isfinite(value):
            raise DataError(
                f"{path}: parse error at line {line_num}: non-finite value "
                f"in column {name!r}"
            )
        return value

    n = len(rows)
    y = np.empty(n)
    x = np.empty(n)
    z = np.zeros((n, max(len(z_idx), 1)))
    for i, (line_num, cells) in enumerate(rows):
        if len(cells) != len(header):
            raise DataError(
                f"{path}: parse error at line {line_num}: expected "
                f"{len(header)} cells, got {len(cells)}"
            )
        y[i] = cell_value(line_num, cells, y_idx, y_name)
        x[i] = cell_value(line_num, cells, x_idx, x_name)
        for j, idx in enumerate(z_idx):
            z[i, j] = cell_value(line_num, cells, idx, z_names[j])
    return Dataset(y=y, x=x, z=z)


# ---------------------------------------------------------------------------
# Configuration


def _load_toml(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror or exc}")
    try:
        config = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"invalid TOML in {path}: {exc}")
    for key, value in config.items():
        if key not in _TOP_KEYS:
            raise UsageError(f"unknown configuration key {key!r}")
        if key in _SECTION_KEYS:
            if not isinstance(value, dict):
                raise UsageError(f"configuration key {key!r} must be a table")
            unknown = set(value) - _SECTION_KEYS[key]
            if unknown:
                raise UsageError(
                    f"unknown configuration key "
                    f"{key + '.' + sorted(unknown)[0]!r}"
                )
    return config


def _pick(flag_value, section: dict, key: str, default):
    if flag_value is not None:
        return flag_value
    return section.get(key, default)


def _parse_name_list(text, what: str) -> list:
    if isinstance(text, (list, tuple)):
        entries = [str(entry) for entry in text]
    else:
        entries = [part.strip() for part in str(text).split(",")]
    if not entries or any(entry == "" for entry in entries):
        raise UsageError(f"malformed {what} {text!r}")
    return entries


def _parse_grid(value) -> list:
    entries = _parse_name_list(value, "depth grid")
    try:
        grid = [int(entry) for entry in entries]
    except ValueError:
        raise UsageError(f"malformed depth grid {value!r}: depths must be integers")
    if any(depth < 0 for depth in grid):
        raise UsageError("depths must be >= 0")
    return grid


def _resolve_seed(flag_seed, config: dict) -> int:
    seed = flag_seed if flag_seed is not None else config.get("seed")
    if seed is None:
        seed = int(np.random.SeedSequence().generate_state(1, np.uint64)[0] % 2**32)
        print(f"seed: {seed}", file=sys.stderr)
    return int(seed)


def _resolve_threads(flag_threads, config: dict) -> int:
    threads = _pick(flag_threads, config, "threads", os.cpu_count() or 1)
    threads = int(threads)
    if threads < 1:
        raise UsageError("--threads must be >= 1")
    return threads


def _build_model_spec(link, moments) -> ModelSpec:
    try:
        return ModelSpec.make(link, tuple(moments))
    except (ValueError, KeyError) as exc:
        raise UsageError(str(exc))


def _zeros(zmat):
    return np.zeros(len(zmat))


def _build_scheme(name: str, options: dict, spec: ModelSpec,
                  dgp: Dgp | None = None) -> Scheme:
    """Assemble a Scheme from its CLI name and the [scheme] options."""
    if name not in _SCHEME_NAMES:
        raise UsageError(
            f"unknown scheme {name!r}; valid schemes: {', '.join(_SCHEME_NAMES)}"
        )
    kind = _SCHEME_ALIASES.get(name, name)
    if name == "rose1":
        n_moments = 1
    elif name == "rose2":
        n_moments = 2
    else:
        n_moments = int(options.get("n_moments", 1))
    forest_params = ForestParams(
        n_trees=int(options.get("n_trees", 500)),
        mtry=options.get("mtry"),
        min_node_size=int(options.get("min_node_size", 10)),
        max_depth=options.get("max_depth"),
        sample_fraction=float(options.get("sample_fraction", 1.0)),
        honest=bool(options.get("honest", False)),
    )
    try:
        if kind == "unweighted":
            return Scheme.unweighted(n_moments=n_moments, forest_params=forest_params)
        if kind == "rose":
            rose_params = RoseTreeParams(
                max_depth=options.get("rose_max_depth"),
                min_node_size=int(options.get("rose_min_node_size", 10)),
                mtry=options.get("rose_mtry"),
                honest=bool(options.get("rose_honest", False)),
                alpha_regularity=float(options.get("alpha_regularity", 0.05)),
            )
            return Scheme.rose(
                n_moments=n_moments,
                rose_params=rose_params,
                n_trees=int(options.get("n_rose_trees", 500)),
                c_split=float(options.get("c_split", 0.5)),
                forest_params=forest_params,
                clip_bound=options.get("clip_bound"),
            )
        if kind == "locally_efficient":
            return Scheme.locally_efficient(forest_params=forest_params)
        if kind == "semiparametric_efficient":
            return Scheme.semiparametric_efficient(forest_params=forest_params)
        # oracle: from the DGP's closed forms when simulating, else from
        # the configured constant weight and optional zero nuisances.
        if dgp is not None:
            return Scheme.oracle(
                weight=dgp.oracle_weight(), nuisances=dgp.oracle_nuisances()
            )
        weight = float(options.get("oracle_weight", 1.0))
        nuisances = None
        if options.get("zero_nuisances"):
            nuisances = OracleNuisances(f=_zeros, m=(_zeros,) * n_moments)
        return Scheme.oracle(
            weight=weight, nuisances=nuisances,
            n_moments=n_moments, forest_params=forest_params,
        )
    except ValueError as exc:
        raise UsageError(str(exc))


def _build_fit_config(scheme: Scheme, fit_section: dict, args, seed: int,
                      threads: int, default_folds: int) -> FitConfig:
    try:
        return FitConfig(
            scheme=scheme,
            k_folds=int(_pick(getattr(args, "folds", None), fit_section,
                              "k_folds", default_folds)),
            alpha=float(_pick(getattr(args, "alpha", None), fit_section,
                              "alpha", 0.05)),
            max_fisher_iters=int(fit_section.get("max_fisher_iters", 100)),
            fisher_tol=float(fit_section.get("fisher_tol", 1e-10)),
            fold_seed=seed,
            strict_honest=bool(_pick(getattr(args, "strict_honest", None),
                                     fit_section, "strict_honest", False)),
            n_threads=threads,
        )
    except ValueError as exc:
        raise UsageError(str(exc))


# ---------------------------------------------------------------------------
# Output


def _emit_json(doc: dict, out_path) -> None:
    text = json.dumps(doc, indent=2) + "\n"
    if out_path:
        Path(out_path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _theta_report_doc(report: ThetaReport, *, link: str, moments, k_folds: int,
                      seed: int, n: int, d: int) -> dict:
    return {
        "theta_hat": report.theta_hat,
        "v_hat": report.v_hat,
        "ci": [report.ci[0], report.ci[1]],
        "alpha": report.alpha,
        "scheme": report.scheme_kind,
        "link": link,
        "moments": list(moments),
        "k_folds": k_folds,
        "seed": seed,
        "n": n,
        "d": d,
        "convergence": {
            "converged": report.converged,
            "iterations": report.iterations,
            "pilot_thetas": [fold.theta_pilot for fold in report.per_fold],
        },
    }


# ---------------------------------------------------------------------------
# Commands


def _fully_oracle(scheme: Scheme) -> bool:
    return (
        scheme.kind == "oracle"
        and scheme.oracle_weight is not None
        and scheme.oracle_nuisances is not None
    )


def _pooled_oracle_fit(data: Dataset, spec: ModelSpec, cfg: FitConfig) -> ThetaReport:
    """Direct pooled solve when weights and nuisances are both known.

    Nothing is estimated from the data, so cross-fitting is unnecessary and
    the sample-size floor of the K-fold path does not apply.
    """
    fitted = fit_scheme(data, spec, cfg.scheme, seed=cfg.fold_seed,
                        n_threads=cfg.n_threads)
    phi = fitted.phi(data.x, data.z)
    base, offset = fitted.predictor_parts(data.z)
    coef = data.x - offset
    d_sum = float(np.sum(-phi * coef))

    def psi_terms(theta):
        f_vals = base - theta * offset
        eps = epsilon_values(spec.link, data.y, data.x, theta, f_vals)
        return float(np.sum(phi * eps)), d_sum

    theta_start = spec.clip_theta(fitted.theta_pilot)
    try:
        psi_terms(theta_start)
    except Exception:
        theta_start = feasible_theta0(
            spec.link, base, offset, data.x, spec.theta_space
        )
    theta_hat, iterations, converged = solve_theta(
        psi_terms, theta_start, cfg, n_obs=data.n, theta_space=spec.theta_space
    )
    f_vals = base - theta_hat * offset
    eps = epsilon_values(spec.link, data.y, data.x, theta_hat, f_vals)
    psi_vals = phi * eps
    if d_sum == 0.0:
        raise SingularInformationError("pooled score derivative is exactly zero")
    v_hat = float(data.n * np.sum(psi_vals**2) / d_sum**2)
    half = np.sqrt(v_hat / data.n) * normal_quantile(1.0 - cfg.alpha / 2.0)
    return ThetaReport(
        theta_hat=theta_hat,
        v_hat=v_hat,
        ci=(theta_hat - half, theta_hat + half),
        per_fold=[FoldReport(fold=0, theta_pilot=fitted.theta_pilot,
                             diagnostics=fitted.diagnostics)],
        iterations=iterations,
        converged=converged,
        n_obs=data.n,
        alpha=cfg.alpha,
        scheme_kind=cfg.scheme.kind,
    )


def cmd_fit(args) -> int:
    config = _load_toml(args.config) if args.config else {}
    model_section = config.get("model", {})
    scheme_section = dict(config.get("scheme", {}))
    fit_section = config.get("fit", {})
    seed = _resolve_seed(args.seed, config)
    threads = _resolve_threads(args.threads, config)

    link = _pick(args.link, model_section, "link", "identity")
    moments = _pick(args.moments, model_section, "moments", ["identity"])
    moments = _parse_name_list(moments, "moment list")
    spec = _build_model_spec(link, moments)

    if args.oracle_weight is not None:
        scheme_section["oracle_weight"] = args.oracle_weight
    if args.zero_nuisances is not None:
        scheme_section["zero_nuisances"] = args.zero_nuisances
    scheme_name = _pick(args.scheme, scheme_section, "kind", "unweighted")
    scheme = _build_scheme(scheme_name, scheme_section, spec)

    data = load_dataset(args.csv_path, config.get("data"))
    cfg = _build_fit_config(scheme, fit_section, args, seed, threads,
                            default_folds=10)
    if _fully_oracle(scheme):
        report = _pooled_oracle_fit(data, spec, cfg)
        k_folds_used = 1
    else:
        report = fit(data, spec, cfg)
        k_folds_used = cfg.k_folds
    doc = _theta_report_doc(
        report, link=link, moments=moments, k_folds=k_folds_used,
        seed=seed, n=data.n, d=data.d,
    )
    _emit_json(doc, _pick(args.out, config, "out", None))
    return EXIT_OK


def cmd_simulate(args) -> int:
    config = _load_toml(args.config) if args.config else {}
    sim_section = config.get("simulate", {})
    scheme_section = config.get("scheme", {})
    fit_section = config.get("fit", {})
    seed = _resolve_seed(args.seed, config)
    threads = _resolve_threads(args.threads, config)

    kind = _pick(args.dgp, sim_section, "dgp", None)
    if kind is None:
        raise UsageError("--dgp is required (or [simulate].dgp in the config)")
    n = _pick(args.n, sim_section, "n", None)
    if n is None:
        raise UsageError("--n is required (or [simulate].n in the config)")
    theta0 = float(_pick(args.theta0, sim_section, "theta0", 1.0))
    try:
        dgp = Dgp(kind=str(kind), n=int(n), theta0=theta0)
    except ValueError as exc:
        raise UsageError(str(exc))

    reps = _pick(args.reps, sim_section, "reps", None)
    if reps is None:
        raise UsageError("--reps is required (or [simulate].reps in the config)")
    reps = int(reps)
    if reps < 2:
        raise UsageError("reps must be >= 2")
    trim = float(_pick(args.trim, sim_section, "trim", 0.0))
    if not 0.0 <= trim < 0.5:
        raise UsageError("trim must be in [0, 0.5)")

    names = _parse_name_list(
        _pick(args.schemes, sim_section, "schemes", ["unweighted"]), "scheme list"
    )
    spec = dgp.model_spec()
    schemes = [(name, _build_scheme(name, scheme_section, spec, dgp=dgp))
               for name in names]

    cfg = _build_fit_config(schemes[0][1], fit_section, args, seed, 1,
                            default_folds=2)
    parallel = _pick(args.parallel, sim_section, "parallel", threads > 1)
    report = run_monte_carlo(
        dgp, schemes, reps, cfg, seed=seed,
        parallel=bool(parallel), trim=trim, n_threads=threads,
    )
    out_json = _pick(args.out, config, "out", "sim_report.json")
    out_csv = _pick(args.csv, config, "csv", "sim_report.csv")
    report.write_json(out_json)
    report.write_csv(out_csv)
    return EXIT_OK


def cmd_tune(args) -> int:
    config = _load_toml(args.config) if args.config else {}
    tune_section = config.get("tune", {})
    scheme_section = config.get("scheme", {})
    fit_section = config.get("fit", {})
    model_section = config.get("model", {})
    seed = _resolve_seed(args.seed, config)
    threads = _resolve_threads(args.threads, config)

    grid_value = _pick(args.grid, tune_section, "grid", None)
    if grid_value is None:
        raise UsageError("--grid is required (or [tune].grid in the config)")
    grid = _parse_grid(grid_value)

    kind = _pick(args.dgp, tune_section, "dgp", None)
    if args.csv_path is not None and kind is not None:
        raise UsageError("give either a CSV path or --dgp, not both")
    if args.csv_path is not None:
        data = load_dataset(args.csv_path, config.get("data"))
        link = _pick(args.link, model_section, "link", "identity")
        moments = _parse_name_list(
            _pick(args.moments, model_section, "moments", ["identity"]),
            "moment list",
        )
        spec = _build_model_spec(link, moments)
        source = "csv"
    elif kind is not None:
        n = _pick(args.n, tune_section, "n", None)
        if n is None:
            raise UsageError("--n is required with --dgp")
        theta0 = float(_pick(args.theta0, tune_section, "theta0", 1.0))
        try:
            dgp = Dgp(kind=str(kind), n=int(n), theta0=theta0)
        except ValueError as exc:
            raise UsageError(str(exc))
        spec = dgp.model_spec()
        link = spec.link.name
        moments = [moment.name for moment in spec.moments]
        data = sample(dgp, replication_seed(seed, 0))
        source = "dgp"
    else:
        raise UsageError("provide a CSV path or --dgp")

    scheme = _build_scheme("rose", scheme_section, spec)
    cfg = _build_fit_config(scheme, fit_section, args, seed, threads,
                            default_folds=2)
    try:
        best = tune_rose_depth(data, spec, cfg, grid)
    except ConfigurationError:
        raise
    except ValueError as exc:
        raise UsageError(str(exc))
    doc = {
        "best_depth": int(best),
        "grid": grid,
        "seed": seed,
        "n": data.n,
        "d": data.d,
        "source": source,
    }
    _emit_json(doc, _pick(args.out, config, "out", None))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="roseforest",
        description=(
            "Cross-fitted estimating-equation inference for generalized "
            "partially linear models, with forest-based robust weighting."
        ),
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config", metavar="TOML",
        help="TOML configuration file; explicit flags override its values",
    )
    common.add_argument(
        "--seed", type=int,
        help="integer seed for all randomness (default: random, printed to stderr)",
    )
    common.add_argument(
        "--threads", type=int,
        help="cap on internal parallelism (default: all cores)",
    )
    common.add_argument(
        "--out", metavar="PATH",
        help="output JSON path (default: stdout; simulate: sim_report.json)",
    )
    common.add_argument(
        "--strict-honest", action=argparse.BooleanOptionalAction, default=None,
        help="split each training sample between nuisance and weight fitting "
             "(default: off)",
    )

    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser(
        "fit", parents=[common],
        help="estimate theta from a CSV file",
        description="Estimate theta from a CSV file with header y,x,z1..zd "
                    "(column names remappable via [data] in --config).",
    )
    p_fit.add_argument("csv_path", help="input CSV path")
    p_fit.add_argument(
        "--scheme", choices=_SCHEME_NAMES,
        help="weighting scheme (default: unweighted)",
    )
    p_fit.add_argument(
        "--link", choices=_LINK_NAMES, help="link function (default: identity)"
    )
    p_fit.add_argument(
        "--moments",
        help="comma list of moment functions from {identity, zero_indicator} "
             "(default: identity)",
    )
    p_fit.add_argument(
        "--folds", type=int, help="cross-fitting folds (default: 10)"
    )
    p_fit.add_argument(
        "--alpha", type=float,
        help="confidence-interval miscoverage level (default: 0.05)",
    )
    p_fit.add_argument(
        "--oracle-weight", type=float,
        help="constant weight used by --scheme oracle (default: 1.0)",
    )
    p_fit.add_argument(
        "--zero-nuisances", action=argparse.BooleanOptionalAction, default=None,
        help="with --scheme oracle: take f and m as identically zero "
             "(default: off)",
    )
    p_fit.set_defaults(func=cmd_fit)

    p_sim = sub.add_parser(
        "simulate", parents=[common],
        help="run a Monte-Carlo study on a built-in process",
        description="Run a Monte-Carlo study on a built-in data-generating "
                    "process and write JSON + CSV reports.",
    )
    p_sim.add_argument(
        "--dgp", help=f"process name, one of: {', '.join(DGP_KINDS)}"
    )
    p_sim.add_argument("--n", type=int, help="sample size per replication")
    p_sim.add_argument("--reps", type=int, help="number of replications (>= 2)")
    p_sim.add_argument(
        "--schemes",
        help="comma list of scheme names "
             f"({', '.join(_SCHEME_NAMES)}; default: unweighted)",
    )
    p_sim.add_argument(
        "--theta0", type=float, help="true parameter value (default: 1.0)"
    )
    p_sim.add_argument(
        "--trim", type=float,
        help="per-tail trim fraction for bias/variance/MSE (default: 0)",
    )
    p_sim.add_argument(
        "--folds", type=int, help="cross-fitting folds per fit (default: 2)"
    )
    p_sim.add_argument("--alpha", type=float,
                       help="CI miscoverage level (default: 0.05)")
    p_sim.add_argument(
        "--csv", metavar="PATH",
        help="output CSV path (default: sim_report.csv)",
    )
    p_sim.add_argument(
        "--parallel", action=argparse.BooleanOptionalAction, default=None,
        help="run replications on a thread pool (default: on when --threads > 1)",
    )
    p_sim.set_defaults(func=cmd_simulate)

    p_tune = sub.add_parser(
        "tune", parents=[common],
        help="choose a rose tree depth by held-out sandwich loss",
        description="Choose the rose forest depth over a comma-separated grid "
                    "by held-out empirical sandwich loss, on a CSV file or a "
                    "built-in process.",
    )
    p_tune.add_argument(
        "csv_path", nargs="?", default=None,
        help="input CSV path (omit when using --dgp)",
    )
    p_tune.add_argument("--grid", help="comma list of max depths, e.g. 0,2,5")
    p_tune.add_argument(
        "--dgp", help=f"process name, one of: {', '.join(DGP_KINDS)}"
    )
    p_tune.add_argument("--n", type=int, help="sample size drawn with --dgp")
    p_tune.add_argument("--theta0", type=float,
                        help="true parameter for --dgp (default: 1.0)")
    p_tune.add_argument(
        "--link", choices=_LINK_NAMES,
        help="link function for CSV input (default: identity)",
    )
    p_tune.add_argument(
        "--moments",
        help="comma list of moment functions for CSV input (default: identity)",
    )
    p_tune.set_defaults(func=cmd_tune)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (
        LinkDomainError,
        NumericError,
        SingularInformationError,
        NuisanceFitError,
        np.linalg.LinAlgError,
        ArithmeticError,
        ValueError,
    ) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
