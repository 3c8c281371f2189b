"""Seeded data-generating processes and a Monte-Carlo replication harness.

Five built-in processes stress the estimator in different ways: heavy-tailed
inverse-probability structure (``sim1a`` and its smoothed ``sim1a_fig2a``
variant), a square-root-link Gamma model (``sim1b``), smooth heteroscedastic
noise (``sim2``), and zero-inflated treatment with piecewise noise variance
(``sim3``).  The harness replays independent replications from a splittable
seed, fits a set of weighting schemes on each simulated dataset and
aggregates squared bias, variance, MSE, MSE ratios and confidence-interval
coverage, optionally with symmetric trimming of the point estimates.
"""

from __future__ import annotations

import json
from collections.abc import Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.special import expit

from .estimator import ConfigurationError, FitConfig, fit
from .model import Dataset, LinkDomainError, ModelSpec, NumericError
from .rootfind import SingularInformationError
from .schemes import NuisanceFitError, OracleNuisances, Scheme

__all__ = [
    "DGP_KINDS",
    "POINT_MASS_VAR",
    "Dgp",
    "ReplicationOutcomes",
    "SchemeMetrics",
    "SimReport",
    "UndefinedMetricError",
    "relative_accuracy",
    "replication_seed",
    "run_monte_carlo",
    "sample",
]

DGP_KINDS = ("sim1a", "sim1a_fig2a", "sim1b", "sim2", "sim3")

# Conditional variances below this are treated as exact point masses.
POINT_MASS_VAR = 1e-12

_METRIC_NAMES = (
    "squared_bias",
    "variance",
    "mse",
    "mse_ratio_to_unweighted",
    "coverage_at_95",
    "n_failed",
)


class UndefinedMetricError(ValueError):
    """Raised when a relative-accuracy denominator is not positive."""


def _clamped_probability(zmat: np.ndarray) -> np.ndarray:
    return np.maximum(expit(3.0 * zmat[:, 0]), 0.01)


def _sum_expit_first5(zmat: np.ndarray) -> np.ndarray:
    return expit(zmat[:, :5]).sum(axis=1)


def _sum_expit_all(zmat: np.ndarray) -> np.ndarray:
    return expit(zmat).sum(axis=1)


def _zeros(zmat: np.ndarray) -> np.ndarray:
    return np.zeros(len(zmat))


def _sim2_sigma(zmat: np.ndarray) -> np.ndarray:
    return (
        1.0
        + 2.0 * expit(zmat[:, 0] + zmat[:, 1])
        + 2.0 * expit(zmat[:, 1] + zmat[:, 2])
    )


def _sim2_variance(x: np.ndarray, zmat: np.ndarray) -> np.ndarray:
    return _sim2_sigma(zmat) ** 2


def _sim2_oracle_weight(zmat: np.ndarray) -> np.ndarray:
    return 1.0 / _sim2_variance(None, zmat)


def _sim1a_oracle_weight(zmat: np.ndarray) -> np.ndarray:
    return np.sqrt(_clamped_probability(zmat))


def _sim1a_fig2a_oracle_weight(zmat: np.ndarray) -> np.ndarray:
    # Ratio of E[d psi | Z] to E[psi^2 | Z] under the smoothed variances
    # (B + 0.01) / p and (B + 0.01) / sqrt(p) sharing one Bernoulli(p) draw.
    p = _clamped_probability(zmat)
    second_moment = p * 1.01**2 + (1.0 - p) * 0.01**2
    return (p + 0.01) * np.sqrt(p) / second_moment


def _sim3_zero_probability(zmat: np.ndarray) -> np.ndarray:
    return 0.1 + 0.8 * expit(zmat[:, 0])


def _sim3_mean_x(zmat: np.ndarray) -> np.ndarray:
    return (1.0 - _sim3_zero_probability(zmat)) * _sum_expit_all(zmat)


@dataclass(frozen=True)
class Dgp:
    """A built-in data-generating process: kind, sample size, true theta."""

    kind: str
    n: int
    theta0: float = 1.0

    def __post_init__(self):
        if self.kind not in DGP_KINDS:
            raise ValueError(
                f"unknown DGP kind {self.kind!r}; valid kinds: {', '.join(DGP_KINDS)}"
            )
        if self.n < 1:
            raise ValueError("n must be >= 1")

    def model_spec(self) -> ModelSpec:
        """The link and moment functions matching this process."""
        if self.kind == "sim1b":
            return ModelSpec.make("sqrt", ("identity",))
        if self.kind == "sim3":
            return ModelSpec.make("identity", ("identity", "zero_indicator"))
        return ModelSpec.make("identity", ("identity",))

    def oracle_nuisances(self) -> OracleNuisances:
        """The true nuisance functions of this process."""
        if self.kind in ("sim1a", "sim1a_fig2a", "sim1b"):
            return OracleNuisances(f=_sum_expit_first5, m=(_sum_expit_first5,))
        if self.kind == "sim2":
            return OracleNuisances(
                f=_zeros, m=(_zeros,), v=_sim2_variance, h=_zeros
            )
        return OracleNuisances(
            f=_sum_expit_all, m=(_sim3_mean_x, _sim3_zero_probability)
        )

    def oracle_weight(self):
        """The optimal single-moment weight function of z, where closed-form."""
        if self.kind == "sim1a":
            return _sim1a_oracle_weight
        if self.kind == "sim1a_fig2a":
            return _sim1a_fig2a_oracle_weight
        if self.kind == "sim2":
            return _sim2_oracle_weight
        raise ValueError(f"no closed-form oracle weight for {self.kind!r}")


@lru_cache(maxsize=None)
def _ar_cholesky(dim: int, rho: float) -> np.ndarray:
    idx = np.arange(dim)
    cov = rho ** np.abs(idx[:, None] - idx[None, :])
    chol = np.linalg.cholesky(cov)
    chol.setflags(write=False)
    return chol


def _gamma_mean_var(rng: np.random.Generator, mean, var) -> np.ndarray:
    """Gamma draws parameterized by mean and variance.

    Rows with variance below POINT_MASS_VAR are returned as the mean itself.
    """
    mean = np.asarray(mean, dtype=float)
    var = np.asarray(var, dtype=float)
    out = mean.copy()
    live = var >= POINT_MASS_VAR
    if np.any(live):
        m = mean[live]
        v = var[live]
        out[live] = rng.gamma(m * m / v, v / m)
    return out


def replication_seed(seed, r: int) -> np.random.SeedSequence:
    """Independent child stream for replication ``r`` of a run seed.

    Identical (seed, r) pairs give identical streams regardless of how many
    replications run, in what order, or on how many threads.
    """
    return np.random.SeedSequence(seed, spawn_key=(r,))


def sample(dgp: Dgp, seed) -> Dataset:
    """Draw one dataset from a built-in process.

    ``seed`` may be an integer or a numpy SeedSequence.  Conditional
    variances of exactly zero produce point masses, bitwise equal to the
    conditional mean.
    """
    rng = np.random.default_rng(seed)
    n = dgp.n

    if dgp.kind in ("sim1a", "sim1a_fig2a", "sim1b"):
        z = rng.standard_normal((n, 10)) @ _ar_cholesky(10, 0.9).T
        fz = _sum_expit_first5(z)
        p = _clamped_probability(z)
        b = (rng.random(n) < p).astype(float)
        if dgp.kind == "sim1b":
            x = _gamma_mean_var(rng, fz, b / p)
            mu = (dgp.theta0 * x + fz) ** 2
            y = _gamma_mean_var(rng, mu, 0.01 * mu**2 * b / np.sqrt(p))
        else:
            if dgp.kind == "sim1a":
                var_x = b / p
                var_y = b / np.sqrt(p)
            else:
                var_x = (b + 0.01) / p
                var_y = (b + 0.01) / np.sqrt(p)
            x = fz + np.sqrt(var_x) * rng.standard_normal(n)
            y = dgp.theta0 * x + fz + np.sqrt(var_y) * rng.standard_normal(n)
        return Dataset(y=y, x=x, z=z)

    if dgp.kind == "sim2":
        joint = 2.0 * rng.standard_normal((n, 4))
        z = joint[:, :3]
        x = joint[:, 3]
        y = dgp.theta0 * x + _sim2_sigma(z) * rng.standard_normal(n)
        return Dataset(y=y, x=x, z=z)

    # sim3: zero-inflated x, Gamma y with piecewise variance.
    z = rng.standard_normal((n, 3))
    zero = rng.random(n) < _sim3_zero_probability(z)
    x = np.zeros(n)
    live = ~zero
    if np.any(live):
        x[live] = _gamma_mean_var(
            rng, _sum_expit_all(z[live]), np.full(int(live.sum()), 0.1)
        )
    mu = dgp.theta0 * x + _sum_expit_all(z)
    var_y = np.where(x == 0.0, 0.9, np.where(x <= 1.5, 0.4, 0.1))
    y = _gamma_mean_var(rng, mu, var_y)
    return Dataset(y=y, x=x, z=z)


@dataclass(frozen=True, eq=False)
class SchemeMetrics:
    """Aggregated Monte-Carlo metrics for one scheme."""

    squared_bias: float
    variance: float
    mse: float
    mse_ratio_to_unweighted: float | None
    coverage_at_95: float
    n_failed: int


@dataclass(frozen=True, eq=False)
class ReplicationOutcomes:
    """Per-replication estimates for one scheme; NaN rows mark failures."""

    theta_hat: np.ndarray
    v_hat: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    covered: np.ndarray
    failed: np.ndarray


@dataclass(frozen=True, eq=False)
class SimReport:
    """Summary of one Monte-Carlo study.

    ``metrics`` maps scheme label to aggregated metrics; ``replications``
    keeps the per-replication estimates behind them.  ``trim`` records the
    per-tail trimming fraction applied to the point estimates before the
    bias/variance/MSE aggregation (coverage is never trimmed).
    """

    dgp_kind: str
    n: int
    theta0: float
    reps: int
    trim: float
    seed: int
    labels: tuple
    metrics: dict
    replications: dict

    def to_json_dict(self, include_replications: bool = False) -> dict:
        out = {
            "dgp": {"kind": self.dgp_kind, "n": self.n, "theta0": self.theta0},
            "reps": self.reps,
            "trim": self.trim,
            "seed": self.seed,
            "metrics": {
                label: {
                    "squared_bias": m.squared_bias,
                    "variance": m.variance,
                    "mse": m.mse,
                    "mse_ratio_to_unweighted": m.mse_ratio_to_unweighted,
                    "coverage_at_95": m.coverage_at_95,
                    "n_failed": m.n_failed,
                }
                for label, m in ((lbl, self.metrics[lbl]) for lbl in self.labels)
            },
        }
        if include_replications:
            out["replications"] = {
                label: {
                    "theta_hat": rec.theta_hat.tolist(),
                    "v_hat": rec.v_hat.tolist(),
                    "ci_lower": rec.ci_lower.tolist(),
                    "ci_upper": rec.ci_upper.tolist(),
                    "covered": rec.covered.tolist(),
                    "failed": rec.failed.tolist(),
                }
                for label, rec in (
                    (lbl, self.replications[lbl]) for lbl in self.labels
                )
            }
        return out

    def to_json(self, include_replications: bool = False) -> str:
        return json.dumps(self.to_json_dict(include_replications), indent=2)

    def to_csv_text(self) -> str:
        lines = ["scheme,metric,value"]
        for label in self.labels:
            m = self.metrics[label]
            values = (
                m.squared_bias,
                m.variance,
                m.mse,
                m.mse_ratio_to_unweighted,
                m.coverage_at_95,
                m.n_failed,
            )
            for name, value in zip(_METRIC_NAMES, values):
                lines.append(f"{label},{name},{_format_cell(value)}")
        return "\n".join(lines) + "\n"

    def write_json(self, path, include_replications: bool = False) -> None:
        text = self.to_json(include_replications) + "\n"
        Path(path).write_text(text, encoding="utf-8")

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv_text(), encoding="utf-8")


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _normalize_schemes(schemes) -> list:
    if isinstance(schemes, Mapping):
        items = [(str(label), sch) for label, sch in schemes.items()]
    else:
        items = []
        for entry in schemes:
            if isinstance(entry, Scheme):
                items.append((entry.kind, entry))
            else:
                label, sch = entry
                items.append((str(label), sch))
    if not items:
        raise ValueError("at least one scheme is required")
    seen: dict = {}
    out = []
    for label, sch in items:
        if not isinstance(sch, Scheme):
            raise TypeError(f"expected a Scheme, got {type(sch).__name__}")
        seen[label] = seen.get(label, 0) + 1
        if seen[label] > 1:
            label = f"{label}_{seen[label]}"
        out.append((label, sch))
    return out


def _trim_sorted(values: np.ndarray, trim: float) -> np.ndarray:
    """Sort and drop floor(trim * size) values from each tail."""
    out = np.sort(np.asarray(values, dtype=float))
    k = int(np.floor(trim * out.size))
    if k > 0 and out.size - 2 * k >= 1:
        out = out[k : out.size - k]
    return out


# Statistical failures of a single replication; configuration mistakes
# (a ValueError subclass) still propagate.
_REPLICATION_FAILURES = (
    LinkDomainError,
    NumericError,
    SingularInformationError,
    NuisanceFitError,
    ValueError,
    ArithmeticError,
    np.linalg.LinAlgError,
)

_FAILED_ROW = (np.nan, np.nan, np.nan, np.nan, False, True)


def run_monte_carlo(
    dgp: Dgp,
    schemes,
    reps: int,
    cfg: FitConfig,
    seed: int = 0,
    parallel: bool = False,
    *,
    trim: float = 0.0,
    n_threads: int | None = None,
) -> SimReport:
    """Replicate sampling and fitting; aggregate metrics per scheme.

    ``schemes`` is a mapping of label to Scheme, or a sequence of Schemes
    (labelled by kind) or (label, Scheme) pairs.  Each replication draws one
    dataset, shared by every scheme, from an independent child stream of
    ``seed``; ``cfg`` supplies folds, alpha and solver settings while its
    ``scheme`` and ``fold_seed`` fields are replaced per scheme and
    replication.  A replication that raises a numeric or statistical error,
    or fails to converge, is counted in ``n_failed`` and excluded from the
    aggregates.  ``trim`` drops that fraction of point estimates from each
    tail (floor(trim * successes) per tail) before computing squared bias,
    variance and MSE; coverage always uses all successes and counts
    theta0 in [lo, hi] inclusively.
    """
    if reps < 2:
        raise ValueError("reps must be >= 2")
    if not 0.0 <= trim < 0.5:
        raise ValueError("trim must be in [0, 0.5)")
    pairs = _normalize_schemes(schemes)
    labels = tuple(label for label, _ in pairs)
    spec = dgp.model_spec()

    def one_replication(r: int) -> list:
        data_stream, fit_stream = replication_seed(seed, r).spawn(2)
        data = sample(dgp, data_stream)
        fold_seed = int(fit_stream.generate_state(1, np.uint64)[0])
        rows = []
        for _, sch in pairs:
            rep_cfg = replace(cfg, scheme=sch, fold_seed=fold_seed)
            try:
                report = fit(data, spec, rep_cfg)
            except ConfigurationError:
                raise
            except _REPLICATION_FAILURES:
                rows.append(_FAILED_ROW)
                continue
            if not report.converged or not np.isfinite(report.theta_hat):
                rows.append(_FAILED_ROW)
                continue
            lo, hi = report.ci
            rows.append(
                (
                    report.theta_hat,
                    report.v_hat,
                    lo,
                    hi,
                    bool(lo <= dgp.theta0 <= hi),
                    False,
                )
            )
        return rows

    if parallel:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            results = list(pool.map(one_replication, range(reps)))
    else:
        results = [one_replication(r) for r in range(reps)]

    replications = {}
    for i, label in enumerate(labels):
        rows = [results[r][i] for r in range(reps)]
        columns = list(zip(*rows))
        replications[label] = ReplicationOutcomes(
            theta_hat=np.array(columns[0], dtype=float),
            v_hat=np.array(columns[1], dtype=float),
            ci_lower=np.array(columns[2], dtype=float),
            ci_upper=np.array(columns[3], dtype=float),
            covered=np.array(columns[4], dtype=bool),
            failed=np.array(columns[5], dtype=bool),
        )

    raw_metrics = {}
    for label in labels:
        rec = replications[label]
        ok = ~rec.failed
        n_failed = int(rec.failed.sum())
        if not np.any(ok):
            raw_metrics[label] = (np.nan, np.nan, np.nan, np.nan, n_failed)
            continue
        trimmed = _trim_sorted(rec.theta_hat[ok], trim)
        bias = float(trimmed.mean()) - dgp.theta0
        squared_bias = bias * bias
        variance = float(trimmed.var())
        mse = squared_bias + variance
        coverage = float(rec.covered[ok].mean())
        raw_metrics[label] = (squared_bias, variance, mse, coverage, n_failed)

    unweighted_label = next(
        (label for label, sch in pairs if sch.kind == "unweighted"), None
    )
    mse_unweighted = (
        raw_metrics[unweighted_label][2] if unweighted_label is not None else None
    )

    metrics = {}
    for label in labels:
        squared_bias, variance, mse, coverage, n_failed = raw_metrics[label]
        if mse_unweighted is None:
            ratio = None
        elif mse_unweighted > 0:
            ratio = float(mse / mse_unweighted)
        else:
            ratio = float("nan")
        metrics[label] = SchemeMetrics(
            squared_bias=squared_bias,
            variance=variance,
            mse=mse,
            mse_ratio_to_unweighted=ratio,
            coverage_at_95=coverage,
            n_failed=n_failed,
        )

    return SimReport(
        dgp_kind=dgp.kind,
        n=dgp.n,
        theta0=dgp.theta0,
        reps=reps,
        trim=trim,
        seed=seed,
        labels=labels,
        metrics=metrics,
        replications=replications,
    )


def relative_accuracy(mse_unweighted: float, mse_estimator: float,
                      mse_oracle: float) -> float:
    """Accuracy of an estimator on a 0 (unweighted) to 1 (oracle) MSE scale.

    May exceed 1 or be negative.  Requires mse_unweighted > mse_oracle.
    """
    denominator = mse_unweighted - mse_oracle
    if not denominator > 0:
        raise UndefinedMetricError(
            "relative accuracy needs mse_unweighted > mse_oracle; got "
            f"{mse_unweighted!r} vs {mse_oracle!r}"
        )
    return float((mse_unweighted - mse_estimator) / denominator)
