"""Cross-fitted estimation of theta with sandwich variance.

The pipeline partitions the sample into K folds, fits each scheme's
nuisances and weights on the complement of every fold, pools the held-out
estimating-equation contributions, and solves the pooled equation by
Fisher scoring.  The variance estimate is the sandwich

    V_hat = n * (sum dpsi)^{-2} * sum psi^2

over the pooled held-out evaluations, with the two-sided normal interval
theta_hat -/+ n^{-1/2} V_hat^{1/2} Phi^{-1}(1 - alpha/2).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace as _dc_replace
from statistics import NormalDist

import numpy as np

from .model import Dataset, ModelSpec, epsilon_values
from .rootfind import SingularInformationError, feasible_theta0, fisher_root
from .rose import empirical_sandwich_loss
from .schemes import Scheme, _psi_pieces, _resolve_pilot_theta, fit_scheme

__all__ = [
    "ConfigurationError",
    "FitConfig",
    "FoldReport",
    "ThetaReport",
    "solve_theta",
    "fit",
    "tune_rose_depth",
    "normal_quantile",
]


class ConfigurationError(ValueError):
    """The data and configuration are incompatible."""


def normal_quantile(p: float) -> float:
    """Standard normal quantile Phi^{-1}(p)."""
    return NormalDist().inv_cdf(p)


@dataclass(frozen=True)
class FitConfig:
    """Cross-fitting and root-finding controls for one estimation run."""

    scheme: Scheme
    k_folds: int = 10
    alpha: float = 0.05
    max_fisher_iters: int = 100
    fisher_tol: float = 1e-10
    fold_seed: int = 0
    strict_honest: bool = False
    n_threads: int = 1

    def __post_init__(self):
        if self.k_folds < 2:
            raise ValueError("k_folds must be >= 2")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must be in (0, 1)")
        if self.max_fisher_iters < 1:
            raise ValueError("max_fisher_iters must be >= 1")
        if self.fisher_tol <= 0:
            raise ValueError("fisher_tol must be positive")


@dataclass
class FoldReport:
    """Per-fold pilot estimate and nuisance diagnostics."""

    fold: int
    theta_pilot: float
    diagnostics: dict = field(default_factory=dict)


@dataclass
class ThetaReport:
    """Final estimate, sandwich variance, interval and per-fold details."""

    theta_hat: float
    v_hat: float
    ci: tuple
    per_fold: list
    iterations: int
    converged: bool
    n_obs: int
    alpha: float
    scheme_kind: str


def solve_theta(psi_terms, theta0: float, cfg: FitConfig, n_obs: int = 1,
                theta_space=(-np.inf, np.inf)):
    """Fisher scoring on sums returned by ``psi_terms(theta) -> (S, D)``.

    Returns (theta_hat, iterations, converged) with convergence measured
    as |S| / n_obs <= cfg.fisher_tol.
    """
    return fisher_root(
        psi_terms,
        theta0,
        max_iters=cfg.max_fisher_iters,
        tol=cfg.fisher_tol,
        n_obs=n_obs,
        theta_space=theta_space,
    )


def fold_partition(n: int, k_folds: int, fold_seed: int) -> list:
    """Deterministic near-equal partition; first n mod K folds get the extra row."""
    perm = np.random.default_rng(np.random.SeedSequence(fold_seed)).permutation(n)
    base = n // k_folds
    extra = n % k_folds
    folds = []
    start = 0
    for k in range(k_folds):
        size = base + (1 if k < extra else 0)
        folds.append(np.sort(perm[start : start + size]))
        start += size
    return folds


def _fit_one_fold(data, spec, cfg, fold_rows, train_rows, seed):
    train = data.subset(train_rows)
    fitted = fit_scheme(
        train, spec, cfg.scheme, seed=seed,
        n_threads=1, strict_honest=cfg.strict_honest,
    )
    z_hold = data.z[fold_rows]
    x_hold = data.x[fold_rows]
    phi = fitted.phi(x_hold, z_hold)
    base, offset = fitted.predictor_parts(z_hold)
    return fitted, phi, base, offset


def fit(data: Dataset, spec: ModelSpec, cfg: FitConfig) -> ThetaReport:
    """K-fold cross-fitted estimate of theta under the configured scheme."""
    n = data.n
    if n < 2 * cfg.k_folds:
        raise ConfigurationError(
            f"need n >= {2 * cfg.k_folds} observations for k_folds={cfg.k_folds}, got {n}"
        )
    folds = fold_partition(n, cfg.k_folds, cfg.fold_seed)
    seeds = np.random.SeedSequence(cfg.fold_seed).spawn(cfg.k_folds + 1)[1:]
    all_rows = np.arange(n)

    phi_all = np.empty(n)
    base_all = np.empty(n)
    offset_all = np.empty(n)
    per_fold = []
    pilots = np.empty(cfg.k_folds)

    def run_fold(k):
        fold_rows = folds[k]
        train_rows = np.setdiff1d(all_rows, fold_rows)
        if train_rows.size < 2:
            raise ConfigurationError(
                f"fold {k} leaves {train_rows.size} training rows; need at least 2 "
                f"(n >= {2 * cfg.k_folds} for k_folds={cfg.k_folds})"
            )
        return k, _fit_one_fold(data, spec, cfg, fold_rows, train_rows, seeds[k])

    if cfg.n_threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.n_threads) as pool:
            results = list(pool.map(run_fold, range(cfg.k_folds)))
    else:
        results = [run_fold(k) for k in range(cfg.k_folds)]

    for k, (fitted, phi, base, offset) in results:
        rows = folds[k]
        phi_all[rows] = phi
        base_all[rows] = base
        offset_all[rows] = offset
        pilots[k] = fitted.theta_pilot
        per_fold.append(
            FoldReport(fold=k, theta_pilot=fitted.theta_pilot,
                       diagnostics=fitted.diagnostics)
        )

    # theta-derivative of the implemented psi: the linear predictor is
    # base + theta * (x - offset), so d psi / d theta = -phi * (x - offset)
    d_sum = float(np.sum(-phi_all * (data.x - offset_all)))

    def psi_terms(theta):
        f_vals = base_all - theta * offset_all
        eps = epsilon_values(spec.link, data.y, data.x, theta, f_vals)
        return float(np.sum(phi_all * eps)), d_sum

    theta_start = spec.clip_theta(float(np.mean(pilots)))
    try:
        psi_terms(theta_start)
    except Exception:
        theta_start = feasible_theta0(
            spec.link, base_all, offset_all, data.x, spec.theta_space
        )

    theta_hat, iterations, converged = solve_theta(
        psi_terms, theta_start, cfg, n_obs=n, theta_space=spec.theta_space
    )

    f_vals = base_all - theta_hat * offset_all
    eps = epsilon_values(spec.link, data.y, data.x, theta_hat, f_vals)
    psi_vals = phi_all * eps
    if d_sum == 0.0:
        raise SingularInformationError("pooled score derivative is exactly zero")
    v_hat = float(n * np.sum(psi_vals**2) / d_sum**2)
    half = np.sqrt(v_hat / n) * normal_quantile(1.0 - cfg.alpha / 2.0)
    ci = (theta_hat - half, theta_hat + half)

    return ThetaReport(
        theta_hat=theta_hat,
        v_hat=v_hat,
        ci=ci,
        per_fold=per_fold,
        iterations=iterations,
        converged=converged,
        n_obs=n,
        alpha=cfg.alpha,
        scheme_kind=cfg.scheme.kind,
    )


def tune_rose_depth(data: Dataset, spec: ModelSpec, cfg: FitConfig,
                    depth_grid) -> int:
    """Pick the tree depth minimizing held-out empirical sandwich loss.

    The sample is halved; for each depth the rose scheme is fitted on the
    first half and its weights are scored on the second half at the
    training pilot theta.  Ties go to the smaller depth.
    """
    depth_grid = list(depth_grid)
    if not depth_grid:
        raise ValueError("depth_grid must be nonempty")
    if cfg.scheme.kind != "rose":
        raise ValueError("tune_rose_depth requires a rose scheme")
    split_seed, fit_seed = np.random.SeedSequence(cfg.fold_seed).spawn(2)
    perm = np.random.default_rng(split_seed).permutation(data.n)
    half = data.n // 2
    train = data.subset(perm[:half])
    hold = data.subset(perm[half:])

    best_depth = None
    best_loss = np.inf
    for depth in sorted(depth_grid):
        scheme = _dc_replace(
            cfg.scheme, rose_params=_dc_replace(cfg.scheme.rose_params, max_depth=depth)
        )
        fitted = fit_scheme(
            train, spec, scheme, seed=fit_seed,
            n_threads=cfg.n_threads, strict_honest=cfg.strict_honest,
        )
        theta_use = _resolve_pilot_theta(
            hold, spec, fitted.nuisances, scheme.n_moments, fitted.theta_pilot
        )
        psi, dpsi = _psi_pieces(hold, spec, fitted.nuisances, theta_use,
                                scheme.n_moments)
        w = fitted.weight.evaluate(hold.z)
        loss = empirical_sandwich_loss(w, psi, dpsi)
        if best_depth is None or loss < best_loss:
            best_loss = loss
            best_depth = depth
    return best_depth
