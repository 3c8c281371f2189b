"""Fisher scoring for the pooled estimating equation.

The estimating equation is sum_i phi_i * epsilon_i(theta) = 0 with the
theta-free score derivative D = sum_i -phi_i * x_i, so the update is

    theta <- theta - D^{-1} * S(theta)

which solves identity-link equations in one step and contracts for the
log and sqrt links.  Steps that leave the link domain are halved until
they land inside it.
"""

from __future__ import annotations

import numpy as np

from .model import SQRT_PREDICTOR_FLOOR, Link, LinkDomainError, NumericError

__all__ = ["SingularInformationError", "fisher_root", "feasible_theta0"]

# Halvings allowed when a step leaves the link domain before giving up.
MAX_DAMPINGS = 60


class SingularInformationError(ArithmeticError):
    """The score derivative is numerically zero; no informative update exists."""


def fisher_root(
    psi_terms,
    theta0: float,
    *,
    max_iters: int = 100,
    tol: float = 1e-10,
    n_obs: int = 1,
    theta_space=(-np.inf, np.inf),
):
    """Solve sum(psi)(theta) = 0 by damped Fisher scoring.

    ``psi_terms(theta)`` returns the pair (sum psi, sum dpsi_dtheta).
    Convergence is |sum psi| / n_obs <= tol.  Returns
    (theta_hat, iterations, converged).
    """
    if n_obs < 1:
        raise ValueError("n_obs must be >= 1")
    lo, hi = theta_space
    theta = float(min(max(theta0, lo), hi))
    s_sum, d_sum = psi_terms(theta)
    iterations = 0
    while abs(s_sum) / n_obs > tol and iterations < max_iters:
        if abs(d_sum) < 1e-12 * n_obs:
            raise SingularInformationError(
                f"score derivative {d_sum!r} is numerically zero for n={n_obs}"
            )
        step = s_sum / d_sum
        accepted = False
        for _ in range(MAX_DAMPINGS):
            candidate = float(min(max(theta - step, lo), hi))
            try:
                s_new, d_new = psi_terms(candidate)
            except (LinkDomainError, NumericError):
                step *= 0.5
                continue
            if not (np.isfinite(s_new) and np.isfinite(d_new)):
                step *= 0.5
                continue
            theta, s_sum, d_sum = candidate, s_new, d_new
            accepted = True
            break
        iterations += 1
        if not accepted:
            return theta, iterations, False
    return theta, iterations, abs(s_sum) / n_obs <= tol


def feasible_theta0(
    link: Link,
    base,
    offset,
    x,
    theta_space=(-np.inf, np.inf),
    default: float = 0.0,
) -> float:
    """Starting value for Fisher scoring.

    Identity and log links start from ``default`` clipped into the theta
    space.  The sqrt link requires every linear predictor
    base + theta * (x - offset) to stay positive, so the start is the
    smallest feasible theta plus a 1e-3 margin (interval midpoint when the
    margin overshoots the upper feasibility bound).
    """
    lo, hi = theta_space
    if link.name != "sqrt":
        return float(min(max(default, lo), hi))
    base = np.asarray(base, dtype=float)
    coef = np.asarray(x, dtype=float) - np.asarray(offset, dtype=float)
    floor = SQRT_PREDICTOR_FLOOR
    tiny = 1e-12
    flat = np.abs(coef) <= tiny
    if np.any(flat & (base <= floor)):
        raise LinkDomainError(
            "sqrt link infeasible: a row has base <= predictor floor and no theta leverage"
        )
    bounds = (floor - base) / np.where(flat, np.inf, coef)
    lower_candidates = bounds[(coef > tiny)]
    upper_candidates = bounds[(coef < -tiny)]
    lower = float(lower_candidates.max()) if lower_candidates.size else -np.inf
    upper = float(upper_candidates.min()) if upper_candidates.size else np.inf
    if lower >= upper:
        raise LinkDomainError(
            "sqrt link infeasible: no theta keeps all linear predictors positive"
        )
    theta0 = lower + 1e-3
    if theta0 >= upper:
        theta0 = 0.5 * (lower + upper)
    if np.isinf(lower) and np.isinf(upper):
        theta0 = default
    elif np.isinf(lower):
        theta0 = min(default, upper - 1e-3)
    return float(min(max(theta0, lo), hi))
