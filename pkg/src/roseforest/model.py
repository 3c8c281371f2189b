"""Model primitives for generalized partially linear models.

A generalized partially linear model (GPLM) ties a scalar parameter of
interest ``theta`` to an unknown confounder function ``f`` through a link
``g``::

    g(E[Y | X, Z]) = X * theta + f(Z)

This module supplies the closed-form links, the model description types,
and the estimating-equation building blocks:

* the link-scale residual ``epsilon = g'(mu) * (y - mu)`` with
  ``mu = g_inv(x * theta + f(z))``,
* the moment residuals ``psi_j = (M_j(x) - m_j(z)) * epsilon`` for a list
  of user-chosen moment transforms ``M_j``,
* the theta-derivatives of ``psi_j``.

Two derivative forms are provided.  The default reparameterized form
``-(M_j(x) - m_j(z)) * x`` exploits the GPLM structure and is free of
``theta`` and ``y``; the literal derivative of ``psi_j`` in ``theta`` is
available behind the ``literal`` flag for cross-checking.

All numeric kernels accept scalars or numpy arrays.  Domain violations
raise :class:`LinkDomainError` rather than clamping: a silent clamp would
bias downstream root finding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "LinkDomainError",
    "NumericError",
    "Link",
    "get_link",
    "MomentFunction",
    "get_moment",
    "ModelSpec",
    "Observation",
    "Dataset",
    "NuisanceValues",
    "link_inverse",
    "epsilon",
    "epsilon_values",
    "moment_matrix",
    "psi",
    "psi_matrix",
    "dpsi_dtheta",
    "dpsi_matrix",
    "dpsi_matrix_literal",
]

# Strict floor for the sqrt-link linear predictor; below it the mean and
# its derivatives are numerically meaningless.
SQRT_PREDICTOR_FLOOR = 1e-10


class LinkDomainError(ValueError):
    """A linear predictor left the admissible domain of the link."""


class NumericError(ArithmeticError):
    """A non-finite intermediate appeared; carries the offending row index."""

    def __init__(self, message: str, index: int = 0):
        super().__init__(f"{message} (observation index {index})")
        self.index = index


def _first_bad_index(values) -> int:
    flat = np.ravel(np.asarray(values))
    bad = ~np.isfinite(flat)
    return int(np.argmax(bad))


def _ensure_finite(values, what: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NumericError(f"non-finite {what}", _first_bad_index(values))


@dataclass(frozen=True)
class Link:
    """A link function with closed-form inverse and derivative.

    Parameters
    ----------
    name : str
        One of ``identity``, ``log``, ``sqrt``.
    g, g_inv, g_prime : callables
        The link, its inverse, and its derivative d g / d mu.
    curvature_ratio : callable
        g''(mu) / g'(mu), used by the literal theta-derivative.
    """

    name: str
    g: Callable
    g_inv: Callable
    g_prime: Callable
    curvature_ratio: Callable

    def check_predictor(self, u) -> None:
        """Raise :class:`LinkDomainError` if ``u`` is outside the domain."""
        if self.name == "sqrt":
            u = np.asarray(u)
            if np.any(u <= SQRT_PREDICTOR_FLOOR):
                bad = int(np.argmax(np.ravel(u) <= SQRT_PREDICTOR_FLOOR))
                raise LinkDomainError(
                    f"sqrt link requires linear predictor > {SQRT_PREDICTOR_FLOOR:g}; "
                    f"violated at observation index {bad}"
                )

    def __repr__(self) -> str:  # keep reports compact
        return f"Link({self.name!r})"


_LINKS = {
    "identity": Link(
        name="identity",
        g=lambda mu: np.asarray(mu, dtype=float),
        g_inv=lambda u: np.asarray(u, dtype=float),
        g_prime=lambda mu: np.ones_like(np.asarray(mu, dtype=float)),
        curvature_ratio=lambda mu: np.zeros_like(np.asarray(mu, dtype=float)),
    ),
    "log": Link(
        name="log",
        g=lambda mu: np.log(mu),
        g_inv=lambda u: np.exp(np.asarray(u, dtype=float)),
        g_prime=lambda mu: 1.0 / np.asarray(mu, dtype=float),
        curvature_ratio=lambda mu: -1.0 / np.asarray(mu, dtype=float),
    ),
    "sqrt": Link(
        name="sqrt",
        g=lambda mu: np.sqrt(mu),
        g_inv=lambda u: np.square(np.asarray(u, dtype=float)),
        g_prime=lambda mu: 0.5 / np.sqrt(np.asarray(mu, dtype=float)),
        curvature_ratio=lambda mu: -0.5 / np.asarray(mu, dtype=float),
    ),
}


def get_link(name: str) -> Link:
    """Look up a link by name (``identity``, ``log`` or ``sqrt``)."""
    try:
        return _LINKS[name]
    except KeyError:
        raise KeyError(f"unknown link {name!r}; available: {sorted(_LINKS)}") from None


@dataclass(frozen=True)
class MomentFunction:
    """A named transform M_j of the exposure used to form psi_j.

    ``is_indicator`` marks 0/1-valued transforms; nuisance fitting uses a
    probability forest for those.
    """

    name: str
    fn: Callable
    is_indicator: bool = False


_MOMENTS = {
    "identity": MomentFunction("identity", lambda x: np.asarray(x, dtype=float)),
    "zero_indicator": MomentFunction(
        "zero_indicator",
        lambda x: (np.asarray(x, dtype=float) == 0.0).astype(float),
        is_indicator=True,
    ),
}


def get_moment(name: str) -> MomentFunction:
    """Look up a built-in moment transform by name."""
    try:
        return _MOMENTS[name]
    except KeyError:
        raise KeyError(f"unknown moment {name!r}; available: {sorted(_MOMENTS)}") from None


@dataclass(frozen=True)
class ModelSpec:
    """Model description: link, moment list, and the parameter interval."""

    link: Link
    moments: tuple = (_MOMENTS["identity"],)
    theta_space: tuple = (-np.inf, np.inf)

    def __post_init__(self):
        if len(self.moments) < 1:
            raise ValueError("ModelSpec requires at least one moment function")
        lo, hi = self.theta_space
        if not lo <= hi:
            raise ValueError(f"theta_space must be ordered, got ({lo}, {hi})")

    @classmethod
    def make(cls, link: str = "identity", moments=("identity",), theta_space=(-np.inf, np.inf)) -> "ModelSpec":
        """Build a spec from link and moment names."""
        return cls(
            link=get_link(link),
            moments=tuple(get_moment(m) if isinstance(m, str) else m for m in moments),
            theta_space=(float(theta_space[0]), float(theta_space[1])),
        )

    @property
    def n_moments(self) -> int:
        return len(self.moments)

    def clip_theta(self, theta: float) -> float:
        lo, hi = self.theta_space
        return float(min(max(theta, lo), hi))


@dataclass(frozen=True)
class Observation:
    """One data point: response y, scalar exposure x, confounder vector z."""

    y: float
    x: float
    z: np.ndarray = field(default_factory=lambda: np.zeros(1))


@dataclass(frozen=True)
class Dataset:
    """An i.i.d. sample: responses y, scalar exposures x, confounders z (n x d)."""

    y: np.ndarray
    x: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        x = np.asarray(self.x, dtype=float).ravel()
        z = np.asarray(self.z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        if z.ndim != 2:
            raise ValueError("z must be a 2-D array")
        if not (y.shape[0] == x.shape[0] == z.shape[0]):
            raise ValueError("y, x, z must be row-aligned")
        if y.shape[0] == 0:
            raise ValueError("dataset must be nonempty")
        for name, arr in (("y", y), ("x", x), ("z", z)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def d(self) -> int:
        return self.z.shape[1]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(y=self.y[rows], x=self.x[rows], z=self.z[rows])


@dataclass(frozen=True)
class NuisanceValues:
    """Nuisance evaluations at one observation's z (and optionally (x, z)).

    ``f`` is the confounder-function value, ``m`` the tuple of conditional
    moment means m_j(z).  ``v`` and ``h`` are the optional efficient-score
    nuisances (conditional residual variance and weighted exposure mean).
    """

    f: float
    m: tuple
    v: float | None = None
    h: float | None = None

    def __post_init__(self):
        if self.v is not None and self.v <= 0:
            raise ValueError("v must be positive when supplied")


def link_inverse(link: Link, u):
    """Mean from the linear predictor: ``mu = g_inv(u)``, domain-checked."""
    link.check_predictor(u)
    return link.g_inv(u)


def epsilon_values(link: Link, y, x, theta: float, f):
    """Vectorized link-scale residual ``g'(mu) * (y - mu)``."""
    y = np.asarray(y, dtype=float)
    _ensure_finite(y, "response")
    u = np.asarray(x, dtype=float) * theta + np.asarray(f, dtype=float)
    _ensure_finite(u, "linear predictor")
    # overflow here is reported as NumericError below, not as a warning
    with np.errstate(over="ignore", invalid="ignore"):
        mu = link_inverse(link, u)
        eps = link.g_prime(mu) * (y - mu)
    _ensure_finite(eps, "epsilon")
    return eps


def epsilon(obs: Observation, theta: float, f_z: float, link: Link) -> float:
    """Link-scale residual for a single observation."""
    return float(epsilon_values(link, obs.y, obs.x, theta, f_z))


def moment_matrix(spec: ModelSpec, x) -> np.ndarray:
    """Evaluate all moment transforms; returns shape (n, J)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return np.column_stack([m.fn(x) for m in spec.moments])


def _check_m(spec: ModelSpec, m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.ndim == 1:
        m = m[None, :] if m.shape[0] == spec.n_moments else m[:, None]
    if m.shape[-1] != spec.n_moments:
        raise ValueError(
            f"nuisance moment count {m.shape[-1]} does not match spec moment count {spec.n_moments}"
        )
    return m


def psi_matrix(spec: ModelSpec, y, x, theta: float, f, m) -> np.ndarray:
    """Moment residuals for all rows; returns shape (n, J)."""
    m = _check_m(spec, m)
    eps = epsilon_values(spec.link, y, x, theta, f)
    return (moment_matrix(spec, x) - m) * np.atleast_1d(eps)[:, None]


def psi(obs: Observation, theta: float, nuis: NuisanceValues, spec: ModelSpec) -> np.ndarray:
    """Moment residual vector (length J) for a single observation."""
    return psi_matrix(spec, obs.y, obs.x, theta, nuis.f, np.asarray(nuis.m, dtype=float)[None, :])[0]


def dpsi_matrix(spec: ModelSpec, x, m) -> np.ndarray:
    """Reparameterized theta-derivative ``-(M_j(x) - m_j) * x``, shape (n, J).

    Free of theta and y for every GPLM link; this is the form used by the
    Fisher-scoring solver and the sandwich variance.
    """
    m = _check_m(spec, m)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return -(moment_matrix(spec, x) - m) * x[:, None]


def dpsi_matrix_literal(spec: ModelSpec, y, x, theta: float, f, m) -> np.ndarray:
    """Literal derivative of psi_j in theta, for cross-checks; shape (n, J).

    Uses d epsilon / d theta = x * (g''/g')(mu) * (y - mu) - x.
    """
    m = _check_m(spec, m)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    u = x * theta + np.atleast_1d(np.asarray(f, dtype=float))
    mu = link_inverse(spec.link, u)
    deps = x * spec.link.curvature_ratio(mu) * (y - mu) - x
    return (moment_matrix(spec, x) - m) * deps[:, None]


def dpsi_dtheta(
    obs: Observation, theta: float, nuis: NuisanceValues, spec: ModelSpec, literal: bool = False
) -> np.ndarray:
    """Theta-derivative of psi (length J) for a single observation."""
    m = np.asarray(nuis.m, dtype=float)[None, :]
    if literal:
        return dpsi_matrix_literal(spec, obs.y, obs.x, theta, nuis.f, m)[0]
    return dpsi_matrix(spec, obs.x, m)[0]
