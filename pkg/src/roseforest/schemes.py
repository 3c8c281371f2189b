"""Estimator schemes: how nuisances and weights are produced.

Five families share one estimating-equation shape.  Each scheme yields
per-observation multipliers ``phi_i`` and a linear-predictor
representation ``u_i(theta) = base(z_i) + theta * (x_i - offset(z_i))``
so the pooled equation is ``sum_i phi_i * epsilon_i(theta) = 0``:

* unweighted:              phi = sum_j (M_j(x) - m_hat_j(z))
* rose:                    phi = sum_j w_j(z) (M_j(x) - m_hat_j(z)) with
                           forest-learned weights
* locally_efficient:       phi = w(z) (x - m_hat_1(z)) with
                           w(z) = 1 / E_hat[psi_1^2 / dpsi_1 | z]
* semiparametric_efficient phi = v_hat(x, z)^{-1} (x - h_hat(z))
* oracle:                  user-injected nuisances and/or weights

Nuisance regressions use the identity-link centered form, so ``base`` is
the regression of Y on Z (identity link) or of g(E_hat[Y|X,Z]) on Z
(general link) and ``offset`` is m_hat_1; the implied confounder function
is f_hat(z) = base(z) - theta * offset(z).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .cart import ForestParams, fit_probability, fit_regression
from .model import (
    Dataset,
    ModelSpec,
    epsilon_values,
    moment_matrix,
)
from .rootfind import feasible_theta0, fisher_root
from .rose import (
    RoseInputs,
    RoseTreeParams,
    clip_weights,
    fit_rose_forest,
    fit_rose_forest_multi,
)

__all__ = [
    "NuisanceFitError",
    "OracleNuisances",
    "Scheme",
    "FittedNuisances",
    "FittedScheme",
    "ConstantWeight",
    "CallableWeight",
    "InverseForestWeight",
    "fit_nuisances",
    "locally_efficient_weights",
    "inverse_regression_weight",
    "efficient_nuisances",
    "fit_scheme",
]

# Floor applied to the conditional variance regression before inversion.
VARIANCE_FLOOR = 1e-6

# Floor applied to inner-regression means before the link is applied in
# the two-stage general-link pipeline (log/sqrt need positive arguments).
INNER_MEAN_FLOOR = 1e-10

SCHEME_KINDS = (
    "unweighted",
    "rose",
    "locally_efficient",
    "semiparametric_efficient",
    "oracle",
)


class NuisanceFitError(RuntimeError):
    """A nuisance regression failed; the message names the nuisance."""


def _seed_int(seed_seq: np.random.SeedSequence) -> int:
    return int(seed_seq.generate_state(1, dtype=np.uint64)[0])


def _named_fit(name: str, fn):
    try:
        return fn()
    except Exception as exc:
        raise NuisanceFitError(f"fitting nuisance {name!r} failed: {exc}") from exc


@dataclass(frozen=True)
class OracleNuisances:
    """Known nuisance functions; f and m are required, v and h optional.

    ``f`` and ``h`` map a z-matrix to per-row values, each entry of ``m``
    maps a z-matrix to per-row moment means, and ``v`` maps (x, z-matrix)
    to per-row conditional variances.
    """

    f: Callable
    m: tuple
    v: Callable | None = None
    h: Callable | None = None


@dataclass(frozen=True)
class Scheme:
    """Recipe for producing nuisances and estimating-equation weights."""

    kind: str
    n_moments: int = 1
    forest_params: ForestParams = field(default_factory=ForestParams)
    rose_params: RoseTreeParams = field(default_factory=RoseTreeParams)
    n_rose_trees: int = 500
    c_split: float = 0.5
    clip_bound: float | None = None
    oracle_weight: Callable | float | None = None
    oracle_nuisances: OracleNuisances | None = None

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise ValueError(f"unknown scheme kind {self.kind!r}")
        if self.n_moments < 1:
            raise ValueError("n_moments must be >= 1")
        if not 0.0 < self.c_split <= 1.0:
            raise ValueError("c_split must be in (0, 1]")
        if self.n_rose_trees < 1:
            raise ValueError("n_rose_trees must be >= 1")

    @classmethod
    def unweighted(cls, n_moments: int = 1, forest_params=None) -> "Scheme":
        return cls(kind="unweighted", n_moments=n_moments,
                   forest_params=forest_params or ForestParams())

    @classmethod
    def rose(
        cls,
        n_moments: int = 1,
        rose_params=None,
        n_trees: int = 500,
        c_split: float = 0.5,
        forest_params=None,
        clip_bound: float | None = None,
    ) -> "Scheme":
        return cls(
            kind="rose",
            n_moments=n_moments,
            rose_params=rose_params or RoseTreeParams(),
            n_rose_trees=n_trees,
            c_split=c_split,
            forest_params=forest_params or ForestParams(),
            clip_bound=clip_bound,
        )

    @classmethod
    def locally_efficient(cls, forest_params=None) -> "Scheme":
        return cls(kind="locally_efficient",
                   forest_params=forest_params or ForestParams())

    @classmethod
    def semiparametric_efficient(cls, forest_params=None) -> "Scheme":
        return cls(kind="semiparametric_efficient",
                   forest_params=forest_params or ForestParams())

    @classmethod
    def oracle(
        cls,
        weight=None,
        nuisances: OracleNuisances | None = None,
        n_moments: int = 1,
        forest_params=None,
    ) -> "Scheme":
        return cls(
            kind="oracle",
            n_moments=n_moments,
            forest_params=forest_params or ForestParams(),
            oracle_weight=weight,
            oracle_nuisances=nuisances,
        )


@dataclass
class FittedNuisances:
    """Evaluable nuisance functions plus fit diagnostics.

    ``base`` and ``offset`` define the linear predictor
    u(theta) = base(z) + theta * (x - offset(z)); ``m_fns`` evaluate the
    conditional moment means m_hat_j(z).
    """

    base_fn: Callable
    offset_fn: Callable
    m_fns: tuple
    v_fn: Callable | None = None
    h_fn: Callable | None = None
    diagnostics: dict = field(default_factory=dict)

    def base(self, zmat) -> np.ndarray:
        return np.asarray(self.base_fn(zmat), dtype=float).ravel()

    def offset(self, zmat) -> np.ndarray:
        return np.asarray(self.offset_fn(zmat), dtype=float).ravel()

    def m_values(self, zmat) -> np.ndarray:
        cols = [np.asarray(fn(zmat), dtype=float).ravel() for fn in self.m_fns]
        return np.column_stack(cols)

    def v(self, x, zmat) -> np.ndarray:
        if self.v_fn is None:
            raise ValueError("v_hat was not fitted for this scheme")
        return np.asarray(self.v_fn(x, zmat), dtype=float).ravel()

    def h(self, zmat) -> np.ndarray:
        if self.h_fn is None:
            raise ValueError("h_hat was not fitted for this scheme")
        return np.asarray(self.h_fn(zmat), dtype=float).ravel()

    def f_hat(self, zmat, theta: float) -> np.ndarray:
        """Implied confounder function f_hat = base - theta * offset."""
        return self.base(zmat) - theta * self.offset(zmat)


def _forest_predictor(forest):
    def predict(zmat):
        return forest.predict(np.atleast_2d(np.asarray(zmat, dtype=float)))

    return predict


def _zero_fn(zmat):
    zmat = np.atleast_2d(np.asarray(zmat, dtype=float))
    return np.zeros(zmat.shape[0])


def fit_nuisances(train: Dataset, spec: ModelSpec, params: ForestParams | None = None,
                  n_threads: int = 1) -> FittedNuisances:
    """Fit the regression nuisances (base, offset, per-moment means) on train.

    Identity link: base is the regression of Y on Z.  General link: base
    is the two-stage regression of g(E_hat[Y|X,Z]) on Z, with the inner
    regression fit on the concatenated (X, Z) design.  Moment means come
    from regressions of M_j(X) on Z, using a probability forest when M_j
    is an indicator.
    """
    params = params or ForestParams()
    children = np.random.SeedSequence(params.seed).spawn(2 + spec.n_moments)
    diagnostics = {}

    if spec.link.name == "identity":
        base_forest = _named_fit(
            "base",
            lambda: fit_regression(
                train.z, train.y,
                params=replace(params, seed=_seed_int(children[0])),
                n_threads=n_threads,
            ),
        )
        diagnostics["base_oob"] = base_forest.oob_error
        base_fn = _forest_predictor(base_forest)
    else:
        design = np.column_stack([train.x, train.z])
        inner_forest = _named_fit(
            "inner_mean",
            lambda: fit_regression(
                design, train.y,
                params=replace(params, seed=_seed_int(children[0])),
                n_threads=n_threads,
            ),
        )
        diagnostics["inner_mean_oob"] = inner_forest.oob_error
        inner_at_train = np.maximum(inner_forest.predict(design), INNER_MEAN_FLOOR)
        link_scale_targets = spec.link.g(inner_at_train)
        base_forest = _named_fit(
            "base",
            lambda: fit_regression(
                train.z, link_scale_targets,
                params=replace(params, seed=_seed_int(children[1])),
                n_threads=n_threads,
            ),
        )
        diagnostics["base_oob"] = base_forest.oob_error
        base_fn = _forest_predictor(base_forest)

    m_fns = []
    for j, moment in enumerate(spec.moments):
        targets = moment.fn(train.x)
        sub = replace(params, seed=_seed_int(children[2 + j]))
        if moment.is_indicator:
            forest = _named_fit(
                f"m_{moment.name}",
                lambda t=targets, p=sub: fit_probability(train.z, t, params=p,
                                                         n_threads=n_threads),
            )
        else:
            forest = _named_fit(
                f"m_{moment.name}",
                lambda t=targets, p=sub: fit_regression(train.z, t, params=p,
                                                        n_threads=n_threads),
            )
        diagnostics[f"m_{moment.name}_oob"] = forest.oob_error
        m_fns.append(_forest_predictor(forest))

    return FittedNuisances(
        base_fn=base_fn,
        offset_fn=m_fns[0],
        m_fns=tuple(m_fns),
        diagnostics=diagnostics,
    )


def oracle_fitted_nuisances(oracle: OracleNuisances) -> FittedNuisances:
    """Wrap known nuisance functions; base is f itself and offset is zero."""

    def wrap_z(fn):
        def call(zmat):
            zmat = np.atleast_2d(np.asarray(zmat, dtype=float))
            return np.broadcast_to(
                np.asarray(fn(zmat), dtype=float), (zmat.shape[0],)
            ).copy()

        return call

    v_fn = None
    if oracle.v is not None:
        def v_fn(x, zmat, _v=oracle.v):
            zmat = np.atleast_2d(np.asarray(zmat, dtype=float))
            return np.asarray(_v(np.asarray(x, dtype=float), zmat), dtype=float)

    return FittedNuisances(
        base_fn=wrap_z(oracle.f),
        offset_fn=_zero_fn,
        m_fns=tuple(wrap_z(fn) for fn in oracle.m),
        v_fn=v_fn,
        h_fn=wrap_z(oracle.h) if oracle.h is not None else None,
        diagnostics={"oracle": True},
    )


# ------------------------------------------------------------------ weights


@dataclass
class ConstantWeight:
    """Weight identically equal to ``value`` for every moment."""

    value: float = 1.0
    n_moments: int = 1

    def evaluate(self, zmat) -> np.ndarray:
        zmat = np.atleast_2d(np.asarray(zmat, dtype=float))
        return np.full((zmat.shape[0], self.n_moments), float(self.value))


@dataclass
class CallableWeight:
    """Adapter turning a plain callable z -> weights into a WeightFunction."""

    fn: Callable

    def evaluate(self, zmat) -> np.ndarray:
        zmat = np.atleast_2d(np.asarray(zmat, dtype=float))
        out = np.asarray(self.fn(zmat), dtype=float)
        if out.ndim == 0:
            out = np.full(zmat.shape[0], float(out))
        if out.ndim == 1:
            out = out[:, None]
        return out


@dataclass
class InverseForestWeight:
    """w(z) = 1 / forest prediction, guarded against tiny denominators."""

    forest: object
    eps_den: float

    def evaluate(self, zmat) -> np.ndarray:
        zmat = np.atleast_2d(np.asarray(zmat, dtype=float))
        pred = self.forest.predict(zmat)
        sign = np.where(pred < 0, -1.0, 1.0)
        small = np.abs(pred) < self.eps_den
        out = np.where(small, sign / self.eps_den, 1.0 / np.where(small, 1.0, pred))
        return out[:, None]


def inverse_regression_weight(zmat, targets, params: ForestParams | None = None,
                              sample_weights=None, n_threads: int = 1) -> InverseForestWeight:
    """Regress targets on z and return the guarded reciprocal as a weight."""
    targets = np.asarray(targets, dtype=float)
    forest = fit_regression(zmat, targets, weights=sample_weights, params=params,
                            n_threads=n_threads)
    scale = float(np.mean(np.abs(targets)))
    if scale <= 0:
        raise ValueError("all regression targets are zero; no weight is defined")
    return InverseForestWeight(forest=forest, eps_den=1e-12 * scale)


def _psi_pieces(train: Dataset, spec: ModelSpec, nuis: FittedNuisances,
                theta: float, n_moments: int):
    """psi_j and dpsi_j values at theta for the first n_moments moments.

    The linear predictor is base + theta * (x - offset), so the theta
    derivative of the implemented psi_j is -(M_j - m_hat_j) * (x - offset);
    with oracle nuisances offset is zero and this is the plain -(M_j - m_j) x.
    """
    base = nuis.base(train.z)
    offset = nuis.offset(train.z)
    f_vals = base - theta * offset
    eps = epsilon_values(spec.link, train.y, train.x, theta, f_vals)
    mm = moment_matrix(spec, train.x)[:, :n_moments]
    m_hat = nuis.m_values(train.z)[:, :n_moments]
    diff = mm - m_hat
    psi = diff * eps[:, None]
    dpsi = -diff * (train.x - offset)[:, None]
    return psi, dpsi


def locally_efficient_weights(train: Dataset, nuis: FittedNuisances,
                              theta_pilot: float, spec: ModelSpec,
                              params: ForestParams | None = None,
                              n_threads: int = 1) -> InverseForestWeight:
    """Weight 1 / E_hat[psi_1^2 / dpsi_1 | Z] from a single regression."""
    if spec.n_moments != 1:
        raise ValueError("locally efficient weights are defined for J=1 models")
    psi, dpsi = _psi_pieces(train, spec, nuis, theta_pilot, 1)
    psi1 = psi[:, 0]
    dpsi1 = dpsi[:, 0]
    # rows with numerically zero dpsi cannot contribute a finite ratio
    good = np.abs(dpsi1) >= 1e-12 * float(np.mean(np.abs(dpsi1)))
    if not np.any(good):
        raise ValueError("all dpsi_1 values are numerically zero")
    targets = np.zeros_like(psi1)
    targets[good] = psi1[good] ** 2 / dpsi1[good]
    return _named_fit(
        "locally_efficient_weight",
        lambda: inverse_regression_weight(
            train.z, targets, params=params,
            sample_weights=good.astype(float), n_threads=n_threads,
        ),
    )


def efficient_nuisances(train: Dataset, nuis: FittedNuisances, theta_pilot: float,
                        spec: ModelSpec, params: ForestParams | None = None,
                        n_threads: int = 1) -> FittedNuisances:
    """Add v_hat and h_hat for the semiparametric efficient score.

    v_hat regresses squared link-scale residuals on the joint (X, Z)
    design and is floored at 1e-6.  h_hat is the ratio of regressions of
    v_hat^{-p} and v_hat^{-p} X on Z, with p = 1 for the identity link
    and p = 2 otherwise.
    """
    params = params or ForestParams()
    children = np.random.SeedSequence(params.seed).spawn(3)
    base = nuis.base(train.z)
    offset = nuis.offset(train.z)
    f_vals = base - theta_pilot * offset
    eps = epsilon_values(spec.link, train.y, train.x, theta_pilot, f_vals)
    design = np.column_stack([train.x, train.z])
    v_forest = _named_fit(
        "v",
        lambda: fit_regression(design, eps**2,
                               params=replace(params, seed=_seed_int(children[0])),
                               n_threads=n_threads),
    )

    def v_fn(x, zmat):
        zmat = np.atleast_2d(np.asarray(zmat, dtype=float))
        d = np.column_stack([np.asarray(x, dtype=float), zmat])
        return np.maximum(v_forest.predict(d), VARIANCE_FLOOR)

    power = 1 if spec.link.name == "identity" else 2
    inv_v = v_fn(train.x, train.z) ** (-power)
    den_forest = _named_fit(
        "h_denominator",
        lambda: fit_regression(train.z, inv_v,
                               params=replace(params, seed=_seed_int(children[1])),
                               n_threads=n_threads),
    )
    num_forest = _named_fit(
        "h_numerator",
        lambda: fit_regression(train.z, inv_v * train.x,
                               params=replace(params, seed=_seed_int(children[2])),
                               n_threads=n_threads),
    )

    def h_fn(zmat):
        zmat = np.atleast_2d(np.asarray(zmat, dtype=float))
        den = den_forest.predict(zmat)
        # inv_v targets are positive, so predictions are positive averages
        den = np.maximum(den, 1e-12)
        return num_forest.predict(zmat) / den

    diagnostics = dict(nuis.diagnostics)
    diagnostics["v_oob"] = v_forest.oob_error
    return FittedNuisances(
        base_fn=nuis.base_fn,
        offset_fn=nuis.offset_fn,
        m_fns=nuis.m_fns,
        v_fn=v_fn,
        h_fn=h_fn,
        diagnostics=diagnostics,
    )


# ------------------------------------------------------------------- scheme


@dataclass
class FittedScheme:
    """A scheme fitted on one training sample, ready to score held-out rows."""

    spec: ModelSpec
    scheme: Scheme
    nuisances: FittedNuisances
    weight: object | None
    theta_pilot: float
    diagnostics: dict = field(default_factory=dict)

    def predictor_parts(self, zmat):
        """(base, offset) arrays for the linear predictor at query rows."""
        return self.nuisances.base(zmat), self.nuisances.offset(zmat)

    def pilot_phi(self, x, zmat) -> np.ndarray:
        """Multipliers of the unweighted (pilot) equation: sum_j (M_j - m_hat_j)."""
        mm = moment_matrix(self.spec, x)[:, : self.scheme.n_moments]
        m_hat = self.nuisances.m_values(zmat)[:, : self.scheme.n_moments]
        return (mm - m_hat).sum(axis=1)

    def phi(self, x, zmat) -> np.ndarray:
        """Scheme multipliers phi_i for the pooled estimating equation."""
        x = np.asarray(x, dtype=float).ravel()
        if self.scheme.kind == "semiparametric_efficient":
            return (x - self.nuisances.h(zmat)) / self.nuisances.v(x, zmat)
        mm = moment_matrix(self.spec, x)[:, : self.scheme.n_moments]
        m_hat = self.nuisances.m_values(zmat)[:, : self.scheme.n_moments]
        diff = mm - m_hat
        if self.weight is None:
            return diff.sum(axis=1)
        w = self.weight.evaluate(zmat)
        if w.shape[1] == 1 and diff.shape[1] > 1:
            w = np.broadcast_to(w, diff.shape)
        return (w * diff).sum(axis=1)


def _pilot_theta(train: Dataset, spec: ModelSpec, nuis: FittedNuisances,
                 n_moments: int) -> float:
    base = nuis.base(train.z)
    offset = nuis.offset(train.z)
    mm = moment_matrix(spec, train.x)[:, :n_moments]
    m_hat = nuis.m_values(train.z)[:, :n_moments]
    phi = (mm - m_hat).sum(axis=1)
    d_sum = float(np.sum(-phi * (train.x - offset)))

    def psi_terms(theta):
        f_vals = base - theta * offset
        eps = epsilon_values(spec.link, train.y, train.x, theta, f_vals)
        return float(np.sum(phi * eps)), d_sum

    theta0 = feasible_theta0(spec.link, base, offset, train.x, spec.theta_space)
    theta, _, _ = fisher_root(
        psi_terms, theta0, max_iters=100, tol=1e-10, n_obs=train.n,
        theta_space=spec.theta_space,
    )
    return theta


def _resolve_pilot_theta(train, spec, nuis, n_moments, theta):
    """Pilot theta feasible on this sample; refit start when out of domain."""
    try:
        base = nuis.base(train.z)
        offset = nuis.offset(train.z)
        epsilon_values(spec.link, train.y, train.x, theta, base - theta * offset)
        return theta
    except Exception:
        return feasible_theta0(
            spec.link, nuis.base(train.z), nuis.offset(train.z), train.x,
            spec.theta_space,
        )


def fit_scheme(train: Dataset, spec: ModelSpec, scheme: Scheme, seed=0,
               n_threads: int = 1, strict_honest: bool = False) -> FittedScheme:
    """Fit a scheme's nuisances, pilot theta and weights on one training sample.

    With ``strict_honest=True`` the sample is halved: nuisances and the
    pilot use the first half, weight fitting the second.
    """
    if scheme.n_moments > spec.n_moments:
        raise ValueError(
            f"scheme uses {scheme.n_moments} moments but the model defines {spec.n_moments}"
        )
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    c_nuis, c_weight, c_split = ss.spawn(3)

    if strict_honest:
        if train.n < 4:
            raise ValueError("strict honest fitting needs at least 4 training rows")
        perm = np.random.default_rng(c_split).permutation(train.n)
        half = train.n // 2
        nuis_part = train.subset(perm[:half])
        weight_part = train.subset(perm[half:])
    else:
        nuis_part = train
        weight_part = train

    if scheme.oracle_nuisances is not None:
        nuis = oracle_fitted_nuisances(scheme.oracle_nuisances)
    else:
        params = replace(scheme.forest_params, seed=_seed_int(c_nuis))
        nuis = fit_nuisances(nuis_part, spec, params, n_threads=n_threads)

    theta_pilot = _pilot_theta(nuis_part, spec, nuis, scheme.n_moments)
    diagnostics = dict(nuis.diagnostics)
    diagnostics["theta_pilot"] = theta_pilot

    weight = None
    if scheme.kind == "rose":
        theta_use = _resolve_pilot_theta(
            weight_part, spec, nuis, scheme.n_moments, theta_pilot
        )
        if theta_use != theta_pilot:
            diagnostics["rose_theta_adjusted"] = theta_use
        psi, dpsi = _psi_pieces(weight_part, spec, nuis, theta_use, scheme.n_moments)
        inputs = RoseInputs(zmat=weight_part.z, psi=psi, dpsi=dpsi)
        rose_seed = _seed_int(c_weight)
        if scheme.n_moments == 1:
            weight = fit_rose_forest(
                inputs, scheme.rose_params, n_trees=scheme.n_rose_trees,
                c_split=scheme.c_split, seed=rose_seed, n_threads=n_threads,
            )
        else:
            weight = fit_rose_forest_multi(
                inputs, scheme.rose_params, n_trees=scheme.n_rose_trees,
                c_split=scheme.c_split, seed=rose_seed,
            )
            diagnostics["rose_groups_skipped"] = weight.n_skipped
        if scheme.clip_bound is not None:
            weight = clip_weights(weight, scheme.clip_bound)
    elif scheme.kind == "locally_efficient":
        params = replace(scheme.forest_params, seed=_seed_int(c_weight))
        weight = locally_efficient_weights(
            weight_part, nuis, theta_pilot, spec, params, n_threads=n_threads
        )
    elif scheme.kind == "semiparametric_efficient":
        params = replace(scheme.forest_params, seed=_seed_int(c_weight))
        nuis = efficient_nuisances(
            weight_part, nuis, theta_pilot, spec, params, n_threads=n_threads
        )
        diagnostics.update(
            {k: v for k, v in nuis.diagnostics.items() if k not in diagnostics}
        )
    elif scheme.kind == "oracle" and scheme.oracle_weight is not None:
        ow = scheme.oracle_weight
        if callable(ow):
            weight = CallableWeight(ow)
        else:
            weight = ConstantWeight(float(ow), n_moments=scheme.n_moments)

    return FittedScheme(
        spec=spec,
        scheme=scheme,
        nuisances=nuis,
        weight=weight,
        theta_pilot=theta_pilot,
        diagnostics=diagnostics,
    )
