"""From-scratch CART random forest for regression and probability targets.

Used for every nuisance regression in the package: confounder-function
pipelines, conditional moment means m_j, conditional variances, and the
locally efficient weight regression.  Supports per-observation sample
weights, honest fitting (structure and leaf values from disjoint halves of
each tree sample), and out-of-bag tuning.

Determinism: per-tree randomness derives from `ForestParams.seed` through a
spawned seed sequence, so a fitted forest is reproducible and independent
of the thread schedule used to build it.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._tree import assign_leaf_values, grow

__all__ = [
    "ForestParams",
    "RegressionForest",
    "fit_regression",
    "fit_probability",
    "predict",
    "tune_by_oob",
    "PROBABILITY_CLAMP",
]

# Keeps 1/p weights bounded downstream of probability forests.
PROBABILITY_CLAMP = (1e-6, 1.0 - 1e-6)


@dataclass(frozen=True)
class ForestParams:
    """Forest hyperparameters.

    ``mtry=None`` resolves to ceil(sqrt(d)) at fit time.  ``replace=None``
    follows the convention: sample with replacement when
    ``sample_fraction == 1`` and without replacement otherwise; pass an
    explicit boolean to override.
    """

    n_trees: int = 500
    mtry: int | None = None
    min_node_size: int = 10
    max_depth: int | None = None
    sample_fraction: float = 1.0
    honest: bool = False
    seed: int = 0
    replace: bool | None = None

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.mtry is not None and self.mtry < 1:
            raise ValueError("mtry must be >= 1 when given")
        if self.min_node_size < 1:
            raise ValueError("min_node_size must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0 when given")
        if not 0.0 < self.sample_fraction <= 1.0:
            raise ValueError("sample_fraction must be in (0, 1]")
        if self.seed < 0:
            raise ValueError("seed must be a nonnegative integer")

    def resolved_mtry(self, d: int) -> int:
        mtry = self.mtry if self.mtry is not None else math.ceil(math.sqrt(d))
        if mtry > d:
            raise ValueError(f"mtry={mtry} exceeds feature count d={d}")
        return mtry

    def resolved_replace(self) -> bool:
        if self.replace is not None:
            return self.replace
        return self.sample_fraction == 1.0


@dataclass
class RegressionForest:
    """A fitted forest; immutable once built, predict is reentrant."""

    trees: list
    d: int
    oob_error: float
    params: ForestParams
    clamp: tuple | None = None
    mtry_used: int = 0
    scan_ops: int = field(default=0, repr=False)

    def predict(self, zmat) -> np.ndarray:
        zmat = np.atleast_2d(np.asarray(zmat, dtype=float))
        if zmat.shape[1] != self.d:
            raise ValueError(f"query has {zmat.shape[1]} features, forest expects {self.d}")
        if not np.all(np.isfinite(zmat)):
            raise ValueError("query points must be finite")
        acc = np.zeros(zmat.shape[0])
        lo = np.full(zmat.shape[0], np.inf)
        hi = np.full(zmat.shape[0], -np.inf)
        for tree in self.trees:
            vals = tree.value[tree.leaf_ids(zmat)]
            acc += vals
            np.minimum(lo, vals, out=lo)
            np.maximum(hi, vals, out=hi)
        out = acc / len(self.trees)
        # where every tree agrees, return that value exactly (no rounding
        # from the accumulate-divide) so constant forests stay bit-exact
        same = lo == hi
        out[same] = lo[same]
        if self.clamp is not None:
            out = np.clip(out, self.clamp[0], self.clamp[1])
        return out


def _leaf_value_fn(y, w):
    def value_of(rr):
        t = y[rr]
        # exact constant leaves keep constant-target forests bit-exact
        if t.min() == t.max():
            return float(t[0])
        ww = w[rr]
        return float(np.dot(ww, t) / ww.sum())

    return value_of


def _build_tree(zmat, y, w, n, params, mtry, seed, use_replace):
    rng = np.random.default_rng(seed)
    n_samp = max(1, round(params.sample_fraction * n))
    if use_replace:
        rows = rng.integers(0, n, size=n_samp)
    elif n_samp < n:
        rows = rng.choice(n, size=n_samp, replace=False)
    else:
        rows = np.arange(n)
    if params.honest:
        perm = rng.permutation(rows)
        half = n_samp // 2
        struct_rows, value_rows = perm[:half], perm[half:]
    else:
        struct_rows = value_rows = rows
    a = w
    b = w * y
    tree, _ = grow(
        zmat,
        a,
        b,
        struct_rows,
        mtry=mtry,
        min_node_size=params.min_node_size,
        max_depth=params.max_depth,
        alpha=0.0,
        eps_den=0.0,
        rng=rng,
        stop_targets=y,
    )
    tree.value = assign_leaf_values(tree, zmat, value_rows, _leaf_value_fn(y, w))
    return tree, rows


def fit_regression(zmat, targets, weights=None, params: ForestParams | None = None, n_threads: int = 1) -> RegressionForest:
    """Fit a regression forest minimizing per-split weighted RSS.

    Zero-weight rows are dropped before fitting.  ``oob_error`` is the mean
    squared error of out-of-bag predictions; it is NaN when every row is in
    every tree sample (sample_fraction=1 without replacement).
    """
    params = params or ForestParams()
    zmat = np.atleast_2d(np.asarray(zmat, dtype=float))
    y = np.asarray(targets, dtype=float).ravel()
    n, d = zmat.shape
    if y.shape[0] != n:
        raise ValueError("targets length does not match zmat rows")
    if not (np.all(np.isfinite(zmat)) and np.all(np.isfinite(y))):
        raise ValueError("fit_regression requires finite inputs")
    if weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(weights, dtype=float).ravel()
        if w.shape[0] != n or not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("weights must be n finite nonnegative reals")
    keep = w > 0
    zmat, y, w = zmat[keep], y[keep], w[keep]
    n = zmat.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 rows with positive weight, got n={n}")
    if params.honest and params.sample_fraction * n < 2 * params.min_node_size:
        raise ValueError("honest mode requires sample_fraction*n >= 2*min_node_size")
    mtry = params.resolved_mtry(d)
    use_replace = params.resolved_replace()
    seeds = np.random.SeedSequence(params.seed).spawn(params.n_trees)

    def build(t):
        return _build_tree(zmat, y, w, n, params, mtry, seeds[t], use_replace)

    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            built = list(pool.map(build, range(params.n_trees)))
    else:
        built = [build(t) for t in range(params.n_trees)]

    trees = [tree for tree, _ in built]
    oob_error = _oob_error(zmat, y, built, n, use_replace, params.sample_fraction)
    return RegressionForest(
        trees=trees,
        d=d,
        oob_error=oob_error,
        params=params,
        mtry_used=mtry,
        scan_ops=sum(t.scan_ops for t in trees),
    )


def _oob_error(zmat, y, built, n, use_replace, sample_fraction) -> float:
    if not use_replace and sample_fraction == 1.0:
        return float("nan")
    pred_sum = np.zeros(n)
    count = np.zeros(n)
    for tree, rows in built:
        in_bag = np.bincount(rows, minlength=n) > 0
        oob = np.nonzero(~in_bag)[0]
        if oob.size == 0:
            continue
        pred_sum[oob] += tree.value[tree.leaf_ids(zmat[oob])]
        count[oob] += 1
    covered = count > 0
    if not covered.any():
        return float("nan")
    resid = pred_sum[covered] / count[covered] - y[covered]
    return float(np.mean(resid**2))


def fit_probability(zmat, labels, params: ForestParams | None = None, n_threads: int = 1) -> RegressionForest:
    """Probability forest: regression on 0/1 labels, predictions clamped.

    The clamp to [1e-6, 1 - 1e-6] keeps inverse-probability weights finite.
    ``oob_error`` is computed on the unclamped regression scale.
    """
    labels = np.asarray(labels)
    y = labels.astype(float).ravel()
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("labels must be boolean or 0/1")
    forest = fit_regression(zmat, y, weights=None, params=params, n_threads=n_threads)
    forest.clamp = PROBABILITY_CLAMP
    return forest


def predict(forest: RegressionForest, z) -> float:
    """Prediction at a single query point (mean over trees)."""
    z = np.asarray(z, dtype=float).ravel()
    return float(forest.predict(z[None, :])[0])


def tune_by_oob(zmat, targets, grid, weights=None, n_threads: int = 1) -> ForestParams:
    """Pick the grid element with minimal oob_error; ties keep the earliest.

    Grid entries whose configuration produces no out-of-bag rows score +inf.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("tune_by_oob requires a nonempty grid")
    best_params = None
    best_err = math.inf
    for candidate in grid:
        forest = fit_regression(zmat, targets, weights=weights, params=candidate, n_threads=n_threads)
        err = forest.oob_error
        if math.isnan(err):
            err = math.inf
        if err < best_err:
            best_err = err
            best_params = candidate
    return best_params if best_params is not None else grid[0]
