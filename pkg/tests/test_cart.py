"""CART forest: split exactness, weighting, honesty, OOB tuning, determinism.

Hand-derived expectations come from running CART by hand on tiny inputs
(single-split enumerations and weighted means), independent of the library
implementation.
"""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest

from roseforest._tree import Tree
from roseforest.cart import (
    ForestParams,
    RegressionForest,
    fit_probability,
    fit_regression,
    predict,
    tune_by_oob,
)


def col(*vals):
    return np.asarray(vals, dtype=float)[:, None]


SINGLE_TREE = ForestParams(n_trees=1, mtry=1, min_node_size=1, sample_fraction=1.0, replace=False, seed=0)


class TestFitRegression:
    def test_constant_targets_predict_constant_exactly(self):
        z = col(0.0, 1.0, 2.0, 3.0, 4.0, 5.0)
        forest = fit_regression(z, np.full(6, 0.7), params=replace(SINGLE_TREE, n_trees=3))
        grid = col(-1.0, 0.5, 99.0)
        assert np.array_equal(forest.predict(grid), np.full(3, 0.7))

    def test_hand_cart_single_split(self):
        # oracle: only candidate threshold 0.5; left mean 0, right mean 10
        z = col(0.0, 0.0, 1.0, 1.0)
        y = np.array([0.0, 0.0, 10.0, 10.0])
        forest = fit_regression(z, y, params=SINGLE_TREE)
        assert np.array_equal(forest.predict(z), y)

    def test_zero_weight_rows_are_ignored(self):
        # rows 2,3 have weight 0: training data is z=0 with targets 2 and 4,
        # weights 1 and 3 -> single leaf at the weighted mean (2 + 3*4)/4 = 3.5
        z = col(0.0, 0.0, 1.0, 1.0)
        y = np.array([2.0, 4.0, 100.0, 200.0])
        w = np.array([1.0, 3.0, 0.0, 0.0])
        forest = fit_regression(z, y, weights=w, params=SINGLE_TREE)
        assert np.array_equal(forest.predict(col(0.0, 1.0)), np.array([3.5, 3.5]))

    def test_weighted_split_left_region_weighted_mean(self):
        z = col(0.0, 0.0, 1.0, 1.0)
        y = np.array([2.0, 4.0, 9.0, 9.0])
        w = np.array([1.0, 3.0, 2.0, 5.0])
        forest = fit_regression(z, y, weights=w, params=SINGLE_TREE)
        assert forest.predict(col(0.0))[0] == pytest.approx(3.5, abs=0)
        assert forest.predict(col(1.0))[0] == pytest.approx(9.0, abs=0)

    def test_min_node_size_n_gives_global_weighted_mean(self):
        rng = np.random.default_rng(1)
        n = 50
        z = rng.normal(size=(n, 2))
        y = rng.normal(size=n)
        w = rng.uniform(0.5, 2.0, size=n)
        forest = fit_regression(
            z, y, weights=w, params=ForestParams(n_trees=4, min_node_size=n, sample_fraction=1.0, replace=False)
        )
        expected = float(np.dot(w, y) / w.sum())
        assert forest.predict(rng.normal(size=(5, 2))) == pytest.approx(np.full(5, expected), rel=1e-12)

    def test_single_tree_interpolates_distinct_points(self):
        rng = np.random.default_rng(7)
        z = rng.permutation(20).astype(float)[:, None]
        y = rng.integers(-5, 5, size=20).astype(float)
        forest = fit_regression(z, y, params=SINGLE_TREE)
        assert np.array_equal(forest.predict(z), y)

    def test_oversized_min_node_size_gives_root_only_forest(self):
        # n below 2*min_node_size cannot split: valid constant forest
        forest = fit_regression(col(0.0, 1.0, 2.0), np.array([1.0, 2.0, 6.0]), params=ForestParams(n_trees=2, min_node_size=10, sample_fraction=1.0, replace=False))
        assert np.array_equal(forest.predict(col(-5.0, 5.0)), np.full(2, 3.0))

    def test_requires_two_rows(self):
        with pytest.raises(ValueError, match="at least 2"):
            fit_regression(col(0.0), np.zeros(1), params=ForestParams(min_node_size=1))

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            fit_regression(col(0.0, np.nan), np.zeros(2), params=replace(SINGLE_TREE, min_node_size=1))

    def test_rejects_negative_weights(self):
        with pytest.raises(ValueError):
            fit_regression(col(0.0, 1.0), np.zeros(2), weights=np.array([1.0, -1.0]), params=SINGLE_TREE)


class TestPredict:
    def _stump(self, value):
        tree = Tree(
            feature=np.array([-1], dtype=np.int32),
            threshold=np.zeros(1),
            left=np.array([-1], dtype=np.int32),
            right=np.array([-1], dtype=np.int32),
        )
        tree.value = np.array([value])
        return tree

    def test_mean_over_trees(self):
        forest = RegressionForest(
            trees=[self._stump(1.0), self._stump(3.0)], d=1, oob_error=float("nan"), params=ForestParams()
        )
        assert predict(forest, [0.0]) == 2.0

    def test_identical_trees_match_single_tree(self):
        forest = RegressionForest(trees=[self._stump(5.0)] * 7, d=1, oob_error=float("nan"), params=ForestParams())
        assert predict(forest, [123.0]) == 5.0

    def test_split_routing(self):
        tree = Tree(
            feature=np.array([0, -1, -1], dtype=np.int32),
            threshold=np.array([0.5, 0.0, 0.0]),
            left=np.array([1, -1, -1], dtype=np.int32),
            right=np.array([2, -1, -1], dtype=np.int32),
        )
        tree.value = np.array([0.0, -7.0, 7.0])
        forest = RegressionForest(trees=[tree], d=1, oob_error=float("nan"), params=ForestParams())
        assert predict(forest, [0.0]) == -7.0
        assert predict(forest, [0.5]) == -7.0  # ties route left
        assert predict(forest, [0.6]) == 7.0

    def test_feature_count_checked(self):
        forest = RegressionForest(trees=[self._stump(0.0)], d=2, oob_error=float("nan"), params=ForestParams())
        with pytest.raises(ValueError, match="features"):
            forest.predict(np.zeros((1, 3)))


class TestHonest:
    def test_honest_leaf_values_from_eval_half(self):
        # strong exact signal: both halves see both regions, so honest
        # predictions equal the regional constants exactly
        rng = np.random.default_rng(5)
        z = np.where(np.arange(100) % 2 == 0, -1.0, 1.0)[:, None]
        y = np.where(z[:, 0] > 0, 5.0, 1.0)
        forest = fit_regression(
            z, y, params=ForestParams(n_trees=5, mtry=1, min_node_size=5, honest=True, sample_fraction=1.0, replace=False, seed=2)
        )
        assert np.array_equal(forest.predict(col(-1.0, 1.0)), np.array([1.0, 5.0]))

    def test_honest_sample_size_guard(self):
        z = np.arange(10, dtype=float)[:, None]
        with pytest.raises(ValueError, match="honest"):
            fit_regression(
                z, np.zeros(10), params=ForestParams(n_trees=1, min_node_size=4, honest=True, sample_fraction=0.5)
            )


class TestProbability:
    def test_all_true_labels_clamp(self):
        z = np.arange(20, dtype=float)[:, None]
        forest = fit_probability(z, np.ones(20, dtype=bool), params=replace(SINGLE_TREE, min_node_size=5))
        assert np.array_equal(forest.predict(col(3.0, 11.0)), np.full(2, 1.0 - 1e-6))

    def test_perfect_separation_hits_clamp_bounds(self):
        z = np.arange(10, dtype=float)[:, None]
        labels = z[:, 0] >= 5
        forest = fit_probability(z, labels, params=SINGLE_TREE)
        out = forest.predict(col(0.0, 9.0))
        assert out[0] == 1e-6
        assert out[1] == 1.0 - 1e-6

    def test_balanced_noise_labels_near_half(self):
        rng = np.random.default_rng(11)
        n = 1000
        z = rng.normal(size=(n, 2))
        labels = rng.random(n) < 0.5
        forest = fit_probability(
            z, labels, params=ForestParams(n_trees=300, min_node_size=200, sample_fraction=0.5, seed=3)
        )
        preds = forest.predict(rng.normal(size=(50, 2)))
        assert np.all(np.abs(preds - labels.mean()) < 0.1)

    def test_rejects_nonbinary_labels(self):
        with pytest.raises(ValueError, match="labels"):
            fit_probability(col(0.0, 1.0), np.array([0.0, 0.5]), params=SINGLE_TREE)


class TestTuneByOob:
    def test_singleton_grid(self):
        z = np.arange(40, dtype=float)[:, None]
        y = z[:, 0]
        only = ForestParams(n_trees=5, min_node_size=2, sample_fraction=0.5, seed=1)
        assert tune_by_oob(z, y, [only]) is only

    def test_flexible_beats_depth_zero_on_linear_signal(self):
        rng = np.random.default_rng(9)
        n = 500
        z = rng.uniform(-1, 1, size=(n, 1))
        y = 2.0 * z[:, 0] + 0.1 * rng.normal(size=n)
        flexible = ForestParams(n_trees=30, min_node_size=2, sample_fraction=0.7, seed=4)
        stump = ForestParams(n_trees=30, max_depth=0, sample_fraction=0.7, seed=4)
        assert tune_by_oob(z, y, [stump, flexible]) is flexible

    def test_tie_keeps_earliest(self):
        z = np.arange(30, dtype=float)[:, None]
        y = np.zeros(30)  # constant target: every configuration has oob_error 0
        a = ForestParams(n_trees=3, min_node_size=2, sample_fraction=0.5, seed=1)
        b = ForestParams(n_trees=3, min_node_size=4, sample_fraction=0.5, seed=1)
        assert tune_by_oob(z, y, [a, b]) is a

    def test_empty_grid_rejected(self):
        with pytest.raises(ValueError):
            tune_by_oob(np.zeros((4, 1)), np.zeros(4), [])


class TestInvariants:
    def test_permutation_invariance(self):
        # integer-valued inputs keep sums exact in any accumulation order
        rng = np.random.default_rng(21)
        n = 60
        z = rng.integers(0, 8, size=(n, 3)).astype(float)
        y = rng.integers(-10, 10, size=n).astype(float)
        params = ForestParams(n_trees=3, mtry=3, min_node_size=2, sample_fraction=1.0, replace=False, seed=5)
        queries = rng.integers(0, 8, size=(20, 3)).astype(float)
        base = fit_regression(z, y, params=params).predict(queries)
        perm = rng.permutation(n)
        permuted = fit_regression(z[perm], y[perm], params=params).predict(queries)
        assert np.array_equal(base, permuted)

    def test_predictions_within_target_range(self):
        rng = np.random.default_rng(33)
        n = 300
        z = rng.normal(size=(n, 4))
        y = rng.normal(size=n) * 10
        forest = fit_regression(z, y, params=ForestParams(n_trees=20, min_node_size=3, sample_fraction=0.6, seed=6))
        preds = forest.predict(rng.normal(size=(200, 4)))
        assert preds.min() >= y.min() - 1e-10
        assert preds.max() <= y.max() + 1e-10

    def test_same_seed_reproducible_and_thread_invariant(self):
        rng = np.random.default_rng(41)
        z = rng.normal(size=(120, 3))
        y = rng.normal(size=120)
        params = ForestParams(n_trees=8, min_node_size=4, sample_fraction=0.8, seed=77)
        q = rng.normal(size=(30, 3))
        serial = fit_regression(z, y, params=params, n_threads=1)
        threaded = fit_regression(z, y, params=params, n_threads=3)
        again = fit_regression(z, y, params=params, n_threads=1)
        assert np.array_equal(serial.predict(q), threaded.predict(q))
        assert np.array_equal(serial.predict(q), again.predict(q))
        assert serial.oob_error == threaded.oob_error

    def test_different_seeds_differ(self):
        rng = np.random.default_rng(43)
        z = rng.normal(size=(200, 2))
        y = rng.normal(size=200)
        q = rng.normal(size=(10, 2))
        p1 = fit_regression(z, y, params=ForestParams(n_trees=5, min_node_size=5, sample_fraction=0.5, seed=1)).predict(q)
        p2 = fit_regression(z, y, params=ForestParams(n_trees=5, min_node_size=5, sample_fraction=0.5, seed=2)).predict(q)
        assert not np.array_equal(p1, p2)


class TestOob:
    def test_oob_nan_when_every_row_always_in_bag(self):
        z = np.arange(30, dtype=float)[:, None]
        forest = fit_regression(z, z[:, 0], params=replace(SINGLE_TREE, n_trees=4))
        assert math.isnan(forest.oob_error)

    def test_oob_available_with_bootstrap(self):
        rng = np.random.default_rng(2)
        z = rng.normal(size=(200, 2))
        y = z[:, 0]
        forest = fit_regression(z, y, params=ForestParams(n_trees=20, min_node_size=5, sample_fraction=1.0, seed=3))
        assert math.isfinite(forest.oob_error)
        assert forest.oob_error < np.var(y)  # strong signal: forest beats the mean

    def test_mtry_default_is_ceil_sqrt_d(self):
        rng = np.random.default_rng(4)
        z = rng.normal(size=(40, 10))
        forest = fit_regression(z, rng.normal(size=40), params=ForestParams(n_trees=2, min_node_size=10, seed=0))
        assert forest.mtry_used == 4
