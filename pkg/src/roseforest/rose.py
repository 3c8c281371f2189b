"""ROSE decision trees and forests.

Weight functions w_j(z) for the estimating equation are learned by trees
that split to minimize the empirical sandwich loss

    L(w) = ( sum_i w(z_i)^2 psi_i^2 ) / ( sum_i w(z_i) dpsi_i )^2

over piecewise-constant weights.  For a fixed partition the optimal leaf
weight has the closed form (sum of dpsi) / (sum of psi^2), and the split
criterion is the gain in the reciprocal loss:

    gain = (S_dpsi_L)^2/S_psisq_L + (S_dpsi_R)^2/S_psisq_R - (S_dpsi_P)^2/S_psisq_P

maximized over all midpoint candidates.  Forests aggregate per-leaf
averages tau across trees and evaluate the single-moment weight as a ratio
of sums over trees, never a mean of per-tree ratios.  The multi-moment
variant solves one block linear system F w = a per tree group and averages
the solved leaf weights across groups.

Raw weights are kept as computed (typically negative for GPLM inputs since
dpsi = -(M(x) - m(z)) x); weights enter the estimating equation only up to
a constant factor, so no sign normalization is applied.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from dataclasses import replace as _dc_replace

import numpy as np

from ._tree import Tree, grow, leaf_sums

__all__ = [
    "DegenerateLeafError",
    "RoseInputs",
    "RoseTreeParams",
    "RoseTree",
    "RoseForestWeights",
    "leaf_weight",
    "split_gain",
    "fit_rose_tree",
    "fit_rose_forest",
    "fit_rose_forest_multi",
    "clip_weights",
    "empirical_sandwich_loss",
]

# Relative factor for the degenerate-denominator guard: eps_den =
# EPS_DEN_FACTOR * (mean psi^2 over the root sample).
EPS_DEN_FACTOR = 1e-12


class DegenerateLeafError(ArithmeticError):
    """Leaf psi^2 mass is numerically zero; caller substitutes the parent weight."""


@dataclass(frozen=True)
class RoseInputs:
    """Per-observation inputs: raw psi_j, dpsi_j (both n x J) and z (n x d).

    The single-moment machinery only consumes psi^2, but the multi-moment
    block system needs signed cross-products psi_j psi_j', so raw psi is
    stored and psi_sq derived.
    """

    zmat: np.ndarray
    psi: np.ndarray
    dpsi: np.ndarray
    psi_sq: np.ndarray | None = None

    def __post_init__(self):
        zmat = np.atleast_2d(np.asarray(self.zmat, dtype=float))
        psi = np.asarray(self.psi, dtype=float)
        dpsi = np.asarray(self.dpsi, dtype=float)
        if psi.ndim == 1:
            psi = psi[:, None]
        if dpsi.ndim == 1:
            dpsi = dpsi[:, None]
        if not (zmat.shape[0] == psi.shape[0] == dpsi.shape[0]):
            raise ValueError("zmat, psi, dpsi must be row-aligned")
        if psi.shape != dpsi.shape:
            raise ValueError("psi and dpsi must have the same shape")
        psi_sq = self.psi_sq
        if psi_sq is None:
            psi_sq = psi**2
        else:
            psi_sq = np.asarray(psi_sq, dtype=float)
            if psi_sq.ndim == 1:
                psi_sq = psi_sq[:, None]
            if psi_sq.shape != psi.shape:
                raise ValueError("psi_sq must match psi in shape")
            if np.any(psi_sq < 0):
                raise ValueError("psi_sq must be entrywise nonnegative")
        for name, arr in (("zmat", zmat), ("psi", psi), ("dpsi", dpsi), ("psi_sq", psi_sq)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
        object.__setattr__(self, "zmat", zmat)
        object.__setattr__(self, "psi", psi)
        object.__setattr__(self, "dpsi", dpsi)
        object.__setattr__(self, "psi_sq", psi_sq)

    @classmethod
    def from_psi_sq(cls, zmat, psi_sq, dpsi) -> "RoseInputs":
        """Build single-moment inputs from already-squared psi values.

        Squared values are stored untouched; the sign of psi is irrelevant
        for the single-moment machinery.
        """
        psi_sq = np.asarray(psi_sq, dtype=float)
        if np.any(psi_sq < 0):
            raise ValueError("psi_sq must be entrywise nonnegative")
        return cls(zmat=zmat, psi=np.sqrt(psi_sq), dpsi=dpsi, psi_sq=psi_sq)

    @property
    def n(self) -> int:
        return self.psi.shape[0]

    @property
    def n_moments(self) -> int:
        return self.psi.shape[1]


@dataclass(frozen=True)
class RoseTreeParams:
    """Tree growth controls.

    ``mtry=None`` tries all features.  ``alpha_regularity`` is the minimum
    child fraction of its parent node.  ``honest=True`` requires disjoint
    split/eval index sets.
    """

    max_depth: int | None = None
    min_node_size: int = 10
    mtry: int | None = None
    honest: bool = False
    alpha_regularity: float = 0.05

    def __post_init__(self):
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0 when given")
        if self.min_node_size < 1:
            raise ValueError("min_node_size must be >= 1")
        if self.mtry is not None and self.mtry < 1:
            raise ValueError("mtry must be >= 1 when given")
        if not 0.0 < self.alpha_regularity <= 0.5:
            raise ValueError("alpha_regularity must be in (0, 0.5]")


@dataclass
class RoseTree:
    """A grown tree plus per-node eval-sample aggregates.

    tau1/tau2/count hold sums of psi^2, dpsi and row counts over the eval
    rows routed to each node; an eval-empty leaf carries its parent's
    aggregates.
    """

    tree: Tree
    tau1: np.ndarray
    tau2: np.ndarray
    count: np.ndarray
    j: int = 0

    def leaf_ids(self, zmat) -> np.ndarray:
        return self.tree.leaf_ids(zmat)

    @property
    def scan_ops(self) -> int:
        return self.tree.scan_ops


def leaf_weight(psi_sq_sum: float, dpsi_sum: float, eps_den: float = 0.0) -> float:
    """Closed-form optimal leaf weight (sum dpsi) / (sum psi^2)."""
    if not psi_sq_sum > eps_den:
        raise DegenerateLeafError(
            f"leaf psi^2 sum {psi_sq_sum!r} is not above eps_den={eps_den!r}"
        )
    return float(dpsi_sum / psi_sq_sum)


def split_gain(parent, left, right, eps_den: float = 0.0) -> float:
    """Sandwich-loss gain of a split; -inf when a child denominator is degenerate.

    Each argument is an aggregate pair (psi_sq_sum, dpsi_sum).
    """
    p_den, p_num = float(parent[0]), float(parent[1])
    l_den, l_num = float(left[0]), float(left[1])
    r_den, r_num = float(right[0]), float(right[1])
    if not (l_den > eps_den and r_den > eps_den and p_den > eps_den):
        return float("-inf")
    return l_num**2 / l_den + r_num**2 / r_den - p_num**2 / p_den


def _resolve_eps_den(inputs: RoseInputs, j: int, rows) -> float:
    return EPS_DEN_FACTOR * float(np.mean(inputs.psi_sq[rows, j]))


def _grow_rose_structure(inputs, split_idx, params, rng, j, eps_den):
    d = inputs.zmat.shape[1]
    mtry = params.mtry if params.mtry is not None else d
    if mtry > d:
        raise ValueError(f"mtry={mtry} exceeds feature count d={d}")
    tree, _ = grow(
        inputs.zmat,
        inputs.psi_sq[:, j],
        inputs.dpsi[:, j],
        np.asarray(split_idx),
        mtry=mtry,
        min_node_size=params.min_node_size,
        max_depth=params.max_depth,
        alpha=params.alpha_regularity,
        eps_den=eps_den,
        rng=rng,
        stop_targets=None,
    )
    return tree


def _attach_eval_stats(tree, inputs, eval_idx, j) -> RoseTree:
    eval_idx = np.asarray(eval_idx)
    cols = np.column_stack(
        [inputs.psi_sq[:, j], inputs.dpsi[:, j], np.ones(inputs.n)]
    )
    stats = leaf_sums(tree, inputs.zmat, eval_idx, cols)
    return RoseTree(tree=tree, tau1=stats[:, 0], tau2=stats[:, 1], count=stats[:, 2], j=j)


def fit_rose_tree(
    inputs: RoseInputs,
    split_idx,
    eval_idx,
    params: RoseTreeParams,
    seed=0,
    j: int = 0,
    eps_den: float | None = None,
) -> RoseTree:
    """Grow one tree on split_idx and attach eval_idx leaf aggregates."""
    split_idx = np.asarray(split_idx)
    eval_idx = np.asarray(eval_idx)
    if split_idx.size == 0 or eval_idx.size == 0:
        raise ValueError("split_idx and eval_idx must be nonempty")
    if params.honest and np.intersect1d(split_idx, eval_idx).size:
        raise ValueError("honest fitting requires disjoint split and eval index sets")
    if eps_den is None:
        eps_den = _resolve_eps_den(inputs, j, split_idx)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    tree = _grow_rose_structure(inputs, split_idx, params, rng, j, eps_den)
    return _attach_eval_stats(tree, inputs, eval_idx, j)


@dataclass
class _TreeGroup:
    """One bootstrap group of the multi-moment forest: J trees + solved leaf weights."""

    trees: list
    weights: list  # per j: array of per-leaf weights indexed by leaf rank


@dataclass
class RoseForestWeights:
    """Fitted weight function(s); evaluation is immutable and reentrant.

    mode "ratio_of_sums" (single moment): w(z) = sum_b tau2_b(z) / sum_b
    tau1_b(z) with tau the per-leaf eval averages, falling back to the
    global full-sample ratio where the denominator is degenerate.
    mode "mean_of_solutions" (multi): w_j(z) = mean over tree groups of the
    solved leaf weight containing z.
    """

    mode: str
    n_moments: int
    eps_den: float
    global_ratio: float
    trees: list = field(repr=False)
    clip_bound: float | None = None
    n_skipped: int = 0

    def evaluate(self, zmat) -> np.ndarray:
        """Weights at query points; shape (n_query, J)."""
        zmat = np.atleast_2d(np.asarray(zmat, dtype=float))
        if self.mode == "ratio_of_sums":
            num = np.zeros(zmat.shape[0])
            den = np.zeros(zmat.shape[0])
            for rt in self.trees:
                leaves = rt.leaf_ids(zmat)
                cnt = rt.count[leaves]
                num += rt.tau2[leaves] / cnt
                den += rt.tau1[leaves] / cnt
            mask = den > self.eps_den
            out = np.full(zmat.shape[0], self.global_ratio)
            out[mask] = num[mask] / den[mask]
            out = out[:, None]
        else:
            acc = np.zeros((zmat.shape[0], self.n_moments))
            used = 0
            for group in self.trees:
                if group.weights is None:
                    continue
                used += 1
                for j, rt in enumerate(group.trees):
                    acc[:, j] += group.weights[j][rt.leaf_ids(zmat)]
            if used == 0:
                raise ValueError("no usable tree groups: every block system was singular")
            out = acc / used
        if self.clip_bound is not None:
            out = np.clip(out, -self.clip_bound, self.clip_bound)
        return out


def _draw_subsets(rng, n, c_split, honest):
    n_sub = max(1, round(c_split * n))
    if honest:
        k = min(n_sub, n // 2)
        perm = rng.permutation(n)
        return perm[:k], perm[k : 2 * k]
    rows = rng.choice(n, size=n_sub, replace=False) if n_sub < n else np.arange(n)
    return rows, rows


def fit_rose_forest(
    inputs: RoseInputs,
    params: RoseTreeParams,
    n_trees: int = 500,
    c_split: float = 0.5,
    seed: int = 0,
    n_threads: int = 1,
) -> RoseForestWeights:
    """Single-moment ROSE forest with ratio-of-sums aggregation."""
    if n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    if not 0.0 < c_split <= 1.0:
        raise ValueError("c_split must be in (0, 1]")
    n = inputs.n
    all_rows = np.arange(n)
    eps_den = _resolve_eps_den(inputs, 0, all_rows)
    den_total = float(inputs.psi_sq[:, 0].sum())
    global_ratio = float(inputs.dpsi[:, 0].sum() / den_total) if den_total > eps_den else 0.0
    seeds = np.random.SeedSequence(seed).spawn(n_trees)

    def build(b):
        rng = np.random.default_rng(seeds[b])
        split_rows, eval_rows = _draw_subsets(rng, n, c_split, params.honest)
        tree = _grow_rose_structure(inputs, split_rows, params, rng, 0, eps_den)
        return _attach_eval_stats(tree, inputs, eval_rows, 0)

    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            trees = list(pool.map(build, range(n_trees)))
    else:
        trees = [build(b) for b in range(n_trees)]
    return RoseForestWeights(
        mode="ratio_of_sums",
        n_moments=1,
        eps_den=eps_den,
        global_ratio=global_ratio,
        trees=trees,
    )


def _leaf_rank(tree) -> np.ndarray:
    """Map node id -> dense leaf rank (internal nodes get -1)."""
    rank = np.full(tree.n_nodes, -1, dtype=np.int64)
    leaf_nodes = np.nonzero(tree.feature == -1)[0]
    rank[leaf_nodes] = np.arange(leaf_nodes.size)
    return rank


def _solve_group(inputs, trees, eval_rows):
    """Assemble and solve the block system F w = a for one tree group."""
    J = len(trees)
    leaf_counts = []
    leaf_of_row = []
    ranks = []
    for rt in trees:
        rank = _leaf_rank(rt.tree)
        ranks.append(rank)
        leaf_of_row.append(rank[rt.tree.leaf_ids(inputs.zmat[eval_rows])])
        leaf_counts.append(int(rt.tree.n_leaves))
    offsets = np.concatenate([[0], np.cumsum(leaf_counts)])
    dim = int(offsets[-1])
    a = np.zeros(dim)
    f_mat = np.zeros((dim, dim))
    psi = inputs.psi[eval_rows]
    dpsi = inputs.dpsi[eval_rows]
    for j in range(J):
        a[offsets[j] : offsets[j + 1]] = np.bincount(
            leaf_of_row[j], weights=dpsi[:, j], minlength=leaf_counts[j]
        )
        for jp in range(J):
            block = np.zeros((leaf_counts[j], leaf_counts[jp]))
            np.add.at(block, (leaf_of_row[j], leaf_of_row[jp]), psi[:, j] * psi[:, jp])
            f_mat[offsets[j] : offsets[j + 1], offsets[jp] : offsets[jp + 1]] = block
    solution = None
    try:
        solution = np.linalg.solve(f_mat, a)
    except np.linalg.LinAlgError:
        ridge = 1e-8 * np.trace(f_mat) / dim
        warnings.warn(
            f"singular block system; adding ridge {ridge:g} to the diagonal",
            stacklevel=2,
        )
        try:
            solution = np.linalg.solve(f_mat + ridge * np.eye(dim), a)
        except np.linalg.LinAlgError:
            return None, ranks
    if solution is None or not np.all(np.isfinite(solution)):
        return None, ranks
    return [solution[offsets[j] : offsets[j + 1]] for j in range(J)], ranks


def fit_rose_forest_multi(
    inputs: RoseInputs,
    params: RoseTreeParams,
    n_trees: int = 500,
    c_split: float = 0.5,
    seed: int = 0,
) -> RoseForestWeights:
    """Multi-moment ROSE forest: per-group block solve, mean over groups.

    Accepts J=1 inputs as well, where the block system is diagonal and the
    solved weights reduce to per-leaf ratios.
    """
    if n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    if not 0.0 < c_split <= 1.0:
        raise ValueError("c_split must be in (0, 1]")
    n = inputs.n
    J = inputs.n_moments
    all_rows = np.arange(n)
    eps_dens = [_resolve_eps_den(inputs, j, all_rows) for j in range(J)]
    seeds = np.random.SeedSequence(seed).spawn(n_trees)
    groups = []
    n_skipped = 0
    for b in range(n_trees):
        rng = np.random.default_rng(seeds[b])
        split_rows, eval_rows = _draw_subsets(rng, n, c_split, params.honest)
        trees = []
        for j in range(J):
            tree = _grow_rose_structure(inputs, split_rows, params, rng, j, eps_dens[j])
            trees.append(_attach_eval_stats(tree, inputs, eval_rows, j))
        weights, _ = _solve_group(inputs, trees, eval_rows)
        if weights is None:
            n_skipped += 1
            groups.append(_TreeGroup(trees=trees, weights=None))
            continue
        # store per-node weight arrays for direct leaf_ids lookup
        padded = []
        for j, rt in enumerate(trees):
            rank = _leaf_rank(rt.tree)
            node_weights = np.zeros(rt.tree.n_nodes)
            leaf_nodes = rank >= 0
            node_weights[leaf_nodes] = weights[j][rank[leaf_nodes]]
            padded.append(node_weights)
        groups.append(_TreeGroup(trees=trees, weights=padded))
    return RoseForestWeights(
        mode="mean_of_solutions",
        n_moments=J,
        eps_den=eps_dens[0],
        global_ratio=0.0,
        trees=groups,
        n_skipped=n_skipped,
    )


def clip_weights(weights: RoseForestWeights, bound: float | None) -> RoseForestWeights:
    """Copy with evaluation clamped to [-bound, bound]; None is the identity."""
    if bound is not None and not bound > 0:
        raise ValueError("bound must be positive when given")
    return _dc_replace(weights, clip_bound=bound)


def empirical_sandwich_loss(weights, psi, dpsi) -> float:
    """Empirical sandwich loss of evaluated weights on a sample.

    ``weights``, ``psi``, ``dpsi`` are (n, J) arrays (or (n,) for J=1).
    Loss = sum((sum_j w_j psi_j)^2) / (sum over i,j of w_j dpsi_j)^2.
    """
    w = np.atleast_2d(np.asarray(weights, dtype=float).T).T
    p = np.atleast_2d(np.asarray(psi, dtype=float).T).T
    dp = np.atleast_2d(np.asarray(dpsi, dtype=float).T).T
    num = float(np.sum(np.sum(w * p, axis=1) ** 2))
    den = float(np.sum(w * dp))
    if den == 0.0:
        return float("inf")
    return num / den**2
