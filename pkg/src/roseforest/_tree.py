"""Shared axis-aligned binary tree machinery.

Both the CART nuisance forests and the ROSE weight forests grow trees by
maximizing a ratio-form split criterion over numerator/denominator arrays
(a, b):

    gain(split) = b_L^2 / a_L + b_R^2 / a_R - b_P^2 / a_P

For CART regression a = sample weight and b = weight * target, making the
gain the weighted residual-sum-of-squares reduction.  ROSE trees pass
a = psi^2 and b = dpsi sums.  Split candidates are all midpoints between
consecutive sorted distinct values of each tried feature.  Ties are broken
toward the lowest feature index, then the smallest threshold.

Per-feature scans use cumulative sums so evaluating all candidate
thresholds of a node costs O(node size) after one sort; `scan_ops` counts
the accumulated scan length as an operation-count probe.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LEAF = -1


@dataclass
class Tree:
    """Structure arrays; node i is a leaf iff feature[i] == LEAF."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray | None = None
    scan_ops: int = 0

    @property
    def n_nodes(self) -> int:
        return int(self.feature.size)

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature == LEAF))

    def leaf_ids(self, zmat: np.ndarray) -> np.ndarray:
        """Leaf node index for each row of zmat (rows at a threshold go left)."""
        zmat = np.atleast_2d(np.asarray(zmat, dtype=float))
        idx = np.zeros(zmat.shape[0], dtype=np.int64)
        feature, threshold = self.feature, self.threshold
        left, right = self.left, self.right
        pending = np.nonzero(feature[idx] >= 0)[0]
        while pending.size:
            nodes = idx[pending]
            go_left = zmat[pending, feature[nodes]] <= threshold[nodes]
            idx[pending] = np.where(go_left, left[nodes], right[nodes])
            pending = pending[feature[idx[pending]] >= 0]
        return idx


def best_split(zmat, a, b, rows, feats, min_child, eps_den):
    """Best (feature, threshold) by the ratio gain; None when no positive gain.

    Returns ((feature, threshold, gain) | None, scan_ops).  Candidates whose
    child denominator sum is <= eps_den are inadmissible.
    """
    av = a[rows]
    bv = b[rows]
    a_tot = float(av.sum())
    b_tot = float(bv.sum())
    m = rows.size
    ops = 0
    if not a_tot > eps_den:
        return None, ops
    parent = b_tot * b_tot / a_tot
    best_gain = 0.0
    best = None
    for q in feats:
        zv = zmat[rows, q]
        order = np.argsort(zv, kind="stable")
        zs = zv[order]
        ops += m
        bounds = np.nonzero(zs[:-1] != zs[1:])[0]
        if bounds.size == 0:
            continue
        k = bounds[(bounds + 1 >= min_child) & (m - bounds - 1 >= min_child)]
        if k.size == 0:
            continue
        ca = np.cumsum(av[order])
        cb = np.cumsum(bv[order])
        a_left = ca[k]
        b_left = cb[k]
        a_right = a_tot - a_left
        b_right = b_tot - b_left
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = b_left * b_left / a_left + b_right * b_right / a_right - parent
        gain[(a_left <= eps_den) | (a_right <= eps_den)] = -np.inf
        j = int(np.argmax(gain))
        if gain[j] > best_gain:
            kk = int(k[j])
            best_gain = float(gain[j])
            best = (int(q), 0.5 * (zs[kk] + zs[kk + 1]), best_gain)
    return best, ops


def grow(
    zmat,
    a,
    b,
    rows,
    *,
    mtry,
    min_node_size,
    max_depth,
    alpha,
    eps_den,
    rng,
    stop_targets=None,
):
    """Grow a tree structure greedily; returns (Tree, leaf_rows dict).

    `rows` indexes the structure sample.  `alpha` is the minimum child
    fraction of its parent (0 disables).  `stop_targets` short-circuits
    nodes whose targets are constant (CART regression only).
    """
    d = zmat.shape[1]
    all_feats = np.arange(d)
    features: list[int] = []
    thresholds: list[float] = []
    lefts: list[int] = []
    rights: list[int] = []
    leaf_rows: dict[int, np.ndarray] = {}
    scan_ops = 0

    def new_node() -> int:
        features.append(LEAF)
        thresholds.append(0.0)
        lefts.append(-1)
        rights.append(-1)
        return len(features) - 1

    root = new_node()
    stack = [(root, np.asarray(rows), 0)]
    while stack:
        nid, rr, depth = stack.pop()
        m = rr.size
        min_child = max(min_node_size, int(np.ceil(alpha * m))) if alpha > 0 else min_node_size
        split = None
        if (max_depth is None or depth < max_depth) and m >= 2 * min_child:
            if stop_targets is None or stop_targets[rr].min() != stop_targets[rr].max():
                if mtry < d:
                    feats = np.sort(rng.choice(d, size=mtry, replace=False))
                else:
                    feats = all_feats
                split, ops = best_split(zmat, a, b, rr, feats, min_child, eps_den)
                scan_ops += ops
        if split is None:
            leaf_rows[nid] = rr
            continue
        q, thr, _ = split
        go_left = zmat[rr, q] <= thr
        lid = new_node()
        rid = new_node()
        features[nid] = q
        thresholds[nid] = thr
        lefts[nid] = lid
        rights[nid] = rid
        stack.append((rid, rr[~go_left], depth + 1))
        stack.append((lid, rr[go_left], depth + 1))

    tree = Tree(
        feature=np.asarray(features, dtype=np.int32),
        threshold=np.asarray(thresholds, dtype=float),
        left=np.asarray(lefts, dtype=np.int32),
        right=np.asarray(rights, dtype=np.int32),
        scan_ops=scan_ops,
    )
    return tree, leaf_rows


def assign_leaf_values(tree, zmat, rows, value_of) -> np.ndarray:
    """Per-node value array; a leaf with no rows inherits its ancestors' rows.

    `value_of(row_indices)` maps a nonempty row set to a leaf value.  `rows`
    must be nonempty.
    """
    values = np.zeros(tree.n_nodes)

    def rec(nid, rr, inherited):
        eff = rr if rr.size else inherited
        if tree.feature[nid] == LEAF:
            values[nid] = value_of(eff)
            return
        go_left = zmat[rr, tree.feature[nid]] <= tree.threshold[nid]
        rec(tree.left[nid], rr[go_left], eff)
        rec(tree.right[nid], rr[~go_left], eff)

    rec(0, np.asarray(rows), np.asarray(rows))
    return values


def leaf_sums(tree, zmat, rows, cols) -> np.ndarray:
    """Per-node column sums over `rows`; empty leaves inherit parent sums.

    cols has shape (n, k); returns (n_nodes, k).  Internal nodes hold their
    own subtree sums.
    """
    out = np.zeros((tree.n_nodes, cols.shape[1]))

    def rec(nid, rr, parent_sums):
        sums = cols[rr].sum(axis=0) if rr.size else parent_sums
        out[nid] = sums
        if tree.feature[nid] >= 0:
            go_left = zmat[rr, tree.feature[nid]] <= tree.threshold[nid]
            rec(tree.left[nid], rr[go_left], sums)
            rec(tree.right[nid], rr[~go_left], sums)

    rec(0, np.asarray(rows), np.zeros(cols.shape[1]))
    return out
