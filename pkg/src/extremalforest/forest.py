"""Honest, subsampled generalized quantile random forests.

Trees are grown on a split half of each subsample and predict with the
disjoint honest half; the leaves of the prediction half define similarity
weights over the training points that localize every downstream estimator.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "TrainingSet",
    "ForestParams",
    "Tree",
    "Forest",
    "fit_forest",
    "relabel_split_labels",
    "best_split",
    "similarity_weights",
    "similarity_weights_batch",
    "weighted_quantile",
]

WEIGHT_SUM_TOL = 1e-12


def default_mtry(p: int) -> int:
    return min(math.ceil(math.sqrt(p)) + 20, p)


def default_subsample_size(n: int) -> int:
    return min(n, math.ceil(0.5 * n))


def worker_count() -> int:
    env = os.environ.get("ERF_THREADS", "").strip()
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass(frozen=True)
class TrainingSet:
    """Predictor matrix (n x p) paired row-wise with a response vector."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.ascontiguousarray(np.atleast_2d(np.asarray(self.x, dtype=np.float64)))
        y = np.ascontiguousarray(np.asarray(self.y, dtype=np.float64).ravel())
        if x.ndim != 2:
            raise ValueError("predictor matrix must be two-dimensional")
        if x.shape[0] != y.shape[0]:
            raise ValueError(
                f"row mismatch: x has {x.shape[0]} rows, y has {y.shape[0]} entries"
            )
        if x.shape[0] < 2 or x.shape[1] < 1:
            raise ValueError("need at least 2 rows and 1 predictor column")
        if not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
            raise ValueError("non-finite entries in training data")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class ForestParams:
    num_trees: int = 2000
    subsample_size: int | None = None
    honest: bool = True
    min_node_size: int = 40
    mtry: int | None = None
    balance_fraction: float = 0.1
    split_quantile_levels: tuple[float, ...] = (0.1, 0.5, 0.9)
    seed: int = 0

    def __post_init__(self):
        if self.num_trees < 1:
            raise ValueError("num_trees must be positive")
        if self.min_node_size < 1:
            raise ValueError("min_node_size must be positive")
        if not (0.0 < self.balance_fraction <= 0.2):
            raise ValueError("balance_fraction must lie in (0, 0.2]")
        levels = tuple(float(t) for t in self.split_quantile_levels)
        if any(not (0.0 < t < 1.0) for t in levels):
            raise ValueError("split_quantile_levels must lie in (0, 1)")
        if list(levels) != sorted(levels):
            raise ValueError("split_quantile_levels must be sorted")
        object.__setattr__(self, "split_quantile_levels", levels)

    def resolved(self, n: int, p: int) -> "ForestParams":
        s = self.subsample_size if self.subsample_size is not None else default_subsample_size(n)
        m = self.mtry if self.mtry is not None else default_mtry(p)
        if not (1 <= s <= n):
            raise ValueError(f"subsample_size {s} outside [1, {n}]")
        if not (1 <= m <= p):
            raise ValueError(f"mtry {m} outside [1, {p}]")
        if self.min_node_size > s // 2:
            raise ValueError(
                f"min_node_size {self.min_node_size} too large for subsample of {s}"
            )
        return replace(self, subsample_size=s, mtry=m)


@dataclass
class Tree:
    """Array-encoded decision tree.

    ``feature[j] == -1`` marks node ``j`` as a leaf; its prediction-set
    members are ``leaf_members[leaf_offsets[j]:leaf_offsets[j + 1]]``.
    """

    feature: np.ndarray       # int64, -1 for leaves
    threshold: np.ndarray     # float64, nan for leaves
    left: np.ndarray          # int64, -1 for leaves
    right: np.ndarray         # int64, -1 for leaves
    leaf_members: np.ndarray  # int64, concatenated prediction indices
    leaf_offsets: np.ndarray  # int64, len == num_nodes + 1
    prediction_indices: np.ndarray
    split_indices: np.ndarray

    @property
    def num_nodes(self) -> int:
        return self.feature.shape[0]

    def leaf_sizes(self) -> np.ndarray:
        sizes = np.diff(self.leaf_offsets)
        return sizes[self.feature == -1]

    def route(self, x_test: np.ndarray) -> np.ndarray:
        """Leaf node id for each row of ``x_test``."""
        node = np.zeros(x_test.shape[0], dtype=np.int64)
        pending = self.feature[node] >= 0
        while np.any(pending):
            idx = np.nonzero(pending)[0]
            cur = node[idx]
            go_left = x_test[idx, self.feature[cur]] <= self.threshold[cur]
            node[idx] = np.where(go_left, self.left[cur], self.right[cur])
            pending = self.feature[node] >= 0
        return node


@dataclass
class Forest:
    trees: list[Tree]
    params: ForestParams
    training_n: int
    training_p: int

    def __post_init__(self):
        if not self.trees:
            raise ValueError("forest must hold at least one tree")


def relabel_split_labels(node_y: np.ndarray, levels) -> np.ndarray:
    """Label each response by the number of node-level quantiles strictly below it.

    Quantiles use the generalized-inverse convention: the smallest value whose
    empirical CDF mass reaches the level.
    """
    y = np.asarray(node_y, dtype=np.float64).ravel()
    if y.size == 0:
        raise ValueError("empty node")
    levels = np.asarray(list(levels), dtype=np.float64)
    if levels.size == 0:
        return np.zeros(y.size, dtype=np.int64)
    ys = np.sort(y)
    n = y.size
    idx = np.maximum(np.ceil(levels * n - 1e-9).astype(np.int64) - 1, 0)
    quantiles = ys[idx]
    return np.searchsorted(quantiles, y, side="left").astype(np.int64)


def _gini_scan(x_col, labels, num_classes, m_bal, pred_col=None, min_pred_child=0):
    """Best (score, threshold) for one variable, or None.

    Maximizes sum of squared class proportions weighted by child size, over
    midpoints honoring the balance constraint on split rows and, when given,
    a minimum prediction-row count per child.
    """
    n = x_col.shape[0]
    order = np.argsort(x_col, kind="stable")
    sx = x_col[order]
    sl = labels[order]
    # positions i split into left [0..i] and right [i+1..n-1]
    pos = np.arange(n - 1)
    valid = sx[:-1] < sx[1:]
    left_n = pos + 1
    right_n = n - left_n
    valid &= (left_n >= m_bal) & (right_n >= m_bal)
    if not np.any(valid):
        return None
    thr = 0.5 * (sx[:-1] + sx[1:])
    if pred_col is not None and min_pred_child > 0:
        ps = np.sort(pred_col)
        n_pred = ps.shape[0]
        if n_pred < 2 * min_pred_child:
            return None
        cnt_left = np.searchsorted(ps, thr, side="right")
        valid &= (cnt_left >= min_pred_child) & (n_pred - cnt_left >= min_pred_child)
        if not np.any(valid):
            return None
    score = np.zeros(n - 1)
    for c in range(num_classes):
        cum = np.cumsum(sl == c)[:-1].astype(np.float64)
        tot = np.count_nonzero(sl == c)
        score += cum * cum / left_n + (tot - cum) ** 2 / right_n
    score = np.where(valid, score, -np.inf)
    best = int(np.argmax(score))
    return float(score[best]), float(thr[best])


def best_split(
    x_rows: np.ndarray,
    labels: np.ndarray,
    candidate_variables,
    balance_fraction: float,
    pred_rows: np.ndarray | None = None,
    min_pred_child: int = 0,
):
    """Best axis-aligned split of the node by multiclass Gini decrease.

    Returns ``(variable, threshold)`` or ``None`` when no admissible split
    exists. ``pred_rows``/``min_pred_child`` optionally require each child to
    retain a minimum number of prediction-set rows. Ties go to the first
    candidate in scan order.
    """
    x_rows = np.atleast_2d(np.asarray(x_rows, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64).ravel()
    n = x_rows.shape[0]
    m_bal = max(1, math.ceil(balance_fraction * n))
    num_classes = int(labels.max()) + 1 if labels.size else 1
    if num_classes == 1:
        return None
    best = None
    best_score = -np.inf
    for v in candidate_variables:
        pred_col = pred_rows[:, v] if pred_rows is not None else None
        res = _gini_scan(x_rows[:, v], labels, num_classes, m_bal, pred_col, min_pred_child)
        if res is not None and res[0] > best_score:
            best_score = res[0]
            best = (int(v), res[1])
    return best


def _grow_tree(x, y, subsample, params: ForestParams, rng: np.random.Generator) -> Tree:
    s = subsample.shape[0]
    if params.honest:
        half = s // 2
        pred_idx = subsample[:half]
        split_idx = subsample[half:]
    else:
        pred_idx = subsample
        split_idx = subsample
    p = x.shape[1]
    kappa = params.min_node_size

    feature, threshold, left, right = [], [], [], []
    members, offsets = [], [0]

    def add_node():
        feature.append(-1)
        threshold.append(np.nan)
        left.append(-1)
        right.append(-1)
        members.append(None)
        return len(feature) - 1

    def grow(split_rows, pred_rows):
        node = add_node()
        # the leaf-size band constrains prediction counts; the split half only
        # needs enough rows to place a threshold
        if pred_rows.shape[0] >= 2 * kappa and split_rows.shape[0] >= 2:
            labels = relabel_split_labels(y[split_rows], params.split_quantile_levels)
            cand = rng.permutation(p)[: params.mtry]
            found = best_split(
                x[split_rows],
                labels,
                cand,
                params.balance_fraction,
                pred_rows=x[pred_rows],
                min_pred_child=kappa,
            )
            if found is not None:
                var, thr = found
                go_left_s = x[split_rows, var] <= thr
                go_left_p = x[pred_rows, var] <= thr
                feature[node] = var
                threshold[node] = thr
                left[node] = grow(split_rows[go_left_s], pred_rows[go_left_p])
                right[node] = grow(split_rows[~go_left_s], pred_rows[~go_left_p])
                return node
        members[node] = pred_rows
        return node

    grow(split_idx, pred_idx)

    concat, off = [], [0]
    for m in members:
        if m is not None:
            concat.append(m)
            off.append(off[-1] + m.shape[0])
        else:
            off.append(off[-1])
    return Tree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        leaf_members=(np.concatenate(concat) if concat else np.empty(0, dtype=np.int64)),
        leaf_offsets=np.asarray(off, dtype=np.int64),
        prediction_indices=pred_idx,
        split_indices=split_idx,
    )


def _tree_rng(seed: int, b: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(b,)))


def _fit_one(x, y, params: ForestParams, b: int) -> Tree:
    rng = _tree_rng(params.seed, b)
    subsample = rng.permutation(x.shape[0])[: params.subsample_size]
    return _grow_tree(x, y, subsample, params, rng)


def fit_forest(data: TrainingSet, params: ForestParams) -> Forest:
    """Fit an honest subsampled forest; bit-deterministic given the seed."""
    params = params.resolved(data.n, data.p)
    n_jobs = worker_count()
    indices = range(params.num_trees)
    if n_jobs > 1 and params.num_trees >= 32:
        from joblib import Parallel, delayed

        trees = Parallel(n_jobs=n_jobs, prefer="processes")(
            delayed(_fit_one)(data.x, data.y, params, b) for b in indices
        )
    else:
        trees = [_fit_one(data.x, data.y, params, b) for b in indices]
    return Forest(trees=list(trees), params=params, training_n=data.n, training_p=data.p)


def similarity_weights_batch(forest: Forest, x_test: np.ndarray) -> np.ndarray:
    """Similarity weight matrix (n_test x n_train), each row summing to 1."""
    x_test = np.atleast_2d(np.asarray(x_test, dtype=np.float64))
    if x_test.shape[1] != forest.training_p:
        raise ValueError(
            f"predictor dimension mismatch: got {x_test.shape[1]}, forest expects {forest.training_p}"
        )
    if not np.all(np.isfinite(x_test)):
        raise ValueError("non-finite test predictors")
    n_test = x_test.shape[0]
    w = np.zeros((n_test, forest.training_n))
    inv_b = 1.0 / len(forest.trees)
    for tree in forest.trees:
        leaves = tree.route(x_test)
        for leaf in np.unique(leaves):
            rows = np.nonzero(leaves == leaf)[0]
            mem = tree.leaf_members[tree.leaf_offsets[leaf] : tree.leaf_offsets[leaf + 1]]
            w[np.ix_(rows, mem)] += inv_b / mem.shape[0]
    return w


def similarity_weights(forest: Forest, x: np.ndarray) -> np.ndarray:
    """Forest-averaged similarity weights of one test point over training rows."""
    x = np.asarray(x, dtype=np.float64).ravel()
    return similarity_weights_batch(forest, x[None, :])[0]


def weighted_quantile(weights: np.ndarray, y: np.ndarray, tau: float) -> float:
    """Generalized inverse of the weighted empirical CDF at level ``tau``."""
    if not (0.0 < tau < 1.0):
        raise ValueError("tau must lie in (0, 1)")
    weights = np.asarray(weights, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if weights.shape != y.shape:
        raise ValueError("weights and responses differ in length")
    if np.any(weights < 0):
        raise ValueError("negative weights")
    total = weights.sum()
    if total <= 0:
        raise ValueError("all weights zero")
    order = np.argsort(y, kind="stable")
    cum = np.cumsum(weights[order])
    target = tau * total * (1.0 - 1e-12)
    idx = int(np.searchsorted(cum, target, side="left"))
    idx = min(idx, y.shape[0] - 1)
    return float(y[order[idx]])


def weighted_quantile_rows(w_matrix: np.ndarray, y: np.ndarray, tau: float) -> np.ndarray:
    """Row-wise weighted quantiles for a weight matrix sharing one response vector."""
    y = np.asarray(y, dtype=np.float64).ravel()
    order = np.argsort(y, kind="stable")
    ys = y[order]
    cum = np.cumsum(w_matrix[:, order], axis=1)
    totals = cum[:, -1]
    targets = tau * totals * (1.0 - 1e-12)
    idx = (cum >= targets[:, None]).argmax(axis=1)
    return ys[idx]
