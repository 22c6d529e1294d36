"""Gradient-boosted regression trees with CART base learners.

Boosting loop, per round b:
    a. draw ceil(row_fraction * n) training rows without replacement,
    b. grow a CART tree on them, drawing ceil(col_fraction * p) candidate
       columns afresh at every split,
    c. evaluate the tree on the full training set (y_hat_b),
    d/e. replace the working response by r_b = r - eta * y_hat_b.
The model predicts sum_b eta * tree_b(x).

Tree growth and prediction are numba kernels operating on flat node
arrays. All randomness (row subsets, per-node column keys) is drawn up
front from a numpy generator so the kernels are deterministic.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence

import numba
import numpy as np

from .errors import ConfigError, DesignError, FitError, ShapeError
from .rng import child_seed, stream

UNBOUNDED_DEPTH = 1 << 30


@dataclass(frozen=True)
class GbHyperparams:
    eta: float = 0.1
    n_rounds: int = 100
    row_fraction: float = 0.7
    col_fraction: float = 0.8
    max_depth: Optional[int] = 3
    min_leaf: int = 3

    def __post_init__(self):
        if not 0 <= self.eta <= 1:
            raise ConfigError(f"eta must lie in [0, 1], got {self.eta}")
        if self.n_rounds < 1:
            raise ConfigError(f"n_rounds must be >= 1, got {self.n_rounds}")
        for name in ("row_fraction", "col_fraction"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ConfigError(f"{name} must lie in (0, 1], got {v}")
        if self.max_depth is not None and self.max_depth < 1:
            raise ConfigError(f"max_depth must be >= 1, got {self.max_depth}")
        if self.min_leaf < 1:
            raise ConfigError(f"min_leaf must be >= 1, got {self.min_leaf}")

    @property
    def depth_limit(self) -> int:
        return UNBOUNDED_DEPTH if self.max_depth is None else int(self.max_depth)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GbHyperparams":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown hyperparameter(s): {', '.join(sorted(unknown))}")
        if "n_rounds" in known:
            known["n_rounds"] = int(known["n_rounds"])
        if "min_leaf" in known:
            known["min_leaf"] = int(known["min_leaf"])
        if known.get("max_depth") is not None:
            known["max_depth"] = int(known["max_depth"])
        return cls(**known)


@dataclass(frozen=True, eq=False)
class Tree:
    """Flat binary tree; ``feature[i] == -1`` marks a leaf.

    Rows with ``x[feature] <= threshold`` go to ``left``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    count: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def is_leaf(self) -> np.ndarray:
        return self.feature < 0

    def leaf_values(self) -> np.ndarray:
        return self.value[self.is_leaf]

    def predict(self, x) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=np.float64)
        out = np.empty(len(x))
        _tree_predict(self.feature, self.threshold, self.left, self.right, self.value, x, out)
        return out

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": [float(t) for t in self.threshold],
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": [float(v) for v in self.value],
            "count": self.count.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int64),
            threshold=np.asarray(d["threshold"], dtype=np.float64),
            left=np.asarray(d["left"], dtype=np.int64),
            right=np.asarray(d["right"], dtype=np.int64),
            value=np.asarray(d["value"], dtype=np.float64),
            count=np.asarray(d["count"], dtype=np.int64),
        )


@dataclass(frozen=True, eq=False)
class GbModel:
    """Boosted ensemble stored as packed (n_trees, capacity) node arrays."""

    eta: float
    feature_names: tuple
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    count: np.ndarray
    sizes: np.ndarray

    @classmethod
    def from_trees(cls, trees: Sequence[Tree], eta: float, feature_names: Sequence[str]) -> "GbModel":
        cap = max([t.n_nodes for t in trees] + [1])
        arrays = _alloc((len(trees), cap))
        for b, t in enumerate(trees):
            for dst, src in zip(arrays, (t.feature, t.threshold, t.left, t.right, t.value, t.count)):
                dst[b, : t.n_nodes] = src
        sizes = np.array([t.n_nodes for t in trees], dtype=np.int64)
        return cls(float(eta), tuple(feature_names), *arrays, sizes)

    @property
    def n_trees(self) -> int:
        return len(self.sizes)

    @property
    def trees(self) -> tuple:
        arrays = (self.feature, self.threshold, self.left, self.right, self.value, self.count)
        return tuple(Tree(*(a[b, :k].copy() for a in arrays)) for b, k in enumerate(self.sizes))

    def to_dict(self) -> dict:
        return {
            "eta": float(self.eta),
            "feature_names": list(self.feature_names),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GbModel":
        return cls.from_trees([Tree.from_dict(t) for t in d["trees"]], d["eta"], d["feature_names"])


# -- numba kernels -------------------------------------------------------------


@numba.njit(cache=True)
def _tree_predict(feature, threshold, left, right, value, x, out):
    for i in range(x.shape[0]):
        node = 0
        while feature[node] >= 0:
            if x[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]


@numba.njit(cache=True)
def _grow(x, order, y, rows, col_keys, k_cols, max_depth, min_leaf, feature, threshold, left, right, value, count):
    """Grow one CART tree on ``x[rows]``; returns the number of nodes used.

    ``order[c]`` is the stable argsort of column c over all rows of ``x``;
    a node's sorted values are read off it by filtering on node membership.
    ``col_keys[node]`` ranks the columns for that node and the ``k_cols``
    lowest keys form the candidate set. Ties in the split criterion go to
    the lowest column, then the lowest threshold.
    """
    n_all, p = x.shape
    m_total = rows.shape[0]
    idx = rows.copy()
    node_of = np.full(n_all, -1, dtype=np.int64)
    for t in range(m_total):
        node_of[idx[t]] = 0
    buf = np.empty(m_total, dtype=np.int64)
    vals = np.empty(m_total)
    ys = np.empty(m_total)
    use_col = np.ones(p, dtype=np.bool_)
    cap = 2 * m_total + 2
    stack_node = np.empty(cap, dtype=np.int64)
    stack_start = np.empty(cap, dtype=np.int64)
    stack_end = np.empty(cap, dtype=np.int64)
    stack_depth = np.empty(cap, dtype=np.int64)
    stack_node[0] = 0
    stack_start[0] = 0
    stack_end[0] = m_total
    stack_depth[0] = 0
    top = 1
    n_nodes = 1
    while top > 0:
        top -= 1
        node = stack_node[top]
        start = stack_start[top]
        end = stack_end[top]
        depth = stack_depth[top]
        m = end - start
        s = 0.0
        ss = 0.0
        lo = np.inf
        hi = -np.inf
        for t in range(start, end):
            v = y[idx[t]]
            s += v
            ss += v * v
            if v < lo:
                lo = v
            if v > hi:
                hi = v
        feature[node] = -1
        threshold[node] = 0.0
        left[node] = -1
        right[node] = -1
        value[node] = s / m
        count[node] = m
        if depth >= max_depth or m < 2 * min_leaf or lo == hi:
            continue
        if k_cols < p:
            keys = col_keys[node]
            for j in range(p):
                rank = 0
                for i in range(p):
                    if keys[i] < keys[j] or (keys[i] == keys[j] and i < j):
                        rank += 1
                use_col[j] = rank < k_cols
        tol = 1e-12 * (ss + 1.0)
        best_gain = -np.inf
        best_col = -1
        best_thr = 0.0
        for c in range(p):
            if not use_col[c]:
                continue
            k = 0
            for t in range(n_all):
                r = order[c, t]
                if node_of[r] == node:
                    vals[k] = x[r, c]
                    ys[k] = y[r]
                    k += 1
            sl = 0.0
            for i in range(1, m - min_leaf + 1):
                sl += ys[i - 1]
                if i < min_leaf:
                    continue
                a = vals[i - 1]
                b = vals[i]
                if not a < b:
                    continue
                sr = s - sl
                gain = sl * sl / i + sr * sr / (m - i)
                if gain > best_gain + tol:
                    best_gain = gain
                    best_col = c
                    thr = 0.5 * (a + b)
                    if thr >= b:
                        thr = a
                    best_thr = thr
        if best_col < 0:
            continue
        li = n_nodes
        ri = n_nodes + 1
        n_nodes += 2
        n_left = 0
        n_right = 0
        for t in range(start, end):
            r = idx[t]
            if x[r, best_col] <= best_thr:
                idx[start + n_left] = r
                node_of[r] = li
                n_left += 1
            else:
                buf[n_right] = r
                node_of[r] = ri
                n_right += 1
        for t in range(n_right):
            idx[start + n_left + t] = buf[t]
        feature[node] = best_col
        threshold[node] = best_thr
        left[node] = li
        right[node] = ri
        stack_node[top] = ri
        stack_start[top] = start + n_left
        stack_end[top] = end
        stack_depth[top] = depth + 1
        top += 1
        stack_node[top] = li
        stack_start[top] = start
        stack_end[top] = start + n_left
        stack_depth[top] = depth + 1
        top += 1
    return n_nodes


@numba.njit(cache=True)
def _boost(x, order, y, eta, row_sel, col_keys, k_cols, max_depth, min_leaf, feature, threshold, left, right, value, count):
    n_rounds = row_sel.shape[0]
    n = x.shape[0]
    r = y.copy()
    sizes = np.empty(n_rounds, dtype=np.int64)
    fitted = np.empty(n)
    for b in range(n_rounds):
        sizes[b] = _grow(
            x, order, r, row_sel[b], col_keys[b if col_keys.shape[0] > 1 else 0], k_cols, max_depth, min_leaf,
            feature[b], threshold[b], left[b], right[b], value[b], count[b],
        )
        _tree_predict(feature[b], threshold[b], left[b], right[b], value[b], x, fitted)
        for i in range(n):
            r[i] -= eta * fitted[i]
    return sizes


@numba.njit(cache=True)
def _ensemble_predict(feature, threshold, left, right, value, eta, x, out):
    tmp = np.empty(x.shape[0])
    for i in range(x.shape[0]):
        out[i] = 0.0
    for b in range(feature.shape[0]):
        _tree_predict(feature[b], threshold[b], left[b], right[b], value[b], x, tmp)
        for i in range(x.shape[0]):
            out[i] += eta * tmp[i]


# -- public API ------------------------------------------------------------


def _node_capacity(m: int, max_depth: int, min_leaf: int) -> int:
    leaves = max(1, m // min_leaf)
    cap = 2 * leaves - 1
    if max_depth < 40:
        cap = min(cap, 2 ** (max_depth + 1) - 1)
    return max(cap, 1)


def _alloc(shape):
    return (
        np.full(shape, -1, dtype=np.int64),
        np.zeros(shape),
        np.full(shape, -1, dtype=np.int64),
        np.full(shape, -1, dtype=np.int64),
        np.zeros(shape),
        np.zeros(shape, dtype=np.int64),
    )


def _column_order(x):
    return np.ascontiguousarray(np.argsort(x, axis=0, kind="stable").T)


def _validate_xy(x, y):
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 1 or len(x) != len(y):
        raise ShapeError(f"x has shape {x.shape}, y has shape {y.shape}")
    if len(y) == 0:
        raise FitError("cannot fit a tree on empty data")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise FitError("training data contain non-finite values")
    return x, y


def fit_tree(x, y, *, max_depth: Optional[int] = None, min_leaf: int = 1, col_fraction: float = 1.0, rng=None) -> Tree:
    """Grow a single CART regression tree on all rows of ``x``.

    At each split ``ceil(col_fraction * p)`` columns are drawn without
    replacement from ``rng`` (only needed when col_fraction < 1).
    """
    x, y = _validate_xy(x, y)
    n, p = x.shape
    depth = UNBOUNDED_DEPTH if max_depth is None else int(max_depth)
    cap = _node_capacity(n, depth, min_leaf)
    k_cols = max(1, math.ceil(col_fraction * p - 1e-9))
    if k_cols < p:
        if rng is None:
            raise ValueError("rng is required when col_fraction < 1")
        keys = rng.random((cap, p))
    else:
        keys = np.zeros((cap, p))
    arrays = _alloc(cap)
    used = _grow(x, _column_order(x), y, np.arange(n, dtype=np.int64), keys, k_cols, depth, int(min_leaf), *arrays)
    return Tree(*(a[:used].copy() for a in arrays))


def fit_gb(x, y, hp: GbHyperparams, seed: int, feature_names: Optional[Sequence[str]] = None) -> GbModel:
    x, y = _validate_xy(x, y)
    n, p = x.shape
    if n < 2:
        raise FitError("boosting needs at least 2 observations")
    m = min(n, max(1, math.ceil(hp.row_fraction * n - 1e-9)))
    k_cols = max(1, math.ceil(hp.col_fraction * p - 1e-9))
    depth = hp.depth_limit
    cap = _node_capacity(m, depth, hp.min_leaf)
    rng = stream(seed, "gb")
    if m < n:
        row_sel = np.sort(rng.random((hp.n_rounds, n)).argsort(axis=1, kind="stable")[:, :m], axis=1)
    else:
        row_sel = np.broadcast_to(np.arange(n, dtype=np.int64), (hp.n_rounds, n)).copy()
    if k_cols < p:
        col_keys = rng.random((hp.n_rounds, cap, p))
    else:
        col_keys = np.zeros((hp.n_rounds, 1, 1))
    arrays = _alloc((hp.n_rounds, cap))
    names = tuple(feature_names) if feature_names is not None else tuple(f"f{j}" for j in range(p))
    if len(names) != p:
        raise ShapeError(f"{len(names)} feature names for {p} columns")
    sizes = _boost(x, _column_order(x), y, float(hp.eta), row_sel, col_keys, k_cols, depth, int(hp.min_leaf), *arrays)
    return GbModel(float(hp.eta), names, *arrays, sizes)


def predict_gb(model: GbModel, x) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != len(model.feature_names):
        raise ShapeError(f"x has shape {x.shape}, model expects {len(model.feature_names)} columns")
    out = np.empty(len(x))
    _ensemble_predict(model.feature, model.threshold, model.left, model.right, model.value, float(model.eta), x, out)
    return out


def fit_predict_gb(x_train, y_train, x_new, hp: GbHyperparams, seed: int) -> np.ndarray:
    return predict_gb(fit_gb(x_train, y_train, hp, seed), x_new)


# -- hyperparameter search -----------------------------------------------------


def group_folds(groups, n_folds: int, seed: int) -> np.ndarray:
    """Fold label per observation; all observations of a group share a fold."""
    if n_folds < 2:
        raise DesignError(f"n_folds must be >= 2, got {n_folds}")
    groups = np.asarray(groups)
    uniq, inverse = np.unique(groups, return_inverse=True)
    if len(uniq) < n_folds:
        raise DesignError(f"{len(uniq)} groups cannot fill {n_folds} folds")
    order = stream(seed, "cv_folds").permutation(len(uniq))
    fold_of_group = np.empty(len(uniq), dtype=np.int64)
    fold_of_group[order] = np.arange(len(uniq)) % n_folds
    return fold_of_group[inverse]


def cv_scores(x, y, folds, candidates: Sequence[GbHyperparams], seed: int) -> np.ndarray:
    """Average held-out MSE of each candidate over the given fold labels."""
    x, y = _validate_xy(x, y)
    folds = np.asarray(folds)
    labels = np.unique(folds)
    scores = np.empty(len(candidates))
    for ci, hp in enumerate(candidates):
        mses = []
        for f in labels:
            test = folds == f
            train = ~test
            if test.sum() < 1 or train.sum() < 2:
                raise DesignError(f"fold {f} leaves too few observations")
            pred = fit_predict_gb(x[train], y[train], x[test], hp, child_seed(seed, "cv", ci, int(f)))
            mses.append(float(np.mean((pred - y[test]) ** 2)))
        scores[ci] = math.fsum(mses) / len(mses)
    return scores


def tune_cv(x, y, groups, candidates: Sequence[GbHyperparams], n_folds: int, seed: int) -> GbHyperparams:
    """Candidate with the lowest K-fold CV MSE (first one on ties)."""
    candidates = list(candidates)
    if not candidates:
        raise ConfigError("no hyperparameter candidates")
    if len(candidates) == 1:
        return candidates[0]
    folds = group_folds(groups, n_folds, seed)
    scores = cv_scores(x, y, folds, candidates, seed)
    return candidates[int(np.argmin(scores))]


DEFAULT_SPACE = {
    "eta": (0.03, 0.3),
    "n_rounds": (50, 300),
    "row_fraction": (0.5, 1.0),
    "col_fraction": (0.5, 1.0),
    "max_depth": (2, 5),
    "min_leaf": (1, 8),
}
_LOG_UNIFORM = {"eta", "n_rounds"}
_INTEGER = {"n_rounds", "max_depth", "min_leaf"}


def random_search(space: dict, n_candidates: int, seed: int) -> list:
    """Draw hyperparameter candidates; eta and n_rounds are log-uniform."""
    if n_candidates < 1:
        raise ConfigError("n_candidates must be >= 1")
    unknown = set(space) - set(DEFAULT_SPACE)
    if unknown:
        raise ConfigError(f"unknown hyperparameter(s) in search space: {', '.join(sorted(unknown))}")
    ranges = {**DEFAULT_SPACE, **{k: tuple(v) for k, v in space.items()}}
    for name, (lo, hi) in ranges.items():
        if lo > hi:
            raise ConfigError(f"empty range for {name}: [{lo}, {hi}]")
        if name in _LOG_UNIFORM and lo <= 0 and hi > lo:
            raise ConfigError(f"{name} is log-uniform and needs a positive lower bound")
    rng = stream(seed, "random_search")
    out = []
    for _ in range(n_candidates):
        draw = {}
        for name in DEFAULT_SPACE:
            lo, hi = ranges[name]
            if lo == hi:
                v = lo
            elif name in _LOG_UNIFORM:
                v = math.exp(rng.uniform(math.log(lo), math.log(hi)))
            else:
                v = rng.uniform(lo, hi)
            if name in _INTEGER:
                v = int(min(max(round(v), math.ceil(lo)), math.floor(hi))) if lo != hi else int(v)
            draw[name] = v
        out.append(GbHyperparams(**draw))
    return out


def with_overrides(hp: GbHyperparams, **kw) -> GbHyperparams:
    return replace(hp, **kw)
