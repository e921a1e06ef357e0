"""Rank state features by how well they predict the logged behavior action.

A small bagged forest of depth-bounded trees is grown on (state, action)
pairs with Gini impurity and optional balanced class weights; mean impurity
decrease per feature, normalized to sum 1, gives the ranking used to keep
the top-K features.

Determinism contract: one master seed expands to per-tree seeds by counter,
and the candidate features tried at each split are chosen by hashing
(tree seed, node id, feature key). Feature keys default to column index, so
permuting columns together with their keys permutes the trained forest, and
its importances, exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from regionmdp.errors import DataError

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(x: int) -> int:
    x = (x + _GOLDEN) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _mix(*parts: int) -> int:
    h = _GOLDEN
    for p in parts:
        h = _splitmix64(h ^ (int(p) & _MASK64))
    return h


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_depth: int = 3
    class_weighting: str = "balanced"  # "balanced" or "uniform"
    features_per_split: Optional[int] = None  # default ceil(sqrt(d))
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_trees < 1:
            raise DataError("n_trees must be >= 1")
        if self.max_depth < 1:
            raise DataError("max_depth must be >= 1")
        if self.class_weighting not in ("balanced", "uniform"):
            raise DataError("class_weighting must be 'balanced' or 'uniform'")


@dataclass
class _Tree:
    # parallel node arrays; children index -1 marks a leaf
    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    leaf_dist: list[Optional[list[float]]] = field(default_factory=list)

    def add_node(self) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.leaf_dist.append(None)
        return len(self.feature) - 1

    def predict_dist(self, X: np.ndarray) -> np.ndarray:
        n_classes = len(next(d for d in self.leaf_dist if d is not None))
        out = np.zeros((len(X), n_classes))
        for i, row in enumerate(X):
            node = 0
            while self.left[node] != -1:
                if row[self.feature[node]] <= self.threshold[node]:
                    node = self.left[node]
                else:
                    node = self.right[node]
            out[i] = self.leaf_dist[node]
        return out


class Forest:
    """Trained ensemble plus per-feature raw impurity decreases."""

    def __init__(
        self,
        trees: list[_Tree],
        raw_importances: np.ndarray,
        n_classes: int,
        cfg: ForestConfig,
    ) -> None:
        self.trees = trees
        self.raw_importances = raw_importances
        self.n_classes = n_classes
        self.cfg = cfg

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        total = np.zeros((len(X), self.n_classes))
        for tree in self.trees:
            total += tree.predict_dist(X)
        return total / len(self.trees)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    def to_json_dict(self) -> dict:
        return {
            "n_classes": self.n_classes,
            "raw_importances": [repr(v) for v in self.raw_importances.tolist()],
            "trees": [
                {
                    "feature": t.feature,
                    "threshold": [repr(v) for v in t.threshold],
                    "left": t.left,
                    "right": t.right,
                    "leaf_dist": [
                        None if d is None else [repr(v) for v in d] for d in t.leaf_dist
                    ],
                }
                for t in self.trees
            ],
        }

    def serialize(self) -> bytes:
        return json.dumps(self.to_json_dict(), sort_keys=True).encode()


def _best_split_for_feature(
    values: np.ndarray, class_w: np.ndarray
) -> tuple[float, float]:
    """Best (impurity decrease, threshold) for one feature at one node.

    class_w holds the per-sample class-weight rows (n, K). Returns decrease
    -inf when the feature admits no split.
    """
    order = np.argsort(values, kind="stable")
    v = values[order]
    w = class_w[order]
    cum = np.cumsum(w, axis=0)
    total = cum[-1]
    w_total = total.sum()
    parent_term = w_total - float(total @ total) / w_total

    boundary = np.nonzero(v[1:] > v[:-1])[0]  # split after position i
    if len(boundary) == 0:
        return -math.inf, 0.0
    left = cum[boundary]
    right = total[None, :] - left
    wl = left.sum(axis=1)
    wr = right.sum(axis=1)
    # weighted Gini sum: W * (1 - sum (Wc/W)^2) = W - sum Wc^2 / W
    child_term = (wl - np.einsum("ij,ij->i", left, left) / wl) + (
        wr - np.einsum("ij,ij->i", right, right) / wr
    )
    decrease = parent_term - child_term
    best = int(np.argmax(decrease))
    thr = 0.5 * (v[boundary[best]] + v[boundary[best] + 1])
    return float(decrease[best]), float(thr)


def _grow_tree(
    X: np.ndarray,
    y: np.ndarray,
    sample_weight: np.ndarray,
    n_classes: int,
    cfg: ForestConfig,
    tree_seed: int,
    keys: np.ndarray,
    importances: np.ndarray,
) -> _Tree:
    n, d = X.shape
    k = cfg.features_per_split or math.ceil(math.sqrt(d))
    k = min(k, d)
    tree = _Tree()
    class_w = np.zeros((n, n_classes))
    class_w[np.arange(n), y] = sample_weight

    root = tree.add_node()
    stack = [(root, np.arange(n), 0)]
    while stack:
        node, members, depth = stack.pop(0)
        w_here = class_w[members].sum(axis=0)
        w_total = w_here.sum()
        pure = np.count_nonzero(w_here) <= 1
        if depth >= cfg.max_depth or pure or len(members) < 2:
            tree.leaf_dist[node] = (w_here / w_total).tolist()
            continue
        # candidate features: k smallest hash priorities, tried in key order
        prio = [(_mix(tree_seed, node, int(keys[j])), int(keys[j]), j) for j in range(d)]
        prio.sort()
        candidates = sorted(prio[:k], key=lambda p: p[1])
        best_gain = 0.0
        best_feat = -1
        best_thr = 0.0
        for _, _, j in candidates:
            gain, thr = _best_split_for_feature(X[members, j], class_w[members])
            if gain > best_gain:
                best_gain, best_feat, best_thr = gain, j, thr
        if best_feat == -1:
            tree.leaf_dist[node] = (w_here / w_total).tolist()
            continue
        importances[best_feat] += best_gain
        tree.feature[node] = best_feat
        tree.threshold[node] = best_thr
        go_left = X[members, best_feat] <= best_thr
        left_node = tree.add_node()
        right_node = tree.add_node()
        tree.left[node] = left_node
        tree.right[node] = right_node
        stack.append((left_node, members[go_left], depth + 1))
        stack.append((right_node, members[~go_left], depth + 1))
    return tree


def train_forest(
    X: np.ndarray,
    y: np.ndarray,
    cfg: ForestConfig,
    feature_keys: Optional[Sequence[int]] = None,
) -> Forest:
    """Grow the bagged forest on flat (state, action) pairs.

    Raises DataError when fewer than two distinct actions are present
    (nothing to split on).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise DataError("X must be (n, d) with matching y")
    if len(np.unique(y)) < 2:
        raise DataError("single-action dataset: need >= 2 distinct actions to train")
    n, d = X.shape
    n_classes = int(y.max()) + 1
    keys = (
        np.arange(d, dtype=np.int64)
        if feature_keys is None
        else np.asarray(feature_keys, dtype=np.int64)
    )
    if len(keys) != d:
        raise DataError("feature_keys length must equal the number of columns")

    counts = np.bincount(y, minlength=n_classes).astype(np.float64)
    if cfg.class_weighting == "balanced":
        present = counts > 0
        w_class = np.zeros(n_classes)
        w_class[present] = n / (present.sum() * counts[present])
    else:
        w_class = np.ones(n_classes)
    per_sample = w_class[y]

    importances = np.zeros(d)
    trees = []
    for i in range(cfg.n_trees):
        rng = np.random.default_rng([cfg.seed, i])
        boot = rng.integers(0, n, size=n)
        boot.sort()
        tree_seed = _mix(cfg.seed, i)
        trees.append(
            _grow_tree(
                X[boot], y[boot], per_sample[boot], n_classes, cfg, tree_seed, keys, importances
            )
        )
    return Forest(trees, importances, n_classes, cfg)


@dataclass(frozen=True)
class ImportanceReport:
    feature_names: tuple[str, ...]
    importances: np.ndarray  # non-negative, sums to 1

    def ranked(self) -> list[tuple[str, float]]:
        order = np.argsort(-self.importances, kind="stable")
        return [(self.feature_names[i], float(self.importances[i])) for i in order]

    def csv_rows(self) -> list[tuple[str, float, int]]:
        return [(name, score, rank + 1) for rank, (name, score) in enumerate(self.ranked())]


def feature_importances(
    forest: Forest, feature_names: Optional[Sequence[str]] = None
) -> ImportanceReport:
    """Mean impurity decrease per feature, normalized to sum 1.

    A forest that never split anywhere reports the uniform 1/d vector.
    """
    raw = forest.raw_importances
    d = len(raw)
    names = tuple(feature_names) if feature_names else tuple(f"f{i}" for i in range(d))
    if len(names) != d:
        raise DataError("feature_names length must match the trained dimension")
    total = raw.sum()
    if total <= 0.0:
        scores = np.full(d, 1.0 / d)
    else:
        scores = raw / total
    return ImportanceReport(names, scores)


def select_top_k(report: ImportanceReport, k: int) -> list[str]:
    """The k highest-importance feature names; ties break by schema order."""
    d = len(report.feature_names)
    if not 1 <= k <= d:
        raise DataError(f"k must lie in [1, {d}], got {k}")
    return [name for name, _ in report.ranked()[:k]]
