"""Cluster decision points into decision regions.

An agglomerative hierarchy (ward by default) is built over standardized
decision-point states, then walked top-down breadth-first from the root.
A node is split when it is not homogeneous (for some feature, the gap
between per-action mean values across well-supported actions exceeds the
feature's threshold) or when trajectories that leave it tend to come back
within a few time steps (artificial loops would let a planner freeze time).
Nodes that pass both checks, leaves, and everything left when the split
budget runs out become the final decision regions.

Cluster membership is extended beyond the linkage subsample (and to held-out
data) by nearest-centroid assignment in the standardized space.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.cluster.hierarchy import linkage as scipy_linkage
from scipy.spatial.distance import cdist

from regionmdp.data import Dataset, Outcome
from regionmdp.decision_points import DpAnnotation
from regionmdp.errors import DataError
from regionmdp.kernel import Standardizer

_LINKAGES = ("ward", "complete", "average")


@dataclass(frozen=True)
class RegionConfig:
    linkage: str = "ward"
    homogeneity_threshold: float = 0.5  # standardized units
    feature_thresholds: dict = field(default_factory=dict)  # per-feature overrides
    loop_threshold: float = 0.25
    loop_window: int = 3
    max_splits: int = 64
    linkage_sample_cap: int = 20000
    min_action_support: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.linkage not in _LINKAGES:
            raise DataError(f"linkage must be one of {_LINKAGES}")
        if self.homogeneity_threshold <= 0 or self.loop_threshold <= 0:
            raise DataError("thresholds must be positive")
        if self.loop_window < 1:
            raise DataError("loop_window must be >= 1")
        if self.linkage_sample_cap < 2:
            raise DataError("linkage_sample_cap must be >= 2")

    def threshold_vector(self, feature_names: Sequence[str]) -> np.ndarray:
        out = np.full(len(feature_names), self.homogeneity_threshold)
        for i, name in enumerate(feature_names):
            if name in self.feature_thresholds:
                out[i] = float(self.feature_thresholds[name])
        return out


def build_hierarchy(
    dps_std: np.ndarray, cfg: RegionConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Agglomerative merge sequence over (a subsample of) the points.

    Returns (linkage matrix, row indices of the points actually linked).
    When more than linkage_sample_cap points are given, a seeded uniform
    subsample of that size is used.
    """
    dps_std = np.asarray(dps_std, dtype=np.float64)
    m = len(dps_std)
    if m < 2:
        raise DataError("need at least 2 decision points to build a hierarchy")
    if m > cfg.linkage_sample_cap:
        rng = np.random.default_rng(cfg.seed)
        sample = np.sort(rng.choice(m, size=cfg.linkage_sample_cap, replace=False))
    else:
        sample = np.arange(m)
    Z = scipy_linkage(dps_std[sample], method=cfg.linkage)
    return Z, sample


def loop_rate(label_sequences: Sequence[np.ndarray], cluster_id: int, window: int) -> float:
    """Fraction of exits from the cluster that return within `window` steps.

    An exit is a step l with label[l] == cluster_id and label[l+1] != it; a
    return means label[l+j] == cluster_id for some j in 1..window. Zero when
    the cluster is never exited.
    """
    exits = 0
    returns = 0
    for seq in label_sequences:
        length = len(seq)
        for l in range(length - 1):
            if seq[l] == cluster_id and seq[l + 1] != cluster_id:
                exits += 1
                upper = min(l + window, length - 1)
                if any(seq[j] == cluster_id for j in range(l + 1, upper + 1)):
                    returns += 1
    return returns / exits if exits else 0.0


def assign_clusters(points_std: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest-centroid labels in 1..K; exact distance ties go to the lowest id."""
    points_std = np.atleast_2d(points_std)
    return np.argmin(cdist(points_std, centroids), axis=1) + 1


@dataclass
class _TrajectoryDpLayout:
    """Where each trajectory's decision points sit, for relabeling runs."""

    lengths: list[int]
    positions: list[np.ndarray]  # step offsets of DPs within the trajectory
    dp_rows: list[np.ndarray]  # rows into the full DP matrix


def _dp_layout(dataset: Dataset, dp_mask: np.ndarray) -> _TrajectoryDpLayout:
    lengths, positions, dp_rows = [], [], []
    dp_row_of_step = np.cumsum(dp_mask) - 1
    for sl, traj in zip(dataset.trajectory_slices(), dataset.trajectories):
        mask = dp_mask[sl]
        lengths.append(len(traj))
        positions.append(np.nonzero(mask)[0])
        dp_rows.append(dp_row_of_step[sl][mask])
    return _TrajectoryDpLayout(lengths, positions, dp_rows)


def _label_sequences(
    layout: _TrajectoryDpLayout, dp_labels: np.ndarray
) -> list[np.ndarray]:
    seqs = []
    for length, pos, rows in zip(layout.lengths, layout.positions, layout.dp_rows):
        seq = np.zeros(length, dtype=np.int64)
        seq[pos] = dp_labels[rows]
        seqs.append(seq)
    return seqs


class _TopDownSplitter:
    def __init__(
        self,
        Z: np.ndarray,
        sample_points: np.ndarray,
        sample_actions: np.ndarray,
        full_points: np.ndarray,
        layout: Optional[_TrajectoryDpLayout],
        thresholds: np.ndarray,
        cfg: RegionConfig,
    ) -> None:
        self.Z = Z
        self.m = len(sample_points)
        self.points = sample_points
        self.actions = sample_actions
        self.full_points = full_points
        self.layout = layout
        self.thresholds = thresholds
        self.cfg = cfg
        self._members: dict[int, np.ndarray] = {}
        self._centroids: dict[int, np.ndarray] = {}

    def members(self, node: int) -> np.ndarray:
        cached = self._members.get(node)
        if cached is not None:
            return cached
        if node < self.m:
            out = np.array([node])
        else:
            leaves = []
            stack = [node]
            while stack:
                nd = stack.pop()
                if nd < self.m:
                    leaves.append(nd)
                else:
                    row = self.Z[nd - self.m]
                    stack.append(int(row[0]))
                    stack.append(int(row[1]))
            out = np.array(sorted(leaves))
        self._members[node] = out
        return out

    def centroid(self, node: int) -> np.ndarray:
        cached = self._centroids.get(node)
        if cached is None:
            cached = self.points[self.members(node)].mean(axis=0)
            self._centroids[node] = cached
        return cached

    def homogeneity_violated(self, members: np.ndarray) -> bool:
        acts = self.actions[members]
        means = []
        for a in np.unique(acts):
            grp = members[acts == a]
            if len(grp) >= self.cfg.min_action_support:
                means.append(self.points[grp].mean(axis=0))
        if len(means) < 2:
            return False
        stacked = np.vstack(means)
        gap = stacked.max(axis=0) - stacked.min(axis=0)  # max pairwise |diff| per feature
        return bool(np.any(gap > self.thresholds))

    def loop_violated(self, node: int, frontier: list[int]) -> bool:
        if self.layout is None:
            return False
        centroids = np.vstack([self.centroid(nd) for nd in frontier])
        labels = assign_clusters(self.full_points, centroids)
        node_label = frontier.index(node) + 1
        rate = loop_rate(_label_sequences(self.layout, labels), node_label, self.cfg.loop_window)
        return rate > self.cfg.loop_threshold

    def run(self) -> np.ndarray:
        root = 2 * self.m - 2 if self.m > 1 else 0
        queue = [root]
        final: list[int] = []
        splits = 0
        while queue:
            node = queue.pop(0)
            members = self.members(node)
            is_leaf = node < self.m
            if not is_leaf and splits < self.cfg.max_splits:
                frontier = final + queue + [node]
                if self.homogeneity_violated(members) or self.loop_violated(node, frontier):
                    row = self.Z[node - self.m]
                    queue.append(int(row[0]))
                    queue.append(int(row[1]))
                    splits += 1
                    continue
            final.append(node)
        labels = np.zeros(self.m, dtype=np.int64)
        for k, node in enumerate(final, start=1):
            labels[self.members(node)] = k
        return labels


def split_top_down(
    Z: np.ndarray,
    sample_points: np.ndarray,
    sample_actions: np.ndarray,
    cfg: RegionConfig,
    feature_names: Optional[Sequence[str]] = None,
    full_points: Optional[np.ndarray] = None,
    dataset: Optional[Dataset] = None,
    dp_mask: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Cluster ids 1..K for the linked points.

    The loop condition needs trajectory context (dataset plus the per-step
    decision-point mask over it); without it only homogeneity drives splits.
    """
    names = (
        list(feature_names)
        if feature_names is not None
        else [f"f{i}" for i in range(sample_points.shape[1])]
    )
    layout = None
    if dataset is not None and dp_mask is not None:
        layout = _dp_layout(dataset, dp_mask)
    splitter = _TopDownSplitter(
        Z,
        np.asarray(sample_points, dtype=np.float64),
        np.asarray(sample_actions, dtype=np.int64),
        np.asarray(full_points, dtype=np.float64) if full_points is not None else sample_points,
        layout,
        cfg.threshold_vector(names),
        cfg,
    )
    return splitter.run()


class RegionModel:
    """Fitted decision regions: standardizer, centroids and diagnostics."""

    def __init__(
        self,
        feature_names: tuple[str, ...],
        standardizer: Standardizer,
        centroids: np.ndarray,
        cfg: RegionConfig,
        sizes: np.ndarray,
        loop_rates: np.ndarray,
        mortality_rates: np.ndarray,
        feature_means: np.ndarray,
        action_counts: np.ndarray,
        per_action_means: Optional[np.ndarray] = None,
    ) -> None:
        self.feature_names = feature_names
        self.standardizer = standardizer
        self.centroids = centroids
        self.cfg = cfg
        self.sizes = sizes
        self.loop_rates = loop_rates
        self.mortality_rates = mortality_rates
        self.feature_means = feature_means  # raw units, (K, d)
        self.action_counts = action_counts  # (K, A) member step counts per action
        self.per_action_means = per_action_means  # raw units, (K, A, d), NaN if absent

    @property
    def n_clusters(self) -> int:
        return len(self.centroids)

    def assign(self, X_raw: np.ndarray) -> np.ndarray:
        return assign_clusters(self.standardizer.apply(X_raw), self.centroids)

    def to_json_dict(self) -> dict:
        return {
            "feature_names": list(self.feature_names),
            "standardizer_mean": self.standardizer.mean.tolist(),
            "standardizer_std": self.standardizer.std.tolist(),
            "centroids": self.centroids.tolist(),
            "config": {
                "linkage": self.cfg.linkage,
                "homogeneity_threshold": self.cfg.homogeneity_threshold,
                "feature_thresholds": dict(self.cfg.feature_thresholds),
                "loop_threshold": self.cfg.loop_threshold,
                "loop_window": self.cfg.loop_window,
                "max_splits": self.cfg.max_splits,
                "linkage_sample_cap": self.cfg.linkage_sample_cap,
                "min_action_support": self.cfg.min_action_support,
                "seed": self.cfg.seed,
            },
            "sizes": self.sizes.tolist(),
            "loop_rates": self.loop_rates.tolist(),
            "mortality_rates": self.mortality_rates.tolist(),
            "feature_means": self.feature_means.tolist(),
            "action_counts": self.action_counts.tolist(),
            "per_action_means": None
            if self.per_action_means is None
            else np.where(np.isnan(self.per_action_means), None, self.per_action_means).tolist(),
        }

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "RegionModel":
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
        pam = obj.get("per_action_means")
        if pam is not None:
            pam = np.array(
                [[[np.nan if v is None else v for v in row] for row in cl] for cl in pam]
            )
        return cls(
            feature_names=tuple(obj["feature_names"]),
            standardizer=Standardizer(
                np.array(obj["standardizer_mean"]), np.array(obj["standardizer_std"])
            ),
            centroids=np.array(obj["centroids"]),
            cfg=RegionConfig(**obj["config"]),
            sizes=np.array(obj["sizes"]),
            loop_rates=np.array(obj["loop_rates"]),
            mortality_rates=np.array(obj["mortality_rates"]),
            feature_means=np.array(obj["feature_means"]),
            action_counts=np.array(obj["action_counts"]),
            per_action_means=pam,
        )


def fit_regions(
    dataset: Dataset,
    annotations: Sequence[DpAnnotation],
    cfg: RegionConfig,
) -> tuple[RegionModel, np.ndarray]:
    """Cluster the dataset's decision points into regions.

    Returns the fitted model and per-step labels aligned with
    dataset.step_arrays() (0 for non-decision-points, 1..K otherwise).
    """
    states, actions = dataset.step_arrays()
    if len(annotations) != len(states):
        raise DataError("annotations are not aligned with dataset steps")
    dp_mask = np.array([a.is_dp for a in annotations], dtype=bool)
    n_dp = int(dp_mask.sum())
    if n_dp < 2:
        raise DataError(f"need at least 2 decision points to cluster, found {n_dp}")

    dp_states_raw = states[dp_mask]
    dp_actions = actions[dp_mask]
    standardizer = Standardizer.fit(dp_states_raw)
    dp_std = standardizer.apply(dp_states_raw)

    Z, sample = build_hierarchy(dp_std, cfg)
    sample_labels = split_top_down(
        Z,
        dp_std[sample],
        dp_actions[sample],
        cfg,
        feature_names=dataset.schema.feature_names,
        full_points=dp_std,
        dataset=dataset,
        dp_mask=dp_mask,
    )
    n_clusters = int(sample_labels.max())
    centroids = np.vstack(
        [dp_std[sample][sample_labels == k].mean(axis=0) for k in range(1, n_clusters + 1)]
    )
    dp_labels = assign_clusters(dp_std, centroids)

    # diagnostics over the full decision-point membership
    n_actions = dataset.schema.action_count
    d = dataset.schema.n_features
    sizes = np.zeros(n_clusters, dtype=np.int64)
    feature_means = np.zeros((n_clusters, d))
    action_counts = np.zeros((n_clusters, n_actions), dtype=np.int64)
    per_action_means = np.full((n_clusters, n_actions, d), np.nan)
    mortality = np.zeros(n_clusters)

    outcome_dead = np.concatenate(
        [
            np.full(len(t), t.outcome is Outcome.DEAD, dtype=bool)
            for t in dataset.trajectories
        ]
    )
    dp_dead = outcome_dead[dp_mask]
    for k in range(1, n_clusters + 1):
        mask = dp_labels == k
        sizes[k - 1] = int(mask.sum())
        if sizes[k - 1] == 0:
            continue
        feature_means[k - 1] = dp_states_raw[mask].mean(axis=0)
        mortality[k - 1] = float(dp_dead[mask].mean())
        for a in range(n_actions):
            sel = mask & (dp_actions == a)
            action_counts[k - 1, a] = int(sel.sum())
            if action_counts[k - 1, a] > 0:
                per_action_means[k - 1, a] = dp_states_raw[sel].mean(axis=0)

    layout = _dp_layout(dataset, dp_mask)
    seqs = _label_sequences(layout, dp_labels)
    loop_rates = np.array(
        [loop_rate(seqs, k, cfg.loop_window) for k in range(1, n_clusters + 1)]
    )

    model = RegionModel(
        feature_names=dataset.schema.feature_names,
        standardizer=standardizer,
        centroids=centroids,
        cfg=cfg,
        sizes=sizes,
        loop_rates=loop_rates,
        mortality_rates=mortality,
        feature_means=feature_means,
        action_counts=action_counts,
        per_action_means=per_action_means,
    )
    step_labels = np.zeros(len(states), dtype=np.int64)
    step_labels[dp_mask] = dp_labels
    return model, step_labels
