"""Decision point identification.

A step's neighbors are the reference steps whose kernel similarity is at
least delta. An action is valid at the step when at least n neighbors took
it; a step with two or more valid actions is a decision point, a place
where the logged behavior genuinely varies.

Neighbor lookups run on a kd-tree over the weighted standardized
coordinates w .* x, using the exact algebraic inversion
k(x, y) >= delta  <=>  ||wx - wy|| <= sqrt(-ln delta). The tree only
prunes: every candidate is re-checked with the same exp/threshold
comparison a brute-force scan would apply, so results match a full O(N^2)
kernel scan exactly. Random-feature inner products are never used here;
their approximation error near delta = 0.95 could flip memberships.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree
from sklearn.metrics import roc_auc_score

from regionmdp.data import Dataset
from regionmdp.errors import DataError
from regionmdp.kernel import KernelModel


@dataclass(frozen=True)
class DpConfig:
    delta: float = 0.95
    min_neighbors: int = 20

    def __post_init__(self) -> None:
        if not 0.0 < self.delta <= 1.0:
            raise DataError("delta must lie in (0, 1]")
        if self.min_neighbors < 1:
            raise DataError("min_neighbors must be >= 1")


@dataclass(frozen=True)
class DpAnnotation:
    trajectory_id: str
    t: int
    neighbor_count: int
    action_support: tuple[int, ...]
    valid_actions: tuple[int, ...]
    is_dp: bool


def radius_from_delta(delta: float) -> float:
    """Neighbor radius in weighted coordinates: sqrt(-ln delta)."""
    if not 0.0 < delta <= 1.0:
        raise DataError("delta must lie in (0, 1]")
    return math.sqrt(-math.log(delta))


class NeighborIndex:
    """Exact fixed-radius queries over one reference dataset."""

    def __init__(self, model: KernelModel, reference: Dataset) -> None:
        states, actions = reference.step_arrays()
        if len(states) == 0:
            raise DataError("reference dataset has no steps")
        self.model = model
        self.coords = model.weighted_coords(states)
        self.actions = actions
        self.n_actions = reference.schema.action_count
        self.tree = cKDTree(self.coords)

    def __len__(self) -> int:
        return len(self.coords)

    def neighbors(
        self,
        query_coords: np.ndarray,
        delta: float,
        exclude_index: Optional[np.ndarray] = None,
    ) -> list[np.ndarray]:
        """Neighbor row indices for each query row.

        exclude_index, when given, drops exclude_index[i] from query i's
        result (self-exclusion for in-dataset queries).
        """
        query_coords = np.atleast_2d(query_coords)
        radius = radius_from_delta(delta)
        # pad the prune radius; membership is decided by the exact test below
        padded = radius * (1.0 + 1e-9) + 1e-12
        candidate_lists = self.tree.query_ball_point(query_coords, padded)
        out = []
        for i, cands in enumerate(candidate_lists):
            cands = np.asarray(cands, dtype=np.intp)
            diff = self.coords[cands] - query_coords[i]
            sim = np.exp(-np.einsum("ij,ij->i", diff, diff))
            keep = cands[sim >= delta]
            if exclude_index is not None:
                keep = keep[keep != exclude_index[i]]
            keep.sort()
            out.append(keep)
        return out


def annotate_dataset(
    dataset: Dataset,
    model: KernelModel,
    cfg: DpConfig,
    reference: Optional[Dataset] = None,
) -> list[DpAnnotation]:
    """One annotation per step, aligned with dataset.step_keys().

    With no explicit reference the dataset is annotated against itself and
    each step is excluded from its own neighborhood. An explicit reference
    (for held-out data, queried against the train population) disables
    self-exclusion.
    """
    self_ref = reference is None
    index = NeighborIndex(model, dataset if self_ref else reference)
    states, _ = dataset.step_arrays()
    coords = model.weighted_coords(states)
    exclude = np.arange(len(coords)) if self_ref else None
    neighbor_lists = index.neighbors(coords, cfg.delta, exclude_index=exclude)

    annotations = []
    keys = dataset.step_keys()
    for (traj_id, t), nbrs in zip(keys, neighbor_lists):
        support = np.bincount(index.actions[nbrs], minlength=index.n_actions)
        valid = tuple(int(a) for a in np.nonzero(support >= cfg.min_neighbors)[0])
        annotations.append(
            DpAnnotation(
                trajectory_id=traj_id,
                t=t,
                neighbor_count=int(len(nbrs)),
                action_support=tuple(int(c) for c in support),
                valid_actions=valid,
                is_dp=len(valid) >= 2,
            )
        )
    return annotations


def _macro_auc(y_true: np.ndarray, probs: np.ndarray) -> float:
    """One-vs-rest AUC macro-averaged over actions present in the sample."""
    scores = []
    for a in np.unique(y_true):
        mask = y_true == a
        if 0 < mask.sum() < len(y_true):
            scores.append(roc_auc_score(mask, probs[:, a]))
    if not scores:
        return 0.5
    return float(np.mean(scores))


def tune_dp_config(
    dataset: Dataset,
    model: KernelModel,
    grid: Sequence[tuple[float, int]],
    sample_size: int = 5000,
    rounds: int = 5,
    seed: int = 0,
) -> tuple[DpConfig, list[tuple[float, int, float]]]:
    """Grid-search (delta, n) by neighborhood action-prediction AUC.

    Each round draws a fresh sample of steps; every sampled step's action
    distribution is predicted as the empirical action distribution of its
    delta-neighbors (uniform when the step has fewer than n neighbors, since
    such a neighborhood cannot support valid-action inference), and scored
    by macro one-vs-rest AUC against the action actually taken. Scores
    average over rounds; the best cell wins, ties to earlier grid entries.
    """
    if not grid:
        raise DataError("empty tuning grid")
    index = NeighborIndex(model, dataset)
    states, actions = dataset.step_arrays()
    coords = model.weighted_coords(states)
    n_steps = len(coords)
    n_actions = index.n_actions
    rng = np.random.default_rng(seed)
    deltas = sorted({d for d, _ in grid}, reverse=True)

    totals = {cell: 0.0 for cell in grid}
    empty_cells = set()
    for _ in range(rounds):
        sample = rng.choice(n_steps, size=min(sample_size, n_steps), replace=False)
        sample.sort()
        y_sample = actions[sample]
        counts_by_delta = {}
        for delta in deltas:
            nbrs = index.neighbors(coords[sample], delta, exclude_index=sample)
            counts = np.zeros((len(sample), n_actions))
            for i, lst in enumerate(nbrs):
                counts[i] = np.bincount(index.actions[lst], minlength=n_actions)
            counts_by_delta[delta] = counts
        for delta, n in grid:
            counts = counts_by_delta[delta]
            totals_per_point = counts.sum(axis=1)
            if np.all(totals_per_point == 0):
                empty_cells.add((delta, n))
                totals[(delta, n)] += 0.5
                continue
            probs = np.full((len(sample), n_actions), 1.0 / n_actions)
            informative = totals_per_point >= n
            probs[informative] = counts[informative] / totals_per_point[informative, None]
            totals[(delta, n)] += _macro_auc(y_sample, probs)

    for cell in empty_cells:
        warnings.warn(
            f"tuning cell delta={cell[0]}, n={cell[1]}: no sampled point had any "
            "neighbor; scored 0.5"
        )
    rows = [(delta, n, totals[(delta, n)] / rounds) for delta, n in grid]
    best_score = max(r[2] for r in rows)
    best_delta, best_n = next((d, n) for d, n, s in rows if s == best_score)
    return DpConfig(delta=best_delta, min_neighbors=best_n), rows
