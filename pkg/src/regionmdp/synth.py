"""Synthetic trajectory generator with planted decision regions.

Ground truth for end-to-end validation: trajectories drift along a constant
flow through a 2-d informative plane (optional extra dimensions carry pure
noise). Inside a planted circular region the flow is damped (patients
dwell) and the behavior policy mixes the region's action set; outside, a
single consensus action is taken, so the only true decision points are the
in-region steps. Taking a region's non-optimal action raises the final
death probability through a logistic in the number of suboptimal steps,
which makes the planted optimal action identifiable to a planner.

Everything is deterministic given the seed; per-trajectory generators are
derived by counter.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.metrics import adjusted_rand_score

from regionmdp.data import Dataset, Outcome, Schema, Trajectory
from regionmdp.decision_points import DpAnnotation
from regionmdp.errors import DataError


@dataclass(frozen=True)
class PlantedRegion:
    center: tuple[float, float]
    radius: float
    actions: tuple[int, ...]
    optimal_action: int

    def __post_init__(self) -> None:
        if self.radius <= 0:
            raise DataError("region radius must be positive")
        if self.optimal_action not in self.actions:
            raise DataError("optimal_action must be in the region's action set")

    def contains(self, point: np.ndarray) -> bool:
        dx = point[0] - self.center[0]
        dy = point[1] - self.center[1]
        return dx * dx + dy * dy <= self.radius * self.radius


@dataclass(frozen=True)
class SynthSpec:
    regions: tuple[PlantedRegion, ...]
    n_actions: int = 4
    n_noise_dims: int = 2
    flow: tuple[float, float] = (0.3, 0.3)
    region_damping: float = 0.5  # flow multiplier while inside a region
    drift: dict = field(default_factory=dict)  # per-action extra increment
    noise_std: float = 0.05
    horizon: int = 30
    n_trajectories: int = 2000
    start_low: tuple[float, float] = (-4.0, -4.0)
    start_high: tuple[float, float] = (0.0, 0.0)
    consensus_action: int = 0
    action_persistence: float = 0.85
    mix_probability: float = 1.0  # chance an in-region step uses the mixed set
    base_logit: float = -2.5
    hazard_per_suboptimal: float = 0.35
    seed: int = 0

    def __post_init__(self) -> None:
        if self.horizon < 1 or self.n_trajectories < 1:
            raise DataError("horizon and n_trajectories must be positive")
        if not 0.0 <= self.mix_probability <= 1.0:
            raise DataError("mix_probability must lie in [0, 1]")
        for region in self.regions:
            if any(a >= self.n_actions for a in region.actions):
                raise DataError("region actions must fit the action count")

    @property
    def feature_names(self) -> tuple[str, ...]:
        return ("x0", "x1") + tuple(f"noise{i}" for i in range(self.n_noise_dims))


@dataclass
class SynthTruth:
    """Per-step oracle labels aligned with the generated dataset's steps."""

    keys: list[tuple[str, int]]
    oracle_dp: np.ndarray
    region_id: np.ndarray  # 1-based planted region index, 0 outside
    optimal_action: np.ndarray  # -1 outside regions
    region_optimal: dict[int, int]  # planted region id -> optimal action

    def lookup(self, keys: Sequence[tuple[str, int]]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(oracle_dp, region_id, optimal_action) rows for the given keys."""
        by_key = {k: i for i, k in enumerate(self.keys)}
        idx = np.array([by_key[k] for k in keys], dtype=np.intp)
        return self.oracle_dp[idx], self.region_id[idx], self.optimal_action[idx]

    def csv_rows(self) -> list[tuple]:
        return [
            (tid, t, int(self.oracle_dp[i]), int(self.region_id[i]), int(self.optimal_action[i]))
            for i, (tid, t) in enumerate(self.keys)
        ]


def reference_spec(seed: int = 0, n_trajectories: int = 2000, horizon: int = 30) -> SynthSpec:
    """Two planted regions with overlapping action sets along the flow path.

    Region A mixes actions {0, 1} (optimal 1), region B mixes {0, 2}
    (optimal 2). The non-shared actions separate the regions through the
    homogeneity condition at the clustering root while each region stays
    homogeneous; sharing action 0 with the outside consensus keeps
    boundary contamination from inventing spurious healthy action arms.
    """
    return SynthSpec(
        regions=(
            PlantedRegion(center=(-1.0, -1.0), radius=1.0, actions=(0, 1), optimal_action=1),
            PlantedRegion(center=(1.8, 1.8), radius=1.0, actions=(0, 2), optimal_action=2),
        ),
        region_damping=0.4,
        n_trajectories=n_trajectories,
        horizon=horizon,
        seed=seed,
    )


def _find_region(regions: Sequence[PlantedRegion], point: np.ndarray) -> int:
    for i, region in enumerate(regions):
        if region.contains(point):
            return i
    return -1


def generate(spec: SynthSpec) -> tuple[Dataset, SynthTruth]:
    """Sample the dataset and its oracle labels."""
    if not any(len(r.actions) >= 2 for r in spec.regions) or spec.mix_probability == 0.0:
        warnings.warn("spec plants no mixed-action region; no decision points will exist")
    schema = Schema(spec.feature_names, spec.n_actions)
    d_noise = spec.n_noise_dims
    flow = np.asarray(spec.flow, dtype=np.float64)
    drift = {int(a): np.asarray(v, dtype=np.float64) for a, v in spec.drift.items()}
    zero = np.zeros(2)

    trajectories = []
    keys: list[tuple[str, int]] = []
    oracle_rows, region_rows, optimal_rows = [], [], []
    for i in range(spec.n_trajectories):
        rng = np.random.default_rng([spec.seed, i])
        pos = rng.uniform(spec.start_low, spec.start_high)
        states = np.empty((spec.horizon, 2 + d_noise))
        actions = np.empty(spec.horizon, dtype=np.int64)
        traj_id = f"s{i:05d}"
        n_suboptimal = 0
        held_action = -1
        prev_region = -1
        for t in range(spec.horizon):
            region_idx = _find_region(spec.regions, pos)
            if region_idx >= 0:
                region = spec.regions[region_idx]
                mixing = spec.mix_probability >= 1.0 or rng.random() < spec.mix_probability
                if not mixing:
                    # falling back to the outside consensus keeps the
                    # mix -> 0 limit free of behavioral boundaries
                    a = spec.consensus_action
                    held_action = -1
                else:
                    fresh = (
                        region_idx != prev_region
                        or held_action not in region.actions
                        or rng.random() >= spec.action_persistence
                    )
                    if fresh:
                        held_action = int(region.actions[rng.integers(len(region.actions))])
                    a = held_action
                if a != region.optimal_action:
                    n_suboptimal += 1
                speed = spec.region_damping
            else:
                a = spec.consensus_action
                held_action = -1
                speed = 1.0
            states[t, :2] = pos
            if d_noise:
                states[t, 2:] = rng.normal(0.0, 1.0, size=d_noise)
            actions[t] = a
            keys.append((traj_id, t))
            oracle_rows.append(
                region_idx >= 0
                and len(spec.regions[region_idx].actions) >= 2
                and spec.mix_probability > 0.0
            )
            region_rows.append(region_idx + 1)
            optimal_rows.append(
                spec.regions[region_idx].optimal_action if region_idx >= 0 else -1
            )
            prev_region = region_idx
            pos = (
                pos
                + flow * speed
                + drift.get(int(a), zero)
                + rng.normal(0.0, spec.noise_std, size=2)
            )
        p_dead = 1.0 / (1.0 + math.exp(-(spec.base_logit + spec.hazard_per_suboptimal * n_suboptimal)))
        outcome = Outcome.DEAD if rng.random() < p_dead else Outcome.ALIVE
        trajectories.append(Trajectory(traj_id, states, actions, outcome))

    truth = SynthTruth(
        keys=keys,
        oracle_dp=np.array(oracle_rows, dtype=bool),
        region_id=np.array(region_rows, dtype=np.int64),
        optimal_action=np.array(optimal_rows, dtype=np.int64),
        region_optimal={i + 1: r.optimal_action for i, r in enumerate(spec.regions)},
    )
    return Dataset(schema, trajectories), truth


def score_recovery(
    truth: SynthTruth,
    annotations: Sequence[DpAnnotation],
    step_labels: np.ndarray,
    policy: Optional[dict[int, int]] = None,
) -> dict[str, float]:
    """Recovery metrics against the oracle labels.

    annotations and step_labels must be aligned with each other; their keys
    select the matching truth rows, so scoring a train split of a generated
    dataset works directly. The policy, when given, is checked per planted
    region against the region's majority recovered cluster.
    """
    keys = [(a.trajectory_id, a.t) for a in annotations]
    oracle_dp, region_id, _ = truth.lookup(keys)
    recovered_dp = np.array([a.is_dp for a in annotations], dtype=bool)
    step_labels = np.asarray(step_labels)
    if len(step_labels) != len(keys):
        raise DataError("step_labels are not aligned with annotations")

    tp = float(np.sum(recovered_dp & oracle_dp))
    fp = float(np.sum(recovered_dp & ~oracle_dp))
    fn = float(np.sum(~recovered_dp & oracle_dp))
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0

    mask = oracle_dp
    ari = (
        float(adjusted_rand_score(region_id[mask], step_labels[mask]))
        if mask.any()
        else 0.0
    )

    metrics = {
        "dp_precision": precision,
        "dp_recall": recall,
        "region_ari": ari,
        "n_true_dp": float(oracle_dp.sum()),
        "n_recovered_dp": float(recovered_dp.sum()),
    }
    if policy is not None:
        matches = 0
        for rid, optimal in truth.region_optimal.items():
            members = step_labels[mask & (region_id == rid)]
            members = members[members > 0]
            if len(members) == 0:
                continue
            majority_cluster = int(np.bincount(members).argmax())
            if policy.get(majority_cluster) == optimal:
                matches += 1
        metrics["optimal_action_fraction"] = (
            matches / len(truth.region_optimal) if truth.region_optimal else 0.0
        )
    return metrics
