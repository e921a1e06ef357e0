"""Reward construction and value iteration on the compressed MDP.

Three reward families are supported. Piecewise rewards score each region by
averaging configured per-feature step functions over the region's member
decision points (a hypotension-style config would penalize low mean
arterial pressure and low urine output). Mortality rewards pay
1 - P(death | region, action). Terminal rewards pay the probability that
the pair transitions straight into the alive terminal.

Value iteration treats the two mortality terminals as absorbing with value
zero and maximizes over each region's valid summarized actions only.
"""

from __future__ import annotations

import json
import math
import warnings
from bisect import bisect_right
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from regionmdp.compression import CompressedMdp
from regionmdp.data import Dataset, Outcome
from regionmdp.errors import DataError, PlanningError
from regionmdp.regions import RegionModel


@dataclass(frozen=True)
class PiecewiseRule:
    feature: str
    breakpoints: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.values) != len(self.breakpoints) + 1:
            raise DataError(
                f"rule on {self.feature!r}: need len(breakpoints)+1 values"
            )
        if any(b >= c for b, c in zip(self.breakpoints, self.breakpoints[1:])):
            raise DataError(f"rule on {self.feature!r}: breakpoints must strictly increase")

    def evaluate(self, value: float) -> float:
        return self.values[bisect_right(self.breakpoints, value)]


@dataclass(frozen=True)
class RewardSpec:
    kind: str  # piecewise | mortality | terminal
    name: Optional[str] = None
    rules: tuple[PiecewiseRule, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in ("piecewise", "mortality", "terminal"):
            raise DataError("reward kind must be piecewise, mortality or terminal")
        if self.kind == "piecewise" and not self.rules:
            raise DataError("piecewise reward needs at least one rule")

    @property
    def label(self) -> str:
        return self.name or self.kind


class RewardTable:
    """R(x, a) lookup; per-state tables apply to every action at the state."""

    def __init__(
        self,
        per_state: Optional[dict[int, float]] = None,
        per_state_action: Optional[dict[tuple[int, int], float]] = None,
    ) -> None:
        if (per_state is None) == (per_state_action is None):
            raise DataError("RewardTable needs exactly one of the two value maps")
        self.per_state = per_state
        self.per_state_action = per_state_action

    def has(self, x: int, a: int) -> bool:
        if self.per_state is not None:
            return x in self.per_state
        return (x, a) in self.per_state_action

    def get(self, x: int, a: int) -> float:
        if self.per_state is not None:
            if x not in self.per_state:
                raise DataError(f"missing reward entry for state {x}")
            return self.per_state[x]
        key = (x, a)
        if key not in self.per_state_action:
            raise DataError(f"missing reward entry for state-action ({x}, {a})")
        return self.per_state_action[key]

    def max_abs(self) -> float:
        values = (
            self.per_state.values() if self.per_state is not None else self.per_state_action.values()
        )
        return max((abs(v) for v in values), default=0.0)

    def scaled(self, factor: float) -> "RewardTable":
        if self.per_state is not None:
            return RewardTable(per_state={x: v * factor for x, v in self.per_state.items()})
        return RewardTable(
            per_state_action={k: v * factor for k, v in self.per_state_action.items()}
        )

    def to_json_dict(self) -> dict:
        if self.per_state is not None:
            return {"kind": "state", "values": {str(x): v for x, v in sorted(self.per_state.items())}}
        return {
            "kind": "state_action",
            "values": {f"{x},{a}": v for (x, a), v in sorted(self.per_state_action.items())},
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "RewardTable":
        if obj["kind"] == "state":
            return cls(per_state={int(x): float(v) for x, v in obj["values"].items()})
        out = {}
        for key, v in obj["values"].items():
            x, a = key.split(",")
            out[(int(x), int(a))] = float(v)
        return cls(per_state_action=out)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "RewardTable":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


def default_hypotension_rules() -> tuple[PiecewiseRule, ...]:
    """Demo piecewise config: low MAP and low urine score negatively."""
    return (
        PiecewiseRule("map", (55.0, 65.0), (-1.0, -0.3, 0.0)),
        PiecewiseRule("urine", (30.0,), (-0.5, 0.0)),
    )


def build_rewards(
    mdp: CompressedMdp,
    region_model: RegionModel,
    spec: RewardSpec,
    dataset: Optional[Dataset] = None,
    step_labels: Optional[np.ndarray] = None,
) -> RewardTable:
    """Reward table for one spec.

    The piecewise kind averages the rule sum over each region's member
    decision points and therefore needs the labeled training data; the
    other kinds read the MDP's count tables directly.
    """
    if spec.kind == "mortality":
        values = {}
        for x in mdp.clusters:
            for a in mdp.observed_actions(x):
                values[(x, a)] = 1.0 - mdp.mortality_fraction(x, a)
        return RewardTable(per_state_action=values)
    if spec.kind == "terminal":
        values = {}
        for x in mdp.clusters:
            for a in mdp.observed_actions(x):
                values[(x, a)] = mdp.transition_dist(x, a).get(Outcome.ALIVE, 0.0)
        return RewardTable(per_state_action=values)

    # piecewise
    if dataset is None or step_labels is None:
        raise DataError("piecewise rewards need the labeled training dataset")
    names = dataset.schema.feature_names
    for rule in spec.rules:
        if rule.feature not in names:
            raise DataError(f"piecewise rule references unknown feature {rule.feature!r}")
    states, _ = dataset.step_arrays()
    step_labels = np.asarray(step_labels)
    per_state = {}
    for x in range(1, region_model.n_clusters + 1):
        members = states[step_labels == x]
        if len(members) == 0:
            per_state[x] = 0.0
            continue
        total = np.zeros(len(members))
        for rule in spec.rules:
            col = members[:, names.index(rule.feature)]
            total += np.array([rule.evaluate(v) for v in col])
        per_state[x] = float(total.mean())
    return RewardTable(per_state=per_state)


@dataclass(frozen=True)
class PlanningConfig:
    gamma: float = 0.98
    tolerance: float = 1e-8
    max_iterations: int = 10000

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma <= 1.0:
            raise DataError("gamma must lie in (0, 1]")
        if self.tolerance <= 0 or self.max_iterations < 1:
            raise DataError("tolerance and max_iterations must be positive")


@dataclass
class SolvedPolicy:
    V: dict[int, float]
    Q: dict[int, dict[int, float]]
    pi: dict[int, int]
    iterations: int
    residual: float
    dead_end_states: list[int] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "V": {str(x): v for x, v in sorted(self.V.items())},
            "Q": {
                str(x): {str(a): q for a, q in sorted(qs.items())}
                for x, qs in sorted(self.Q.items())
            },
            "pi": {str(x): a for x, a in sorted(self.pi.items())},
            "iterations": self.iterations,
            "residual": self.residual,
            "dead_end_states": self.dead_end_states,
        }

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json_dict(cls, obj: dict) -> "SolvedPolicy":
        return cls(
            V={int(x): float(v) for x, v in obj["V"].items()},
            Q={
                int(x): {int(a): float(q) for a, q in qs.items()}
                for x, qs in obj["Q"].items()
            },
            pi={int(x): int(a) for x, a in obj["pi"].items()},
            iterations=int(obj["iterations"]),
            residual=float(obj["residual"]),
            dead_end_states=[int(x) for x in obj["dead_end_states"]],
        )

    @classmethod
    def load(cls, path: str | Path) -> "SolvedPolicy":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


def value_iteration(
    mdp: CompressedMdp, rewards: RewardTable, cfg: PlanningConfig = PlanningConfig()
) -> SolvedPolicy:
    """Synchronous Bellman backups until the sup-norm update falls below
    tolerance; terminals are absorbing with value zero and ties in the
    argmax go to the lowest action id."""
    states = mdp.clusters
    valid = {x: mdp.valid_actions(x) for x in states}
    dead_ends = [x for x in states if not valid[x]]
    if dead_ends:
        warnings.warn(
            f"states with no valid action treated as terminal: {dead_ends}"
        )
    live = [x for x in states if valid[x]]
    transition = {
        x: {a: list(mdp.transition_dist(x, a).items()) for a in valid[x]} for x in live
    }
    reward = {x: {a: rewards.get(x, a) for a in valid[x]} for x in live}

    V = {x: 0.0 for x in states}
    residual = math.inf
    for iteration in range(1, cfg.max_iterations + 1):
        residual = 0.0
        new_V = dict(V)
        for x in live:
            best = -math.inf
            for a in valid[x]:
                q = reward[x][a]
                for nxt, p in transition[x][a]:
                    if isinstance(nxt, Outcome):
                        continue  # absorbing terminal, value 0
                    q += cfg.gamma * p * V.get(nxt, 0.0)
                if q > best:
                    best = q
            residual = max(residual, abs(best - V[x]))
            new_V[x] = best
        V = new_V
        if residual < cfg.tolerance:
            break
    else:
        raise PlanningError(
            f"value iteration did not converge in {cfg.max_iterations} iterations "
            f"(last residual {residual:.3e})"
        )

    Q: dict[int, dict[int, float]] = {}
    pi: dict[int, int] = {}
    for x in live:
        Q[x] = {}
        for a in valid[x]:
            q = reward[x][a]
            for nxt, p in transition[x][a]:
                if isinstance(nxt, Outcome):
                    continue
                q += cfg.gamma * p * V.get(nxt, 0.0)
            Q[x][a] = q
        best_q = max(Q[x].values())
        pi[x] = min(a for a, q in Q[x].items() if q == best_q)
        V[x] = best_q
    for x in dead_ends:
        Q[x] = {}
        V[x] = 0.0
    return SolvedPolicy(V=V, Q=Q, pi=pi, iterations=iteration, residual=residual,
                        dead_end_states=dead_ends)


def behavior_mode(mdp: CompressedMdp, x: int) -> int:
    """Most frequent logged action at the cluster, ties to the lowest id."""
    dist = mdp.behavior_dist(x)
    top = max(dist.values())
    return min(a for a, p in dist.items() if p == top)


def compare_policies(
    mdp: CompressedMdp, solved: dict[str, SolvedPolicy]
) -> tuple[list[dict], dict[str, float]]:
    """Per-cluster behavior distribution next to each variant's chosen action.

    Returns (rows, agreement) where agreement maps each policy name to the
    fraction of clusters whose chosen action equals the behavior mode.
    """
    rows = []
    agree_counts = {name: 0 for name in solved}
    clusters = mdp.clusters
    for x in clusters:
        row: dict = {
            "cluster_id": x,
            "behavior_dist": mdp.behavior_dist(x),
            "behavior_mode": behavior_mode(mdp, x),
        }
        for name, policy in solved.items():
            action = policy.pi.get(x)
            row[f"{name}_action"] = action
            if action is not None and action == row["behavior_mode"]:
                agree_counts[name] += 1
        rows.append(row)
    n = max(len(clusters), 1)
    agreement = {name: agree_counts[name] / n for name in solved}
    return rows, agreement
