"""Compress labeled trajectories onto the decision-region graph.

Walking a trajectory's per-step cluster labels (0 marks a non-decision
point), a new compressed state is appended whenever a labeled step differs
from the previous step's label, so contiguous same-cluster runs condense to
one state and non-DP stretches separate runs. Actions taken during one run
are folded into a single summarized action; actions at non-DP steps are
discarded. Every compressed trajectory ends in the mortality terminal, and
the run-summarized action sequence is exactly one shorter than the state
sequence including that terminal.

The compressed MDP is the maximum-likelihood tabular model over these
sequences: behavior policy = action count ratios per cluster, transitions =
next-state count ratios per (cluster, action). Counts are kept alongside
the probabilities so rewards and evaluation can be recomputed downstream.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence, Union


from regionmdp.data import Outcome, Schema, Trajectory
from regionmdp.errors import DataError

State = Union[int, Outcome]  # cluster id or terminal


@dataclass(frozen=True)
class SummaryFn:
    """How a within-region run of actions folds into one summarized action."""

    mode: str = "bit_or"  # bit_or | first | majority

    def __post_init__(self) -> None:
        if self.mode not in ("bit_or", "first", "majority"):
            raise DataError("summary mode must be bit_or, first or majority")


def summarize_actions(
    actions: Sequence[int], fn: SummaryFn, schema: Optional[Schema] = None
) -> int:
    """Fold a non-empty action run into one action.

    bit_or ORs the actions' treatment bitmasks and maps the result back to
    an action id (with no schema bitmasks the id doubles as its mask), so a
    run that gave fluids then vasopressors summarizes to "both". first and
    majority are positional; majority ties resolve to the lowest id.
    """
    if len(actions) == 0:
        raise DataError("cannot summarize an empty action run")
    if fn.mode == "first":
        return int(actions[0])
    if fn.mode == "majority":
        counts = Counter(int(a) for a in actions)
        top = max(counts.values())
        return min(a for a, c in counts.items() if c == top)
    mask = 0
    for a in actions:
        mask |= schema.bitmask_of(int(a)) if schema is not None else int(a)
    if schema is not None:
        return schema.action_of_bitmask(mask)
    return mask


@dataclass(frozen=True)
class CompressedTrajectory:
    """Region visits plus summarized actions, ending in the mortality state.

    clusters holds the non-terminal compressed states; the full state list
    is clusters + (outcome,), so len(actions) == len(clusters) always.
    """

    id: str
    clusters: tuple[int, ...]
    actions: tuple[int, ...]
    outcome: Outcome

    def __post_init__(self) -> None:
        if len(self.actions) != len(self.clusters):
            raise DataError(
                f"compressed trajectory {self.id!r}: {len(self.actions)} actions "
                f"for {len(self.clusters)} non-terminal states"
            )

    def states(self) -> tuple[State, ...]:
        return self.clusters + (self.outcome,)

    def transitions(self) -> Iterator[tuple[int, int, State]]:
        states = self.states()
        for j, a in enumerate(self.actions):
            yield states[j], a, states[j + 1]


def compress_trajectory(
    traj: Trajectory,
    labels: Sequence[int],
    fn: SummaryFn = SummaryFn(),
    schema: Optional[Schema] = None,
) -> CompressedTrajectory:
    """Compress one trajectory given its per-step cluster labels.

    The comparison that opens a new compressed state is against the previous
    step's label, updated every step including non-DP steps, so a run broken
    by a non-DP stretch re-enters the same cluster as a fresh state (a
    self-transition in the compressed MDP).
    """
    if len(labels) != len(traj):
        raise DataError(
            f"trajectory {traj.id!r}: {len(labels)} labels for {len(traj)} steps"
        )
    clusters: list[int] = []
    summarized: list[int] = []
    buffer: list[int] = []
    prev = 0
    length = len(traj)
    for l in range(length):
        c = int(labels[l])
        if c > 0:
            buffer.append(int(traj.actions[l]))
            if c != prev:
                clusters.append(c)
            if l == length - 1 or int(labels[l + 1]) != c:
                summarized.append(summarize_actions(buffer, fn, schema))
                buffer = []
        prev = c
    return CompressedTrajectory(traj.id, tuple(clusters), tuple(summarized), traj.outcome)


class CompressedMdp:
    """Tabular MDP over decision regions plus the two absorbing terminals."""

    def __init__(
        self,
        transition_counts: dict[int, dict[int, dict[State, int]]],
        dead_counts: dict[int, dict[int, int]],
        min_action_count: int,
        n_trajectories: int,
        n_empty_trajectories: int,
    ) -> None:
        self.transition_counts = transition_counts
        self.dead_counts = dead_counts
        self.min_action_count = min_action_count
        self.n_trajectories = n_trajectories
        self.n_empty_trajectories = n_empty_trajectories

    @property
    def clusters(self) -> list[int]:
        return sorted(self.transition_counts)

    def action_count(self, x: int, a: int) -> int:
        return sum(self.transition_counts.get(x, {}).get(a, {}).values())

    def visit_count(self, x: int) -> int:
        return sum(self.action_count(x, a) for a in self.transition_counts.get(x, {}))

    def observed_actions(self, x: int) -> list[int]:
        return sorted(self.transition_counts.get(x, {}))

    def valid_actions(self, x: int) -> list[int]:
        return [
            a
            for a in self.observed_actions(x)
            if self.action_count(x, a) >= self.min_action_count
        ]

    def behavior_prob(self, x: int, a: int) -> float:
        visits = self.visit_count(x)
        if visits == 0:
            return 0.0
        return self.action_count(x, a) / visits

    def behavior_dist(self, x: int) -> dict[int, float]:
        return {a: self.behavior_prob(x, a) for a in self.observed_actions(x)}

    def transition_dist(self, x: int, a: int) -> dict[State, float]:
        counts = self.transition_counts.get(x, {}).get(a, {})
        total = sum(counts.values())
        if total == 0:
            return {}
        return {nxt: c / total for nxt, c in counts.items()}

    def mortality_fraction(self, x: int, a: int) -> float:
        count = self.action_count(x, a)
        if count == 0:
            return 0.0
        return self.dead_counts.get(x, {}).get(a, 0) / count

    def to_json_dict(self) -> dict:
        def state_key(s: State) -> str:
            return s.value if isinstance(s, Outcome) else str(s)

        return {
            "min_action_count": self.min_action_count,
            "n_trajectories": self.n_trajectories,
            "n_empty_trajectories": self.n_empty_trajectories,
            "transition_counts": {
                str(x): {
                    str(a): {state_key(nxt): c for nxt, c in sorted(d.items(), key=lambda kv: state_key(kv[0]))}
                    for a, d in sorted(adict.items())
                }
                for x, adict in sorted(self.transition_counts.items())
            },
            "dead_counts": {
                str(x): {str(a): c for a, c in sorted(adict.items())}
                for x, adict in sorted(self.dead_counts.items())
            },
        }

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json_dict(cls, obj: dict) -> "CompressedMdp":
        def parse_state(key: str) -> State:
            if key in (Outcome.ALIVE.value, Outcome.DEAD.value):
                return Outcome(key)
            return int(key)

        trans = {
            int(x): {
                int(a): {parse_state(nxt): int(c) for nxt, c in d.items()}
                for a, d in adict.items()
            }
            for x, adict in obj["transition_counts"].items()
        }
        dead = {
            int(x): {int(a): int(c) for a, c in adict.items()}
            for x, adict in obj["dead_counts"].items()
        }
        return cls(
            trans,
            dead,
            int(obj["min_action_count"]),
            int(obj["n_trajectories"]),
            int(obj["n_empty_trajectories"]),
        )

    @classmethod
    def load(cls, path: str | Path) -> "CompressedMdp":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


def estimate_mdp(
    ctrajs: Iterable[CompressedTrajectory], min_action_count: int = 20
) -> CompressedMdp:
    """Count-ratio MDP estimate over compressed trajectories.

    Trajectories that visited no decision region contribute no transitions;
    they are tallied in n_empty_trajectories.
    """
    transition_counts: dict[int, dict[int, dict[State, int]]] = {}
    dead_counts: dict[int, dict[int, int]] = {}
    n_total = 0
    n_empty = 0
    for ct in ctrajs:
        n_total += 1
        if not ct.clusters:
            n_empty += 1
            continue
        is_dead = ct.outcome is Outcome.DEAD
        for x, a, nxt in ct.transitions():
            bucket = transition_counts.setdefault(x, {}).setdefault(a, {})
            bucket[nxt] = bucket.get(nxt, 0) + 1
            if is_dead:
                dx = dead_counts.setdefault(x, {})
                dx[a] = dx.get(a, 0) + 1
    if n_total == 0:
        raise DataError("estimate_mdp needs at least one compressed trajectory")
    return CompressedMdp(transition_counts, dead_counts, min_action_count, n_total, n_empty)


def save_compressed(ctrajs: Sequence[CompressedTrajectory], path: str | Path) -> None:
    """JSONL, one trajectory per line; xbar ends in the mortality state."""
    with open(path, "w", encoding="utf-8") as fh:
        for ct in ctrajs:
            obj = {
                "id": ct.id,
                "xbar": list(ct.clusters) + [ct.outcome.value],
                "abar": list(ct.actions),
                "outcome": ct.outcome.value,
            }
            fh.write(json.dumps(obj) + "\n")


def load_compressed(path: str | Path) -> list[CompressedTrajectory]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            outcome = Outcome(obj["outcome"])
            xbar = obj["xbar"]
            if not xbar or xbar[-1] != outcome.value:
                raise DataError(f"line {lineno}: xbar must end in the trajectory outcome")
            out.append(
                CompressedTrajectory(
                    id=str(obj["id"]),
                    clusters=tuple(int(x) for x in xbar[:-1]),
                    actions=tuple(int(a) for a in obj["abar"]),
                    outcome=outcome,
                )
            )
    return out
