"""Core domain types, dataset ingestion, and trajectory-level splitting.

A dataset is an ordered collection of trajectories. Each trajectory is a
sequence of (state vector, action id) steps indexed by consecutive integer
time bins, closed by a single terminal outcome (alive or dead). States are
stored per trajectory as a read-only float64 matrix.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from regionmdp.errors import DataError


class Outcome(str, Enum):
    ALIVE = "alive"
    DEAD = "dead"

    @classmethod
    def parse(cls, text: str) -> "Outcome":
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise DataError(f"unknown outcome {text!r} (expected 'alive' or 'dead')")


@dataclass(frozen=True)
class Schema:
    """Feature ordering and action-set definition for a dataset.

    action_bitmasks optionally maps each action id to an integer mask of
    binary treatment indicators; masks must round-trip (one id per mask).
    When absent, the action id itself is used as its mask.
    """

    feature_names: tuple[str, ...]
    action_count: int
    action_bitmasks: Optional[tuple[int, ...]] = None

    def __post_init__(self) -> None:
        if len(set(self.feature_names)) != len(self.feature_names):
            raise DataError("schema feature names must be unique")
        if self.action_count < 1:
            raise DataError("schema needs at least one action")
        if self.action_bitmasks is not None:
            if len(self.action_bitmasks) != self.action_count:
                raise DataError("action_bitmasks length must equal action_count")
            if len(set(self.action_bitmasks)) != len(self.action_bitmasks):
                raise DataError("action_bitmasks must be distinct (masks round-trip to ids)")

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def bitmask_of(self, action: int) -> int:
        if self.action_bitmasks is None:
            return action
        return self.action_bitmasks[action]

    def action_of_bitmask(self, mask: int) -> int:
        if self.action_bitmasks is None:
            if 0 <= mask < self.action_count:
                return mask
            raise DataError(f"bitmask {mask} does not map to any action id")
        try:
            return self.action_bitmasks.index(mask)
        except ValueError:
            raise DataError(f"bitmask {mask} does not map to any action id")

    def to_json_dict(self) -> dict:
        out: dict = {
            "features": list(self.feature_names),
            "action_count": self.action_count,
        }
        if self.action_bitmasks is not None:
            out["action_bitmasks"] = list(self.action_bitmasks)
        return out

    @classmethod
    def from_json_dict(cls, obj: dict) -> "Schema":
        masks = obj.get("action_bitmasks")
        return cls(
            feature_names=tuple(obj["features"]),
            action_count=int(obj["action_count"]),
            action_bitmasks=tuple(int(m) for m in masks) if masks is not None else None,
        )


@dataclass(frozen=True)
class Step:
    trajectory_id: str
    t: int
    state: np.ndarray
    action: int


class Trajectory:
    """One trajectory: consecutive steps plus a terminal outcome.

    Immutable after construction; the state matrix is marked read-only.
    """

    __slots__ = ("id", "states", "actions", "t0", "outcome")

    def __init__(
        self,
        traj_id: str,
        states: np.ndarray,
        actions: np.ndarray,
        outcome: Outcome,
        t0: int = 0,
    ) -> None:
        states = np.asarray(states, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.int64)
        if states.ndim != 2 or len(states) == 0:
            raise DataError(f"trajectory {traj_id!r} must have a non-empty 2d state matrix")
        if len(actions) != len(states):
            raise DataError(f"trajectory {traj_id!r}: states and actions length mismatch")
        if not np.all(np.isfinite(states)):
            raise DataError(f"trajectory {traj_id!r} contains non-finite state values")
        states = states.copy()
        states.flags.writeable = False
        actions = actions.copy()
        actions.flags.writeable = False
        self.id = traj_id
        self.states = states
        self.actions = actions
        self.t0 = int(t0)
        self.outcome = outcome

    def __len__(self) -> int:
        return len(self.actions)

    def steps(self) -> Iterator[Step]:
        for i in range(len(self)):
            yield Step(self.id, self.t0 + i, self.states[i], int(self.actions[i]))


class Dataset:
    """A schema plus an ordered list of trajectories."""

    def __init__(self, schema: Schema, trajectories: Sequence[Trajectory]) -> None:
        for traj in trajectories:
            if traj.states.shape[1] != schema.n_features:
                raise DataError(
                    f"trajectory {traj.id!r} has {traj.states.shape[1]} features, "
                    f"schema defines {schema.n_features}"
                )
            bad = (traj.actions < 0) | (traj.actions >= schema.action_count)
            if np.any(bad):
                raise DataError(f"trajectory {traj.id!r} uses action ids outside the schema")
        self.schema = schema
        self.trajectories = list(trajectories)

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def n_steps(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def step_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """All steps stacked: (states [N, d], actions [N])."""
        if not self.trajectories:
            d = self.schema.n_features
            return np.zeros((0, d)), np.zeros(0, dtype=np.int64)
        states = np.concatenate([t.states for t in self.trajectories], axis=0)
        actions = np.concatenate([t.actions for t in self.trajectories], axis=0)
        return states, actions

    def step_keys(self) -> list[tuple[str, int]]:
        """(trajectory_id, t) for every stacked step, aligned with step_arrays."""
        keys: list[tuple[str, int]] = []
        for traj in self.trajectories:
            keys.extend((traj.id, traj.t0 + i) for i in range(len(traj)))
        return keys

    def trajectory_slices(self) -> list[slice]:
        """Stacked-array slice of each trajectory, aligned with step_arrays."""
        out = []
        start = 0
        for traj in self.trajectories:
            out.append(slice(start, start + len(traj)))
            start += len(traj)
        return out

    def restrict_features(self, names: Sequence[str]) -> "Dataset":
        """New dataset keeping only the named feature columns, in the given order."""
        idx = []
        for name in names:
            if name not in self.schema.feature_names:
                raise DataError(f"unknown feature {name!r}")
            idx.append(self.schema.feature_names.index(name))
        schema = Schema(tuple(names), self.schema.action_count, self.schema.action_bitmasks)
        trajs = [
            Trajectory(t.id, t.states[:, idx], t.actions, t.outcome, t.t0)
            for t in self.trajectories
        ]
        return Dataset(schema, trajs)


def _infer_schema_from_header(header: list[str]) -> tuple[Schema, list[str]]:
    expected_fixed = {"trajectory_id", "t", "action", "outcome"}
    if header[:2] != ["trajectory_id", "t"] or header[-2:] != ["action", "outcome"]:
        raise DataError(
            "CSV header must be trajectory_id,t,<features...>,action,outcome; got "
            + ",".join(header)
        )
    feature_names = [h for h in header[2:-2]]
    if any(name in expected_fixed for name in feature_names):
        raise DataError("feature columns may not reuse reserved column names")
    if not feature_names:
        raise DataError("CSV defines no feature columns")
    # Action count is inferred from data when no explicit schema is given.
    return Schema(tuple(feature_names), action_count=1), feature_names


def _build_trajectories(
    rows_by_traj: dict[str, list[tuple[int, int, np.ndarray, int, Outcome]]],
    schema: Optional[Schema],
    feature_names: list[str],
) -> Dataset:
    if not rows_by_traj:
        raise DataError("no trajectories")
    max_action = 0
    trajs = []
    for traj_id, rows in rows_by_traj.items():
        rows.sort(key=lambda r: r[1])
        seen_t = {}
        for rownum, t, _, _, _ in rows:
            if t in seen_t:
                raise DataError(
                    f"duplicate (trajectory_id, t) = ({traj_id!r}, {t}) at row {rownum}"
                )
            seen_t[t] = rownum
        t_values = [r[1] for r in rows]
        for prev, cur, rownum in zip(t_values, t_values[1:], [r[0] for r in rows[1:]]):
            if cur != prev + 1:
                raise DataError(f"gap in time index at row {rownum}")
        outcomes = {r[4] for r in rows}
        if len(outcomes) != 1:
            raise DataError(f"trajectory {traj_id!r} has inconsistent outcome labels")
        states = np.array([r[2] for r in rows], dtype=np.float64)
        actions = np.array([r[3] for r in rows], dtype=np.int64)
        max_action = max(max_action, int(actions.max()))
        trajs.append(Trajectory(traj_id, states, actions, rows[0][4], t0=t_values[0]))
    if schema is None:
        schema = Schema(tuple(feature_names), action_count=max_action + 1)
    return Dataset(schema, trajs)


def _load_csv(path: Path, schema: Optional[Schema]) -> Dataset:
    rows_by_traj: dict[str, list[tuple[int, int, np.ndarray, int, Outcome]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("no trajectories")
        if schema is not None:
            expected = (
                ["trajectory_id", "t"] + list(schema.feature_names) + ["action", "outcome"]
            )
            if header != expected:
                raise DataError(
                    "CSV header does not match schema; expected " + ",".join(expected)
                )
            feature_names = list(schema.feature_names)
        else:
            _, feature_names = _infer_schema_from_header(header)
        d = len(feature_names)
        # row numbers in errors count data rows, excluding the header
        for rownum, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != d + 4:
                raise DataError(f"malformed row {rownum}: expected {d + 4} fields, got {len(row)}")
            traj_id = row[0]
            try:
                t = int(row[1])
            except ValueError:
                raise DataError(f"malformed row {rownum}: bad time index {row[1]!r}")
            try:
                feats = np.array([float(v) for v in row[2 : 2 + d]], dtype=np.float64)
            except ValueError:
                raise DataError(f"malformed row {rownum}: non-numeric feature value")
            if not np.all(np.isfinite(feats)):
                raise DataError(f"non-finite feature at row {rownum}")
            try:
                action = int(row[2 + d])
            except ValueError:
                raise DataError(f"malformed row {rownum}: bad action {row[2 + d]!r}")
            if schema is not None and not 0 <= action < schema.action_count:
                raise DataError(f"unknown action id {action} at row {rownum}")
            if action < 0:
                raise DataError(f"unknown action id {action} at row {rownum}")
            outcome = Outcome.parse(row[3 + d])
            rows_by_traj.setdefault(traj_id, []).append((rownum, t, feats, action, outcome))
    return _build_trajectories(rows_by_traj, schema, feature_names)


def _load_jsonl(path: Path, schema: Optional[Schema]) -> Dataset:
    trajs = []
    max_action = 0
    d_seen: Optional[int] = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"malformed JSON at line {lineno}: {exc.msg}")
            try:
                traj_id = str(obj["id"])
                outcome = Outcome.parse(obj["outcome"])
                steps = obj["steps"]
            except KeyError as exc:
                raise DataError(f"line {lineno}: missing field {exc.args[0]!r}")
            if not steps:
                raise DataError(f"line {lineno}: trajectory {traj_id!r} has no steps")
            t_values = [int(s["t"]) for s in steps]
            order = sorted(range(len(steps)), key=lambda i: t_values[i])
            t_sorted = [t_values[i] for i in order]
            if len(set(t_sorted)) != len(t_sorted):
                raise DataError(f"duplicate (trajectory_id, t) in trajectory {traj_id!r} at line {lineno}")
            for prev, cur in zip(t_sorted, t_sorted[1:]):
                if cur != prev + 1:
                    raise DataError(f"gap in time index in trajectory {traj_id!r} at line {lineno}")
            states = np.array([steps[i]["x"] for i in order], dtype=np.float64)
            if not np.all(np.isfinite(states)):
                raise DataError(f"non-finite feature in trajectory {traj_id!r} at line {lineno}")
            actions = np.array([int(steps[i]["a"]) for i in order], dtype=np.int64)
            if np.any(actions < 0):
                raise DataError(f"unknown action id in trajectory {traj_id!r} at line {lineno}")
            if d_seen is None:
                d_seen = states.shape[1]
            elif states.shape[1] != d_seen:
                raise DataError(f"inconsistent state dimension at line {lineno}")
            max_action = max(max_action, int(actions.max()))
            trajs.append(Trajectory(traj_id, states, actions, outcome, t0=t_sorted[0]))
    if not trajs:
        raise DataError("no trajectories")
    if schema is None:
        names = tuple(f"x{i}" for i in range(d_seen or 0))
        schema = Schema(names, action_count=max_action + 1)
    return Dataset(schema, trajs)


def load_dataset(path: str | Path, schema: Optional[Schema] = None) -> Dataset:
    """Load a trajectory dataset from CSV or JSONL (chosen by extension).

    Rows are grouped by trajectory id and sorted by t. Violations of the
    ingestion contract (malformed rows, non-finite features, unknown action
    ids, duplicate or gapped time indices) raise DataError naming the row.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    if path.suffix.lower() == ".jsonl":
        return _load_jsonl(path, schema)
    return _load_csv(path, schema)


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write a dataset to CSV or JSONL; load_dataset(save) round-trips."""
    path = Path(path)
    if path.suffix.lower() == ".jsonl":
        with open(path, "w", encoding="utf-8") as fh:
            for traj in dataset.trajectories:
                obj = {
                    "id": traj.id,
                    "outcome": traj.outcome.value,
                    "steps": [
                        {"t": traj.t0 + i, "x": [float(v) for v in traj.states[i]], "a": int(traj.actions[i])}
                        for i in range(len(traj))
                    ],
                }
                fh.write(json.dumps(obj) + "\n")
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["trajectory_id", "t"] + list(dataset.schema.feature_names) + ["action", "outcome"]
        )
        for traj in dataset.trajectories:
            for i in range(len(traj)):
                writer.writerow(
                    [traj.id, traj.t0 + i]
                    + [repr(float(v)) for v in traj.states[i]]
                    + [int(traj.actions[i]), traj.outcome.value]
                )


def save_schema(schema: Schema, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(schema.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_schema(path: str | Path) -> Schema:
    with open(path, encoding="utf-8") as fh:
        return Schema.from_json_dict(json.load(fh))


def split_dataset(
    dataset: Dataset, train_fraction: float, seed: int
) -> tuple[Dataset, Dataset]:
    """Split by whole trajectory, deterministically under the seed.

    The train split receives round(train_fraction * n) trajectories (half
    rounds away from zero), clamped so neither side is empty.
    """
    n = len(dataset.trajectories)
    if n < 2:
        raise DataError("split needs at least 2 trajectories")
    if not 0.0 < train_fraction < 1.0:
        raise DataError("train_fraction must lie in (0, 1)")
    n_train = int(math.floor(train_fraction * n + 0.5))
    n_train = min(max(n_train, 1), n - 1)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    train_idx = np.sort(order[:n_train])
    test_idx = np.sort(order[n_train:])
    train = Dataset(dataset.schema, [dataset.trajectories[i] for i in train_idx])
    test = Dataset(dataset.schema, [dataset.trajectories[i] for i in test_idx])
    return train, test
