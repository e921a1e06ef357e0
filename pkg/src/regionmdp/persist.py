"""Deterministic artifact readers and writers shared by the CLI stages.

Floats are serialized with repr (shortest round-trip form), so re-running a
stage with identical inputs and seeds reproduces byte-identical files.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from regionmdp.data import Dataset
from regionmdp.decision_points import DpAnnotation
from regionmdp.errors import DataError


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([fmt(v) for v in row])


def write_json(path: str | Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def read_json(path: str | Path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def write_annotations(path: str | Path, annotations: Sequence[DpAnnotation]) -> None:
    write_csv(
        path,
        ["trajectory_id", "t", "neighbor_count", "valid_actions", "is_dp"],
        (
            (
                a.trajectory_id,
                a.t,
                a.neighbor_count,
                ";".join(str(v) for v in a.valid_actions),
                int(a.is_dp),
            )
            for a in annotations
        ),
    )


def read_annotations(path: str | Path) -> list[DpAnnotation]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            valid = tuple(int(v) for v in row["valid_actions"].split(";") if v != "")
            out.append(
                DpAnnotation(
                    trajectory_id=row["trajectory_id"],
                    t=int(row["t"]),
                    neighbor_count=int(row["neighbor_count"]),
                    action_support=(),
                    valid_actions=valid,
                    is_dp=row["is_dp"] == "1",
                )
            )
    return out


def align_annotations(
    dataset: Dataset, annotations: Sequence[DpAnnotation]
) -> list[DpAnnotation]:
    """Reorder annotations to the dataset's step order; error on mismatch."""
    by_key = {(a.trajectory_id, a.t): a for a in annotations}
    out = []
    for key in dataset.step_keys():
        if key not in by_key:
            raise DataError(f"no annotation for step {key}")
        out.append(by_key[key])
    return out


def write_labels(path: str | Path, dataset: Dataset, labels: np.ndarray) -> None:
    keys = dataset.step_keys()
    write_csv(
        path,
        ["trajectory_id", "t", "cluster_id"],
        ((tid, t, int(c)) for (tid, t), c in zip(keys, labels)),
    )


def read_labels(path: str | Path, dataset: Dataset) -> np.ndarray:
    by_key = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            by_key[(row["trajectory_id"], int(row["t"]))] = int(row["cluster_id"])
    out = np.empty(dataset.n_steps, dtype=np.int64)
    for i, key in enumerate(dataset.step_keys()):
        if key not in by_key:
            raise DataError(f"no label for step {key}")
        out[i] = by_key[key]
    return out
