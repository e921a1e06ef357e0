"""Toolkit for compressing batch trajectories into a decision-region MDP.

The pipeline: learn a weighted similarity kernel from logged state-action
pairs, flag decision points (states where the logged behavior genuinely
varies), cluster them into decision regions, compress trajectories onto the
region graph, solve the resulting small MDP, and evaluate the solved policy
against held-out data with weighted importance sampling.
"""

from regionmdp.data import (
    Dataset,
    Outcome,
    Schema,
    Step,
    Trajectory,
    load_dataset,
    save_dataset,
    split_dataset,
)

__all__ = [
    "Dataset",
    "Outcome",
    "Schema",
    "Step",
    "Trajectory",
    "load_dataset",
    "save_dataset",
    "split_dataset",
]

__version__ = "0.1.0"
