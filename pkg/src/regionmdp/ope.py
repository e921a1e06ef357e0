"""Off-policy evaluation on held-out compressed trajectories.

Each trajectory gets an importance weight: the product over its steps of
pi_e(a|x) / pi_b(a|x), where pi_b is the behavior policy estimated on the
training MDP and pi_e is the (optionally epsilon-softened) solved policy.
Weights are capped at a percentile of the positive weights, then the
weighted average of discounted returns gives the WIS estimate; the
effective sample size (sum w)^2 / sum w^2 reports how many trajectories
actually carry it.

Trajectories stepping through a (cluster, action) pair the behavior policy
never took get weight zero and are tallied as unseen rather than crashing
the estimate; evaluating the behavior policy itself therefore reduces to an
unweighted mean return over its in-support trajectories.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

from regionmdp.compression import CompressedMdp, CompressedTrajectory
from regionmdp.errors import DataError, OpeError
from regionmdp.planning import RewardTable


@dataclass(frozen=True)
class OpeConfig:
    clip_percentile: float = 95.0
    gamma: float = 0.98
    eval_softening: float = 0.0  # epsilon mass left on the behavior policy

    def __post_init__(self) -> None:
        if not 0.0 < self.clip_percentile <= 100.0:
            raise DataError("clip_percentile must lie in (0, 100]")
        if not 0.0 <= self.eval_softening < 1.0:
            raise DataError("eval_softening must lie in [0, 1)")


@dataclass(frozen=True)
class OpeReport:
    policy: str
    wis_estimate: float
    ess: float
    n_trajectories: int
    n_zero_weight: int
    clip_value: float
    n_unseen: int = 0


def trajectory_weight(
    ct: CompressedTrajectory,
    policy: Optional[dict[int, int]],
    mdp: CompressedMdp,
    eval_softening: float = 0.0,
) -> tuple[float, bool]:
    """Importance weight of one trajectory, and whether it left support.

    policy None evaluates the behavior policy itself (every in-support step
    contributes a ratio of exactly 1). A step whose (cluster, action) the
    behavior policy never took, or whose cluster the evaluation policy does
    not cover, zeroes the weight and flags the trajectory unseen.
    """
    rho = 1.0
    for x, a, _ in ct.transitions():
        b = mdp.behavior_prob(x, a)
        if b == 0.0:
            return 0.0, True
        if policy is None:
            continue
        if x not in policy:
            return 0.0, True
        chosen = 1.0 if a == policy[x] else 0.0
        pe = (1.0 - eval_softening) * chosen + eval_softening * b
        rho *= pe / b
    return rho, False


def discounted_return(
    ct: CompressedTrajectory, rewards: RewardTable, gamma: float
) -> float:
    """Sum of gamma^t R(x_t, a_t) over the compressed steps; 0 with no steps."""
    total = 0.0
    discount = 1.0
    for x, a, _ in ct.transitions():
        total += discount * rewards.get(x, a)
        discount *= gamma
    return total


def nearest_rank_percentile(sorted_values: Sequence[float], percentile: float) -> float:
    """Nearest-rank percentile (1-based rank floor(p/100 * m), at least 1)."""
    m = len(sorted_values)
    if m == 0:
        raise OpeError("percentile of an empty set")
    rank = max(1, math.floor(percentile / 100.0 * m))
    return float(sorted_values[rank - 1])


def wis_from_weights(
    weights: Sequence[float], returns: Sequence[float], clip_percentile: float = 95.0
) -> tuple[float, float, float]:
    """(WIS estimate, ESS, clip value) from raw weights and returns.

    The cap is the nearest-rank percentile of the positive weights only;
    computing it over all weights would let a majority of zeros (a
    deterministic policy with little overlap) clip everything to nothing.
    """
    positive = sorted(w for w in weights if w > 0.0)
    if not positive:
        raise OpeError("no overlap between the evaluation policy and behavior data")
    clip_value = nearest_rank_percentile(positive, clip_percentile)
    clipped = [min(w, clip_value) for w in weights]
    total = math.fsum(clipped)
    total_sq = math.fsum(w * w for w in clipped)
    wis = math.fsum(w * g for w, g in zip(clipped, returns)) / total
    ess = total * total / total_sq
    return wis, ess, clip_value


def wis_evaluate(
    ctrajs: Sequence[CompressedTrajectory],
    policy: Optional[dict[int, int]],
    mdp: CompressedMdp,
    rewards: RewardTable,
    cfg: OpeConfig = OpeConfig(),
    name: str = "policy",
) -> OpeReport:
    """Weighted importance sampling of one policy over held-out trajectories.

    Returns are only computed for positive-weight trajectories, so reward
    entries are never required off the behavior support.
    """
    if not ctrajs:
        raise DataError("wis_evaluate needs at least one trajectory")
    weights = []
    returns = []
    n_unseen = 0
    for ct in ctrajs:
        rho, unseen = trajectory_weight(ct, policy, mdp, cfg.eval_softening)
        n_unseen += unseen
        weights.append(rho)
        returns.append(discounted_return(ct, rewards, cfg.gamma) if rho > 0.0 else 0.0)
    wis, ess, clip_value = wis_from_weights(weights, returns, cfg.clip_percentile)
    return OpeReport(
        policy=name,
        wis_estimate=wis,
        ess=ess,
        n_trajectories=len(ctrajs),
        n_zero_weight=sum(1 for w in weights if w == 0.0),
        clip_value=clip_value,
        n_unseen=n_unseen,
    )
