import numpy as np
import pytest
from sklearn.metrics import adjusted_rand_score

from regionmdp.data import Dataset, Outcome, Schema, Trajectory
from regionmdp.decision_points import DpAnnotation
from regionmdp.errors import DataError
from regionmdp.regions import (
    RegionConfig,
    RegionModel,
    assign_clusters,
    build_hierarchy,
    fit_regions,
    loop_rate,
    split_top_down,
)


def test_hierarchy_two_points():
    Z, sample = build_hierarchy(np.array([[0.0, 0.0], [3.0, 4.0]]), RegionConfig())
    assert Z.shape == (1, 4)
    assert Z[0, 2] == pytest.approx(5.0)
    np.testing.assert_array_equal(sample, [0, 1])


def test_hierarchy_nearest_pair_merges_first():
    Z, _ = build_hierarchy(np.array([[0.0], [1.0], [10.0]]), RegionConfig())
    assert {int(Z[0, 0]), int(Z[0, 1])} == {0, 1}


@pytest.mark.parametrize("method", ["ward", "complete", "average"])
def test_merge_heights_non_decreasing(method):
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(500, 3))
    Z, _ = build_hierarchy(pts, RegionConfig(linkage=method))
    heights = Z[:, 2]
    assert np.all(np.diff(heights) >= -1e-12)


def test_hierarchy_needs_two_points():
    with pytest.raises(DataError):
        build_hierarchy(np.zeros((1, 2)), RegionConfig())


def test_hierarchy_subsample_cap_deterministic():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(100, 2))
    cfg = RegionConfig(linkage_sample_cap=40, seed=5)
    Z1, s1 = build_hierarchy(pts, cfg)
    Z2, s2 = build_hierarchy(pts, cfg)
    assert len(s1) == 40 and Z1.shape == (39, 4)
    np.testing.assert_array_equal(s1, s2)
    np.testing.assert_array_equal(Z1, Z2)


def test_loop_rate_hand_counts():
    c, x, y, z, w = 1, 0, 2, 3, 4
    assert loop_rate([np.array([c, x, c])], c, window=3) == 1.0
    assert loop_rate([np.array([c, x, y, z, w, c])], c, window=3) == 0.0
    assert loop_rate([np.array([c, x, c, 5, 5, 5])], c, window=3) == 0.5
    assert loop_rate([np.array([c, c, c])], c, window=3) == 0.0  # no exits


def test_split_on_action_mean_gap():
    # action-0 points sit at -1.0 and action-1 points at +1.0 standardized
    rng = np.random.default_rng(2)
    left = -1.0 + rng.normal(scale=0.01, size=(20, 1))
    right = 1.0 + rng.normal(scale=0.01, size=(20, 1))
    pts = np.vstack([left, right])
    actions = np.array([0] * 20 + [1] * 20)
    cfg = RegionConfig(homogeneity_threshold=0.5, min_action_support=10)
    Z, _ = build_hierarchy(pts, cfg)
    labels = split_top_down(Z, pts, actions, cfg)
    assert labels.max() == 2
    assert len(set(labels[:20])) == 1 and len(set(labels[20:])) == 1
    assert labels[0] != labels[-1]


def test_no_split_when_homogeneous():
    rng = np.random.default_rng(3)
    pts = rng.normal(scale=0.05, size=(40, 2))
    actions = np.array([0, 1] * 20)  # same positions for both actions
    cfg = RegionConfig(homogeneity_threshold=0.5)
    Z, _ = build_hierarchy(pts, cfg)
    labels = split_top_down(Z, pts, actions, cfg)
    assert labels.max() == 1


def test_planted_two_regions_recovered():
    rng = np.random.default_rng(4)
    n = 120
    a_pts = np.array([-3.0, 0.0]) + rng.normal(scale=0.3, size=(n, 2))
    b_pts = np.array([3.0, 0.0]) + rng.normal(scale=0.3, size=(n, 2))
    pts = np.vstack([a_pts, b_pts])
    a_actions = rng.integers(0, 2, size=n)  # region A mixes {0, 1}
    b_actions = rng.integers(1, 3, size=n)  # region B mixes {1, 2}
    actions = np.concatenate([a_actions, b_actions])
    truth = np.array([0] * n + [1] * n)
    cfg = RegionConfig(homogeneity_threshold=0.5)
    Z, _ = build_hierarchy(pts, cfg)
    labels = split_top_down(Z, pts, actions, cfg)
    assert adjusted_rand_score(truth, labels) >= 0.9


def test_max_splits_bounds_clusters():
    rng = np.random.default_rng(5)
    pts = rng.uniform(-5, 5, size=(100, 2))
    actions = rng.integers(0, 2, size=100)
    cfg = RegionConfig(homogeneity_threshold=0.01, min_action_support=1, max_splits=3)
    Z, _ = build_hierarchy(pts, cfg)
    labels = split_top_down(Z, pts, actions, cfg)
    assert labels.max() <= 4


def test_assign_clusters_rules():
    centroids = np.array([[10.0], [-1.0], [20.0], [30.0], [1.0]])
    assert assign_clusters(np.array([[-1.0]]), centroids)[0] == 2  # exact centroid
    # equidistant between clusters 2 and 5 resolves to 2
    assert assign_clusters(np.array([[0.0]]), centroids)[0] == 2


def _make_annotated(points_per_traj, actions_per_traj, dp_flags_per_traj, outcomes=None, n_actions=3):
    """Build a dataset and aligned hand-made annotations."""
    schema = Schema(("f0",), n_actions)
    trajs, anns = [], []
    for i, (pts, acts, flags) in enumerate(
        zip(points_per_traj, actions_per_traj, dp_flags_per_traj)
    ):
        outcome = outcomes[i] if outcomes else Outcome.ALIVE
        traj = Trajectory(f"p{i}", np.array(pts)[:, None], acts, outcome)
        trajs.append(traj)
        for t, flag in enumerate(flags):
            anns.append(
                DpAnnotation(f"p{i}", t, 0, (0,) * n_actions, (0, 1) if flag else (), flag)
            )
    return Dataset(schema, trajs), anns


def test_fit_regions_loop_condition_splits():
    # single tight blob of DPs, one action only (homogeneity silent); half the
    # trajectories leave and return within the window -> loop rate 0.5
    rng = np.random.default_rng(6)
    pts_loop = [[-2.0 + rng.normal(scale=0.01), 99.0, -2.0 + rng.normal(scale=0.01)] for _ in range(10)]
    pts_slow = [
        [-2.0 + rng.normal(scale=0.01), 99.0, 99.0, 99.0, 99.0, -2.0 + rng.normal(scale=0.01)]
        for _ in range(10)
    ]
    acts_loop = [[0, 0, 0]] * 10
    acts_slow = [[0, 0, 0, 0, 0, 0]] * 10
    flags_loop = [[True, False, True]] * 10
    flags_slow = [[True, False, False, False, False, True]] * 10

    ds, anns = _make_annotated(
        pts_loop + pts_slow, acts_loop + acts_slow, flags_loop + flags_slow
    )
    strict = RegionConfig(loop_threshold=0.25, max_splits=3)
    model_strict, labels_strict = fit_regions(ds, anns, strict)
    lax = RegionConfig(loop_threshold=0.6, max_splits=3)
    model_lax, labels_lax = fit_regions(ds, anns, lax)
    assert model_lax.n_clusters == 1
    assert model_strict.n_clusters > 1
    # non-DP steps keep label 0
    assert labels_strict[1] == 0 and labels_lax[1] == 0


def test_fit_regions_planted_and_self_consistency():
    rng = np.random.default_rng(7)
    trajs_pts, trajs_acts, trajs_flags, outcomes = [], [], [], []
    for i in range(60):
        center = -3.0 if i % 2 == 0 else 3.0
        pts = center + rng.normal(scale=0.2, size=4)
        if center < 0:
            acts = rng.integers(0, 2, size=4)  # region A mixes {0,1}
        else:
            acts = rng.integers(1, 3, size=4)  # region B mixes {1,2}
        trajs_pts.append(pts.tolist())
        trajs_acts.append(acts.tolist())
        trajs_flags.append([True] * 4)
        outcomes.append(Outcome.DEAD if rng.random() < 0.3 else Outcome.ALIVE)
    ds, anns = _make_annotated(trajs_pts, trajs_acts, trajs_flags, outcomes)
    cfg = RegionConfig(homogeneity_threshold=0.5)
    model, labels = fit_regions(ds, anns, cfg)
    assert model.n_clusters == 2

    # every DP carries exactly one label in 1..K
    dp_mask = np.array([a.is_dp for a in anns])
    assert set(np.unique(labels[dp_mask])) <= {1, 2}
    assert np.all(labels[~dp_mask] == 0)

    # labels partition by side
    states, _ = ds.step_arrays()
    side = states[:, 0] > 0
    assert len(set(labels[dp_mask & side])) == 1
    assert len(set(labels[dp_mask & ~side])) == 1

    # subsampled points keep their split assignment under centroid reassignment
    dp_std = model.standardizer.apply(states[dp_mask])
    _, acts = ds.step_arrays()
    Z, sample = build_hierarchy(dp_std, cfg)
    tree_labels = split_top_down(
        Z, dp_std[sample], acts[dp_mask][sample], cfg, feature_names=ds.schema.feature_names
    )
    reassigned = assign_clusters(dp_std[sample], model.centroids)
    # cluster ids may differ; compare as partitions
    assert adjusted_rand_score(tree_labels, reassigned) >= 0.99

    # diagnostics populated
    assert model.sizes.sum() == dp_mask.sum()
    assert np.all((model.mortality_rates >= 0) & (model.mortality_rates <= 1))


def test_k_non_increasing_in_homogeneity_threshold():
    rng = np.random.default_rng(8)
    n = 80
    pts = np.vstack(
        [
            np.array([-3.0, 0.0]) + rng.normal(scale=0.3, size=(n, 2)),
            np.array([3.0, 0.0]) + rng.normal(scale=0.3, size=(n, 2)),
        ]
    )
    actions = np.concatenate([rng.integers(0, 2, size=n), rng.integers(1, 3, size=n)])
    ks = []
    for thr in [0.05, 2.0, 10.0]:
        cfg = RegionConfig(homogeneity_threshold=thr)
        Z, _ = build_hierarchy(pts, cfg)
        ks.append(int(split_top_down(Z, pts, actions, cfg).max()))
    assert ks[0] >= ks[1] >= ks[2]


def test_final_clusters_satisfy_conditions():
    rng = np.random.default_rng(9)
    n = 100
    pts = np.vstack(
        [
            np.array([-3.0, 0.0]) + rng.normal(scale=0.2, size=(n, 2)),
            np.array([3.0, 0.0]) + rng.normal(scale=0.2, size=(n, 2)),
        ]
    )
    actions = np.concatenate([rng.integers(0, 2, size=n), rng.integers(1, 3, size=n)])
    cfg = RegionConfig(homogeneity_threshold=0.5, max_splits=64)
    Z, _ = build_hierarchy(pts, cfg)
    labels = split_top_down(Z, pts, actions, cfg)
    thresholds = cfg.threshold_vector(["f0", "f1"])
    for k in range(1, labels.max() + 1):
        members = np.nonzero(labels == k)[0]
        means = []
        for a in np.unique(actions[members]):
            grp = members[actions[members] == a]
            if len(grp) >= cfg.min_action_support:
                means.append(pts[grp].mean(axis=0))
        if len(means) >= 2:
            gap = np.vstack(means).max(axis=0) - np.vstack(means).min(axis=0)
            assert np.all(gap <= thresholds)


def test_region_model_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    trajs_pts = [(-3.0 + rng.normal(scale=0.2, size=3)).tolist() for _ in range(20)]
    trajs_pts += [(3.0 + rng.normal(scale=0.2, size=3)).tolist() for _ in range(20)]
    trajs_acts = [rng.integers(0, 2, size=3).tolist() for _ in range(20)]
    trajs_acts += [rng.integers(1, 3, size=3).tolist() for _ in range(20)]
    flags = [[True] * 3] * 40
    ds, anns = _make_annotated(trajs_pts, trajs_acts, flags)
    model, _ = fit_regions(ds, anns, RegionConfig())
    path = tmp_path / "regions.json"
    model.save(path)
    back = RegionModel.load(path)
    np.testing.assert_array_equal(model.centroids, back.centroids)
    q = rng.normal(size=(10, 1)) * 4
    np.testing.assert_array_equal(model.assign(q), back.assign(q))
    model.save(tmp_path / "again.json")
    assert (tmp_path / "regions.json").read_bytes() == (tmp_path / "again.json").read_bytes()
