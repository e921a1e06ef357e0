import numpy as np
import pytest

from regionmdp.data import (
    Dataset,
    Outcome,
    Schema,
    Trajectory,
    load_dataset,
    save_dataset,
    split_dataset,
)
from regionmdp.errors import DataError


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_load_csv_single_trajectory(tmp_path):
    path = write(
        tmp_path,
        "d.csv",
        "trajectory_id,t,f0,f1,action,outcome\n"
        "p1,0,1.0,2.0,0,alive\n"
        "p1,1,1.5,2.5,1,alive\n"
        "p1,2,2.0,3.0,0,alive\n",
    )
    ds = load_dataset(path)
    assert len(ds) == 1
    traj = ds.trajectories[0]
    assert len(traj) == 3
    assert traj.outcome is Outcome.ALIVE
    assert ds.schema.feature_names == ("f0", "f1")
    np.testing.assert_allclose(traj.states[1], [1.5, 2.5])


def test_load_empty_file_errors(tmp_path):
    path = write(tmp_path, "d.csv", "")
    with pytest.raises(DataError, match="no trajectories"):
        load_dataset(path)


def test_header_only_errors(tmp_path):
    path = write(tmp_path, "d.csv", "trajectory_id,t,f0,action,outcome\n")
    with pytest.raises(DataError, match="no trajectories"):
        load_dataset(path)


def test_gap_in_time_index(tmp_path):
    path = write(
        tmp_path,
        "d.csv",
        "trajectory_id,t,f0,action,outcome\n"
        "p1,0,1.0,0,alive\n"
        "p1,1,1.0,0,alive\n"
        "p1,3,1.0,0,alive\n",
    )
    with pytest.raises(DataError, match="gap in time index at row 3"):
        load_dataset(path)


def test_duplicate_time_index(tmp_path):
    path = write(
        tmp_path,
        "d.csv",
        "trajectory_id,t,f0,action,outcome\n"
        "p1,0,1.0,0,alive\n"
        "p1,0,2.0,0,alive\n",
    )
    with pytest.raises(DataError, match="duplicate"):
        load_dataset(path)


def test_non_finite_feature(tmp_path):
    path = write(
        tmp_path,
        "d.csv",
        "trajectory_id,t,f0,action,outcome\np1,0,nan,0,alive\np1,1,1.0,0,alive\n",
    )
    with pytest.raises(DataError, match="non-finite feature at row 1"):
        load_dataset(path)


def test_unknown_action_with_schema(tmp_path):
    path = write(
        tmp_path,
        "d.csv",
        "trajectory_id,t,f0,action,outcome\np1,0,1.0,7,alive\n",
    )
    schema = Schema(("f0",), action_count=2)
    with pytest.raises(DataError, match="unknown action id 7 at row 1"):
        load_dataset(path, schema)


def test_inconsistent_outcome(tmp_path):
    path = write(
        tmp_path,
        "d.csv",
        "trajectory_id,t,f0,action,outcome\np1,0,1.0,0,alive\np1,1,1.0,0,dead\n",
    )
    with pytest.raises(DataError, match="inconsistent outcome"):
        load_dataset(path)


def test_malformed_row_reports_number(tmp_path):
    path = write(
        tmp_path,
        "d.csv",
        "trajectory_id,t,f0,action,outcome\np1,0,1.0,0,alive\np1,1,1.0,0\n",
    )
    with pytest.raises(DataError, match="row 2"):
        load_dataset(path)


def _random_dataset(rng, n_traj=8, d=3, n_actions=3):
    trajs = []
    for i in range(n_traj):
        length = int(rng.integers(1, 6))
        states = rng.normal(size=(length, d))
        actions = rng.integers(0, n_actions, size=length)
        outcome = Outcome.DEAD if rng.random() < 0.5 else Outcome.ALIVE
        trajs.append(Trajectory(f"p{i}", states, actions, outcome))
    schema = Schema(tuple(f"f{j}" for j in range(d)), n_actions)
    return Dataset(schema, trajs)


@pytest.mark.parametrize("ext", ["csv", "jsonl"])
def test_round_trip(tmp_path, ext):
    ds = _random_dataset(np.random.default_rng(0))
    path = tmp_path / f"d.{ext}"
    save_dataset(ds, path)
    back = load_dataset(path, ds.schema if ext == "csv" else None)
    assert len(back) == len(ds)
    for a, b in zip(ds.trajectories, back.trajectories):
        assert a.id == b.id
        assert a.outcome == b.outcome
        np.testing.assert_array_equal(a.states, b.states)
        np.testing.assert_array_equal(a.actions, b.actions)
    # a second round trip is byte-stable
    path2 = tmp_path / f"d2.{ext}"
    save_dataset(back, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_jsonl_load(tmp_path):
    path = write(
        tmp_path,
        "d.jsonl",
        '{"id": "a", "outcome": "dead", "steps": [{"t": 0, "x": [1.0], "a": 0}, {"t": 1, "x": [2.0], "a": 1}]}\n',
    )
    ds = load_dataset(path)
    assert ds.trajectories[0].outcome is Outcome.DEAD
    assert ds.trajectories[0].actions.tolist() == [0, 1]


def test_split_sizes_and_partition():
    ds = _random_dataset(np.random.default_rng(1), n_traj=100)
    train, test = split_dataset(ds, 0.75, seed=7)
    assert len(train) == 75 and len(test) == 25
    train_ids = {t.id for t in train.trajectories}
    test_ids = {t.id for t in test.trajectories}
    assert train_ids & test_ids == set()
    assert train_ids | test_ids == {t.id for t in ds.trajectories}


def test_split_two_trajectories():
    ds = _random_dataset(np.random.default_rng(2), n_traj=2)
    train, test = split_dataset(ds, 0.5, seed=0)
    assert len(train) == 1 and len(test) == 1


def test_split_deterministic():
    ds = _random_dataset(np.random.default_rng(3), n_traj=20)
    a = split_dataset(ds, 0.6, seed=42)
    b = split_dataset(ds, 0.6, seed=42)
    assert [t.id for t in a[0].trajectories] == [t.id for t in b[0].trajectories]
    assert [t.id for t in a[1].trajectories] == [t.id for t in b[1].trajectories]


def test_split_rounds_half_away_from_zero():
    ds = _random_dataset(np.random.default_rng(8), n_traj=3)
    train, test = split_dataset(ds, 0.5, seed=0)  # round(1.5) -> 2
    assert (len(train), len(test)) == (2, 1)


def test_split_clamps_to_keep_both_sides():
    ds = _random_dataset(np.random.default_rng(9), n_traj=2)
    train, test = split_dataset(ds, 0.9, seed=0)  # round(1.8) = 2 clamps to 1
    assert (len(train), len(test)) == (1, 1)


def test_split_too_few():
    ds = _random_dataset(np.random.default_rng(4), n_traj=1)
    with pytest.raises(DataError):
        split_dataset(ds, 0.5, seed=0)


def test_schema_bitmask_round_trip():
    schema = Schema(("f0",), 4, action_bitmasks=(0, 1, 2, 3))
    for a in range(4):
        assert schema.action_of_bitmask(schema.bitmask_of(a)) == a


def test_restrict_features():
    ds = _random_dataset(np.random.default_rng(5), d=4)
    sub = ds.restrict_features(["f2", "f0"])
    assert sub.schema.feature_names == ("f2", "f0")
    np.testing.assert_array_equal(
        sub.trajectories[0].states[:, 0], ds.trajectories[0].states[:, 2]
    )


def test_states_read_only():
    ds = _random_dataset(np.random.default_rng(6))
    with pytest.raises(ValueError):
        ds.trajectories[0].states[0, 0] = 99.0
