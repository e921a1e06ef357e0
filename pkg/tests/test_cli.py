import csv
import json
from pathlib import Path

import pytest

from regionmdp import cli

SMALL_CONFIG = {
    "seed": 11,
    "synth": {
        "n_trajectories": 200,
        "horizon": 12,
        "n_noise_dims": 0,
        "start_low": [-2.5, -2.5],
        "start_high": [0.5, 0.5],
    },
    "kernel": {"epochs": 10, "rff_dim": 64, "learning_rate": 0.2},
    "dp": {"tune": {"enabled": True, "deltas": [0.9, 0.95], "ns": [5], "sample_size": 800, "rounds": 2}},
    "compression": {"min_action_count": 5},
    "regions": {"max_splits": 8},
}

EXPECTED_ARTIFACTS = [
    "dataset.csv",
    "schema.json",
    "truth.csv",
    "train.csv",
    "test.csv",
    "kernel_model.json",
    "kernel_features.json",
    "dp_tuning.csv",
    "dp_config.json",
    "annotations_train.csv",
    "annotations_test.csv",
    "region_model.json",
    "labels_train.csv",
    "labels_test.csv",
    "cluster_diagnostics.csv",
    "compressed_train.jsonl",
    "compressed_test.jsonl",
    "mdp.json",
    "rewards_mortality.json",
    "rewards_terminal.json",
    "policy_mortality.json",
    "policy_terminal.json",
    "policy_comparison.csv",
    "ope.csv",
    "report_cluster_means.csv",
    "report_policy_table.csv",
    "report_ope.csv",
    "synth_recovery.json",
]


def write_config(tmp_path: Path) -> Path:
    path = tmp_path / "config.json"
    path.write_text(json.dumps(SMALL_CONFIG), encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("pipeline")
    out = tmp / "out"
    config = write_config(tmp)
    code = cli.main(["--config", str(config), "--out-dir", str(out), "pipeline"])
    assert code == 0
    return out, config


def test_pipeline_writes_all_artifacts(pipeline_dir):
    out, _ = pipeline_dir
    for name in EXPECTED_ARTIFACTS:
        assert (out / name).exists(), name


def test_solve_before_compress_names_producer(tmp_path, capsys):
    code = cli.main(["--out-dir", str(tmp_path / "empty"), "solve"])
    captured = capsys.readouterr()
    assert code == 2
    assert "mdp.json" in captured.err
    assert "compress" in captured.err


def test_split_before_synth_errors(tmp_path, capsys):
    code = cli.main(["--out-dir", str(tmp_path / "empty"), "split"])
    assert code == 2
    assert "synth" in capsys.readouterr().err


def test_invalid_config_lists_every_field(tmp_path, capsys):
    bad = dict(SMALL_CONFIG)
    bad = json.loads(json.dumps(SMALL_CONFIG))
    bad["split"] = {"train_fraction": 1.5}
    bad["planning"] = {"gamma": -1.0, "rewards": [{"kind": "mortality"}]}
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(bad), encoding="utf-8")
    code = cli.main(["--config", str(path), "--out-dir", str(tmp_path / "o"), "synth"])
    err = capsys.readouterr().err
    assert code == 2
    assert "split.train_fraction" in err
    assert "planning.gamma" in err


def test_stage_rerun_is_byte_identical(pipeline_dir):
    out, config = pipeline_dir
    before = (out / "kernel_model.json").read_bytes()
    code = cli.main(["--config", str(config), "--out-dir", str(out), "train-kernel"])
    assert code == 0
    assert (out / "kernel_model.json").read_bytes() == before

    before_mdp = (out / "mdp.json").read_bytes()
    code = cli.main(["--config", str(config), "--out-dir", str(out), "compress"])
    assert code == 0
    assert (out / "mdp.json").read_bytes() == before_mdp


def test_pipeline_equals_stage_by_stage(pipeline_dir, tmp_path):
    out, config = pipeline_dir
    other = tmp_path / "stagewise"
    stages = [
        "synth",
        "split",
        "train-kernel",  # select-features skipped by pipeline (d <= top_k)
        "tune-dp",
        "find-dps",
        "cluster",
        "compress",
        "solve",
        "evaluate",
        "report",
        "score-synth",
    ]
    for stage in stages:
        code = cli.main(["--config", str(config), "--out-dir", str(other), stage])
        assert code == 0, stage
    for name in EXPECTED_ARTIFACTS:
        assert (other / name).read_bytes() == (out / name).read_bytes(), name


def test_report_filter_flags(pipeline_dir, capsys):
    out, config = pipeline_dir
    code = cli.main(
        [
            "--config",
            str(config),
            "--out-dir",
            str(out),
            "report",
            "--filter-mortality",
            "0.999",
            "--min-treatment-points",
            "10",
        ]
    )
    assert code == 0
    with open(out / "report_cluster_means.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 1  # header only: nothing passes a 99.9% mortality filter

    # restore the default-filter report for other tests
    code = cli.main(["--config", str(config), "--out-dir", str(out), "report"])
    assert code == 0


def test_report_ope_table_shape(pipeline_dir):
    out, _ = pipeline_dir
    with open(out / "report_ope.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["policy", "wis_score", "ess"]
    assert [r[0] for r in rows[1:]] == ["Behavior", "Mortality", "Terminal"]


def test_ope_csv_columns(pipeline_dir):
    out, _ = pipeline_dir
    with open(out / "ope.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["policy", "wis", "ess", "n", "zero_weight_fraction", "clip_value"]


def test_effective_config_persisted(pipeline_dir):
    out, _ = pipeline_dir
    cfg = json.loads((out / "config_used.json").read_text())
    assert cfg["seed"] == 11
    assert cfg["kernel"]["rff_dim"] == 64


def test_annotations_csv_format(pipeline_dir):
    out, _ = pipeline_dir
    with open(out / "annotations_train.csv", newline="") as fh:
        reader = csv.DictReader(fh)
        assert reader.fieldnames == [
            "trajectory_id",
            "t",
            "neighbor_count",
            "valid_actions",
            "is_dp",
        ]
        row = next(reader)
        assert row["is_dp"] in ("0", "1")


def test_pipeline_with_feature_selection(tmp_path, capsys):
    cfg = json.loads(json.dumps(SMALL_CONFIG))
    cfg["synth"]["n_noise_dims"] = 6  # d = 8 informative+noise columns
    cfg["features"] = {"enabled": "auto", "top_k": 4}
    config = tmp_path / "config.json"
    config.write_text(json.dumps(cfg), encoding="utf-8")
    out = tmp_path / "out"
    code = cli.main(["--config", str(config), "--out-dir", str(out), "pipeline"])
    assert code == 0
    selected = json.loads((out / "selected_features.json").read_text())
    assert len(selected) == 4
    kernel_features = json.loads((out / "kernel_features.json").read_text())
    assert kernel_features == selected
    # ranking happens over all 8 columns
    with open(out / "importances.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 8

    # rerunning selection after the kernel restriction exists is unaffected
    before = (out / "importances.csv").read_bytes()
    code = cli.main(["--config", str(config), "--out-dir", str(out), "select-features"])
    assert code == 0
    assert (out / "importances.csv").read_bytes() == before


def test_cli_flag_overrides_config(tmp_path, capsys):
    config = write_config(tmp_path)
    out = tmp_path / "flagged"
    code = cli.main(
        ["--config", str(config), "--out-dir", str(out), "synth", "--n-trajectories", "20"]
    )
    assert code == 0
    assert "20 trajectories" in capsys.readouterr().out
    cfg = json.loads((out / "config_used.json").read_text())
    assert cfg["synth"]["n_trajectories"] == 20


def test_split_accepts_external_jsonl(tmp_path, capsys):
    from regionmdp.data import load_dataset, save_dataset
    from regionmdp.synth import generate, reference_spec

    ds, _ = generate(reference_spec(seed=2, n_trajectories=30, horizon=8))
    jsonl = tmp_path / "ext.jsonl"
    save_dataset(ds, jsonl)
    out = tmp_path / "out"
    config = write_config(tmp_path)
    code = cli.main(
        ["--config", str(config), "--out-dir", str(out), "split", "--dataset", str(jsonl)]
    )
    assert code == 0
    assert "train" in capsys.readouterr().out
    train = load_dataset(out / "train.csv")
    assert len(train) > 0
