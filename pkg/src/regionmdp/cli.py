"""Staged pipeline CLI.

Subcommands run one stage each (synth, split, select-features, train-kernel,
tune-dp, find-dps, cluster, compress, solve, evaluate, report) and `pipeline`
runs them all in order. Every stage reads its upstream artifacts from the
output directory, writes its own, persists the effective merged config, and
prints a one-line summary. All randomness flows from config seeds, so
re-running a stage with identical inputs reproduces identical bytes.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
import zlib
from pathlib import Path

import numpy as np

from regionmdp import persist
from regionmdp.compression import (
    SummaryFn,
    compress_trajectory,
    estimate_mdp,
    load_compressed,
    save_compressed,
    CompressedMdp,
)
from regionmdp.data import (
    Dataset,
    load_dataset,
    load_schema,
    save_dataset,
    save_schema,
    split_dataset,
)
from regionmdp.decision_points import DpConfig, annotate_dataset, tune_dp_config
from regionmdp.errors import ArtifactError, ConfigError, RegionMdpError
from regionmdp.features import ForestConfig, feature_importances, select_top_k, train_forest
from regionmdp.kernel import KernelModel, TrainConfig, train_kernel
from regionmdp.ope import OpeConfig, wis_evaluate
from regionmdp.planning import (
    PiecewiseRule,
    PlanningConfig,
    RewardSpec,
    RewardTable,
    SolvedPolicy,
    build_rewards,
    compare_policies,
    value_iteration,
)
from regionmdp.regions import RegionConfig, RegionModel, fit_regions
from regionmdp.synth import PlantedRegion, SynthSpec, generate, score_recovery

STAGE_ORDER = [
    "synth",
    "split",
    "select-features",
    "train-kernel",
    "tune-dp",
    "find-dps",
    "cluster",
    "compress",
    "solve",
    "evaluate",
    "report",
]

PRODUCERS = {
    "dataset.csv": "synth",
    "schema.json": "synth",
    "truth.csv": "synth",
    "train.csv": "split",
    "test.csv": "split",
    "importances.csv": "select-features",
    "selected_features.json": "select-features",
    "kernel_model.json": "train-kernel",
    "kernel_features.json": "train-kernel",
    "dp_tuning.csv": "tune-dp",
    "dp_config.json": "tune-dp",
    "annotations_train.csv": "find-dps",
    "annotations_test.csv": "find-dps",
    "region_model.json": "cluster",
    "labels_train.csv": "cluster",
    "labels_test.csv": "cluster",
    "cluster_diagnostics.csv": "cluster",
    "compressed_train.jsonl": "compress",
    "compressed_test.jsonl": "compress",
    "mdp.json": "compress",
    "policy_comparison.csv": "solve",
    "ope.csv": "evaluate",
}

DEFAULT_CONFIG = {
    "seed": 7,
    "paths": {"dataset": None, "out_dir": "out"},
    "synth": {
        "regions": [
            {"center": [-1.0, -1.0], "radius": 1.0, "actions": [0, 1], "optimal_action": 1},
            {"center": [1.8, 1.8], "radius": 1.0, "actions": [0, 2], "optimal_action": 2},
        ],
        "n_actions": 4,
        "n_noise_dims": 2,
        "flow": [0.3, 0.3],
        "region_damping": 0.4,
        "drift": {},
        "noise_std": 0.05,
        "horizon": 30,
        "n_trajectories": 2000,
        "start_low": [-4.0, -4.0],
        "start_high": [0.0, 0.0],
        "consensus_action": 0,
        "action_persistence": 0.85,
        "mix_probability": 1.0,
        "base_logit": -2.5,
        "hazard_per_suboptimal": 0.35,
        "seed": None,
    },
    "split": {"train_fraction": 0.75, "seed": None},
    "features": {
        "enabled": "auto",
        "top_k": 20,
        "n_trees": 100,
        "max_depth": 3,
        "class_weighting": "balanced",
        "features_per_split": None,
        "seed": None,
    },
    "kernel": {
        "learning_rate": 0.2,
        "epochs": 50,
        "batch_size": 256,
        "rff_dim": 256,
        "seed": None,
    },
    "dp": {
        "delta": 0.95,
        "min_neighbors": 20,
        "tune": {
            "enabled": True,
            "deltas": [0.99, 0.992],
            "ns": [20, 30],
            "sample_size": 5000,
            "rounds": 5,
            "seed": None,
        },
    },
    "regions": {
        "linkage": "ward",
        "homogeneity_threshold": 0.5,
        "feature_thresholds": {},
        "loop_threshold": 0.25,
        "loop_window": 3,
        "max_splits": 64,
        "linkage_sample_cap": 20000,
        "min_action_support": 10,
        "seed": None,
    },
    "compression": {"summary": "bit_or", "min_action_count": 20},
    "planning": {
        "gamma": 0.98,
        "tolerance": 1e-8,
        "max_iterations": 10000,
        "rewards": [{"kind": "mortality"}, {"kind": "terminal"}],
    },
    "ope": {"clip_percentile": 95.0, "eval_softening": 0.0},
    "report": {"min_mortality": 0.10, "min_treatment_points": 10, "min_treated_actions": 2},
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: str | None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        file_cfg = persist.read_json(path)
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = _deep_merge(cfg, file_cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    problems = []

    def check(cond: bool, field: str, message: str) -> None:
        if not cond:
            problems.append(f"{field}: {message}")

    check(isinstance(cfg.get("seed"), int), "seed", "must be an integer")
    split = cfg["split"]
    check(0.0 < split["train_fraction"] < 1.0, "split.train_fraction", "must lie in (0, 1)")
    feats = cfg["features"]
    check(feats["enabled"] in (True, False, "auto"), "features.enabled", "must be true, false or 'auto'")
    check(feats["top_k"] >= 1, "features.top_k", "must be >= 1")
    check(feats["n_trees"] >= 1, "features.n_trees", "must be >= 1")
    check(feats["max_depth"] >= 1, "features.max_depth", "must be >= 1")
    kern = cfg["kernel"]
    check(kern["learning_rate"] > 0, "kernel.learning_rate", "must be positive")
    check(kern["epochs"] >= 0, "kernel.epochs", "must be >= 0")
    check(kern["batch_size"] >= 1, "kernel.batch_size", "must be >= 1")
    check(kern["rff_dim"] >= 1, "kernel.rff_dim", "must be >= 1")
    dp = cfg["dp"]
    check(0.0 < dp["delta"] <= 1.0, "dp.delta", "must lie in (0, 1]")
    check(dp["min_neighbors"] >= 1, "dp.min_neighbors", "must be >= 1")
    tune = dp["tune"]
    check(all(0.0 < d <= 1.0 for d in tune["deltas"]), "dp.tune.deltas", "entries must lie in (0, 1]")
    check(all(n >= 1 for n in tune["ns"]), "dp.tune.ns", "entries must be >= 1")
    check(tune["rounds"] >= 1, "dp.tune.rounds", "must be >= 1")
    regions = cfg["regions"]
    check(regions["linkage"] in ("ward", "complete", "average"), "regions.linkage", "must be ward, complete or average")
    check(regions["homogeneity_threshold"] > 0, "regions.homogeneity_threshold", "must be positive")
    check(regions["loop_threshold"] > 0, "regions.loop_threshold", "must be positive")
    check(regions["loop_window"] >= 1, "regions.loop_window", "must be >= 1")
    comp = cfg["compression"]
    check(comp["summary"] in ("bit_or", "first", "majority"), "compression.summary", "must be bit_or, first or majority")
    check(comp["min_action_count"] >= 1, "compression.min_action_count", "must be >= 1")
    plan = cfg["planning"]
    check(0.0 < plan["gamma"] <= 1.0, "planning.gamma", "must lie in (0, 1]")
    check(plan["tolerance"] > 0, "planning.tolerance", "must be positive")
    check(len(plan["rewards"]) >= 1, "planning.rewards", "must list at least one reward")
    for i, spec in enumerate(plan["rewards"]):
        check(
            spec.get("kind") in ("piecewise", "mortality", "terminal"),
            f"planning.rewards[{i}].kind",
            "must be piecewise, mortality or terminal",
        )
        if spec.get("kind") == "piecewise":
            check(bool(spec.get("rules")), f"planning.rewards[{i}].rules", "piecewise needs rules")
    ope = cfg["ope"]
    check(0.0 < ope["clip_percentile"] <= 100.0, "ope.clip_percentile", "must lie in (0, 100]")
    check(0.0 <= ope["eval_softening"] < 1.0, "ope.eval_softening", "must lie in [0, 1)")
    rep = cfg["report"]
    check(0.0 <= rep["min_mortality"] <= 1.0, "report.min_mortality", "must lie in [0, 1]")
    check(rep["min_treatment_points"] >= 0, "report.min_treatment_points", "must be >= 0")
    if problems:
        raise ConfigError("invalid config:\n  " + "\n  ".join(problems))


def stage_seed(cfg: dict, section: str) -> int:
    explicit = cfg[section].get("seed")
    if explicit is not None:
        return int(explicit)
    return (int(cfg["seed"]) * 1000003 + zlib.crc32(section.encode())) % (2**31)


def _require(out_dir: Path, filename: str) -> Path:
    path = out_dir / filename
    if not path.exists():
        producer = PRODUCERS.get(filename)
        hint = f"; run `{producer}` first" if producer else ""
        raise ArtifactError(f"missing artifact {filename}{hint}")
    return path


def _load_split(out_dir: Path, which: str, restricted: bool = True) -> Dataset:
    path = _require(out_dir, f"{which}.csv")
    schema_path = out_dir / "schema.json"
    schema = load_schema(schema_path) if schema_path.exists() else None
    ds = load_dataset(path, schema)
    features_path = out_dir / "kernel_features.json"
    if restricted and features_path.exists():
        ds = ds.restrict_features(persist.read_json(features_path))
    return ds


def _dp_config(cfg: dict, out_dir: Path) -> DpConfig:
    path = out_dir / "dp_config.json"
    if path.exists():
        obj = persist.read_json(path)
        return DpConfig(delta=float(obj["delta"]), min_neighbors=int(obj["min_neighbors"]))
    return DpConfig(delta=cfg["dp"]["delta"], min_neighbors=cfg["dp"]["min_neighbors"])


def _reward_specs(cfg: dict) -> list[RewardSpec]:
    specs = []
    for obj in cfg["planning"]["rewards"]:
        rules = tuple(
            PiecewiseRule(
                feature=r["feature"],
                breakpoints=tuple(float(b) for b in r["breakpoints"]),
                values=tuple(float(v) for v in r["values"]),
            )
            for r in obj.get("rules", [])
        )
        specs.append(RewardSpec(kind=obj["kind"], name=obj.get("name"), rules=rules))
    labels = [s.label for s in specs]
    if len(set(labels)) != len(labels):
        raise ConfigError("planning.rewards: reward labels must be unique")
    return specs


def stage_synth(cfg: dict, out_dir: Path) -> str:
    s = cfg["synth"]
    spec = SynthSpec(
        regions=tuple(
            PlantedRegion(
                center=tuple(r["center"]),
                radius=float(r["radius"]),
                actions=tuple(int(a) for a in r["actions"]),
                optimal_action=int(r["optimal_action"]),
            )
            for r in s["regions"]
        ),
        n_actions=int(s["n_actions"]),
        n_noise_dims=int(s["n_noise_dims"]),
        flow=tuple(s["flow"]),
        region_damping=float(s["region_damping"]),
        drift={int(a): tuple(v) for a, v in s["drift"].items()},
        noise_std=float(s["noise_std"]),
        horizon=int(s["horizon"]),
        n_trajectories=int(s["n_trajectories"]),
        start_low=tuple(s["start_low"]),
        start_high=tuple(s["start_high"]),
        consensus_action=int(s["consensus_action"]),
        action_persistence=float(s["action_persistence"]),
        mix_probability=float(s["mix_probability"]),
        base_logit=float(s["base_logit"]),
        hazard_per_suboptimal=float(s["hazard_per_suboptimal"]),
        seed=stage_seed(cfg, "synth"),
    )
    dataset, truth = generate(spec)
    save_dataset(dataset, out_dir / "dataset.csv")
    save_schema(dataset.schema, out_dir / "schema.json")
    persist.write_csv(
        out_dir / "truth.csv",
        ["trajectory_id", "t", "oracle_dp", "region_id", "optimal_action"],
        truth.csv_rows(),
    )
    return f"synth: {len(dataset)} trajectories, {dataset.n_steps} steps, {int(truth.oracle_dp.sum())} oracle decision points"


def stage_split(cfg: dict, out_dir: Path) -> str:
    dataset_path = cfg["paths"].get("dataset") or out_dir / "dataset.csv"
    if not Path(dataset_path).exists():
        raise ArtifactError("missing artifact dataset.csv; run `synth` first or set paths.dataset")
    schema_path = out_dir / "schema.json"
    schema = load_schema(schema_path) if schema_path.exists() else None
    dataset = load_dataset(dataset_path, schema)
    if schema is None:
        save_schema(dataset.schema, schema_path)
    train, test = split_dataset(dataset, cfg["split"]["train_fraction"], stage_seed(cfg, "split"))
    save_dataset(train, out_dir / "train.csv")
    save_dataset(test, out_dir / "test.csv")
    return f"split: {len(train)} train / {len(test)} test trajectories"


def _features_enabled(cfg: dict, dataset: Dataset) -> bool:
    enabled = cfg["features"]["enabled"]
    if enabled == "auto":
        return dataset.schema.n_features > cfg["features"]["top_k"]
    return bool(enabled)


def stage_select_features(cfg: dict, out_dir: Path) -> str:
    # ranks over the full feature set even when a kernel restriction exists
    train = _load_split(out_dir, "train", restricted=False)
    X, y = train.step_arrays()
    f = cfg["features"]
    forest = train_forest(
        X,
        y,
        ForestConfig(
            n_trees=int(f["n_trees"]),
            max_depth=int(f["max_depth"]),
            class_weighting=f["class_weighting"],
            features_per_split=f["features_per_split"],
            seed=stage_seed(cfg, "features"),
        ),
    )
    report = feature_importances(forest, train.schema.feature_names)
    persist.write_csv(out_dir / "importances.csv", ["feature", "importance", "rank"], report.csv_rows())
    k = min(int(f["top_k"]), train.schema.n_features)
    selected = select_top_k(report, k)
    persist.write_json(out_dir / "selected_features.json", selected)
    return f"select-features: kept top {k} of {train.schema.n_features} features"


def stage_train_kernel(cfg: dict, out_dir: Path) -> str:
    schema_path = out_dir / "schema.json"
    schema = load_schema(schema_path) if schema_path.exists() else None
    train = load_dataset(_require(out_dir, "train.csv"), schema)
    selected_path = out_dir / "selected_features.json"
    if selected_path.exists():
        names = persist.read_json(selected_path)
        train = train.restrict_features(names)
    X, y = train.step_arrays()
    k = cfg["kernel"]
    model = train_kernel(
        X,
        y,
        TrainConfig(
            learning_rate=float(k["learning_rate"]),
            epochs=int(k["epochs"]),
            batch_size=int(k["batch_size"]),
            rff_dim=int(k["rff_dim"]),
            seed=stage_seed(cfg, "kernel"),
        ),
    )
    model.save(out_dir / "kernel_model.json")
    persist.write_json(out_dir / "kernel_features.json", list(train.schema.feature_names))
    w = ", ".join(f"{name}={weight:.3f}" for name, weight in zip(train.schema.feature_names, model.w))
    return f"train-kernel: loss {model.initial_loss:.4f} -> {model.final_loss:.4f}; w: {w}"


def stage_tune_dp(cfg: dict, out_dir: Path) -> str:
    model = KernelModel.load(_require(out_dir, "kernel_model.json"))
    train = _load_split(out_dir, "train")
    tune = cfg["dp"]["tune"]
    grid = [(float(d), int(n)) for d in tune["deltas"] for n in tune["ns"]]
    tune_seed = (
        int(tune["seed"])
        if tune.get("seed") is not None
        else (int(cfg["seed"]) * 1000003 + zlib.crc32(b"dp.tune")) % (2**31)
    )
    best, rows = tune_dp_config(
        train,
        model,
        grid,
        sample_size=int(tune["sample_size"]),
        rounds=int(tune["rounds"]),
        seed=tune_seed,
    )
    persist.write_csv(out_dir / "dp_tuning.csv", ["delta", "n", "auc"], rows)
    persist.write_json(
        out_dir / "dp_config.json",
        {"delta": best.delta, "min_neighbors": best.min_neighbors},
    )
    return f"tune-dp: best delta={best.delta} n={best.min_neighbors} over {len(grid)} cells"


def stage_find_dps(cfg: dict, out_dir: Path) -> str:
    model = KernelModel.load(_require(out_dir, "kernel_model.json"))
    dp_cfg = _dp_config(cfg, out_dir)
    train = _load_split(out_dir, "train")
    ann_train = annotate_dataset(train, model, dp_cfg)
    persist.write_annotations(out_dir / "annotations_train.csv", ann_train)
    n_dp = sum(a.is_dp for a in ann_train)
    summary = (
        f"find-dps: delta={dp_cfg.delta} n={dp_cfg.min_neighbors}; "
        f"{n_dp}/{len(ann_train)} train steps are decision points"
    )
    if (out_dir / "test.csv").exists():
        test = _load_split(out_dir, "test")
        ann_test = annotate_dataset(test, model, dp_cfg, reference=train)
        persist.write_annotations(out_dir / "annotations_test.csv", ann_test)
        summary += f"; {sum(a.is_dp for a in ann_test)}/{len(ann_test)} test steps"
    return summary


def _region_config(cfg: dict) -> RegionConfig:
    r = cfg["regions"]
    return RegionConfig(
        linkage=r["linkage"],
        homogeneity_threshold=float(r["homogeneity_threshold"]),
        feature_thresholds=dict(r["feature_thresholds"]),
        loop_threshold=float(r["loop_threshold"]),
        loop_window=int(r["loop_window"]),
        max_splits=int(r["max_splits"]),
        linkage_sample_cap=int(r["linkage_sample_cap"]),
        min_action_support=int(r["min_action_support"]),
        seed=stage_seed(cfg, "regions"),
    )


def stage_cluster(cfg: dict, out_dir: Path) -> str:
    train = _load_split(out_dir, "train")
    annotations = persist.align_annotations(
        train, persist.read_annotations(_require(out_dir, "annotations_train.csv"))
    )
    model, labels = fit_regions(train, annotations, _region_config(cfg))
    model.save(out_dir / "region_model.json")
    persist.write_labels(out_dir / "labels_train.csv", train, labels)
    header = ["cluster_id", "size", "loop_rate", "mortality_rate"] + [
        f"mean_{name}" for name in model.feature_names
    ]
    rows = [
        [k + 1, int(model.sizes[k]), float(model.loop_rates[k]), float(model.mortality_rates[k])]
        + [float(v) for v in model.feature_means[k]]
        for k in range(model.n_clusters)
    ]
    persist.write_csv(out_dir / "cluster_diagnostics.csv", header, rows)
    summary = f"cluster: K={model.n_clusters}, sizes={model.sizes.tolist()}"
    if (out_dir / "annotations_test.csv").exists():
        test = _load_split(out_dir, "test")
        ann_test = persist.align_annotations(
            test, persist.read_annotations(out_dir / "annotations_test.csv")
        )
        states, _ = test.step_arrays()
        dp_mask = np.array([a.is_dp for a in ann_test], dtype=bool)
        test_labels = np.zeros(test.n_steps, dtype=np.int64)
        if dp_mask.any():
            test_labels[dp_mask] = model.assign(states[dp_mask])
        persist.write_labels(out_dir / "labels_test.csv", test, test_labels)
    return summary


def _compress_split(cfg: dict, out_dir: Path, which: str) -> list:
    ds = _load_split(out_dir, which)
    labels = persist.read_labels(_require(out_dir, f"labels_{which}.csv"), ds)
    fn = SummaryFn(cfg["compression"]["summary"])
    return [
        compress_trajectory(traj, labels[sl], fn, ds.schema)
        for traj, sl in zip(ds.trajectories, ds.trajectory_slices())
    ]


def stage_compress(cfg: dict, out_dir: Path) -> str:
    _require(out_dir, "region_model.json")
    ctrain = _compress_split(cfg, out_dir, "train")
    save_compressed(ctrain, out_dir / "compressed_train.jsonl")
    mdp = estimate_mdp(ctrain, min_action_count=int(cfg["compression"]["min_action_count"]))
    mdp.save(out_dir / "mdp.json")
    summary = (
        f"compress: {len(ctrain)} train trajectories -> {len(mdp.clusters)} clusters, "
        f"{mdp.n_empty_trajectories} with no decision points"
    )
    if (out_dir / "labels_test.csv").exists():
        ctest = _compress_split(cfg, out_dir, "test")
        save_compressed(ctest, out_dir / "compressed_test.jsonl")
        summary += f"; {len(ctest)} test trajectories compressed"
    return summary


def stage_solve(cfg: dict, out_dir: Path) -> str:
    mdp = CompressedMdp.load(_require(out_dir, "mdp.json"))
    region_model = RegionModel.load(_require(out_dir, "region_model.json"))
    specs = _reward_specs(cfg)
    plan = cfg["planning"]
    pcfg = PlanningConfig(
        gamma=float(plan["gamma"]),
        tolerance=float(plan["tolerance"]),
        max_iterations=int(plan["max_iterations"]),
    )
    train = None
    labels = None
    if any(s.kind == "piecewise" for s in specs):
        train = _load_split(out_dir, "train")
        labels = persist.read_labels(_require(out_dir, "labels_train.csv"), train)
    solved = {}
    for spec in specs:
        table = build_rewards(mdp, region_model, spec, train, labels)
        table.save(out_dir / f"rewards_{spec.label}.json")
        policy = value_iteration(mdp, table, pcfg)
        policy.save(out_dir / f"policy_{spec.label}.json")
        solved[spec.label] = policy
    rows, agreement = compare_policies(mdp, solved)
    header = ["cluster_id", "behavior_dist"] + [f"{label}_action" for label in solved]
    csv_rows = []
    for row in rows:
        dist = ";".join(f"{a}:{persist.fmt(p)}" for a, p in sorted(row["behavior_dist"].items()))
        csv_rows.append(
            [row["cluster_id"], dist] + [row.get(f"{label}_action") for label in solved]
        )
    persist.write_csv(out_dir / "policy_comparison.csv", header, csv_rows)
    agree = ", ".join(f"{k}={v:.2f}" for k, v in agreement.items())
    return f"solve: {len(solved)} policies over {len(mdp.clusters)} clusters; behavior-mode agreement {agree}"


def stage_evaluate(cfg: dict, out_dir: Path) -> str:
    mdp = CompressedMdp.load(_require(out_dir, "mdp.json"))
    ctest = load_compressed(_require(out_dir, "compressed_test.jsonl"))
    specs = _reward_specs(cfg)
    ocfg = OpeConfig(
        clip_percentile=float(cfg["ope"]["clip_percentile"]),
        gamma=float(cfg["planning"]["gamma"]),
        eval_softening=float(cfg["ope"]["eval_softening"]),
    )
    reports = []
    # behavior row: the logged policy under the first configured reward
    first_rewards = RewardTable.load(_require(out_dir, f"rewards_{specs[0].label}.json"))
    reports.append(wis_evaluate(ctest, None, mdp, first_rewards, ocfg, name="behavior"))
    for spec in specs:
        rewards = RewardTable.load(_require(out_dir, f"rewards_{spec.label}.json"))
        policy = SolvedPolicy.load(_require(out_dir, f"policy_{spec.label}.json"))
        reports.append(wis_evaluate(ctest, policy.pi, mdp, rewards, ocfg, name=spec.label))
    persist.write_csv(
        out_dir / "ope.csv",
        ["policy", "wis", "ess", "n", "zero_weight_fraction", "clip_value"],
        (
            (
                r.policy,
                r.wis_estimate,
                r.ess,
                r.n_trajectories,
                r.n_zero_weight / r.n_trajectories,
                r.clip_value,
            )
            for r in reports
        ),
    )
    parts = ", ".join(f"{r.policy}: wis={r.wis_estimate:.3f} ess={r.ess:.0f}" for r in reports)
    return f"evaluate: {parts}"


def stage_report(cfg: dict, out_dir: Path) -> str:
    mdp = CompressedMdp.load(_require(out_dir, "mdp.json"))
    region_model = RegionModel.load(_require(out_dir, "region_model.json"))
    rep = cfg["report"]
    min_mortality = float(rep["min_mortality"])
    min_points = int(rep["min_treatment_points"])
    min_actions = int(rep["min_treated_actions"])

    kept = []
    for k in range(region_model.n_clusters):
        cluster_id = k + 1
        treated = sum(
            1 for a in mdp.observed_actions(cluster_id)
            if mdp.action_count(cluster_id, a) >= min_points
        )
        if region_model.mortality_rates[k] >= min_mortality and treated >= min_actions:
            kept.append(k)
    header = ["cluster_id", "size", "mortality_rate", "loop_rate"] + [
        f"mean_{name}" for name in region_model.feature_names
    ]
    rows = [
        [
            k + 1,
            int(region_model.sizes[k]),
            float(region_model.mortality_rates[k]),
            float(region_model.loop_rates[k]),
        ]
        + [float(v) for v in region_model.feature_means[k]]
        for k in kept
    ]
    persist.write_csv(out_dir / "report_cluster_means.csv", header, rows)

    # policy table (the per-cluster policy comparison, unfiltered)
    comparison = (_require(out_dir, "policy_comparison.csv")).read_text(encoding="utf-8")
    (out_dir / "report_policy_table.csv").write_text(comparison, encoding="utf-8")

    # the evaluation table with exactly policy / wis score / ess columns
    ope_rows = []
    with open(_require(out_dir, "ope.csv"), newline="", encoding="utf-8") as fh:
        import csv as _csv

        for row in _csv.DictReader(fh):
            ope_rows.append((row["policy"].capitalize(), row["wis"], row["ess"]))
    persist.write_csv(out_dir / "report_ope.csv", ["policy", "wis_score", "ess"], ope_rows)
    return (
        f"report: {len(rows)} of {region_model.n_clusters} clusters pass the filter "
        f"(mortality >= {min_mortality}, >= {min_actions} treatments with >= {min_points} points)"
    )


def stage_score_synth(cfg: dict, out_dir: Path) -> str:
    """Extra diagnostics when ground truth exists: recovery metrics vs truth."""
    import csv as _csv

    truth_path = out_dir / "truth.csv"
    if not truth_path.exists():
        return "score-synth: no truth.csv; skipped"
    from regionmdp.synth import SynthTruth

    keys, dp, rid, opt = [], [], [], []
    with open(truth_path, newline="", encoding="utf-8") as fh:
        for row in _csv.DictReader(fh):
            keys.append((row["trajectory_id"], int(row["t"])))
            dp.append(row["oracle_dp"] == "1")
            rid.append(int(row["region_id"]))
            opt.append(int(row["optimal_action"]))
    region_optimal = {}
    for r, o in zip(rid, opt):
        if r > 0:
            region_optimal[r] = o
    truth = SynthTruth(
        keys=keys,
        oracle_dp=np.array(dp, dtype=bool),
        region_id=np.array(rid, dtype=np.int64),
        optimal_action=np.array(opt, dtype=np.int64),
        region_optimal=region_optimal,
    )
    train = _load_split(out_dir, "train")
    annotations = persist.align_annotations(
        train, persist.read_annotations(_require(out_dir, "annotations_train.csv"))
    )
    labels = persist.read_labels(_require(out_dir, "labels_train.csv"), train)
    policy = None
    specs = _reward_specs(cfg)
    for spec in specs:
        if spec.kind == "mortality":
            policy = SolvedPolicy.load(_require(out_dir, f"policy_{spec.label}.json")).pi
            break
    metrics = score_recovery(truth, annotations, labels, policy)
    persist.write_json(out_dir / "synth_recovery.json", metrics)
    parts = ", ".join(f"{k}={v:.4f}" for k, v in sorted(metrics.items()))
    return f"score-synth: {parts}"


STAGE_FUNCS = {
    "synth": stage_synth,
    "split": stage_split,
    "select-features": stage_select_features,
    "train-kernel": stage_train_kernel,
    "tune-dp": stage_tune_dp,
    "find-dps": stage_find_dps,
    "cluster": stage_cluster,
    "compress": stage_compress,
    "solve": stage_solve,
    "evaluate": stage_evaluate,
    "report": stage_report,
    "score-synth": stage_score_synth,
}


def run_stage(name: str, cfg: dict, out_dir: Path) -> str:
    out_dir.mkdir(parents=True, exist_ok=True)
    persist.write_json(out_dir / "config_used.json", cfg)
    summary = STAGE_FUNCS[name](cfg, out_dir)
    print(summary)
    return summary


def run_pipeline(cfg: dict, out_dir: Path) -> None:
    for name in STAGE_ORDER:
        if name == "synth" and cfg["paths"].get("dataset"):
            continue  # external dataset supplied
        if name == "select-features":
            train = None
            try:
                train = _load_split(out_dir, "train", restricted=False)
            except RegionMdpError:
                pass
            if train is None or not _features_enabled(cfg, train):
                print("select-features: skipped (feature count at or below top_k)")
                continue
        if name == "tune-dp" and not cfg["dp"]["tune"]["enabled"]:
            print("tune-dp: skipped (disabled)")
            continue
        run_stage(name, cfg, out_dir)
    if (out_dir / "truth.csv").exists():
        run_stage("score-synth", cfg, out_dir)


_FLAG_MAP = {
    "n_trajectories": ("synth", "n_trajectories"),
    "horizon": ("synth", "horizon"),
    "train_fraction": ("split", "train_fraction"),
    "dataset": ("paths", "dataset"),
    "top_k": ("features", "top_k"),
    "epochs": ("kernel", "epochs"),
    "learning_rate": ("kernel", "learning_rate"),
    "rff_dim": ("kernel", "rff_dim"),
    "batch_size": ("kernel", "batch_size"),
    "sample_size": ("dp", "tune", "sample_size"),
    "rounds": ("dp", "tune", "rounds"),
    "delta": ("dp", "delta"),
    "min_neighbors": ("dp", "min_neighbors"),
    "homogeneity_threshold": ("regions", "homogeneity_threshold"),
    "loop_threshold": ("regions", "loop_threshold"),
    "max_splits": ("regions", "max_splits"),
    "summary": ("compression", "summary"),
    "min_action_count": ("compression", "min_action_count"),
    "gamma": ("planning", "gamma"),
    "clip_percentile": ("ope", "clip_percentile"),
    "filter_mortality": ("report", "min_mortality"),
    "min_treatment_points": ("report", "min_treatment_points"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="regionmdp",
        description="Compress batch trajectories into a decision-region MDP, solve it, and evaluate policies.",
    )
    parser.add_argument("--config", help="JSON config file; flags override its fields")
    parser.add_argument("--out-dir", help="artifact directory (default from config)")
    parser.add_argument("--seed", type=int, help="global seed override")
    sub = parser.add_subparsers(dest="stage", required=True)

    def add(name, helptext, flags=()):
        p = sub.add_parser(name, help=helptext)
        for flag, kind in flags:
            p.add_argument(flag, type=kind)
        return p

    add("synth", "generate the synthetic benchmark dataset",
        [("--n-trajectories", int), ("--horizon", int)])
    add("split", "split the dataset into train and test by trajectory",
        [("--train-fraction", float), ("--dataset", str)])
    add("select-features", "rank features by action-prediction importance",
        [("--top-k", int)])
    add("train-kernel", "learn the weighted similarity kernel",
        [("--epochs", int), ("--learning-rate", float), ("--rff-dim", int), ("--batch-size", int)])
    add("tune-dp", "grid-search the neighbor threshold and support count",
        [("--sample-size", int), ("--rounds", int)])
    add("find-dps", "annotate decision points",
        [("--delta", float), ("--min-neighbors", int)])
    add("cluster", "cluster decision points into regions",
        [("--homogeneity-threshold", float), ("--loop-threshold", float), ("--max-splits", int)])
    add("compress", "compress trajectories and estimate the MDP",
        [("--summary", str), ("--min-action-count", int)])
    add("solve", "build rewards and run value iteration", [("--gamma", float)])
    add("evaluate", "weighted importance sampling on the test split",
        [("--clip-percentile", float)])
    add("report", "emit the cluster mean, policy and evaluation tables",
        [("--filter-mortality", float), ("--min-treatment-points", int)])
    add("score-synth", "score recovery against synthetic ground truth")
    add("pipeline", "run every stage in order")
    return parser


def apply_flags(cfg: dict, args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(cfg)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out_dir is not None:
        cfg["paths"]["out_dir"] = args.out_dir
    for attr, path in _FLAG_MAP.items():
        value = getattr(args, attr, None)
        if value is None:
            continue
        node = cfg
        for key in path[:-1]:
            node = node[key]
        node[path[-1]] = value
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        cfg = apply_flags(cfg, args)
        validate_config(cfg)
        out_dir = Path(cfg["paths"]["out_dir"])
        if args.stage == "pipeline":
            out_dir.mkdir(parents=True, exist_ok=True)
            run_pipeline(cfg, out_dir)
        else:
            run_stage(args.stage, cfg, out_dir)
    except RegionMdpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
