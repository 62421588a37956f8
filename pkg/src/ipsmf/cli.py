"""Experiment orchestration: config files, subcommands, sweeps, result tables.

Config files are INI-style key=value text with one section per concern
([simulation] or [data], [experiment], [train], optional [method X] overrides,
and [tune] grids); the full schema is documented in the README. Subcommands:

    simulate     write simulated train/validation/mcar/test files + manifest
    train        fit and evaluate each (method, seed), write result tables
    tune         grid-search hyperparameters per method on the validation set
    sweep-gamma  simulate/train/evaluate across a list of gamma values
    summarize    aggregate a results table into per-method mean/std/CI rows

Every result row carries (config hash, dataset, gamma, method, seed, split
sizes); reruns with identical config and seeds reproduce output files byte for
byte.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import (
    RatingDataset,
    SplitBundle,
    filter_to_test_users,
    load_ratings,
    load_rating_pair,
    reindex_users,
    save_ratings,
    split_biased,
    split_unbiased,
    write_manifest,
)
from .metrics import METRIC_FIELDS, bootstrap_interval, evaluate
from .model import fit_avg, save_checkpoint
from .optim import (
    TrainConfig,
    TrainingDivergedError,
    evaluate_validation,
    save_history,
    train_alternating,
    train_concurrent,
)
from .propensity import (
    PropensityModel,
    SmoothingConfig,
    estimate_mf_propensity,
    estimate_multifactorial,
    estimate_popularity,
    estimate_positivity,
    load_propensity,
    prepare,
    save_propensity,
    uniform_propensities,
)
from .sim import SimulationSpec, simulate

logger = logging.getLogger(__name__)

METHODS = ("avg", "mf", "mf_ips_pop", "mf_ips_pos", "mf_ips_mul", "mf_ips_mf", "mf_ips_gt")

TRAIN_KEYS = (
    "learning_rate", "l2_weight", "batch_size", "max_epochs", "patience",
    "schedule", "embedding_dim", "init_scale",
)
PIPELINE_KEYS = (
    "normalize", "clip_floor", "alpha1", "alpha2",
    "propensity_dim", "propensity_learning_rate", "propensity_steps",
)

RESULT_COLUMNS = (
    "config_hash", "dataset", "gamma", "method", "seed", "schedule",
    "learning_rate", "l2_weight", "embedding_dim", "batch_size",
    "alpha1", "alpha2", "clip_floor", "normalization", "clamped",
    "n_train", "n_validation", "n_mcar", "n_test",
    "epochs_run", "best_epoch",
    "mse", "mae", "rmse", "rmse_per_user", "rmse_per_item",
)


class ConfigError(ValueError):
    """An experiment config is missing or misusing a field."""


def _parse_bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_list(text: str, cast):
    return [cast(part.strip()) for part in text.split(",") if part.strip()]


def _parse_delimiter(text: str) -> str:
    return {"\\t": "\t", "tab": "\t"}.get(text.strip(), text.strip())


@dataclass
class ExperimentConfig:
    config_hash: str
    methods: list[str]
    seeds: list[int]
    output_dir: Path
    clamp_predictions: bool
    train: dict
    method_overrides: dict[str, dict]
    simulation: dict | None
    data: dict | None
    gammas: list[float]
    tune: dict[str, list]

    def train_settings(self, method: str, seed: int) -> TrainConfig:
        merged = dict(self.train)
        merged.update({
            k: v for k, v in self.method_overrides.get(method, {}).items()
            if k in TRAIN_KEYS
        })
        return TrainConfig(seed=seed, **merged)

    def pipeline_settings(self, method: str) -> dict:
        settings = {
            "normalize": True,
            "clip_floor": None,
            "alpha1": 1.0,
            "alpha2": 1.0,
            "propensity_dim": 8,
            "propensity_learning_rate": 0.05,
            "propensity_steps": 300,
        }
        for source in (self.method_overrides.get("*", {}), self.method_overrides.get(method, {})):
            settings.update({k: v for k, v in source.items() if k in PIPELINE_KEYS})
        return settings


_TRAIN_CASTS = {
    "learning_rate": float, "l2_weight": float, "batch_size": int,
    "max_epochs": int, "patience": int, "schedule": str,
    "embedding_dim": int, "init_scale": float,
}
_PIPELINE_CASTS = {
    "normalize": _parse_bool, "clip_floor": float, "alpha1": float, "alpha2": float,
    "propensity_dim": int, "propensity_learning_rate": float, "propensity_steps": int,
}
_SIMULATION_CASTS = {
    "num_users": int, "num_items": int, "gamma": float, "seed": int,
    "powerlaw_eta": float, "k_min": int, "unbiased_per_user": int,
    "mcar_fraction": float, "train_fraction": float,
    "engagement_rank": int, "engagement_noise": float, "engagement_path": str,
    "engagement_format": str,
}
_SIMULATION_LISTS = {"rating_propensities", "target_rating_distribution"}
_DATA_CASTS = {
    "train": str, "validation": str, "mcar": str, "test": str,
    "biased": str, "unbiased": str, "ground_truth_propensities": str,
    "delimiter": _parse_delimiter, "dense_ids": _parse_bool, "filter_users": _parse_bool,
    "train_fraction": float, "mcar_fraction": float, "split_seed": int,
    "num_users": int, "num_items": int,
}


def _parse_section(parser: configparser.ConfigParser, name: str, casts: dict, lists=()) -> dict:
    out: dict = {}
    if not parser.has_section(name):
        return out
    for key, value in parser.items(name):
        if key in lists:
            out[key] = tuple(_parse_list(value, float))
        elif key in casts:
            if value.strip() == "":
                continue
            try:
                out[key] = casts[key](value)
            except (ValueError, ConfigError) as exc:
                raise ConfigError(f"[{name}] {key}: {exc}") from None
        else:
            raise ConfigError(f"[{name}] unknown key {key!r}")
    return out


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.read_string(text)

    exp = dict(parser.items("experiment")) if parser.has_section("experiment") else {}
    methods = _parse_list(exp.get("methods", "mf"), str)
    for method in methods:
        if method not in METHODS:
            raise ConfigError(f"[experiment] methods: unknown method {method!r}")
    seeds = _parse_list(exp.get("seeds", "0"), int)
    if not methods or not seeds:
        raise ConfigError("[experiment] methods and seeds must be nonempty")
    gammas = _parse_list(exp.get("gammas", "0.0, 0.25, 0.5, 0.75, 1.0"), float)

    train = _parse_section(parser, "train", _TRAIN_CASTS)
    overrides: dict[str, dict] = {}
    pipeline_common = _parse_section(parser, "propensity", _PIPELINE_CASTS)
    if pipeline_common:
        overrides["*"] = pipeline_common
    for section in parser.sections():
        if section.startswith("method "):
            method = section[len("method "):].strip()
            if method not in METHODS:
                raise ConfigError(f"[{section}] unknown method")
            overrides[method] = _parse_section(
                parser, section, {**_TRAIN_CASTS, **_PIPELINE_CASTS}
            )

    simulation = _parse_section(
        parser, "simulation", _SIMULATION_CASTS, lists=_SIMULATION_LISTS
    ) if parser.has_section("simulation") else None
    data = _parse_section(parser, "data", _DATA_CASTS) if parser.has_section("data") else None
    if simulation is None and data is None:
        raise ConfigError("config needs a [simulation] or [data] section")

    tune_raw = dict(parser.items("tune")) if parser.has_section("tune") else {}
    tune = {
        "learning_rate": _parse_list(tune_raw.get("learning_rate", "1e-3, 1e-4, 1e-5"), float),
        "l2_weight": _parse_list(
            tune_raw.get("l2_weight", "1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2"), float),
        "embedding_dim": _parse_list(tune_raw.get("embedding_dim", "16, 32, 64, 128"), int),
        "alpha1": _parse_list(tune_raw.get("alpha1", "1,2,3,4,5,6,7,8,9,10"), float),
        "alpha2": _parse_list(tune_raw.get("alpha2", "1,2,3,4,5,6,7,8,9,10"), float),
        "budget": int(tune_raw.get("budget", "0")),
    }

    if "mf_ips_gt" in methods and simulation is None and not (data or {}).get("ground_truth_propensities"):
        raise ConfigError(
            "[experiment] methods: mf_ips_gt requires simulation input or a "
            "ground_truth_propensities file"
        )

    return ExperimentConfig(
        config_hash=hashlib.sha256(text.encode("utf-8")).hexdigest()[:12],
        methods=methods,
        seeds=seeds,
        output_dir=Path(exp.get("output_dir", "out")),
        clamp_predictions=_parse_bool(exp.get("clamp_predictions", "false")),
        train=train,
        method_overrides=overrides,
        simulation=simulation,
        data=data,
        gammas=gammas,
        tune=tune,
    )


def _simulation_spec(cfg: ExperimentConfig, seed_offset: int = 0, gamma: float | None = None) -> SimulationSpec:
    kwargs = dict(cfg.simulation)
    base_seed = kwargs.pop("seed", 0)
    if gamma is not None:
        kwargs["gamma"] = gamma
    try:
        return SimulationSpec(seed=base_seed + seed_offset, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"simulation: {exc}") from None


@dataclass
class LoadedData:
    bundle: SplitBundle
    ground_truth: PropensityModel | None
    label: str
    gamma: float | None


def _load_split_files(data_cfg: dict) -> LoadedData:
    delim = data_cfg.get("delimiter", ",")
    dense = data_cfg.get("dense_ids", True)
    num_users = data_cfg.get("num_users")
    num_items = data_cfg.get("num_items")
    parts = {}
    for split in ("train", "validation", "mcar", "test"):
        if split not in data_cfg:
            raise ConfigError(f"[data] missing {split} path")
        parts[split], _ = load_ratings(
            data_cfg[split], delimiter=delim, num_users=num_users,
            num_items=num_items, dense_ids=dense,
        )
    gt = None
    if data_cfg.get("ground_truth_propensities"):
        if not dense:
            raise ConfigError("[data] ground_truth_propensities requires dense_ids")
        gt = load_propensity(data_cfg["ground_truth_propensities"], delimiter=delim)
    counts_u = max(p.num_users for p in parts.values())
    counts_i = max(p.num_items for p in parts.values())
    if gt is not None and gt.per_item_rating is not None:
        # the table covers the full simulated item space, including items that
        # happen to be unobserved in every split
        counts_i = max(counts_i, gt.per_item_rating.shape[0])
    parts = {
        k: RatingDataset(counts_u, counts_i, p.users, p.items, p.ratings, p.rating_scale)
        for k, p in parts.items()
    }
    label = Path(data_cfg["train"]).stem
    return LoadedData(SplitBundle(**parts), gt, label, None)


def _load_raw_files(data_cfg: dict) -> LoadedData:
    delim = data_cfg.get("delimiter", ",")
    biased, unbiased, _ = load_rating_pair(
        data_cfg["biased"], data_cfg["unbiased"], delimiter=delim
    )
    if data_cfg.get("filter_users", True):
        biased = filter_to_test_users(biased, unbiased)
        biased, unbiased = reindex_users([biased, unbiased], np.unique(unbiased.users))
    split_seed = data_cfg.get("split_seed", 0)
    train, validation = split_biased(
        biased, data_cfg.get("train_fraction", 0.8), [split_seed, 0]
    )
    mcar, test = split_unbiased(
        unbiased, data_cfg.get("mcar_fraction", 0.05), [split_seed, 1]
    )
    bundle = SplitBundle(train=train, validation=validation, mcar=mcar, test=test)
    return LoadedData(bundle, None, Path(data_cfg["biased"]).stem, None)


def load_experiment_data(cfg: ExperimentConfig, run_seed: int, gamma: float | None = None) -> LoadedData:
    """Build the split bundle for one run.

    With [simulation], every run draws an independent simulated dataset from
    seed ``simulation.seed + run_seed``. With [data], files are loaded once per
    run but are identical across runs (only training randomness varies).
    """
    if cfg.simulation is not None:
        spec = _simulation_spec(cfg, seed_offset=run_seed, gamma=gamma)
        result = simulate(spec)
        return LoadedData(
            result.bundle, result.ground_truth_propensities, "simulation", spec.gamma
        )
    data_cfg = cfg.data or {}
    if "biased" in data_cfg:
        return _load_raw_files(data_cfg)
    return _load_split_files(data_cfg)


def build_propensity_model(
    method: str,
    bundle: SplitBundle,
    pipeline: dict,
    ground_truth: PropensityModel | None = None,
    seed: int = 0,
) -> PropensityModel | None:
    """Estimate, normalize, and clip the propensity model a method trains with."""
    train = bundle.train
    n_u, n_i = train.num_users, train.num_items
    if method == "avg":
        return None
    if method == "mf_ips_gt":
        if ground_truth is None:
            raise ConfigError("mf_ips_gt requires ground-truth propensities")
        return ground_truth  # exact table: no normalization or clipping
    if method == "mf":
        model = uniform_propensities(train, n_u, n_i)
    elif method == "mf_ips_pop":
        model = estimate_popularity(train, n_u, n_i)
    elif method == "mf_ips_pos":
        if len(bundle.mcar) == 0:
            raise ConfigError("mf_ips_pos requires a nonempty mcar split")
        model = estimate_positivity(train, bundle.mcar, n_u, n_i)
    elif method == "mf_ips_mul":
        if len(bundle.mcar) == 0:
            raise ConfigError("mf_ips_mul requires a nonempty mcar split")
        model = estimate_multifactorial(
            train, bundle.mcar, n_u, n_i,
            SmoothingConfig(pipeline["alpha1"], pipeline["alpha2"]),
        )
    elif method == "mf_ips_mf":
        model = estimate_mf_propensity(
            train, n_u, n_i,
            dim=pipeline["propensity_dim"],
            learning_rate=pipeline["propensity_learning_rate"],
            max_steps=pipeline["propensity_steps"],
            seed=seed,
        )
    else:
        raise ConfigError(f"unknown method {method!r}")
    return prepare(
        model, train,
        do_normalize=pipeline["normalize"],
        clip_floor=pipeline["clip_floor"],
    )


def run_method(
    method: str,
    loaded: LoadedData,
    train_config: TrainConfig,
    pipeline: dict,
    clamp: bool = False,
):
    """Fit one method on one bundle and evaluate on the test split.

    Returns (report, train_result_or_None, propensity_model_or_None).
    """
    bundle = loaded.bundle
    if method == "avg":
        report = evaluate(fit_avg(bundle.train), bundle.test, clamp=clamp)
        return report, None, None
    prop = build_propensity_model(
        method, bundle, pipeline, loaded.ground_truth, seed=train_config.seed
    )
    train_fn = train_alternating if train_config.schedule == "alternating" else train_concurrent
    result = train_fn(bundle, prop, train_config)
    report = evaluate(result.params, bundle.test, clamp=clamp)
    return report, result, prop


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def _write_rows(path: Path, columns, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_format_cell(row.get(c)) for c in columns) + "\n")


def _read_rows(path: Path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        return [dict(zip(header, line.strip().split(","))) for line in fh if line.strip()]


def _result_row(cfg, loaded, method, seed, train_config, pipeline, report, result, prop):
    row = {
        "config_hash": cfg.config_hash,
        "dataset": loaded.label,
        "gamma": loaded.gamma,
        "method": method,
        "seed": seed,
        "clamped": cfg.clamp_predictions,
        "n_train": len(loaded.bundle.train),
        "n_validation": len(loaded.bundle.validation),
        "n_mcar": len(loaded.bundle.mcar),
        "n_test": len(loaded.bundle.test),
        "mse": report.mse,
        "mae": report.mae,
        "rmse": report.rmse,
        "rmse_per_user": report.rmse_per_user,
        "rmse_per_item": report.rmse_per_item,
    }
    if method != "avg":
        row.update({
            "schedule": train_config.schedule,
            "learning_rate": train_config.learning_rate,
            "l2_weight": train_config.l2_weight,
            "embedding_dim": train_config.embedding_dim,
            "batch_size": train_config.batch_size,
            "epochs_run": len(result.history),
            "best_epoch": result.best_epoch,
            "clip_floor": prop.clip_floor,
            "normalization": prop.normalization,
        })
        if method == "mf_ips_mul":
            row.update({"alpha1": pipeline["alpha1"], "alpha2": pipeline["alpha2"]})
    return row


def _run_cell(args) -> list[dict]:
    """One worker cell: simulate/load a bundle for (gamma, seed), run all methods.

    Returns one record per method with the result row and, when requested,
    the training history and fitted parameters for artifact files.
    """
    cfg, seed, gamma, keep_artifacts = args
    loaded = load_experiment_data(cfg, run_seed=seed, gamma=gamma)
    records = []
    for method in cfg.methods:
        train_config = cfg.train_settings(method, seed)
        pipeline = cfg.pipeline_settings(method)
        report, result, prop = run_method(
            method, loaded, train_config, pipeline, clamp=cfg.clamp_predictions
        )
        record = {
            "row": _result_row(
                cfg, loaded, method, seed, train_config, pipeline, report, result, prop
            )
        }
        if keep_artifacts and result is not None:
            record["history"] = result.history
            record["params"] = result.params
        records.append(record)
    return records


def _run_cells(cfg, cells, threads: int) -> list[list[dict]]:
    if threads <= 1:
        return [_run_cell(c) for c in cells]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_run_cell, cells))


# --------------------------------------------------------------------------
# subcommands


def cmd_simulate(cfg: ExperimentConfig, out_dir: Path) -> None:
    if cfg.simulation is None:
        raise ConfigError("simulate requires a [simulation] section")
    spec = _simulation_spec(cfg)
    result = simulate(spec)
    out_dir.mkdir(parents=True, exist_ok=True)
    bundle = result.bundle
    for name in ("train", "validation", "mcar", "test"):
        save_ratings(getattr(bundle, name), out_dir / f"{name}.csv")
    save_propensity(result.ground_truth_propensities, out_dir / "gt_propensities.csv")
    manifest = {
        "config_hash": cfg.config_hash,
        "num_users": spec.num_users,
        "num_items": spec.num_items,
        "gamma": repr(spec.gamma),
        "seed": spec.seed,
        "powerlaw_eta": repr(spec.powerlaw_eta),
        "k_min": spec.k_min,
        "unbiased_per_user": spec.unbiased_per_user,
        "mcar_fraction": repr(spec.mcar_fraction),
        "train_fraction": repr(spec.train_fraction),
        "rating_propensities": ",".join(repr(p) for p in spec.rating_propensities),
        "capped_item_propensities": result.capped_items,
        "n_train": len(bundle.train),
        "n_validation": len(bundle.validation),
        "n_mcar": len(bundle.mcar),
        "n_test": len(bundle.test),
    }
    write_manifest(out_dir / "manifest.txt", manifest)
    logger.info("wrote simulated splits to %s", out_dir)


def cmd_train(cfg: ExperimentConfig, out_dir: Path, threads: int = 1) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = [(cfg, seed, None, True) for seed in cfg.seeds]
    records = [rec for cell in _run_cells(cfg, cells, threads) for rec in cell]

    for record in records:
        row = record["row"]
        if "history" not in record:
            continue
        tag = f"{row['method']}_seed{row['seed']}"
        save_history(record["history"], out_dir / f"history_{tag}.csv")
        save_checkpoint(
            record["params"], out_dir / f"checkpoint_{tag}.bin", seed=row["seed"]
        )

    rows = sorted((r["row"] for r in records), key=lambda r: (r["method"], r["seed"]))
    results_path = out_dir / "results.csv"
    _write_rows(results_path, RESULT_COLUMNS, rows)
    cmd_summarize(results_path, out_dir / "summary.csv")

    if cfg.data and "biased" in cfg.data:
        # raw two-file input: record how it was split (identical for every run)
        loaded = load_experiment_data(cfg, run_seed=cfg.seeds[0])
        write_manifest(out_dir / "split_manifest.txt", {
            "config_hash": cfg.config_hash,
            "split_seed": cfg.data.get("split_seed", 0),
            "train_fraction": repr(cfg.data.get("train_fraction", 0.8)),
            "mcar_fraction": repr(cfg.data.get("mcar_fraction", 0.05)),
            "n_train": len(loaded.bundle.train),
            "n_validation": len(loaded.bundle.validation),
            "n_mcar": len(loaded.bundle.mcar),
            "n_test": len(loaded.bundle.test),
        })
    return results_path


def cmd_sweep_gamma(cfg: ExperimentConfig, out_dir: Path, gammas=None, threads: int = 1) -> Path:
    if cfg.simulation is None:
        raise ConfigError("sweep-gamma requires a [simulation] section")
    out_dir.mkdir(parents=True, exist_ok=True)
    gammas = list(cfg.gammas if gammas is None else gammas)
    cells = [(cfg, seed, gamma, False) for gamma in gammas for seed in cfg.seeds]
    rows = [rec["row"] for cell in _run_cells(cfg, cells, threads) for rec in cell]
    rows.sort(key=lambda r: (r["gamma"], r["method"], r["seed"]))
    results_path = out_dir / "sweep_results.csv"
    _write_rows(results_path, RESULT_COLUMNS, rows)
    cmd_summarize(results_path, out_dir / "sweep_summary.csv")
    return results_path


def cmd_summarize(results_path: Path, summary_path: Path) -> Path:
    """Aggregate per-run rows into per-(dataset, gamma, method) summary rows
    with mean, standard deviation, and 95% bootstrap intervals (1000 resamples)."""
    rows = _read_rows(Path(results_path))
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        groups.setdefault((row["dataset"], row["gamma"], row["method"]), []).append(row)

    columns = ["dataset", "gamma", "method", "n_runs"]
    for name in METRIC_FIELDS:
        columns += [f"{name}_mean", f"{name}_std"]
    for name in ("mse", "mae"):
        columns += [f"{name}_ci_low", f"{name}_ci_high"]

    out_rows = []
    for key in sorted(groups):
        group = groups[key]
        row = {"dataset": key[0], "gamma": key[1], "method": key[2], "n_runs": len(group)}
        for name in METRIC_FIELDS:
            values = np.array([float(r[name]) for r in group])
            row[f"{name}_mean"] = float(values.mean())
            row[f"{name}_std"] = float(values.std(ddof=1)) if len(values) > 1 else 0.0
        for name in ("mse", "mae"):
            values = np.array([float(r[name]) for r in group])
            low, high = bootstrap_interval(values, num_resamples=1000, seed=0)
            row[f"{name}_ci_low"] = low
            row[f"{name}_ci_high"] = high
        out_rows.append(row)
    _write_rows(Path(summary_path), columns, out_rows)
    return Path(summary_path)


def cmd_tune(cfg: ExperimentConfig, out_dir: Path) -> Path:
    """Full-grid search per method, selected on the validation split.

    IPS methods are selected by self-normalized weighted validation MSE under
    their own propensities; mf and avg by plain validation MSE. A nonzero
    [tune] budget caps the number of grid points per method.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = cfg.seeds[0]
    loaded = load_experiment_data(cfg, run_seed=seed)
    budget = cfg.tune["budget"]

    tuned_rows = []
    for method in cfg.methods:
        points = _grid_points(cfg, method)
        if not points:
            raise ConfigError(f"empty tuning grid for {method}")
        if budget > 0:
            points = points[:budget]
        best = None
        for point in points:
            score, clip_floor = _validation_score(cfg, loaded, method, seed, point)
            if best is None or score < best[0]:
                best = (score, point, clip_floor)
        score, point, clip_floor = best
        row = {"method": method, "validation_score": score, "clip_floor": clip_floor,
               "points_evaluated": len(points), **point}
        tuned_rows.append(row)

    columns = ("method", "learning_rate", "l2_weight", "embedding_dim",
               "alpha1", "alpha2", "clip_floor", "validation_score", "points_evaluated")
    path = out_dir / "tuned.csv"
    _write_rows(path, columns, tuned_rows)
    return path


def _grid_points(cfg: ExperimentConfig, method: str) -> list[dict]:
    if method == "avg":
        return [{}]
    grid = cfg.tune
    points = []
    for lr in grid["learning_rate"]:
        for l2 in grid["l2_weight"]:
            for dim in grid["embedding_dim"]:
                base = {"learning_rate": lr, "l2_weight": l2, "embedding_dim": dim}
                if method == "mf_ips_mul":
                    for a1 in grid["alpha1"]:
                        for a2 in grid["alpha2"]:
                            points.append({**base, "alpha1": a1, "alpha2": a2})
                else:
                    points.append(base)
    return points


def _validation_score(cfg, loaded, method, seed, point) -> tuple[float, float | None]:
    """Score one grid point on the validation split; returns (score, effective
    clip floor). Weighted methods use self-normalized weighted MSE under their
    own propensities, mf and avg plain MSE."""
    bundle = loaded.bundle
    pipeline = cfg.pipeline_settings(method)
    pipeline.update({k: v for k, v in point.items() if k in PIPELINE_KEYS})
    if method == "avg":
        model = fit_avg(bundle.train)
        return evaluate(model, bundle.validation).mse, None
    merged = dict(cfg.train)
    merged.update({
        k: v for k, v in cfg.method_overrides.get(method, {}).items() if k in TRAIN_KEYS
    })
    merged.update({k: v for k, v in point.items() if k in TRAIN_KEYS and k != "seed"})
    train_config = TrainConfig(seed=seed, **merged)
    try:
        report, result, prop = run_method(method, loaded, train_config, pipeline)
    except TrainingDivergedError as exc:
        logger.warning("%s diverged at %s: %s", method, point, exc)
        return float("inf"), None
    if method == "mf":
        return evaluate(result.params, bundle.validation).mse, prop.clip_floor
    return (
        evaluate_validation(result.params, bundle.validation, prop),
        prop.clip_floor,
    )


# --------------------------------------------------------------------------
# entry point


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ipsmf", description="Debiased rating-prediction experiments."
    )
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=(name != "summarize"))
        p.add_argument("--out", default=None, help="output directory override")
        return p

    add("simulate", "write simulated dataset splits and a manifest")
    p_train = add("train", "fit and evaluate configured methods and seeds")
    p_train.add_argument("--seeds", default=None, help="comma-separated seed override")
    p_train.add_argument("--threads", type=int, default=1)
    p_train.add_argument("--clamp-predictions", action="store_true")
    p_tune = add("tune", "grid-search hyperparameters per method")
    p_sweep = add("sweep-gamma", "simulate/train across gamma values")
    p_sweep.add_argument("--gammas", default=None, help="comma-separated gamma override")
    p_sweep.add_argument("--seeds", default=None)
    p_sweep.add_argument("--threads", type=int, default=1)
    p_sum = sub.add_parser("summarize", help="aggregate a results table")
    p_sum.add_argument("--results", required=True)
    p_sum.add_argument("--out", default=None)

    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.INFO))

    try:
        if args.command == "summarize":
            results = Path(args.results)
            out = Path(args.out) if args.out else results.parent / "summary.csv"
            cmd_summarize(results, out)
            return 0

        cfg = load_config(args.config)
        if getattr(args, "seeds", None):
            cfg = replace(cfg, seeds=_parse_list(args.seeds, int))
        if getattr(args, "clamp_predictions", False):
            cfg = replace(cfg, clamp_predictions=True)
        out_dir = Path(args.out) if args.out else cfg.output_dir

        if args.command == "simulate":
            cmd_simulate(cfg, out_dir)
        elif args.command == "train":
            cmd_train(cfg, out_dir, threads=args.threads)
        elif args.command == "tune":
            cmd_tune(cfg, out_dir)
        elif args.command == "sweep-gamma":
            gammas = _parse_list(args.gammas, float) if args.gammas else None
            cmd_sweep_gamma(cfg, out_dir, gammas=gammas, threads=args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
