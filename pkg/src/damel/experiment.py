"""Config-driven experiment runner: single runs, seed sweeps, ablation grids.

Configs are JSON with three blocks (dataset, model, train) plus seeds and
output_dir; unknown keys are rejected so typos cannot silently corrupt a
grid. Every run writes its own directory (run.json, metrics.csv, eval.json,
confusion.csv, checkpoint.bin, onehot.npy) under
output_dir/<suite>/<cell>/<seed>/ and is reproducible from its config hash
plus seed.

Checkpoint layout: 8-byte magic "DAMELCKP", u32 LE config-JSON length, the
config JSON, u64 LE parameter count, raw little-endian float64 trained
weights, then the averaged weights when an averaging scheme was active.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import os
import shutil
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .averaging import export_eval_weights, recompute_running_stats
from .data import (
    Dataset,
    group_partition,
    load_csv_dataset,
    load_idx_dataset,
    long_tail_counts,
    split_balanced_holdout,
    subsample_longtail,
    synthesize_balanced_test,
    synthesize_gaussian_longtail,
)
from .errors import ConfigError, DamelError
from .evaluation import (
    EvalReport,
    bias_variance_decompose,
    evaluate,
    labels_one_hot,
    one_hot_predictions,
)
from .model import DamelConfig, init_model
from .training import TrainConfig, make_avg_state, train

CHECKPOINT_MAGIC = b"DAMELCKP"
WORKERS_ENV_VAR = "DAMEL_WORKERS"

SUITES = ("table5", "table7", "table8", "table9", "table10", "table11", "table12")

_SOURCES = ("synthetic", "idx", "csv")
_DATASET_KEYS = {
    "synthetic": {"source", "num_classes", "head_count", "imbalance_ratio",
                  "feature_dim", "class_sep", "test_per_class", "base_seed"},
    "idx": {"source", "num_classes", "head_count", "imbalance_ratio",
            "images", "labels", "test_per_class", "base_seed"},
    "csv": {"source", "num_classes", "head_count", "imbalance_ratio",
            "csv_path", "test_per_class", "base_seed"},
}
_MODEL_KEYS = {"num_experts", "hidden_dim", "rep_dim", "scale", "variant",
               "use_norm_layers", "use_bias", "ref_experts"}
_TRAIN_KEYS = {"epochs", "batch_size", "lr", "momentum", "cb_loss_weight",
               "ema_rate", "ema_frequency", "averaging", "decoupled", "cb_loss_enabled"}
_TOP_KEYS = {"dataset", "model", "train", "seeds", "output_dir"}


@dataclass
class DatasetBlock:
    source: str
    num_classes: int
    head_count: int
    imbalance_ratio: float
    test_per_class: int = 100
    base_seed: int = 0
    feature_dim: Optional[int] = None
    class_sep: Optional[float] = None
    images: Optional[str] = None
    labels: Optional[str] = None
    csv_path: Optional[str] = None


@dataclass
class ModelBlock:
    num_experts: int = 3
    hidden_dim: int = 64
    rep_dim: int = 32
    scale: float = 16.0
    variant: str = "standard"
    use_norm_layers: bool = True
    use_bias: bool = True
    ref_experts: Optional[int] = None


@dataclass
class ExperimentConfig:
    dataset: DatasetBlock
    model: ModelBlock
    train: TrainConfig
    seeds: list
    output_dir: str


def _check_keys(block: dict, allowed: set, where: str) -> None:
    unknown = set(block) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)} (allowed: {sorted(allowed)})")


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a raw config dict into typed blocks; rejects unknown keys."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys(raw, _TOP_KEYS, "config")
    for required in ("dataset", "model", "train"):
        if required not in raw:
            raise ConfigError(f"config: missing block {required!r}")

    dblock = dict(raw["dataset"])
    source = dblock.get("source")
    if source not in _SOURCES:
        raise ConfigError(f"dataset.source must be one of {_SOURCES}, got {source!r}")
    _check_keys(dblock, _DATASET_KEYS[source], f"dataset ({source})")
    dataset = DatasetBlock(**dblock)
    if source == "synthetic":
        if dataset.feature_dim is None or dataset.class_sep is None:
            raise ConfigError("dataset (synthetic): feature_dim and class_sep are required")
    if source == "idx" and (dataset.images is None or dataset.labels is None):
        raise ConfigError("dataset (idx): images and labels paths are required")
    if source == "csv" and dataset.csv_path is None:
        raise ConfigError("dataset (csv): csv_path is required")
    if dataset.test_per_class < 1:
        raise ConfigError(f"dataset: test_per_class must be >= 1, got {dataset.test_per_class}")
    # Surface count-profile domain errors before any run starts.
    try:
        long_tail_counts(dataset.num_classes, dataset.head_count, dataset.imbalance_ratio)
    except DamelError as err:
        raise ConfigError(f"dataset: {err}") from None

    _check_keys(dict(raw["model"]), _MODEL_KEYS, "model")
    model = ModelBlock(**raw["model"])
    _check_keys(dict(raw["train"]), _TRAIN_KEYS, "train")
    try:
        train_cfg = TrainConfig(**raw["train"]).validate()
    except DamelError as err:
        raise ConfigError(f"train: {err}") from None

    probe_dim = dataset.feature_dim if dataset.feature_dim else 1
    try:
        build_damel_config(model, dataset, probe_dim).validate()
    except DamelError as err:
        raise ConfigError(f"model: {err}") from None

    seeds = list(raw.get("seeds", [0]))
    if not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds must be a non-empty list of integers")
    output_dir = raw.get("output_dir", "runs")
    return ExperimentConfig(dataset, model, train_cfg, seeds, str(output_dir))


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON ({err})") from None
    return parse_config(raw)


def default_config(output_dir: str = "runs") -> ExperimentConfig:
    """The default desk-scale benchmark: a 3-expert run finishes in seconds."""
    return parse_config(
        {
            "dataset": {
                "source": "synthetic", "num_classes": 10, "head_count": 500,
                "imbalance_ratio": 100, "feature_dim": 20, "class_sep": 3.0,
                "test_per_class": 100, "base_seed": 0,
            },
            "model": {"num_experts": 3, "hidden_dim": 64, "rep_dim": 32, "scale": 16.0},
            "train": {"epochs": 40, "batch_size": 64},
            "seeds": [0, 1, 2, 3, 4],
            "output_dir": output_dir,
        }
    )


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return {
        "dataset": asdict(cfg.dataset),
        "model": asdict(cfg.model),
        "train": asdict(cfg.train),
        "seeds": list(cfg.seeds),
        "output_dir": cfg.output_dir,
    }


def config_hash(cfg: ExperimentConfig) -> str:
    """Stable digest of the three run-defining blocks (seed-independent)."""
    payload = {
        "dataset": asdict(cfg.dataset),
        "model": asdict(cfg.model),
        "train": asdict(cfg.train),
    }
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def build_damel_config(model: ModelBlock, dataset: DatasetBlock, input_dim: int) -> DamelConfig:
    return DamelConfig(
        num_experts=model.num_experts,
        input_dim=input_dim,
        hidden_dim=model.hidden_dim,
        rep_dim=model.rep_dim,
        num_classes=dataset.num_classes,
        scale=model.scale,
        variant=model.variant,
        use_norm_layers=model.use_norm_layers,
        use_bias=model.use_bias,
        ref_experts=model.ref_experts,
    )


def build_datasets(dataset: DatasetBlock, seed: int):
    """(train, test, partition) for one run seed.

    The balanced test set and (for synthetic data) the class geometry derive
    from base_seed only, so every seed of a sweep shares one test set while
    training data resamples per seed.
    """
    spec = long_tail_counts(dataset.num_classes, dataset.head_count, dataset.imbalance_ratio)
    if dataset.source == "synthetic":
        train_ds = synthesize_gaussian_longtail(
            spec, dataset.feature_dim, dataset.class_sep, seed=seed, center_seed=dataset.base_seed
        )
        test_ds = synthesize_balanced_test(
            dataset.num_classes, dataset.test_per_class, dataset.feature_dim,
            dataset.class_sep, seed=dataset.base_seed, center_seed=dataset.base_seed,
        )
    else:
        if dataset.source == "idx":
            source_ds = load_idx_dataset(dataset.images, dataset.labels)
        else:
            source_ds = load_csv_dataset(dataset.csv_path)
        if source_ds.spec.num_classes != dataset.num_classes:
            raise ConfigError(
                f"dataset: file holds {source_ds.spec.num_classes} classes, config says "
                f"{dataset.num_classes}"
            )
        test_ds, rest = split_balanced_holdout(source_ds, dataset.test_per_class, dataset.base_seed)
        train_ds = subsample_longtail(rest, spec, seed=seed)
    return train_ds, test_ds, group_partition(spec)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, config_dict: dict, trained: np.ndarray, averaged: Optional[np.ndarray]) -> None:
    blob = json.dumps(config_dict, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<Q", trained.size))
        fh.write(np.asarray(trained, dtype="<f8").tobytes())
        if averaged is not None:
            if averaged.size != trained.size:
                raise ConfigError("checkpoint: averaged weights length differs from trained")
            fh.write(np.asarray(averaged, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (config_dict, trained, averaged-or-None)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: bad checkpoint magic {raw[:8]!r}")
    (json_len,) = struct.unpack("<I", raw[8:12])
    config_dict = json.loads(raw[12:12 + json_len].decode())
    offset = 12 + json_len
    (count,) = struct.unpack("<Q", raw[offset:offset + 8])
    offset += 8
    trained = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).astype(np.float64)
    offset += 8 * count
    averaged = None
    if offset < len(raw):
        averaged = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).astype(np.float64)
    return config_dict, trained, averaged


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    wall_seconds: float
    eval_report: EvalReport
    metrics_path: str
    checkpoint_path: str

    def to_json_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "wall_seconds": self.wall_seconds,
            "eval": self.eval_report.to_json_dict(),
            "metrics_csv": self.metrics_path,
            "checkpoint": self.checkpoint_path,
        }


def _write_metrics_csv(path, metrics, num_experts: int) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["epoch"] + [f"per_expert_ce_{k}" for k in range(num_experts)]
            + ["cb", "total", "train_acc", "test_acc_raw", "test_acc_ema"]
        )
        for m in metrics:
            writer.writerow(
                [m.epoch] + [repr(v) for v in m.expert_ce]
                + [repr(m.balanced_ce), repr(m.total), repr(m.train_acc),
                   repr(m.test_acc_raw), repr(m.test_acc_ema)]
            )


def run_single(cfg: ExperimentConfig, seed: int, run_dir=None) -> RunRecord:
    """Build data, train, export eval weights, evaluate, persist artifacts."""
    if run_dir is None:
        run_dir = Path(cfg.output_dir) / "single" / "default" / str(seed)
    run_dir = Path(run_dir)
    started = time.perf_counter()
    run_dir.mkdir(parents=True, exist_ok=True)
    try:
        train_ds, test_ds, partition = build_datasets(cfg.dataset, seed)
        model_cfg = build_damel_config(cfg.model, cfg.dataset, train_ds.features.shape[1]).validate()
        model = init_model(model_cfg, seed)
        avg_state = make_avg_state(cfg.train)
        model, avg_state, metrics = train(
            model, train_ds, cfg.train, avg_state, seed=seed, test_ds=test_ds
        )
        trained = model.flatten()
        averaging = cfg.train.averaging
        if averaging != "none" and avg_state is not None and avg_state.initialized:
            eval_weights = export_eval_weights(avg_state, averaging, trained)
            averaged = eval_weights
        else:
            # zero-epoch runs have no snapshots; evaluate the raw weights
            eval_weights, averaged = trained.copy(), None
        eval_model = model.clone()
        eval_model.unflatten(eval_weights)
        recompute_running_stats(eval_model, train_ds)
        report = evaluate(eval_model, test_ds, partition)
        onehot = one_hot_predictions(eval_model, test_ds)

        record = RunRecord(
            config_hash=config_hash(cfg),
            seed=seed,
            wall_seconds=time.perf_counter() - started,
            eval_report=report,
            metrics_path=str(run_dir / "metrics.csv"),
            checkpoint_path=str(run_dir / "checkpoint.bin"),
        )
        _write_metrics_csv(run_dir / "metrics.csv", metrics, model_cfg.num_experts)
        checkpoint_cfg = dict(config_to_dict(cfg), seed=seed)
        save_checkpoint(run_dir / "checkpoint.bin", checkpoint_cfg, trained, averaged)
        report.save_json(run_dir / "eval.json")
        report.save_confusion_csv(run_dir / "confusion.csv")
        np.save(run_dir / "onehot.npy", onehot)
        with open(run_dir / "run.json", "w") as fh:
            json.dump(record.to_json_dict(), fh, sort_keys=True, indent=1)
        return record
    except Exception:
        shutil.rmtree(run_dir, ignore_errors=True)
        raise


def resolve_workers(requested: Optional[int] = None) -> int:
    """DAMEL_WORKERS overrides the requested worker count."""
    env = os.environ.get(WORKERS_ENV_VAR)
    if env is not None:
        try:
            value = int(env)
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV_VAR} must be an integer, got {env!r}") from None
        if value < 1:
            raise ConfigError(f"{WORKERS_ENV_VAR} must be >= 1, got {value}")
        return value
    return max(1, requested or 1)


def _sweep_job(args):
    cfg, seed, run_dir = args
    record = run_single(cfg, seed, run_dir)
    onehot = np.load(Path(run_dir) / "onehot.npy")
    return record, onehot


def run_seed_sweep(cfg: ExperimentConfig, seeds=None, workers=None, sweep_dir=None):
    """Independent runs per seed plus the across-seed decomposition summary."""
    seeds = list(cfg.seeds if seeds is None else seeds)
    if len(seeds) < 2:
        raise ConfigError(f"sweep needs at least 2 seeds, got {len(seeds)}")
    sweep_dir = Path(sweep_dir) if sweep_dir is not None else Path(cfg.output_dir) / "sweep" / "default"
    sweep_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, seed, sweep_dir / str(seed)) for seed in seeds]
    workers = resolve_workers(workers)
    results = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(_sweep_job, job): job[1] for job in jobs}
            by_seed = {}
            for future, seed in futures.items():
                try:
                    by_seed[seed] = future.result()
                except Exception as err:
                    raise DamelError(f"sweep: seed {seed} failed: {err}") from err
            results = [by_seed[seed] for seed in seeds]
    else:
        for job in jobs:
            try:
                results.append(_sweep_job(job))
            except Exception as err:
                raise DamelError(f"sweep: seed {job[1]} failed: {err}") from err

    records = [r for r, _ in results]
    preds = [p for _, p in results]
    _, test_ds, _ = build_datasets(cfg.dataset, seeds[0])
    targets = labels_one_hot(test_ds.labels, cfg.dataset.num_classes)
    np.save(sweep_dir / "test_labels_onehot.npy", targets)
    summary = bias_variance_decompose(preds, targets)
    payload = dict(
        summary.to_json_dict(),
        config_hash=config_hash(cfg),
        seeds=seeds,
        overall_acc={str(r.seed): r.eval_report.overall_acc for r in records},
    )
    with open(sweep_dir / "summary.json", "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
    return summary, records


# ---------------------------------------------------------------------------
# ablation suites
# ---------------------------------------------------------------------------


def vary_config(cfg: ExperimentConfig, model_updates=None, train_updates=None) -> ExperimentConfig:
    """Deep-copied config with model/train fields overridden (inputs untouched)."""
    out = copy.deepcopy(cfg)
    for key, value in (model_updates or {}).items():
        setattr(out.model, key, value)
    out.train = replace(out.train, **(train_updates or {}))
    return out


def expand_suite(cfg: ExperimentConfig, suite: str):
    """Pure expansion of a suite into (cell_name, config) pairs, fixed order."""
    if suite == "table5":
        return [
            (f"{variant}_k{k}", vary_config(cfg, model_updates={"variant": variant, "num_experts": k}))
            for variant in ("aggregate_predictions", "standard")
            for k in (2, 3, 4)
        ]
    if suite == "table7":
        return [
            (freq, vary_config(cfg, train_updates={"ema_frequency": freq}))
            for freq in ("iteration", "epoch")
        ]
    if suite == "table8":
        return [
            (f"experts_{k}", vary_config(cfg, model_updates={"num_experts": k}))
            for k in (1, 2, 3, 4)
        ]
    if suite == "table9":
        return [
            (f"rate_{rate}", vary_config(cfg, train_updates={"ema_rate": rate}))
            for rate in (0.01, 0.05, 0.1, 0.2, 0.3)
        ]
    if suite == "table10":
        return [
            (f"scale_{scale}", vary_config(cfg, model_updates={"scale": float(scale)}))
            for scale in (8, 16, 20, 24)
        ]
    if suite == "table11":
        return [
            (
                "capacity_controlled",
                vary_config(cfg, model_updates={
                    "variant": "capacity_controlled", "num_experts": 1,
                    "ref_experts": cfg.model.num_experts,
                }),
            ),
            ("standard", copy.deepcopy(cfg)),
        ]
    if suite == "table12":
        return [
            ("proposed", copy.deepcopy(cfg)),
            ("no_ema", vary_config(cfg, train_updates={"averaging": "none"})),
            ("single_expert", vary_config(cfg, model_updates={"num_experts": 1})),
            ("no_cb_loss", vary_config(cfg, train_updates={"cb_loss_enabled": False})),
            ("average_representations", vary_config(cfg, model_updates={"variant": "average_representations"})),
            ("iteration_ema", vary_config(cfg, train_updates={"ema_frequency": "iteration"})),
            ("swa", vary_config(cfg, train_updates={"averaging": "swa"})),
            ("high_ema_rate", vary_config(cfg, train_updates={"ema_rate": 0.3})),
            ("low_ema_rate", vary_config(cfg, train_updates={"ema_rate": 0.01})),
            ("decoupled", vary_config(cfg, train_updates={"decoupled": True})),
        ]
    raise ConfigError(f"unknown suite {suite!r}; valid suites: {', '.join(SUITES)}")


def _mean_sd(values):
    values = [v for v in values if v is not None]
    if not values:
        return "", ""
    arr = np.asarray(values, dtype=np.float64)
    sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return repr(float(arr.mean())), repr(sd)


SUMMARY_COLUMNS = [
    "suite", "cell", "seeds",
    "overall_mean", "overall_sd", "many_mean", "many_sd",
    "medium_mean", "medium_sd", "few_mean", "few_sd",
]


def _summary_row(suite: str, cell: str, records) -> list:
    row = [suite, cell, " ".join(str(r.seed) for r in records)]
    row += list(_mean_sd([r.eval_report.overall_acc for r in records]))
    for group in ("many", "medium", "few"):
        row += list(_mean_sd([r.eval_report.group_acc.get(group) for r in records]))
    return row


def run_ablation_suite(cfg: ExperimentConfig, suite: str, workers=None):
    """Run every cell of a suite over the configured seeds; returns (csv_path, rows)."""
    cells = expand_suite(cfg, suite)
    workers = resolve_workers(workers)
    suite_dir = Path(cfg.output_dir) / suite
    suite_dir.mkdir(parents=True, exist_ok=True)
    jobs = []
    for cell, cell_cfg in cells:
        for seed in cfg.seeds:
            jobs.append((cell, cell_cfg, seed, suite_dir / cell / str(seed)))
    results: dict[str, list] = {cell: [] for cell, _ in cells}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [
                (cell, seed, pool.submit(run_single, cell_cfg, seed, run_dir))
                for cell, cell_cfg, seed, run_dir in jobs
            ]
            for cell, seed, future in futures:
                try:
                    results[cell].append(future.result())
                except Exception as err:
                    raise DamelError(f"{suite}/{cell}: seed {seed} failed: {err}") from err
    else:
        for cell, cell_cfg, seed, run_dir in jobs:
            try:
                results[cell].append(run_single(cell_cfg, seed, run_dir))
            except Exception as err:
                raise DamelError(f"{suite}/{cell}: seed {seed} failed: {err}") from err

    rows = [_summary_row(suite, cell, results[cell]) for cell, _ in cells]
    csv_path = suite_dir / "summary.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_COLUMNS)
        writer.writerows(rows)
    return csv_path, rows


def aggregate_report(root_dir):
    """Rebuild the per-cell summary CSV from run.json records under a directory."""
    root = Path(root_dir)
    if not root.is_dir():
        raise ConfigError(f"report: {root} is not a directory")
    groups: dict[tuple, list] = {}
    for run_json in sorted(root.glob("**/run.json")):
        rel = run_json.relative_to(root).parts
        # layout <suite>/<cell>/<seed>/run.json
        suite, cell = (rel[0], rel[1]) if len(rel) >= 4 else ("", "")
        with open(run_json) as fh:
            payload = json.load(fh)
        record = RunRecord(
            config_hash=payload["config_hash"],
            seed=payload["seed"],
            wall_seconds=payload["wall_seconds"],
            eval_report=EvalReport(
                overall_acc=payload["eval"]["overall_acc"],
                group_acc={g: payload["eval"]["group_acc"].get(g) for g in ("many", "medium", "few")},
                test_size=payload["eval"]["test_size"],
                confusion=np.asarray(payload["eval"]["confusion"]),
            ),
            metrics_path=payload["metrics_csv"],
            checkpoint_path=payload["checkpoint"],
        )
        groups.setdefault((suite, cell), []).append(record)
    rows = [
        _summary_row(suite, cell, records)
        for (suite, cell), records in sorted(groups.items())
    ]
    csv_path = root / "report.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_COLUMNS)
        writer.writerows(rows)
    return csv_path, rows
