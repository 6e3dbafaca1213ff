"""
Pipeline Stages
===============

File-based handoff between CLI commands. Every stage reads its inputs from
the run directory, writes its outputs there, and refreshes
``provenance.json`` (config text, config hash, seed, code version, output
hashes) so the directory alone is enough to re-run the experiment.

Run directory layout::

    config.txt            effective RunConfig
    catalog.csv           parsed catalog (standard columns), the source of labels
    rasters.qgrd/.json    daily heat maps + start day and grid
    summary.json          catalog magnitude summary
    features.csv          RTL (+ indicator) features for external classifiers
    prior.qgrd/.json      fitted historical prior
    checkpoint.qgck       best-validation network
    training_log.csv      epoch,train_loss,val_roc_auc,val_pr_auc
    metrics.csv           roc_auc / pr_auc per method
    thresholds.csv        confusion counts per method and threshold
    weight_sweep.csv      class-weight sweep results
    provenance.json
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from datetime import date, timedelta
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from src import __version__
from src.catalog import (
    Catalog,
    HeatMapSeq,
    LabelTensor,
    TimeSplit,
    build_labels,
    load_catalog,
    magnitude_summary,
    rasterize_daily,
    read_heatmaps,
    split_days,
    write_catalog,
    write_heatmaps,
)
from src.checkpoint import load_checkpoint, save_checkpoint
from src.config import RunConfig
from src.evaluation import MetricsReport, evaluate, pool_samples, write_metrics_csv, write_sweep_csv
from src.exceptions import ConfigError, InsufficientHistoryError
from src.model import (
    ForecastNet,
    SweepRow,
    TrainResult,
    has_history,
    score_days,
    sweep_class_weights,
    train,
    usable_days,
    write_sweep_table,
    write_training_log,
)
from src.models import CatalogFormat, GridSpec
from src.prior import fit_prior, load_prior, prior_logits, prior_probability_maps, save_prior
from src.rtl import export_features, indicator_features, rtl_grid
from src.synth import PlantedCatalog, synthesize

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunPaths:
    root: Path

    @property
    def config(self) -> Path:
        return self.root / "config.txt"

    @property
    def catalog(self) -> Path:
        return self.root / "catalog.csv"

    @property
    def rasters(self) -> Path:
        return self.root / "rasters.qgrd"

    @property
    def summary(self) -> Path:
        return self.root / "summary.json"

    @property
    def features(self) -> Path:
        return self.root / "features.csv"

    @property
    def prior(self) -> Path:
        return self.root / "prior.qgrd"

    @property
    def checkpoint(self) -> Path:
        return self.root / "checkpoint.qgck"

    @property
    def training_log(self) -> Path:
        return self.root / "training_log.csv"

    @property
    def metrics(self) -> Path:
        return self.root / "metrics.csv"

    @property
    def thresholds(self) -> Path:
        return self.root / "thresholds.csv"

    @property
    def weight_sweep(self) -> Path:
        return self.root / "weight_sweep.csv"

    @property
    def provenance(self) -> Path:
        return self.root / "provenance.json"


def run_paths(config: RunConfig) -> RunPaths:
    root = Path(config.work_dir)
    root.mkdir(parents=True, exist_ok=True)
    return RunPaths(root)


def file_sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_provenance(paths: RunPaths, config: RunConfig, command: str, outputs: Sequence[Path]) -> Dict:
    """Merge this command's record into provenance.json; no timestamps, so reruns are byte-identical."""
    paths.config.write_text(config.to_text(), encoding="utf-8")
    record = {}
    if paths.provenance.exists():
        record = json.loads(paths.provenance.read_text(encoding="utf-8"))
    record.update({
        "code_version": __version__,
        "config_hash": config.config_hash(),
        "config": config.to_text(),
        "seed": config.seed,
    })
    record.setdefault("commands", {})[command] = {
        "outputs": {Path(p).name: file_sha256(p) for p in outputs},
    }
    paths.provenance.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return record


# =============================================================================
# SHARED INPUTS
# =============================================================================

def _catalog_path(config: RunConfig) -> Path:
    if not config.catalog_path:
        raise ConfigError("catalog_path is not set")
    return Path(config.catalog_path)


def load_rasters(paths: RunPaths) -> Tuple[HeatMapSeq, GridSpec]:
    if not paths.rasters.exists():
        raise FileNotFoundError(f"no rasters in {paths.root}; run `ingest` first")
    return read_heatmaps(paths.rasters)


def load_run_catalog(paths: RunPaths) -> Catalog:
    if not paths.catalog.exists():
        raise FileNotFoundError(f"no catalog in {paths.root}; run `ingest` first")
    return load_catalog(paths.catalog)


@dataclass(frozen=True)
class StageInputs:
    heatmaps: HeatMapSeq
    grid: GridSpec
    catalog: Catalog
    labels: LabelTensor


def load_inputs(config: RunConfig, paths: RunPaths) -> StageInputs:
    """
    Rasters, catalog and labels of an ingested run.

    Labels come from the stored catalog rather than the float32 rasters, so an
    event at exactly Mc is positive for every Mc.
    """
    heatmaps, grid = load_rasters(paths)
    catalog = load_run_catalog(paths)
    labels = build_labels(catalog, grid, config.label_spec(), heatmaps.all_days())
    return StageInputs(heatmaps, grid, catalog, labels)


def run_split(config: RunConfig, heatmaps: HeatMapSeq) -> TimeSplit:
    """Chronological split of the raster span with a t_max purge gap."""
    return split_days(heatmaps.start_day, heatmaps.days, config.split_fractions, config.t_max_days)


def resolve_days(
    config: RunConfig,
    heatmaps: HeatMapSeq,
    labels: LabelTensor,
    split: TimeSplit,
    segment: str = "test",
    start: Optional[date] = None,
    end: Optional[date] = None,
) -> List[date]:
    """
    Days to evaluate: an explicit inclusive range (every day must have a full
    window) or a named split segment (days without a full window are dropped).
    """
    window = config.window_days
    if start is not None or end is not None:
        first = start or heatmaps.start_day
        last = end or heatmaps.end_day
        days = [first + timedelta(days=i) for i in range((last - first).days + 1)]
        for day in days:
            if not has_history(heatmaps, day, window):
                raise InsufficientHistoryError(day, window)
        return usable_days(heatmaps, labels, days, window)
    if segment not in TimeSplit._fields:
        raise ValueError(f"unknown split segment: {segment}")
    return usable_days(heatmaps, labels, getattr(split, segment), window)


# =============================================================================
# STAGES
# =============================================================================

def run_ingest(config: RunConfig, n_jobs: int = 1, format_spec: Optional[CatalogFormat] = None) -> Dict:
    """
    Parse the catalog, rasterize it over its full day span, and summarize it.

    The parsed catalog is kept in the run directory in the standard column
    layout, so later stages need neither ``catalog_path`` nor the format.
    """
    paths = run_paths(config)
    grid = config.grid_spec()
    catalog = load_catalog(_catalog_path(config), format_spec)
    days = catalog.last_day.toordinal() - catalog.first_day.toordinal() + 1
    heatmaps = rasterize_daily(catalog, grid, catalog.first_day, days, n_jobs=n_jobs)
    write_heatmaps(paths.rasters, heatmaps, grid)
    with open(paths.catalog, "w", encoding="utf-8", newline="") as sink:
        write_catalog(catalog, sink)
    summary = magnitude_summary(catalog, grid)
    summary["days"] = days
    summary["rejected_rows"] = len(catalog.rejected)
    paths.summary.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_provenance(paths, config, "ingest", [paths.catalog, paths.rasters, paths.summary])
    return summary


def run_features(config: RunConfig, n_jobs: int = 1) -> int:
    """RTL (and optional indicator) features for every day with valid labels."""
    paths = run_paths(config)
    inputs = load_inputs(config, paths)
    days = list(inputs.labels.reference_days)
    features = rtl_grid(inputs.catalog, inputs.grid, days, config.rtl_params(), n_jobs=n_jobs)
    indicators = None
    if config.indicator_days:
        indicators = indicator_features(inputs.heatmaps, days, config.indicator_days)
    with open(paths.features, "w", encoding="utf-8", newline="") as sink:
        rows = export_features(features, inputs.labels, sink, indicators)
    write_provenance(paths, config, "features", [paths.features])
    return rows


def run_train(config: RunConfig, show_progress: bool = False) -> TrainResult:
    """Fit the prior on the training split, train the network, save checkpoint and log."""
    paths = run_paths(config)
    inputs = load_inputs(config, paths)
    labels, split = inputs.labels, run_split(config, inputs.heatmaps)
    prior = fit_prior(labels.subset(split.train), config.prior_alpha)
    save_prior(paths.prior, prior)

    model_config = config.network_config()
    logits = prior_logits(prior, model_config.prior_c, model_config.prior_mode)
    net = ForecastNet(model_config, logits if model_config.use_prior_residual else None)
    train_config = config.train_config().model_copy(update={"show_progress": show_progress})
    result = train(net, train_config, split.train, split.val, inputs.heatmaps, labels)

    digest = save_checkpoint(paths.checkpoint, result.checkpoint)
    with open(paths.training_log, "w", encoding="utf-8", newline="") as sink:
        write_training_log(sink, result.log)
    logger.info("checkpoint sha256 %s (best epoch %d)", digest, result.best_epoch)
    write_provenance(paths, config, "train", [paths.prior, paths.checkpoint, paths.training_log])
    return result


def run_evaluate(
    config: RunConfig,
    segment: str = "test",
    start: Optional[date] = None,
    end: Optional[date] = None,
) -> List[MetricsReport]:
    """Score the checkpoint and the prior baseline on the same days."""
    paths = run_paths(config)
    inputs = load_inputs(config, paths)
    heatmaps, labels = inputs.heatmaps, inputs.labels
    days = resolve_days(config, heatmaps, labels, run_split(config, heatmaps), segment, start, end)
    if not days:
        raise ValueError("no evaluable days in the requested range")
    checkpoint = load_checkpoint(paths.checkpoint)
    prior = load_prior(paths.prior)

    model_report = score_days(checkpoint, heatmaps, labels, days, config.thresholds,
                              method=checkpoint.config.variant)
    baseline = evaluate(
        pool_samples(prior_probability_maps(prior, days), labels.subset(days)),
        config.thresholds, method="prior",
    )
    reports = [model_report, baseline]
    with open(paths.metrics, "w", encoding="utf-8", newline="") as sink:
        write_metrics_csv(sink, reports)
    with open(paths.thresholds, "w", encoding="utf-8", newline="") as sink:
        write_sweep_csv(sink, reports)
    write_provenance(paths, config, "evaluate", [paths.metrics, paths.thresholds])
    return reports


def run_sweep(config: RunConfig) -> List[SweepRow]:
    """Class-weight sweep on the configured split."""
    paths = run_paths(config)
    inputs = load_inputs(config, paths)
    labels, split = inputs.labels, run_split(config, inputs.heatmaps)
    prior = fit_prior(labels.subset(split.train), config.prior_alpha)
    model_config = config.network_config()
    logits = prior_logits(prior, model_config.prior_c, model_config.prior_mode)
    rows = sweep_class_weights(
        model_config, config.train_config(), config.sweep_weights,
        split.train, split.val, split.test, inputs.heatmaps, labels,
        logits if model_config.use_prior_residual else None,
    )
    with open(paths.weight_sweep, "w", encoding="utf-8", newline="") as sink:
        write_sweep_table(sink, rows)
    write_provenance(paths, config, "sweep", [paths.weight_sweep])
    return rows


def run_synth(config: RunConfig, output: Optional[Path] = None) -> Tuple[PlantedCatalog, Path]:
    """Write a synthetic catalog CSV to ``output`` (default: the configured catalog path)."""
    target = Path(output) if output is not None else _catalog_path(config)
    planted = synthesize(config.synth_config())
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "w", encoding="utf-8", newline="") as sink:
        write_catalog(planted.catalog, sink)
    return planted, target
