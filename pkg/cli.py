"""
QuakeGrid - Command Line Interface
==================================

Pipeline commands over one run directory:

    ingest -> features -> train -> evaluate      (plus synth, sweep, config)

Every command takes ``--config run.txt`` (flat key=value file), any number
of ``--set key=value`` overrides and ``--threads N``.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import logging
import math
import sys
from datetime import date
from pathlib import Path
from typing import List, Optional

import typer
from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.table import Table

# Add src to path for imports
sys.path.insert(0, str(Path(__file__).parent))

from src import __version__
from src.config import RunConfig, get_settings, parse_overrides
from src.models import CatalogFormat
from src import pipeline


# =============================================================================
# CLI SETUP
# =============================================================================

app = typer.Typer(
    name="quakegrid",
    help="Mid-term earthquake forecasting on a spatial grid",
    add_completion=False,
    rich_markup_mode="rich",
)
console = Console()

EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

ConfigOption = typer.Option(None, "--config", "-c", help="key=value run config file")
SetOption = typer.Option(None, "--set", "-s", help="Override a config key: key=value")
ThreadsOption = typer.Option(None, "--threads", "-t", help="Worker processes (default: all cores)")


# =============================================================================
# HELPER FUNCTIONS
# =============================================================================

def display_header():
    """Display application header."""
    console.print(Panel.fit(
        f"[bold white]QUAKEGRID[/] - earthquake forecasting  [dim]v{__version__}[/]",
        border_style="blue",
    ))


def setup_logging() -> None:
    settings = get_settings()
    logging.basicConfig(
        level=settings.log_level.value,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, rich_tracebacks=False, show_path=False)],
        force=True,
    )


def load_config(config: Optional[Path], overrides: Optional[List[str]], **extra: str) -> RunConfig:
    values = parse_overrides(overrides or [])
    values.update({key: value for key, value in extra.items() if value is not None})
    if config is not None:
        return RunConfig.from_file(config, values)
    return RunConfig.from_mapping(values)


def resolve_threads(threads: Optional[int]) -> int:
    return threads if threads is not None else get_settings().threads


def fail(exc: Exception) -> None:
    """Print the error and exit with the code for its kind."""
    if isinstance(exc, ValueError):
        console.print(f"[red]Invalid input:[/] {exc}")
        raise typer.Exit(EXIT_VALIDATION)
    console.print(f"[red]Failed:[/] {type(exc).__name__}: {exc}")
    raise typer.Exit(EXIT_RUNTIME)


def fmt(value: float) -> str:
    return "n/a" if value is None or math.isnan(value) else f"{value:.4f}"


def display_reports(reports) -> None:
    headline = Table(title="Quality", show_header=True, header_style="bold")
    headline.add_column("Method", style="cyan")
    headline.add_column("ROC AUC", justify="right")
    headline.add_column("PR AUC", justify="right")
    headline.add_column("Positives", justify="right")
    headline.add_column("Negatives", justify="right")
    for report in reports:
        headline.add_row(report.method, fmt(report.roc_auc), fmt(report.pr_auc),
                         f"{report.positives:,}", f"{report.negatives:,}")
    console.print(headline)

    sweep = Table(title="Threshold sweep", show_header=True, header_style="bold")
    for column in ("Method", "t", "TP", "FN", "FP", "TN"):
        sweep.add_column(column, justify="right" if column != "Method" else "left")
    for report in reports:
        for row in report.rows:
            sweep.add_row(report.method, f"{row.threshold:g}", f"{row.tp:,}", f"{row.fn:,}",
                          f"{row.fp:,}", f"{row.tn:,}")
    console.print(sweep)


# =============================================================================
# CLI COMMANDS
# =============================================================================

@app.command("ingest")
def ingest_command(
    catalog: Optional[Path] = typer.Argument(None, help="Catalog CSV (overrides catalog_path)"),
    config: Optional[Path] = ConfigOption,
    overrides: Optional[List[str]] = SetOption,
    threads: Optional[int] = ThreadsOption,
    lenient: bool = typer.Option(False, "--lenient", help="Skip malformed rows instead of failing"),
    delimiter: str = typer.Option(",", "--delimiter", help="Field delimiter"),
):
    """
    Parse a catalog, rasterize daily heat maps and print a magnitude summary.

    Examples:
        quakegrid ingest catalog.csv -s work_dir=runs/demo
    """
    display_header()
    setup_logging()
    try:
        run_config = load_config(config, overrides, catalog_path=str(catalog) if catalog else None)
        fmt_spec = CatalogFormat(strict=not lenient, delimiter=delimiter)
        summary = pipeline.run_ingest(run_config, resolve_threads(threads), fmt_spec)
    except Exception as exc:
        fail(exc)

    table = Table(title="Catalog summary", show_header=True, header_style="bold")
    table.add_column("Count", style="cyan")
    table.add_column("Events", justify="right")
    table.add_row("Total", f"{summary['total']:,}")
    table.add_row("In grid", f"{summary['in_bounds']:,}")
    for band, count in summary["bands"].items():
        table.add_row(band, f"{count:,}")
    table.add_row("M >= 5", f"{summary['m_ge_5']:,}")
    table.add_row("M >= 6", f"{summary['m_ge_6']:,}")
    table.add_row("Days", f"{summary['days']:,}")
    if summary["rejected_rows"]:
        table.add_row("Rejected rows", f"[yellow]{summary['rejected_rows']:,}[/]")
    console.print(table)
    console.print(f"[green][OK][/] Rasters written to {run_config.work_dir}")


@app.command("features")
def features_command(
    config: Optional[Path] = ConfigOption,
    overrides: Optional[List[str]] = SetOption,
    threads: Optional[int] = ThreadsOption,
):
    """Compute RTL (and indicator) features and export them as CSV."""
    display_header()
    setup_logging()
    try:
        run_config = load_config(config, overrides)
        rows = pipeline.run_features(run_config, resolve_threads(threads))
    except Exception as exc:
        fail(exc)
    console.print(f"[green][OK][/] {rows:,} feature rows written")


@app.command("train")
def train_command(
    config: Optional[Path] = ConfigOption,
    overrides: Optional[List[str]] = SetOption,
    progress: bool = typer.Option(False, "--progress", help="Show an epoch progress bar"),
):
    """Fit the prior and train the forecasting network."""
    display_header()
    setup_logging()
    try:
        run_config = load_config(config, overrides)
        result = pipeline.run_train(run_config, show_progress=progress)
    except Exception as exc:
        fail(exc)

    table = Table(title="Training log", show_header=True, header_style="bold")
    for column in ("Epoch", "Train loss", "Val ROC AUC", "Val PR AUC"):
        table.add_column(column, justify="right")
    for entry in result.log:
        marker = " *" if entry.epoch == result.best_epoch else ""
        table.add_row(f"{entry.epoch}{marker}", f"{entry.train_loss:.6f}",
                      fmt(entry.val_roc_auc), fmt(entry.val_pr_auc))
    console.print(table)
    console.print(f"[green][OK][/] Checkpoint (epoch {result.best_epoch}) saved in {run_config.work_dir}")


@app.command("evaluate")
def evaluate_command(
    config: Optional[Path] = ConfigOption,
    overrides: Optional[List[str]] = SetOption,
    segment: str = typer.Option("test", "--segment", help="Split to score: train, val or test"),
    start: Optional[str] = typer.Option(None, "--start", help="First reference day (YYYY-MM-DD)"),
    end: Optional[str] = typer.Option(None, "--end", help="Last reference day (YYYY-MM-DD)"),
):
    """Score the checkpoint next to the prior baseline."""
    display_header()
    setup_logging()
    try:
        run_config = load_config(config, overrides)
        reports = pipeline.run_evaluate(
            run_config, segment,
            date.fromisoformat(start) if start else None,
            date.fromisoformat(end) if end else None,
        )
    except Exception as exc:
        fail(exc)
    display_reports(reports)


@app.command("synth")
def synth_command(
    output: Optional[Path] = typer.Argument(None, help="Output CSV (default: catalog_path)"),
    config: Optional[Path] = ConfigOption,
    overrides: Optional[List[str]] = SetOption,
):
    """Generate a synthetic catalog with planted precursor pairs."""
    display_header()
    setup_logging()
    try:
        run_config = load_config(config, overrides)
        planted, target = pipeline.run_synth(run_config, output)
    except Exception as exc:
        fail(exc)
    console.print(f"[green][OK][/] {len(planted.catalog):,} events "
                  f"({len(planted.pairs):,} planted pairs, {planted.skipped:,} skipped) -> {target}")


@app.command("sweep")
def sweep_command(
    config: Optional[Path] = ConfigOption,
    overrides: Optional[List[str]] = SetOption,
):
    """Train once per minor-class weight and compare test quality."""
    display_header()
    setup_logging()
    try:
        run_config = load_config(config, overrides)
        rows = pipeline.run_sweep(run_config)
    except Exception as exc:
        fail(exc)

    table = Table(title="Class-weight sweep", show_header=True, header_style="bold")
    for column in ("Weight", "ROC AUC", "PR AUC", "Recall @0.5", "Best epoch"):
        table.add_column(column, justify="right")
    for row in rows:
        table.add_row(f"{row.weight:g}", fmt(row.roc_auc), fmt(row.pr_auc),
                      fmt(row.recall_at_half), str(row.best_epoch))
    console.print(table)


@app.command("config")
def config_command(
    config: Optional[Path] = ConfigOption,
    overrides: Optional[List[str]] = SetOption,
    write: Optional[Path] = typer.Option(None, "--write", "-w", help="Save the effective config"),
):
    """Display the effective run configuration."""
    display_header()
    try:
        run_config = load_config(config, overrides)
    except Exception as exc:
        fail(exc)

    table = Table(title="Configuration", show_header=True)
    table.add_column("Key", style="cyan")
    table.add_column("Value", style="white")
    for line in run_config.to_text().splitlines():
        key, value = line.split("=", 1)
        table.add_row(key, value)
    console.print(table)
    console.print(f"[dim]config hash:[/] {run_config.config_hash()}")
    if write:
        write.write_text(run_config.to_text(), encoding="utf-8")
        console.print(f"[green][OK][/] Saved to: {write}")


def main():
    app()


if __name__ == "__main__":
    main()
