"""Experiment sweeps and report emission.

Every function here is a thin, deterministic loop over ``train`` plus a
CSV/SVG writer. Divergent runs are flagged rows, never crashes, and
never poison the emitted files.
"""

from __future__ import annotations

import csv
import os
from dataclasses import replace
from typing import Sequence

import numpy as np

from .adapters import (
    TAP_VARIANTS,
    AdaptationStrategy,
    fine_tune_top,
    serial_only,
    serial_paired,
    tap_only,
    tap_param_table,
    tap_serial,
)
from .training import LR_GRID, RunConfig, RunReport, train


def _csv_value(value) -> object:
    return "" if value is None else value


def write_run_rows(path: str, reports: Sequence[RunReport]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([
            "strategy", "tap_variant", "task", "seed", "trainable_params",
            "total_params", "metric_name", "final_metric", "diverged",
        ])
        for r in reports:
            writer.writerow([
                r.strategy, r.tap_variant, r.task, r.seed, r.trainable_params,
                r.total_params, r.metric_name, _csv_value(r.final_metric),
                r.diverged,
            ])


def strategy_grid(num_layers: int, base: AdaptationStrategy) -> list[AdaptationStrategy]:
    """Every strategy the layer sweep trains, in report order."""
    tap = base.tap
    bottleneck = base.serial_bottleneck
    grid: list[AdaptationStrategy] = []
    grid += [fine_tune_top(l) for l in range(1, num_layers + 1)]
    grid += [serial_paired(l, bottleneck) for l in range(1, num_layers + 1)]
    grid += [
        tap_serial(k, l, tap, bottleneck)
        for k in range(1, num_layers + 1)
        for l in range(1, num_layers)
    ]
    grid.append(tap_only(tap))
    grid.append(serial_only(bottleneck, tap.activation))
    return grid


def sweep_layers(base: RunConfig) -> list[RunReport]:
    """Train every strategy in the grid at every seed; emit sweep.csv."""
    reports = []
    for strategy in strategy_grid(base.backbone.num_layers, base.strategy):
        config = replace(base, strategy=strategy, out_dir=None)
        for seed in base.seeds:
            reports.append(train(config, seed=seed))
    if base.out_dir:
        os.makedirs(base.out_dir, exist_ok=True)
        write_run_rows(os.path.join(base.out_dir, "sweep.csv"), reports)
    return reports


def ablate_tap_variants(base: RunConfig) -> list[dict]:
    """One taps-only run per variant per seed; mean and std per variant."""
    param_column = tap_param_table(base.backbone, base.strategy.tap.embed_dim,
                                   base.strategy.tap.bottleneck_dim)
    rows = []
    for variant in TAP_VARIANTS:
        tap = replace(base.strategy.tap, variant=variant)
        config = replace(base, strategy=tap_only(tap), out_dir=None)
        metrics = []
        for seed in base.seeds:
            report = train(config, seed=seed)
            if not report.diverged:
                metrics.append(report.final_metric)
        rows.append({
            "variant": variant,
            "tap_params": param_column[variant],
            "metric_mean": float(np.mean(metrics)) if metrics else None,
            "metric_std": float(np.std(metrics)) if metrics else None,
            "num_seeds": len(base.seeds),
            "num_diverged": len(base.seeds) - len(metrics),
        })
    if base.out_dir:
        os.makedirs(base.out_dir, exist_ok=True)
        with open(os.path.join(base.out_dir, "ablate.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["variant", "tap_params", "metric_mean", "metric_std",
                             "num_seeds", "num_diverged"])
            for row in rows:
                writer.writerow([row["variant"], row["tap_params"],
                                 _csv_value(row["metric_mean"]),
                                 _csv_value(row["metric_std"]),
                                 row["num_seeds"], row["num_diverged"]])
    return rows


def lr_grid_search(
    base: RunConfig,
    strategies: Sequence[AdaptationStrategy] | None = None,
    grid: Sequence[float] = LR_GRID,
) -> tuple[dict[str, RunReport], list[RunReport]]:
    """Train each strategy at each rate; best non-divergent run per strategy.

    Returns (best report per strategy label, every grid report). The CSV
    keeps one row per (strategy, lr, seed) so divergent cells stay visible.
    """
    if not grid:
        raise ValueError("learning-rate grid is empty")
    if strategies is None:
        strategies = [base.strategy]
    all_reports: list[RunReport] = []
    best: dict[str, RunReport] = {}
    for strategy in strategies:
        for lr in grid:
            config = replace(base, strategy=strategy, lr=lr, out_dir=None)
            for seed in base.seeds:
                report = train(config, seed=seed)
                all_reports.append(report)
                label = strategy.label()
                if not report.diverged and (
                    label not in best or report.final_metric < best[label].final_metric
                ):
                    best[label] = report
    if base.out_dir:
        os.makedirs(base.out_dir, exist_ok=True)
        with open(os.path.join(base.out_dir, "lrgrid.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["strategy", "lr", "seed", "metric_name",
                             "final_metric", "final_loss", "diverged"])
            for r in all_reports:
                writer.writerow([
                    r.strategy, r.lr, r.seed, r.metric_name,
                    _csv_value(r.final_metric),
                    _csv_value(r.losses[-1] if r.losses else None), r.diverged,
                ])
    return best, all_reports


def layer_weight_report(report: RunReport, out_dir: str) -> dict:
    """Emit weights.csv and weights.svg for a trained run; return summary.

    The summary carries the raw weights, the 1-based weight centroid
    sum(layer * weight), and its value normalized by the layer count.
    """
    if report.layer_weights is None:
        raise ValueError(f"run {report.strategy} has no layer weights to report")
    os.makedirs(out_dir, exist_ok=True)
    positions = report.tap_positions
    weights = report.layer_weights

    csv_path = os.path.join(out_dir, "weights.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "weight"])
        for layer, weight in zip(positions, weights):
            writer.writerow([layer, repr(weight)])

    svg_path = os.path.join(out_dir, "weights.svg")
    _write_weight_chart(svg_path, positions, weights, report)

    centroid = float(sum(l * w for l, w in zip(positions, weights)))
    return {
        "layers": positions,
        "weights": weights,
        "centroid": centroid,
        "centroid_normalized": centroid / max(positions),
        "csv": csv_path,
        "svg": svg_path,
    }


def _write_weight_chart(path: str, positions, weights, report: RunReport) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar(positions, weights, color="#4878cf")
    ax.set_xlabel("encoder layer")
    ax.set_ylabel("mixing weight")
    ax.set_title(f"{report.task} / {report.strategy} (seed {report.seed})")
    ax.set_xticks(list(positions))
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
