"""Command-line entry points.

Subcommands: pretrain, train, sweep, ablate, lrgrid, count-params,
weights-report. Runs are configured by a JSON or TOML file plus a few
overriding flags. The exit code is nonzero only for configuration or IO
errors; divergent training runs are reported in the emitted files and
still exit 0.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

from . import rng as rngmod
from .adapters import (
    AdaptationStrategy,
    TapConfig,
    count_learnable_params,
    format_param_count,
    tap_param_table,
    tap_serial,
)
from .backbone import PRESETS, Backbone, BackboneConfig, save_checkpoint
from .experiments import (
    ablate_tap_variants,
    layer_weight_report,
    lr_grid_search,
    sweep_layers,
)
from .tasks import SyntheticTaskSpec
from .training import RunConfig, RunReport, pretrained_backbone, train


class ConfigError(ValueError):
    pass


def default_tap_dims(cfg: BackboneConfig) -> tuple[int, int]:
    """Adapter widths proportionate to the preset: 512/256 at full scale,
    d/2 and d/4 on small encoders."""
    if cfg.d_model >= 512:
        return 512, 256
    return max(4, cfg.d_model // 2), max(2, cfg.d_model // 4)


def load_config_file(path: str) -> dict:
    try:
        if path.endswith(".toml"):
            try:
                import tomllib
            except ImportError as exc:
                raise ConfigError(
                    "TOML configs need Python 3.11+ (tomllib); use JSON instead"
                ) from exc
            with open(path, "rb") as fh:
                return tomllib.load(fh)
        with open(path) as fh:
            return json.load(fh)
    except ConfigError:
        raise
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except Exception as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc


def parse_strategy(raw: dict, backbone: BackboneConfig) -> AdaptationStrategy:
    kind = raw.get("kind")
    embed, bottleneck = default_tap_dims(backbone)
    tap = TapConfig(
        variant=raw.get("variant", "full"),
        embed_dim=raw.get("embed_dim", embed),
        bottleneck_dim=raw.get("bottleneck_dim", bottleneck),
        activation=raw.get("activation", "gelu"),
    )
    serial_width = raw.get("serial_bottleneck", tap.bottleneck_dim)
    strategy = AdaptationStrategy(
        kind=kind,
        top_layers=raw.get("top_layers"),
        tap_layers=raw.get("taps"),
        serial_layers=raw.get("serial"),
        tap=tap,
        serial_bottleneck=serial_width,
        serial_activation=raw.get("activation", tap.activation),
    )
    strategy.validate(backbone.num_layers)
    return strategy


def parse_task(raw: dict) -> SyntheticTaskSpec:
    known = {
        "kind", "input_dim", "vocab_size", "num_classes", "min_len", "max_len",
        "noise", "num_train", "num_eval",
    }
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown task fields: {sorted(unknown)}")
    return SyntheticTaskSpec(**raw)


def build_run_config(args) -> RunConfig:
    raw = load_config_file(args.config) if args.config else {}
    preset_name = args.preset or raw.get("preset", "toy")
    if preset_name not in PRESETS:
        raise ConfigError(f"unknown preset {preset_name!r}; choose from {sorted(PRESETS)}")
    backbone = PRESETS[preset_name]

    task_raw = raw.get("task", {"kind": "utterance_class"})
    strategy_raw = raw.get("strategy", {"kind": "tap_serial",
                                        "taps": backbone.num_layers,
                                        "serial": backbone.num_layers - 1})
    seeds = args.seed if args.seed else raw.get("seeds", [0])
    try:
        task = parse_task(task_raw)
        strategy = parse_strategy(strategy_raw, backbone)
        return RunConfig(
            backbone=backbone,
            strategy=strategy,
            task=task,
            steps=int(raw.get("steps", 2000)),
            lr=float(raw.get("lr", 1e-3)),
            batch_size=int(raw.get("batch_size", 8)),
            seeds=tuple(int(s) for s in seeds),
            pretrain_steps=int(raw.get("pretrain_steps", 300)),
            pretrain_lr=float(raw.get("pretrain_lr", 1e-3)),
            head_hidden=raw.get("head_hidden"),
            out_dir=args.out or raw.get("out"),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _seed_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.replace(",", " ").split()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from exc


def cmd_pretrain(args) -> int:
    config = build_run_config(args)
    out_dir = config.out_dir or "."
    os.makedirs(out_dir, exist_ok=True)
    seed = config.seeds[0]
    backbone = pretrained_backbone(config.backbone, seed, config.pretrain_steps,
                                   config.pretrain_lr)
    path = os.path.join(out_dir, "backbone.json")
    save_checkpoint(backbone, path)
    print(f"wrote frozen backbone checkpoint to {path}")
    return 0


def cmd_train(args) -> int:
    config = build_run_config(args)
    out_dir = config.out_dir or "."
    reports = []
    for seed in config.seeds:
        run_dir = out_dir if len(config.seeds) == 1 else os.path.join(out_dir, f"seed{seed}")
        report = train(replace(config, out_dir=run_dir), seed=seed)
        reports.append(report)
        status = f"DIVERGED at step {report.diverged_at}" if report.diverged else (
            f"{report.metric_name}={report.final_metric:.4f}")
        print(f"seed {seed}: {report.strategy} on {report.task}: {status} "
              f"({report.trainable_params}/{report.total_params} trainable)")
        if report.layer_weights is not None:
            layer_weight_report(report, run_dir)
    return 0


def cmd_sweep(args) -> int:
    config = build_run_config(args)
    reports = sweep_layers(replace(config, out_dir=config.out_dir or "."))
    diverged = sum(r.diverged for r in reports)
    print(f"swept {len(reports)} runs ({diverged} divergent); "
          f"sweep.csv in {config.out_dir or '.'}")
    return 0


def cmd_ablate(args) -> int:
    config = build_run_config(args)
    rows = ablate_tap_variants(replace(config, out_dir=config.out_dir or "."))
    for row in rows:
        mean = "-" if row["metric_mean"] is None else f"{row['metric_mean']:.4f}"
        std = "-" if row["metric_std"] is None else f"{row['metric_std']:.4f}"
        print(f"{row['variant']:>8} {format_param_count(row['tap_params']):>8} "
              f"{mean} +/- {std}")
    return 0


def cmd_lrgrid(args) -> int:
    config = build_run_config(args)
    best, reports = lr_grid_search(replace(config, out_dir=config.out_dir or "."))
    for label, report in best.items():
        print(f"{label}: best lr {report.lr:g} "
              f"({report.metric_name}={report.final_metric:.4f})")
    diverged = sum(r.diverged for r in reports)
    print(f"{len(reports)} grid cells, {diverged} divergent; lrgrid.csv written")
    return 0


def cmd_count_params(args) -> int:
    preset_name = args.preset or "toy"
    if preset_name not in PRESETS:
        raise ConfigError(f"unknown preset {preset_name!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS[preset_name]
    embed, bottleneck = default_tap_dims(cfg)
    table = tap_param_table(cfg, embed, bottleneck)
    print(f"tap parameter counts ({preset_name}: {cfg.num_layers} layers, "
          f"d_model {cfg.d_model}, embed {embed}, bottleneck {bottleneck})")
    for variant, count in table.items():
        print(f"  {variant:>8}  {count:>12,}  {format_param_count(count)}")

    strategy = tap_serial(cfg.num_layers, cfg.num_layers - 1,
                          TapConfig(embed_dim=embed, bottleneck_dim=bottleneck),
                          bottleneck=bottleneck)
    counted = count_learnable_params(strategy, cfg)
    print(f"\nstrategy {strategy.label()} (no head):")
    for component, count in counted.components.items():
        print(f"  {component:>20}  {count:>12,}")
    print(f"  {'trainable':>20}  {counted.trainable:>12,}")
    print(f"  {'total':>20}  {counted.total_model:>12,}")
    print(f"  trainable/total ratio: {counted.ratio:.4f}")
    return 0


def cmd_weights_report(args) -> int:
    try:
        with open(args.run) as fh:
            report = RunReport.from_json(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read run report {args.run}: {exc}") from exc
    except (TypeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"malformed run report {args.run}: {exc}") from exc
    try:
        summary = layer_weight_report(report, args.out or os.path.dirname(args.run) or ".")
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    print(f"weights: {[round(w, 4) for w in summary['weights']]}")
    print(f"centroid: {summary['centroid']:.4f} "
          f"(normalized {summary['centroid_normalized']:.4f})")
    print(f"wrote {summary['csv']} and {summary['svg']}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="layertap",
        description="adapter strategies over a frozen encoder: runs, sweeps, reports",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON or TOML run configuration file")
        p.add_argument("--seed", type=_seed_list, default=None,
                       help="seed list, e.g. '0,1,2' (overrides the config)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--preset", choices=sorted(PRESETS),
                       help="backbone preset (overrides the config)")

    for name, fn, help_text in [
        ("pretrain", cmd_pretrain, "pretrain and emit a frozen backbone checkpoint"),
        ("train", cmd_train, "run one training configuration per seed"),
        ("sweep", cmd_sweep, "layer sweep over every strategy"),
        ("ablate", cmd_ablate, "taps-only run per tap variant"),
        ("lrgrid", cmd_lrgrid, "learning-rate grid search"),
    ]:
        p = sub.add_parser(name, help=help_text)
        add_common(p)
        p.set_defaults(fn=fn)

    p = sub.add_parser("count-params", help="exact parameter accounting, no training")
    p.add_argument("--preset", choices=sorted(PRESETS), default="toy")
    p.set_defaults(fn=cmd_count_params)

    p = sub.add_parser("weights-report", help="layer-weight CSV and SVG from a run report")
    p.add_argument("--run", required=True, help="path to a run.json")
    p.add_argument("--out", help="output directory (default: next to the run)")
    p.set_defaults(fn=cmd_weights_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
