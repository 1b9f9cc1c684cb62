"""Command-line surface: synth, train, predict, evaluate.

Exit codes: 0 success, 2 usage/config error, 3 data/format error,
4 numeric failure. Every command is deterministic given identical inputs
and seeds, byte for byte.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from .config import FcnetConfig, dump_config_json, load_config_json
from .data import (
    SICSequence,
    chronological_split,
    read_archive,
    read_sicg,
    synth_generate,
    window,
    write_archive,
    write_sicg,
)
from .errors import (
    ConfigError,
    DimensionError,
    FcnetError,
    FormatError,
    MetricError,
    NumericError,
    UsageError,
)
from .forecast import predict_recursive
from .metrics import active_region, evaluate, write_report_csv
from .model import load_checkpoint, save_checkpoint
from .trainer import train as run_training

_DISABLE_FLAGS = {
    "affb": "use_affb",
    "hfeb": "use_hfeb",
    "freqloss": "use_freq_loss",
}


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError as exc:
        raise ConfigError(f"size must look like 64x64, got {text!r}") from exc


def cmd_synth(args) -> int:
    h, w = _parse_size(args.size)
    fields, mask = synth_generate(args.days, h, w, args.seed)
    paths = write_archive(fields, mask, args.out)
    print(f"wrote {len(paths)} shard(s) covering {args.days} days to {args.out}")
    return 0


def _train_windows(fields, split, config, stride):
    train_pairs = window(fields, config.T, config.T_prime, stride,
                         day_range=split.train)
    try:
        val_pairs = window(fields, config.T, config.T_prime,
                           max(stride, config.T_prime), day_range=split.val)
    except UsageError:
        val_pairs = []
    return train_pairs, val_pairs


def cmd_train(args) -> int:
    config, train_cfg = load_config_json(args.config)
    overrides = {_DISABLE_FLAGS[name]: False for name in args.disable or []}
    if overrides:
        config = dataclasses.replace(config, **overrides)
    config.validate()

    fields, mask = read_archive(args.data)
    if fields.shape[-2:] != (config.H, config.W):
        raise DimensionError(
            f"archive grid {fields.shape[-2:]} != config grid "
            f"{(config.H, config.W)}")
    split = chronological_split(fields.shape[0])
    train_pairs, val_pairs = _train_windows(fields, split, config, args.stride)

    result = run_training(config, train_pairs, val_pairs, mask, train_cfg)

    ckpt = Path(args.out)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.params, ckpt)
    dump_config_json(config, train_cfg, ckpt.with_suffix(ckpt.suffix + ".json"))
    log_path = args.log or ckpt.with_suffix(ckpt.suffix + ".log.csv")
    with open(log_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(result.log_csv())
    if result.diverged:
        print("training diverged; best checkpoint retained", file=sys.stderr)
        return 4
    print(f"trained {train_cfg.steps} steps; best val MAE "
          f"{result.best_val_mae:.6f}; checkpoint at {ckpt}")
    return 0


def cmd_predict(args) -> int:
    ckpt = Path(args.ckpt)
    sidecar = ckpt.with_suffix(ckpt.suffix + ".json")
    if not sidecar.exists():
        raise FormatError(f"missing config sidecar {sidecar}")
    config, _ = load_config_json(sidecar)
    params = load_checkpoint(ckpt, config)

    seq = read_sicg(args.input)
    if seq.days != config.T:
        raise ConfigError(
            f"input window holds {seq.days} days, model expects exactly {config.T}")
    out = predict_recursive(params, config, seq, args.steps)
    write_sicg(out, args.out)
    print(f"predicted {out.days} day(s) starting at day {out.start_day}")
    return 0


def cmd_evaluate(args) -> int:
    pred = read_sicg(args.pred)
    truth = read_sicg(args.truth)
    if pred.data.shape != truth.data.shape:
        raise DimensionError(
            f"grids differ: {pred.data.shape} vs {truth.data.shape}")
    if pred.start_day != truth.start_day:
        raise FormatError(
            f"sequences start at different days: {pred.start_day} vs "
            f"{truth.start_day}")
    if not np.array_equal(pred.mask, truth.mask):
        raise FormatError("prediction and truth carry different land masks")

    fields, mask = read_archive(args.active_from)
    split = chronological_split(fields.shape[0])
    active = active_region(fields[split.train[0]: split.train[1]], mask)

    report = evaluate(pred.data, truth.data, truth.mask, active,
                      cell_area=args.cell_area)
    out_csv = Path(args.out)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    write_report_csv(report, out_csv)

    from .report import render_report_figures, write_day_maps

    if args.maps:
        write_day_maps(pred.data, truth.data, args.maps)
    if not args.no_figures:
        fig_dir = args.figures or out_csv.parent / "figures"
        render_report_figures(report, pred.data, truth.data, truth.mask,
                              fig_dir)
    print(f"MAE {100 * report.mae:.4f}%  RMSE {100 * report.rmse:.4f}%  "
          f"NSE {report.nse:.5f}  BACC {report.bacc:.3f}%")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fcnet",
        description="Dual-branch frequency-compensated daily sea-ice forecasting")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic daily archive")
    p.add_argument("--days", type=int, required=True)
    p.add_argument("--size", required=True, help="grid as HxW, e.g. 64x64")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory for shards")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on an archive")
    p.add_argument("--data", required=True, help="archive directory")
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--disable", action="append",
                   choices=sorted(_DISABLE_FLAGS),
                   help="ablate a component (repeatable)")
    p.add_argument("--stride", type=int, default=1,
                   help="training window stride in days")
    p.add_argument("--log", default=None, help="training log CSV path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="run (recursive) prediction")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True, help="SICG window of exactly T days")
    p.add_argument("--steps", type=int, default=0,
                   help="extra recursive windows beyond the first")
    p.add_argument("--out", required=True, help="output SICG path")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score a prediction against truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--active-from", required=True,
                   help="archive directory defining the active region")
    p.add_argument("--out", required=True, help="report CSV path")
    p.add_argument("--maps", default=None,
                   help="directory for per-day PGM heatmaps")
    p.add_argument("--figures", default=None,
                   help="directory for PNG figures (default: next to the CSV)")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--cell-area", type=float, default=625.0,
                   help="grid cell area in km^2")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, DimensionError, MetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except FcnetError as exc:  # pragma: no cover
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
