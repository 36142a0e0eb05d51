"""Command-line entry point: fetch, train, eval, predict, encode and ablate."""
from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import ablations
from .config import (
    ConfigError,
    RunConfig,
    fetch_datasets,
    load_config,
    load_datasets,
    parse_config,
    to_dict,
)
from .data import DataError, parse_cell, split
from .metrics import DatasetScore, aggregate, format_report
from .model import BasisTransformer, load_checkpoint, save_checkpoint
from .smr import SmrConfig, bits_from_string, bits_to_string, smr_decode, smr_encode
from .train import NumericalError, evaluate, format_record, safe_r2, train_loop

log = logging.getLogger("basis_transformer")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _deterministic_context(enabled: bool):
    """Limit BLAS/OpenMP pools to one thread so reductions run in a fixed order."""
    if not enabled:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else parse_config({})
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seeds"] = (args.seed,)
    if getattr(args, "out", None):
        changes["out_dir"] = args.out
    if getattr(args, "precision", None):
        changes["precision"] = args.precision
    return dataclasses.replace(cfg, **changes)


def _dtype(precision: int):
    return np.float64 if precision == 64 else np.float32


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _test_scores(model, splits, cfg: RunConfig) -> dict[str, float]:
    return {d.name: safe_r2(d.test.y, evaluate(model, d.test.rows, d.test.y, cfg.train)[0]) for d in splits}


def _report(per_seed: dict[int, dict[str, float]], label: str) -> tuple[str, dict]:
    names = sorted({n for scores in per_seed.values() for n in scores})
    ds_scores = [DatasetScore(n, [per_seed[s][n] for s in sorted(per_seed)]) for n in names]
    stats = aggregate(ds_scores)
    lines = [format_report({label: stats}), "", f"{'dataset':<28}{'mean R2':>12}{'std':>12}"]
    lines += [f"{s.name:<28}{s.mean:>12.4f}{s.std:>12.4f}" for s in ds_scores]
    summary = {"aggregate": stats, "datasets": {s.name: {"r2": s.r2_values, "mean": s.mean, "std": s.std}
                                                for s in ds_scores}}
    return "\n".join(lines) + "\n", summary


# --- commands ------------------------------------------------------------------------


def cmd_fetch(args) -> int:
    cfg = _resolve_config(args)
    for path in fetch_datasets(cfg):
        print(path)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = Path(cfg.out_dir)
    splits = split(load_datasets(cfg), cfg.split)
    _write_json(out / "config.json", to_dict(cfg))
    per_seed = {}
    for seed in cfg.seeds:
        run_dir = out / f"seed_{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        model = BasisTransformer(cfg.model, cfg.text, seed=seed, dtype=_dtype(cfg.precision))
        tcfg = dataclasses.replace(cfg.train, seed=seed)
        with open(run_dir / "metrics.jsonl", "w") as fh:
            res = train_loop(splits, model, tcfg, on_record=lambda r: fh.write(format_record(r) + "\n"))
        model.load_state_dict(res.best_state)
        save_checkpoint(model, run_dir / "best.ckpt",
                        extra={"seed": seed, "best_stride": res.best_stride, "best_val_r2": res.best_score})
        per_seed[seed] = _test_scores(model, splits, cfg)
        _write_json(run_dir / "test_scores.json", per_seed[seed])
        log.info("seed %d: best stride %d, test %s", seed, res.best_stride, per_seed[seed])
    text, summary = _report(per_seed, "basis transformer")
    (out / "report.txt").write_text(text)
    _write_json(out / "scores.json", summary)
    print(text, end="")
    return EXIT_OK


def _load_model(args, cfg: RunConfig):
    path = Path(args.checkpoint)
    if not path.exists():
        raise DataError(f"checkpoint {path} not found")
    try:
        model, extra = load_checkpoint(path, dtype=_dtype(args.precision) if args.precision else None)
    except (ValueError, KeyError) as exc:
        raise DataError(f"checkpoint {path}: {exc}") from None
    return model, extra


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    model, extra = _load_model(args, cfg)
    splits = split(load_datasets(cfg), cfg.split)
    seed = extra.get("seed", 0)
    text, summary = _report({seed: _test_scores(model, splits, cfg)}, Path(args.checkpoint).stem)
    print(text, end="")
    if args.out:
        (Path(args.out) / "eval_report.txt").parent.mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "eval_report.txt").write_text(text)
    return EXIT_OK


def read_rows(path, drop: str | None = None) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file")
        return [{k: parse_cell(v or "") for k, v in r.items() if k != drop} for r in reader]


def cmd_predict(args) -> int:
    cfg = _resolve_config(args)
    model, _ = _load_model(args, cfg)
    rows = read_rows(args.input, drop=args.target)
    if not rows:
        raise DataError(f"{args.input}: no rows")
    preds = model.predict(rows)
    dest = Path(args.output) if args.output else Path(cfg.out_dir) / "predictions.csv"
    dest.parent.mkdir(parents=True, exist_ok=True)
    with open(dest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "prediction"])
        writer.writerows([i, repr(float(p))] for i, p in enumerate(preds))
    print(dest)
    return EXIT_OK


def cmd_encode(args) -> int:
    try:
        smr = SmrConfig(args.h, args.l)
    except ValueError as exc:
        raise ConfigError(f"smr: {exc}") from None
    items = list(args.values)
    if args.file:
        items += Path(args.file).read_text().split()
    for item in items:
        if args.decode:
            try:
                bits = bits_from_string(item)
            except ValueError as exc:
                raise DataError(str(exc)) from None
            if len(bits) != smr.width:
                raise DataError(f"{item!r}: expected {smr.width} bits")
            print(repr(smr_decode(bits, smr)))
        else:
            try:
                value = float(item)
            except ValueError:
                raise DataError(f"{item!r} is not a number") from None
            if not math.isfinite(value):
                raise DataError(f"{item!r} is not finite")
            print(bits_to_string(smr_encode(value, smr)))
    return EXIT_OK


def _sweep_setup(args) -> ablations.SweepSetup:
    if not args.config:
        setup = ablations.SweepSetup()
        if args.seed is not None:
            setup = dataclasses.replace(setup, seeds=(args.seed,))
        if args.precision:
            setup = dataclasses.replace(setup, precision=args.precision)
        return setup
    cfg = _resolve_config(args)
    return ablations.SweepSetup(model=cfg.model, train=cfg.train, text=cfg.text, seeds=cfg.seeds,
                                precision=cfg.precision)


def _summarise(rows: list[dict], key: str) -> list[dict]:
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        groups.setdefault((r[key], r["dataset"]), []).append(r["test_r2"])
    out = []
    for (k, name), vals in groups.items():
        arr = np.array(vals, dtype=float)
        out.append({key: k, "dataset": name, "mean_test_r2": float(np.nanmean(arr)),
                    "std_test_r2": float(np.nanstd(arr, ddof=1)) if len(arr) > 1 else 0.0, "n_seeds": len(arr)})
    return out


def cmd_ablate(args) -> int:
    out = Path(args.out or Path(_resolve_config(args).out_dir) / f"ablate_{args.kind}")
    progress = log.info
    if args.kind == "numeric":
        cfg = ablations.NumericAblationConfig()
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seeds=(args.seed,))
        res = ablations.run_numeric_ablation(cfg, progress)
        ablations.write_rows(out / "curves.csv", res.curve_rows())
        summary = res.summary_rows()
    else:
        setup = _sweep_setup(args)
        if args.kind == "gamma":
            rows, curves = ablations.run_gamma_ablation(setup, progress=progress)
            summary = _summarise(rows, "gamma")
        elif args.kind == "blocks":
            rows, curves = ablations.run_blocks_ablation(setup, progress=progress)
            summary = _summarise(rows, "n_blocks")
        else:
            res = ablations.run_loss_ablation(setup, progress=progress)
            rows, curves = res.rows, res.curves
            summary = []
            for mode in ("bce_smr", "mse_scalar"):
                for name in sorted({r["dataset"] for r in rows}):
                    sel = [r for r in rows if r["loss_mode"] == mode and r["dataset"] == name]
                    summary.append({"loss_mode": mode, "dataset": name,
                                    "log10_mean_target": sel[0]["log10_mean_target"],
                                    "mean_nnse": float(np.nanmean([r["nnse"] for r in sel])),
                                    "initial_bce": res.initial_loss.get(name, math.nan)})
        ablations.write_rows(out / "runs.csv", rows)
        ablations.write_rows(out / "curves.csv", [{k: v for k, v in c.items()} for c in curves])
    ablations.write_rows(out / "summary.csv", summary)
    for row in summary:
        print(" ".join(f"{k}={_short(v)}" for k, v in row.items()))
    return EXIT_OK


def _short(v):
    return f"{v:.4g}" if isinstance(v, float) else str(v)


# --- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="basis-transformer", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--out", help="output directory (default: $BT_OUT_DIR or ./runs)")
        p.add_argument("--precision", type=int, choices=(32, 64), help="float width")
        p.add_argument("--deterministic", action="store_true", help="single-threaded, bitwise reproducible")
        if seed:
            p.add_argument("--seed", type=int, help="run only this seed")

    p = sub.add_parser("fetch", help="download URL datasets into the cache")
    common(p, seed=False)
    p.set_defaults(func=cmd_fetch)

    p = sub.add_parser("train", help="train one model per seed and report test R2")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="test R2 of a checkpoint")
    common(p, seed=False)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="decoded predictions for a CSV")
    common(p, seed=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="CSV with a header row")
    p.add_argument("--target", help="column to drop before predicting")
    p.add_argument("--output", help="destination CSV (default: <out>/predictions.csv)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("encode", help="print SMR bit strings (or decode them)")
    p.add_argument("values", nargs="*")
    p.add_argument("--file", help="whitespace separated values")
    p.add_argument("--h", type=int, default=29)
    p.add_argument("--l", type=int, default=14)
    p.add_argument("--decode", action="store_true", help="inputs are bit strings")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("ablate", help="run an ablation harness")
    p.add_argument("kind", choices=ablations.ABLATION_KINDS)
    common(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        with _deterministic_context(getattr(args, "deterministic", False)):
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
