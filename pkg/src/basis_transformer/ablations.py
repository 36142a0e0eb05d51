"""Small-scale ablation harnesses: numeric encodings, gamma, depth and loss head."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, bce_with_logits, default_dtype, gelu, mean, no_grad
from .autodiff.nn import Linear, Module
from .data import SplitDataset, SplitSpec, gen_number_properties, gen_two_scale_regression, number_features, split
from .encoder import TextEncoderSpec
from .metrics import nnse
from .model import BasisTransformer, ModelConfig
from .smr import SmrConfig
from .train import AdamW, TrainConfig, bce_smr_loss, evaluate, safe_r2, train_loop

log = logging.getLogger(__name__)

ENCODINGS = ("smr", "ieee754", "scalar")
GAMMA_SWEEP = (0.0, 0.1, 0.2, 0.3, 0.4, 0.45, 0.5)
BLOCK_SWEEP = (1, 2, 3, 4, 5, 6)
ABLATION_KINDS = ("numeric", "gamma", "blocks", "loss")

SMALL_MODEL = ModelConfig(dim=32, n_blocks=2, n_heads=4, n_basis=8, ratio=2, n_ctx_layers=1, mlp_ratio=2,
                          smr=SmrConfig(20, 4))
SMALL_TEXT = TextEncoderSpec(vocab_buckets=64, embed_dim=16)
SMALL_TRAIN = TrainConfig(learning_rate=1e-3, weight_decay=0.0, batch_size=32, n_strides=10, stride_size=100)


def write_rows(path, rows: Sequence[dict]) -> Path:
    """Write dict rows as CSV (columns from the first row)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if rows:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return path


# --- numeric encodings ---------------------------------------------------------------


class FeatureMLP(Module):
    """GELU multi-layer perceptron mapping a fixed feature vector to logits."""

    def __init__(self, n_in: int, n_hidden_layers: int, width: int, n_out: int, rng):
        sizes = [n_in] + [width] * n_hidden_layers + [n_out]
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = gelu(layer(x))
        return self.layers[-1](x)


@dataclass(frozen=True)
class NumericAblationConfig:
    seeds: tuple[int, ...] = tuple(range(10))
    epochs: int = 250
    n_numbers: int = 1000
    width: int = 64
    batch_size: int = 50
    learning_rate: float = 1e-3


@dataclass
class NumericAblationResult:
    # encoding -> (n_seeds, epochs) validation cross entropy
    curves: dict[str, np.ndarray]
    config: NumericAblationConfig

    def final(self, kind: str) -> tuple[float, float]:
        """Mean and standard error over seeds at the last epoch."""
        last = self.curves[kind][:, -1]
        se = float(last.std(ddof=1) / math.sqrt(len(last))) if len(last) > 1 else 0.0
        return float(last.mean()), se

    def curve_rows(self) -> list[dict]:
        rows = []
        for kind, arr in self.curves.items():
            for s_idx, seed in enumerate(self.config.seeds):
                for epoch, ce in enumerate(arr[s_idx], start=1):
                    rows.append({"encoding": kind, "seed": seed, "epoch": epoch, "val_ce": float(ce)})
        return rows

    def summary_rows(self) -> list[dict]:
        return [{"encoding": k, "final_val_ce_mean": self.final(k)[0], "final_val_ce_se": self.final(k)[1]}
                for k in self.curves]


def _cross_entropy(model, x, labels) -> float:
    with no_grad():
        return float(bce_with_logits(model(Tensor(x)), labels).data.mean())


def train_number_mlp(kind: str, seed: int, cfg: NumericAblationConfig) -> np.ndarray:
    """Per-epoch validation cross entropy for one encoding and seed."""
    tr, tr_y, va, va_y = gen_number_properties(seed, cfg.n_numbers)
    x_tr, x_va = number_features(tr, kind), number_features(va, kind)
    # 2 hidden layers for bit encodings, 3 for the raw scalar; same init for both bit encodings
    depth = 3 if kind == "scalar" else 2
    with default_dtype(np.float64):
        model = FeatureMLP(x_tr.shape[1], depth, cfg.width, tr_y.shape[1], np.random.default_rng(seed))
    opt = AdamW(model.named_parameters(), lr=cfg.learning_rate, weight_decay=0.0)
    order_rng = np.random.default_rng(seed + 10_000)
    curve = np.empty(cfg.epochs)
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(len(x_tr))
        for s in range(0, len(perm), cfg.batch_size):
            idx = perm[s : s + cfg.batch_size]
            model.zero_grad()
            mean(bce_with_logits(model(Tensor(x_tr[idx])), tr_y[idx])).backward()
            opt.step()
        curve[epoch] = _cross_entropy(model, x_va, va_y)
    return curve


def run_numeric_ablation(cfg: NumericAblationConfig = NumericAblationConfig(),
                         progress: Callable[[str], None] | None = None) -> NumericAblationResult:
    curves = {}
    for kind in ENCODINGS:
        runs = []
        for seed in cfg.seeds:
            runs.append(train_number_mlp(kind, seed, cfg))
            if progress:
                progress(f"numeric {kind} seed {seed}: final val CE {runs[-1][-1]:.4f}")
        curves[kind] = np.stack(runs)
    return NumericAblationResult(curves, cfg)


# --- transformer sweeps --------------------------------------------------------------


@dataclass(frozen=True)
class SweepSetup:
    model: ModelConfig = SMALL_MODEL
    train: TrainConfig = SMALL_TRAIN
    text: TextEncoderSpec = SMALL_TEXT
    seeds: tuple[int, ...] = (0, 1, 2)
    n_rows: int = 500
    data_seed: int = 0
    precision: int = 32

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32


def two_scale_splits(setup: SweepSetup) -> list[SplitDataset]:
    small, large = gen_two_scale_regression(setup.data_seed, setup.n_rows)
    return split([small, large], SplitSpec(seed=setup.data_seed))


def _train_eval(model_cfg: ModelConfig, train_cfg: TrainConfig, setup: SweepSetup, data, seed: int):
    model = BasisTransformer(model_cfg, setup.text, seed=seed, dtype=setup.dtype)
    res = train_loop(data, model, dataclasses.replace(train_cfg, seed=seed))
    model.load_state_dict(res.best_state)
    scores = {}
    for d in data:
        preds, _ = evaluate(model, d.test.rows, d.test.y, train_cfg)
        scores[d.name] = safe_r2(d.test.y, preds)
    return model, res, scores


def _record_curves(tag: dict, res, sink: list[dict]) -> None:
    for r in res.records:
        sink.append({**tag, **r})


def run_gamma_ablation(setup: SweepSetup = SweepSetup(), gammas: Sequence[float] = GAMMA_SWEEP, data=None,
                       progress=None) -> tuple[list[dict], list[dict]]:
    """Test R^2 per (gamma, seed, dataset) and per-stride validation curves."""
    data = data or two_scale_splits(setup)
    rows, curves = [], []
    for gamma in gammas:
        tcfg = dataclasses.replace(setup.train, gamma=gamma)
        for seed in setup.seeds:
            _, res, scores = _train_eval(setup.model, tcfg, setup, data, seed)
            _record_curves({"gamma": gamma, "seed": seed}, res, curves)
            for name, score in scores.items():
                rows.append({"gamma": gamma, "seed": seed, "dataset": name, "test_r2": score})
            if progress:
                progress(f"gamma {gamma} seed {seed}: {scores}")
    return rows, curves


def run_blocks_ablation(setup: SweepSetup = SweepSetup(), blocks: Sequence[int] = BLOCK_SWEEP, data=None,
                        progress=None) -> tuple[list[dict], list[dict]]:
    data = data or two_scale_splits(setup)
    rows, curves = [], []
    for n in blocks:
        mcfg = dataclasses.replace(setup.model, n_blocks=n)
        for seed in setup.seeds:
            model, res, scores = _train_eval(mcfg, setup.train, setup, data, seed)
            _record_curves({"n_blocks": n, "seed": seed}, res, curves)
            for name, score in scores.items():
                rows.append({"n_blocks": n, "seed": seed, "dataset": name, "test_r2": score,
                             "n_params": model.num_parameters()})
            if progress:
                progress(f"blocks {n} seed {seed}: {scores}")
    return rows, curves


def initial_bce_loss(model: BasisTransformer, rows, y) -> float:
    """Mean per-sample SMR cross entropy of an untrained model."""
    with no_grad():
        logits = model(model.encode(rows))
        return float(bce_smr_loss(logits, y, model.cfg.smr).data.mean())


@dataclass
class LossAblationResult:
    rows: list[dict] = field(default_factory=list)
    curves: list[dict] = field(default_factory=list)
    initial_loss: dict[str, float] = field(default_factory=dict)

    def mean_nnse(self, mode: str, dataset: str) -> float:
        vals = [r["nnse"] for r in self.rows if r["loss_mode"] == mode and r["dataset"] == dataset]
        return float(np.mean(vals))


def run_loss_ablation(setup: SweepSetup = SweepSetup(), data=None, progress=None) -> LossAblationResult:
    """SMR cross entropy versus a scalar MSE head; NNSE against log10 mean target."""
    data = data or two_scale_splits(setup)
    out = LossAblationResult()
    probe = BasisTransformer(setup.model, setup.text, seed=setup.seeds[0], dtype=setup.dtype)
    for d in data:
        out.initial_loss[d.name] = initial_bce_loss(probe, d.train.rows, d.train.y)
    for mode, head in (("bce_smr", "smr"), ("mse_scalar", "scalar")):
        mcfg = dataclasses.replace(setup.model, head=head)
        tcfg = dataclasses.replace(setup.train, loss_mode=mode)
        for seed in setup.seeds:
            _, res, scores = _train_eval(mcfg, tcfg, setup, data, seed)
            _record_curves({"loss_mode": mode, "seed": seed}, res, out.curves)
            for d in data:
                score = scores[d.name]
                out.rows.append({
                    "loss_mode": mode, "seed": seed, "dataset": d.name, "test_r2": score,
                    "nnse": nnse(score) if math.isfinite(score) else math.nan,
                    "log10_mean_target": float(np.log10(np.abs(d.test.y).mean())),
                })
            if progress:
                progress(f"loss {mode} seed {seed}: {scores}")
    return out
