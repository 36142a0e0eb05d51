"""Losses, adaptive loss reweighing, AdamW and the stride-based multi-task loop."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, bce_with_logits, mean, mul, no_grad, sub
from .data import DataError, SplitDataset
from .metrics import r2
from .smr import SmrConfig, smr_encode_many

log = logging.getLogger(__name__)

LOSS_MODES = ("bce_smr", "mse_scalar")


class NumericalError(RuntimeError):
    """A non-finite loss or gradient was produced."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    max_grad_norm: float = 1.0
    lr_decay_mult: float = 0.985
    gamma: float = 0.2
    reweigh: bool = True
    eps_g: float = 1e-8
    batch_size: int = 64
    n_strides: int = 200
    stride_size: int = 200
    seed: int = 0
    loss_mode: str = "bce_smr"

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 0.5:
            raise ValueError(f"gamma must lie in [0, 0.5], got {self.gamma}")
        if self.stride_size < 1 or self.n_strides < 1:
            raise ValueError("n_strides and stride_size must be >= 1")
        if self.eps_g <= 0:
            raise ValueError("eps_g must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.max_grad_norm <= 0:
            raise ValueError("max_grad_norm must be positive")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")


# --- losses ---------------------------------------------------------------------------


def bce_smr_loss(logits: Tensor, y, smr: SmrConfig) -> Tensor:
    """Per-sample sum of binary cross entropies over the SMR bits of ``y``."""
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise ValueError("targets must be finite")
    bits = smr_encode_many(y, smr)
    return bce_with_logits(logits, bits.astype(logits.dtype))


def mse_scalar_loss(pred: Tensor, y) -> Tensor:
    """Per-sample squared error for a ``B x 1`` prediction."""
    y = np.asarray(y, dtype=pred.dtype).reshape(-1, 1)
    diff = sub(pred, y)
    return mul(diff, diff).reshape(-1)


def magnitude_agreement(y, y_hat, eps: float = 1e-8):
    """Ratio of the smaller to the larger magnitude, in ``(0, 1]``; signs are ignored."""
    a = np.abs(np.asarray(y, dtype=np.float64))
    b = np.abs(np.asarray(y_hat, dtype=np.float64))
    g = (np.minimum(a, b) + eps) / (np.maximum(a, b) + eps)
    return float(g) if g.ndim == 0 else g


def reweigh_weights(g, gamma: float) -> np.ndarray:
    if not 0.0 <= gamma <= 0.5:
        raise ValueError("gamma must lie in [0, 0.5]")
    g = np.asarray(g, dtype=np.float64)
    return (1.0 - g) * (1.0 - 2.0 * gamma) + gamma


def reweigh(per_sample: Tensor, g, gamma: float) -> Tensor:
    """Batch loss ``mean(w_i * L_i)``; the weights carry no gradient."""
    w = reweigh_weights(g, gamma).astype(per_sample.dtype)
    return mean(mul(per_sample, w))


def batch_loss(model, logits: Tensor, y, cfg: TrainConfig) -> tuple[Tensor, Tensor]:
    """``(scalar training loss, per-sample losses)`` for one mini-batch."""
    if cfg.loss_mode == "bce_smr":
        per = bce_smr_loss(logits, y, model.cfg.smr)
    else:
        per = mse_scalar_loss(logits, y)
    if cfg.reweigh:
        y_hat = model.decode(logits.data)
        g = magnitude_agreement(y, y_hat, cfg.eps_g)
    else:
        # neutral weight: identical to gamma = 0.5
        g = np.zeros(len(per.data))
    gamma = cfg.gamma if cfg.reweigh else 0.5
    return reweigh(per, g, gamma), per


# --- optimisation ------------------------------------------------------------------------


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if not math.isfinite(total):
        raise NumericalError("non-finite gradient norm")
    if total > max_norm:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(scale)
    return total


class AdamW:
    """Adam with decoupled weight decay (bias-corrected moments)."""

    def __init__(self, named_params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2):
        self.named = list(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named}

    @property
    def params(self):
        return [p for _, p in self.named]

    def step(self) -> None:
        for name, p in self.named:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericalError(f"non-finite gradient in {name}; step aborted")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        step_size = self.lr / bc1
        for name, p in self.named:
            if p.grad is None:
                continue
            dt = p.dtype.type
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= dt(b1)
            m += dt(1.0 - b1) * g
            v *= dt(b2)
            v += dt(1.0 - b2) * g * g
            if self.weight_decay:
                p.data *= dt(1.0 - self.lr * self.weight_decay)
            denom = np.sqrt(v) / dt(math.sqrt(bc2)) + dt(self.eps)
            p.data -= dt(step_size) * m / denom

    def state(self) -> dict:
        return {"t": self.t, "lr": self.lr, "m": self.m, "v": self.v}


# --- loop ----------------------------------------------------------------------------------


@dataclass
class RunState:
    step: int = 0
    stride: int = 0
    lr: float = 0.0
    best_score: float = -math.inf
    best_stride: int = -1
    best_state: dict | None = None


@dataclass
class TrainResult:
    best_state: dict
    best_stride: int
    best_score: float
    records: list[dict] = field(default_factory=list)
    final_state: dict | None = None

    def log_lines(self) -> list[str]:
        return [format_record(r) for r in self.records]


def format_record(record: dict) -> str:
    clean = {k: (_json_float(v) if isinstance(v, (float, np.floating)) else v) for k, v in record.items()}
    return json.dumps(clean, sort_keys=True)


def _json_float(x):
    x = float(x)
    return x if math.isfinite(x) else None


def evaluate(model, rows, y, cfg: TrainConfig, batch_size: int = 256) -> tuple[np.ndarray, float]:
    """Decoded predictions and mean (unweighted) per-sample loss, without a graph."""
    preds, losses = [], []
    prev = model.ctx.train
    model.ctx.train = False
    try:
        with no_grad():
            for s in range(0, len(rows), batch_size):
                logits = model.forward(model.encode(rows[s : s + batch_size]))
                yb = y[s : s + batch_size]
                per = bce_smr_loss(logits, yb, model.cfg.smr) if cfg.loss_mode == "bce_smr" else mse_scalar_loss(logits, yb)
                losses.append(per.data.astype(np.float64))
                preds.append(model.decode(logits.data))
    finally:
        model.ctx.train = prev
    return np.concatenate(preds), float(np.concatenate(losses).mean())


def safe_r2(y, y_hat) -> float:
    try:
        return r2(y, y_hat)
    except ValueError:
        return math.nan


def train_loop(
    datasets: Sequence[SplitDataset],
    model,
    cfg: TrainConfig,
    eval_train: bool = False,
    on_record: Callable[[dict], None] | None = None,
    until: Callable[[list[dict]], bool] | None = None,
) -> TrainResult:
    """Train on several datasets at once, validating after every stride.

    Each step draws a mini-batch from one dataset picked uniformly at random.
    After each stride the validation R^2 of every dataset is logged and the
    parameters are snapshotted whenever the mean validation R^2 improves.
    The learning rate is multiplied by ``lr_decay_mult`` after each stride.
    ``until`` receives the records of the finished stride and may end the run early.
    """
    if not datasets:
        raise DataError("no datasets to train on")
    for d in datasets:
        if len(d.train) == 0:
            raise DataError(f"{d.name}: empty training split")
    if (cfg.loss_mode == "bce_smr") != (model.cfg.head == "smr"):
        raise ValueError(f"loss_mode {cfg.loss_mode} does not match model head {model.cfg.head}")

    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model.named_parameters(), cfg.learning_rate, (cfg.beta1, cfg.beta2), cfg.eps_opt, cfg.weight_decay)
    params = opt.params
    state = RunState(lr=cfg.learning_rate)
    model.ctx.seed = cfg.seed
    records: list[dict] = []

    def emit(rec):
        records.append(rec)
        if on_record is not None:
            on_record(rec)

    for stride in range(cfg.n_strides):
        model.ctx.train = True
        stride_losses = {d.name: [] for d in datasets}
        for _ in range(cfg.stride_size):
            d = datasets[int(rng.integers(len(datasets)))]
            n = len(d.train)
            idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
            rows = [d.train.rows[i] for i in idx]
            y = d.train.y[idx]
            model.ctx.step = state.step
            model.zero_grad()
            logits = model.forward(model.encode(rows))
            loss, _ = batch_loss(model, logits, y, cfg)
            if not np.isfinite(loss.data):
                raise NumericalError(f"non-finite loss at step {state.step} on {d.name}")
            loss.backward()
            clip_grad_norm(params, cfg.max_grad_norm)
            opt.step()
            stride_losses[d.name].append(float(loss.data))
            state.step += 1
        model.ctx.train = False

        scores, stride_records = [], []
        for d in datasets:
            preds, vloss = evaluate(model, d.val.rows, d.val.y, cfg)
            score = safe_r2(d.val.y, preds)
            scores.append(score)
            stride_records.append({"stride": stride, "dataset": d.name, "split": "val", "r2": score, "loss": vloss})
            if eval_train:
                tpreds, tloss = evaluate(model, d.train.rows, d.train.y, cfg)
                stride_records.append({"stride": stride, "dataset": d.name, "split": "train",
                                       "r2": safe_r2(d.train.y, tpreds), "loss": tloss})
        for rec in stride_records:
            emit(rec)
        mean_score = float(np.nanmean(scores)) if not all(math.isnan(s) for s in scores) else math.nan
        if state.best_state is None or (not math.isnan(mean_score) and mean_score > state.best_score):
            state.best_score = mean_score if not math.isnan(mean_score) else -math.inf
            state.best_stride = stride
            state.best_state = model.state_dict()
        log.info("stride %d step %d lr %.3g mean val r2 %.4f", stride, state.step, opt.lr, mean_score)
        opt.lr *= cfg.lr_decay_mult
        state.lr = opt.lr
        state.stride = stride + 1
        if until is not None and until(stride_records):
            break

    return TrainResult(state.best_state, state.best_stride, state.best_score, records, model.state_dict())
