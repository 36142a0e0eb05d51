from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


def r2(y, y_hat) -> float:
    """Coefficient of determination ``1 - SS_res / SS_tot``."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {y_hat.shape}")
    if y.size < 2:
        raise ValueError("r2 needs at least two samples")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValueError("r2 is undefined for a constant target")
    ss_res = float(np.sum((y - y_hat) ** 2))
    return 1.0 - ss_res / ss_tot


def nnse(r2_value: float) -> float:
    """Normalised Nash-Sutcliffe efficiency, maps (-inf, 1] onto (0, 1]."""
    if r2_value > 1.0:
        raise ValueError("r2 cannot exceed 1")
    return 1.0 / (2.0 - r2_value)


@dataclass
class DatasetScore:
    name: str
    r2_values: list[float] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.r2_values))

    @property
    def std(self) -> float:
        # sample convention over seeds
        if len(self.r2_values) < 2:
            return 0.0
        return float(np.std(self.r2_values, ddof=1))


def aggregate(scores: Sequence[DatasetScore]) -> dict[str, float]:
    """Median, IQR, mean and (population) std of per-dataset mean scores."""
    if not scores:
        raise ValueError("no scores to aggregate")
    means = np.array([s.mean for s in scores], dtype=np.float64)
    q1, med, q3 = np.quantile(means, [0.25, 0.5, 0.75], method="linear")
    return {
        "median": float(med),
        "iqr": float(q3 - q1),
        "mean": float(means.mean()),
        "std": float(means.std(ddof=0)),
    }


def format_report(rows: dict[str, dict[str, float]]) -> str:
    """Plain-text table with the columns Median / IQR / Mean / Std."""
    header = f"{'model':<28}{'Median':>12}{'IQR':>12}{'Mean':>12}{'Std':>12}"
    lines = [header, "-" * len(header)]
    for label, s in rows.items():
        lines.append(
            f"{label:<28}{_fmt(s['median']):>12}{_fmt(s['iqr']):>12}{_fmt(s['mean']):>12}{_fmt(s['std']):>12}"
        )
    return "\n".join(lines)


def _fmt(x: float) -> str:
    if math.isnan(x):
        return "nan"
    if abs(x) >= 1e4:
        return f"{x:.3e}"
    return f"{x:.3f}"
