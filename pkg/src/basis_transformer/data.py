"""Dataset loading, splitting, fetching and synthetic generators."""
from __future__ import annotations

import csv
import logging
import math
import re
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .encoder import CellValue
from .smr import SmrConfig, smr_encode_many

log = logging.getLogger(__name__)

DEFAULT_NA = frozenset({"", "NA", "NaN", "?"})
_NUMERAL = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$")


class DataError(Exception):
    """Raised for malformed input data, unusable splits or failed downloads."""


@dataclass
class Dataset:
    name: str
    columns: tuple[str, ...]
    rows: list[dict[str, CellValue]]
    target: str
    y: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64)
        if len(self.rows) != len(self.y):
            raise DataError(f"{self.name}: {len(self.rows)} rows but {len(self.y)} targets")
        if not np.all(np.isfinite(self.y)):
            raise DataError(f"{self.name}: non-finite target values")

    def __len__(self) -> int:
        return len(self.rows)

    def subset(self, idx: Sequence[int], name: str | None = None) -> "Dataset":
        return Dataset(name or self.name, self.columns, [self.rows[i] for i in idx], self.target, self.y[list(idx)])


@dataclass
class SplitDataset:
    name: str
    train: Dataset
    val: Dataset
    test: Dataset


@dataclass(frozen=True)
class SplitSpec:
    eval_fraction: float = 0.2
    seed: int = 0


def parse_cell(text: str, na_values: Iterable[str] = DEFAULT_NA) -> CellValue:
    if text in na_values or text.strip() in na_values:
        return None
    s = text.strip()
    if _NUMERAL.match(s):
        return float(s)
    return text


def load_csv(path, target: str, name: str | None = None, na_values: Iterable[str] = DEFAULT_NA) -> Dataset:
    """Read a headered CSV; cells become float, str or None with no other preprocessing."""
    na_values = frozenset(na_values)
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if target not in header:
            raise DataError(f"{path}: target column {target!r} not found")
        if len(set(header)) != len(header) or any(not h for h in header):
            raise DataError(f"{path}: header names must be unique and non-empty")
        t_idx = header.index(target)
        columns = tuple(h for i, h in enumerate(header) if i != t_idx)
        rows, ys = [], []
        for lineno, record in enumerate(reader, start=2):
            if not record:
                continue
            if len(record) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(record)}")
            y = parse_cell(record[t_idx], na_values)
            if not isinstance(y, float) or not math.isfinite(y):
                raise DataError(f"{path}:{lineno}: target {record[t_idx]!r} is not numeric")
            ys.append(y)
            rows.append({h: parse_cell(v, na_values) for i, (h, v) in enumerate(zip(header, record)) if i != t_idx})
    return Dataset(name or path.stem, columns, rows, target, np.array(ys))


def save_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([*dataset.columns, dataset.target])
        for row, y in zip(dataset.rows, dataset.y):
            cells = ["" if row[c] is None else (repr(row[c]) if isinstance(row[c], float) else row[c])
                     for c in dataset.columns]
            writer.writerow([*cells, repr(float(y))])


def eval_size(sizes: Sequence[int], fraction: float = 0.2) -> int:
    return int(math.floor(fraction * min(sizes)))


def split(datasets: Sequence[Dataset], spec: SplitSpec = SplitSpec()) -> list[SplitDataset]:
    """Equal-size random validation and test sets for every dataset.

    The evaluation size is ``floor(fraction * smallest dataset size)``; the
    rest of each dataset is used for training.
    """
    if not datasets:
        raise DataError("no datasets to split")
    n_e = eval_size([len(d) for d in datasets], spec.eval_fraction)
    if n_e < 1:
        raise DataError("evaluation split would be empty; smallest dataset is too small")
    rng = np.random.default_rng(spec.seed)
    out = []
    for d in datasets:
        if len(d) <= 2 * n_e:
            raise DataError(f"{d.name}: {len(d)} rows is too few for two evaluation sets of {n_e}")
        perm = rng.permutation(len(d))
        test, val, train = perm[:n_e], perm[n_e : 2 * n_e], perm[2 * n_e :]
        out.append(SplitDataset(d.name, d.subset(np.sort(train)), d.subset(np.sort(val)), d.subset(np.sort(test))))
    return out


def fetch_http(url: str, dest, timeout: float = 60.0) -> Path:
    """Download ``url`` byte-for-byte into ``dest``."""
    dest = Path(dest)
    try:
        with urllib.request.urlopen(url, timeout=timeout) as resp:
            payload = resp.read()
    except urllib.error.HTTPError as exc:
        raise DataError(f"GET {url} failed with HTTP {exc.code}") from exc
    except urllib.error.URLError as exc:
        raise DataError(f"GET {url} failed: {exc.reason}") from exc
    dest.parent.mkdir(parents=True, exist_ok=True)
    tmp = dest.with_suffix(dest.suffix + ".part")
    tmp.write_bytes(payload)
    tmp.replace(dest)
    log.info("fetched %s -> %s (%d bytes)", url, dest, len(payload))
    return dest


# --- synthetic generators -------------------------------------------------------------

PROPERTY_LABELS = ("even", "odd", "real", "integer", "big", "small")
ABLATION_SMR = SmrConfig(h=7, l=24)


def number_labels(values) -> np.ndarray:
    """Multi-hot (even, odd, real, integer, big, small) labels; "real" means non-integer."""
    v = np.asarray(values, dtype=np.float64)
    is_int = v == np.round(v)
    even = is_int & (np.mod(v, 2) == 0)
    odd = is_int & ~even
    big = np.abs(v) > 50
    return np.stack([even, odd, ~is_int, is_int, big, ~big], axis=-1).astype(np.float64)


def _draw_numbers(rng: np.random.Generator, n: int) -> np.ndarray:
    n_int = n // 2
    ints = rng.integers(-100, 101, size=n_int).astype(np.float64)
    reals = rng.uniform(-100.0, 100.0, size=n - n_int)
    # keep non-integers clearly off the integer grid at 2^-24 resolution
    frac = np.abs(reals - np.round(reals))
    while np.any(frac < 1e-3):
        bad = frac < 1e-3
        reals[bad] = rng.uniform(-100.0, 100.0, size=int(bad.sum()))
        frac = np.abs(reals - np.round(reals))
    v = np.concatenate([ints, reals])
    return v[rng.permutation(n)]


def gen_number_properties(seed: int, n: int = 1000):
    """``(train_values, train_labels, val_values, val_labels)``; half integers, half not."""
    rng = np.random.default_rng(seed)
    tr = _draw_numbers(rng, n)
    va = _draw_numbers(rng, n)
    return tr, number_labels(tr), va, number_labels(va)


def ieee754_bits(values) -> np.ndarray:
    """IEEE-754 single-precision bit pattern, most significant bit first."""
    words = np.asarray(values, dtype=">f4").view(">u4").astype(np.uint64)
    shifts = np.arange(31, -1, -1, dtype=np.uint64)
    return ((words[..., None] >> shifts) & 1).astype(np.float64)


def number_features(values, kind: str) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if kind == "smr":
        return smr_encode_many(values, ABLATION_SMR).astype(np.float64)
    if kind == "ieee754":
        return ieee754_bits(values)
    if kind == "scalar":
        return values[:, None]
    raise ValueError(f"unknown numeric encoding {kind!r}")


def gen_sum_table(seed: int, n_rows: int = 500) -> Dataset:
    """``y = x1 + 2*x2`` with ``x`` uniform on ``[0, 16)``."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 16.0, size=(n_rows, 2))
    rows = [{"x1": float(a), "x2": float(b)} for a, b in x]
    return Dataset("sum", ("x1", "x2"), rows, "y", x[:, 0] + 2 * x[:, 1])


def gen_two_scale_regression(seed: int, n_rows: int = 500, noise: float = 0.02) -> tuple[Dataset, Dataset]:
    """Two linear tables over three numeric columns with targets in [1, 10] and [1e3, 1e6].

    Both use ``s = w . x`` for ``x`` uniform on ``[0, 10)^3`` and weights
    summing to one, so ``s`` is in ``[0, 10)``. Gaussian noise of
    ``noise * 10`` is added to ``s`` before the affine map onto each range,
    then the target is clipped to the range.
    """
    rng = np.random.default_rng(seed)
    out = []
    specs = [
        ("small_scale", ("a", "b", "c"), np.array([0.5, 0.3, 0.2]), 1.0, 10.0),
        ("large_scale", ("p", "q", "s"), np.array([0.2, 0.5, 0.3]), 1e3, 1e6),
    ]
    for name, cols, w, lo, hi in specs:
        x = rng.uniform(0.0, 10.0, size=(n_rows, 3))
        s = x @ w + rng.normal(0.0, noise * 10.0, size=n_rows)
        y = np.clip(lo + (hi - lo) * s / 10.0, lo, hi)
        rows = [dict(zip(cols, map(float, r))) for r in x]
        out.append(Dataset(name, cols, rows, "y", y))
    return out[0], out[1]
