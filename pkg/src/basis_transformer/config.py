"""YAML run configuration and dataset manifests, validated before any work starts."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .data import DataError, Dataset, SplitSpec, fetch_http, gen_sum_table, gen_two_scale_regression, load_csv
from .encoder import TextEncoderSpec
from .model import ModelConfig
from .smr import SmrConfig
from .train import TrainConfig

OUT_DIR_ENV = "BT_OUT_DIR"
DEFAULT_SMR = {"h": 29, "l": 14}
GENERATORS = ("sum_table", "two_scale_small", "two_scale_large")


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field path."""


@dataclass(frozen=True)
class DatasetEntry:
    name: str
    target: str = "y"
    path: str | None = None
    url: str | None = None
    generator: str | None = None
    seed: int = 0
    n_rows: int = 500

    def __post_init__(self):
        sources = [s for s in (self.path, self.url, self.generator) if s is not None]
        if len(sources) != 1:
            raise ValueError("exactly one of path, url, generator is required")
        if self.generator is not None and self.generator not in GENERATORS:
            raise ValueError(f"generator must be one of {GENERATORS}")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    text: TextEncoderSpec = field(default_factory=TextEncoderSpec)
    split: SplitSpec = field(default_factory=SplitSpec)
    datasets: tuple[DatasetEntry, ...] = ()
    manifest: str | None = None
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    out_dir: str = field(default_factory=lambda: os.environ.get(OUT_DIR_ENV, "runs"))
    precision: int = 32

    @property
    def smr(self) -> SmrConfig:
        return self.model.smr

    @property
    def cache_dir(self) -> Path:
        return Path(self.out_dir) / "cache"


def _build(cls, raw: Any, path: str, **fixed):
    if raw is None:
        raw = {}
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{path}: expected a mapping, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}: unknown key")
    try:
        return cls(**{**raw, **fixed})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _check_ints(raw: Mapping, path: str, keys) -> None:
    for k in keys:
        if k in raw and (not isinstance(raw[k], int) or isinstance(raw[k], bool)):
            raise ConfigError(f"{path}.{k}: expected an integer")


def parse_config(raw: Mapping | None, base_dir: Path | None = None) -> RunConfig:
    """Turn a nested mapping into a :class:`RunConfig`, rejecting unknown keys."""
    raw = dict(raw or {})
    top = {f.name for f in dataclasses.fields(RunConfig)} | {"smr"}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown key")

    smr_raw = {**DEFAULT_SMR, **(raw.get("smr") or {})}
    _check_ints(smr_raw, "smr", ("h", "l"))
    smr = _build(SmrConfig, smr_raw, "smr")
    model_raw = raw.get("model") or {}
    if "smr" in model_raw:
        raise ConfigError("model.smr: set the SMR layout in the top-level smr section")
    _check_ints(model_raw, "model", ("dim", "n_blocks", "n_heads", "n_basis", "ratio", "n_ctx_layers", "mlp_ratio"))
    model = _build(ModelConfig, model_raw, "model", smr=smr)
    train = _build(TrainConfig, raw.get("train"), "train")
    text = _build(TextEncoderSpec, raw.get("text"), "text")
    if text.table_path and base_dir is not None and not Path(text.table_path).is_absolute():
        text = dataclasses.replace(text, table_path=str(base_dir / text.table_path))
    split = _build(SplitSpec, raw.get("split"), "split")
    if not 0.0 < split.eval_fraction < 0.5:
        raise ConfigError("split.eval_fraction: must lie in (0, 0.5)")
    if (train.loss_mode == "bce_smr") != (model.head == "smr"):
        raise ConfigError(f"train.loss_mode: {train.loss_mode} does not fit model.head {model.head}")

    entries = []
    for i, d in enumerate(raw.get("datasets") or []):
        entries.append(_dataset_entry(d, f"datasets.{i}", base_dir))
    manifest = raw.get("manifest")
    if manifest is not None:
        manifest = str(base_dir / manifest) if base_dir is not None and not Path(manifest).is_absolute() else manifest
        entries.extend(load_manifest(manifest))

    seeds = raw.get("seeds", RunConfig.seeds)
    if not isinstance(seeds, (list, tuple)) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds: expected a non-empty list of integers")
    precision = raw.get("precision", 32)
    if precision not in (32, 64):
        raise ConfigError("precision: must be 32 or 64")
    kwargs = dict(model=model, train=train, text=text, split=split, datasets=tuple(entries), manifest=manifest,
                  seeds=tuple(seeds), precision=precision)
    if raw.get("out_dir") is not None:
        kwargs["out_dir"] = str(raw["out_dir"])
    return RunConfig(**kwargs)


def _dataset_entry(raw, path: str, base_dir: Path | None) -> DatasetEntry:
    entry = _build(DatasetEntry, raw, path)
    if entry.path and base_dir is not None and not Path(entry.path).is_absolute():
        entry = dataclasses.replace(entry, path=str(base_dir / entry.path))
    return entry


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    return parse_config(raw, path.parent)


def load_manifest(path) -> list[DatasetEntry]:
    """A YAML file with a ``datasets`` list of ``{name, target, path | url | generator}``."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except OSError as exc:
        raise ConfigError(f"manifest {path}: {exc.strerror}") from None
    if not isinstance(raw, Mapping) or set(raw) - {"datasets"}:
        raise ConfigError(f"manifest {path}: expected a single 'datasets' list")
    return [_dataset_entry(d, f"manifest.datasets.{i}", path.parent) for i, d in enumerate(raw.get("datasets") or [])]


def to_dict(cfg: RunConfig) -> dict:
    """Plain nested mapping that :func:`parse_config` accepts back."""
    model = dataclasses.asdict(cfg.model)
    smr = model.pop("smr")
    return {
        "model": model,
        "smr": smr,
        "train": dataclasses.asdict(cfg.train),
        "text": dataclasses.asdict(cfg.text),
        "split": dataclasses.asdict(cfg.split),
        "datasets": [{k: v for k, v in dataclasses.asdict(d).items() if v is not None} for d in cfg.datasets],
        "seeds": list(cfg.seeds),
        "out_dir": cfg.out_dir,
        "precision": cfg.precision,
    }


def entry_location(entry: DatasetEntry, cache_dir: Path) -> Path | None:
    if entry.path is not None:
        return Path(entry.path)
    if entry.url is not None:
        return cache_dir / f"{entry.name}.csv"
    return None


def fetch_datasets(cfg: RunConfig) -> list[Path]:
    """Download every URL dataset into the cache directory."""
    out = []
    for entry in cfg.datasets:
        if entry.url is not None:
            out.append(fetch_http(entry.url, entry_location(entry, cfg.cache_dir)))
    return out


def load_datasets(cfg: RunConfig, fetch_missing: bool = True) -> list[Dataset]:
    if not cfg.datasets:
        raise ConfigError("datasets: no datasets configured")
    names = [d.name for d in cfg.datasets]
    if len(set(names)) != len(names):
        raise ConfigError("datasets: names must be unique")
    out = []
    for entry in cfg.datasets:
        if entry.generator is not None:
            out.append(_generate(entry))
            continue
        loc = entry_location(entry, cfg.cache_dir)
        if not loc.exists():
            if entry.url is not None and fetch_missing:
                fetch_http(entry.url, loc)
            else:
                raise DataError(f"{entry.name}: {loc} not found")
        out.append(load_csv(loc, entry.target, name=entry.name))
    return out


def _generate(entry: DatasetEntry) -> Dataset:
    if entry.generator == "sum_table":
        ds = gen_sum_table(entry.seed, entry.n_rows)
    else:
        small, large = gen_two_scale_regression(entry.seed, entry.n_rows)
        ds = small if entry.generator == "two_scale_small" else large
    return dataclasses.replace(ds, name=entry.name)
