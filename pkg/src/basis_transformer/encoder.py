"""Row encoding: turn sets of (column name, value) pairs into padded tensors."""
from __future__ import annotations

import functools
import hashlib
import json
import math
import re
from dataclasses import dataclass
from typing import Mapping, Sequence, Union

import numpy as np

from .autodiff import Linear, Module, Parameter, Tensor, add, broadcast_to, concat, embedding, get_default_dtype, mul
from .smr import SmrConfig, smr_encode_many

# A cell is a finite float (number), a str (text) or None (missing).
CellValue = Union[float, int, str, None]
Row = Mapping[str, CellValue]

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


@dataclass(frozen=True)
class TextEncoderSpec:
    """``mode`` is ``"hashed"`` (trainable bucket table) or ``"table"`` (frozen, from file)."""

    mode: str = "hashed"
    vocab_buckets: int = 4096
    embed_dim: int = 128
    table_path: str | None = None
    lowercase: bool = True

    def __post_init__(self):
        if self.mode not in ("hashed", "table"):
            raise ValueError(f"unknown text encoder mode {self.mode!r}")
        if self.mode == "hashed" and self.vocab_buckets < 2:
            raise ValueError("vocab_buckets must be >= 2")
        if self.mode == "hashed" and self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        if self.mode == "table" and not self.table_path:
            raise ValueError("table mode needs table_path")


def hash_token(token: str, buckets: int) -> int:
    """Stable bucket id in ``[1, buckets)``; 0 is reserved."""
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return 1 + int.from_bytes(digest, "little") % (buckets - 1)


@functools.lru_cache(maxsize=65536)
def _tokenize_cached(text: str, buckets: int, lowercase: bool) -> tuple[int, ...]:
    if lowercase:
        text = text.lower()
    pieces = _TOKEN_RE.findall(text)
    if not pieces:
        return (0,)
    return tuple(hash_token(p, buckets) for p in pieces)


def tokenize(text: str, spec: TextEncoderSpec, vocab_size: int | None = None) -> list[int]:
    buckets = vocab_size if vocab_size is not None else spec.vocab_buckets
    return list(_tokenize_cached(text, buckets, spec.lowercase))


# --- embedding table files ------------------------------------------------------


def save_embedding_table(path, table: np.ndarray) -> None:
    """Header line ``{"vocab_size": V, "embed_dim": D}`` then V*D little-endian float32."""
    table = np.asarray(table, dtype="<f4")
    if table.ndim != 2:
        raise ValueError("embedding table must be 2-D")
    header = json.dumps({"vocab_size": table.shape[0], "embed_dim": table.shape[1]})
    with open(path, "wb") as fh:
        fh.write(header.encode() + b"\n")
        fh.write(table.tobytes(order="C"))


def load_embedding_table(path) -> np.ndarray:
    with open(path, "rb") as fh:
        meta = json.loads(fh.readline())
        blob = fh.read()
    v, d = int(meta["vocab_size"]), int(meta["embed_dim"])
    arr = np.frombuffer(blob, dtype="<f4")
    if arr.size != v * d:
        raise ValueError(f"{path}: expected {v * d} floats, found {arr.size}")
    return arr.reshape(v, d).astype(np.float32)


# --- batches ------------------------------------------------------------------------


@dataclass
class EncodedRowBatch:
    names: Tensor  # B x C x L_in x D
    values: Tensor  # B x C x L_in x D
    name_mask: np.ndarray  # B x C x L_in, True = keep
    value_mask: np.ndarray
    columns: tuple[str, ...]  # column order along axis 1

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.names.shape


def _is_number(value) -> bool:
    return isinstance(value, (int, float, np.integer, np.floating)) and not isinstance(value, bool)


class RowEncoder(Module):
    """Embeds column names and cell values into a shared D-dimensional space."""

    def __init__(self, dim: int, smr: SmrConfig, text: TextEncoderSpec, rng: np.random.Generator):
        self.smr = smr
        self.text_spec = text
        if text.mode == "hashed":
            table = rng.normal(0.0, 1.0, size=(text.vocab_buckets, text.embed_dim))
            self.token_table = Parameter(table)
            self.frozen_table = None
        else:
            self.token_table = None
            self.frozen_table = Tensor(load_embedding_table(text.table_path), dtype=get_default_dtype())
        vocab, txt_dim = self._table().shape
        self.vocab_size = vocab
        self.text_proj = Linear(txt_dim, dim, rng)
        self.number_proj = Linear(smr.width, dim, rng)
        self.missing_token = Parameter(rng.normal(0.0, 1.0, size=(1, dim)))
        self.dim = dim

    def _table(self) -> Tensor:
        return self.token_table if self.token_table is not None else self.frozen_table

    def astype(self, dtype):
        super().astype(dtype)
        if self.frozen_table is not None:
            self.frozen_table = Tensor(self.frozen_table.data.astype(dtype))
        return self

    def tokenize(self, text: str) -> list[int]:
        return tokenize(text, self.text_spec, self.vocab_size)

    def embed_text(self, tokens: Sequence[int]) -> Tensor:
        return self.text_proj(embedding(self._table(), np.asarray(tokens, dtype=np.int64)))

    def embed_number(self, v: float) -> Tensor:
        if not math.isfinite(v):
            raise ValueError("embed_number needs a finite value; use embed_missing for NaN")
        bits = smr_encode_many(np.array([v]), self.smr).astype(self.number_proj.weight.dtype)
        return self.number_proj(Tensor(bits))

    def embed_missing(self) -> Tensor:
        return mul(self.missing_token, 1.0)

    def encode(self, rows: Sequence[Row], columns: Sequence[str] | None = None) -> EncodedRowBatch:
        if not rows:
            raise ValueError("cannot encode an empty batch")
        if columns is None:
            columns = tuple(rows[0].keys())
        columns = tuple(columns)
        if not columns:
            raise ValueError("rows have no columns")
        colset = set(columns)
        if len(colset) != len(columns) or any(not c for c in columns):
            raise ValueError("column names must be unique and non-empty")
        for row in rows:
            if set(row.keys()) != colset:
                raise ValueError("inconsistent column sets within the batch")

        b, c = len(rows), len(columns)
        dtype = self.text_proj.weight.dtype
        name_tokens = [self.tokenize(col) for col in columns]

        kinds = np.zeros((b, c), dtype=np.int8)  # 0 number, 1 text, 2 missing
        numbers = np.zeros((b, c), dtype=np.float64)
        value_tokens: dict[tuple[int, int], list[int]] = {}
        for i, row in enumerate(rows):
            for j, col in enumerate(columns):
                v = row[col]
                if v is None:
                    kinds[i, j] = 2
                elif isinstance(v, str):
                    kinds[i, j] = 1
                    value_tokens[i, j] = self.tokenize(v)
                elif _is_number(v):
                    if not math.isfinite(float(v)):
                        raise ValueError(f"non-finite number in column {col!r}; use None for missing")
                    numbers[i, j] = float(v)
                else:
                    raise TypeError(f"unsupported cell type {type(v).__name__} in column {col!r}")

        length = max(len(t) for t in name_tokens)
        if value_tokens:
            length = max(length, max(len(t) for t in value_tokens.values()))

        name_ids = np.zeros((c, length), dtype=np.int64)
        name_keep = np.zeros((c, length), dtype=bool)
        for j, toks in enumerate(name_tokens):
            name_ids[j, : len(toks)] = toks
            name_keep[j, : len(toks)] = True
        names_c = mul(self.embed_text(name_ids), name_keep[..., None].astype(dtype))
        names = broadcast_to(names_c, (b, c, length, self.dim))
        name_mask = np.broadcast_to(name_keep, (b, c, length)).copy()

        first = np.zeros((b, c, length), dtype=bool)
        first[..., 0] = True
        is_num = kinds == 0
        is_missing = kinds == 2
        value_mask = first & (is_num | is_missing)[..., None]

        bits = smr_encode_many(numbers, self.smr).astype(dtype)
        num_part = mul(self.number_proj(Tensor(bits)), is_num[..., None].astype(dtype))
        miss_part = mul(self.missing_token, is_missing[..., None].astype(dtype))
        single = add(num_part, miss_part).reshape(b, c, 1, self.dim)
        if length > 1:
            pad = Tensor(np.zeros((b, c, length - 1, self.dim), dtype=dtype))
            single = concat([single, pad], axis=2)
        values = single

        if value_tokens:
            text_ids = np.zeros((b, c, length), dtype=np.int64)
            text_keep = np.zeros((b, c, length), dtype=bool)
            for (i, j), toks in value_tokens.items():
                text_ids[i, j, : len(toks)] = toks
                text_keep[i, j, : len(toks)] = True
            text_part = mul(self.embed_text(text_ids), text_keep[..., None].astype(dtype))
            values = add(values, text_part)
            value_mask |= text_keep

        return EncodedRowBatch(names, values, name_mask, value_mask, columns)
