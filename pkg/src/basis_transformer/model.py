"""Basis transformer: stacked blocks of basis compression, latent mixture,
latent compression, latent contextualization and latent decompression."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import (
    LayerNorm,
    Linear,
    MLP,
    Module,
    MultiHeadAttention,
    Parameter,
    Tensor,
    broadcast_to,
    dropout,
    mean,
    no_grad,
)
from .encoder import EncodedRowBatch, Row, RowEncoder, TextEncoderSpec
from .smr import SmrConfig, smr_decode_logits_many

HEAD_MODES = ("smr", "scalar")


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 144
    n_blocks: int = 4
    n_heads: int = 8
    n_basis: int = 64
    ratio: int = 6
    n_ctx_layers: int = 9
    dropout: float = 0.0
    mlp_ratio: int = 4
    smr: SmrConfig = field(default_factory=lambda: SmrConfig(29, 14))
    head: str = "smr"

    def __post_init__(self):
        if self.dim < 1 or self.n_heads < 1 or self.dim % self.n_heads:
            raise ValueError(f"dim ({self.dim}) must be a positive multiple of n_heads ({self.n_heads})")
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.n_basis < 1:
            raise ValueError("n_basis must be >= 1")
        if self.ratio < 1:
            raise ValueError("ratio must be >= 1")
        if self.n_ctx_layers < 0:
            raise ValueError("n_ctx_layers must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.mlp_ratio < 1:
            raise ValueError("mlp_ratio must be >= 1")
        if self.head not in HEAD_MODES:
            raise ValueError(f"head must be one of {HEAD_MODES}")

    @property
    def out_dim(self) -> int:
        return self.smr.width if self.head == "smr" else 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["smr"] = {"h": self.smr.h, "l": self.smr.l}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if isinstance(d.get("smr"), dict):
            d["smr"] = SmrConfig(**d["smr"])
        return cls(**d)


@dataclass
class ForwardContext:
    """Dropout switch and the counter that keys its random masks."""

    train: bool = False
    seed: int = 0
    step: int = 0


class _Sublayer(Module):
    """Shared helpers for modules holding residual branches."""

    path = ""

    def _drop(self, x: Tensor, rate: float, ctx: ForwardContext, site: str) -> Tensor:
        return dropout(x, rate, ctx.train, (ctx.seed, ctx.step, f"{self.path}.{site}"))


class BasisCompression(_Sublayer):
    """Pre-norm cross attention from basis queries onto one input sequence, then an MLP."""

    def __init__(self, dim: int, n_heads: int, mlp_ratio: int, rate: float, rng):
        self.norm_q = LayerNorm(dim)
        self.norm_kv = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, n_heads, rng)
        self.norm_mlp = LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio * dim, rng)
        self.rate = rate

    def __call__(self, q: Tensor, x: Tensor, mask=None, ctx: ForwardContext | None = None) -> Tensor:
        ctx = ctx or ForwardContext()
        z = q + self._drop(self.attn(self.norm_q(q), self.norm_kv(x), mask), self.rate, ctx, "attn")
        return z + self._drop(self.mlp(self.norm_mlp(z)), self.rate, ctx, "mlp")


class LatentMixture(_Sublayer):
    """Cross attention (names query values) followed by self attention, per column."""

    def __init__(self, dim: int, n_heads: int, rate: float, rng):
        self.norm_col = LayerNorm(dim)
        self.norm_val = LayerNorm(dim)
        self.cross = MultiHeadAttention(dim, n_heads, rng)
        self.norm_self = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, n_heads, rng)
        self.rate = rate

    def __call__(self, z_col: Tensor, z_val: Tensor, ctx: ForwardContext | None = None) -> Tensor:
        ctx = ctx or ForwardContext()
        if z_col.shape != z_val.shape:
            raise ValueError(f"latent mixture needs equal shapes, got {z_col.shape} and {z_val.shape}")
        z = z_col + self._drop(self.cross(self.norm_col(z_col), self.norm_val(z_val)), self.rate, ctx, "cross")
        h = self.norm_self(z)
        return z + self._drop(self.self_attn(h, h), self.rate, ctx, "self")


class LatentCompression(Module):
    def __init__(self, dim: int, n_basis: int, ratio: int, rng):
        self.proj = Linear(n_basis * dim, ratio * dim, rng)

    def __call__(self, z: Tensor) -> Tensor:
        *lead, n, d = z.shape
        return self.proj(z.reshape(*lead, n * d))


class ContextLayer(_Sublayer):
    """Self attention across columns plus a shallow MLP; no positional information."""

    def __init__(self, width: int, n_heads: int, mlp_ratio: int, rate: float, rng):
        self.norm_attn = LayerNorm(width)
        self.attn = MultiHeadAttention(width, n_heads, rng)
        self.norm_mlp = LayerNorm(width)
        self.mlp = MLP(width, mlp_ratio * width, rng)
        self.rate = rate

    def __call__(self, x: Tensor, ctx: ForwardContext | None = None) -> Tensor:
        ctx = ctx or ForwardContext()
        h = self.norm_attn(x)
        x = x + self._drop(self.attn(h, h), self.rate, ctx, "attn")
        return x + self._drop(self.mlp(self.norm_mlp(x)), self.rate, ctx, "mlp")


class LatentContext(Module):
    def __init__(self, width: int, n_heads: int, n_layers: int, mlp_ratio: int, rate: float, rng):
        self.layers = [ContextLayer(width, n_heads, mlp_ratio, rate, rng) for _ in range(n_layers)]

    def __call__(self, x: Tensor, ctx: ForwardContext | None = None) -> Tensor:
        for layer in self.layers:
            x = layer(x, ctx)
        return x


class _DecompBranch(_Sublayer):
    def __init__(self, dim: int, mlp_ratio: int, rate: float, rng):
        self.norm = LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio * dim, rng)
        self.rate = rate

    def __call__(self, u: Tensor, ctx: ForwardContext) -> Tensor:
        return u + self._drop(self.mlp(self.norm(u)), self.rate, ctx, "mlp")


class LatentDecompression(Module):
    """Up-project back to ``n_basis`` vectors, then one branch per output sequence."""

    def __init__(self, dim: int, n_basis: int, ratio: int, n_outputs: int, mlp_ratio: int, rate: float, rng):
        self.dim, self.n_basis = dim, n_basis
        self.up = Linear(ratio * dim, n_basis * dim, rng)
        self.branches = [_DecompBranch(dim, mlp_ratio, rate, rng) for _ in range(n_outputs)]

    def __call__(self, x: Tensor, ctx: ForwardContext | None = None) -> tuple[Tensor, ...]:
        ctx = ctx or ForwardContext()
        *lead, _ = x.shape
        u = self.up(x).reshape(*lead, self.n_basis, self.dim)
        return tuple(branch(u, ctx) for branch in self.branches)


class BTBlock(Module):
    def __init__(self, cfg: ModelConfig, final: bool, rng):
        d, rd = cfg.dim, cfg.ratio * cfg.dim
        self.final = final
        self.comp_col = BasisCompression(d, cfg.n_heads, cfg.mlp_ratio, cfg.dropout, rng)
        self.comp_val = BasisCompression(d, cfg.n_heads, cfg.mlp_ratio, cfg.dropout, rng)
        self.mix = LatentMixture(d, cfg.n_heads, cfg.dropout, rng)
        self.compress = LatentCompression(d, cfg.n_basis, cfg.ratio, rng)
        self.context = LatentContext(rd, cfg.n_heads, cfg.n_ctx_layers, cfg.mlp_ratio, cfg.dropout, rng)
        self.decompress = LatentDecompression(
            d, cfg.n_basis, cfg.ratio, 1 if final else 2, cfg.mlp_ratio, cfg.dropout, rng
        )

    def __call__(self, q_col, q_val, batch: EncodedRowBatch, ctx: ForwardContext | None = None):
        ctx = ctx or ForwardContext()
        z_col = self.comp_col(q_col, batch.names, batch.name_mask, ctx)
        z_val = self.comp_val(q_val, batch.values, batch.value_mask, ctx)
        z = self.mix(z_col, z_val, ctx)
        return self.decompress(self.context(self.compress(z), ctx), ctx)


class BasisTransformer(Module):
    def __init__(self, cfg: ModelConfig, text: TextEncoderSpec | None = None, seed: int = 0, dtype=None):
        from .autodiff import default_dtype, get_default_dtype

        self.cfg = cfg
        self.text_spec = text or TextEncoderSpec()
        rng = np.random.default_rng(seed)
        with default_dtype(dtype or get_default_dtype()):
            self.encoder = RowEncoder(cfg.dim, cfg.smr, self.text_spec, rng)
            scale = 1.0 / math.sqrt(cfg.dim)
            self.basis_col = Parameter(rng.normal(0.0, scale, size=(cfg.n_basis, cfg.dim)))
            self.basis_val = Parameter(rng.normal(0.0, scale, size=(cfg.n_basis, cfg.dim)))
            self.blocks = [BTBlock(cfg, i == cfg.n_blocks - 1, rng) for i in range(cfg.n_blocks)]
            self.down = Linear(cfg.n_basis * cfg.dim, cfg.dim, rng)
            self.head = Linear(cfg.dim, cfg.out_dim, rng)
        self.ctx = ForwardContext()
        self._assign_paths(self, "")

    @staticmethod
    def _assign_paths(module: Module, prefix: str) -> None:
        module.path = prefix.rstrip(".")
        for attr, value in vars(module).items():
            if isinstance(value, Module):
                BasisTransformer._assign_paths(value, f"{prefix}{attr}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        BasisTransformer._assign_paths(item, f"{prefix}{attr}.{i}.")

    @property
    def dtype(self):
        return self.head.weight.dtype

    def encode(self, rows: Sequence[Row], columns=None) -> EncodedRowBatch:
        return self.encoder.encode(rows, columns)

    def forward(self, batch: EncodedRowBatch) -> Tensor:
        b, c, _, d = batch.names.shape
        if c == 0:
            raise ValueError("batch has no columns")
        ctx = self.ctx
        shape = (b, c, self.cfg.n_basis, d)
        q_col = broadcast_to(self.basis_col, shape)
        q_val = broadcast_to(self.basis_val, shape)
        for block in self.blocks:
            out = block(q_col, q_val, batch, ctx)
            if block.final:
                (z,) = out
            else:
                q_col, q_val = out
        pooled = mean(z, axis=1)
        flat = pooled.reshape(b, self.cfg.n_basis * d)
        return self.head(self.down(flat))

    __call__ = forward

    def predict(self, rows: Sequence[Row], batch_size: int = 256) -> np.ndarray:
        """Decoded scalar predictions for ``rows`` (evaluation mode, no graph)."""
        preds = []
        prev_train = self.ctx.train
        self.ctx.train = False
        try:
            with no_grad():
                for start in range(0, len(rows), batch_size):
                    logits = self.forward(self.encode(rows[start : start + batch_size])).data
                    preds.append(self.decode(logits))
        finally:
            self.ctx.train = prev_train
        return np.concatenate(preds) if preds else np.zeros(0)

    def decode(self, logits: np.ndarray) -> np.ndarray:
        if self.cfg.head == "scalar":
            return logits[:, 0].astype(np.float64)
        return smr_decode_logits_many(logits, self.cfg.smr)


def count_parameters(cfg: ModelConfig, text: TextEncoderSpec | None = None, text_dim: int | None = None) -> int:
    """Closed-form trainable parameter count of :class:`BasisTransformer`."""
    text = text or TextEncoderSpec()
    d, rd, m = cfg.dim, cfg.ratio * cfg.dim, cfg.mlp_ratio

    def lin(i, o):
        return i * o + o

    def ln(n):
        return 2 * n

    def mha(n):
        return 4 * lin(n, n)

    def mlp(n):
        return lin(n, m * n) + lin(m * n, n)

    if text.mode == "hashed":
        t_dim, table = text.embed_dim, text.vocab_buckets * text.embed_dim
    else:
        if text_dim is None:
            raise ValueError("table mode needs text_dim")
        t_dim, table = text_dim, 0
    encoder = table + lin(t_dim, d) + lin(cfg.smr.width, d) + d

    comp = 2 * ln(d) + mha(d) + ln(d) + mlp(d)
    mix = 2 * ln(d) + mha(d) + ln(d) + mha(d)
    context = cfg.n_ctx_layers * (ln(rd) + mha(rd) + ln(rd) + mlp(rd))
    branch = ln(d) + mlp(d)

    def block(final):
        n_out = 1 if final else 2
        return 2 * comp + mix + lin(cfg.n_basis * d, rd) + context + lin(rd, cfg.n_basis * d) + n_out * branch

    blocks = sum(block(i == cfg.n_blocks - 1) for i in range(cfg.n_blocks))
    return encoder + 2 * cfg.n_basis * d + blocks + lin(cfg.n_basis * d, d) + lin(d, cfg.out_dim)


# --- checkpoints ---------------------------------------------------------------------

_MAGIC = b"BTCKPT1\n"


def save_checkpoint(model: BasisTransformer, path, extra: dict | None = None) -> None:
    """Manifest (JSON) of parameter names/shapes/offsets, then one little-endian blob.

    The blob keeps the model's own float width, so reloading is bit-exact.
    """
    entries, chunks, offset = [], [], 0
    dtype = np.dtype(model.dtype).newbyteorder("<")
    for name, p in model.named_parameters():
        arr = np.ascontiguousarray(p.data, dtype=dtype)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    text = model.text_spec
    manifest = {
        "model": model.cfg.to_dict(),
        "smr": {"h": model.cfg.smr.h, "l": model.cfg.smr.l},
        "text": {
            "mode": text.mode,
            "vocab_buckets": text.vocab_buckets,
            "embed_dim": text.embed_dim,
            "table_path": text.table_path,
            "lowercase": text.lowercase,
        },
        "parameters": entries,
        "count": offset,
        "dtype": np.dtype(model.dtype).name,
        "extra": extra or {},
    }
    header = json.dumps(manifest, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(f"{len(header)}\n".encode())
        fh.write(header)
        fh.writelines(chunks)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.readline() != _MAGIC:
            raise ValueError(f"{path} is not a basis transformer checkpoint")
        n = int(fh.readline())
        manifest = json.loads(fh.read(n))
        dtype = np.dtype(manifest.get("dtype", "float32")).newbyteorder("<")
        blob = np.frombuffer(fh.read(), dtype=dtype)
    if blob.size != manifest["count"]:
        raise ValueError(f"{path}: truncated parameter blob")
    state = {}
    for e in manifest["parameters"]:
        size = int(np.prod(e["shape"])) if e["shape"] else 1
        state[e["name"]] = blob[e["offset"] : e["offset"] + size].reshape(e["shape"])
    return manifest, state


def load_checkpoint(path, dtype=None) -> tuple[BasisTransformer, dict]:
    """Rebuild a model from ``path``; ``dtype`` defaults to the stored precision."""
    manifest, state = read_checkpoint(path)
    dtype = dtype or np.dtype(manifest.get("dtype", "float32"))
    cfg = ModelConfig.from_dict(manifest["model"])
    text = TextEncoderSpec(**manifest["text"])
    model = BasisTransformer(cfg, text, seed=0, dtype=dtype)
    model.load_state_dict(state)
    return model, manifest.get("extra", {})
