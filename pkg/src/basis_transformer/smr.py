"""Sign-magnitude representation (SMR) of real scalars.

A value is stored as ``[a0, a1, ..., a_{h+l}]`` where ``a0`` is the sign bit,
``a1..a_h`` are the coefficients of ``2^{h-1}..2^0`` and the remaining ``l``
bits are the coefficients of ``2^{-1}..2^{-l}``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


class SmrSaturationWarning(UserWarning):
    """Emitted when a magnitude exceeds the largest representable value."""


_saturated = 0


def saturation_count() -> int:
    """Number of values clipped to the maximum magnitude since the last reset."""
    return _saturated


def reset_saturation_count() -> None:
    global _saturated
    _saturated = 0


@dataclass(frozen=True)
class SmrConfig:
    h: int
    l: int

    def __post_init__(self):
        if int(self.h) != self.h or self.h < 1:
            raise ValueError(f"h must be an integer >= 1, got {self.h!r}")
        if int(self.l) != self.l or self.l < 0:
            raise ValueError(f"l must be an integer >= 0, got {self.l!r}")
        if self.h + self.l > 62:
            raise ValueError("h + l must not exceed 62 bits")

    @property
    def width(self) -> int:
        return 1 + self.h + self.l

    @property
    def weights(self) -> np.ndarray:
        """Magnitude weight of each non-sign bit, highest first."""
        return np.ldexp(1.0, np.arange(self.h - 1, -self.l - 1, -1))


def smr_max_value(cfg: SmrConfig) -> float:
    return 2.0**cfg.h - 2.0 ** (-cfg.l)


def _grid_magnitudes(values: np.ndarray, cfg: SmrConfig) -> np.ndarray:
    # integer count of 2^-l steps, rounded half away from zero
    scaled = np.ldexp(np.abs(values), cfg.l)
    steps = np.floor(scaled + 0.5)
    top = float(2 ** (cfg.h + cfg.l) - 1)
    over = steps > top
    n_over = int(over.sum())
    if n_over:
        global _saturated
        _saturated += n_over
        warnings.warn(
            f"{n_over} value(s) exceed the SMR range {smr_max_value(cfg)}; saturated",
            SmrSaturationWarning,
            stacklevel=3,
        )
        steps = np.where(over, top, steps)
    return steps.astype(np.int64)


def smr_encode_many(values, cfg: SmrConfig) -> np.ndarray:
    """Vectorised encoder: ``(...,)`` reals to ``(..., 1+h+l)`` uint8 bits."""
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("cannot SMR-encode non-finite values; route them as missing")
    steps = _grid_magnitudes(values, cfg)
    shifts = np.arange(cfg.h + cfg.l - 1, -1, -1, dtype=np.int64)
    mag_bits = (steps[..., None] >> shifts) & 1
    sign = ((values < 0) & (steps > 0)).astype(np.int64)
    return np.concatenate([sign[..., None], mag_bits], axis=-1).astype(np.uint8)


def smr_encode(v: float, cfg: SmrConfig) -> np.ndarray:
    """Encode a single finite scalar into its ``1+h+l`` bit vector."""
    v = float(v)
    if not np.isfinite(v):
        raise ValueError(f"cannot SMR-encode {v!r}; route it as a missing value")
    return smr_encode_many(np.array(v), cfg)


def _check_width(bits: np.ndarray, cfg: SmrConfig) -> None:
    if bits.shape[-1] != cfg.width:
        raise ValueError(f"expected {cfg.width} bits, got {bits.shape[-1]}")


def smr_decode_many(bits, cfg: SmrConfig) -> np.ndarray:
    bits = np.asarray(bits)
    _check_width(bits, cfg)
    if not np.all((bits == 0) | (bits == 1)):
        raise ValueError("bits must be 0 or 1")
    mag = bits[..., 1:].astype(np.float64) @ cfg.weights
    out = np.where(bits[..., 0] == 1, -mag, mag)
    # canonicalise -0.0
    return out + 0.0


def smr_decode(bits, cfg: SmrConfig) -> float:
    return float(smr_decode_many(np.asarray(bits)[None], cfg)[0])


def smr_decode_probs_many(probs, cfg: SmrConfig) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    _check_width(probs, cfg)
    if np.any(probs < 0) or np.any(probs > 1) or np.any(np.isnan(probs)):
        raise ValueError("probabilities must lie in [0, 1]")
    return smr_decode_many((probs > 0.5).astype(np.uint8), cfg)


def smr_decode_probs(probs, cfg: SmrConfig) -> float:
    return float(smr_decode_probs_many(np.asarray(probs)[None], cfg)[0])


def smr_decode_logits_many(logits, cfg: SmrConfig) -> np.ndarray:
    """Decode raw head outputs; ``sigmoid(z) > 0.5`` is exactly ``z > 0``."""
    logits = np.asarray(logits)
    _check_width(logits, cfg)
    return smr_decode_many((logits > 0).astype(np.uint8), cfg)


def bits_to_string(bits) -> str:
    return "".join(str(int(b)) for b in np.asarray(bits).ravel())


def bits_from_string(text: str) -> np.ndarray:
    text = text.strip()
    if not text or set(text) - {"0", "1"}:
        raise ValueError(f"not a bit string: {text!r}")
    return np.array([int(c) for c in text], dtype=np.uint8)
