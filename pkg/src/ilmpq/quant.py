"""Fixed-point and power-of-two (PoT) quantizers at scalar, row and matrix level.

Fixed-point codes are symmetric signed integers in ``[-(2^(b-1)-1), 2^(b-1)-1]``
and dequantize to ``code * scale``.

PoT codes pack a sign bit above a magnitude field.  For 4 bits the field holds
an exponent index ``k`` in ``[0, 6]`` (magnitude ``2^-k``) or the sentinel ``7``
meaning zero, so a code dequantizes to ``+-scale * 2^-k`` or to ``0``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, DomainError, UnsupportedConfigError

__all__ = [
    "QuantScheme", "QuantConfig", "PotCodebook", "QuantizedRow", "RowKind",
    "fixed_qmax", "pot_codebook", "pot_zero_code", "round_half_away",
    "fixed_quantize", "fixed_dequantize", "pot_quantize", "pot_dequantize",
    "pot_unpack", "row_scale", "quantize_row", "dequantize_row",
    "quantize_matrix", "dequantize_matrix", "fake_quantize_matrix",
]

POT_BITS = 4


class QuantScheme(str, enum.Enum):
    FIXED = "fixed"
    POT = "pot"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class QuantConfig:
    scheme: QuantScheme
    bits: int
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "scheme", QuantScheme(self.scheme))
        if self.bits not in (4, 8):
            raise UnsupportedConfigError(f"bits must be 4 or 8, got {self.bits}")
        if self.scheme is QuantScheme.POT and self.bits != POT_BITS:
            raise UnsupportedConfigError("PoT quantization is only defined for 4 bits")
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise DomainError(f"scale must be positive and finite, got {self.scale}")


class RowKind(str, enum.Enum):
    """The three per-row (scheme, bits) combinations a layer may mix."""

    POT4 = "pot4"
    FIXED4 = "fixed4"
    FIXED8 = "fixed8"

    @property
    def scheme(self) -> QuantScheme:
        return QuantScheme.POT if self is RowKind.POT4 else QuantScheme.FIXED

    @property
    def bits(self) -> int:
        return 8 if self is RowKind.FIXED8 else 4

    def config(self, scale: float = 1.0) -> QuantConfig:
        return QuantConfig(self.scheme, self.bits, scale)

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class PotCodebook:
    bits: int
    levels: tuple[float, ...]


@dataclass(frozen=True)
class QuantizedRow:
    config: QuantConfig
    codes: np.ndarray = field(repr=False)

    def dequantize(self) -> np.ndarray:
        return dequantize_row(self)


def fixed_qmax(bits: int) -> int:
    return (1 << (bits - 1)) - 1


def pot_zero_code(bits: int = POT_BITS) -> int:
    return (1 << (bits - 1)) - 1


def pot_codebook(bits: int) -> PotCodebook:
    """Unsigned PoT magnitudes ``{0} U {2^-k : k = 0 .. 2^(bits-1) - 2}``, ascending."""
    if bits != POT_BITS:
        raise UnsupportedConfigError(f"PoT codebook only supports {POT_BITS} bits, got {bits}")
    kmax = (1 << (bits - 1)) - 2
    levels = (0.0,) + tuple(math.ldexp(1.0, -k) for k in range(kmax, -1, -1))
    return PotCodebook(bits, levels)


_POT_LEVELS = np.array(pot_codebook(POT_BITS).levels)
# decision thresholds between adjacent levels; all exact in binary
_POT_MIDPOINTS = (_POT_LEVELS[:-1] + _POT_LEVELS[1:]) / 2


def round_half_away(v):
    """Round to nearest integer, ties away from zero (exact, no ``+0.5`` drift)."""
    a = np.abs(v)
    f = np.floor(a)
    r = np.where(a - f >= 0.5, f + 1.0, f)
    return np.copysign(r, v)


def _check_finite(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DomainError("input contains non-finite values")
    return arr


def _maybe_scalar(arr: np.ndarray, like):
    if np.ndim(like) == 0:
        return arr.item()
    return arr


def _fixed_codes(scaled: np.ndarray, bits: int) -> np.ndarray:
    q = fixed_qmax(bits)
    return np.clip(round_half_away(scaled), -q, q).astype(np.int64)


def _pot_codes(scaled: np.ndarray) -> np.ndarray:
    # scaled = x / scale; the sign of -0.0 is dropped so it matches +0.0
    idx = np.searchsorted(_POT_MIDPOINTS, np.abs(scaled), side="right")
    zero = idx == 0
    field_ = np.where(zero, pot_zero_code(), len(_POT_LEVELS) - 1 - idx)
    sign = (scaled < 0) & ~zero
    return (sign.astype(np.int64) << (POT_BITS - 1)) | field_.astype(np.int64)


def fixed_quantize(x, config: QuantConfig):
    """Symmetric uniform quantizer: ``clamp(round(x / scale))`` with ties away from zero."""
    if config.scheme is not QuantScheme.FIXED:
        raise ContractViolation("fixed_quantize needs a fixed-point config")
    arr = _check_finite(x)
    return _maybe_scalar(_fixed_codes(arr / config.scale, config.bits), x)


def fixed_dequantize(code, config: QuantConfig):
    if config.scheme is not QuantScheme.FIXED:
        raise ContractViolation("fixed_dequantize needs a fixed-point config")
    c = np.asarray(code)
    q = fixed_qmax(config.bits)
    if np.any(np.abs(c) > q):
        raise ContractViolation(f"fixed code outside [-{q}, {q}]")
    return _maybe_scalar(c.astype(np.float64) * config.scale, code)


def pot_quantize(x, config: QuantConfig):
    """Nearest PoT level to ``|x| / scale`` (ties toward the larger magnitude), packed with sign."""
    if config.scheme is not QuantScheme.POT:
        raise ContractViolation("pot_quantize needs a PoT config")
    arr = _check_finite(x)
    return _maybe_scalar(_pot_codes(arr / config.scale), x)


def pot_unpack(code):
    """Split packed PoT codes into ``(sign, k)`` with ``k = -1`` for zero."""
    c = np.asarray(code, dtype=np.int64)
    if np.any((c < 0) | (c >= 1 << POT_BITS)):
        raise ContractViolation("PoT code outside the 4-bit range")
    sign = (c >> (POT_BITS - 1)) & 1
    k = c & pot_zero_code()
    k = np.where(k == pot_zero_code(), -1, k)
    return sign, k


def pot_dequantize(code, config: QuantConfig):
    if config.scheme is not QuantScheme.POT:
        raise ContractViolation("pot_dequantize needs a PoT config")
    sign, k = pot_unpack(code)
    mag = np.where(k < 0, 0.0, np.ldexp(1.0, -np.maximum(k, 0)))
    val = np.where(sign == 1, -mag, mag) * config.scale
    return _maybe_scalar(val, code)


def row_scale(weights, scheme: QuantScheme, bits: int) -> float:
    """Per-row scale putting the top quantization level exactly on ``max|w|``.

    An all-zero row gets scale 1.0 (any positive value yields all-zero codes).
    """
    m = float(np.max(np.abs(weights)))
    if m == 0.0:
        return 1.0
    if QuantScheme(scheme) is QuantScheme.POT:
        return m
    return m / fixed_qmax(bits)


def quantize_row(weights, scheme: QuantScheme, bits: int, scale: float | None = None) -> QuantizedRow:
    w = _check_finite(weights).ravel()
    if w.size == 0:
        raise DomainError("cannot quantize an empty row")
    if scale is None:
        scale = row_scale(w, scheme, bits)
    config = QuantConfig(scheme, bits, scale)
    if config.scheme is QuantScheme.POT:
        codes = pot_quantize(w, config)
    else:
        codes = fixed_quantize(w, config)
    return QuantizedRow(config, codes)


def dequantize_row(row: QuantizedRow) -> np.ndarray:
    if row.config.scheme is QuantScheme.POT:
        return pot_dequantize(row.codes, row.config)
    return fixed_dequantize(row.codes, row.config)


def _kind_masks(kinds) -> dict:
    names = np.array([RowKind(k).value for k in kinds])
    return {kind: names == kind.value for kind in RowKind}


def _row_scales(w2d: np.ndarray, masks: dict) -> np.ndarray:
    m = np.abs(w2d).max(axis=1)
    denom = np.where(masks[RowKind.POT4], 1.0,
                     np.where(masks[RowKind.FIXED8], fixed_qmax(8), fixed_qmax(4)))
    return np.where(m == 0.0, 1.0, m / denom)


def quantize_matrix(w2d: np.ndarray, kinds, scales=None) -> tuple[np.ndarray, np.ndarray]:
    """Quantize each row of ``w2d`` under its ``RowKind``; returns ``(codes, scales)``.

    Row scales follow :func:`row_scale` unless given explicitly.
    """
    w2d = _check_finite(w2d)
    kinds = list(kinds)
    if w2d.ndim != 2 or len(kinds) != w2d.shape[0]:
        raise ContractViolation("need one RowKind per matrix row")
    masks = _kind_masks(kinds)
    scales = _row_scales(w2d, masks) if scales is None else np.asarray(scales, dtype=np.float64)
    scaled = w2d / scales[:, None]
    codes = np.empty(w2d.shape, dtype=np.int64)
    for kind, sel in masks.items():
        if not sel.any():
            continue
        if kind is RowKind.POT4:
            codes[sel] = _pot_codes(scaled[sel])
        else:
            codes[sel] = _fixed_codes(scaled[sel], kind.bits)
    return codes, scales


def dequantize_matrix(codes: np.ndarray, kinds, scales: np.ndarray) -> np.ndarray:
    masks = _kind_masks(kinds)
    out = codes.astype(np.float64)
    pot = masks[RowKind.POT4]
    if pot.any():
        sign, k = pot_unpack(codes[pot])
        mag = np.where(k < 0, 0.0, np.ldexp(1.0, -np.maximum(k, 0)))
        out[pot] = np.where(sign == 1, -mag, mag)
    return out * np.asarray(scales, dtype=np.float64)[:, None]


def fake_quantize_matrix(w2d: np.ndarray, kinds, scales=None) -> tuple[np.ndarray, np.ndarray]:
    """Quantize-dequantize every row; also returns the straight-through pass mask.

    The mask is True where ``|w|`` does not exceed the row's top level, i.e. where
    the straight-through estimator lets the gradient through.
    """
    masks = _kind_masks(kinds)
    codes, scales = quantize_matrix(w2d, kinds, scales)
    top = np.where(masks[RowKind.POT4], 1.0,
                   np.where(masks[RowKind.FIXED8], fixed_qmax(8), fixed_qmax(4)))
    # relative slack: max|w| / scale can land one ulp above the top level
    mask = np.abs(w2d / scales[:, None]) <= top[:, None] * (1 + 1e-9)
    return dequantize_matrix(codes, kinds, scales), mask
