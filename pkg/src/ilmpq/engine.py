"""Integer-only inference with a shift-add kernel for PoT rows and a multiply kernel for fixed rows.

Each weight layer is split by scheme: PoT rows go through :func:`gemm_pot`
(shifts, adds and negation only, accumulators pre-scaled by ``2^6``) and fixed
rows through :func:`gemm_fixed` (exact int64 multiply-accumulate).  Both
accumulator families are rescaled to reals, biased and requantized onto the
activation grid; row order is restored from ``row_index``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import conv_output_size, im2col
from .errors import ContractViolation, StateError
from .model import WEIGHT_KINDS, Model, quantize_activation
from .quant import (QuantScheme, RowKind, fixed_qmax, pot_unpack, quantize_matrix,
                    round_half_away)

POT_SHIFT = 6  # 2^6 pre-scale makes every level 2^-k, k <= 6, integral
MAX_INNER = 65536
_INT64_MAX = 2 ** 63 - 1


def accumulator_bound(inner: int, weight_bits: int = 8, act_bits: int = 8) -> int:
    """Largest |accumulator| either kernel can produce for ``inner`` terms."""
    act = fixed_qmax(act_bits)
    return inner * max(fixed_qmax(weight_bits) * act, act << POT_SHIFT)


# 8-bit codes times 8-bit activations over the largest supported inner dim still fit
assert accumulator_bound(MAX_INNER) < _INT64_MAX


@dataclass
class IntActivation:
    codes: np.ndarray
    bits: int
    scale: float

    def __post_init__(self):
        q = fixed_qmax(self.bits)
        if np.any(np.abs(self.codes) > q):
            raise ContractViolation(f"activation codes exceed the {self.bits}-bit range")

    def dequantize(self) -> np.ndarray:
        return self.codes.astype(np.float64) * self.scale


@dataclass
class QuantizedLayer:
    """One weight layer ready for integer execution.

    ``codes[s]`` holds the row stored in slot ``s``; it produces output
    channel ``row_index[s]``.  ``out_scale=None`` marks the final layer, whose
    output stays real-valued.
    """

    kind: str
    assignment: tuple  # RowKind per storage slot
    codes: np.ndarray
    row_scales: np.ndarray
    bias: np.ndarray
    in_scale: float
    out_scale: float | None
    act_bits: int = 4
    relu: bool = False
    weight_shape: tuple = ()
    stride: int = 1
    padding: int = 0
    row_index: np.ndarray = None

    def __post_init__(self):
        self.assignment = tuple(RowKind(k) for k in self.assignment)
        if self.row_index is None:
            self.row_index = np.arange(len(self.assignment))
        if self.codes.shape[0] != len(self.assignment):
            raise ContractViolation("one assignment entry per stored row required")
        if self.codes.shape[1] > MAX_INNER:
            raise ContractViolation(f"inner dimension {self.codes.shape[1]} exceeds {MAX_INNER}")

    @property
    def rows(self) -> int:
        return self.codes.shape[0]

    @property
    def inner(self) -> int:
        return self.codes.shape[1]

    def scheme_mask(self, scheme: QuantScheme) -> np.ndarray:
        return np.array([k.scheme is scheme for k in self.assignment], dtype=bool)


@dataclass
class QuantizedModel:
    ops: list  # QuantizedLayer or (kind, params) tuples for relu / pooling / flatten
    input_shape: tuple
    act_bits: int
    act_clip: float
    op_log: list = field(default_factory=list, repr=False)


def _check_kinds(kinds, scheme: QuantScheme, name: str) -> None:
    if kinds is not None and any(RowKind(k).scheme is not scheme for k in kinds):
        raise ContractViolation(f"{name} got rows of another scheme")


def gemm_fixed(codes: np.ndarray, act: np.ndarray, kinds=None) -> np.ndarray:
    """``acc[r] = sum_j codes[r, j] * act[j]`` in exact int64 arithmetic.

    ``act`` is ``(K,)`` or ``(K, P)``; the result is ``(R,)`` or ``(R, P)``.
    """
    _check_kinds(kinds, QuantScheme.FIXED, "gemm_fixed")
    codes = np.asarray(codes)
    if codes.shape[1] != np.shape(act)[0]:
        raise ContractViolation(f"inner dims differ: {codes.shape[1]} vs {np.shape(act)[0]}")
    if codes.dtype == object or np.asarray(act).dtype == object:
        return codes @ act
    return codes.astype(np.int64) @ np.asarray(act, dtype=np.int64)


def gemm_pot(codes: np.ndarray, act: np.ndarray, kinds=None) -> np.ndarray:
    """Shift-add product of packed PoT rows with integer activations.

    ``acc[r] = sum_j sign[r, j] * (act[j] << (6 - k[r, j]))`` over non-zero codes,
    i.e. ``2^6 * sum_j level[r, j] * act[j]``.  Only selection, left shifts,
    negation and additions touch activation values, so an object-dtype ``act``
    of instrumented integers can verify that no multiply happens.
    """
    _check_kinds(kinds, QuantScheme.POT, "gemm_pot")
    codes = np.asarray(codes)
    act = np.asanyarray(act)  # keep instrumented array subclasses intact
    if codes.shape[1] != act.shape[0]:
        raise ContractViolation(f"inner dims differ: {codes.shape[1]} vs {act.shape[0]}")
    sign, k = pot_unpack(codes)
    if np.any(k > POT_SHIFT):
        raise ContractViolation("PoT exponent out of range")
    vec = act.ndim == 1
    a = act[:, None] if vec else act
    zero = np.zeros((), dtype=a.dtype) if a.dtype != object else 0
    acc = None
    for e in range(POT_SHIFT + 1):
        sel = k == e
        if not sel.any():
            continue
        shifted = a << (POT_SHIFT - e)
        terms = np.where(sign[:, :, None] == 1, -shifted[None], shifted[None])
        part = np.where(sel[:, :, None], terms, zero).sum(axis=1)
        acc = part if acc is None else acc + part
    if acc is None:
        acc = np.zeros((codes.shape[0], a.shape[1]), dtype=np.int64 if a.dtype != object else object)
    return acc[:, 0] if vec else acc


def _as_columns(layer: QuantizedLayer, codes: np.ndarray):
    """Activation codes -> ``(K, N*P)`` columns plus the output spatial shape."""
    if layer.kind == "dense":
        return codes.T, None
    _, kh, kw = layer.weight_shape[1:]
    n, _, h, w = codes.shape
    cols = im2col(codes, kh, kw, layer.stride, layer.padding)  # (N, K, P)
    ho = conv_output_size(h, kh, layer.stride, layer.padding)
    wo = conv_output_size(w, kw, layer.stride, layer.padding)
    return cols.transpose(1, 0, 2).reshape(cols.shape[1], -1), (n, ho, wo)


def layer_preactivation(layer: QuantizedLayer, act: IntActivation) -> np.ndarray:
    """Real-valued ``W x + b`` of one layer (before activation / requantization)."""
    cols, spatial = _as_columns(layer, act.codes)
    if cols.shape[0] != layer.inner:
        raise ContractViolation(f"activation has {cols.shape[0]} inputs, layer expects {layer.inner}")
    out = np.empty((layer.rows, cols.shape[1]))
    pot = layer.scheme_mask(QuantScheme.POT)
    if pot.any():
        acc = gemm_pot(layer.codes[pot], cols)
        out[pot] = acc * (layer.row_scales[pot] * act.scale / (1 << POT_SHIFT))[:, None]
    if (~pot).any():
        acc = gemm_fixed(layer.codes[~pot], cols)
        out[~pot] = acc * (layer.row_scales[~pot] * act.scale)[:, None]
    ordered = np.empty_like(out)
    ordered[layer.row_index] = out
    ordered += layer.bias[:, None]
    if spatial is None:
        return ordered.T
    n, ho, wo = spatial
    return ordered.reshape(layer.rows, n, ho, wo).transpose(1, 0, 2, 3)


def requantize(y: np.ndarray, scale: float, bits: int) -> IntActivation:
    q = fixed_qmax(bits)
    codes = np.clip(round_half_away(y / scale), -q, q).astype(np.int64)
    return IntActivation(codes, bits, scale)


def infer_layer(layer: QuantizedLayer, act: IntActivation) -> IntActivation:
    if layer.out_scale is None:
        raise ContractViolation("final layer has no output scale; use layer_preactivation")
    y = layer_preactivation(layer, act)
    if layer.relu:
        y = np.maximum(y, 0.0)
    return requantize(y, layer.out_scale, layer.act_bits)


def quantize_model(model: Model, frozen: dict | None = None) -> QuantizedModel:
    """Freeze weight codes and scales of an assigned model for integer execution.

    ``frozen`` maps layer index -> ``(codes, row_scales)`` loaded from a
    quantized model file; other layers are quantized from their float weights.
    """
    if not model.is_quantized:
        raise StateError("every weight layer needs an assignment before integer inference")
    step = model.act_clip / fixed_qmax(model.act_bits)
    widx = model.weight_layer_indices()
    ops = []
    skip = set()
    for i, layer in enumerate(model.layers):
        if i in skip:
            continue
        if layer.kind in WEIGHT_KINDS:
            w2 = layer.weight.reshape(layer.weight.shape[0], -1)
            if frozen is not None and i in frozen:
                codes, scales = (np.asarray(a) for a in frozen[i])
                if codes.shape != w2.shape:
                    raise ContractViolation(f"layer {i}: stored codes {codes.shape} != weights {w2.shape}")
            else:
                codes, scales = quantize_matrix(w2, layer.assignment)
            final = i == widx[-1]
            fuse = (not final and i + 1 < len(model.layers) and model.layers[i + 1].kind == "relu")
            if fuse:
                skip.add(i + 1)
            ops.append(QuantizedLayer(
                kind=layer.kind, assignment=tuple(layer.assignment), codes=codes,
                row_scales=scales, bias=layer.bias.copy(), in_scale=step,
                out_scale=None if final else step, act_bits=model.act_bits, relu=fuse,
                weight_shape=layer.weight.shape, stride=getattr(layer, "stride", 1),
                padding=getattr(layer, "padding", 0)))
        elif layer.kind in ("maxpool", "avgpool"):
            ops.append((layer.kind, layer.size))
        else:
            ops.append((layer.kind, None))
    return QuantizedModel(ops, model.input_shape, model.act_bits, model.act_clip)


def frozen_codes(model: Model) -> dict:
    """``{layer index: (codes, row_scales)}`` for every assigned weight layer."""
    out = {}
    for i in model.weight_layer_indices():
        layer = model.layers[i]
        if layer.assignment is not None:
            out[i] = quantize_matrix(layer.weight.reshape(layer.weight.shape[0], -1), layer.assignment)
    return out


def _pool(a: np.ndarray, size: int, reduce) -> np.ndarray:
    n, c, h, w = a.shape
    return reduce(a.reshape(n, c, h // size, size, w // size, size), axis=(3, 5))


def infer(qmodel: QuantizedModel, x) -> np.ndarray:
    """Quantize ``x`` once, run every layer on integer codes, return real logits."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != tuple(qmodel.input_shape):
        raise ContractViolation(f"input shape {x.shape[1:]} != model input {tuple(qmodel.input_shape)}")
    codes, step = quantize_activation(x, qmodel.act_bits, qmodel.act_clip)
    cur: IntActivation | np.ndarray = IntActivation(codes.astype(np.int64), qmodel.act_bits, step)
    for op in qmodel.ops:
        if isinstance(op, QuantizedLayer):
            if not isinstance(cur, IntActivation):
                raise StateError("weight layer after the final layer")
            cur = infer_layer(op, cur) if op.out_scale is not None else layer_preactivation(op, cur)
            continue
        kind, arg = op
        integer = isinstance(cur, IntActivation)
        val = cur.codes if integer else cur
        if kind == "relu":
            val = np.maximum(val, 0)
        elif kind == "maxpool":
            val = _pool(val, arg, np.max)
        elif kind == "flatten":
            val = val.reshape(len(val), -1)
        elif kind == "avgpool":
            real = _pool(val * (cur.scale if integer else 1.0), arg, np.mean)
            cur = requantize(real, cur.scale, cur.bits) if integer else real
            continue
        cur = IntActivation(val, cur.bits, cur.scale) if integer else val
    if isinstance(cur, IntActivation):
        return cur.dequantize()
    return cur


def op_counts(qmodel: QuantizedModel) -> list[dict]:
    """Per weight layer, per sample: MACs by row kind and kernel shift / add / multiply counts.

    Zero PoT codes are skipped by the shift-add kernel, so they cost nothing.
    """
    shape = tuple(qmodel.input_shape)
    report = []
    for op in qmodel.ops:
        if isinstance(op, QuantizedLayer):
            if op.kind == "dense":
                positions = 1
                shape = (op.rows,)
            else:
                _, h, w = shape
                _, kh, kw = op.weight_shape[1:]
                ho = conv_output_size(h, kh, op.stride, op.padding)
                wo = conv_output_size(w, kw, op.stride, op.padding)
                positions = ho * wo
                shape = (op.rows, ho, wo)
            per_kind = {k: 0 for k in RowKind}
            for kind in op.assignment:
                per_kind[kind] += op.inner * positions
            pot = op.scheme_mask(QuantScheme.POT)
            _, k = pot_unpack(op.codes[pot]) if pot.any() else (None, np.zeros((0, 0)))
            live_pot = int((k >= 0).sum()) * positions
            fixed_terms = int((~pot).sum()) * op.inner * positions
            report.append({
                "macs_pot4": per_kind[RowKind.POT4],
                "macs_fixed4": per_kind[RowKind.FIXED4],
                "macs_fixed8": per_kind[RowKind.FIXED8],
                "shifts": live_pot,
                "adds": live_pot + fixed_terms,
                "multiplies": fixed_terms,
            })
        else:
            kind, arg = op
            if kind in ("maxpool", "avgpool"):
                shape = (shape[0], shape[1] // arg, shape[2] // arg)
            elif kind == "flatten":
                shape = (int(np.prod(shape)),)
    return report
