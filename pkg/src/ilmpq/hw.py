"""Analytic throughput/latency model of a two-engine FPGA accelerator.

PoT rows run on a LUT shift-add engine and fixed-point rows on a DSP
multiply engine.  Layers execute one after another; within a layer both
engines run concurrently, so a layer takes as long as its slower engine::

    t_layer = max(pot_macs / (lut_lanes * clock),
                  (fixed4_macs + dsp_cost8 * fixed8_macs) / (dsp_lanes * clock))
    latency = sum(t_layer) + fixed_overhead

Throughput counts two operations per MAC.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .assignment import SchemeRatio, apportion_counts
from .errors import ConfigError, DegenerateAnchorsError, InsufficientDataError

log = logging.getLogger(__name__)

DEFAULT_CLOCK = 100e6


@dataclass(frozen=True)
class LayerShape:
    name: str
    rows: int
    inner: int
    positions: int = 1

    @property
    def macs(self) -> int:
        return self.rows * self.inner * self.positions


@dataclass(frozen=True)
class HwProfile:
    """Device description; lane counts are effective (real-valued) parallel MACs per cycle."""

    name: str
    lut_lanes: float
    dsp_lanes: float
    clock: float = DEFAULT_CLOCK
    fixed_overhead: float = 0.0
    dsp_cost8: float = 2.0

    def __post_init__(self):
        if not (self.lut_lanes >= 1 and self.dsp_lanes >= 1):
            raise ConfigError(f"lane counts must be >= 1, got {self.lut_lanes}, {self.dsp_lanes}")
        if not (math.isfinite(self.clock) and self.clock > 0):
            raise ConfigError("clock must be positive")
        if not self.fixed_overhead >= 0:
            raise ConfigError("fixed_overhead must be >= 0")
        if not self.dsp_cost8 >= 1:
            raise ConfigError("dsp_cost8 must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HwProfile":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown profile keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class WorkloadSplit:
    """Per-layer ``(pot4, fixed4, fixed8)`` MAC counts, shape ``(layers, 3)``."""

    macs: np.ndarray

    @property
    def total_macs(self) -> int:
        return int(self.macs.sum())

    @property
    def total_ops(self) -> int:
        return 2 * self.total_macs


@dataclass(frozen=True)
class Anchor:
    ratio: SchemeRatio
    latency: float  # seconds
    first_last_fixed8: bool = False
    label: str = ""


def resnet18_shapes() -> list[LayerShape]:
    """ImageNet ResNet-18 (224x224 input): conv and fc layers incl. downsample 1x1 convs."""
    shapes = [LayerShape("conv1", 64, 3 * 7 * 7, 112 * 112)]
    in_ch, hw = 64, 56
    for stage, ch in enumerate((64, 128, 256, 512), start=1):
        for block in range(2):
            down = stage > 1 and block == 0
            if down:
                hw //= 2
            pos = hw * hw
            shapes.append(LayerShape(f"layer{stage}.{block}.conv1", ch, in_ch * 9, pos))
            shapes.append(LayerShape(f"layer{stage}.{block}.conv2", ch, ch * 9, pos))
            if down:
                shapes.append(LayerShape(f"layer{stage}.{block}.downsample", ch, in_ch, pos))
            in_ch = ch
    shapes.append(LayerShape("fc", 1000, 512, 1))
    return shapes


def model_shapes(model) -> list[LayerShape]:
    """Weight-layer shapes of a :class:`~ilmpq.model.Model` in execution order."""
    io = model.shapes()
    out = []
    for i in model.weight_layer_indices():
        w = model.layers[i].weight
        positions = 1 if w.ndim == 2 else io[i + 1][1] * io[i + 1][2]
        out.append(LayerShape(f"layer{i}", w.shape[0], int(np.prod(w.shape[1:])), positions))
    return out


# Published end-to-end ResNet-18 latencies on two Zynq devices; rows whose
# measurements are missing for a device are left out of that device's list.
_R = SchemeRatio
MEASURED_RESNET18 = {
    "xc7z020": [
        Anchor(_R(0, 100, 0), 122.6e-3, True, "(1)"),
        Anchor(_R(0, 100, 0), 99.3e-3, False, "(2)"),
        Anchor(_R(100, 0, 0), 58.1e-3, True, "(3)"),
        Anchor(_R(100, 0, 0), 50.2e-3, False, "(4)"),
        Anchor(_R(50, 50, 0), 72.0e-3, True, "(5)"),
        Anchor(_R(50, 50, 0), 47.8e-3, False, "(6)"),
        Anchor(_R(60, 40, 0), 63.6e-3, True, "(7)"),
        Anchor(_R(60, 35, 5), 40.7e-3, False, "ILMPQ-1"),
    ],
    "xc7z045": [
        Anchor(_R(0, 100, 0), 31.4e-3, True, "(1)"),
        Anchor(_R(0, 100, 0), 25.4e-3, False, "(2)"),
        Anchor(_R(100, 0, 0), 12.5e-3, True, "(3)"),
        Anchor(_R(100, 0, 0), 10.3e-3, False, "(4)"),
        Anchor(_R(50, 50, 0), 18.4e-3, True, "(5)"),
        Anchor(_R(50, 50, 0), 12.2e-3, False, "(6)"),
        Anchor(_R(67, 33, 0), 14.8e-3, True, "(8)"),
        Anchor(_R(65, 30, 5), 8.6e-3, False, "ILMPQ-2"),
    ],
}
del _R


def workload(shapes: list[LayerShape], ratio: SchemeRatio, first_last_fixed8: bool = False) -> WorkloadSplit:
    """Split each layer's MACs by the integer row counts of :func:`apportion_counts`.

    With ``first_last_fixed8`` the first and last layers are entirely 8-bit fixed point.
    """
    if not shapes:
        raise ConfigError("no layer shapes")
    macs = np.zeros((len(shapes), 3), dtype=np.int64)
    for i, s in enumerate(shapes):
        if first_last_fixed8 and i in (0, len(shapes) - 1):
            counts = (0, 0, s.rows)
        else:
            counts = apportion_counts(ratio, s.rows)
        macs[i] = np.array(counts, dtype=np.int64) * s.inner * s.positions
    return WorkloadSplit(macs)


def _engine_terms(wl: WorkloadSplit, dsp_cost8: float) -> tuple[np.ndarray, np.ndarray]:
    m = wl.macs.astype(np.float64)
    return m[:, 0], m[:, 1] + dsp_cost8 * m[:, 2]


def latency(wl: WorkloadSplit, profile: HwProfile) -> float:
    pot, fixed = _engine_terms(wl, profile.dsp_cost8)
    t = np.maximum(pot / (profile.lut_lanes * profile.clock), fixed / (profile.dsp_lanes * profile.clock))
    return float(t.sum()) + profile.fixed_overhead


def estimate(wl: WorkloadSplit, profile: HwProfile) -> tuple[float, float]:
    """``(throughput in GOP/s, latency in seconds)``."""
    lat = latency(wl, profile)
    return wl.total_ops / lat / 1e9, lat


def anchor_workloads(anchors, shapes):
    return [workload(shapes, a.ratio, a.first_last_fixed8) for a in anchors]


def anchor_residuals(profile: HwProfile, anchors, shapes) -> np.ndarray:
    """Predicted minus measured latency (seconds) for every anchor."""
    return np.array([latency(w, profile) - a.latency
                     for w, a in zip(anchor_workloads(anchors, shapes), anchors)])


def calibrate(anchors, shapes, name: str = "calibrated", clock: float = DEFAULT_CLOCK,
              dsp_cost8: float = 2.0) -> HwProfile:
    """Least-squares fit of LUT rate, DSP rate and overhead to measured latencies.

    With ``a = 1/(lut rate)`` and ``b = 1/(dsp rate)`` every anchor latency is
    piecewise linear in ``(a, b, c)``; the pieces are delimited by the ratios
    ``rho = b / a`` at which some layer switches its bottleneck engine.  The
    fit solves the linear problem on every piece (and on the ``c = 0`` face
    and at every breakpoint) and keeps the feasible solution with the smallest
    squared error, so the result is the exact global optimum.  With fewer
    anchors than parameters the overhead is pinned to zero.
    """
    anchors = list(anchors)
    if len(anchors) < 2:
        raise InsufficientDataError("calibration needs at least 2 anchors")
    keys = {(a.ratio, a.first_last_fixed8) for a in anchors}
    if len(keys) < 2:
        raise InsufficientDataError("calibration needs anchors with distinct ratios")
    terms = [_engine_terms(w, dsp_cost8) for w in anchor_workloads(anchors, shapes)]
    # work in units of the largest layer term for conditioning; rescaled at the end
    unit = max(max(t[0].max(), t[1].max()) for t in terms)
    P = np.array([t[0] for t in terms]) / unit  # (anchors, layers)
    F = np.array([t[1] for t in terms]) / unit
    y = np.array([a.latency for a in anchors])

    both = (P > 0) & (F > 0)
    breaks = np.unique(P[both] / F[both])
    edges = np.concatenate([[0.0], breaks, [np.inf]])

    def sse(a, b, c):
        return float(((np.maximum(a * P, b * F).sum(axis=1) + c - y) ** 2).sum())

    candidates = []

    def consider(a, b, c):
        if a > 0 and b > 0 and c >= 0 and np.isfinite([a, b, c]).all():
            candidates.append((sse(a, b, c), len(candidates), a, b, c))

    for lo, hi in zip(edges[:-1], edges[1:]):
        rho = (lo + hi) / 2 if np.isfinite(hi) else (lo * 2 if lo > 0 else 1.0)
        pot_active = P >= rho * F
        A = np.stack([np.where(pot_active, P, 0).sum(1), np.where(pot_active, 0, F).sum(1)], axis=1)

        def in_piece(a, b):
            r = b / a
            return lo * (1 - 1e-9) <= r <= hi * (1 + 1e-9)

        full = np.column_stack([A, np.ones(len(y))])
        if np.linalg.matrix_rank(full) == 3:
            a, b, c = np.linalg.lstsq(full, y, rcond=None)[0]
            if a > 0 and in_piece(a, b):
                consider(a, b, c)
        if np.linalg.matrix_rank(A) == 2:
            a, b = np.linalg.lstsq(A, y, rcond=None)[0]
            if a > 0 and in_piece(a, b):
                consider(a, b, 0.0)

    for rho in breaks:
        s = np.maximum(P, rho * F).sum(axis=1)
        full = np.column_stack([s, np.ones(len(y))])
        if np.linalg.matrix_rank(full) == 2:
            a, c = np.linalg.lstsq(full, y, rcond=None)[0]
            if c < 0:
                a, c = float(s @ y / (s @ s)), 0.0
        else:
            a, c = float(s @ y / (s @ s)), 0.0
        consider(a, rho * a, c)

    if not candidates:
        raise DegenerateAnchorsError("no feasible calibration for these anchors")
    err, _, a, b, c = min(candidates)
    pot_active = a * P >= b * F
    if not pot_active.any() or pot_active.all():
        engine = "LUT" if not pot_active.any() else "DSP"
        raise DegenerateAnchorsError(f"anchors never make the {engine} engine the bottleneck")
    log.info("calibrated %s: rms residual %.4g ms", name, 1e3 * math.sqrt(err / len(y)))
    a, b = a / unit, b / unit
    return HwProfile(name, float(1.0 / (a * clock)), float(1.0 / (b * clock)), clock, float(c), dsp_cost8)


def sweep(profile: HwProfile, shapes, fixed8_percent: float = 5, step: float = 5,
          first_last_fixed8: bool = False) -> list[dict]:
    """Estimated throughput and latency for ``pot4 = 0, step, 2*step, ...`` up to ``100 - fixed8``.

    The end point ``pot4 = 100 - fixed8`` is always included, so ``step=100``
    gives the two-point grid of the extremes.
    """
    if not (0 <= fixed8_percent <= 100):
        raise ConfigError(f"fixed8 must lie in [0, 100], got {fixed8_percent}")
    if not (math.isfinite(step) and step > 0):
        raise ConfigError(f"step must be positive, got {step}")
    fixed8_percent = float(fixed8_percent)
    span = 100 - fixed8_percent
    n = int(math.floor(span / step + 1e-9))
    pots = [float(i * step) for i in range(n + 1)]
    if span - pots[-1] > 1e-9:
        pots.append(span)
    out = []
    for pot in pots:
        ratio = SchemeRatio(pot, span - pot, fixed8_percent)
        gops, lat = estimate(workload(shapes, ratio, first_last_fixed8), profile)
        out.append({"ratio": str(ratio), "pot4": pot, "fixed4": span - pot, "fixed8": fixed8_percent,
                    "throughput_gops": gops, "latency_ms": lat * 1e3})
    return out


def optimal_ratio(profile: HwProfile, shapes, fixed8_percent: float = 5, step: float = 5,
                  first_last_fixed8: bool = False) -> SchemeRatio:
    """Grid point with the highest estimated throughput; ties go to the larger PoT share."""
    best = None
    for rec in sweep(profile, shapes, fixed8_percent, step, first_last_fixed8):
        if best is None or rec["throughput_gops"] >= best["throughput_gops"]:
            best = rec
    return SchemeRatio(best["pot4"], best["fixed4"], best["fixed8"])
