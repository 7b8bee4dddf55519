"""Per-filter precision and scheme assignment.

Two steps per layer:

1. rank filters by the largest eigenvalue of their own Hessian block; the most
   sensitive ``n_fixed8`` rows get 8-bit fixed point;
2. among the remaining 4-bit rows the ``n_pot4`` rows with the smallest weight
   variance become PoT, the rest fixed point.

Row counts per class come from a largest-remainder apportionment of the
layer's rows under a :class:`SchemeRatio`.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ContractViolation, DomainError
from .quant import RowKind

log = logging.getLogger(__name__)

HVP_REL_EPS = 1e-3
POWER_ITERS = 50
POWER_TOL = 1e-4
LAMBDA_DIGITS = 10


@dataclass(frozen=True)
class SchemeRatio:
    """Percentages of PoT-4, Fixed-4 and Fixed-8 rows, e.g. ``60:35:5``."""

    pot4: float
    fixed4: float
    fixed8: float

    def __post_init__(self):
        parts = (self.pot4, self.fixed4, self.fixed8)
        if any(not math.isfinite(p) or p < 0 for p in parts):
            raise ConfigError(f"ratio parts must be finite and >= 0, got {parts}")
        if abs(sum(parts) - 100) > 1e-9:
            raise ConfigError(f"ratio must sum to 100, got {self}")

    @classmethod
    def parse(cls, text: str) -> "SchemeRatio":
        try:
            parts = [float(p) for p in text.split(":")]
        except ValueError:
            raise ConfigError(f"bad ratio {text!r}") from None
        if len(parts) != 3:
            raise ConfigError(f"ratio needs three parts P:F:E, got {text!r}")
        return cls(*parts)

    def __str__(self) -> str:
        return ":".join(f"{p:g}" for p in (self.pot4, self.fixed4, self.fixed8))

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.pot4, self.fixed4, self.fixed8)


@dataclass(frozen=True)
class FilterSensitivity:
    layer: int
    row: int
    lambda_max: float
    variance: float


@dataclass(frozen=True)
class RowAssignment:
    """The (scheme, bits) kind of every row of one layer, in row order."""

    kinds: tuple[RowKind, ...]

    def __post_init__(self):
        object.__setattr__(self, "kinds", tuple(RowKind(k) for k in self.kinds))

    def __len__(self) -> int:
        return len(self.kinds)

    def __iter__(self):
        return iter(self.kinds)

    def __getitem__(self, i):
        return self.kinds[i]

    def counts(self) -> tuple[int, int, int]:
        return tuple(sum(k is kind for k in self.kinds) for kind in RowKind)

    def to_list(self) -> list[str]:
        return [k.value for k in self.kinds]

    @classmethod
    def uniform(cls, kind: RowKind, rows: int) -> "RowAssignment":
        return cls((RowKind(kind),) * rows)


def apportion_counts(ratio: SchemeRatio, rows: int) -> tuple[int, int, int]:
    """Largest-remainder split of ``rows`` into (PoT-4, Fixed-4, Fixed-8) counts.

    Leftover seats go to the largest fractional remainders, ties in PoT-4 >
    Fixed-4 > Fixed-8 priority.  A layer always keeps at least one Fixed-8 row
    when ``ratio.fixed8 > 0``; that seat is taken from the class holding the
    most seats above its exact quota (ties: Fixed-4 before PoT-4).
    """
    if rows < 1:
        raise DomainError(f"rows must be >= 1, got {rows}")
    quotas = [Fraction(p) * rows / 100 for p in ratio.as_tuple()]
    counts = [math.floor(q) for q in quotas]
    leftover = rows - sum(counts)
    order = sorted(range(3), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:leftover]:
        counts[i] += 1
    if ratio.fixed8 > 0 and counts[2] == 0:
        donors = [i for i in (1, 0) if counts[i] > 0]
        # max() keeps the first of equal keys, so Fixed-4 wins ties
        donor = max(donors, key=lambda i: counts[i] - quotas[i])
        counts[donor] -= 1
        counts[2] += 1
    return tuple(counts)


def hvp(grad_fn: Callable[[np.ndarray], np.ndarray], params, v, epsilon: float | None = None) -> np.ndarray:
    """Central-difference Hessian-vector product.

    ``(g(p + e*u) - g(p - e*u)) / (2e) * |v|`` with ``u = v / |v|``; the default
    step is ``1e-3 * (1 + |p|)``.
    """
    params = np.asarray(params, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != params.shape:
        raise ContractViolation(f"v shape {v.shape} != params shape {params.shape}")
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise DomainError("hvp direction must be nonzero")
    if epsilon is None:
        epsilon = HVP_REL_EPS * (1.0 + float(np.linalg.norm(params)))
    if epsilon <= 0:
        raise DomainError("epsilon must be positive")
    u = v / norm
    g_plus = np.asarray(grad_fn(params + epsilon * u), dtype=np.float64)
    g_minus = np.asarray(grad_fn(params - epsilon * u), dtype=np.float64)
    return (g_plus - g_minus) / (2 * epsilon) * norm


def lambda_max_power_iteration(hvp_fn: Callable[[np.ndarray], np.ndarray], dim: int,
                               iters: int = POWER_ITERS, tol: float = POWER_TOL,
                               seed=0) -> float:
    """Dominant (largest-magnitude) eigenvalue of the operator ``hvp_fn``.

    Stops once the Rayleigh quotient moves by less than ``tol * |lambda|`` or
    after ``iters`` products.
    """
    if iters < 1 or tol <= 0:
        raise DomainError("need iters >= 1 and tol > 0")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    lam = None
    for _ in range(iters):
        w = np.asarray(hvp_fn(v), dtype=np.float64)
        if w.shape != (dim,):
            raise ContractViolation(f"operator returned shape {w.shape}, expected ({dim},)")
        new = float(v @ w)
        wn = float(np.linalg.norm(w))
        if wn == 0.0:
            return 0.0
        v = w / wn
        if lam is not None and abs(new - lam) < tol * abs(new):
            return new
        lam = new
    return lam


def _variance(row: np.ndarray) -> float:
    return float(np.var(row))


def rank_filters(model, x, y, *, iters: int = POWER_ITERS, tol: float = POWER_TOL,
                 seed: int = 0, loss_scale: float = 1.0, workers: int = 1) -> list[FilterSensitivity]:
    """Score every row of every weight layer by its Hessian-block top eigenvalue.

    The Hessian of the (float-mode) loss on batch ``(x, y)`` is restricted to
    the diagonal block of one filter's own weights; cross-filter terms are
    ignored.  Within each layer the result is sorted by descending
    ``lambda_max``, ties by ascending row index.
    """
    if len(x) == 0:
        raise DomainError("calibration batch is empty")
    layers = model.weight_layer_indices()
    if not layers:
        raise ContractViolation("model has no quantizable layers")

    def score(li: int, r: int) -> FilterSensitivity:
        w_full = model.layers[li].weight
        row0 = w_full[r].ravel().copy()

        def grad_fn(row):
            w = w_full.copy()
            w[r] = row.reshape(w_full.shape[1:])
            _, grads = model.loss_and_grads(x, y, mode="float", params={li: w}, loss_scale=loss_scale)
            return grads[li][0][r].ravel()

        lam = lambda_max_power_iteration(lambda v: hvp(grad_fn, row0, v), row0.size,
                                         iters=iters, tol=tol, seed=[seed, li])
        # finite-difference round-off sits near 1e-13 relative; rounding it away
        # lets mathematically equal filters tie exactly and fall to row order
        return FilterSensitivity(li, r, float(f"{lam:.{LAMBDA_DIGITS}g}"), _variance(row0))

    jobs = [(li, r) for li in layers for r in range(model.layers[li].weight.shape[0])]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda job: score(*job), jobs))
    else:
        results = [score(*job) for job in jobs]

    ordered = []
    for li in layers:
        rows = [s for s in results if s.layer == li]
        rows.sort(key=lambda s: (-s.lambda_max, s.row))
        ordered.extend(rows)
    log.debug("ranked %d filters over %d layers", len(ordered), len(layers))
    return ordered


def assign_layer(sensitivities: Sequence[FilterSensitivity], ratio: SchemeRatio) -> RowAssignment:
    if not sensitivities:
        raise DomainError("no sensitivities to assign")
    n = len(sensitivities)
    rows = sorted(s.row for s in sensitivities)
    if rows != list(range(n)):
        raise ContractViolation("sensitivities must cover rows 0..n-1 exactly once")
    n_pot, _, n_f8 = apportion_counts(ratio, n)

    by_lambda = sorted(sensitivities, key=lambda s: (-s.lambda_max, s.row))
    kinds: dict[int, RowKind] = {s.row: RowKind.FIXED8 for s in by_lambda[:n_f8]}
    rest = sorted(by_lambda[n_f8:], key=lambda s: (s.variance, s.row))
    for i, s in enumerate(rest):
        kinds[s.row] = RowKind.POT4 if i < n_pot else RowKind.FIXED4
    return RowAssignment(tuple(kinds[r] for r in range(n)))


def assign_model(sensitivities: Sequence[FilterSensitivity], ratio: SchemeRatio) -> dict[int, RowAssignment]:
    """Group a :func:`rank_filters` result by layer and assign every layer."""
    per_layer: dict[int, list[FilterSensitivity]] = {}
    for s in sensitivities:
        per_layer.setdefault(s.layer, []).append(s)
    return {li: assign_layer(rows, ratio) for li, rows in per_layer.items()}
