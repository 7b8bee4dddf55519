"""Integer engine: kernel exactness, shift-only PoT path and agreement with QAT simulation."""
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ilmpq import engine
from ilmpq.assignment import RowAssignment
from ilmpq.errors import ContractViolation, StateError
from ilmpq.model import Dense, Model, build_model
from ilmpq.quant import RowKind, pot_zero_code

P, F4, F8 = RowKind.POT4, RowKind.FIXED4, RowKind.FIXED8


class CountingInt:
    """Integer wrapper that records every arithmetic operation applied to it."""

    log = {"mul": 0, "shift": 0, "add": 0, "neg": 0}

    def __init__(self, v):
        self.v = int(v)

    @classmethod
    def reset(cls):
        for k in cls.log:
            cls.log[k] = 0

    @staticmethod
    def _val(o):
        return o.v if isinstance(o, CountingInt) else int(o)

    def __lshift__(self, n):
        CountingInt.log["shift"] += 1
        return CountingInt(self.v << int(n))

    def __neg__(self):
        CountingInt.log["neg"] += 1
        return CountingInt(-self.v)

    def __add__(self, o):
        CountingInt.log["add"] += 1
        return CountingInt(self.v + self._val(o))

    __radd__ = __add__

    def __mul__(self, o):
        CountingInt.log["mul"] += 1
        return CountingInt(self.v * self._val(o))

    __rmul__ = __mul__


def pot_level(code):
    """Exact rational value of a packed PoT code."""
    code = int(code)
    k = code & 7
    if k == pot_zero_code():
        return Fraction(0)
    mag = Fraction(1, 2 ** k)
    return -mag if code & 8 else mag


def big_int_pot(codes, act):
    return [[int(64 * sum(pot_level(c) * int(a) for c, a in zip(row, act[:, p])))
             for p in range(act.shape[1])] for row in codes]


def test_gemm_fixed_identity_row_and_bigint():
    act = np.array([5, -3, 7])
    assert engine.gemm_fixed(np.array([[1, 0, 0]]), act)[0] == 5
    rng = np.random.default_rng(0)
    codes = rng.integers(-127, 128, (6, 40))
    a = rng.integers(-7, 8, (40, 3))
    ref = [[sum(int(c) * int(x) for c, x in zip(row, a[:, p])) for p in range(3)] for row in codes]
    np.testing.assert_array_equal(engine.gemm_fixed(codes, a), ref)


def test_gemm_pot_single_term_and_zero_row():
    code_quarter = 2  # +2^-2
    assert engine.gemm_pot(np.array([[code_quarter]]), np.array([8]))[0] == 128
    zero_row = np.full((1, 5), pot_zero_code())
    assert engine.gemm_pot(zero_row, np.arange(5))[0] == 0


def test_gemm_pot_is_shift_only():
    rng = np.random.default_rng(1)
    codes = rng.integers(0, 16, (4, 9))
    act = rng.integers(-7, 8, (9, 2))
    CountingInt.reset()
    shim = np.vectorize(CountingInt, otypes=[object])(act)
    out = engine.gemm_pot(codes, shim)
    assert CountingInt.log["mul"] == 0
    assert CountingInt.log["shift"] > 0
    np.testing.assert_array_equal(np.vectorize(lambda c: c.v if isinstance(c, CountingInt) else c)(out),
                                  big_int_pot(codes, act))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 8), st.integers(1, 24), st.integers(0, 2 ** 32 - 1))
def test_gemm_pot_equals_bigint_oracle(rows, inner, seed):
    rng = np.random.default_rng(seed)
    codes = rng.integers(0, 16, (rows, inner))
    act = rng.integers(-127, 128, (inner, 3))
    np.testing.assert_array_equal(engine.gemm_pot(codes, act), big_int_pot(codes, act))


def test_kernel_scheme_checks():
    with pytest.raises(ContractViolation):
        engine.gemm_pot(np.zeros((1, 2), int), np.zeros(2, int), kinds=[F4])
    with pytest.raises(ContractViolation):
        engine.gemm_fixed(np.zeros((1, 2), int), np.zeros(2, int), kinds=[P])
    with pytest.raises(ContractViolation):
        engine.gemm_fixed(np.zeros((1, 2), int), np.zeros(3, int))


def test_accumulator_bound():
    assert 7 * 127 * 65536 <= engine.accumulator_bound(65536, 8, 4) < 2 ** 63


def _mixed_layer_model(seed=0):
    m = build_model([{"kind": "dense", "out": 3}], (6,), seed=seed)
    m.set_assignments({0: RowAssignment((P, F4, F8))})
    return m


def test_single_fixed_row_is_gemm_plus_requantize():
    m = Model([Dense(np.array([[0.7, -0.35, 0.1]]), np.zeros(1), RowAssignment((F4,)))], (3,))
    qm = engine.quantize_model(m)
    layer = qm.ops[0]
    x = np.array([[1.0, 2.0, -3.0]])
    codes, step = engine.quantize_activation(x, 4, 6.0)
    acc = engine.gemm_fixed(layer.codes, codes.astype(int).T)
    np.testing.assert_allclose(engine.infer(qm, x)[0], acc[:, 0] * layer.row_scales * step, rtol=1e-15)


def test_row_permutation_is_bitwise_invariant():
    m = _mixed_layer_model(3)
    qm = engine.quantize_model(m)
    layer = qm.ops[0]
    x = np.random.default_rng(5).standard_normal((20, 6))
    base = engine.infer(qm, x)
    perm = np.array([2, 0, 1])
    layer.codes, layer.row_scales = layer.codes[perm], layer.row_scales[perm]
    layer.assignment = tuple(layer.assignment[i] for i in perm)
    layer.row_index = layer.row_index[perm]
    np.testing.assert_array_equal(engine.infer(qm, x), base)


def test_three_row_layer_matches_qat_forward():
    m = _mixed_layer_model(4)
    x = np.random.default_rng(6).standard_normal((50, 6))
    d = np.abs(engine.infer(engine.quantize_model(m), x) - m.predict(x, "qat"))
    assert d.max() <= 1e-12


def test_zero_input_and_identity_layer():
    m = _mixed_layer_model(1)
    assert np.all(engine.infer(engine.quantize_model(m), np.zeros((2, 6))) == 0)
    ident = Model([Dense(np.eye(3), np.zeros(3), RowAssignment((F8, F8, F8))), ], (3,))
    x = np.array([[0.5, -2.0, 9.0]])
    codes, step = engine.quantize_activation(x, 4, 6.0)
    np.testing.assert_allclose(engine.infer(engine.quantize_model(ident), x), codes * step, rtol=1e-15)


def test_unassigned_model_is_state_error():
    with pytest.raises(StateError):
        engine.quantize_model(build_model([{"kind": "dense", "out": 2}], (2,)))


CNN = [{"kind": "conv2d", "out": 6, "kernel": 3, "padding": 1}, {"kind": "relu"}, {"kind": "maxpool"},
       {"kind": "conv2d", "out": 8, "kernel": 3, "stride": 2, "padding": 1}, {"kind": "relu"},
       {"kind": "avgpool"}, {"kind": "flatten"}, {"kind": "dense", "out": 5}]


def test_cnn_engine_matches_qat_and_counts_ops():
    m = build_model(CNN, (1, 8, 8), seed=2)
    kinds = {0: (P, P, P, F4, F4, F8), 3: (P,) * 4 + (F4,) * 3 + (F8,), 7: (P, P, F4, F4, F8)}
    m.set_assignments({i: RowAssignment(k) for i, k in kinds.items()})
    x = np.random.default_rng(0).random((30, 1, 8, 8)) * 3
    qm = engine.quantize_model(m)
    d = np.abs(engine.infer(qm, x) - m.predict(x, "qat"))
    assert d.max() <= 1e-9
    counts = engine.op_counts(qm)
    # conv0 runs at 8x8 with 9 inputs per row; conv1 sees 4x4 maps, stride 2 gives 2x2 outputs
    assert counts[0]["macs_pot4"] == 3 * 9 * 64 and counts[0]["macs_fixed8"] == 9 * 64
    assert counts[1]["macs_fixed4"] == 3 * 54 * 4
    assert counts[2]["macs_pot4"] == 2 * 8
    for c in counts:
        assert c["multiplies"] == (c["macs_fixed4"] + c["macs_fixed8"])
        assert c["shifts"] <= c["macs_pot4"]


def test_frozen_codes_are_used():
    m = _mixed_layer_model(7)
    frozen = engine.frozen_codes(m)
    codes, scales = frozen[0]
    zeroed = {0: (np.where(np.arange(3)[:, None] == 1, 0, codes), scales)}
    x = np.random.default_rng(1).standard_normal((4, 6))
    out = engine.infer(engine.quantize_model(m, zeroed), x)
    np.testing.assert_array_equal(out[:, 1], np.full(4, m.layers[0].bias[1]))
    with pytest.raises(ContractViolation):
        engine.quantize_model(m, {0: (codes[:, :2], scales)})
