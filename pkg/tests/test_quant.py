"""Quantizer behaviour checked against brute-force nearest-level search."""
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ilmpq.errors import ContractViolation, DomainError, UnsupportedConfigError
from ilmpq.quant import (QuantConfig, QuantScheme, RowKind, dequantize_matrix, dequantize_row,
                         fake_quantize_matrix, fixed_dequantize, fixed_quantize, pot_codebook,
                         pot_dequantize, pot_quantize, pot_zero_code, quantize_matrix, quantize_row,
                         round_half_away)

FIX4 = QuantConfig(QuantScheme.FIXED, 4)
POT = QuantConfig(QuantScheme.POT, 4)


def oracle_fixed(x, bits, scale):
    """Nearest integer in the clamped grid; exact rational distances, ties away from zero."""
    q = 2 ** (bits - 1) - 1
    t = Fraction(x) / Fraction(scale)
    best = min(range(-q, q + 1), key=lambda c: (abs(t - c), -abs(c)))
    return best


def oracle_pot(x, scale):
    """Nearest of the 15 signed levels; ties go to the larger magnitude."""
    t = Fraction(x) / Fraction(scale)
    levels = [(0, pot_zero_code())]
    for k in range(7):
        levels.append((Fraction(1, 2 ** k), k))
        levels.append((-Fraction(1, 2 ** k), 8 | k))
    value, code = min(levels, key=lambda lv: (abs(t - lv[0]), -abs(lv[0])))
    return code


@pytest.mark.parametrize("x, scale, bits, code", [(0.0, 0.3, 4, 0), (3 * 0.7, 0.7, 4, 3),
                                                  (100 * 0.7, 0.7, 4, 7), (-1000.0, 1.0, 8, -127)])
def test_fixed_examples(x, scale, bits, code):
    assert fixed_quantize(x, QuantConfig("fixed", bits, scale)) == code


def test_fixed_dequantize_examples():
    assert fixed_dequantize(0, FIX4) == 0.0
    assert fixed_dequantize(-7, QuantConfig("fixed", 4, 0.5)) == -3.5
    with pytest.raises(ContractViolation):
        fixed_dequantize(8, FIX4)


def test_round_half_away_ties():
    np.testing.assert_array_equal(round_half_away(np.array([0.5, 1.5, 2.5, -0.5, -2.5, 0.49999999999999994])),
                                  [1, 2, 3, -1, -3, 0])


def test_pot_codebook():
    assert pot_codebook(4).levels == (0, 1 / 64, 1 / 32, 1 / 16, 1 / 8, 1 / 4, 1 / 2, 1)
    with pytest.raises(UnsupportedConfigError):
        pot_codebook(8)


def test_pot_examples():
    assert pot_quantize(0.5, POT) == 1
    assert pot_quantize(0.0, POT) == pot_zero_code()
    assert pot_quantize(-0.0, POT) == pot_quantize(0.0, POT)
    assert pot_quantize(0.3, POT) == 2 == oracle_pot(0.3, 1.0)
    assert pot_dequantize(pot_quantize(-0.3, POT), POT) == -0.25


def test_pot_tie_goes_up():
    # 0.375 sits halfway between 1/4 and 1/2; 1/128 halfway between 0 and 1/64
    assert pot_dequantize(pot_quantize(0.375, POT), POT) == 0.5
    assert pot_dequantize(pot_quantize(1 / 128, POT), POT) == 1 / 64
    assert pot_dequantize(pot_quantize(-1 / 128, POT), POT) == -1 / 64


def test_errors():
    with pytest.raises(DomainError):
        fixed_quantize(float("nan"), FIX4)
    with pytest.raises(DomainError):
        pot_quantize(float("inf"), POT)
    with pytest.raises(UnsupportedConfigError):
        QuantConfig("pot", 8)
    with pytest.raises(DomainError):
        QuantConfig("fixed", 4, 0.0)
    with pytest.raises(DomainError):
        quantize_row([], "fixed", 4)
    with pytest.raises(ContractViolation):
        pot_quantize(0.1, FIX4)


def test_quantize_row_examples():
    s = 0.37
    row = quantize_row(np.array([1, -2, 3]) * s, "fixed", 4, scale=s)
    np.testing.assert_array_equal(row.codes, [1, -2, 3])
    for scheme, bits in (("fixed", 4), ("fixed", 8), ("pot", 4)):
        z = quantize_row(np.zeros(5), scheme, bits)
        assert np.all(dequantize_row(z) == 0)


def test_row_scale_hits_extremum():
    w = np.array([0.2, -1.3, 0.7])
    for scheme, bits in (("fixed", 4), ("fixed", 8), ("pot", 4)):
        deq = dequantize_row(quantize_row(w, scheme, bits))
        assert deq[1] == pytest.approx(-1.3, rel=1e-15)


def test_scalar_sweep_matches_oracle():
    rng = np.random.default_rng(7)
    xs = rng.uniform(-2, 2, 400)
    for x in xs:
        assert fixed_quantize(x, QuantConfig("fixed", 4, 0.21)) == oracle_fixed(x, 4, 0.21)
        assert fixed_quantize(x, QuantConfig("fixed", 8, 0.013)) == oracle_fixed(x, 8, 0.013)
        assert pot_quantize(x, QuantConfig("pot", 4, 1.1)) == oracle_pot(x, 1.1)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=12),
       st.sampled_from(list(RowKind)))
def test_matrix_path_matches_row_path(values, kind):
    w = np.array(values)
    codes, scales = quantize_matrix(w[None, :], [kind])
    row = quantize_row(w, kind.scheme, kind.bits)
    np.testing.assert_array_equal(codes[0], row.codes)
    assert scales[0] == row.config.scale
    np.testing.assert_array_equal(dequantize_matrix(codes, [kind], scales)[0], dequantize_row(row))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=2, max_size=10))
def test_fake_quantize_is_idempotent(values):
    w = np.array([values, values[::-1], [v * 0.5 for v in values]])
    kinds = [RowKind.POT4, RowKind.FIXED4, RowKind.FIXED8]
    once, mask = fake_quantize_matrix(w, kinds)
    twice, _ = fake_quantize_matrix(once, kinds)
    np.testing.assert_array_equal(once, twice)
    # with row-max scales every weight is within range, so STE passes everything
    assert mask.all()


def test_ste_mask_blocks_out_of_range():
    w = np.array([[0.1, 5.0]])
    _, mask = fake_quantize_matrix(w, [RowKind.FIXED4], scales=np.array([0.1]))
    np.testing.assert_array_equal(mask, [[True, False]])


def test_pot_levels_are_exact_powers():
    codes = np.arange(16)
    vals = pot_dequantize(codes, POT)
    for c, v in zip(codes, vals):
        if c & 7 == 7:
            assert v == 0
        else:
            assert abs(v) == math.ldexp(1, -int(c & 7)) and (v < 0) == bool(c & 8)
