from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from qel.exact import NonPolynomialError, evaluate, fit_polynomial, leading


@given(st.lists(st.integers(-50, 50), min_size=1, max_size=5), st.integers(0, 3))
def test_recovers_integer_polynomials(coeffs, surplus):
    degree = len(coeffs) - 1
    ks = list(range(1, degree + 2 + surplus))
    values = [evaluate([Fraction(c) for c in coeffs], k) for k in ks]
    assert fit_polynomial(ks, values, degree) == [Fraction(c) for c in coeffs]


def test_rejects_non_polynomial():
    ks = list(range(1, 7))
    with pytest.raises(NonPolynomialError):
        fit_polynomial(ks, [2**k for k in ks], 3)


def test_too_few_samples():
    with pytest.raises(ValueError):
        fit_polynomial([1, 2], [1, 2], 2)


def test_leading_pads_with_zero():
    assert leading([Fraction(1), Fraction(2)], 4) == 0
    assert leading([Fraction(1), Fraction(2)], 1) == 2
