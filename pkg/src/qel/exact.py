"""Exact rational polynomial fitting for lattice-sum sequences."""
from fractions import Fraction


class NonPolynomialError(ValueError):
    """Raised when a sequence does not fit a polynomial of the requested degree."""


def fit_polynomial(ks, values, degree):
    """Fit ``values[i] = sum_j c_j * ks[i]**j`` exactly.

    The first ``degree + 1`` samples determine the coefficients (Newton
    divided differences in rational arithmetic); every remaining sample is
    then checked for exact agreement.

    Returns:
        list of Fraction: coefficients ``c_0 .. c_degree`` (ascending powers).

    Raises:
        NonPolynomialError: if a surplus sample disagrees.
    """
    ks = [Fraction(k) for k in ks]
    values = [Fraction(v) for v in values]
    m = degree + 1
    if len(ks) < m:
        raise ValueError(f"need at least {m} samples for degree {degree}")
    xs, table = ks[:m], list(values[:m])
    newton = [table[0]]
    for level in range(1, m):
        table = [(table[i + 1] - table[i]) / (xs[i + level] - xs[i])
                 for i in range(len(table) - 1)]
        newton.append(table[0])
    # expand the Newton form into monomial coefficients
    coeffs = [Fraction(0)] * m
    basis = [Fraction(1)]
    for j in range(m):
        for i, b in enumerate(basis):
            coeffs[i] += newton[j] * b
        shifted = [Fraction(0)] + basis
        for i, b in enumerate(basis):
            shifted[i] -= xs[j] * b
        basis = shifted
    for k, v in zip(ks[m:], values[m:]):
        if evaluate(coeffs, k) != v:
            raise NonPolynomialError(
                f"sample at k={k} deviates from degree-{degree} fit")
    return coeffs


def evaluate(coeffs, k):
    acc = Fraction(0)
    for c in reversed(coeffs):
        acc = acc * k + c
    return acc


def leading(coeffs, degree):
    """Coefficient of ``k**degree`` (zero if the fit is shorter)."""
    return coeffs[degree] if degree < len(coeffs) else Fraction(0)
