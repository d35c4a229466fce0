from fractions import Fraction
from math import gcd

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qel.quantisation import bergman, hilb
from qel.stability import (DegenerateActionError, NormalisationError, centred_trace_product,
                           chow_weight, df_invariant, df_of, equivariant_density,
                           extremal_normalisation, fit_expansions, futaki_integral,
                           generator_at_level, inner_product, inner_product_matrix,
                           relative_df, relative_df_chi, richardson, scan_directions)
from qel.toric import (build_quadrature, hirzebruch, potential, product_of_lines,
                       projective_line, scalar_curvature)

F1 = hirzebruch()
directions = st.tuples(st.integers(-3, 3), st.integers(-3, 3))


# --- independent oracles -------------------------------------------------

def _boundary_integral(polytope, lam):
    """Lattice boundary measure of 1 and <lam, x> by walking the vertex cycle."""
    verts = [tuple(map(Fraction, v)) for v in polytope.vertices]
    if polytope.dim == 1:
        # the boundary of an interval is two points, each of unit mass
        return Fraction(2), sum(lam[0] * v[0] for v in verts)
    cx = sum(v[0] for v in verts) / len(verts)
    cy = sum(v[1] for v in verts) / len(verts)
    verts.sort(key=lambda v: np.arctan2(float(v[1] - cy), float(v[0] - cx)))
    total, lin = Fraction(0), Fraction(0)
    for p, q in zip(verts, verts[1:] + verts[:1]):
        length = gcd(int(q[0] - p[0]), int(q[1] - p[1]))
        total += length
        lin += length * (sum(l * (a + b) for l, a, b in zip(lam, p, q)) / 2)
    return total, lin


def _boundary_df(polytope, lam):
    # int_P S f = 2 pi int_dP f dsigma turns DF of weights <lam, a> into boundary data
    b1, bl = _boundary_integral(polytope, lam)
    quad = build_quadrature(polytope)
    integral = float(quad.integrate(quad.nodes @ np.asarray(lam, float)))
    return -0.5 * (float(bl) - float(b1) * integral / float(polytope.volume))


def _second_moments(polytope):
    quad = build_quadrature(polytope)
    x = quad.nodes - quad.integrate(quad.nodes.T) / quad.weights.sum()
    return np.einsum("q,qi,qj->ij", quad.weights, x, x)


# --- generators and fits ---------------------------------------------------

def test_sphere_generator_at_level_three():
    assert generator_at_level(projective_line(), (1,), 3, exact=True) == \
        [Fraction(-3, 2), Fraction(-1, 2), Fraction(1, 2), Fraction(3, 2)]


@pytest.mark.parametrize("k", range(1, 9))
def test_sphere_trace_of_square(k):
    assert centred_trace_product(projective_line(), (1,), (1,), k) == Fraction(k * (k + 1) * (k + 2), 12)


def test_f1_expansion_coefficients():
    fit = fit_expansions(F1, (0, 1))
    assert fit.a == [Fraction(3, 2), Fraction(5, 2), 1]
    assert fit.b == [Fraction(2, 3), 1, Fraction(1, 3), 0]


def test_too_few_levels_rejected():
    with pytest.raises(ValueError):
        fit_expansions(F1, (0, 1), k_list=[1, 2, 3, 4])


@pytest.mark.parametrize("lam, value", [((0, 1), Fraction(1, 9)), ((1, 0), Fraction(-1, 18)),
                                        ((1, -2), Fraction(-5, 18))])
def test_f1_df_values(lam, value):
    assert df_of(F1, lam) == value


@pytest.mark.parametrize("make", [projective_line, product_of_lines, hirzebruch])
def test_df_matches_boundary_oracle(make):
    P = make()
    for lam in ([(1,)] if P.dim == 1 else [(1, 0), (0, 1), (2, -1)]):
        assert abs(float(df_of(P, lam)) - _boundary_df(P, lam)) < 1e-12


@pytest.mark.parametrize("make", [projective_line, product_of_lines, hirzebruch])
def test_inner_product_matches_second_moments(make):
    P = make()
    q = np.array(inner_product_matrix(P), dtype=float)
    assert np.allclose(q, _second_moments(P), atol=1e-13)


def test_sphere_inner_product():
    assert inner_product(projective_line(), (1,), (1,)) == Fraction(1, 12)


@given(directions, directions)
def test_inner_product_symmetric_and_bilinear(a, b):
    q = inner_product_matrix(F1)
    ab = inner_product(F1, a, b)
    assert ab == inner_product(F1, b, a)
    assert ab == sum(a[i] * q[i][j] * b[j] for i in range(2) for j in range(2))


@given(directions, directions)
def test_cauchy_schwarz(a, b):
    ab = inner_product(F1, a, b)
    assert ab * ab <= inner_product(F1, a, a) * inner_product(F1, b, b)


@given(directions, directions, st.integers(-3, 3))
def test_df_is_linear_and_shift_invariant(a, b, c):
    s = tuple(x + y for x, y in zip(a, b))
    assert df_of(F1, s) == df_of(F1, a) + df_of(F1, b)
    assert df_of(F1, a, shift=c) == df_of(F1, a)


# --- extremal direction ------------------------------------------------------

def test_f1_extremal_direction():
    ext = extremal_normalisation(F1, potential(F1))
    assert ext.chi == [0, Fraction(12, 13)]
    assert ext.df_chi == ext.norm_chi == Fraction(4, 39)
    assert np.allclose(ext.chi_quadrature, [0, 12 / 13], atol=1e-9)
    # DF(chi) also equals (1/16 pi^2) times the squared L^2 norm of the affine projection
    assert abs(ext.projection_l2 / (16 * np.pi**2) - 4 / 39) < 1e-9


@pytest.mark.parametrize("make", [projective_line, product_of_lines])
def test_symmetric_polytopes_have_no_extremal_direction(make):
    assert extremal_normalisation(make()).is_zero


@settings(max_examples=10)
@given(directions, st.integers(-4, 4))
def test_relative_df_chi(a, t):
    ext = extremal_normalisation(F1)
    scaled = tuple(t * x for x in a)
    assert relative_df_chi(F1, scaled, ext) == t * relative_df_chi(F1, a, ext)
    assert relative_df_chi(F1, (0, 1), ext) == df_of(F1, (0, 1)) - inner_product(F1, (0, 1), ext.chi)


def test_relative_df_vanishes_on_chi():
    ext = extremal_normalisation(F1)
    assert relative_df_chi(F1, ext.chi, ext) == 0
    assert relative_df(F1, (0, 1), [(0, 1)]) == 0


def test_relative_df_degenerate_direction():
    with pytest.raises(DegenerateActionError):
        relative_df(F1, (0, 1), [(0, 0)])


def test_scan_directions_are_primitive():
    dirs = scan_directions(F1, radius=2)
    assert len(dirs) == 16 and (1, 0) in dirs and (2, 2) not in dirs


# --- equivariant density and Futaki ------------------------------------------

def test_sphere_equivariant_density_example():
    model = potential(projective_line())
    dens = equivariant_density(model, (-1 / (2 * np.pi),), 5)
    assert abs(float(dens.lhs) - 1 / (4 * np.pi)) < 1e-15
    assert abs(dens.rhs - 1 / (4 * np.pi)) < 1e-12


@pytest.mark.parametrize("shift", [0.0, 0.5, -1.25])
@pytest.mark.parametrize("k", [2, 4])
def test_equivariant_density_on_f1(f1_quad, shift, k):
    model = potential(F1, quadrature=f1_quad)
    dens = equivariant_density(model, (1.0, -2.0), k, shift=shift, quadrature=f1_quad, tol=1e-10)
    assert abs(float(dens.lhs) - dens.rhs) < 1e-10


def test_equivariant_shift_covariance(f1_quad):
    model = potential(F1, quadrature=f1_quad)
    a = equivariant_density(model, (0, 1), 3, shift=0.0, quadrature=f1_quad)
    b = equivariant_density(model, (0, 1), 3, shift=0.75, quadrature=f1_quad)
    # a constant shift c moves both sides by -V c
    assert abs((b.rhs - a.rhs) + 0.75 * 1.5) < 1e-10
    assert b.lhs - a.lhs == Fraction(-9, 8)


def test_pointwise_tolerance_raises(f1_quad):
    model = potential(F1, quadrature=f1_quad)
    with pytest.raises(NormalisationError):
        equivariant_density(model, (0, 1), 3, quadrature=f1_quad, tol=1e-30)


@pytest.mark.parametrize("lam", [(0, 1), (1, 0), (1, -2)])
def test_futaki_matches_df(f1_quad, lam):
    model = potential(F1, quadrature=f1_quad)
    minus = tuple(-c for c in lam)
    assert abs(futaki_integral(model, lam, quadrature=f1_quad) - float(df_of(F1, minus))) < 1e-10


# --- large-k behaviour --------------------------------------------------------

def test_richardson_recovers_polynomial_limit():
    ks = np.arange(3, 8)
    assert abs(richardson(ks, 2.0 + 3 / ks - 5 / ks**2) - 2.0) < 1e-10


def test_chow_gap_is_order_one_over_k():
    # supplementary: k (Chow_k - DF) -> -(b2 - b0 a2/a0 - a1 q1) with q1 = (b1 - b0 a1/a0)/a0
    fit = fit_expansions(F1, (0, 1))
    a, b = fit.a, fit.b
    q1 = (b[1] - b[0] * a[1] / a[0]) / a[0]
    limit = -(b[2] - b[0] * a[2] / a[0] - a[1] * q1)
    assert limit == Fraction(-2, 27)
    k = 10**6
    assert abs(k * (chow_weight(fit, k) - df_invariant(fit)) - limit) < 1e-6


def test_bergman_remainder_trend(f1_quad):
    # supplementary: the averaged remainder after the curvature term shrinks faster than 1/k
    model = potential(F1, quadrature=f1_quad)
    s, sbar = scalar_curvature(model, f1_quad)
    rem = []
    for k in (8, 16):
        rho = bergman(model, hilb(model, k, f1_quad), f1_quad).rho_bar
        rem.append(f1_quad.integrate(np.abs(rho - 1 - (s - sbar) / (4 * np.pi * k))))
    assert rem[1] < rem[0] / 3
