"""Algebraic stability data of torus test configurations.

All lattice sums run in rational arithmetic.  A direction ``lam`` stands for
the product test configuration whose generator acts on the monomial ``z^a``
with weight ``<lam, a>`` (optionally plus ``k * shift``).  Its Hamiltonian is
``psi = <lam', x> + c0`` where ``theta_*(Jv)/2pi = -diag(<lam', a> + k c0)``, so
the weight vector ``w`` corresponds to ``lam' = -lam``.
"""
from dataclasses import dataclass, field
from fractions import Fraction
import math

import numpy as np

from .exact import NonPolynomialError, evaluate, fit_polynomial, leading
from .quantisation import bergman, hilb
from .toric import build_quadrature, hamiltonian, lattice_points, scalar_curvature


class DegenerateActionError(ValueError):
    """An action with zero norm was used as a projection direction."""


class NormalisationError(ValueError):
    """Two representations of the same quantity disagree beyond tolerance."""


def _fractions(values):
    return [Fraction(v) for v in np.atleast_1d(values).tolist()]


def exact_weights(basis, direction, shift=0):
    lam = _fractions(direction)
    s = Fraction(shift)
    return [sum((l * int(a) for l, a in zip(lam, p)), Fraction(0)) + basis.k * s
            for p in basis.points]


def generator_at_level(polytope, direction, k, exact=False):
    """Centred diagonal generator ``<lam, a> - mean`` at level ``k``.

    Returns the diagonal (a list of Fractions when ``exact``, else an array).
    """
    basis = lattice_points(polytope, k)
    w = exact_weights(basis, direction)
    mean = sum(w, Fraction(0)) / basis.N
    centred = [v - mean for v in w]
    if exact:
        return centred
    return np.array([float(v) for v in centred])


def default_levels(polytope, extra=2):
    n = polytope.dim
    return list(range(1, n + 4 + extra))


@dataclass
class ExpansionFit:
    """Exact fits ``N(k) = sum a_i k^{n-i}`` and ``tr A_k = sum b_i k^{n+1-i}``.

    ``a`` and ``b`` are listed from the leading coefficient down.  ``shift``
    records the multiple of ``k`` added to every weight.
    """

    dim: int
    a: list
    b: list
    ks: list
    direction: tuple
    shift: Fraction = Fraction(0)
    centred: bool = False
    residual: float = 0.0
    _n_coeffs: list = field(repr=False, default=None)
    _tr_coeffs: list = field(repr=False, default=None)

    def N(self, k):
        return evaluate(self._n_coeffs, k)

    def trace(self, k):
        return evaluate(self._tr_coeffs, k)

    def to_json(self):
        return {"a": [str(v) for v in self.a], "b": [str(v) for v in self.b],
                "a_float": [float(v) for v in self.a], "b_float": [float(v) for v in self.b],
                "ks": list(self.ks), "direction": [str(Fraction(v)) for v in self.direction],
                "shift": str(self.shift), "centred": self.centred, "residual": self.residual}


def fit_expansions(polytope, direction, k_list=None, shift=0, centred=False):
    """Exact polynomial fits of ``dim H^0(L^k)`` and ``tr A_k``.

    The generator is un-centred by default (weights ``<lam, a> + k * shift``);
    ``centred=True`` subtracts the mean at each level, which makes the trace
    vanish identically.
    """
    n = polytope.dim
    ks = list(k_list) if k_list is not None else default_levels(polytope)
    if len(ks) < n + 3:
        raise ValueError(f"need at least {n + 3} levels, got {len(ks)}")
    counts, traces = [], []
    for k in ks:
        basis = lattice_points(polytope, k)
        w = exact_weights(basis, direction, shift)
        counts.append(basis.N)
        traces.append(Fraction(0) if centred else sum(w, Fraction(0)))
    n_coeffs = fit_polynomial(ks, counts, n)
    tr_coeffs = fit_polynomial(ks, traces, n + 1)
    a = [leading(n_coeffs, n - i) for i in range(n + 1)]
    b = [leading(tr_coeffs, n + 1 - i) for i in range(n + 2)]
    return ExpansionFit(n, a, b, ks, tuple(_fractions(direction)), Fraction(shift), centred,
                        0.0, n_coeffs, tr_coeffs)


def chow_weight(fit, r):
    """``Chow_r = r b_0 - a_0 tr(A_r) / N_r`` (exact)."""
    return r * fit.b[0] - fit.a[0] * fit.trace(r) / fit.N(r)


def df_invariant(fit):
    """``DF = (a_1 b_0 - a_0 b_1) / a_0`` (exact)."""
    return (fit.a[1] * fit.b[0] - fit.a[0] * fit.b[1]) / fit.a[0]


def df_of(polytope, direction, shift=0):
    return df_invariant(fit_expansions(polytope, direction, shift=shift))


def _power_sums(polytope, k, directions):
    basis = lattice_points(polytope, k)
    ws = [exact_weights(basis, d) for d in directions]
    return basis.N, ws


def inner_product(polytope, dir1, dir2, k_list=None):
    """Leading ``k^{n+2}`` coefficient of ``tr(A_k B_k)`` for centred generators.

    ``tr(A_k B_k) = sum w1 w2 - (sum w1)(sum w2)/N`` is a ratio of
    polynomials in general, so its leading coefficient is assembled from the
    exact fits of the three lattice sums.
    """
    n = polytope.dim
    ks = list(k_list) if k_list is not None else default_levels(polytope)
    if len(ks) < n + 4:
        ks = list(range(1, n + 6))
    cross, s1, s2 = [], [], []
    for k in ks:
        _, (w1, w2) = _power_sums(polytope, k, [dir1, dir2])
        cross.append(sum((x * y for x, y in zip(w1, w2)), Fraction(0)))
        s1.append(sum(w1, Fraction(0)))
        s2.append(sum(w2, Fraction(0)))
    counts = [lattice_points(polytope, k).N for k in ks]
    a0 = leading(fit_polynomial(ks, counts, n), n)
    c12 = leading(fit_polynomial(ks, cross, n + 2), n + 2)
    c1 = leading(fit_polynomial(ks, s1, n + 1), n + 1)
    c2 = leading(fit_polynomial(ks, s2, n + 1), n + 1)
    return c12 - c1 * c2 / a0


def centred_trace_product(polytope, dir1, dir2, k):
    """``tr(A_k B_k)`` at one level (exact)."""
    N, (w1, w2) = _power_sums(polytope, k, [dir1, dir2])
    return (sum((x * y for x, y in zip(w1, w2)), Fraction(0))
            - sum(w1, Fraction(0)) * sum(w2, Fraction(0)) / N)


def inner_product_matrix(polytope, directions=None, k_list=None):
    """Gram matrix ``Q_ij = <e_i, e_j>`` (exact)."""
    n = polytope.dim
    dirs = directions if directions is not None else [tuple(int(i == j) for j in range(n))
                                                       for i in range(n)]
    return [[inner_product(polytope, a, b, k_list) for b in dirs] for a in dirs]


@dataclass
class InnerProductTable:
    names: list
    directions: list
    values: list
    ks: list

    def to_json(self):
        return {"names": self.names, "ks": self.ks,
                "values": [[str(v) for v in row] for row in self.values],
                "values_float": [[float(v) for v in row] for row in self.values]}


def inner_product_table(polytope, actions, k_list=None):
    """Pairwise inner products of named directions ``{name: lam}``."""
    names = list(actions)
    dirs = [actions[k] for k in names]
    ks = list(k_list) if k_list is not None else default_levels(polytope)
    return InnerProductTable(names, dirs, inner_product_matrix(polytope, dirs, ks), ks)


def _solve_rational(mat, rhs):
    """Gaussian elimination over the rationals."""
    n = len(rhs)
    m = [list(row) + [r] for row, r in zip(mat, rhs)]
    for c in range(n):
        piv = next((r for r in range(c, n) if m[r][c] != 0), None)
        if piv is None:
            raise DegenerateActionError("singular inner-product matrix")
        m[c], m[piv] = m[piv], m[c]
        for r in range(n):
            if r != c and m[r][c] != 0:
                f = m[r][c] / m[c][c]
                m[r] = [x - f * y for x, y in zip(m[r], m[c])]
    return [m[i][n] / m[i][i] for i in range(n)]


@dataclass
class ExtremalData:
    """Extremal direction ``chi`` (weights ``<chi, a>``) and its scaled generator.

    ``slope`` is the affine slope of the projection of ``S`` (quadrature side
    when a model is supplied) and ``chi`` the exact torus direction with
    ``DF(chi) = <chi, chi>``.
    """

    chi: list
    slope: np.ndarray
    df_chi: Fraction
    norm_chi: Fraction
    chi_quadrature: np.ndarray = None
    projection_l2: float = float("nan")

    def generator(self, polytope, k):
        """``B_{chi,k}`` (centred diagonal)."""
        return generator_at_level(polytope, self.chi, k)

    @property
    def is_zero(self):
        return all(c == 0 for c in self.chi)

    def to_json(self):
        return {"chi": [str(c) for c in self.chi], "chi_float": [float(c) for c in self.chi],
                "slope": list(map(float, self.slope)), "DF_chi": float(self.df_chi),
                "inner_chi_chi": float(self.norm_chi),
                "chi_quadrature": None if self.chi_quadrature is None
                else list(map(float, self.chi_quadrature)),
                "projection_l2": self.projection_l2}


def extremal_normalisation(polytope, model=None, quadrature=None):
    """Extremal direction from the affine ``L^2`` projection of the scalar curvature.

    Exact side: with ``d_j = DF(-e_j)`` and ``Q`` the inner-product matrix,
    ``chi = -Q^{-1} d`` satisfies ``DF(chi) = <chi, chi> = d^T Q^{-1} d``.
    Quadrature side (when ``model`` is given): project ``S - Sbar`` onto the
    centred coordinates to get the slope ``sigma``; then ``chi = -sigma/4pi``.
    """
    n = polytope.dim
    units = [tuple(int(i == j) for j in range(n)) for i in range(n)]
    q = inner_product_matrix(polytope)
    d = [df_of(polytope, tuple(-c for c in e)) for e in units]
    if all(v == 0 for v in d):
        chi = [Fraction(0)] * n
    else:
        chi = [-v for v in _solve_rational(q, d)]
    df_chi = df_of(polytope, chi)
    norm = sum(chi[i] * q[i][j] * chi[j] for i in range(n) for j in range(n))
    slope = -4 * np.pi * np.array([float(c) for c in chi])
    chi_q, l2 = None, float("nan")
    if model is not None:
        quad = quadrature or build_quadrature(polytope)
        s, sbar = scalar_curvature(model, quad)
        x = quad.nodes - quad.integrate(quad.nodes.T) / quad.weights.sum()
        gram = np.einsum("q,qi,qj->ij", quad.weights, x, x)
        rhs = x.T @ (quad.weights * (s - sbar))
        sigma = np.linalg.solve(gram, rhs)
        chi_q = -sigma / (4 * np.pi)
        slope = sigma
        l2 = float(quad.integrate((x @ sigma) ** 2))
    return ExtremalData(chi, slope, df_chi, norm, chi_q, l2)


def relative_df(polytope, direction, basis_dirs, shift=0):
    """``DF(alpha) - sum_i <alpha, beta_i>/<beta_i, beta_i> DF(beta_i)``.

    ``basis_dirs`` should be mutually orthogonal (a single extremal direction
    in practice).  Exact.
    """
    value = df_of(polytope, direction, shift)
    for beta in basis_dirs:
        bb = inner_product(polytope, beta, beta)
        if bb == 0:
            raise DegenerateActionError(f"<beta, beta> = 0 for beta = {beta}")
        value -= inner_product(polytope, direction, beta) / bb * df_of(polytope, beta)
    return value


def relative_df_chi(polytope, direction, extremal, shift=0):
    """``DF_chi(alpha) = DF(alpha) - <alpha, chi>`` under ``DF(chi) = <chi, chi>``."""
    if extremal.is_zero:
        return df_of(polytope, direction, shift)
    return df_of(polytope, direction, shift) - inner_product(polytope, direction, extremal.chi)


def scan_directions(polytope, radius=2):
    """Primitive integer directions with entries in ``[-radius, radius]``."""
    n = polytope.dim
    grid = np.array(np.meshgrid(*[np.arange(-radius, radius + 1)] * n, indexing="ij"))
    out = []
    for v in grid.reshape(n, -1).T:
        if np.any(v) and math.gcd(*map(int, v)) == 1:
            out.append(tuple(int(c) for c in v))
    return out


@dataclass
class EquivariantDensity:
    k: int
    lhs: Fraction
    rhs: float
    density_gram: np.ndarray = field(repr=False)
    density_closed: np.ndarray = field(repr=False)
    pointwise_error: float = float("nan")

    def to_json(self):
        return {"k": self.k, "lhs": float(self.lhs), "lhs_exact": str(self.lhs), "rhs": self.rhs,
                "difference": float(self.lhs) - self.rhs,
                "pointwise_error": self.pointwise_error}


def equivariant_density(model, direction, k, shift=0.0, quadrature=None, tol=None):
    """Both sides of the equivariant density identity for ``psi = <lam, x> + shift``.

    ``lhs = (V/kN) tr(theta_*(Jv)/2pi) = -(V/kN) sum (<lam, a> + k shift)`` from
    exact lattice sums; ``rhs = -int psi rho_bar - (1/4pi k) int (d psi, d rho_bar)``
    by quadrature, with ``(d psi, d rho_bar)/4pi = <lam, d rho_bar/dt>``.
    Pointwise, the weighted Gram density ``sum (<lam, a> + k shift)|s'_a|^2``
    is compared with ``k psi rho_bar + <lam, d rho_bar/dt>``.
    """
    polytope = model.polytope
    quad = quadrature or build_quadrature(polytope)
    basis = lattice_points(polytope, k)
    V = polytope.volume
    w = exact_weights(basis, direction, shift)
    lhs = -V / (k * basis.N) * sum(w, Fraction(0))
    form = hilb(model, k, quad)
    sample = bergman(model, form, quad)
    lam = np.atleast_1d(np.asarray(direction, dtype=float))
    psi = hamiltonian(model, lam, quad, shift=float(shift))
    pairing = sample.grad_t @ lam
    rhs = float(-quad.integrate(psi * sample.rho_bar) - quad.integrate(pairing) / k)
    logs = model.log_section_norms(quad.nodes, basis)
    terms = np.exp(logs - np.log(form.diag)[None, :])
    gram_density = terms @ np.array([float(v) for v in w])
    closed = k * psi * sample.rho_bar + pairing
    err = float(np.max(np.abs(gram_density - closed)))
    if tol is not None and err > tol:
        raise NormalisationError(f"pointwise densities differ by {err:.3e}")
    return EquivariantDensity(k, lhs, rhs, gram_density, closed, err)


def futaki_integral(model, direction, shift=0.0, quadrature=None):
    """``(1/4pi) int psi (S - Sbar)`` for ``psi = <lam, x> + shift``.

    Matches ``DF`` of the generator with weights ``-(<lam, a> + k shift)``.
    """
    quad = quadrature or build_quadrature(model.polytope)
    s, sbar = scalar_curvature(model, quad)
    psi = hamiltonian(model, direction, quad, shift=shift)
    return float(quad.integrate(psi * (s - sbar)) / (4 * np.pi))


def richardson(ks, values, order=None):
    """Extrapolate ``values(k) = L + c_1/k + ... `` to ``k -> infinity``.

    Fits a polynomial in ``1/k`` through the samples (degree ``len - 1`` by
    default) and returns its constant term.
    """
    h = 1 / np.asarray(ks, dtype=float)
    deg = len(ks) - 1 if order is None else order
    coef = np.polynomial.polynomial.polyfit(h, np.asarray(values, dtype=float), deg)
    return float(coef[0])


@dataclass
class LimitWeight:
    ks: list
    sequence: list
    limit: float
    target: Fraction
    df_beta: Fraction

    def to_json(self):
        return {"ks": self.ks, "sequence": self.sequence, "limit": self.limit,
                "inner_beta_chi": float(self.target), "DF_beta": float(self.df_beta),
                "gap": self.limit - float(self.target),
                "df_minus_limit": float(self.df_beta) - self.limit}


def limit_weight_check(polytope, reports, direction, extremal=None):
    """Sequence ``(V/N) tr(B_k M_k^{-1})`` from converged reports and its limit.

    ``B_k`` is the centred generator of ``direction``; the limit is compared
    with ``<beta, chi>``.
    """
    if not reports:
        raise ValueError("no balance reports supplied")
    for r in reports:
        if not r.converged:
            raise ValueError(f"report at k={r.k} did not converge")
    extremal = extremal or extremal_normalisation(polytope)
    V = float(polytope.volume)
    ks, seq = [], []
    for r in sorted(reports, key=lambda r: r.k):
        b = generator_at_level(polytope, direction, r.k)
        m = 1 + r.C_A + r.A / (2 * np.pi * r.k)
        seq.append(float(V / len(b) * np.sum(b / m)))
        ks.append(r.k)
    limit = richardson(ks, seq) if len(ks) > 1 else seq[-1]
    target = inner_product(polytope, direction, extremal.chi)
    return LimitWeight(ks, seq, limit, target, df_of(polytope, direction))


__all__ = [
    "DegenerateActionError", "NormalisationError", "NonPolynomialError", "ExpansionFit",
    "InnerProductTable", "ExtremalData", "EquivariantDensity", "LimitWeight",
    "generator_at_level", "fit_expansions", "chow_weight", "df_invariant", "df_of",
    "inner_product", "inner_product_matrix", "inner_product_table", "centred_trace_product",
    "extremal_normalisation", "relative_df", "relative_df_chi", "scan_directions",
    "equivariant_density", "futaki_integral", "richardson", "limit_weight_check",
]
