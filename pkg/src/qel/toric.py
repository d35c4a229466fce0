"""Polarised toric manifolds: Delzant polytopes, section bases, potentials.

Conventions used throughout the package:

* a facet is a pair ``(normal, offset)`` describing ``<normal, x> + offset >= 0``;
* log coordinates ``t`` satisfy ``|z^alpha|^2 = exp(<alpha, t>)``;
* the Kahler potential ``phi(t)`` and symplectic potential ``u(x)`` are Legendre
  dual, ``x = grad phi(t)``, ``t = grad u(x)``; ``h^k = exp(-k phi)``;
* the angular measure is normalised so that ``omega^n / n!`` pushes forward to
  Lebesgue measure on the polytope, hence ``V = vol(P)``.
"""
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from itertools import combinations, product
import math

import numpy as np
from numpy.polynomial import polynomial as npoly

VOLUME_CONVENTION = "int_X omega^n/n! = vol(P); omega = (i/2pi) ddbar phi, h = exp(-phi)"
CURVATURE_CONVENTION = "S = -2pi sum_ij d_i d_j u^ij (so rho_bar = 1 + (S - Sbar)/(4 pi k) + O(k^-2))"


class PolytopeError(ValueError):
    """Raised for unbounded, non-lattice or non-Delzant polytopes."""


class PotentialError(ValueError):
    """Raised when a symplectic potential fails to be strictly convex."""

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


def _as_fraction(v):
    if isinstance(v, float):
        return Fraction(v).limit_denominator(10**9)
    return Fraction(v)


@dataclass(frozen=True)
class DelzantPolytope:
    """Facet presentation ``{x : <normals[i], x> + offsets[i] >= 0}``."""

    normals: tuple
    offsets: tuple
    name: str = ""

    def __post_init__(self):
        normals = tuple(tuple(int(c) for c in row) for row in self.normals)
        offsets = tuple(_as_fraction(c) for c in self.offsets)
        object.__setattr__(self, "normals", normals)
        object.__setattr__(self, "offsets", offsets)
        if len(normals) != len(offsets) or not normals:
            raise PolytopeError("facet normals and offsets must be non-empty and aligned")
        n = len(normals[0])
        if n not in (1, 2) or any(len(r) != n for r in normals):
            raise PolytopeError("only dimensions 1 and 2 are supported")
        for row in normals:
            if math.gcd(*[abs(c) for c in row]) != 1:
                raise PolytopeError(f"facet normal {row} is not primitive")
        self._check_delzant()

    @classmethod
    def from_facets(cls, facets, name=""):
        """Build from ``[[normal..., offset], ...]`` rows (the JSON layout)."""
        facets = [list(f) for f in facets]
        return cls(tuple(tuple(f[:-1]) for f in facets), tuple(f[-1] for f in facets), name)

    @property
    def dim(self):
        return len(self.normals[0])

    @property
    def normal_array(self):
        return np.array(self.normals, dtype=float)

    @property
    def offset_array(self):
        return np.array([float(c) for c in self.offsets])

    def facets(self):
        return [list(nu) + [c] for nu, c in zip(self.normals, self.offsets)]

    def _satisfies(self, point):
        return all(sum(a * b for a, b in zip(nu, point)) + c >= 0
                   for nu, c in zip(self.normals, self.offsets))

    @cached_property
    def vertices(self):
        """Vertices in exact arithmetic, lexicographically sorted."""
        n = self.dim
        found = set()
        for idx in combinations(range(len(self.normals)), n):
            rows = [self.normals[i] for i in idx]
            rhs = [-self.offsets[i] for i in idx]
            if n == 1:
                if rows[0][0] == 0:
                    continue
                pt = (Fraction(rhs[0], rows[0][0]),)
            else:
                det = rows[0][0] * rows[1][1] - rows[0][1] * rows[1][0]
                if det == 0:
                    continue
                pt = ((rhs[0] * rows[1][1] - rows[0][1] * rhs[1]) / det,
                      (rows[0][0] * rhs[1] - rhs[0] * rows[1][0]) / det)
            if self._satisfies(pt):
                found.add(pt)
        if len(found) < n + 1:
            raise PolytopeError("polytope is empty, degenerate or unbounded")
        return tuple(sorted(found))

    def active_facets(self, vertex):
        return [i for i, (nu, c) in enumerate(zip(self.normals, self.offsets))
                if sum(a * b for a, b in zip(nu, vertex)) + c == 0]

    def _check_delzant(self):
        verts = self.vertices
        n = self.dim
        if n == 2:
            self._check_bounded()
        for v in verts:
            if any(c.denominator != 1 for c in v):
                raise PolytopeError(f"vertex {tuple(map(str, v))} is not a lattice point")
            act = self.active_facets(v)
            if len(act) != n:
                raise PolytopeError(f"vertex {tuple(map(str, v))} lies on {len(act)} facets")
            m = [self.normals[i] for i in act]
            det = m[0][0] if n == 1 else m[0][0] * m[1][1] - m[0][1] * m[1][0]
            if abs(det) != 1:
                raise PolytopeError(
                    f"normals at vertex {tuple(map(str, v))} do not form a lattice basis")

    def _check_bounded(self):
        # a 2d facet presentation is bounded iff the normals positively span the plane
        angles = sorted(math.atan2(nu[1], nu[0]) for nu in self.normals)
        gaps = [b - a for a, b in zip(angles, angles[1:])] + [angles[0] + 2 * math.pi - angles[-1]]
        if max(gaps) >= math.pi:
            raise PolytopeError("polytope is unbounded")

    @cached_property
    def volume(self):
        """Exact Euclidean volume (length in dimension one)."""
        verts = self.vertices
        if self.dim == 1:
            return verts[-1][0] - verts[0][0]
        cx = sum(v[0] for v in verts) / len(verts)
        cy = sum(v[1] for v in verts) / len(verts)
        ordered = sorted(verts, key=lambda v: math.atan2(float(v[1] - cy), float(v[0] - cx)))
        area = Fraction(0)
        for a, b in zip(ordered, ordered[1:] + ordered[:1]):
            area += a[0] * b[1] - a[1] * b[0]
        return abs(area) / 2

    def slack(self, x):
        """Affine functions ``l_i(x)`` evaluated on ``x`` of shape ``(..., n)``."""
        return np.asarray(x, dtype=float) @ self.normal_array.T + self.offset_array


def projective_line(degree=1):
    """``P^1`` polarised by ``O(degree)``: the interval ``[0, degree]``."""
    return DelzantPolytope(((1,), (-1,)), (0, degree), name=f"P1(O({degree}))")


def product_of_lines(a=1, b=1):
    """``P^1 x P^1`` with polarisation ``O(a, b)``."""
    return DelzantPolytope(((1, 0), (0, 1), (-1, 0), (0, -1)), (0, 0, a, b), name="P1xP1")


def hirzebruch(a=1, b=2):
    """Hirzebruch surface ``F_a``: ``x, y >= 0``, ``y <= 1``, ``x + a y <= b``."""
    if b <= a:
        raise PolytopeError("need b > a for an ample class")
    return DelzantPolytope(((1, 0), (0, 1), (0, -1), (-1, -a)), (0, 0, 1, b), name=f"F{a}")


@dataclass(frozen=True)
class LatticeBasis:
    """Lattice points of ``kP`` in lexicographic order (monomial sections)."""

    k: int
    points: np.ndarray = field(repr=False)

    @property
    def N(self):
        return len(self.points)

    def as_tuples(self):
        return [tuple(int(c) for c in p) for p in self.points]


def lattice_points(polytope, k):
    """Enumerate ``kP`` intersected with the integer lattice, lexicographically."""
    if int(k) != k or k < 1:
        raise ValueError("level k must be a positive integer")
    k = int(k)
    verts = polytope.vertices
    lo = [math.floor(min(v[i] for v in verts) * k) for i in range(polytope.dim)]
    hi = [math.ceil(max(v[i] for v in verts) * k) for i in range(polytope.dim)]
    pts = []
    for alpha in product(*[range(a, b + 1) for a, b in zip(lo, hi)]):
        if all(sum(c * a for c, a in zip(nu, alpha)) + k * off >= 0
               for nu, off in zip(polytope.normals, polytope.offsets)):
            pts.append(alpha)
    return LatticeBasis(k, np.array(pts, dtype=np.int64).reshape(len(pts), polytope.dim))


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Legendre rule on the polytope in moment coordinates.

    ``angles`` records the size of the uniform angular grid used when an
    integrand is not torus invariant; torus-invariant integrals ignore it.
    """

    nodes: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    order: int
    angles: int = 1

    @property
    def size(self):
        return len(self.weights)

    def integrate(self, values):
        """Integrate node samples (last axis is the node axis) in fixed order."""
        return np.asarray(values) @ self.weights

    def angular_grid(self, count=None):
        m = self.angles if count is None else count
        return 2 * np.pi * np.arange(m) / m


def build_quadrature(polytope, order=64, angles=1):
    """Tensor Gauss-Legendre rule, split at vertex heights in dimension two."""
    g, w = np.polynomial.legendre.leggauss(order)
    if polytope.dim == 1:
        a, b = (float(v[0]) for v in (polytope.vertices[0], polytope.vertices[-1]))
        nodes = (a + (b - a) * (g + 1) / 2)[:, None]
        return QuadratureRule(nodes, w * (b - a) / 2, order, angles)
    heights = sorted({v[1] for v in polytope.vertices})
    all_nodes, all_weights = [], []
    normals, offsets = polytope.normal_array, polytope.offset_array
    for y0, y1 in zip(heights, heights[1:]):
        y0, y1 = float(y0), float(y1)
        ys = y0 + (y1 - y0) * (g + 1) / 2
        wy = w * (y1 - y0) / 2
        for y, wyi in zip(ys, wy):
            lo, hi = -np.inf, np.inf
            for (nx, ny), c in zip(normals, offsets):
                rest = ny * y + c
                if nx > 0:
                    lo = max(lo, -rest / nx)
                elif nx < 0:
                    hi = min(hi, -rest / nx)
            xs = lo + (hi - lo) * (g + 1) / 2
            all_nodes.append(np.column_stack([xs, np.full(order, y)]))
            all_weights.append(w * (hi - lo) / 2 * wyi)
    return QuadratureRule(np.vstack(all_nodes), np.concatenate(all_weights), order, angles)


def perturbation_array(spec, dim):
    """Coefficient array for ``numpy.polynomial`` from a monomial mapping.

    Keys are exponent strings (``"2"`` or ``"2,1"``) or tuples.
    """
    if spec is None:
        return np.zeros((1,) * dim)
    if isinstance(spec, np.ndarray):
        return spec.astype(float)
    exps = {}
    for key, coef in spec.items():
        e = tuple(int(s) for s in key.split(",")) if isinstance(key, str) else tuple(np.atleast_1d(key))
        if len(e) != dim or min(e) < 0:
            raise ValueError(f"bad monomial exponent {key!r} for dimension {dim}")
        exps[e] = exps.get(e, 0.0) + float(coef)
    shape = tuple(max(e[i] for e in exps) + 1 for i in range(dim)) if exps else (1,) * dim
    arr = np.zeros(shape)
    for e, c in exps.items():
        arr[e] += c
    return arr


def bump_perturbation(eps):
    """``eps * x^2 (1 - x)^2`` on the unit interval, as a coefficient array."""
    return eps * np.array([0.0, 0.0, 1.0, -2.0, 1.0])


class PotentialModel:
    """Torus-invariant metric from a symplectic potential.

    ``u = sum_i l_i log l_i + p(x)`` with ``p`` a polynomial perturbation.
    All derivatives are analytic.
    """

    def __init__(self, polytope, perturbation=None):
        self.polytope = polytope
        self.coeffs = perturbation_array(perturbation, polytope.dim)
        self._deriv_cache = {}

    @property
    def dim(self):
        return self.polytope.dim

    @property
    def is_canonical(self):
        return not np.any(self.coeffs)

    def _poly_deriv(self, multi):
        if multi not in self._deriv_cache:
            c = self.coeffs
            for axis, m in enumerate(multi):
                if m:
                    c = npoly.polyder(c, m, axis=axis)
            self._deriv_cache[multi] = c
        return self._deriv_cache[multi]

    def _poly_eval(self, x, multi=None):
        c = self.coeffs if multi is None else self._poly_deriv(multi)
        if self.dim == 1:
            return npoly.polyval(x[..., 0], c)
        return npoly.polyval2d(x[..., 0], x[..., 1], c)

    def _multi(self, *axes):
        m = [0] * self.dim
        for a in axes:
            m[a] += 1
        return tuple(m)

    def u(self, x):
        x = np.asarray(x, dtype=float)
        ell = self.polytope.slack(x)
        return np.sum(ell * np.log(ell), axis=-1) + self._poly_eval(x)

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        ell = self.polytope.slack(x)
        g = (np.log(ell) + 1) @ self.polytope.normal_array
        extra = np.stack([self._poly_eval(x, self._multi(a)) for a in range(self.dim)], axis=-1)
        return g + extra

    def hess(self, x):
        x = np.asarray(x, dtype=float)
        nu = self.polytope.normal_array
        ell = self.polytope.slack(x)
        h = np.einsum("...m,ma,mb->...ab", 1 / ell, nu, nu)
        n = self.dim
        for a in range(n):
            for b in range(n):
                h[..., a, b] += self._poly_eval(x, self._multi(a, b))
        return h

    def third(self, x):
        x = np.asarray(x, dtype=float)
        nu = self.polytope.normal_array
        ell = self.polytope.slack(x)
        t = -np.einsum("...m,ma,mb,mc->...abc", ell**-2, nu, nu, nu)
        n = self.dim
        for a, b, c in product(range(n), repeat=3):
            t[..., a, b, c] += self._poly_eval(x, self._multi(a, b, c))
        return t

    def fourth(self, x):
        x = np.asarray(x, dtype=float)
        nu = self.polytope.normal_array
        ell = self.polytope.slack(x)
        f = 2 * np.einsum("...m,ma,mb,mc,md->...abcd", ell**-3, nu, nu, nu, nu)
        n = self.dim
        for a, b, c, d in product(range(n), repeat=4):
            f[..., a, b, c, d] += self._poly_eval(x, self._multi(a, b, c, d))
        return f

    def phi_at(self, x):
        """Kahler potential evaluated at the point with moment coordinate ``x``."""
        x = np.asarray(x, dtype=float)
        return np.sum(x * self.grad(x), axis=-1) - self.u(x)

    def log_section_norms(self, x, basis):
        """``log |s_alpha|^2_{h^k}`` at moment coordinates ``x``, shape ``(Q, N)``."""
        x = np.asarray(x, dtype=float)
        t = self.grad(x)
        k = basis.k
        alpha = basis.points.astype(float)
        return t @ alpha.T - k * np.sum(x * t, axis=-1)[:, None] + k * self.u(x)[:, None]

    def moment_from_t(self, t, tol=1e-13, max_iter=100):
        """Invert ``t = grad u(x)`` by damped Newton (the Legendre inverse)."""
        t = np.atleast_2d(np.asarray(t, dtype=float))
        verts = np.array([[float(c) for c in v] for v in self.polytope.vertices])
        x = np.tile(verts.mean(axis=0), (len(t), 1))
        for _ in range(max_iter):
            r = self.grad(x) - t
            if np.max(np.abs(r)) < tol * (1 + np.max(np.abs(t))):
                break
            step = np.linalg.solve(self.hess(x), r[..., None])[..., 0]
            lam = np.ones(len(x))
            for _ in range(60):
                trial = x - lam[:, None] * step
                bad = np.min(self.polytope.slack(trial), axis=-1) <= 0
                if not bad.any():
                    break
                lam[bad] *= 0.5
            x = x - lam[:, None] * step
        return x


def potential(polytope, perturbation=None, quadrature=None):
    """Build a :class:`PotentialModel` and check strict convexity on the nodes."""
    model = PotentialModel(polytope, perturbation)
    quad = quadrature or build_quadrature(polytope)
    eig = np.linalg.eigvalsh(model.hess(quad.nodes))
    low = eig.min(axis=-1)
    bad = np.flatnonzero(low <= 0)
    if bad.size:
        i = int(bad[0])
        raise PotentialError(
            f"Hessian of the symplectic potential is not positive definite at node "
            f"{quad.nodes[i].tolist()} (min eigenvalue {low[i]:.3e})", node=quad.nodes[i])
    return model


def barycentre(polytope, quadrature=None):
    quad = quadrature or build_quadrature(polytope)
    return quad.integrate(quad.nodes.T) / quad.weights.sum()


def hamiltonian(model, direction, quadrature=None, shift=0.0):
    """Hamiltonian ``psi = <direction, x> + shift`` sampled on the nodes.

    With ``omega = dx ^ dtheta / 2pi`` this generates ``v = 2 pi <direction, d/dtheta>``
    (``iota(v) omega = -d psi``).  Pair it with generator weights
    ``-(<direction, alpha> + k * shift)`` for ``theta_*(Jv)/2pi``.
    ``shift="centroid"`` picks the zero-average normalisation.
    """
    quad = quadrature or build_quadrature(model.polytope)
    lam = np.atleast_1d(np.asarray(direction, dtype=float))
    if isinstance(shift, str):
        if shift != "centroid":
            raise ValueError(f"unknown shift convention {shift!r}")
        shift = -float(lam @ barycentre(model.polytope, quad))
    return quad.nodes @ lam + shift


def abreu_scalar(model, x):
    """Scalar curvature ``-2 pi sum_ij d_i d_j u^{ij}`` at moment coordinates ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    w = np.linalg.inv(model.hess(x))
    t3 = model.third(x)
    t4 = model.fourth(x)
    # d_b d_a W = W U_b W U_a W + W U_a W U_b W - W U_ab W
    wuw = np.einsum("qij,qjkb,qkl->qilb", w, t3, w)     # (W U_b W)_il
    uw = np.einsum("qlja,qjm->qlma", t3, w)             # (U_a W)_lm
    term1 = np.einsum("qilb,qlma->qimab", wuw, uw)      # W U_b W U_a W, indices (i,m,a,b)
    second = term1 + np.swapaxes(term1, -1, -2)
    wu4w = np.einsum("qij,qjkab,qkl->qilab", w, t4, w)
    second = second - wu4w
    return -2 * np.pi * np.einsum("qabab->q", second)


def scalar_curvature(model, quadrature=None):
    """Return ``(S, Sbar)`` with ``S`` sampled on the quadrature nodes."""
    quad = quadrature or build_quadrature(model.polytope)
    s = abreu_scalar(model, quad.nodes)
    return s, quad.integrate(s) / quad.weights.sum()


@dataclass(frozen=True)
class TorusGenerator:
    """Diagonal generator ``w(alpha) = <direction, alpha> + k * shift``."""

    direction: tuple
    shift: Fraction = Fraction(0)

    def __post_init__(self):
        object.__setattr__(self, "direction", tuple(np.atleast_1d(self.direction).tolist()))

    def weights(self, basis):
        lam = np.asarray(self.direction, dtype=float)
        return basis.points @ lam + basis.k * float(self.shift)

    def exact_weights(self, basis):
        lam = [_as_fraction(c) for c in self.direction]
        s = _as_fraction(self.shift)
        return [sum(l * int(a) for l, a in zip(lam, p)) + basis.k * s for p in basis.points]

    def centred(self, basis):
        w = self.weights(basis)
        return w - w.mean()

    def matrix(self, basis, centred=True):
        return np.diag(self.centred(basis) if centred else self.weights(basis))
