"""Hilbert and Fubini-Study maps, Bergman functions and the centre of mass.

A :class:`HermitianForm` ``H`` is the Gram matrix ``H[a, b] = <s_a, s_b>`` of
the monomial sections in lexicographic lattice order.  Its symmetric
orthonormal frame is ``G = H^{-1/2}`` (column ``i`` holds the coefficients of
``s'_i``); diagonal forms keep diagonal frames, so torus weights survive.

The Fubini-Study data of a form is sampled on a fixed reference grid: the
moment coordinates of the canonical (Guillemin) potential, where
``t = grad u_0(x)``.  Dense forms are supported on ``P^1`` only and add a
uniform angular grid.
"""
from dataclasses import dataclass, field
from functools import cached_property
import math

import numpy as np
from scipy.special import logsumexp

from .toric import PotentialModel, build_quadrature, lattice_points


class FactorisationError(np.linalg.LinAlgError):
    """Raised when a Hermitian form is not positive definite."""


class PositivityError(ValueError):
    """Raised when a Fubini-Study form fails to be positive at a node."""

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class HermitianForm:
    """Positive-definite Hermitian form on sections, with cached spectral data."""

    def __init__(self, matrix, diagonal=None, check=True):
        m = np.asarray(matrix)
        if m.ndim == 1:
            m = np.diag(m)
            diagonal = True if diagonal is None else diagonal
        if not np.iscomplexobj(m):
            m = m.astype(float)
        if diagonal is None:
            diagonal = not np.any(m - np.diag(np.diag(m)))
        if diagonal:
            m = np.diag(np.real(np.diag(m)).astype(float))
        self.matrix = m
        self.diagonal = bool(diagonal)
        if check:
            scale = max(np.max(np.abs(m)), 1e-300)
            if np.max(np.abs(m - m.conj().T)) > 1e-12 * scale:
                raise FactorisationError("form is not Hermitian")
            if self.eigenvalues.min() <= 0:
                raise FactorisationError(
                    f"form is not positive definite (min eigenvalue {self.eigenvalues.min():.3e})")

    @classmethod
    def from_diagonal(cls, values):
        return cls(np.asarray(values, dtype=float))

    @property
    def N(self):
        return self.matrix.shape[0]

    @property
    def diag(self):
        return np.real(np.diag(self.matrix))

    @cached_property
    def _eigh(self):
        if self.diagonal:
            return self.diag.copy(), np.eye(self.N)
        return np.linalg.eigh((self.matrix + self.matrix.conj().T) / 2)

    @property
    def eigenvalues(self):
        return self._eigh[0]

    def power(self, p):
        """``H**p`` through the symmetric factorisation."""
        lam, vec = self._eigh
        if self.diagonal:
            return np.diag(lam**p)
        return (vec * lam**p) @ vec.conj().T

    @cached_property
    def frame(self):
        """Symmetric orthonormal frame ``H^{-1/2}``."""
        return self.power(-0.5)

    def log(self):
        lam, vec = self._eigh
        if self.diagonal:
            return np.diag(np.log(lam))
        return (vec * np.log(lam)) @ vec.conj().T

    def scaled(self, c):
        return HermitianForm(self.matrix * c, diagonal=self.diagonal, check=False)

    def det_normalised(self):
        logdet = np.sum(np.log(self.eigenvalues))
        return self.scaled(math.exp(-logdet / self.N))

    def conjugate(self, g):
        """``G^* H G`` for an invertible change of basis ``G``."""
        g = np.asarray(g)
        m = g.conj().T @ self.matrix @ g
        diag = self.diagonal and not np.any(g - np.diag(np.diag(g)))
        return HermitianForm((m + m.conj().T) / 2, diagonal=diag)

    def along_geodesic(self, direction, s):
        """``H^{1/2} exp(-s B) H^{1/2}`` with ``B`` Hermitian in the orthonormal frame."""
        b = np.asarray(direction)
        root = self.power(0.5)
        if self.diagonal and not np.any(b - np.diag(np.diag(b))):
            return HermitianForm(self.diag * np.exp(-s * np.real(np.diag(b))))
        lam, vec = np.linalg.eigh((b + b.conj().T) / 2)
        e = (vec * np.exp(-s * lam)) @ vec.conj().T
        m = root @ e @ root
        return HermitianForm((m + m.conj().T) / 2, diagonal=False)


@dataclass(frozen=True)
class BergmanSample:
    """Bergman data of a toric model at level ``k`` on the quadrature nodes.

    ``rho`` is taken against the unscaled ``L^2`` product (so it integrates to
    ``N``); ``rho_bar = (V/N) rho`` is the sum of squared norms of a
    ``Hilb``-orthonormal basis.  ``grad_t`` is ``d rho_bar / dt``.
    """

    k: int
    rho: np.ndarray = field(repr=False)
    rho_bar: np.ndarray = field(repr=False)
    grad_t: np.ndarray = field(repr=False)
    grad_norm: np.ndarray = field(repr=False)


def _volume(polytope):
    return float(polytope.volume)


def hilb(model, k, quadrature=None):
    """``Hilb(h) = (N/V) int h^k(s_a, s_b) omega^n/n!`` (diagonal for toric models)."""
    quad = quadrature or build_quadrature(model.polytope)
    basis = lattice_points(model.polytope, k)
    logs = model.log_section_norms(quad.nodes, basis)
    gram = np.exp(logs).T @ quad.weights
    if np.any(gram <= 0) or not np.all(np.isfinite(gram)):
        bad = np.flatnonzero(~(gram > 0) | ~np.isfinite(gram))
        raise FactorisationError(f"Gram entries underflow at lattice points {basis.points[bad].tolist()}")
    return HermitianForm.from_diagonal(gram * basis.N / _volume(model.polytope))


def bergman(model, form, quadrature=None):
    """Bergman function of ``h`` from its Hilbert form ``form = hilb(model, k)``."""
    quad = quadrature or build_quadrature(model.polytope)
    basis = lattice_points(model.polytope, _level_of(model.polytope, form.N))
    logs = model.log_section_norms(quad.nodes, basis)
    if not form.diagonal:
        raise ValueError("Bergman samples require a torus-invariant (diagonal) form")
    terms = np.exp(logs - np.log(form.diag)[None, :])
    rho_bar = terms.sum(axis=1)
    x = quad.nodes
    k = basis.k
    shift = basis.points[None, :, :] - k * x[:, None, :]
    grad_t = np.einsum("qa,qai->qi", terms, shift)
    hess_u = model.hess(x)
    grad_norm = 4 * np.pi * np.einsum("qi,qij,qj->q", grad_t, hess_u, grad_t)
    rho = rho_bar * basis.N / _volume(model.polytope)
    return BergmanSample(k, rho, rho_bar, grad_t, np.sqrt(grad_norm))


def rawnsley_check(model, k, quadrature=None):
    """``sup |h^k_{FS(Hilb h)} rho_bar / h^k - 1|`` over the nodes."""
    quad = quadrature or build_quadrature(model.polytope)
    form = hilb(model, k, quad)
    sample = bergman(model, form, quad)
    basis = lattice_points(model.polytope, k)
    t = model.grad(quad.nodes)
    log_fs = -logsumexp(t @ basis.points.T.astype(float) - np.log(form.diag)[None, :], axis=1)
    log_h = -k * model.phi_at(quad.nodes)
    return float(np.max(np.abs(np.expm1(log_fs + np.log(sample.rho_bar) - log_h))))


def _level_of(polytope, N):
    k = 1
    while True:
        n = lattice_points(polytope, k).N
        if n == N:
            return k
        if n > N:
            raise ValueError(f"no level k with {N} lattice points")
        k += 1


class FSMetric:
    """Fubini-Study metric of a form, sampled on the reference grid.

    Attributes (node arrays, node axis first):
        weights: quadrature weights of the reference measure ``dx dtheta/2pi``.
        density: ``omega_H^n/n!`` relative to that measure.
        log_f: ``k phi_H`` (log of the sum of squared frame sections).
        phi0: the reference Kahler potential at the same points.
    """

    def __init__(self, form, polytope, k=None, quadrature=None, angles=None):
        self.form = form
        self.polytope = polytope
        self.k = k if k is not None else _level_of(polytope, form.N)
        self.basis = lattice_points(polytope, self.k)
        if self.basis.N != form.N:
            raise ValueError("form size does not match the number of lattice points")
        self.quadrature = quadrature or build_quadrature(polytope)
        self.reference = PotentialModel(polytope)
        self.V = _volume(polytope)
        n = polytope.dim
        x = self.quadrature.nodes
        t = self.reference.grad(x)
        jac = np.linalg.det(self.reference.hess(x))
        self._phi0_nodes = np.sum(x * t, axis=-1) - self.reference.u(x)
        alpha = self.basis.points.astype(float)
        k = self.k
        if form.diagonal:
            logits = t @ alpha.T - np.log(form.diag)[None, :]
            lse = logsumexp(logits, axis=1)
            p = np.exp(logits - lse[:, None])
            mean = p @ alpha
            cov = np.einsum("qa,ai,aj->qij", p, alpha, alpha) - np.einsum("qi,qj->qij", mean, mean)
            hess_phi = cov / k
            self.weights = self.quadrature.weights
            self.density = np.linalg.det(hess_phi) * jac
            self.log_f = lse
            self.phi0 = self._phi0_nodes
            self.probabilities = p
            self.moment = mean / k
            self.hess_phi = hess_phi
            self.hess_phi0 = np.linalg.inv(self.reference.hess(x))
            self.jacobian = jac
            self._dense = None
        else:
            if n != 1:
                raise ValueError("non-diagonal forms are supported on P^1 only")
            m = angles or max(16 * k + 32, 96)
            theta = 2 * np.pi * np.arange(m) / m
            tt = np.repeat(t[:, 0], m)
            th = np.tile(theta, len(t))
            logv = 0.5 * np.outer(tt, alpha[:, 0])
            # common rescaling of the monomials cancels in every ratio below
            row_max = logv.max(axis=1)
            logv -= row_max[:, None]
            v = np.exp(logv + 1j * np.outer(th, alpha[:, 0]))
            g = form.frame
            w = v @ g
            dw = (v * alpha[:, 0]) @ g
            f = np.sum(np.abs(w) ** 2, axis=1)
            cross = np.sum(w.conj() * dw, axis=1)
            lagrange = (f * np.sum(np.abs(dw) ** 2, axis=1) - np.abs(cross) ** 2) / f**2
            self.weights = np.repeat(self.quadrature.weights, m) / m
            self.density = lagrange / k * np.repeat(jac, m)
            self.log_f = np.log(f) + 2 * row_max
            self.phi0 = np.repeat(self._phi0_nodes, m)
            self.jacobian = np.repeat(jac, m)
            self._dense = (v, w, f)
            self.angles = m
        if np.any(self.density <= 0):
            i = int(np.argmin(self.density))
            raise PositivityError(f"omega_H is not positive at node {i}", node=i)

    @property
    def n(self):
        return self.polytope.dim

    @property
    def phi(self):
        return self.log_f / self.k

    def kernel(self):
        """``K = int conj(v) v^T / F omega_H^n/n!`` in the monomial basis."""
        wt = self.weights * self.density
        if self._dense is None:
            return np.diag(self.form.diag * (self.probabilities.T @ wt))
        v, w, f = self._dense
        vv = v / np.sqrt(f)[:, None]
        return (vv.conj().T * wt) @ vv

    def centre_of_mass(self):
        """Centre of mass in the symmetric ``H``-orthonormal frame (trace ``k^n V``)."""
        kern = self.kernel()
        if self._dense is None:
            return self.k**self.n * np.diag(np.diag(kern) / self.form.diag)
        g = self.form.frame
        mu = self.k**self.n * (g.conj().T @ kern @ g)
        return (mu + mu.conj().T) / 2

    def hilb(self):
        """``Hilb(FS(H))`` in the monomial basis."""
        kern = self.kernel()
        m = self.basis.N / self.V * kern
        return HermitianForm((m + m.conj().T) / 2, diagonal=self.form.diagonal)

    def rho_bar(self):
        """Rescaled Bergman function of ``omega_H`` on the nodes."""
        mu = self.centre_of_mass()
        scale = self.V * self.k**self.n / self.basis.N
        if self._dense is None:
            return scale * self.probabilities @ (1 / np.diag(mu).real)
        v, w, f = self._dense
        wn = w / np.sqrt(f)[:, None]
        inv = np.linalg.inv(mu)
        return scale * np.real(np.einsum("qi,ij,qj->q", wn, inv, wn.conj()))

    def rho_bar_gradient(self):
        """``(rho_bar, d rho_bar / dt)`` for diagonal forms."""
        if self._dense is not None:
            raise ValueError("gradient only available for torus-invariant forms")
        mu = np.diag(self.centre_of_mass())
        scale = self.V * self.k**self.n / self.basis.N
        p = self.probabilities
        rb = scale * p @ (1 / mu)
        alpha = self.basis.points.astype(float)
        shifted = alpha[None, :, :] - self.k * self.moment[:, None, :]
        grad = scale * np.einsum("qa,a,qai->qi", p, 1 / mu, shifted)
        return rb, grad

    def energy(self):
        """Monge-Ampere energy ``E(phi_H)`` relative to the reference potential.

        Normalised so that ``dE = int dphi omega_phi^n/n!``.
        """
        diff = self.phi - self.phi0
        wt = self.weights * self.jacobian
        if self.n == 1:
            dens_h = self.density / self.jacobian
            dens0 = 1 / self.jacobian
            return float(np.sum(wt * diff * (dens_h + dens0)) / 2)
        a, b = self.hess_phi, self.hess_phi0
        mixed = (a[:, 0, 0] * b[:, 1, 1] + a[:, 1, 1] * b[:, 0, 0]
                 - a[:, 0, 1] * b[:, 1, 0] - a[:, 1, 0] * b[:, 0, 1]) / 2
        total = np.linalg.det(a) + mixed + np.linalg.det(b)
        return float(np.sum(wt * diff * total) / 3)


def fs(form, polytope, k=None, quadrature=None, angles=None):
    """Fubini-Study map: sample the metric ``FS(H)`` on the reference grid."""
    return FSMetric(form, polytope, k, quadrature, angles)


def centre_of_mass(form, polytope, k=None, quadrature=None, angles=None):
    return FSMetric(form, polytope, k, quadrature, angles).centre_of_mass()
