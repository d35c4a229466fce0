"""Balanced and relatively balanced forms via the modified balancing energy.

Sign conventions.  The form ``H`` is a Gram matrix and the energy is
``Z(H) = k^{n+1} E(FS(H)) + (k^n V/N) tr(M^{-1} log H)`` with
``M = (1 + C_A) I + A/(2 pi k)`` and ``E`` the Monge-Ampere energy relative
to the reference potential.  This is convex along ``H^{1/2} exp(sB) H^{1/2}``
(``B`` in the orthonormal frame) with ``dZ/ds = tr(B dZ)``,
``dZ = -mu + (k^n V/N) M^{-1}``.
"""
from dataclasses import dataclass, field
import logging
import math

import numpy as np
from scipy import optimize

from .quantisation import HermitianForm, fs
from .toric import build_quadrature, lattice_points

logger = logging.getLogger(__name__)

MODES = ("plain", "fixed-A", "self-consistent-A")


class BalancingError(RuntimeError):
    """Numerical failure: no admissible constant, line search or convergence failure."""


class NoCriticalPointError(BalancingError):
    """The energy is unbounded below along a torus direction."""


class CertificateError(BalancingError):
    """A certificate invariant that should be impossible was violated."""


def solve_CA(a, k, N=None, tol=1e-15, max_iter=200):
    """Solve ``sum_i 1/((1 + C) + a_i/(2 pi k)) = N`` for ``C``.

    ``a`` holds the eigenvalues of the generator.  Safeguarded Newton on
    ``s = 1 + C`` inside the bracket ``(-min d, 1 + max|d|]``.
    """
    d = np.asarray(a, dtype=float).ravel() / (2 * np.pi * k)
    N = len(d) if N is None else N
    if not np.all(np.isfinite(d)):
        raise BalancingError("generator has non-finite eigenvalues")
    if not np.any(d):
        return 0.0
    lo, hi = -d.min(), 1 + np.abs(d).max()

    def g(s):
        return np.sum(1 / (s + d)) - N

    s = hi
    for _ in range(max_iter):
        val = g(s)
        if val > 0:
            lo = s
        else:
            hi = s
        slope = -np.sum((s + d) ** -2)
        trial = s - val / slope
        s_new = trial if lo < trial <= hi else (lo + hi) / 2
        if abs(s_new - s) <= tol * max(1.0, abs(s)):
            s = s_new
            break
        s = s_new
    else:
        raise BalancingError("no admissible C_A: Newton iteration did not settle")
    if s + d.min() <= 1e-14:
        raise BalancingError("no admissible C_A: generator too large for positivity")
    return float(s - 1)


@dataclass
class BalanceProblem:
    """Data of one balancing run at level ``k``.

    ``A`` is the diagonal of the generator in the monomial basis.  In plain
    mode ``A = 0`` and ``C_A = 0``.
    """

    polytope: object
    k: int
    A: np.ndarray = None
    mode: str = "plain"
    quadrature: object = None
    angles: int = None
    torus: np.ndarray = None
    C_A: float = field(init=False, default=0.0)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.basis = lattice_points(self.polytope, self.k)
        self.quadrature = self.quadrature or build_quadrature(self.polytope)
        self.V = float(self.polytope.volume)
        if self.torus is None:
            self.torus = np.eye(self.polytope.dim)
        self.torus = np.atleast_2d(np.asarray(self.torus, dtype=float))
        self.set_generator(self.A)

    def set_generator(self, A):
        N = self.basis.N
        if A is None or self.mode == "plain":
            if A is not None and np.any(A):
                raise ValueError("plain mode requires A = 0")
            A = np.zeros(N)
        A = np.asarray(A, dtype=float)
        if A.ndim == 2:
            if np.any(A - np.diag(np.diag(A))):
                raise ValueError("generator must be diagonal in the monomial basis")
            A = np.diag(A).copy()
        if A.shape != (N,):
            raise ValueError(f"generator must have {N} diagonal entries")
        self.A = A
        self.C_A = solve_CA(A, self.k, N)

    @property
    def N(self):
        return self.basis.N

    @property
    def n(self):
        return self.polytope.dim

    @property
    def scale(self):
        """``k^n V / N``."""
        return self.k**self.n * self.V / self.N

    @property
    def modifier(self):
        """Diagonal of ``M = (1 + C_A) I + A/(2 pi k)``."""
        m = 1 + self.C_A + self.A / (2 * np.pi * self.k)
        if np.any(m <= 0):
            raise BalancingError("(1 + C_A) I + A/2pi k is not positive definite")
        return m

    def weight_matrix(self, full=False):
        """Centred torus weights ``<lambda_j, alpha> - mean``, shape ``(N, r)``.

        ``full`` uses the coordinate directions of the whole torus instead of
        the configured subtorus.
        """
        lam = np.eye(self.n) if full else self.torus
        w = self.basis.points @ lam.T
        return w - w.mean(axis=0)

    def fs(self, form):
        return fs(form, self.polytope, self.k, self.quadrature, self.angles)


def energy_zA(problem, form, metric=None):
    """Modified balancing energy of ``form``."""
    metric = metric or problem.fs(form)
    inv_m = 1 / problem.modifier
    if form.diagonal:
        log_term = np.sum(np.log(form.diag) * inv_m)
    else:
        log_term = float(np.real(np.trace(np.diag(inv_m) @ form.log())))
    i_part = problem.k ** (problem.n + 1) * metric.energy()
    return float(i_part + problem.scale * log_term)


def _log_term_gradient(problem, form):
    """Frame gradient of ``tr(M^{-1} log H)``: ``H^{1/2} Dlog_H[M^{-1}] H^{1/2}``.

    Reduces to ``M^{-1}`` whenever ``M`` commutes with ``H`` (all diagonal
    forms); the divided-difference form is only needed for dense ``H``.
    """
    inv_m = 1 / problem.modifier
    if form.diagonal or np.all(inv_m == inv_m[0]):
        return np.diag(inv_m)
    lam, vec = form._eigh
    x = vec.conj().T @ np.diag(inv_m) @ vec
    loglam = np.log(lam)
    diff = lam[:, None] - lam[None, :]
    same = np.abs(diff) <= 1e-12 * np.maximum(lam[:, None], lam[None, :])
    with np.errstate(divide="ignore", invalid="ignore"):
        dd = np.where(same, 1 / lam[:, None], (loglam[:, None] - loglam[None, :]) / diff)
    root = vec * np.sqrt(lam)
    return root @ (x * dd) @ root.conj().T


def grad_zA(problem, form, metric=None):
    """``dZ = -mu + (k^n V/N) M^{-1}`` in the symmetric orthonormal frame.

    For a dense form that does not commute with ``M`` the second term is the
    exact derivative of the log term (see :func:`_log_term_gradient`).
    """
    metric = metric or problem.fs(form)
    mu = metric.centre_of_mass()
    return -mu + problem.scale * _log_term_gradient(problem, form)


def t_operator(form, polytope, k=None, quadrature=None, angles=None):
    """One Donaldson step ``H -> Hilb(FS(H))``, determinant normalised."""
    return fs(form, polytope, k, quadrature, angles).hilb().det_normalised()


@dataclass
class BalanceReport:
    mode: str
    k: int
    form: HermitianForm = field(repr=False)
    residual: float
    converged: bool
    iterations: int
    energy_trace: list = field(repr=False, default_factory=list)
    residual_trace: list = field(repr=False, default_factory=list)
    mu: np.ndarray = field(repr=False, default=None)
    A: np.ndarray = field(repr=False, default=None)
    C_A: float = 0.0
    c: float = float("nan")
    xi_weights: np.ndarray = None
    c_normalised: float = float("nan")
    xi_normalised: np.ndarray = field(repr=False, default=None)
    remainder: float = float("nan")
    outer: list = field(repr=False, default_factory=list)
    projection_remainder: float = float("nan")
    certificate: bool = False

    def to_json(self):
        return {
            "mode": self.mode,
            "k": self.k,
            "residual": self.residual,
            "converged": self.converged,
            "iterations": self.iterations,
            "C_A": self.C_A,
            "c": self.c,
            "xi_weights": None if self.xi_weights is None else list(map(float, self.xi_weights)),
            "c_normalised": self.c_normalised,
            "remainder": self.remainder,
            "A_op_norm": float(np.max(np.abs(self.A))) if self.A is not None else 0.0,
            "projection_remainder": self.projection_remainder,
            "certificate": self.certificate,
        }


def extract_c_xi(problem, mu):
    """Least-squares ``mu^{-1} ~ c I + xi`` with ``xi`` in the centred torus span.

    Returns ``(c, eta, xi_diag, remainder)``; ``eta`` are the torus
    coordinates of ``xi`` (minimum-norm solution) and ``remainder`` is the
    relative Frobenius norm of what the affine span cannot absorb.
    """
    inv = np.linalg.inv(mu)
    d = np.real(np.diag(inv))
    w = problem.weight_matrix()
    design = np.column_stack([np.ones(problem.N), w])
    coef, *_ = np.linalg.lstsq(design, d, rcond=None)
    fit = design @ coef
    off = inv - np.diag(np.diag(inv))
    remainder = math.sqrt(np.sum((d - fit) ** 2) + np.sum(np.abs(off) ** 2)) / np.linalg.norm(inv)
    return float(coef[0]), coef[1:], w @ coef[1:], float(remainder)


def _finish(problem, report, mu):
    c, eta, xi, rem = extract_c_xi(problem, mu)
    report.mu = mu
    report.c, report.xi_weights, report.remainder = c, eta, rem
    report.c_normalised = c * problem.scale
    report.xi_normalised = xi * problem.scale
    report.A = problem.A.copy()
    report.C_A = problem.C_A
    return report


def default_tol(problem):
    """Relative residual reachable with the default quadrature (curves 1e-10, surfaces 1e-7)."""
    return 1e-10 if problem.n == 1 else 1e-7


def torus_obstruction(problem):
    """Constant slope of the energy along each coordinate torus direction.

    For a torus-invariant form ``tr(W mu) = k^{n+1} int_P <lambda, x> dx`` does
    not depend on ``H``, so a nonzero entry means the energy is unbounded
    below and has no critical point.  Entries are relative to ``k^{n+1} V``.
    """
    k, n = problem.k, problem.n
    quad = problem.quadrature
    raw = problem.basis.points.astype(float)
    target = k ** (n + 1) * quad.integrate(quad.nodes.T)
    lhs = problem.scale * raw.T @ (1 / problem.modifier)
    return (lhs - target) / (k ** (n + 1) * problem.V)


def descend(problem, H0=None, tol=None, max_iter=5000, armijo=1e-4, obstruction_tol=1e-9):
    """Geodesic gradient descent on the modified balancing energy.

    Steps move along ``H^{1/2} exp(-s dZ) H^{1/2}`` with backtracking (factor
    1/2, initial step 1); the determinant is renormalised to one after each
    accepted step.  Raises :class:`NoCriticalPointError` up front when
    :func:`torus_obstruction` exceeds ``obstruction_tol``.  Later line searches start from a Barzilai-Borwein step
    (capped at twice the previous one when that estimate is unusable).  Stops
    when ``|dZ|_F / |mu|_F <= tol`` (default :func:`default_tol`).
    """
    tol = default_tol(problem) if tol is None else tol
    obstruction = torus_obstruction(problem)
    if np.max(np.abs(obstruction)) > obstruction_tol:
        raise NoCriticalPointError(
            "energy is unbounded below along the torus: obstruction "
            + ", ".join(f"{v:.3e}" for v in obstruction))
    form = H0 if H0 is not None else HermitianForm.from_diagonal(np.ones(problem.N))
    form = form.det_normalised()
    metric = problem.fs(form)
    energy = energy_zA(problem, form, metric)
    energies, residuals = [energy], []
    converged = False
    it = 0
    last_step, prev_grad, guess = 0.5, None, 1.0
    for it in range(max_iter + 1):
        mu = metric.centre_of_mass()
        grad = -mu + problem.scale * _log_term_gradient(problem, form)
        gnorm2 = float(np.real(np.sum(np.abs(grad) ** 2)))
        res = math.sqrt(gnorm2) / np.linalg.norm(mu)
        residuals.append(res)
        if res <= tol:
            converged = True
            break
        if it == max_iter:
            break
        noise = 64 * np.finfo(float).eps * max(1.0, abs(energy))
        if prev_grad is not None:
            dg = grad - prev_grad
            curv = float(np.real(np.sum(prev_grad.conj() * dg)))
            # s_prev = -last_step * prev_grad, y = dg
            guess = (last_step * float(np.real(np.sum(np.abs(prev_grad) ** 2))) / -curv
                     if curv < 0 else 2 * last_step)
        step = min(max(guess, 1e-12), 1e8)
        for _ in range(90):
            trial = form.along_geodesic(grad, step).det_normalised()
            try:
                trial_metric = problem.fs(trial)
            except ValueError:
                step *= 0.5
                continue
            trial_energy = energy_zA(problem, trial, trial_metric)
            if trial_energy <= energy - armijo * step * gnorm2:
                break
            if trial_energy <= energy + noise:
                # below round-off: accept only if the residual improves
                tmu = trial_metric.centre_of_mass()
                tgrad = -tmu + problem.scale * _log_term_gradient(problem, trial)
                if np.linalg.norm(tgrad) / np.linalg.norm(tmu) < res:
                    break
            step *= 0.5
        else:
            raise BalancingError(f"line search failed at iteration {it} (residual {res:.3e})")
        last_step, prev_grad = step, grad
        form, metric, energy = trial, trial_metric, trial_energy
        energies.append(energy)
    report = BalanceReport(problem.mode, problem.k, form, residuals[-1], converged, it,
                           energies, residuals)
    if not converged:
        logger.warning("descent stopped at max_iter=%d with residual %.3e", max_iter, residuals[-1])
    return _finish(problem, report, mu)


def donaldson_iteration(polytope, k, H0=None, tol=1e-10, max_iter=2000, quadrature=None, angles=None):
    """Iterate :func:`t_operator` until ``sup |rho_bar(omega_H) - 1| <= tol``."""
    basis = lattice_points(polytope, k)
    form = (H0 if H0 is not None else HermitianForm.from_diagonal(np.ones(basis.N))).det_normalised()
    history = []
    for it in range(max_iter + 1):
        metric = fs(form, polytope, k, quadrature, angles)
        dev = float(np.max(np.abs(metric.rho_bar() - 1)))
        history.append(dev)
        if dev <= tol:
            return form, history, True
        if it == max_iter:
            break
        form = metric.hilb().det_normalised()
    return form, history, False


def torus_moment_predictor(problem):
    """Solve for the generator slope making torus directions flat for the energy.

    Along a torus orbit ``tr(B mu)`` is fixed by the polytope, so a critical
    point can only exist when ``(k^n V/N) sum_a w(a)/M_a = k^{n+1} int_P <lambda, x>``
    for every torus direction.  Returns ``tau`` with ``A = 2 pi (<tau, a> - mean)``.
    """
    k, n, N = problem.k, problem.n, problem.N
    quad = problem.quadrature
    w = problem.weight_matrix(full=True)
    raw = problem.basis.points.astype(float)
    target = k ** (n + 1) * quad.integrate(quad.nodes.T)

    def equations(vars_):
        s, tau = vars_[0], vars_[1:]
        m = s + (w @ tau) / k
        if np.any(m <= 0):
            return np.full(len(vars_), 1e6)
        lhs = problem.scale * raw.T @ (1 / m)
        return np.concatenate([[np.sum(1 / m) - N], lhs - target])

    sol = optimize.root(equations, np.concatenate([[1.0], np.zeros(w.shape[1])]), tol=1e-14)
    if not sol.success:
        raise BalancingError(f"torus moment predictor failed: {sol.message}")
    return sol.x[1:]


def project_gradient(problem, metric):
    """Project ``d rho_bar`` onto torus Hamiltonian differentials in ``L^2(omega)``.

    Returns ``(tau, remainder)`` with ``tau`` the torus coordinates of the
    slope and ``remainder`` the ``L^2`` norm of the orthogonal part.
    """
    rb, grad_t = metric.rho_bar_gradient()
    hess = metric.hess_phi
    wt = metric.weights * metric.density
    lam = np.eye(problem.n)
    # d psi_lambda pairs with d f through 4 pi <lambda, grad_t f>
    dpsi = np.einsum("qij,rj->qri", hess, lam)
    inv = np.linalg.inv(hess)
    gram = 4 * np.pi * np.einsum("q,qri,qij,qsj->rs", wt, dpsi, inv, dpsi)
    rhs = 4 * np.pi * np.einsum("q,qri,qij,qj->r", wt, dpsi, inv, grad_t)
    coef = np.linalg.solve(gram, rhs)
    resid = grad_t - np.einsum("qri,r->qi", dpsi, coef)
    rem = math.sqrt(max(0.0, 4 * np.pi * np.einsum("q,qi,qij,qj->", wt, resid, inv, resid)))
    return coef, rem


def generator_from_slope(problem, tau):
    """``A = theta_*(grad rho_bar)`` for ``rho_bar`` with torus slope ``tau``."""
    w = problem.weight_matrix(full=True)
    return 2 * np.pi * (w @ np.asarray(tau, dtype=float))


def self_consistent_A(problem, H0=None, tol=1e-6, max_outer=20, inner_tol=None,
                      max_iter=5000, predictor=True):
    """Outer fixed point ``A <- theta_*(grad rho_bar(omega_H))`` around :func:`descend`.

    With ``predictor`` the first ``A`` comes from :func:`torus_moment_predictor`;
    otherwise the iteration starts from ``A = 0``, which is only admissible
    when the torus obstruction already vanishes there.  Rounds stop once ``A``
    moves by less than ``tol * max(1, |A|_max)``; the projected slope carries
    the inner residual, so ``tol`` should sit above it.
    """
    if problem.mode != "self-consistent-A":
        raise ValueError("problem must be in self-consistent-A mode")
    tau = torus_moment_predictor(problem) if predictor else np.zeros(problem.n)
    form = H0
    history = []
    report = None
    for outer in range(max_outer):
        problem.set_generator(generator_from_slope(problem, tau))
        report = descend(problem, form, tol=inner_tol, max_iter=max_iter)
        form = report.form
        new_tau, rem = project_gradient(problem, problem.fs(form))
        change = float(np.max(np.abs(generator_from_slope(problem, new_tau) - problem.A)))
        history.append({"round": outer, "tau": list(map(float, tau)), "A_change": change,
                        "projection_remainder": rem, "inner_residual": report.residual,
                        "C_A": problem.C_A})
        report.projection_remainder = rem
        if change < tol * max(1.0, float(np.max(np.abs(problem.A)))):
            break
        tau = new_tau
    else:
        report.outer = history
        raise BalancingError(f"self-consistent A oscillates after {max_outer} rounds")
    report.outer = history
    return report


@dataclass
class Certificate:
    b: np.ndarray
    blocks: dict
    block_spread: float
    eq10_spread: float
    fit_agreement: float
    verdict: bool

    def to_json(self):
        return {
            "b_nu": {",".join(map(str, key)): float(np.mean(self.b[idx]))
                     for key, idx in self.blocks.items()},
            "multiplicities": {",".join(map(str, key)): len(idx) for key, idx in self.blocks.items()},
            "block_spread": self.block_spread,
            "eq10_spread": self.eq10_spread,
            "fit_agreement": self.fit_agreement,
            "verdict": self.verdict,
        }


def weak_chow_certificate(problem, report, tol=1e-8, residual_tol=None):
    """Weight-block data ``b_nu`` of ``((1 + C) I + xi)^{-1}`` and its checks.

    ``b`` is read off the normalised centre of mass ``(N / k^n V) mu``; the
    verdict needs a converged report, positive ``b``, block constancy,
    agreement with the fitted ``(c, xi)`` and constancy of
    ``sum b_a |sigma_a|^2`` for an ``L^2(h_FS)``-orthonormal basis ``sigma``.
    """
    mu = report.mu
    if mu is None:
        raise ValueError("report carries no centre of mass")
    off = np.max(np.abs(mu - np.diag(np.diag(mu)))) if mu.size else 0.0
    b = np.real(np.diag(mu)) / problem.scale
    if off > 1e-10 * np.max(np.abs(mu)):
        b = np.linalg.eigvalsh(mu) / problem.scale
    if np.any(b <= 0):
        raise CertificateError("negative weight b_nu: centre of mass lost positivity")
    chars = [tuple(int(round(v)) for v in row) for row in problem.basis.points @ problem.torus.T]
    blocks = {}
    for i, ch in enumerate(chars):
        blocks.setdefault(ch, []).append(i)
    spread = max((np.ptp(b[idx]) / np.mean(b[idx]) for idx in blocks.values()), default=0.0)
    fitted = 1 / (report.c_normalised + report.xi_normalised)
    agreement = float(np.max(np.abs(fitted - b) / b))
    metric = problem.fs(report.form)
    if metric._dense is None:
        gram = np.diag(metric.kernel()) / report.form.diag
        dens = metric.probabilities / gram
        total = dens @ b
        eq10 = float(np.ptp(total) / np.mean(total))
    else:
        eq10 = float("nan")
    rtol = (1e-8 if problem.n == 1 else 1e-6) if residual_tol is None else residual_tol
    verdict = bool(report.converged and report.residual <= rtol and np.all(b > 0)
                   and spread <= tol and agreement <= 10 * rtol
                   and (math.isnan(eq10) or eq10 <= 10 * rtol))
    report.certificate = verdict
    return Certificate(b, blocks, float(spread), eq10, agreement, verdict)
