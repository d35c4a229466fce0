"""Acceptance criteria, one test each; every test prints a PASS/FAIL line."""
from fractions import Fraction
from math import comb
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from qel.balancing import (BalanceProblem, descend, donaldson_iteration, energy_zA,
                           generator_from_slope, grad_zA, self_consistent_A, solve_CA,
                           torus_moment_predictor, weak_chow_certificate)
from qel.quantisation import HermitianForm, bergman, fs, hilb
from qel.stability import (chow_weight, df_invariant, df_of, equivariant_density,
                           extremal_normalisation, fit_expansions, futaki_integral,
                           inner_product, inner_product_matrix, limit_weight_check,
                           relative_df_chi, scan_directions)
from qel.toric import (build_quadrature, bump_perturbation, hirzebruch, potential,
                       product_of_lines, projective_line, scalar_curvature)

F1 = hirzebruch()
P1 = projective_line()


def verdict(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def _slope(ks, values):
    return float(np.polyfit(np.log(ks), np.log(np.abs(values)), 1)[0])


def test_criterion_1_balanced_sphere():
    start = time.perf_counter()
    worst_rho, worst_hilb = 0.0, 0.0
    model = potential(P1)
    for k in range(1, 9):
        oracle = np.array([1 / comb(k, j) for j in range(k + 1)])
        worst_hilb = max(worst_hilb, np.max(np.abs(hilb(model, k).diag - oracle)))
        form, _, ok = donaldson_iteration(P1, k, tol=1e-10)
        report = descend(BalanceProblem(P1, k))
        for f in (form, report.form):
            worst_rho = max(worst_rho, np.max(np.abs(fs(f, P1, k).rho_bar() - 1)))
        assert ok and report.converged
    elapsed = time.perf_counter() - start
    verdict(1, worst_rho < 1e-8 and worst_hilb < 1e-10 and elapsed < 10,
            f"sup|rho_bar - 1| = {worst_rho:.2e}, Hilb vs binomial oracle {worst_hilb:.2e}, "
            f"{elapsed:.1f} s")


def test_criterion_2_gradient():
    rng = np.random.default_rng(11)
    worst = 0.0
    for k in (2, 3, 4):
        N = k + 1
        for A in (None, np.linspace(-0.8, 0.8, N) ** 3):
            prob = BalanceProblem(P1, k, A=A, mode="plain" if A is None else "fixed-A")
            g = rng.normal(size=(N, N)) + 1j * rng.normal(size=(N, N))
            form = HermitianForm(g @ g.conj().T + N * np.eye(N))
            grad = grad_zA(prob, form)
            for _ in range(10):
                b = rng.normal(size=(N, N)) + 1j * rng.normal(size=(N, N))
                b = (b + b.conj().T) / 2
                h = 1e-3
                z = [energy_zA(prob, form.along_geodesic(b, s * h)) for s in (-2, -1, 1, 2)]
                fd = (z[0] - 8 * z[1] + 8 * z[2] - z[3]) / (12 * h)
                exact = -np.real(np.trace(b @ grad))
                worst = max(worst, abs(fd - exact) / max(abs(exact), 1e-12))
    verdict(2, worst < 1e-6, f"worst relative finite-difference error {worst:.2e} "
                             "(A = 0 and A != 0, k = 2..4, 10 Hermitian directions each)")


def _fixed_A_runs():
    runs = [BalanceProblem(P1, k, A=np.zeros(k + 1), mode="fixed-A") for k in (3, 5)]
    runs.append(BalanceProblem(product_of_lines(), 2, A=np.zeros(9), mode="fixed-A"))
    # F1 needs a nonzero generator; the torus-moment prediction satisfies the obstruction
    sc = BalanceProblem(F1, 3, mode="self-consistent-A")
    A = generator_from_slope(sc, torus_moment_predictor(sc))
    runs.append(BalanceProblem(F1, 3, A=A, mode="fixed-A"))
    return runs


def test_criterion_3_critical_points():
    worst_mu, worst_trace = 0.0, 0.0
    for prob in _fixed_A_runs():
        report = descend(prob)
        assert report.converged
        mu = report.mu / prob.scale
        worst_mu = max(worst_mu, np.linalg.norm(mu - np.diag(1 / prob.modifier)))
        worst_trace = max(worst_trace, abs(np.sum(1 / prob.modifier) - prob.N))
    worst_closed, worst_stated = 0.0, 0.0
    for delta in (0.1, 1.0, 5.0):
        for k in (1, 3, 8):
            d = delta / (2 * np.pi * k)
            c = solve_CA([delta, -delta], k)
            worst_closed = max(worst_closed, abs(c - (np.sqrt(1 + 4 * d * d) - 1) / 2))
            worst_stated = max(worst_stated, abs(c - (np.sqrt(1 + d * d) - 1)))
    ok = worst_mu < 1e-7 and worst_trace < 1e-10 and worst_closed < 1e-10
    verdict(3, ok, f"|mu - M^-1|_F = {worst_mu:.2e}, trace condition {worst_trace:.1e}, "
                   f"2x2 closed form (sqrt(1+4d^2)-1)/2 {worst_closed:.1e} "
                   f"(the form sqrt(1+d^2)-1 is off by {worst_stated:.1e}, see ledger)")


def test_criterion_4_weak_chow_certificate():
    start = time.perf_counter()
    prob = BalanceProblem(F1, 3, mode="self-consistent-A", torus=[[0, 1]])
    report = self_consistent_A(prob)
    cert = weak_chow_certificate(prob, report)
    elapsed = time.perf_counter() - start
    ok = (report.residual < 1e-6 and np.all(cert.b > 0) and cert.block_spread < 1e-8
          and report.remainder < 1e-6 and cert.fit_agreement < 1e-6 and elapsed < 300)
    verdict(4, ok, f"residual {report.residual:.2e}, min b {cert.b.min():.4f}, "
                   f"block spread {cert.block_spread:.1e}, (cI + xi) remainder "
                   f"{report.remainder:.1e}, fit agreement {cert.fit_agreement:.1e}, {elapsed:.1f} s")


def test_criterion_5_equivariant_density():
    quad = build_quadrature(P1)
    worst, worst_pt = 0.0, 0.0
    for pert in (None, bump_perturbation(0.1)):
        model = potential(P1, pert, quad)
        for lam, shift in ((1.0, 0.0), (-1 / (2 * np.pi), 0.0), (1.0, -0.5)):
            for k in range(1, 9):
                e = equivariant_density(model, [lam], k, shift=shift, quadrature=quad)
                worst = max(worst, abs(float(e.lhs) - e.rhs))
                worst_pt = max(worst_pt, e.pointwise_error)
    verdict(5, worst < 1e-8 and worst_pt < 1e-8,
            f"|lhs - rhs| = {worst:.1e}, pointwise sup error {worst_pt:.1e} "
            "(round and perturbed, k = 1..8)")


def test_criterion_6_futaki_bridge():
    quad = build_quadrature(F1)
    fut = futaki_integral(potential(F1, quadrature=quad), (0, 1), quadrature=quad)
    # theta_*(Jv)/2pi has weights -<lam, a>
    df = float(df_of(F1, (0, -1)))
    p1_fut = futaki_integral(potential(P1), (1,))
    p1_df = float(df_of(P1, (-1,)))
    ok = abs(df - fut) < 1e-5 and abs(p1_fut) < 1e-8 and abs(p1_df) < 1e-8
    verdict(6, ok, f"F1: DF = {df:.10f}, (1/4pi) int psi (S - Sbar) = {fut:.10f}; "
                   f"P1: {p1_df:.1e} and {p1_fut:.1e}")


def test_criterion_7_bergman_expansion():
    quad = build_quadrature(P1)
    model = potential(P1, bump_perturbation(0.1), quad)
    s, sbar = scalar_curvature(model, quad)
    ks = np.arange(4, 17)
    rem = []
    for k in ks:
        rho = bergman(model, hilb(model, int(k), quad), quad).rho_bar
        rem.append(np.max(np.abs(rho - 1 - (s - sbar) / (4 * np.pi * k))))
    slope = _slope(ks, rem)
    verdict(7, abs(slope + 2) <= 0.15,
            f"log-log slope of the sup remainder over k = 4..16 is {slope:.3f} "
            "(target -2 +/- 0.15; pre-asymptotic range, see ledger)")


def test_criterion_8_chow_limit():
    fit = fit_expansions(F1, (0, 1))
    df = df_invariant(fit)
    ks = np.arange(2, 13)
    gaps = [float(chow_weight(fit, int(k)) - df) for k in ks]
    slope = _slope(ks, gaps)
    verdict(8, df != 0 and abs(slope + 1) <= 0.1,
            f"DF(0,1) = {df}, log-log slope of |Chow_k - DF| over k = 2..12 is {slope:.3f} "
            "(target -1 +/- 0.1; k*gap -> -2/27, see ledger)")


def test_criterion_9_inner_products():
    self_pair = inner_product(P1, (1,), (1,))
    dirs = scan_directions(F1, radius=2)
    q = inner_product_matrix(F1)
    bad = 0
    for a in dirs:
        for b in dirs:
            ab = sum(a[i] * q[i][j] * b[j] for i in range(2) for j in range(2))
            aa = sum(a[i] * q[i][j] * a[j] for i in range(2) for j in range(2))
            bb = sum(b[i] * q[i][j] * b[j] for i in range(2) for j in range(2))
            bad += ab * ab > aa * bb
    ext = extremal_normalisation(F1)
    self_ann = relative_df_chi(F1, ext.chi, ext)
    ok = self_pair == Fraction(1, 12) and bad == 0 and abs(float(self_ann)) < 1e-9
    verdict(9, ok, f"<1,1> on P1 = {self_pair}, Cauchy-Schwarz failures {bad} of {len(dirs) ** 2}, "
                   f"DF_chi(chi) = {self_ann}")


@pytest.fixture(scope="module")
def f1_reports():
    reports = []
    for k in range(3, 7):
        prob = BalanceProblem(F1, k, mode="self-consistent-A")
        reports.append(self_consistent_A(prob))
    return reports


def test_criterion_10_relative_semistability(f1_reports):
    ext = extremal_normalisation(F1)
    scan = [float(relative_df_chi(F1, d, ext)) for d in scan_directions(F1, radius=3)]
    q = inner_product_matrix(F1)
    perp = (q[1][1], -q[0][1])
    assert inner_product(F1, perp, ext.chi) == 0
    gaps = {}
    for name, beta in (("chi", tuple(ext.chi)), ("chi_perp", perp)):
        lw = limit_weight_check(F1, f1_reports, beta, ext)
        gaps[name] = abs(lw.limit - float(lw.target))
    ok = min(scan) >= -1e-6 and max(gaps.values()) < 1e-3
    verdict(10, ok, f"min DF_chi over {len(scan)} directions = {min(scan):.4f}; "
                    f"|limit - <beta, chi>| = {gaps['chi']:.1e} (chi), {gaps['chi_perp']:.1e} (chi_perp)")
