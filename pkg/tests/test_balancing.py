import numpy as np
import pytest
from hypothesis import given, strategies as st

from qel.balancing import (BalanceProblem, BalancingError, NoCriticalPointError, descend,
                           donaldson_iteration, energy_zA, grad_zA, self_consistent_A,
                           solve_CA, torus_obstruction, weak_chow_certificate)
from qel.quantisation import HermitianForm
from qel.toric import hirzebruch, projective_line


# --- C_A -----------------------------------------------------------------

@given(st.floats(-20.0, 20.0), st.integers(1, 12))
def test_CA_two_by_two_closed_form(delta, k):
    d = delta / (2 * np.pi * k)
    assert abs(solve_CA([delta, -delta], k) - (np.sqrt(1 + 4 * d * d) - 1) / 2) < 1e-13


@given(st.lists(st.floats(-3.0, 3.0), min_size=2, max_size=12), st.integers(1, 8))
def test_CA_trace_condition_and_sign(values, k):
    a = np.asarray(values) - np.mean(values)
    c = solve_CA(a, k)
    m = 1 + c + a / (2 * np.pi * k)
    assert np.all(m > 0)
    assert abs(np.sum(1 / m) - len(a)) < 1e-10 * len(a)
    # Jensen: a centred generator never lowers 1 + C_A below one
    assert c >= -1e-15


def test_CA_monotone_in_generator_size():
    cs = [solve_CA([s, -s, 0.0], 3) for s in np.linspace(0, 5, 11)]
    assert np.all(np.diff(cs) > 0)


def test_CA_vanishes_for_zero_generator():
    assert solve_CA(np.zeros(5), 4) == 0.0


def test_CA_rejects_non_finite_generator():
    with pytest.raises(BalancingError):
        solve_CA([np.inf, 0.0, -1.0], 2)


# --- energy and gradient --------------------------------------------------

def _problem(P, k, A=None, mode="plain"):
    return BalanceProblem(P, k, A=A, mode=mode)


@pytest.mark.parametrize("fixed", [False, True])
def test_gradient_matches_finite_differences(p1, rng, fixed):
    k = 4
    A = np.linspace(-0.6, 0.6, k + 1) if fixed else None
    prob = _problem(p1, k, A, "fixed-A" if fixed else "plain")
    form = HermitianForm.from_diagonal(np.exp(rng.normal(scale=0.3, size=k + 1)))
    b = np.diag(rng.normal(size=k + 1))
    h = 1e-5
    fd = (energy_zA(prob, form.along_geodesic(b, h))
          - energy_zA(prob, form.along_geodesic(b, -h))) / (2 * h)
    # along_geodesic moves by exp(-s B), so the slope is -tr(B dZ)
    exact = -np.trace(b @ grad_zA(prob, form))
    assert abs(fd - exact) < 1e-7 * max(1, abs(exact))


@pytest.mark.parametrize("fixed", [False, True])
def test_dense_gradient_matches_finite_differences(p1, rng, fixed):
    k = 3
    prob = _problem(p1, k, np.array([0.9, -0.2, -0.4, -0.3]), "fixed-A") if fixed else _problem(p1, k)
    g = rng.normal(size=(k + 1, k + 1)) + 1j * rng.normal(size=(k + 1, k + 1))
    form = HermitianForm(g @ g.conj().T + 2 * np.eye(k + 1))
    b = rng.normal(size=(k + 1, k + 1)) + 1j * rng.normal(size=(k + 1, k + 1))
    b = (b + b.conj().T) / 2
    h = 1e-5
    fd = (energy_zA(prob, form.along_geodesic(b, h))
          - energy_zA(prob, form.along_geodesic(b, -h))) / (2 * h)
    # the gradient lives in the symmetric orthonormal frame
    exact = -np.real(np.trace(b @ grad_zA(prob, form)))
    assert abs(fd - exact) < 1e-6 * max(1, abs(exact))


def test_energy_is_scale_invariant(f1, rng):
    prob = _problem(f1, 2, np.linspace(-1, 1, 12), "fixed-A")
    form = HermitianForm.from_diagonal(np.exp(rng.normal(scale=0.2, size=prob.N)))
    assert abs(energy_zA(prob, form) - energy_zA(prob, form.scaled(7.5))) < 1e-9


@given(st.floats(-1.5, 1.5))
def test_energy_is_geodesically_convex(s0):
    P = projective_line()
    k = 3
    prob = _problem(P, k, np.array([0.4, -0.1, -0.5, 0.2]), "fixed-A")
    rng = np.random.default_rng(7)
    form = HermitianForm.from_diagonal(np.exp(rng.normal(scale=0.3, size=k + 1)))
    b = np.diag(rng.normal(size=k + 1))
    h = 1e-2
    z = [energy_zA(prob, form.along_geodesic(b, s0 + j * h)) for j in (-1, 0, 1)]
    assert z[0] - 2 * z[1] + z[2] >= -1e-8


# --- descent ----------------------------------------------------------------


def test_descent_finds_binomial_form(p1, rng):
    from math import comb
    k = 6
    start = HermitianForm.from_diagonal(np.exp(rng.normal(scale=0.5, size=k + 1)))
    report = descend(_problem(p1, k), start)
    assert report.converged and report.residual <= 1e-10
    # balanced forms are binom(k, j)^{-1} up to scale and the torus: log ratio affine in j
    logr = np.log(report.form.diag * np.array([comb(k, j) for j in range(k + 1)]))
    assert np.max(np.abs(np.diff(logr, 2))) < 1e-8


def test_energy_trace_is_monotone(f1, rng):
    prob = BalanceProblem(f1, 2, mode="self-consistent-A")
    report = self_consistent_A(prob)
    trace = np.asarray(report.energy_trace)
    assert np.all(np.diff(trace) <= 64 * np.finfo(float).eps * np.abs(trace[:-1]) + 1e-12)


def test_plain_mode_on_f1_is_obstructed(f1):
    prob = _problem(f1, 2)
    assert np.max(np.abs(torus_obstruction(prob))) > 1e-3
    with pytest.raises(NoCriticalPointError):
        descend(prob)


def test_uncentred_linear_generator_on_sphere_is_obstructed(p1):
    k = 4
    delta = 0.7
    prob = _problem(p1, k, delta * (np.arange(k + 1) - k / 2), "fixed-A")
    with pytest.raises(NoCriticalPointError):
        descend(prob)


def test_donaldson_iteration_agrees_with_descent(p1):
    form, history, ok = donaldson_iteration(p1, 4, tol=1e-10)
    assert ok
    report = descend(_problem(p1, 4))
    a = form.diag / np.exp(np.mean(np.log(form.diag)))
    b = report.form.diag / np.exp(np.mean(np.log(report.form.diag)))
    assert np.allclose(a, b, rtol=1e-8)


# --- self-consistent runs and certificates ----------------------------------

@pytest.fixture(scope="module")
def f1_run():
    prob = BalanceProblem(hirzebruch(), 3, mode="self-consistent-A")
    return prob, self_consistent_A(prob)


def test_self_consistent_f1(f1_run):
    prob, report = f1_run
    assert report.converged and report.residual < 1e-7
    # the generator is a pure fibre rotation: constant along x for fixed y
    ys = prob.basis.points[:, 1]
    for y in set(ys):
        assert np.ptp(prob.A[ys == y]) < 1e-8
    mu = np.diag(report.mu) / prob.scale
    assert np.max(np.abs(mu - 1 / prob.modifier)) < 1e-8


def test_certificate_full_torus(f1_run):
    prob, report = f1_run
    cert = weak_chow_certificate(prob, report)
    assert cert.verdict
    assert len(cert.blocks) == prob.N


def test_certificate_on_fibre_subtorus():
    prob = BalanceProblem(hirzebruch(), 3, mode="self-consistent-A", torus=[[0, 1]])
    report = self_consistent_A(prob)
    cert = weak_chow_certificate(prob, report)
    assert sorted(cert.blocks) == [(0,), (1,), (2,), (3,)]
    assert cert.block_spread < 1e-8 and cert.verdict
    b = [cert.to_json()["b_nu"][str(j)] for j in range(4)]
    assert np.all(np.diff(b) > 0)


def test_weights_do_not_depend_on_the_start(f1_run, rng):
    prob, report = f1_run
    start = HermitianForm.from_diagonal(np.exp(rng.normal(scale=0.3, size=prob.N)))
    other = descend(prob, start)
    b1 = np.diag(report.mu)
    b2 = np.diag(other.mu)
    assert np.max(np.abs(b1 - b2)) < 1e-7
