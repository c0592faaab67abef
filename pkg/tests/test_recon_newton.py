import math
import logging

import numpy as np
import pytest

from mrept import recon_newton
from mrept.constants import MU0, OMEGA_3T
from mrept.forward import ForwardProblem, frechet_direction, solve_forward
from mrept.grid import cube_grid, make_grid
from mrept.phantom import collar_mask
from mrept.recon_newton import (
    NewtonConfig,
    StationaryPointError,
    compute_DJ,
    compute_g,
    gradient_norm2,
    misfit,
    newton_step,
    run_newton,
    solve_adjoint,
)
from oracles import EPS0

GAMMA0 = 0.5 + 1j * OMEGA_3T * 50 * EPS0


def bump(g, c=(0.0, 0.0, 0.0), w=0.04):
    X, Y, Z = g.mesh()
    return np.exp(-((X - c[0]) ** 2 + (Y - c[1]) ** 2 + (Z - c[2]) ** 2) / w**2)


@pytest.fixture(scope="module")
def problem():
    """Truth with one bump, measured data, and a model a little off the truth."""
    g = cube_grid(11, 0.2)
    truth = GAMMA0 + (0.3 + 0.1j) * bump(g)
    meas, _ = solve_forward(ForwardProblem(truth, np.ones(g.shape), g), tol=1e-13)
    gamma = GAMMA0 + (0.2 + 0.05j) * bump(g, (0.01, -0.01, 0.0))
    h, _ = solve_forward(ForwardProblem(gamma, meas, g), tol=1e-13)
    p, _ = solve_adjoint(gamma, h, meas, g, tol=1e-13)
    return g, truth, meas, gamma, h, p


def test_misfit_cases(rng):
    g = make_grid(4, 5, 6, 1.0)
    a = rng.normal(size=g.shape) + 1j * rng.normal(size=g.shape)
    assert misfit(a, a, g) == 0
    c = 0.3 - 0.4j
    g1 = make_grid(3, 3, 3, 1.0 / 3)
    assert misfit(np.full(g1.shape, c), np.zeros(g1.shape), g1) == pytest.approx(0.5 * abs(c) ** 2 * 27 / 27)
    b = rng.normal(size=g.shape) + 1j * rng.normal(size=g.shape)
    ref = 0.5 * math.fsum((np.abs(a - b) ** 2).ravel()) * g.cell_volume
    assert misfit(a, b, g) == pytest.approx(ref, rel=1e-12)
    with pytest.raises(ValueError, match="grid"):
        misfit(a, b[:-1], g)


def test_adjoint_zero_for_matching_fields():
    g = cube_grid(7, 0.2)
    h = np.ones(g.shape, dtype=complex)
    p, _ = solve_adjoint(np.full(g.shape, GAMMA0), h, h, g)
    assert not p.any()


def test_adjoint_manufactured_constant_gamma():
    errs = []
    for n in (9, 17, 33):
        g = cube_grid(n, 0.2)
        X, Y, Z = g.mesh()
        s = [np.sin(np.pi * (c + 0.1) / 0.2) for c in (X, Y, Z)]
        p_hat = (1 + 0.5j) * s[0] * s[1] * s[2]
        lap = -3 * (np.pi / 0.2) ** 2 * p_hat
        rhs = lap - 1j * OMEGA_3T * MU0 * GAMMA0 * p_hat
        p, _ = solve_adjoint(np.full(g.shape, GAMMA0), np.conj(rhs), np.zeros(g.shape), g, tol=1e-12)
        errs.append(np.max(np.abs(p - p_hat)))
    assert errs[0] / errs[1] > 3.5 and errs[1] / errs[2] > 3.5


def test_adjoint_duality_with_frechet(problem, rng):
    g, _, meas, gamma, h, p = problem
    grad = compute_g(gamma, h, p, g)
    for c in [(0.02, 0.0, 0.01), (-0.03, 0.02, 0.0)]:
        delta = (rng.normal() + 1j * rng.normal()) * bump(g, c, 0.03)
        delta[g.boundary_mask(1)] = 0
        u = frechet_direction(gamma, h, delta, g, tol=1e-13)
        lhs = float(np.real(np.sum(u * np.conj(h - meas)))) * g.cell_volume
        dj = compute_DJ(delta, grad, g)
        assert abs(lhs - dj) <= 1e-3 * abs(dj)


def test_compute_g_cases():
    g = cube_grid(7, 0.2)
    X, Y, Z = g.mesh()
    gamma = np.full(g.shape, GAMMA0)
    H = (X + 2j * Y - Z).astype(complex)
    assert not compute_g(gamma, H, np.zeros(g.shape), g).any()
    p = np.full(g.shape, 0.7 - 0.2j)
    # L H is constant for a linear field, so its divergence vanishes
    np.testing.assert_allclose(compute_g(gamma, H, p, g), 1j * OMEGA_3T * MU0 * H * p, atol=1e-10)
    with pytest.raises(ValueError, match="floor"):
        compute_g(np.zeros(g.shape), H, p, g)


def test_DJ_of_conjugate_gradient_is_norm(problem):
    g, _, _, gamma, h, p = problem
    grad = compute_g(gamma, h, p, g)
    n2 = gradient_norm2(grad, g)
    assert compute_DJ(np.conj(grad), grad, g) == pytest.approx(n2, rel=1e-10)


def test_DJ_linear(problem, rng):
    g, _, _, gamma, h, p = problem
    grad = compute_g(gamma, h, p, g)
    delta = rng.normal(size=g.shape) + 1j * rng.normal(size=g.shape)
    assert compute_DJ(np.zeros(g.shape), grad, g) == 0
    assert compute_DJ(3.5 * delta, grad, g) == pytest.approx(3.5 * compute_DJ(delta, grad, g), rel=1e-12)


def test_DJ_matches_central_differences(problem):
    g, _, meas, gamma, h, p = problem
    grad = compute_g(gamma, h, p, g)
    delta = (0.4 - 0.3j) * bump(g, (0.02, 0.01, -0.01), 0.03)
    delta[g.boundary_mask(1)] = 0
    dj = compute_DJ(delta, grad, g)

    def J(gm):
        hm, _ = solve_forward(ForwardProblem(gm, meas, g), tol=1e-14)
        return misfit(hm, meas, g)

    errs = [abs((J(gamma + t * delta) - J(gamma - t * delta)) / (2 * t) - dj) / abs(dj) for t in (1e-3, 1e-4, 1e-5)]
    assert min(errs) <= 1e-3


def test_newton_step_identities(problem):
    g, _, meas, gamma, h, p = problem
    grad = compute_g(gamma, h, p, g)
    J = misfit(h, meas, g)
    new, step = newton_step(gamma, grad, J, g)
    assert J + compute_DJ(step, grad, g) == pytest.approx(0, abs=1e-10 * J)
    np.testing.assert_allclose(new, gamma + step)
    _, step2 = newton_step(gamma, grad, 2 * J, g)
    np.testing.assert_allclose(step2, 2 * step)
    damped, _ = newton_step(gamma, grad, J, g, damping=0.5)
    np.testing.assert_allclose(damped, gamma + 0.5 * step)


def test_newton_step_guards():
    g = cube_grid(5, 0.2)
    gamma = np.full(g.shape, GAMMA0)
    same, step = newton_step(gamma, np.ones(g.shape), 0.0, g)
    assert np.array_equal(same, gamma) and not step.any()
    with pytest.raises(StationaryPointError):
        newton_step(gamma, np.zeros(g.shape), 1.0, g)
    frozen = g.boundary_mask(1)
    new, _ = newton_step(gamma, np.ones(g.shape), 1.0, g, frozen=frozen)
    assert np.array_equal(new[frozen], gamma[frozen])


def test_config_validation():
    with pytest.raises(ValueError):
        NewtonConfig(n_max=0)
    with pytest.raises(ValueError):
        NewtonConfig(damping=0)


def test_run_newton_exits_on_zero_misfit():
    g = cube_grid(7, 0.2)
    gamma = GAMMA0 + 0.1 * bump(g)
    meas, _ = solve_forward(ForwardProblem(gamma, np.ones(g.shape), g), tol=1e-13)
    h, _ = solve_forward(ForwardProblem(gamma, meas, g), tol=1e-13)
    res = run_newton(gamma, h, g, NewtonConfig(n_max=5))
    assert res.J == [0.0] and res.stop_reason == "zero misfit" and not res.step_norms


def test_run_newton_reduces_misfit_and_keeps_collar(problem):
    g, truth, meas, _, _, _ = problem
    d = 1.5 * g.hx
    res = run_newton(np.full(g.shape, GAMMA0), meas, g, NewtonConfig(n_max=4, collar_d=d, keep_iterates=True),
                     truth=truth, anomaly_mask=bump(g) > 0.5)
    assert len(res.J) == 5 and len(res.step_norms) == 4 and len(res.iterates) == 5
    assert all(j >= 0 for j in res.J)
    assert res.J[-1] < 0.5 * res.J[0]
    assert res.anomaly[-1] < res.anomaly[0]
    c = collar_mask(g, d)
    for it in res.iterates:
        assert np.all(it[c] == GAMMA0)
    assert res.stop_reason == "n_max reached"


def test_run_newton_step_tolerance(problem):
    g, _, meas, _, _, _ = problem
    res = run_newton(np.full(g.shape, GAMMA0), meas, g, NewtonConfig(n_max=8, eps2=1e9))
    assert res.stop_reason == "tolerance reached" and len(res.step_norms) == 1


def test_run_newton_stagnation_returns_best(problem, monkeypatch):
    g, _, meas, _, _, _ = problem
    values = iter([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    monkeypatch.setattr(recon_newton, "misfit", lambda *a: next(values))
    start = np.full(g.shape, GAMMA0)
    res = run_newton(start, meas, g, NewtonConfig(n_max=8, stagnation=3))
    assert "increased 3 times" in res.stop_reason
    assert res.best_index == 0
    np.testing.assert_array_equal(res.admittivity.gamma, start)


def test_run_newton_clamps_with_warning(problem, caplog):
    g, _, meas, _, _, _ = problem
    start = np.full(g.shape, GAMMA0)
    start[5, 5, 5] = 0.5 - 0.1j
    with caplog.at_level(logging.WARNING, logger="mrept.recon_newton"):
        res = run_newton(start, meas, g, NewtonConfig(n_max=1))
    assert any("clamped" in r.message for r in caplog.records)
    assert np.all(res.admittivity.gamma.imag >= 0)
