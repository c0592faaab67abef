import numpy as np
import pytest

from mrept.constants import MU0, OMEGA_3T
from mrept.grid import cube_grid, divergence, gradient
from mrept.linsolve import assemble
from mrept.operators import assemble_A, compute_PQ
from mrept.recon_init import (
    DegenerateDataError,
    InitConfig,
    initial_guess,
    prepare,
    regularization_weight,
    regularized_eigenvalues,
    regularized_matrix,
    segment_degenerate,
    semielliptic_stencil,
    semielliptic_step,
)
from oracles import EPS0, random_smooth_field

GAMMA0 = 0.5 + 1j * OMEGA_3T * 50 * EPS0


def oblique_wave(grid, gamma0=GAMMA0):
    """Exact homogeneous data travelling along (1, 0, 1)."""
    k = np.sqrt(-1j * OMEGA_3T * MU0 * gamma0)
    X, Y, Z = grid.mesh()
    return np.exp(1j * k * (X + Z) / np.sqrt(2))


def A_of(H, g):
    return assemble_A(*compute_PQ(H, g))


def test_config_validation():
    with pytest.raises(ValueError):
        InitConfig(rho_fraction=0)
    with pytest.raises(ValueError):
        InitConfig(k_pick=4, k_max=3)
    with pytest.raises(ValueError):
        InitConfig(tau_D=-1)


def test_segment_empty_cases():
    g = cube_grid(9, 0.2)
    X, Y, Z = g.mesh()
    assert not segment_degenerate(A_of(X + 1j * Y, g), 0.05).any()
    assert not segment_degenerate(A_of(X**2 + Y**2 + 1j * Z, g), 0.0).any()


def test_segment_tube_around_axis():
    g = cube_grid(17, 0.2)
    X, Y, Z = g.mesh()
    D = segment_degenerate(A_of(X**2 + Y**2 + 1j * Z, g), 0.05)
    r = np.hypot(X, Y)
    assert D[r == 0].all()
    # threshold radius sqrt(0.05) * max r, plus one node of dilation
    assert r[D].max() <= np.sqrt(0.05) * r.max() + np.sqrt(2) * g.hx + 1e-12
    assert not D[r > 0.06].any()
    np.testing.assert_array_equal(D, np.broadcast_to(D[:, :, 8:9], D.shape))


def test_segment_too_degenerate():
    g = cube_grid(9, 0.2)
    X, Y, Z = g.mesh()
    with pytest.raises(DegenerateDataError, match="covers"):
        segment_degenerate(A_of(X**3 + 0j, g), 0.05)
    with pytest.raises(DegenerateDataError, match="in-plane"):
        segment_degenerate(np.zeros((3, 3) + g.shape), 0.05)


def test_regularized_matrix_example():
    A = np.zeros((3, 3, 2, 1, 1))
    A[0, 0, 0] = A[1, 1, 0] = 4.0
    A[2, 2, 1] = 1.0
    R = regularized_matrix(A, 0.05)
    np.testing.assert_allclose(R[:, :, 0, 0, 0], np.diag([4.0, 4.0, 0.05]))
    assert regularization_weight(A, 0.05) == pytest.approx(0.05)
    with pytest.raises(DegenerateDataError, match="z information"):
        regularized_matrix(np.zeros((3, 3, 2, 2, 2)), 0.05)


def test_regularized_eigenvalues_match_eigensolver(rng):
    g = cube_grid(9, 0.2)
    A = A_of(random_smooth_field(g, rng), g)
    rho = regularization_weight(A, 0.05)
    R = regularized_matrix(A, 0.05)
    lam = np.linalg.eigvalsh(np.moveaxis(R.reshape(3, 3, -1), -1, 0))
    ref = regularized_eigenvalues(A, rho).reshape(3, -1).T
    assert np.max(np.abs(lam - ref) / lam[:, 2:]) < 1e-10
    positive = A[0, 0].ravel() > 0
    assert np.all(lam[positive] > 0)


def test_stencil_symmetric_without_drift(rng):
    g = cube_grid(7, 0.2)
    A = regularized_matrix(A_of(random_smooth_field(g, rng), g), 0.05)
    st = semielliptic_stencil(A, np.zeros((3,) + g.shape), g)
    assert len(st) == 19
    M = assemble(st, g, g.boundary_mask(1)).matrix
    assert abs(M - M.T).max() <= 1e-12 * abs(M).max()


def test_stencil_exact_on_quadratics(rng):
    g = cube_grid(9, 0.2)
    X, Y, Z = g.mesh()
    Ac = np.array([[2.0, 0.3, -0.4], [0.3, 1.5, 0.2], [-0.4, 0.2, 0.7]])
    A = np.broadcast_to(Ac[:, :, None, None, None], (3, 3) + g.shape).copy()
    F0 = np.stack([np.full(g.shape, v) for v in (1.0, -2.0, 0.5)])
    u = X**2 + 3 * X * Y - Y * Z + 2 * Z**2 + X
    st = semielliptic_stencil(A, F0, g)
    out = sum(c * np.roll(u, tuple(-o for o in off), axis=(0, 1, 2)) for off, c in st.items())
    du = np.stack([2 * X + 3 * Y + 1, 3 * X - Z, -Y + 4 * Z])
    H = np.array([[2.0, 3, 0], [3, 0, -1], [0, -1, 4]])
    ref = np.sum(Ac * H) + np.einsum("i...,i...->...", F0, du)
    np.testing.assert_allclose(out[1:-1, 1:-1, 1:-1], ref[1:-1, 1:-1, 1:-1], rtol=1e-9)


def test_stencil_matches_divergence_form(rng):
    g = cube_grid(9, 0.2)
    A = regularized_matrix(A_of(random_smooth_field(g, rng), g), 0.05)
    u = random_smooth_field(g, rng, complex_=False)
    st = semielliptic_stencil(A, np.zeros((3,) + g.shape), g)
    out = sum(c * np.roll(u, tuple(-o for o in off), axis=(0, 1, 2)) for off, c in st.items())
    ref = divergence(np.einsum("ij...,j...->i...", A, gradient(u, g)), g)
    # two consistent discretizations of one operator
    err = np.abs(out - ref)[2:-2, 2:-2, 2:-2].max()
    assert err < 0.2 * np.abs(ref).max()


def test_truth_is_fixed_point_to_second_order():
    errs = []
    for n in (9, 17, 33):
        g = cube_grid(n, 0.2)
        cfg = InitConfig(boundary_gamma=GAMMA0, tau_D=0.0, tol=1e-12)
        op = prepare(oblique_wave(g), g, cfg)
        (s, we), rep = semielliptic_step((np.full(g.shape, GAMMA0.real), np.full(g.shape, GAMMA0.imag)), op, cfg)
        errs.append(np.max(np.abs(s + 1j * we - GAMMA0)))
        assert rep.residual <= 1e-12
    assert errs[0] / errs[1] > 3.0 and errs[1] / errs[2] > 3.0


def test_dirichlet_values_honoured():
    g = cube_grid(9, 0.2)
    X, Y, Z = g.mesh()
    cfg = InitConfig(boundary_gamma=0.7 + 0.2j, tau_D=0.0, collar_d=1.5 * g.hx)
    op = prepare(oblique_wave(g), g, cfg)
    (s, we), _ = semielliptic_step((np.ones(g.shape), np.zeros(g.shape)), op, cfg)
    b = g.boundary_mask(2)
    assert np.all(s[b] == 0.7) and np.all(we[b] == 0.2)


def test_degenerate_region_filled_from_direct_formula():
    g = cube_grid(17, 0.2)
    H = oblique_wave(g)
    cfg = InitConfig(boundary_gamma=GAMMA0, tau_D=0.003, sigma0=GAMMA0.real, omega_eps0=GAMMA0.imag)
    op = prepare(H, g, cfg)
    assert op.degenerate.any()
    from mrept.recon_direct import direct_gamma
    gd, _ = direct_gamma(H, g)
    inner = op.degenerate & ~g.boundary_mask(1)
    np.testing.assert_array_equal(op.fixed_gamma[inner], gd[inner])
    assert np.array_equal(op.fixed, g.boundary_mask(1) | op.degenerate)


def test_homogeneous_from_background_start():
    g = cube_grid(17, 0.2)
    cfg = InitConfig(boundary_gamma=GAMMA0, tau_D=0.0, sigma0=GAMMA0.real, omega_eps0=GAMMA0.imag, k_pick=1)
    adm, hist = initial_guess(oblique_wave(g), g, cfg, truth=np.full(g.shape, GAMMA0))
    assert np.max(np.abs(adm.gamma / GAMMA0 - 1)) <= 0.01
    assert len(hist.iterates) == 1 and len(hist.errors) == 1


def test_history_and_stopping():
    g = cube_grid(9, 0.2)
    H = oblique_wave(g)
    base = dict(boundary_gamma=GAMMA0, tau_D=0.0, sigma0=GAMMA0.real, omega_eps0=GAMMA0.imag)
    _, hist = initial_guess(H, g, InitConfig(k_max=4, k_pick=2, **base))
    assert len(hist.step_norms) == 2
    adm, hist = initial_guess(H, g, InitConfig(k_max=4, k_pick=2, full_history=True, **base))
    assert len(hist.step_norms) == 4
    np.testing.assert_array_equal(adm.gamma, hist.iterates[1])
    truth = np.full(g.shape, GAMMA0)
    _, hist = initial_guess(H, g, InitConfig(k_max=4, k_pick=4, eps1=1e6, use_truth_stop=True, **base), truth)
    assert len(hist.step_norms) == 1
