"""Coefficient fields of the H+ based admittivity equations.

Conventions: ``hplus`` is the complex positive rotating field on the grid,
``sigma`` is conductivity [S/m], ``eps`` permittivity [F/m] and the unknown
pair of the elliptic system is ``U = (sigma, omega * eps)``.

The first-order relation between admittivity and data is

    L H . grad(gamma) / gamma - i omega mu0 gamma H + lap H = 0,
    L = (-d/dx + i d/dy, -i d/dx - d/dy, -d/dz),

and splitting it into real and imaginary parts gives
``P . grad(sigma) + Q . grad(omega eps) + phi = 0`` and
``-Q . grad(sigma) + P . grad(omega eps) + psi = 0``.  Applying ``P . grad``
and ``Q . grad`` to these yields the divergence-form system assembled here:

    div(A grad U) + F0 . grad U = (F1, F2).
"""

from __future__ import annotations

import numpy as np

from .constants import MU0, OMEGA_3T
from .grid import Grid3D, divergence, gradient, laplacian

#: Smallest |gamma| accepted before taking log(gamma) or dividing by it [S/m].
GAMMA_FLOOR = 1e-8


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def apply_L(f: np.ndarray, grid: Grid3D) -> np.ndarray:
    """``L f`` as a complex vector field of shape ``(3, nx, ny, nz)``."""
    fx, fy, fz = gradient(f, grid)
    return np.stack([-fx + 1j * fy, -1j * fx - fy, -fz])


def compute_PQ(hplus: np.ndarray, grid: Grid3D) -> tuple[np.ndarray, np.ndarray]:
    """Real vector fields ``P`` and ``Q`` built from first derivatives of H+.

    ``Q_x`` and ``Q_y`` are the very same arrays as ``P_y`` and ``-P_x``, so
    the identities ``P_x = -Q_y`` and ``P_y = Q_x`` hold bit for bit.
    """
    hr_x, hr_y, hr_z = gradient(np.real(hplus), grid)
    hi_x, hi_y, hi_z = gradient(np.imag(hplus), grid)
    px = -hr_x - hi_y
    py = hi_x - hr_y
    P = np.stack([px, py, -hr_z])
    Q = np.stack([py, -px, hi_z])
    return P, Q


def assemble_A(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Semi-definite diffusion matrix field, shape ``(3, 3, nx, ny, nz)``."""
    px, py, pz = P
    qz = Q[2]
    a = px**2 + py**2
    A = np.zeros((3, 3) + px.shape)
    A[0, 0] = A[1, 1] = a
    A[0, 2] = A[2, 0] = px * pz + py * qz
    A[1, 2] = A[2, 1] = py * pz - px * qz
    A[2, 2] = pz**2 + qz**2
    return A


def assemble_A_unsimplified(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """The same matrix before simplification: ``P P^T + Q Q^T``."""
    return np.einsum("i...,j...->ij...", P, P) + np.einsum("i...,j...->ij...", Q, Q)


def compute_F0(P: np.ndarray, Q: np.ndarray, grid: Grid3D) -> np.ndarray:
    div_p = divergence(P, grid)
    div_q = divergence(Q, grid)
    return -(P * div_p + Q * div_q)


def compute_phi_psi(sigma, eps, hplus, grid: Grid3D, omega: float = OMEGA_3T, lap_h=None):
    """Zeroth-order terms ``phi`` (real part) and ``psi`` (imaginary part)."""
    hr, hi = np.real(hplus), np.imag(hplus)
    if lap_h is None:
        lap_h = laplacian(hplus, grid)
    lr, li = np.real(lap_h), np.imag(lap_h)
    wm = omega * MU0
    we = omega * eps
    phi = wm * hi * sigma**2 - wm * hi * we**2 + 2 * wm * hr * sigma * we + lr * sigma - li * we
    psi = -wm * hr * sigma**2 + wm * hr * we**2 + 2 * wm * hi * sigma * we + li * sigma + lr * we
    return phi, psi


def compute_E(eta: np.ndarray, P: np.ndarray, Q: np.ndarray, grid: Grid3D) -> np.ndarray:
    """``Q . grad(P . grad eta) - P . grad(Q . grad eta)`` by nested differences."""
    d_eta = gradient(eta, grid)
    return _dot(Q, gradient(_dot(P, d_eta), grid)) - _dot(P, gradient(_dot(Q, d_eta), grid))


def compute_F1_F2(sigma, eps, hplus, grid: Grid3D, omega: float = OMEGA_3T, PQ=None):
    P, Q = compute_PQ(hplus, grid) if PQ is None else PQ
    phi, psi = compute_phi_psi(sigma, eps, hplus, grid, omega)
    d_phi = gradient(phi, grid)
    d_psi = gradient(psi, grid)
    f1 = -_dot(P, d_phi) + _dot(Q, d_psi) + compute_E(omega * eps, P, Q, grid)
    f2 = -_dot(Q, d_phi) - _dot(P, d_psi) - compute_E(sigma, P, Q, grid)
    return f1, f2


def log_admittivity(gamma: np.ndarray, floor: float = GAMMA_FLOOR) -> np.ndarray:
    """Principal ``log(gamma)``; rejects near-zero values and the left half plane."""
    gamma = np.asarray(gamma, dtype=complex)
    if np.any(np.abs(gamma) < floor):
        raise ValueError(f"|gamma| below floor {floor:g}")
    if np.any(gamma.real <= 0):
        raise ValueError("gamma must have positive real part (conductivity > 0)")
    return np.log(gamma)


def compute_G(gamma: np.ndarray, grid: Grid3D, floor: float = GAMMA_FLOOR) -> np.ndarray:
    """First-order coefficient of the forward equation, from ``v = log(gamma)``.

    ``G . grad u == (L u) . grad v`` holds exactly for the discrete gradients.
    """
    vx, vy, vz = gradient(log_admittivity(gamma, floor), grid)
    return -np.stack([vx + 1j * vy, -1j * vx + vy, vz])


def first_order_residual(gamma, hplus, grid: Grid3D, omega: float = OMEGA_3T, floor: float = GAMMA_FLOOR):
    """``L H . grad(gamma)/gamma - i omega mu0 gamma H + lap H`` pointwise."""
    gamma = np.asarray(gamma, dtype=complex)
    if np.any(np.abs(gamma) < floor):
        raise ValueError(f"|gamma| below floor {floor:g}")
    dlog = gradient(gamma, grid) / gamma
    return _dot(apply_L(hplus, grid), dlog) - 1j * omega * MU0 * gamma * hplus + laplacian(hplus, grid)


def elliptic_residual(sigma, eps, hplus, grid: Grid3D, omega: float = OMEGA_3T):
    """Residuals of ``div(A grad U) + F0 . grad U - (F1, F2)`` for ``U = (sigma, omega eps)``."""
    P, Q = compute_PQ(hplus, grid)
    A = assemble_A(P, Q)
    F0 = compute_F0(P, Q, grid)
    f1, f2 = compute_F1_F2(sigma, eps, hplus, grid, omega, PQ=(P, Q))
    out = []
    for u, f in ((sigma, f1), (omega * eps, f2)):
        du = gradient(u, grid)
        flux = np.einsum("ij...,j...->i...", A, du)
        out.append(divergence(flux, grid) + _dot(F0, du) - f)
    return tuple(out)
