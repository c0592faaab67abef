"""Forward problem: H+ for a given admittivity with Dirichlet data.

    lap H + G[gamma] . grad H - i omega mu0 gamma H = 0   in the interior,
    H = boundary data                                     on the faces,

discretized with the 7-point Laplacian and central first differences.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import linsolve
from .constants import MU0, OMEGA_3T
from .grid import Grid3D, gradient, restrict
from .operators import apply_L, compute_G
from .phantom import Phantom, sample

log = logging.getLogger(__name__)

OFFSETS = {0: ((1, 0, 0), (-1, 0, 0)), 1: ((0, 1, 0), (0, -1, 0)), 2: ((0, 0, 1), (0, 0, -1))}


@dataclass
class ForwardProblem:
    gamma: np.ndarray  # complex admittivity field
    boundary_data: np.ndarray  # complex field; only face values are read
    grid: Grid3D
    omega: float = OMEGA_3T


def check_admissible(gamma: np.ndarray) -> None:
    if not np.all(np.isfinite(gamma)):
        raise ValueError("admittivity contains non-finite values")
    if np.any(np.real(gamma) <= 0) or np.any(np.imag(gamma) < 0):
        raise ValueError("admittivity outside the admissible range (need sigma > 0, eps >= 0)")


def forward_stencil(gamma: np.ndarray, grid: Grid3D, omega: float = OMEGA_3T) -> dict:
    """7-point stencil of ``lap + G . grad - i omega mu0 gamma``."""
    G = compute_G(gamma, grid)
    h2 = [h**2 for h in grid.spacing]
    st = {(0, 0, 0): -2.0 * sum(1.0 / v for v in h2) - 1j * omega * MU0 * np.asarray(gamma)}
    for a, (plus, minus) in OFFSETS.items():
        adv = G[a] / (2.0 * grid.spacing[a])
        st[plus] = 1.0 / h2[a] + adv
        st[minus] = 1.0 / h2[a] - adv
    return st


def solve_forward(fp: ForwardProblem, tol: float = 1e-10, method: str = "auto"):
    """Solve the forward problem; returns ``(H, SolveReport)``."""
    check_admissible(fp.gamma)
    st = forward_stencil(fp.gamma, fp.grid, fp.omega)
    bc = np.asarray(fp.boundary_data, dtype=complex)
    system = linsolve.assemble(st, fp.grid, fp.grid.boundary_mask(1), bc)
    h, report = linsolve.solve(system, tol=tol, method=method)
    log.debug("forward solve: %s", report)
    return h, report


def frechet_direction(gamma, hplus, delta, grid: Grid3D, omega: float = OMEGA_3T, tol: float = 1e-10):
    """Directional derivative ``u`` of ``gamma -> H+[gamma]`` along ``delta``.

    ``u`` solves the forward operator with source
    ``-(L H . grad(delta/gamma) - i omega mu0 delta H)`` and zero face data.
    """
    delta = np.asarray(delta, dtype=complex)
    if not np.any(delta):
        return np.zeros(grid.shape, dtype=complex)
    lh = apply_L(hplus, grid)
    dq = gradient(delta / gamma, grid)
    source = -(np.einsum("i...,i...->...", lh, dq) - 1j * omega * MU0 * delta * hplus)
    st = forward_stencil(gamma, grid, omega)
    system = linsolve.assemble(st, grid, grid.boundary_mask(1), 0.0, source)
    u, _ = linsolve.solve(system, tol=tol)
    return u


def constant_profile(value: complex = 1.0) -> Callable:
    """Boundary profile with spatially constant H+ (idealised birdcage excitation)."""

    def profile(X, Y, Z):
        return np.full(X.shape, value, dtype=complex)

    return profile


def _planar_field(x: np.ndarray, y: np.ndarray, gamma0: complex, omega: float, value: complex) -> np.ndarray:
    """z-invariant homogeneous solution on the (x, y) rectangle with ``H = value`` on its edges."""
    nx, ny = x.size, y.size
    hx, hy = x[1] - x[0], y[1] - y[0]

    def d2(n, h):
        return sp.diags([np.ones(n - 1), -2.0 * np.ones(n), np.ones(n - 1)], [-1, 0, 1]) / h**2

    ix, iy = sp.identity(nx - 2), sp.identity(ny - 2)
    k2 = 1j * omega * MU0 * gamma0
    M = sp.kron(d2(nx - 2, hx), iy) + sp.kron(ix, d2(ny - 2, hy)) - k2 * sp.identity((nx - 2) * (ny - 2))
    # edge values enter through the first and last interior rows and columns
    b = np.zeros((nx - 2, ny - 2), dtype=complex)
    b[0, :] -= value / hx**2
    b[-1, :] -= value / hx**2
    b[:, 0] -= value / hy**2
    b[:, -1] -= value / hy**2
    out = np.full((nx, ny), value, dtype=complex)
    out[1:-1, 1:-1] = spla.spsolve(M.tocsc(), b.ravel()).reshape(nx - 2, ny - 2)
    return out


def long_body_profile(gamma0: complex, omega: float = OMEGA_3T, value: complex = 1.0) -> Callable:
    """Excitation of a body much longer than the grid.

    ``H = value`` on the lateral faces; the top and bottom faces carry the
    z-invariant field of the homogeneous background, so a homogeneous object
    gives a z-independent ``H``.
    """

    def profile(X, Y, Z):
        x, y = X[:, 0, 0], Y[0, :, 0]
        plane = _planar_field(x, y, complex(gamma0), omega, value)
        return np.broadcast_to(plane[:, :, None], X.shape).copy()

    return profile


PROFILES = {"constant": lambda gamma0, omega: constant_profile(1.0), "long_body": long_body_profile}


def make_profile(name: str, gamma0: complex, omega: float = OMEGA_3T) -> Callable:
    try:
        return PROFILES[name](gamma0, omega)
    except KeyError:
        raise ValueError(f"unknown boundary profile {name!r}; choose from {sorted(PROFILES)}") from None


def synthesize_data(
    phantom: Phantom,
    grid: Grid3D,
    boundary_profile: Callable | None = None,
    refine: int = 2,
    noise: float = 0.0,
    seed: int | None = 0,
    tol: float = 1e-10,
) -> np.ndarray:
    """Simulated measurement of H+ on ``grid``.

    The forward problem is solved on a grid ``refine`` times finer (with the
    phantom sampled there) and injected back onto ``grid``.  ``noise`` adds
    complex Gaussian noise with standard deviation ``noise * rms(H)``.
    """
    if refine < 1 or int(refine) != refine:
        raise ValueError("refine must be a positive integer")
    profile = boundary_profile or make_profile(phantom.excitation, phantom.gamma0, phantom.omega)
    fine = grid.refined(int(refine))
    adm = sample(phantom, fine)
    bc = profile(*fine.mesh())
    h_fine, _ = solve_forward(ForwardProblem(adm.gamma, bc, fine, phantom.omega), tol=tol)
    data = restrict(h_fine, int(refine))
    if noise > 0:
        rng = np.random.default_rng(seed)
        rms = np.sqrt(np.mean(np.abs(data) ** 2))
        z = rng.standard_normal(data.shape) + 1j * rng.standard_normal(data.shape)
        data = data + noise * rms * z / np.sqrt(2.0)
    return data
