"""Adjoint-based Newton refinement of the admittivity.

With ``J[gamma] = 1/2 sum |H[gamma] - Hm|^2 vol`` the derivative along
``delta`` is ``DJ(delta) = Re sum delta g vol`` where

    g = (1/gamma) div(p L H) + i omega mu0 H p

and the adjoint state ``p`` solves ``lap p - div(G p) - i omega mu0 gamma p
= conj(H - Hm)`` with ``p = 0`` on the faces.  The adjoint is discretized as
the exact transpose of the forward matrix, so ``DJ`` is the derivative of the
discrete misfit.  The update

    gamma_{n+1} = gamma_n - J / ||g||^2 conj(g)

zeroes the linearized misfit.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import linsolve
from .constants import MU0, OMEGA_3T
from .forward import OFFSETS, ForwardProblem, forward_stencil, solve_forward
from .grid import Grid3D, divergence
from .operators import GAMMA_FLOOR, apply_L, compute_G
from .phantom import Admittivity, collar_mask

log = logging.getLogger(__name__)


class StationaryPointError(RuntimeError):
    pass


@dataclass
class NewtonConfig:
    n_max: int = 10
    eps2: float = 0.0  # stop when ||gamma_n - gamma_{n-1}||_2 <= eps2 (0 disables)
    tol: float = 1e-10
    freeze_collar: bool = True
    collar_d: float = 0.0
    damping: float = 1.0  # beta in (0, 1]
    stagnation: int = 3  # consecutive J increases before giving up
    sigma_min: float = 1e-3  # admissibility clamp [S/m]
    omega_eps_min: float = 0.0
    use_truth_stop: bool = False  # simulation only: stop when ||gamma_n - truth||_2 <= eps2
    keep_iterates: bool = False
    omega: float = OMEGA_3T

    def __post_init__(self):
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")


@dataclass
class ReconResult:
    admittivity: Admittivity
    J: list = field(default_factory=list)  # J[gamma_n], n = 0, 1, ...
    step_norms: list = field(default_factory=list)  # ||gamma_n - gamma_{n-1}||_2, n = 1, 2, ...
    errors: list = field(default_factory=list)  # ||gamma_n - gamma*||_2 when known
    anomaly: list = field(default_factory=list)  # anomaly metric when known
    iterates: list = field(default_factory=list)
    reports: list = field(default_factory=list)
    best_index: int = 0
    stop_reason: str = ""
    wall_time: float = 0.0


def misfit(h_model: np.ndarray, h_meas: np.ndarray, grid: Grid3D) -> float:
    """``1/2 sum |h_model - h_meas|^2 hx hy hz``."""
    if np.shape(h_model) != grid.shape or np.shape(h_meas) != grid.shape:
        raise ValueError("fields do not match the grid")
    return 0.5 * float(np.sum(np.abs(h_model - h_meas) ** 2)) * grid.cell_volume


def adjoint_stencil(gamma: np.ndarray, grid: Grid3D, omega: float = OMEGA_3T) -> dict:
    """Transpose of :func:`forward_stencil`: ``lap p - div(G p) - i omega mu0 gamma p``."""
    G = compute_G(gamma, grid)
    h2 = [h**2 for h in grid.spacing]
    st = {(0, 0, 0): -2.0 * sum(1.0 / v for v in h2) - 1j * omega * MU0 * np.asarray(gamma)}
    for a, (plus, minus) in OFFSETS.items():
        c = G[a] / (2.0 * grid.spacing[a])
        st[plus] = 1.0 / h2[a] - np.roll(c, -1, axis=a)
        st[minus] = 1.0 / h2[a] + np.roll(c, 1, axis=a)
    return st


def solve_adjoint(gamma, h_model, h_meas, grid: Grid3D, omega: float = OMEGA_3T, tol: float = 1e-10):
    """Adjoint state ``p``; returns ``(p, SolveReport)``."""
    rhs = np.conj(np.asarray(h_model) - np.asarray(h_meas))
    system = linsolve.assemble(adjoint_stencil(gamma, grid, omega), grid, grid.boundary_mask(1), 0.0, rhs)
    return linsolve.solve(system, tol=tol)


def compute_g(gamma, h_model, p, grid: Grid3D, omega: float = OMEGA_3T, floor: float = GAMMA_FLOOR):
    """Gradient density ``(1/gamma) div(p L H) + i omega mu0 H p``."""
    gamma = np.asarray(gamma, dtype=complex)
    if np.any(np.abs(gamma) < floor):
        raise ValueError(f"|gamma| below floor {floor:g}")
    flux = p * apply_L(h_model, grid)
    return divergence(flux, grid) / gamma + 1j * omega * MU0 * h_model * p


def compute_DJ(delta, g, grid: Grid3D) -> float:
    """``Re sum delta g vol``."""
    return float(np.real(np.sum(np.asarray(delta) * g))) * grid.cell_volume


def gradient_norm2(g, grid: Grid3D) -> float:
    return float(np.sum(np.abs(g) ** 2)) * grid.cell_volume


def newton_step(gamma_n, g_n, J_n: float, grid: Grid3D, frozen=None, damping: float = 1.0):
    """``gamma - damping * J / ||g||^2 conj(g)`` with ``g`` zeroed on ``frozen`` nodes.

    Returns ``(gamma_next, h_n)`` where ``h_n`` is the undamped increment.
    """
    g = np.array(g_n, dtype=complex, copy=True)
    if frozen is not None:
        g[frozen] = 0.0
    if J_n == 0:
        return np.array(gamma_n, copy=True), np.zeros_like(g)
    n2 = gradient_norm2(g, grid)
    if not n2 > 0:
        raise StationaryPointError(f"gradient vanishes while J = {J_n:.3e}")
    h = -(J_n / n2) * np.conj(g)
    return gamma_n + damping * h, h


def _clamp(gamma: np.ndarray, cfg: NewtonConfig) -> np.ndarray:
    re = np.maximum(gamma.real, cfg.sigma_min)
    im = np.maximum(gamma.imag, cfg.omega_eps_min)
    n = int(np.count_nonzero((re != gamma.real) | (im != gamma.imag)))
    if n:
        log.warning("clamped %d nodes to the admissible range", n)
    return re + 1j * im


def _l2(f, grid: Grid3D) -> float:
    return float(np.sqrt(np.sum(np.abs(f) ** 2) * grid.cell_volume))


def run_newton(gamma0, h_meas, grid: Grid3D, cfg: NewtonConfig | None = None, truth=None, anomaly_mask=None):
    """Newton iteration from ``gamma0``; boundary data are taken from ``h_meas`` on the faces.

    Records ``J[gamma_n]`` for ``n = 0..n_max`` and returns the last iterate,
    or the best one when the misfit stagnates.
    """
    cfg = cfg or NewtonConfig()
    t0 = time.perf_counter()
    h_meas = np.asarray(h_meas, dtype=complex)
    frozen = collar_mask(grid, cfg.collar_d) if cfg.freeze_collar else grid.boundary_mask(1)
    gamma = _clamp(np.asarray(gamma0, dtype=complex).copy(), cfg)
    res = ReconResult(Admittivity.from_gamma(gamma, cfg.omega))
    best_J, best_gamma, rises = np.inf, gamma, 0

    def record(gm):
        if truth is not None:
            res.errors.append(_l2(gm - truth, grid))
            if anomaly_mask is not None and anomaly_mask.any():
                res.anomaly.append(float(np.mean((np.abs(gm - truth) / np.abs(truth))[anomaly_mask])))
        if cfg.keep_iterates:
            res.iterates.append(gm.copy())

    for n in range(cfg.n_max + 1):
        h, rep_f = solve_forward(ForwardProblem(gamma, h_meas, grid, cfg.omega), tol=cfg.tol)
        J = misfit(h, h_meas, grid)
        res.J.append(J)
        record(gamma)
        log.info("newton n=%d J=%.6e%s", n, J, f" anomaly={res.anomaly[-1]:.4f}" if res.anomaly else "")
        if J < best_J:
            best_J, best_gamma, res.best_index, rises = J, gamma, n, 0
        elif n > 0 and J > res.J[-2]:
            rises += 1
            if rises >= cfg.stagnation:
                res.stop_reason = f"misfit increased {rises} times in a row"
                gamma = best_gamma
                break
        if n == cfg.n_max:
            res.stop_reason = "n_max reached"
            break
        if J == 0:
            res.stop_reason = "zero misfit"
            break
        if cfg.eps2 > 0 and n > 0:
            crit = res.errors[-1] if (cfg.use_truth_stop and truth is not None) else res.step_norms[-1]
            if crit <= cfg.eps2:
                res.stop_reason = "tolerance reached"
                break
        p, rep_a = solve_adjoint(gamma, h, h_meas, grid, cfg.omega, cfg.tol)
        g = compute_g(gamma, h, p, grid, cfg.omega)
        new, _ = newton_step(gamma, g, J, grid, frozen, cfg.damping)
        new = _clamp(new, cfg)
        new[frozen] = gamma[frozen]
        res.step_norms.append(_l2(new - gamma, grid))
        res.reports.append((rep_f, rep_a))
        gamma = new
    res.admittivity = Admittivity.from_gamma(gamma, cfg.omega)
    res.wall_time = time.perf_counter() - t0
    return res
