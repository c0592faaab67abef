"""Regularized semi-elliptic initial guess.

Starting from a constant ``U0 = (sigma0, omega eps0)`` the fixed-point map

    div((A + rho e3 e3^T) grad U_k) + F0 . grad U_k = (F1, F2)(U_{k-1})

is iterated on the grid minus the degenerate region ``D`` (where the in-plane
eigenvalue ``Px^2 + Py^2`` of ``A`` nearly vanishes).  ``D`` is filled with
the direct formula, which also supplies the Dirichlet values on its boundary.
The two components of ``U`` share one assembled operator.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import binary_dilation

from . import linsolve
from .constants import OMEGA_3T
from .grid import Grid3D
from .operators import assemble_A, compute_F0, compute_F1_F2, compute_PQ
from .phantom import Admittivity, collar_mask
from .recon_direct import direct_gamma

log = logging.getLogger(__name__)


class DegenerateDataError(ValueError):
    pass


@dataclass
class InitConfig:
    rho_fraction: float = 0.05
    tau_D: float = 0.05
    k_max: int = 10
    k_pick: int = 3
    eps1: float = 0.0  # stop when ||gamma_k - gamma_{k-1}||_2 <= eps1 (0 disables)
    boundary_gamma: complex = 1.0  # (sigma + i omega eps) on the faces and collar
    collar_d: float = 0.0
    sigma0: float = 1.0
    omega_eps0: float = 0.0
    full_history: bool = False  # run all k_max steps even after k_pick
    use_truth_stop: bool = False  # simulation only: stop when ||gamma_k - truth||_2 <= eps1
    tol: float = 1e-10
    omega: float = OMEGA_3T

    def __post_init__(self):
        if not self.rho_fraction > 0:
            raise ValueError("rho_fraction must be positive")
        if not 1 <= self.k_pick <= self.k_max:
            raise ValueError("need 1 <= k_pick <= k_max")
        if self.tau_D < 0:
            raise ValueError("tau_D must be non-negative")


@dataclass
class InitHistory:
    step_norms: list = field(default_factory=list)  # ||gamma_k - gamma_{k-1}||_2, k = 1, 2, ...
    errors: list = field(default_factory=list)  # ||gamma_k - gamma*||_2 when the truth is known
    iterates: list = field(default_factory=list)  # gamma_k
    reports: list = field(default_factory=list)
    degenerate: np.ndarray | None = None
    rho: float = 0.0


def segment_degenerate(A: np.ndarray, tau_D: float) -> np.ndarray:
    """Nodes where ``A[0,0] = Px^2 + Py^2`` falls below ``tau_D`` times its maximum, dilated by one node."""
    a = A[0, 0]
    if tau_D <= 0:
        return np.zeros(a.shape, dtype=bool)
    if not a.max() > 0:
        raise DegenerateDataError("Px^2 + Py^2 vanishes everywhere; no in-plane information in the data")
    D = a < tau_D * a.max()
    if D.any():
        D = binary_dilation(D, structure=np.ones((3, 3, 3), dtype=bool))
    if D.mean() > 0.5:
        raise DegenerateDataError(f"degenerate region covers {100 * D.mean():.0f}% of the grid")
    return D


def regularization_weight(A: np.ndarray, rho_fraction: float) -> float:
    amax = float(A[2, 2].max())
    if not amax > 0:
        raise DegenerateDataError("Pz^2 + Qz^2 vanishes everywhere; no z information in the data")
    return rho_fraction * amax


def regularized_matrix(A: np.ndarray, rho_fraction: float) -> np.ndarray:
    """``A + rho e3 e3^T`` with ``rho = rho_fraction * max A33``."""
    out = A.copy()
    out[2, 2] = out[2, 2] + regularization_weight(A, rho_fraction)
    return out


def regularized_eigenvalues(A: np.ndarray, rho: float) -> np.ndarray:
    """Closed-form eigenvalues of ``A + rho e3 e3^T`` in ascending order, shape ``(3, ...)``."""
    a = A[0, 0]
    s = a + A[2, 2]
    disc = np.sqrt(np.maximum((s + rho) ** 2 - 4.0 * a * rho, 0.0))
    lo = 0.5 * (s + rho - disc)
    hi = 0.5 * (s + rho + disc)
    return np.sort(np.stack([a, lo, hi]), axis=0)


def _shift(f: np.ndarray, axis: int, step: int) -> np.ndarray:
    """``f`` evaluated at ``n + step * e_axis`` (wraps at the faces, which are never rows)."""
    return np.roll(f, -step, axis=axis)


def semielliptic_stencil(Areg: np.ndarray, F0: np.ndarray, grid: Grid3D) -> dict:
    """19-point stencil of ``div(Areg grad .) + F0 . grad``.

    Diagonal fluxes use coefficients averaged to half nodes; mixed terms use
    nested central differences, which keeps the second-order part symmetric.
    """
    h = grid.spacing
    st: dict = {}

    def add(off, c):
        st[off] = st.get(off, 0.0) + c

    center = np.zeros(grid.shape)
    for a in range(3):
        e = [0, 0, 0]
        e[a] = 1
        ep, em = tuple(e), tuple(-v for v in e)
        cp = 0.5 * (Areg[a, a] + _shift(Areg[a, a], a, 1)) / h[a] ** 2
        cm = 0.5 * (Areg[a, a] + _shift(Areg[a, a], a, -1)) / h[a] ** 2
        adv = F0[a] / (2.0 * h[a])
        add(ep, cp + adv)
        add(em, cm - adv)
        center = center - cp - cm
    add((0, 0, 0), center)

    for a in range(3):
        for b in range(3):
            if a == b:
                continue
            w = 1.0 / (4.0 * h[a] * h[b])
            cpa = _shift(Areg[a, b], a, 1) * w
            cma = _shift(Areg[a, b], a, -1) * w
            for sa, sb, sign, c in ((1, 1, 1, cpa), (1, -1, -1, cpa), (-1, 1, -1, cma), (-1, -1, 1, cma)):
                off = [0, 0, 0]
                off[a], off[b] = sa, sb
                add(tuple(off), sign * c)
    return st


@dataclass
class SemiEllipticOperator:
    """Data-dependent parts of the iteration, computed once per data set."""

    grid: Grid3D
    hplus: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    rho: float
    fixed: np.ndarray
    fixed_gamma: np.ndarray
    degenerate: np.ndarray
    stencil: dict


def prepare(hplus: np.ndarray, grid: Grid3D, cfg: InitConfig) -> SemiEllipticOperator:
    """Assemble coefficients, segment ``D`` and set the Dirichlet values."""
    P, Q = compute_PQ(hplus, grid)
    A = assemble_A(P, Q)
    rho = regularization_weight(A, cfg.rho_fraction)
    Areg = A.copy()
    Areg[2, 2] = Areg[2, 2] + rho
    D = segment_degenerate(A, cfg.tau_D)
    frame = collar_mask(grid, cfg.collar_d)
    fixed_gamma = np.full(grid.shape, complex(cfg.boundary_gamma))
    if D.any():
        gd, _ = direct_gamma(hplus, grid, cfg.omega)
        fill = D & ~frame & np.isfinite(gd)
        fixed_gamma[fill] = gd[fill]
    st = semielliptic_stencil(Areg, compute_F0(P, Q, grid), grid)
    return SemiEllipticOperator(grid, hplus, P, Q, rho, frame | D, fixed_gamma, D, st)


def semielliptic_step(U_prev, op: SemiEllipticOperator, cfg: InitConfig):
    """One fixed-point step; returns ``((sigma, omega_eps), SolveReport)``."""
    sigma_prev, oe_prev = U_prev
    f1, f2 = compute_F1_F2(sigma_prev, oe_prev / cfg.omega, op.hplus, op.grid, cfg.omega, PQ=(op.P, op.Q))
    fg = op.fixed_gamma
    # the sigma and omega*eps systems share the operator; solve them as one complex system
    system = linsolve.assemble(op.stencil, op.grid, op.fixed, fg, f1 + 1j * f2)
    u, report = linsolve.solve(system, tol=cfg.tol)
    return (u.real.copy(), u.imag.copy()), report


def _l2(f: np.ndarray, grid: Grid3D) -> float:
    return float(np.sqrt(np.sum(np.abs(f) ** 2) * grid.cell_volume))


def initial_guess(hplus, grid: Grid3D, cfg: InitConfig | None = None, truth: np.ndarray | None = None):
    """Run the iteration and return ``(Admittivity, InitHistory)`` for iterate ``k_pick``.

    ``truth`` (complex admittivity) is only used to record errors and, with
    ``use_truth_stop``, for the simulation-only stopping rule.
    """
    cfg = cfg or InitConfig()
    op = prepare(np.asarray(hplus, dtype=complex), grid, cfg)
    hist = InitHistory(degenerate=op.degenerate, rho=op.rho)
    U = (np.full(grid.shape, cfg.sigma0), np.full(grid.shape, cfg.omega_eps0))
    gamma_prev = U[0] + 1j * U[1]
    picked = None
    for k in range(1, cfg.k_max + 1):
        U, rep = semielliptic_step(U, op, cfg)
        gamma = U[0] + 1j * U[1]
        hist.iterates.append(gamma)
        hist.reports.append(rep)
        hist.step_norms.append(_l2(gamma - gamma_prev, grid))
        if truth is not None:
            hist.errors.append(_l2(gamma - truth, grid))
        log.info("init k=%d step=%.4e%s", k, hist.step_norms[-1],
                 f" err={hist.errors[-1]:.4e}" if hist.errors else "")
        gamma_prev = gamma
        if k == cfg.k_pick:
            picked = gamma
        if cfg.eps1 > 0:
            crit = hist.errors[-1] if (cfg.use_truth_stop and truth is not None) else hist.step_norms[-1]
            if crit <= cfg.eps1:
                picked = gamma if picked is None else picked
                break
        if picked is not None and not cfg.full_history:
            break
    if picked is None:
        picked = hist.iterates[-1]
    return Admittivity.from_gamma(picked, cfg.omega), hist
