"""Direct formula ``gamma = lap H+ / (i omega mu0 H+)``.

Valid where the admittivity is locally constant; it is the baseline method
and fills the degenerate region of the semi-elliptic solve.
"""

from __future__ import annotations

import numpy as np
from scipy.signal import savgol_filter

from .constants import MU0, OMEGA_3T
from .grid import Grid3D, laplacian
from .phantom import Admittivity

DEFAULT_GUARD = 1e-3


def smoothed_laplacian(hplus: np.ndarray, grid: Grid3D, window: int = 5, order: int = 2) -> np.ndarray:
    """Laplacian from local polynomial fits along each axis (for noisy data)."""
    def lap(f):
        return sum(savgol_filter(f, window, order, deriv=2, delta=grid.spacing[a], axis=a, mode="interp")
                   for a in range(3))

    # the filter is real-valued; treat the two parts separately
    if np.iscomplexobj(hplus):
        return lap(hplus.real) + 1j * lap(hplus.imag)
    return lap(np.asarray(hplus, dtype=float))


def direct_gamma(hplus: np.ndarray, grid: Grid3D, omega: float = OMEGA_3T, guard: float = DEFAULT_GUARD,
                 smooth_window: int | None = None):
    """Complex admittivity from the direct formula and the mask of guarded nodes.

    Nodes where ``|H+| < guard * max|H+|`` are set to NaN and flagged in the mask.
    """
    hplus = np.asarray(hplus, dtype=complex)
    if not np.all(np.isfinite(hplus)):
        raise ValueError("H+ contains non-finite values")
    if smooth_window:
        lap = smoothed_laplacian(hplus, grid, smooth_window)
    else:
        lap = laplacian(hplus, grid)
    mag = np.abs(hplus)
    mask = mag < guard * mag.max()
    gamma = np.full(grid.shape, np.nan + 1j * np.nan)
    ok = ~mask
    gamma[ok] = lap[ok] / (1j * omega * MU0 * hplus[ok])
    return gamma, mask


def direct_reconstruct(hplus, grid: Grid3D, omega: float = OMEGA_3T, guard: float = DEFAULT_GUARD,
                       smooth_window: int | None = None):
    """Direct-formula reconstruction; returns ``(Admittivity, mask)``."""
    gamma, mask = direct_gamma(hplus, grid, omega, guard, smooth_window)
    return Admittivity.from_gamma(gamma, omega), mask
