"""Sparse assembly and solution of the grid linear systems.

A stencil is a mapping ``{(di, dj, dk): coeff}`` where ``coeff`` is a
grid-shaped array holding, at every node, the weight of the neighbour at the
given offset.  Nodes flagged in ``fixed`` carry Dirichlet values and are
eliminated; their contributions move to the right-hand side.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.io
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import Grid3D

log = logging.getLogger(__name__)

#: Systems up to this many unknowns are factorized directly without trying Krylov.
DIRECT_MAX_UNKNOWNS = 5_000
#: Largest system for which the direct factorization is used as a fallback (40**3).
DIRECT_FALLBACK_MAX_UNKNOWNS = 40**3


class AssemblyError(ValueError):
    pass


class NonConvergenceError(RuntimeError):
    """Raised when no method reached the requested tolerance."""

    def __init__(self, message, report, best):
        super().__init__(message)
        self.report = report
        self.best = best


@dataclass
class SolveReport:
    method: str
    iterations: int
    residual: float
    wall_time: float
    converged: bool = True


@dataclass
class SparseSystem:
    grid: Grid3D
    matrix: sp.csr_matrix
    rhs: np.ndarray
    unknowns: np.ndarray  # flat (C-order) node indices of the unknowns
    fixed_values: np.ndarray  # grid-shaped, Dirichlet data where fixed

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    def expand(self, x: np.ndarray) -> np.ndarray:
        """Scatter an unknown vector into a full grid field (fixed nodes keep their data)."""
        dtype = np.result_type(x, self.fixed_values)
        out = np.array(self.fixed_values, dtype=dtype, copy=True).reshape(-1)
        out[self.unknowns] = x
        return out.reshape(self.grid.shape)

    def restrict(self, f: np.ndarray) -> np.ndarray:
        return np.asarray(f).reshape(-1)[self.unknowns]

    def dump(self, path) -> None:
        """Write the matrix in MatrixMarket text format."""
        scipy.io.mmwrite(str(path), self.matrix)


def assemble(stencil: dict, grid: Grid3D, fixed: np.ndarray, fixed_values=None, rhs=None) -> SparseSystem:
    """Assemble the linear system of ``stencil`` with Dirichlet nodes ``fixed``.

    ``rhs`` is a grid field (or a list of them for several right-hand sides)
    of source values; only entries at free nodes are used.
    """
    fixed = np.asarray(fixed, dtype=bool)
    if fixed.shape != grid.shape:
        raise AssemblyError("fixed mask shape does not match the grid")
    if not fixed[grid.boundary_mask(1)].all():
        raise AssemblyError("all face nodes must be Dirichlet nodes")
    coeffs = {tuple(int(o) for o in off): np.broadcast_to(c, grid.shape) for off, c in stencil.items()}
    if any(max(abs(o) for o in off) > 1 for off in coeffs):
        raise AssemblyError("stencil offsets must lie within one node")

    dtype = np.result_type(*coeffs.values(), np.float64)
    if fixed_values is None:
        fixed_values = np.zeros(grid.shape, dtype=dtype)
    fixed_values = np.broadcast_to(np.asarray(fixed_values), grid.shape)
    if not np.all(np.isfinite(fixed_values[fixed])):
        raise AssemblyError("Dirichlet data must be finite")

    free = np.flatnonzero(~fixed.reshape(-1))
    n = free.size
    col_of = np.full(grid.size, -1, dtype=np.int64)
    col_of[free] = np.arange(n)
    ijk = np.unravel_index(free, grid.shape)

    multi = rhs is not None and not isinstance(rhs, np.ndarray)
    rhs_list = list(rhs) if multi else [np.zeros(grid.shape) if rhs is None else rhs]
    dtype = np.result_type(dtype, fixed_values, *rhs_list)
    b = np.stack([np.asarray(r).reshape(-1)[free] for r in rhs_list], axis=1).astype(dtype)
    fv = fixed_values.reshape(-1)

    rows, cols, vals = [], [], []
    for off, c in coeffs.items():
        cv = c.reshape(-1)[free]
        bad = ~np.isfinite(cv)
        if bad.any():
            first = free[np.flatnonzero(bad)[0]]
            node = tuple(int(v) for v in np.unravel_index(first, grid.shape))
            raise AssemblyError(f"non-finite stencil coefficient at node {node}, offset {off}")
        nb = np.ravel_multi_index(tuple(ijk[a] + off[a] for a in range(3)), grid.shape)
        nc = col_of[nb]
        inner = nc >= 0
        rows.append(np.flatnonzero(inner))
        cols.append(nc[inner])
        vals.append(cv[inner])
        outer = ~inner
        if outer.any():
            b[outer] -= (cv[outer] * fv[nb[outer]])[:, None]

    A = sp.csr_matrix(
        (np.concatenate(vals).astype(dtype), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    A.sum_duplicates()
    return SparseSystem(grid, A, b if multi else b[:, 0], free, np.array(fixed_values, dtype=dtype))


def _residual(A, x, b) -> float:
    nb = np.linalg.norm(b)
    r = np.linalg.norm(b - A @ x)
    return float(r / nb) if nb > 0 else float(r)


class _Solver:
    """Solver bound to one matrix so factorizations are reused across right-hand sides."""

    def __init__(self, A, method: str):
        self.A = A.tocsc() if method == "direct" else A.tocsr()
        self.method = method
        self._lu = None
        self._precond = None

    def direct(self, b):
        if self._lu is None:
            self._lu = spla.splu(self.A.tocsc(), permc_spec="MMD_AT_PLUS_A")
        return self._lu.solve(b), 1

    def krylov(self, b, tol, max_iter, kind):
        if self._precond is None:
            try:
                ilu = spla.spilu(self.A.tocsc(), drop_tol=0.0, fill_factor=1.0)
                self._precond = spla.LinearOperator(self.A.shape, ilu.solve, dtype=self.A.dtype)
            except RuntimeError:  # singular incomplete factor
                self._precond = False
        M = self._precond or None
        count = [0]

        def cb(_):
            count[0] += 1

        if kind == "gmres":
            x, info = spla.gmres(self.A, b, M=M, rtol=tol, restart=60, maxiter=max(1, max_iter // 60),
                                 callback=cb, callback_type="pr_norm")
        else:
            x, info = spla.bicgstab(self.A, b, M=M, rtol=tol, maxiter=max_iter, callback=cb)
        return x, count[0]


def solve(system: SparseSystem, tol: float = 1e-10, max_iter: int | None = None, method: str = "auto"):
    """Solve ``system``; returns ``(field, report)`` or ``(list_of_fields, report)``.

    ``method`` is ``'auto'``, ``'direct'``, ``'bicgstab'`` or ``'gmres'``.  In
    auto mode small systems are factorized, larger ones use ILU-preconditioned
    BiCGStab, then GMRES, then (up to 40**3 unknowns) a direct factorization.
    The reported residual is always recomputed as ``|b - Ax| / |b|``.
    """
    t0 = time.perf_counter()
    A = system.matrix
    n = A.shape[0]
    max_iter = max_iter or 10 * n
    B = system.rhs if system.rhs.ndim == 2 else system.rhs[:, None]

    if method == "auto":
        plan = ["direct"] if n <= DIRECT_MAX_UNKNOWNS else ["bicgstab", "gmres"]
        if n > DIRECT_MAX_UNKNOWNS and n <= DIRECT_FALLBACK_MAX_UNKNOWNS:
            plan.append("direct")
    elif method in ("direct", "bicgstab", "gmres"):
        plan = [method]
    else:
        raise ValueError(f"unknown solver method {method!r}")

    solvers = {}
    xs, iters, worst, used = [], 0, 0.0, plan[0]
    for col in range(B.shape[1]):
        b = B[:, col]
        if not np.any(b):
            xs.append(np.zeros(n, dtype=np.result_type(A, b)))
            continue
        best, best_res = None, np.inf
        for m in plan:
            kind = "direct" if m == "direct" else "krylov"
            s = solvers.setdefault(kind, _Solver(A, kind))
            x, it = s.direct(b) if m == "direct" else s.krylov(b, tol, max_iter, m)
            res = _residual(A, x, b)
            iters += it
            if res < best_res:
                best, best_res, used = x, res, m
            # a direct solve is exact up to conditioning; accept a loose margin
            if res <= tol or (m == "direct" and res <= max(tol, 1e-8)):
                break
            log.debug("%s reached residual %.2e > %.1e", m, res, tol)
        xs.append(best)
        worst = max(worst, best_res)
        if best_res > tol and not (used == "direct" and best_res <= 1e-8):
            report = SolveReport(used, iters, best_res, time.perf_counter() - t0, converged=False)
            raise NonConvergenceError(
                f"linear solve did not converge: residual {best_res:.3e} > tol {tol:.1e} ({'/'.join(plan)})",
                report,
                system.expand(best),
            )
    report = SolveReport(used, iters, worst, time.perf_counter() - t0)
    fields = [system.expand(x) for x in xs]
    return (fields if system.rhs.ndim == 2 else fields[0]), report
