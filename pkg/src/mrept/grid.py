"""Node-centred rectilinear grid and finite-difference calculus.

Fields are plain numpy arrays of shape ``(nx, ny, nz)`` indexed ``[i, j, k]``.
Vector fields are arrays of shape ``(3, nx, ny, nz)``.  Derivatives are
second-order central differences at interior nodes and second-order
one-sided differences on the faces, so every derived coefficient is defined
up to the boundary.

Binary dumps store nodes with ``i`` varying fastest and ``k`` slowest
(Fortran order of the in-memory array), little-endian float64, complex as
interleaved re/im, plus a JSON sidecar.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

AXES = {"x": 0, "y": 1, "z": 2}


@dataclass(frozen=True)
class Grid3D:
    """Regular grid of ``nx * ny * nz`` nodes with spacings ``h`` [m]."""

    nx: int
    ny: int
    nz: int
    hx: float
    hy: float
    hz: float
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        for n in (self.nx, self.ny, self.nz):
            if int(n) != n or n < 3:
                raise ValueError(f"grid counts must be integers >= 3, got {self.shape}")
        for h in (self.hx, self.hy, self.hz):
            if not (h > 0 and np.isfinite(h)):
                raise ValueError(f"grid spacings must be positive, got {self.spacing}")
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def spacing(self) -> tuple[float, float, float]:
        return (self.hx, self.hy, self.hz)

    @property
    def size(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def cell_volume(self) -> float:
        """Quadrature weight of one node, ``hx * hy * hz``."""
        return self.hx * self.hy * self.hz

    def axis_coords(self, axis: int) -> np.ndarray:
        n = self.shape[axis]
        return self.origin[axis] + self.spacing[axis] * np.arange(n)

    def node(self, i: int, j: int, k: int) -> np.ndarray:
        return np.asarray(self.origin) + np.array([i * self.hx, j * self.hy, k * self.hz])

    def mesh(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Coordinate arrays ``X, Y, Z`` of shape ``grid.shape``."""
        return np.meshgrid(*(self.axis_coords(a) for a in range(3)), indexing="ij")

    def extent(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.asarray(self.origin)
        hi = lo + np.array(self.spacing) * (np.array(self.shape) - 1)
        return lo, hi

    def boundary_mask(self, depth: int = 1) -> np.ndarray:
        """True on nodes closer than ``depth`` nodes to a face (``depth=1``: the faces)."""
        mask = np.zeros(self.shape, dtype=bool)
        if depth <= 0:
            return mask
        d = int(depth)
        mask[:d] = mask[-d:] = True
        mask[:, :d] = mask[:, -d:] = True
        mask[:, :, :d] = mask[:, :, -d:] = True
        return mask

    def interior_mask(self) -> np.ndarray:
        return ~self.boundary_mask(1)

    def refined(self, factor: int) -> "Grid3D":
        """Grid covering the same box with ``factor`` times smaller spacing."""
        if factor < 1 or int(factor) != factor:
            raise ValueError("refinement factor must be a positive integer")
        f = int(factor)
        return Grid3D(
            (self.nx - 1) * f + 1,
            (self.ny - 1) * f + 1,
            (self.nz - 1) * f + 1,
            self.hx / f,
            self.hy / f,
            self.hz / f,
            self.origin,
        )

    def to_dict(self) -> dict:
        return {"dims": list(self.shape), "spacing": list(self.spacing), "origin": list(self.origin)}

    @classmethod
    def from_dict(cls, d: dict) -> "Grid3D":
        return cls(*d["dims"], *d["spacing"], tuple(d.get("origin", (0.0, 0.0, 0.0))))


def make_grid(nx, ny, nz, h, origin=(0.0, 0.0, 0.0)) -> Grid3D:
    """Build a :class:`Grid3D`; ``h`` is a scalar or a 3-vector of spacings."""
    hx, hy, hz = np.broadcast_to(np.asarray(h, dtype=float), (3,))
    return Grid3D(nx, ny, nz, float(hx), float(hy), float(hz), tuple(origin))


def cube_grid(n: int, length: float, centered: bool = True) -> Grid3D:
    """``n``-node cube of side ``length``, centred on the origin by default."""
    h = length / (n - 1)
    o = -length / 2 if centered else 0.0
    return Grid3D(n, n, n, h, h, h, (o, o, o))


def _axis(axis) -> int:
    if isinstance(axis, str):
        return AXES[axis]
    if axis not in (0, 1, 2):
        raise ValueError(f"invalid axis {axis!r}")
    return axis


def _check(f: np.ndarray, grid: Grid3D) -> np.ndarray:
    f = np.asarray(f)
    if f.shape != grid.shape:
        raise ValueError(f"field shape {f.shape} does not match grid {grid.shape}")
    return f


def ddx(f: np.ndarray, grid: Grid3D, axis) -> np.ndarray:
    """First derivative along ``axis`` ('x', 'y', 'z' or 0-2)."""
    a = _axis(axis)
    return np.gradient(_check(f, grid), grid.spacing[a], axis=a, edge_order=2)


def gradient(f: np.ndarray, grid: Grid3D) -> np.ndarray:
    f = _check(f, grid)
    return np.stack([np.gradient(f, grid.spacing[a], axis=a, edge_order=2) for a in range(3)])


def divergence(v: np.ndarray, grid: Grid3D) -> np.ndarray:
    if len(v) != 3:
        raise ValueError("vector field must have three components")
    return sum(ddx(v[a], grid, a) for a in range(3))


def second_difference(f: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Three-point second derivative; one-sided four-point formula on the faces."""
    f = np.moveaxis(np.asarray(f), axis, 0)
    out = np.empty_like(f)
    out[1:-1] = (f[2:] - 2.0 * f[1:-1] + f[:-2]) / h**2
    if f.shape[0] >= 4:
        out[0] = (2.0 * f[0] - 5.0 * f[1] + 4.0 * f[2] - f[3]) / h**2
        out[-1] = (2.0 * f[-1] - 5.0 * f[-2] + 4.0 * f[-3] - f[-4]) / h**2
    else:
        out[0] = out[-1] = out[1]
    return np.moveaxis(out, 0, axis)


def laplacian(f: np.ndarray, grid: Grid3D, compact: bool = True) -> np.ndarray:
    """Discrete Laplacian.

    ``compact=True`` is the 7-point stencil (exact on quadratics at interior
    nodes).  ``compact=False`` returns ``divergence(gradient(f))``, the nested
    wide stencil.
    """
    f = _check(f, grid)
    if not compact:
        return divergence(gradient(f, grid), grid)
    return sum(second_difference(f, grid.spacing[a], a) for a in range(3))


def restrict(f: np.ndarray, factor: int) -> np.ndarray:
    """Inject a fine-grid field onto the grid ``factor`` times coarser."""
    return np.asarray(f)[::factor, ::factor, ::factor].copy()


# ---------------------------------------------------------------------------
# field dumps


def save_field(path, values: np.ndarray, grid: Grid3D, name: str = "", **meta) -> Path:
    """Write ``values`` as raw little-endian float64 plus ``<path>.json``."""
    path = Path(path)
    values = _check(values, grid)
    kind = "complex" if np.iscomplexobj(values) else "real"
    flat = np.ravel(values, order="F")
    if kind == "complex":
        raw = np.empty(2 * flat.size, dtype="<f8")
        raw[0::2] = flat.real
        raw[1::2] = flat.imag
    else:
        raw = flat.astype("<f8")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(raw.tobytes())
    sidecar = {**grid.to_dict(), "kind": kind, "name": name or path.stem, **meta}
    _sidecar(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


def load_field(path) -> tuple[np.ndarray, Grid3D, dict]:
    path = Path(path)
    meta = json.loads(_sidecar(path).read_text())
    grid = Grid3D.from_dict(meta)
    raw = np.frombuffer(path.read_bytes(), dtype="<f8")
    if meta["kind"] == "complex":
        flat = raw[0::2] + 1j * raw[1::2]
    else:
        flat = raw.copy()
    if flat.size != grid.size:
        raise ValueError(f"{path}: {flat.size} values but grid has {grid.size} nodes")
    return flat.reshape(grid.shape, order="F"), grid, meta


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")
