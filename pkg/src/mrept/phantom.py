"""Synthetic admittivity scenes.

A phantom is a homogeneous background with an ordered list of anomaly shapes
(later shapes win where they overlap) and a boundary collar of width
``collar_d`` in which the background is enforced.  Model 1 uses cylinders
parallel to z, so the sampled admittivity does not depend on z.  Model 2 keeps
Model 1 below ``z = 0`` and places a different set of anomalies above it.

The default material tables shipped in ``mrept/configs`` are representative
tissue-like values chosen for testing, not measured data.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .constants import EPS_VACUUM, OMEGA_3T
from .grid import Grid3D, cube_grid

SCHEMA = "mrept.phantom/1"


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class Material:
    sigma: float  # S/m
    eps_rel: float

    def __post_init__(self):
        if not (self.sigma >= 0 and math.isfinite(self.sigma)):
            raise PhantomError(f"conductivity must be >= 0, got {self.sigma}")
        if not (self.eps_rel >= 1 and math.isfinite(self.eps_rel)):
            raise PhantomError(f"relative permittivity must be >= 1, got {self.eps_rel}")

    @property
    def eps(self) -> float:
        return self.eps_rel * EPS_VACUUM

    def gamma(self, omega: float = OMEGA_3T) -> complex:
        return complex(self.sigma, omega * self.eps)


@dataclass(frozen=True)
class Shape:
    """Anomaly geometry.

    ``cylinder``: axis parallel to z through ``center[:2]``, radius ``size[0]``.
    ``sphere``: ``center`` (3-vector), radius ``size[0]``.
    ``box``: ``center`` and half-extents ``size`` (3-vectors).
    ``z_range`` clips any shape to ``zmin <= z < zmax``.
    """

    kind: str
    center: tuple
    size: tuple
    material: Material
    z_range: tuple | None = None
    label: str = ""

    def __post_init__(self):
        if self.kind not in ("cylinder", "sphere", "box"):
            raise PhantomError(f"unknown shape kind {self.kind!r}")
        need_c = 2 if self.kind == "cylinder" else 3
        if len(self.center) < need_c:
            raise PhantomError(f"{self.kind} needs a {need_c}-component center")
        need_s = 3 if self.kind == "box" else 1
        if len(self.size) != need_s or any(not (s > 0) for s in self.size):
            raise PhantomError(f"{self.kind} needs {need_s} positive size value(s), got {self.size}")
        if self.z_range is not None and not (self.z_range[0] < self.z_range[1]):
            raise PhantomError(f"empty z_range {self.z_range}")

    def contains(self, X, Y, Z) -> np.ndarray:
        c = self.center
        if self.kind == "cylinder":
            inside = (X - c[0]) ** 2 + (Y - c[1]) ** 2 <= self.size[0] ** 2
        elif self.kind == "sphere":
            inside = (X - c[0]) ** 2 + (Y - c[1]) ** 2 + (Z - c[2]) ** 2 <= self.size[0] ** 2
        else:
            inside = (
                (np.abs(X - c[0]) <= self.size[0])
                & (np.abs(Y - c[1]) <= self.size[1])
                & (np.abs(Z - c[2]) <= self.size[2])
            )
        if self.z_range is not None:
            inside = inside & (Z >= self.z_range[0]) & (Z < self.z_range[1])
        return inside

    def radial_extent(self) -> float:
        """Largest distance of the shape from the z axis."""
        c = self.center
        if self.kind == "box":
            return math.hypot(abs(c[0]) + self.size[0], abs(c[1]) + self.size[1])
        return math.hypot(c[0], c[1]) + self.size[0]

    @property
    def z_invariant(self) -> bool:
        return self.kind == "cylinder" and self.z_range is None


@dataclass(frozen=True)
class Phantom:
    background: Material
    shapes: tuple = ()
    collar_d: float = 0.0  # m
    body_radius: float | None = None  # m, radius of the cylindrical object
    omega: float = OMEGA_3T
    smoothing: float = 0.0  # Gaussian width [m]; 0 keeps sharp interfaces
    name: str = ""
    excitation: str = "constant"  # boundary profile used when simulating data

    @property
    def gamma0(self) -> complex:
        return self.background.gamma(self.omega)


@dataclass
class Admittivity:
    """Conductivity [S/m] and permittivity [F/m] fields at angular frequency ``omega``."""

    sigma: np.ndarray
    eps: np.ndarray
    omega: float = OMEGA_3T

    @property
    def gamma(self) -> np.ndarray:
        return self.sigma + 1j * self.omega * self.eps

    @property
    def omega_eps(self) -> np.ndarray:
        return self.omega * self.eps

    @classmethod
    def from_gamma(cls, gamma, omega: float = OMEGA_3T) -> "Admittivity":
        gamma = np.asarray(gamma)
        return cls(np.real(gamma).copy(), np.imag(gamma) / omega, omega)


def _check_inside(shapes, body_radius):
    if body_radius is None:
        return
    for s in shapes:
        if s.radial_extent() > body_radius + 1e-12:
            raise PhantomError(f"shape {s.label or s.kind} at {s.center} extends outside the body cylinder")


def build_model1(cfg: dict) -> Phantom:
    """Phantom whose admittivity is invariant along z (cylindrical anomalies)."""
    p = phantom_from_dict({**cfg, "model": "custom"})
    for s in p.shapes:
        if not s.z_invariant:
            raise PhantomError("model 1 anomalies must be full-height cylinders")
    _check_inside(p.shapes, p.body_radius)
    return replace(p, name=cfg.get("name", "model1"))


def build_model2(cfg: dict) -> Phantom:
    """Model 1 in ``z < 0`` and the ``upper`` anomaly list in ``z >= 0``.

    ``cfg`` is a Model 1 configuration with an extra ``upper`` entry holding
    the anomalies of the upper half (defaults to the lower ones).
    """
    lower = build_model1({k: v for k, v in cfg.items() if k != "upper"})
    upper_cfg = cfg.get("upper", {"anomalies": cfg.get("anomalies", [])})
    upper = tuple(_shape_from_dict(a, f"upper.anomalies[{i}]") for i, a in enumerate(upper_cfg.get("anomalies", [])))
    _check_inside(upper, lower.body_radius)
    inf = math.inf
    shapes = tuple(replace(s, z_range=(-inf, 0.0)) for s in lower.shapes)
    for s in upper:
        lo, hi = s.z_range or (-inf, inf)
        shapes += (replace(s, z_range=(max(0.0, lo), hi)),)
    return replace(lower, shapes=shapes, name=cfg.get("name", "model2"))


def collar_mask(grid: Grid3D, collar_d: float) -> np.ndarray:
    """Nodes whose distance to the nearest face is below ``collar_d``."""
    lo, hi = grid.extent()
    X, Y, Z = grid.mesh()
    dist = np.minimum.reduce([X - lo[0], hi[0] - X, Y - lo[1], hi[1] - Y, Z - lo[2], hi[2] - Z])
    tol = 1e-9 * min(grid.spacing)
    return (dist < collar_d - tol) | grid.boundary_mask(1)


def sample(phantom: Phantom, grid: Grid3D) -> Admittivity:
    """Evaluate the phantom at the grid nodes; the collar gets the background."""
    X, Y, Z = grid.mesh()
    sigma = np.full(grid.shape, phantom.background.sigma)
    eps = np.full(grid.shape, phantom.background.eps)
    for s in phantom.shapes:
        inside = s.contains(X, Y, Z)
        sigma[inside] = s.material.sigma
        eps[inside] = s.material.eps
    if phantom.smoothing > 0:
        from scipy.ndimage import gaussian_filter

        width = [phantom.smoothing / h for h in grid.spacing]
        sigma = gaussian_filter(sigma, width, mode="nearest")
        eps = gaussian_filter(eps, width, mode="nearest")
    collar = collar_mask(grid, phantom.collar_d)
    sigma[collar] = phantom.background.sigma
    eps[collar] = phantom.background.eps
    return Admittivity(sigma, eps, phantom.omega)


def anomaly_mask(phantom: Phantom, grid: Grid3D) -> np.ndarray:
    """Support ``S`` of the anomalies (outside the collar)."""
    X, Y, Z = grid.mesh()
    S = np.zeros(grid.shape, dtype=bool)
    for s in phantom.shapes:
        S |= s.contains(X, Y, Z)
    return S & ~collar_mask(grid, phantom.collar_d)


# ---------------------------------------------------------------------------
# JSON documents


def _material_from_dict(d, where) -> Material:
    try:
        return Material(float(d["sigma"]), float(d["eps_rel"]))
    except KeyError as exc:
        raise PhantomError(f"{where}: missing key {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise PhantomError(f"{where}: {exc}") from None


def _bound(v, default):
    return default if v is None else float(v)


def _shape_from_dict(d, where) -> Shape:
    try:
        kind = d.get("kind", "cylinder")
        size = d.get("size", d.get("radius"))
        size = tuple(float(v) for v in (size if isinstance(size, (list, tuple)) else [size]))
        zr = d.get("z_range")
        return Shape(
            kind,
            tuple(float(v) for v in d["center"]),
            size,
            _material_from_dict(d.get("material", d), where),
            None if zr is None else (_bound(zr[0], -math.inf), _bound(zr[1], math.inf)),
            d.get("label", ""),
        )
    except KeyError as exc:
        raise PhantomError(f"{where}: missing key {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise PhantomError(f"{where}: {exc}") from None


def phantom_from_dict(d: dict) -> Phantom:
    """Build a phantom from its JSON document (dispatching on ``model``)."""
    if not isinstance(d, dict):
        raise PhantomError("phantom document must be a JSON object")
    schema = d.get("schema", SCHEMA)
    if schema != SCHEMA:
        raise PhantomError(f"unsupported schema {schema!r} (expected {SCHEMA!r})")
    model = d.get("model", "custom")
    if model == "model1":
        return build_model1(d)
    if model == "model2":
        return build_model2(d)
    if model != "custom":
        raise PhantomError(f"model: unknown model {model!r}")
    if "background" not in d:
        raise PhantomError("missing key 'background'")
    bg = _material_from_dict(d["background"], "background")
    anomalies = d.get("anomalies", [])
    if not isinstance(anomalies, list):
        raise PhantomError("anomalies: must be a list")
    shapes = tuple(_shape_from_dict(a, f"anomalies[{i}]") for i, a in enumerate(anomalies))
    collar = d.get("collar_d")
    if collar is None:
        g = grid_from_hints(d)
        collar = 2.0 * max(g.spacing)
    body = d.get("body_radius")
    p = Phantom(
        bg,
        shapes,
        float(collar),
        None if body is None else float(body),
        float(d.get("omega", OMEGA_3T)),
        float(d.get("smoothing", 0.0)),
        d.get("name", ""),
        str(d.get("excitation", "constant")),
    )
    if p.collar_d < 0 or p.smoothing < 0:
        raise PhantomError("collar_d and smoothing must be non-negative")
    return p


def _shape_to_dict(s: Shape) -> dict:
    d = {
        "kind": s.kind,
        "center": list(s.center),
        "size": list(s.size),
        "material": {"sigma": s.material.sigma, "eps_rel": s.material.eps_rel},
    }
    if s.z_range is not None:
        d["z_range"] = [None if math.isinf(v) else v for v in s.z_range]
    if s.label:
        d["label"] = s.label
    return d


def phantom_to_dict(p: Phantom) -> dict:
    """Echo a phantom as a ``custom`` document (shapes fully resolved)."""
    return {
        "schema": SCHEMA,
        "model": "custom",
        "name": p.name,
        "background": {"sigma": p.background.sigma, "eps_rel": p.background.eps_rel},
        "anomalies": [_shape_to_dict(s) for s in p.shapes],
        "collar_d": p.collar_d,
        "body_radius": p.body_radius,
        "omega": p.omega,
        "smoothing": p.smoothing,
        "excitation": p.excitation,
    }


def grid_from_hints(d: dict) -> Grid3D:
    """Reconstruction grid suggested by a phantom document's ``grid`` entry."""
    g = d.get("grid", {})
    return cube_grid(int(g.get("n", 33)), float(g.get("length", 0.2)))


def locate_key(text: str, key: str) -> int | None:
    """1-based line of the first occurrence of ``"key"`` in a JSON text."""
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return None if m is None else text.count("\n", 0, m.start()) + 1


def load_phantom_document(path) -> tuple[dict, str]:
    text = Path(path).read_text()
    try:
        return json.loads(text), text
    except json.JSONDecodeError as exc:
        raise PhantomError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from None


def load_phantom(path) -> Phantom:
    doc, text = load_phantom_document(path)
    try:
        return phantom_from_dict(doc)
    except PhantomError as exc:
        key = re.findall(r"'(\w+)'", str(exc)) or re.findall(r"^(\w+)", str(exc))
        line = locate_key(text, key[0]) if key else None
        prefix = f"{path}:{line}: " if line else f"{path}: "
        raise PhantomError(prefix + str(exc)) from None


def default_config(name: str) -> dict:
    """Stock configuration ``'model1'`` or ``'model2'`` shipped with the package."""
    text = resources.files("mrept.configs").joinpath(f"{name}.json").read_text()
    return json.loads(text)
