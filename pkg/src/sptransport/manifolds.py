"""Closed-form model manifolds: metric, geodesics, distances, injectivity radii.

Every model exposes a vectorized array API (leading batch axes allowed) that
the samplers and transport code use directly, and a thin object API built on
:class:`Point`, :class:`TangentVec` and :class:`GeodesicSegment`.

Chart conventions
-----------------
Euclidean(n)   coords in R^n, tangent components in R^n.
Circle(R)      coords = (theta,) with theta in [0, 2*pi); tangent = (dtheta,),
               metric speed R*|dtheta|.
FlatTorus(L)   coords (u1, u2) in [0, L1) x [0, L2) (arc lengths), flat metric.
Sphere2(R)     embedding coords in R^3 with |x| = R; tangents are R^3 vectors
               orthogonal to x.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

TWO_PI = 2.0 * math.pi

#: Fraction of the injectivity radius inside which minimizing geodesics are
#: treated as unique.
CUT_FRACTION = 0.9


class DomainError(ValueError):
    """Raised when arguments live on different manifolds or outside a domain."""


def wrap_signed(d, period):
    """Reduce ``d`` to the short representative in [-period/2, period/2)."""
    return np.mod(np.asarray(d, dtype=float) + 0.5 * period, period) - 0.5 * period


def wrap_abs(d, period):
    """|wrap_signed(d)|, computed so that it is exactly even in ``d``."""
    r = np.mod(np.abs(np.asarray(d, dtype=float)), period)
    return np.minimum(r, period - r)


class ManifoldSpec:
    """Base class of the model manifolds.

    Subclasses are frozen dataclasses; all array methods accept leading batch
    axes and operate on the last axis (length ``coord_dim``).
    """

    kind: str = ""
    dim: int = 0
    coord_dim: int = 0

    # -- array API ---------------------------------------------------------
    def canonical(self, coords):
        raise NotImplementedError

    def dist(self, a, b):
        raise NotImplementedError

    def exp(self, x, v):
        raise NotImplementedError

    def log(self, x, y):
        """Initial velocity of the minimizing geodesic on [0, 1] from x to y."""
        raise NotImplementedError

    def norm(self, x, v):
        raise NotImplementedError

    def gaussian_tangent(self, x, z):
        """Map standard normals ``z`` (..., coord_dim) to an isotropic tangent
        vector at ``x`` with unit variance along every orthonormal direction."""
        raise NotImplementedError

    def injectivity_radius(self) -> float:
        raise NotImplementedError

    def cut_radius(self) -> float:
        return CUT_FRACTION * self.injectivity_radius()

    def volume(self) -> float:
        return math.inf

    # -- config ------------------------------------------------------------
    def to_dict(self) -> dict:
        raise NotImplementedError

    @property
    def label(self) -> str:
        return self.kind

    def point(self, *coords) -> "Point":
        if len(coords) == 1 and np.ndim(coords[0]) == 1:
            coords = tuple(coords[0])
        return Point(self, coords)


@dataclass(frozen=True)
class Euclidean(ManifoldSpec):
    n: int = 2
    kind = "euclidean"

    def __post_init__(self):
        if int(self.n) < 1:
            raise DomainError("Euclidean dimension must be >= 1")

    @property
    def dim(self):
        return int(self.n)

    @property
    def coord_dim(self):
        return int(self.n)

    def canonical(self, coords):
        return np.asarray(coords, dtype=float)

    def dist(self, a, b):
        return np.linalg.norm(np.asarray(b, float) - np.asarray(a, float), axis=-1)

    def exp(self, x, v):
        return np.asarray(x, float) + np.asarray(v, float)

    def log(self, x, y):
        return np.asarray(y, float) - np.asarray(x, float)

    def norm(self, x, v):
        return np.linalg.norm(np.asarray(v, float), axis=-1)

    def gaussian_tangent(self, x, z):
        return np.asarray(z, float)

    def injectivity_radius(self):
        return math.inf

    def cut_radius(self):
        return math.inf

    def to_dict(self):
        return {"kind": self.kind, "n": int(self.n)}

    @property
    def label(self):
        return f"euclidean({self.n})"


@dataclass(frozen=True)
class Circle(ManifoldSpec):
    radius: float = 1.0
    kind = "circle"
    dim = 1
    coord_dim = 1

    def __post_init__(self):
        if not self.radius > 0:
            raise DomainError("circle radius must be positive")

    def canonical(self, coords):
        return np.mod(np.asarray(coords, dtype=float), TWO_PI)

    def dist(self, a, b):
        d = wrap_abs(np.asarray(b, float)[..., 0] - np.asarray(a, float)[..., 0], TWO_PI)
        return self.radius * d

    def exp(self, x, v):
        return self.canonical(np.asarray(x, float) + np.asarray(v, float))

    def log(self, x, y):
        return wrap_signed(np.asarray(y, float) - np.asarray(x, float), TWO_PI)

    def norm(self, x, v):
        return self.radius * np.abs(np.asarray(v, float)[..., 0])

    def gaussian_tangent(self, x, z):
        return np.asarray(z, float) / self.radius

    def injectivity_radius(self):
        return math.pi * self.radius

    def volume(self):
        return TWO_PI * self.radius

    def to_dict(self):
        return {"kind": self.kind, "radius": float(self.radius)}

    @property
    def label(self):
        return f"circle({self.radius:g})"


@dataclass(frozen=True)
class FlatTorus(ManifoldSpec):
    period1: float = TWO_PI
    period2: float = TWO_PI
    kind = "torus"
    dim = 2
    coord_dim = 2

    def __post_init__(self):
        if not (self.period1 > 0 and self.period2 > 0):
            raise DomainError("torus periods must be positive")

    @property
    def periods(self):
        return np.array([self.period1, self.period2])

    def canonical(self, coords):
        return np.mod(np.asarray(coords, dtype=float), self.periods)

    def dist(self, a, b):
        d = wrap_abs(np.asarray(b, float) - np.asarray(a, float), self.periods)
        return np.linalg.norm(d, axis=-1)

    def exp(self, x, v):
        return self.canonical(np.asarray(x, float) + np.asarray(v, float))

    def log(self, x, y):
        return wrap_signed(np.asarray(y, float) - np.asarray(x, float), self.periods)

    def norm(self, x, v):
        return np.linalg.norm(np.asarray(v, float), axis=-1)

    def gaussian_tangent(self, x, z):
        return np.asarray(z, float)

    def injectivity_radius(self):
        return 0.5 * min(self.period1, self.period2)

    def volume(self):
        return self.period1 * self.period2

    def to_dict(self):
        return {"kind": self.kind, "periods": [float(self.period1), float(self.period2)]}

    @property
    def label(self):
        return f"torus({self.period1:g},{self.period2:g})"


@dataclass(frozen=True)
class Sphere2(ManifoldSpec):
    radius: float = 1.0
    kind = "sphere2"
    dim = 2
    coord_dim = 3

    def __post_init__(self):
        if not self.radius > 0:
            raise DomainError("sphere radius must be positive")

    def canonical(self, coords):
        c = np.asarray(coords, dtype=float)
        n = np.linalg.norm(c, axis=-1, keepdims=True)
        if np.any(n == 0):
            raise DomainError("sphere point cannot be the origin")
        return self.radius * c / n

    def dist(self, a, b):
        a = np.asarray(a, float)
        b = np.asarray(b, float)
        # atan2 form stays accurate for nearby and nearly antipodal points
        cross = np.linalg.norm(np.cross(a, b), axis=-1)
        dot = np.sum(a * b, axis=-1)
        return self.radius * np.arctan2(cross, dot)

    def exp(self, x, v):
        x = np.asarray(x, float)
        v = np.asarray(v, float)
        speed = np.linalg.norm(v, axis=-1, keepdims=True)
        ang = speed / self.radius
        safe = np.where(speed > 0, speed, 1.0)
        y = x * np.cos(ang) + self.radius * (v / safe) * np.sin(ang)
        y = np.where(speed > 0, y, x)
        return self.canonical(y)

    def log(self, x, y):
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        ang = self.dist(x, y)[..., None] / self.radius
        xh = x / self.radius
        u = y / self.radius - np.sum(xh * y / self.radius, axis=-1, keepdims=True) * xh
        un = np.linalg.norm(u, axis=-1, keepdims=True)
        safe = np.where(un > 0, un, 1.0)
        return np.where(un > 0, self.radius * ang * u / safe, 0.0)

    def norm(self, x, v):
        return np.linalg.norm(np.asarray(v, float), axis=-1)

    def project_tangent(self, x, w):
        xh = np.asarray(x, float) / self.radius
        return w - np.sum(w * xh, axis=-1, keepdims=True) * xh

    def gaussian_tangent(self, x, z):
        return self.project_tangent(x, np.asarray(z, float))

    def injectivity_radius(self):
        return math.pi * self.radius

    def volume(self):
        return 4.0 * math.pi * self.radius ** 2

    def to_dict(self):
        return {"kind": self.kind, "radius": float(self.radius)}

    @property
    def label(self):
        return f"sphere2({self.radius:g})"


def manifold_from_dict(d: dict) -> ManifoldSpec:
    """Build a manifold from its config form, e.g. ``{"kind": "sphere2", "radius": 1.0}``."""
    kind = str(d.get("kind", "")).lower()
    if kind == "euclidean":
        return Euclidean(int(d.get("n", d.get("dim", 2))))
    if kind == "circle":
        return Circle(float(d.get("radius", 1.0)))
    if kind in ("torus", "flat_torus", "flattorus"):
        periods = d.get("periods", [TWO_PI, TWO_PI])
        return FlatTorus(float(periods[0]), float(periods[1]))
    if kind in ("sphere2", "sphere"):
        return Sphere2(float(d.get("radius", 1.0)))
    raise DomainError(f"unknown manifold kind {kind!r}")


# ---------------------------------------------------------------------------
# object API
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Point:
    manifold: ManifoldSpec
    coords: tuple

    def __post_init__(self):
        c = self.manifold.canonical(np.asarray(self.coords, dtype=float).reshape(-1))
        if c.shape != (self.manifold.coord_dim,):
            raise DomainError(
                f"{self.manifold.label} expects {self.manifold.coord_dim} coordinates, got {c.shape}"
            )
        object.__setattr__(self, "coords", tuple(float(a) for a in c))

    @property
    def array(self) -> np.ndarray:
        return np.array(self.coords)

    def __eq__(self, other):
        return (
            isinstance(other, Point)
            and self.manifold == other.manifold
            and self.coords == other.coords
        )

    def __hash__(self):
        return hash((self.manifold, self.coords))

    def close_to(self, other: "Point", tol: float = 1e-10) -> bool:
        _same(self, other)
        return float(self.manifold.dist(self.array, other.array)) <= tol


@dataclass(frozen=True, eq=False)
class TangentVec:
    base: Point
    components: tuple

    def __post_init__(self):
        m = self.base.manifold
        c = np.asarray(self.components, dtype=float).reshape(-1)
        if c.shape != (m.coord_dim,):
            raise DomainError(f"tangent vector needs {m.coord_dim} components")
        if isinstance(m, Sphere2):
            c = m.project_tangent(self.base.array, c)
        object.__setattr__(self, "components", tuple(float(a) for a in c))

    @property
    def array(self) -> np.ndarray:
        return np.array(self.components)

    @property
    def norm(self) -> float:
        return float(self.base.manifold.norm(self.base.array, self.array))

    def scaled(self, s: float) -> "TangentVec":
        return TangentVec(self.base, tuple(s * a for a in self.components))


@dataclass(frozen=True)
class GeodesicSegment:
    """Constant-speed geodesic ``s -> exp(start, s * initial_velocity)`` on [0, 1]."""

    start: Point
    end: Point
    initial_velocity: TangentVec
    length: float = field(default=0.0)

    @property
    def manifold(self) -> ManifoldSpec:
        return self.start.manifold

    def at(self, s: float) -> Point:
        m = self.manifold
        return Point(m, tuple(m.exp(self.start.array, s * self.initial_velocity.array)))

    def reversed(self) -> "GeodesicSegment":
        m = self.manifold
        # velocity at the far end, pointing back
        v_end = _velocity_at_end(m, self.start.array, self.initial_velocity.array)
        return GeodesicSegment(self.end, self.start, TangentVec(self.end, tuple(-v_end)), self.length)

    def split(self, s: float):
        mid = self.at(s)
        m = self.manifold
        first = GeodesicSegment(self.start, mid, self.initial_velocity.scaled(s), s * self.length)
        v_mid = _velocity_at(m, self.start.array, self.initial_velocity.array, s)
        second = GeodesicSegment(mid, self.end, TangentVec(mid, tuple((1 - s) * v_mid)), (1 - s) * self.length)
        return first, second


def _velocity_at(m, x, v, s):
    if isinstance(m, Sphere2):
        speed = np.linalg.norm(v)
        if speed == 0:
            return v
        ang = s * speed / m.radius
        u = v / speed
        xh = x / m.radius
        return speed * (u * np.cos(ang) - xh * np.sin(ang))
    return v


def _velocity_at_end(m, x, v):
    return _velocity_at(m, x, v, 1.0)


def _same(x: Point, y: Point):
    if x.manifold != y.manifold:
        raise DomainError(f"points on different manifolds: {x.manifold.label} vs {y.manifold.label}")


def distance(x: Point, y: Point) -> float:
    _same(x, y)
    return float(x.manifold.dist(x.array, y.array))


def exp_map(x: Point, v: TangentVec) -> Point:
    if v.base != x:
        raise DomainError("tangent vector is not based at x")
    return Point(x.manifold, tuple(x.manifold.exp(x.array, v.array)))


def injectivity_radius(x: Point) -> float:
    return x.manifold.injectivity_radius()


def cut_radius(x: Point) -> float:
    return x.manifold.cut_radius()


def minimizing_geodesic(x: Point, y: Point, radius: Optional[float] = None) -> Optional[GeodesicSegment]:
    """Unique minimizing geodesic from x to y, or ``None``.

    ``radius`` defaults to the cut radius (0.9 x injectivity radius); points at
    distance >= radius are reported as having no usable geodesic.
    """
    _same(x, y)
    m = x.manifold
    r = m.cut_radius() if radius is None else radius
    d = distance(x, y)
    if not d < r:
        return None
    v = TangentVec(x, tuple(m.log(x.array, y.array)))
    return GeodesicSegment(x, y, v, d)
