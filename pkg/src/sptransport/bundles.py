"""Hermitian bundles with Hermitian connections over the model manifolds.

Parallel transport along geodesic segments, the cut-off transport ``P(x, y)``
(transport from ``y`` to ``x`` along the unique minimizing geodesic, the zero
map otherwise), holonomy of geodesic loops, the normalized endomorphism inner
product and the flat map ``v -> sqrt(r) <., v>``.

The batched entry points work on coordinate arrays with leading batch axes
and return ``(..., r, r)`` complex matrices; the object API wraps them in
:class:`TransportOp` and :class:`FiberVector`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .manifolds import (
    Circle,
    DomainError,
    GeodesicSegment,
    ManifoldSpec,
    Point,
    Sphere2,
    minimizing_geodesic,
)

#: Magnus sub-steps are chosen so that (segment length) / steps <= MAGNUS_H.
MAGNUS_H = 1e-2
UNITARY_TOL = 1e-9


# ---------------------------------------------------------------------------
# small batched linear algebra
# ---------------------------------------------------------------------------


def dagger(a):
    return np.conj(np.swapaxes(a, -1, -2))


def expm_antihermitian(g):
    """exp(g) for a batch of anti-Hermitian matrices via eigh of the Hermitian i*g."""
    g = np.asarray(g, dtype=complex)
    if g.shape[-1] == 1:
        return np.exp(g)
    herm = 1j * g
    herm = 0.5 * (herm + dagger(herm))
    w, u = np.linalg.eigh(herm)
    return (u * np.exp(-1j * w)[..., None, :]) @ dagger(u)


def polar_unitary(a):
    """Nearest unitary (polar factor) of each matrix in a batch."""
    a = np.asarray(a)
    if a.shape[-1] == 1:
        return a / np.abs(a)
    u, _, vh = np.linalg.svd(a)
    return u @ vh


def magnus_propagate(generator: Callable[[float], np.ndarray], n_steps: int, size: int, batch=()):
    """Integrate ``U' = G(s) U`` on [0, 1] with midpoint Magnus steps.

    ``generator(s)`` returns a batch of anti-Hermitian (or real skew) matrices
    ``(*batch, size, size)``. Each step multiplies by ``exp(h G(s + h/2))`` and
    re-unitarizes with the polar factor.
    """
    n_steps = max(1, int(n_steps))
    h = 1.0 / n_steps
    u = np.broadcast_to(np.eye(size, dtype=complex), (*batch, size, size)).copy()
    for m in range(n_steps):
        g = np.asarray(generator((m + 0.5) * h), dtype=complex)
        u = expm_antihermitian(h * g) @ u
        u = polar_unitary(u)
    return u


def magnus_steps(length) -> int:
    length = float(np.max(length)) if np.size(length) else 0.0
    return max(1, int(math.ceil(length / MAGNUS_H)))


# ---------------------------------------------------------------------------
# connections
# ---------------------------------------------------------------------------


class Connection:
    """A Hermitian connection on a rank-``r`` bundle over a model manifold.

    ``transport(manifold, x, v)`` returns the parallel transport along the
    geodesic ``s -> exp(x, s v)``, s in [0, 1], as a map from the fiber at
    ``x`` to the fiber at its endpoint, written in the connection's frame.
    """

    name = ""
    rank = 1

    def check_base(self, manifold: ManifoldSpec):
        pass

    def transport(self, manifold, x, v, method="auto"):
        if method == "magnus":
            return self.transport_magnus(manifold, x, v)
        return self.transport_closed(manifold, x, v)

    def transport_closed(self, manifold, x, v):
        return self.transport_magnus(manifold, x, v)

    def transport_magnus(self, manifold, x, v):
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {"kind": self.name}


@dataclass(frozen=True)
class TrivialFlat(Connection):
    """Trivial rank-r bundle with the connection ``d``."""

    rank: int = 1
    name = "flat"

    def transport_closed(self, manifold, x, v):
        batch = np.shape(x)[:-1]
        return np.broadcast_to(np.eye(self.rank, dtype=complex), (*batch, self.rank, self.rank)).copy()

    def transport_magnus(self, manifold, x, v):
        return self.transport_closed(manifold, x, v)

    def to_dict(self):
        return {"kind": self.name, "rank": int(self.rank)}


@dataclass(frozen=True)
class CircleU1(Connection):
    """Trivial line bundle over a circle with connection ``d + i*alpha*dtheta``.

    Transport along a curve sweeping the signed angle ``dtheta`` is
    ``exp(-i*alpha*dtheta)``.
    """

    alpha: float = 0.0
    name = "circle_u1"
    rank = 1

    def check_base(self, manifold):
        if not isinstance(manifold, Circle):
            raise DomainError("circle_u1 connection needs a circle base")

    def transport_closed(self, manifold, x, v):
        dtheta = np.asarray(v, float)[..., 0]
        return np.exp(-1j * self.alpha * dtheta)[..., None, None]

    def transport_magnus(self, manifold, x, v):
        v = np.asarray(v, float)
        dtheta = v[..., 0]
        gen = lambda s: (-1j * self.alpha * dtheta)[..., None, None]
        n = magnus_steps(manifold.norm(x, v))
        return magnus_propagate(gen, n, 1, batch=dtheta.shape)

    def to_dict(self):
        return {"kind": self.name, "alpha": float(self.alpha)}


def sphere_frame(p):
    """Reference orthonormal frame (e1, e2) of T_pS^2, oriented by the outward normal.

    ``e1`` is the unit polar-angle direction (pointing south), ``e2 = p_hat x e1``
    the unit azimuthal direction. At the poles, where that frame degenerates,
    ``e1`` falls back to the projection of the x axis.
    """
    p = np.asarray(p, float)
    ph = p / np.linalg.norm(p, axis=-1, keepdims=True)
    zhat = np.array([0.0, 0.0, 1.0])
    e1 = ph * ph[..., 2:3] - zhat
    n1 = np.linalg.norm(e1, axis=-1, keepdims=True)
    polar = n1[..., 0] < 1e-12
    if np.any(polar):
        xhat = np.array([1.0, 0.0, 0.0])
        alt = xhat - ph * ph[..., 0:1]
        e1 = np.where(polar[..., None], alt, e1)
        n1 = np.linalg.norm(e1, axis=-1, keepdims=True)
    e1 = e1 / n1
    e2 = np.cross(ph, e1)
    return e1, e2


def sphere_rotation(x, v, radius):
    """Rotation matrices (3x3) of the great-circle motion ``s -> exp(x, s v)``."""
    x = np.asarray(x, float)
    v = np.asarray(v, float)
    speed = np.linalg.norm(v, axis=-1)
    ang = speed / radius
    xh = x / radius
    safe = np.where(speed > 0, speed, 1.0)
    axis = np.cross(xh, v / safe[..., None])
    kx = np.zeros(x.shape[:-1] + (3, 3))
    kx[..., 0, 1], kx[..., 0, 2] = -axis[..., 2], axis[..., 1]
    kx[..., 1, 0], kx[..., 1, 2] = axis[..., 2], -axis[..., 0]
    kx[..., 2, 0], kx[..., 2, 1] = -axis[..., 1], axis[..., 0]
    s = np.sin(ang)[..., None, None]
    c = np.cos(ang)[..., None, None]
    eye = np.eye(3)
    return eye + s * kx + (1 - c) * (kx @ kx)


@dataclass(frozen=True)
class LeviCivitaSphere(Connection):
    """Tangent bundle of Sphere2 as a complex line bundle.

    A tangent vector ``a e1 + b e2`` in the reference frame of
    :func:`sphere_frame` is the complex number ``a + i b``; transport is the
    unit scalar by which the transported ``e1`` is rotated relative to the
    frame at the endpoint. Transport itself is carried out in the embedding,
    so the frame singularity at the poles never enters a step.
    """

    name = "levi_civita"
    rank = 1

    def check_base(self, manifold):
        if not isinstance(manifold, Sphere2):
            raise DomainError("levi_civita connection needs a sphere2 base")

    def _frame_scalar(self, x, y, rot):
        e1x, _ = sphere_frame(x)
        w = np.einsum("...ij,...j->...i", rot, e1x)
        f1, f2 = sphere_frame(y)
        z = np.sum(w * f1, axis=-1) + 1j * np.sum(w * f2, axis=-1)
        return (z / np.abs(z))[..., None, None]

    def transport_closed(self, manifold, x, v):
        x = np.asarray(x, float)
        rot = sphere_rotation(x, v, manifold.radius)
        y = manifold.exp(x, v)
        return self._frame_scalar(x, y, rot)

    def transport_magnus(self, manifold, x, v):
        # embedded transport equation V' = (c' c^T - c c'^T) V / R^2 along the
        # geodesic, integrated step by step
        x = np.asarray(x, float)
        v = np.asarray(v, float)
        R = manifold.radius
        speed = np.linalg.norm(v, axis=-1)
        safe = np.where(speed > 0, speed, 1.0)
        u = v / safe[..., None]
        xh = x / R

        def gen(s):
            ang = (s * speed / R)[..., None]
            c = R * (xh * np.cos(ang) + u * np.sin(ang))
            dc = speed[..., None] * (u * np.cos(ang) - xh * np.sin(ang))
            return (dc[..., :, None] * c[..., None, :] - c[..., :, None] * dc[..., None, :]) / R**2

        rot = magnus_propagate(gen, magnus_steps(speed), 3, batch=x.shape[:-1]).real
        y = manifold.exp(x, v)
        return self._frame_scalar(x, y, rot)


# -- matrix-valued connection forms ------------------------------------------

_SX = np.array([[0, 1], [1, 0]], dtype=complex)
_SY = np.array([[0, -1j], [1j, 0]], dtype=complex)
_SZ = np.array([[1, 0], [0, -1]], dtype=complex)


def _magnetic_plane(p, v, b=1.0):
    a = np.asarray(0.5j * b * (p[..., 0] * v[..., 1] - p[..., 1] * v[..., 0]))
    return a[..., None, None]


def _su2_plane(p, v, g=0.7):
    return 1j * g * (
        v[..., 0, None, None] * _SX + (v[..., 1] * (1.0 + p[..., 0]))[..., None, None] * _SY
    )


def _u2_torus(p, v, g=0.5):
    return 1j * g * (v[..., 0, None, None] * _SX + v[..., 1, None, None] * _SZ)


#: name -> (rank, allowed base kinds, A(p)(v) returning anti-Hermitian matrices)
MATRIX_CATALOG = {
    "magnetic_plane": (1, ("euclidean",), _magnetic_plane),
    "su2_plane": (2, ("euclidean",), _su2_plane),
    "u2_torus": (2, ("torus",), _u2_torus),
}


@dataclass(frozen=True)
class MatrixForm(Connection):
    """Connection ``d + A`` with a catalog form ``A`` on a flat chart.

    Transport solves ``u' = -A(c(s))(c'(s)) u`` along the straight chart line
    with midpoint Magnus steps.
    """

    entry: str = "su2_plane"
    name = "matrix"

    def __post_init__(self):
        if self.entry not in MATRIX_CATALOG:
            raise DomainError(f"unknown connection form {self.entry!r}")

    @property
    def rank(self):
        return MATRIX_CATALOG[self.entry][0]

    def form(self, p, v):
        return MATRIX_CATALOG[self.entry][2](np.asarray(p, float), np.asarray(v, float))

    def check_base(self, manifold):
        if manifold.kind not in MATRIX_CATALOG[self.entry][1]:
            raise DomainError(f"form {self.entry!r} is not defined over {manifold.label}")
        if manifold.kind == "euclidean" and manifold.dim != 2:
            raise DomainError("catalog plane forms need Euclidean(2)")

    def transport_magnus(self, manifold, x, v):
        x = np.asarray(x, float)
        v = np.asarray(v, float)
        gen = lambda s: -self.form(x + s * v, v)
        return magnus_propagate(gen, magnus_steps(manifold.norm(x, v)), self.rank, batch=x.shape[:-1])

    def transport_closed(self, manifold, x, v):
        if self.entry == "magnetic_plane":
            x = np.asarray(x, float)
            v = np.asarray(v, float)
            # the form is linear in p, so the line integral is exact at the midpoint
            return np.exp(-self.form(x + 0.5 * v, v))
        return self.transport_magnus(manifold, x, v)

    def to_dict(self):
        return {"kind": self.name, "entry": self.entry}


# ---------------------------------------------------------------------------
# bundle spec
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BundleSpec:
    base: ManifoldSpec
    connection: Connection

    def __post_init__(self):
        self.connection.check_base(self.base)

    @property
    def rank(self) -> int:
        return int(self.connection.rank)

    def to_dict(self):
        return {"base": self.base.to_dict(), **self.connection.to_dict()}

    # -- batched transport --------------------------------------------------
    def step_transport(self, x, y):
        """Cut-off transport ``P(y, x)`` for batches of consecutive points.

        Returns ``(mats, ok)``: ``mats[..., :, :]`` maps the fiber at ``x`` to
        the fiber at ``y`` where ``ok``, and is exactly zero elsewhere.
        """
        m = self.base
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        ok = m.dist(x, y) < m.cut_radius()
        v = m.log(x, y)
        if not np.all(ok):
            v = np.where(ok[..., None], v, 0.0)
        mats = self.connection.transport(m, x, v)
        if not np.all(ok):
            mats = np.where(ok[..., None, None], mats, 0.0)
        return mats, ok


def connection_from_dict(d: dict) -> Connection:
    kind = str(d.get("kind", "flat")).lower().replace("-", "_")
    if kind in ("flat", "trivial", "trivial_flat"):
        return TrivialFlat(int(d.get("rank", 1)))
    if kind in ("circle_u1", "u1"):
        return CircleU1(float(d.get("alpha", 0.0)))
    if kind in ("levi_civita", "levicivita", "levi_civita_sphere"):
        return LeviCivitaSphere()
    if kind in ("matrix", "matrix_form"):
        return MatrixForm(str(d.get("entry", "su2_plane")))
    raise DomainError(f"unknown bundle kind {kind!r}")


def bundle_from_dict(base: ManifoldSpec, d: dict) -> BundleSpec:
    return BundleSpec(base, connection_from_dict(d))


# ---------------------------------------------------------------------------
# object API
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FiberVector:
    fiber: Point
    components: np.ndarray

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.components, dtype=complex)).copy()
        if not np.all(np.isfinite(c)):
            raise DomainError("fiber vector components must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "components", c)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.components))


@dataclass(frozen=True, eq=False)
class FiberCovector:
    fiber: Point
    components: np.ndarray

    def __call__(self, u: FiberVector) -> complex:
        return complex(np.sum(self.components * u.components))

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.components))


@dataclass(frozen=True, eq=False)
class TransportOp:
    """Map from the fiber over ``source_fiber`` to the fiber over ``target_fiber``."""

    source_fiber: Point
    target_fiber: Point
    matrix: np.ndarray
    is_zero: bool = False

    def __post_init__(self):
        mat = np.array(self.matrix, dtype=complex)
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
            raise DomainError("transport matrix must be square")
        if self.is_zero:
            mat = np.zeros_like(mat)
        mat.setflags(write=False)
        object.__setattr__(self, "matrix", mat)

    @property
    def rank(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def zero(cls, source, target, rank):
        return cls(source, target, np.zeros((rank, rank), dtype=complex), True)

    def unitarity_defect(self) -> float:
        if self.is_zero:
            return 0.0
        m = self.matrix
        return float(np.linalg.norm(dagger(m) @ m - np.eye(self.rank), 2))

    @property
    def op_norm(self) -> float:
        return float(np.linalg.norm(self.matrix, 2))

    def adjoint(self) -> "TransportOp":
        return TransportOp(self.target_fiber, self.source_fiber, dagger(self.matrix), self.is_zero)

    inverse = adjoint

    def __matmul__(self, other: "TransportOp") -> "TransportOp":
        """``self @ other``: apply ``other`` first."""
        if not other.target_fiber.close_to(self.source_fiber, 1e-9):
            raise DomainError("composed transports do not share a fiber")
        z = self.is_zero or other.is_zero
        return TransportOp(other.source_fiber, self.target_fiber, self.matrix @ other.matrix, z)

    def apply(self, v: FiberVector) -> FiberVector:
        if not v.fiber.close_to(self.source_fiber, 1e-9):
            raise DomainError("vector is not in the source fiber")
        return FiberVector(self.target_fiber, self.matrix @ v.components)


def _check_on_base(seg: GeodesicSegment, spec: BundleSpec):
    if seg.manifold != spec.base:
        raise DomainError("segment is not on the bundle's base manifold")


def transport_along_segment(seg: GeodesicSegment, spec: BundleSpec, method: str = "auto") -> TransportOp:
    """Parallel transport along ``seg`` as a map E_start -> E_end.

    ``method="magnus"`` forces the step-wise Magnus integrator; the default
    uses the exact exponential where the generator is constant along the
    segment (flat, U(1) and sphere cases), which is what the integrator
    reduces to.
    """
    _check_on_base(seg, spec)
    m = spec.base
    mat = spec.connection.transport(m, seg.start.array, seg.initial_velocity.array, method=method)
    return TransportOp(seg.start, seg.end, mat)


def cutoff_transport(x: Point, y: Point, spec: BundleSpec) -> TransportOp:
    """``P(x, y)``: transport from y to x along the minimizing geodesic, else zero."""
    if x.manifold != spec.base or y.manifold != spec.base:
        raise DomainError("points are not on the bundle's base manifold")
    seg = minimizing_geodesic(y, x)
    if seg is None:
        return TransportOp.zero(y, x, spec.rank)
    return transport_along_segment(seg, spec)


def endo_inner(a, b) -> complex:
    """Normalized endomorphism inner product ``(1/r) Trace(A B*)``."""
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape != b.shape:
        raise DomainError("endo_inner needs two square matrices of the same size")
    return complex(np.trace(a @ dagger(b)) / a.shape[0])


def flat_map(v: FiberVector) -> FiberCovector:
    """The covector ``sqrt(r) <., v>``."""
    r = v.components.shape[0]
    return FiberCovector(v.fiber, math.sqrt(r) * np.conj(v.components))


def sharp_map(omega: FiberCovector) -> FiberVector:
    """Inverse of :func:`flat_map`."""
    r = omega.components.shape[0]
    return FiberVector(omega.fiber, np.conj(omega.components) / math.sqrt(r))


def holonomy(loop: Sequence[GeodesicSegment], spec: BundleSpec, tol: float = 1e-9, method: str = "auto") -> TransportOp:
    """Ordered product of the edge transports of a closed geodesic loop."""
    if not loop:
        raise DomainError("empty loop")
    for a, b in zip(loop, list(loop[1:]) + [loop[0]]):
        if not a.end.close_to(b.start, tol):
            raise DomainError("loop segments do not close up")
    op = transport_along_segment(loop[0], spec, method)
    for seg in loop[1:]:
        op = transport_along_segment(seg, spec, method) @ op
    return TransportOp(loop[0].start, loop[0].start, op.matrix)


def rotation_angle(op: TransportOp) -> float:
    """Signed angle of a rank-1 unitary transport."""
    if op.rank != 1:
        raise DomainError("rotation_angle needs a rank-1 transport")
    return float(np.angle(op.matrix[0, 0]))
