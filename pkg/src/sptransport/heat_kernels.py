"""Scalar heat kernels of exp(-t H), H = -Laplacian (no probabilist's 1/2).

Flat increments therefore have variance ``2 dt`` per coordinate. Besides the
kernels this module holds the transition and bridge-midpoint samplers that
realize one Wiener increment on each model manifold.
"""
from __future__ import annotations

import math

import numpy as np

from .manifolds import (
    TWO_PI,
    Circle,
    DomainError,
    Euclidean,
    FlatTorus,
    ManifoldSpec,
    Point,
    Sphere2,
    wrap_abs,
    wrap_signed,
)

#: Image sums stop once the next term is below this fraction of the partial sum.
IMAGE_REL_TOL = 1e-16
#: Absolute tail bound for the spherical-harmonic series.
SPHERE_TAIL_TOL = 1e-14
#: Below t = SPHERE_SERIES_MIN_T * R^2 the sphere kernel uses the Gaussian parametrix.
SPHERE_SERIES_MIN_T = 1e-3
#: Dirichlet image terms below this magnitude are dropped.
DIRICHLET_TERM_TOL = 1e-18
#: Geodesic random-walk step guard on the sphere: dt <= SPHERE_STEP_GUARD * R^2.
SPHERE_STEP_GUARD = 1e-2

TRUNCATION = {
    "image_rel_tol": IMAGE_REL_TOL,
    "sphere_tail_tol": SPHERE_TAIL_TOL,
    "sphere_series_min_t": SPHERE_SERIES_MIN_T,
    "dirichlet_term_tol": DIRICHLET_TERM_TOL,
    "sphere_step_guard": SPHERE_STEP_GUARD,
}


def _check_t(t):
    if not np.all(np.asarray(t) > 0):
        raise DomainError("heat kernel time must be positive")


def gaussian_1d(t, d):
    return np.exp(-np.square(d) / (4.0 * t)) / math.sqrt(4.0 * math.pi * t)


def wrapped_gaussian(t, d, period):
    """Sum over images of the 1-d Gaussian kernel on a circle of given circumference."""
    d = wrap_abs(d, period)  # the kernel is even; |.| keeps it exactly symmetric
    total = gaussian_1d(t, d)
    w = 1
    while True:
        term = gaussian_1d(t, d + w * period) + gaussian_1d(t, d - w * period)
        total = total + term
        if np.all(term <= IMAGE_REL_TOL * total):
            return total
        w += 1


def sphere_kernel(t, d, radius):
    """Heat kernel on the round sphere at geodesic distance ``d``."""
    tau = t / radius**2
    d = np.asarray(d, float)
    if tau < SPHERE_SERIES_MIN_T:
        theta = np.clip(d / radius, 0.0, math.pi)
        with np.errstate(invalid="ignore", divide="ignore"):
            vv = np.where(theta > 1e-8, np.sqrt(theta / np.sin(theta)), 1.0)
        return np.exp(-d**2 / (4 * t)) / (4 * math.pi * t) * vv * (1.0 + tau / 3.0)
    x = np.cos(d / radius)
    p_prev = np.ones_like(x)
    p_cur = x.copy()
    total = p_prev.copy()  # l = 0 term, weight 1
    l = 1
    while True:
        weight = (2 * l + 1) * math.exp(-l * (l + 1) * tau)
        total = total + weight * p_cur
        # remaining terms are bounded by a geometric tail of the weights
        nxt = (2 * l + 3) * math.exp(-(l + 1) * (l + 2) * tau)
        ratio = math.exp(-2 * (l + 2) * tau)
        if nxt / (1 - ratio) / (4 * math.pi) < SPHERE_TAIL_TOL:
            break
        p_prev, p_cur = p_cur, ((2 * l + 1) * x * p_cur - l * p_prev) / (l + 1)
        l += 1
    # cancellation can leave a few ulps of negative noise far from the diagonal
    return np.maximum(total, 0.0) / (4 * math.pi * radius**2)


def kernel(manifold: ManifoldSpec, t, x, y):
    """Vectorized heat kernel on coordinate arrays (density w.r.t. volume)."""
    _check_t(t)
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if isinstance(manifold, Euclidean):
        n = manifold.dim
        r2 = np.sum((y - x) ** 2, axis=-1)
        return np.exp(-r2 / (4 * t)) / (4 * math.pi * t) ** (n / 2)
    if isinstance(manifold, Circle):
        R = manifold.radius
        return wrapped_gaussian(t, R * (y[..., 0] - x[..., 0]), TWO_PI * R)
    if isinstance(manifold, FlatTorus):
        k1 = wrapped_gaussian(t, y[..., 0] - x[..., 0], manifold.period1)
        k2 = wrapped_gaussian(t, y[..., 1] - x[..., 1], manifold.period2)
        return k1 * k2
    if isinstance(manifold, Sphere2):
        return sphere_kernel(t, manifold.dist(x, y), manifold.radius)
    raise DomainError(f"no heat kernel for {manifold!r}")


def _coords(spec, p):
    if isinstance(p, Point):
        if p.manifold != spec:
            raise DomainError("point is on a different manifold")
        return p.array
    return np.asarray(p, float)


def heat_kernel(spec: ManifoldSpec, t: float, x, y) -> float:
    """h(t, x, y) for Points (or coordinate arrays)."""
    return kernel(spec, t, _coords(spec, x), _coords(spec, y))


# ---------------------------------------------------------------------------
# Dirichlet kernels on intervals
# ---------------------------------------------------------------------------


def _dirichlet_terms(t, x, y, a, b, drop_free):
    """Signed image sum; ``drop_free`` omits the unshifted direct term."""
    L = b - a
    total = 0.0
    n = 0
    while True:
        biggest = 0.0
        for s in ([0] if n == 0 else [n, -n]):
            direct = gaussian_1d(t, x - y + 2 * s * L)
            reflected = gaussian_1d(t, x + y - 2 * a + 2 * s * L)
            if not (drop_free and s == 0):
                total = total + direct
            total = total - reflected
            biggest = max(biggest, float(np.max(direct)), float(np.max(reflected)))
        if n > 0 and biggest < DIRICHLET_TERM_TOL:
            return total
        n += 1


def _check_interval(t, x, y, a, b):
    _check_t(t)
    if not b > a:
        raise DomainError("interval needs a < b")
    for p in (x, y):
        p = np.asarray(p)
        if np.any(p <= a) or np.any(p >= b):
            raise DomainError("points must lie inside the open interval")


def dirichlet_kernel_interval(t, x, y, a, b):
    """Dirichlet heat kernel on (a, b) by the method of images."""
    _check_interval(t, x, y, a, b)
    return _dirichlet_terms(t, np.asarray(x, float), np.asarray(y, float), a, b, drop_free=False)


def dirichlet_deficit(t, x, y, a, b):
    """Free kernel minus Dirichlet kernel, summed without cancellation.

    Far from the boundary the two kernels agree to below double precision, so
    the deficit is what carries the (positive, shrinking) difference.
    """
    _check_interval(t, x, y, a, b)
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    return -_dirichlet_terms(t, x, y, a, b, drop_free=True)


# ---------------------------------------------------------------------------
# samplers
# ---------------------------------------------------------------------------


def transition_substeps(manifold: ManifoldSpec, dt: float) -> int:
    """Internal sub-steps per increment: 1 for exact samplers, guard-driven on the sphere."""
    if isinstance(manifold, Sphere2):
        return max(1, int(math.ceil(dt / (SPHERE_STEP_GUARD * manifold.radius**2) - 1e-12)))
    return 1


def transition_noise_shape(manifold: ManifoldSpec, dt: float):
    return (transition_substeps(manifold, dt), manifold.coord_dim)


def apply_transition(manifold: ManifoldSpec, x, dt: float, z):
    """Advance ``x`` by one increment of length ``dt`` using normals ``z`` (..., m, coord_dim)."""
    if not dt > 0:
        raise DomainError("transition time step must be positive")
    x = np.asarray(x, float)
    z = np.asarray(z, float)
    m = z.shape[-2]
    if isinstance(manifold, Sphere2):
        h = dt / m
        for i in range(m):
            v = math.sqrt(2 * h) * manifold.gaussian_tangent(x, z[..., i, :])
            x = manifold.exp(x, v)
        return x
    # exact Gaussian increment (sub-steps of a Gaussian are again Gaussian)
    v = math.sqrt(2 * dt / m) * np.sum(manifold.gaussian_tangent(x, z), axis=-2)
    return manifold.exp(x, v)


def sample_transition(rng: np.random.Generator, spec: ManifoldSpec, x, dt: float):
    """One Wiener increment of duration ``dt`` started at ``x``."""
    if not dt > 0:
        raise DomainError("transition time step must be positive")
    xa = _coords(spec, x)
    z = rng.standard_normal(transition_noise_shape(spec, dt))
    y = apply_transition(spec, xa, dt, z)
    return Point(spec, tuple(y)) if isinstance(x, Point) else y


def _lift_choice(d, period, dt_total, u):
    """Pick a lift ``d + period*w`` of a wrapped displacement with weight exp(-(.)^2 / 4 dt)."""
    W = 1 + int(math.ceil(math.sqrt(4 * dt_total * 40.0) / period))
    w = np.arange(-W, W + 1)
    lifts = d[..., None] + period * w
    logw = -np.square(lifts) / (4 * dt_total)
    logw -= logw.max(axis=-1, keepdims=True)
    p = np.exp(logw)
    cdf = np.cumsum(p, axis=-1)
    cdf /= cdf[..., -1:]
    idx = np.sum(cdf < u[..., None], axis=-1)
    idx = np.minimum(idx, len(w) - 1)
    return np.take_along_axis(lifts, idx[..., None], axis=-1)[..., 0]


def bridge_midpoint(manifold: ManifoldSpec, x, y, dt_total: float, z, u, biased_ok: bool = False):
    """Time-midpoint of the bridge from x to y over ``dt_total``.

    ``z`` are standard normals (..., coord_dim) and ``u`` uniforms (..., coord_dim)
    used to pick the winding class on circles and tori. Exact for the flat
    models; on the sphere a tangent-plane Gaussian at the geodesic midpoint,
    available only with ``biased_ok``.
    """
    if not dt_total > 0:
        raise DomainError("bridge duration must be positive")
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    z = np.asarray(z, float)
    u = np.asarray(u, float)
    sd = math.sqrt(dt_total / 2.0)
    if isinstance(manifold, Euclidean):
        return 0.5 * (x + y) + sd * z
    if isinstance(manifold, Circle):
        R = manifold.radius
        d = R * wrap_signed(y[..., 0] - x[..., 0], TWO_PI)
        lift = _lift_choice(d, TWO_PI * R, dt_total, u[..., 0])
        mid = x[..., 0] + (0.5 * lift + sd * z[..., 0]) / R
        return manifold.canonical(mid[..., None])
    if isinstance(manifold, FlatTorus):
        out = []
        for i, period in enumerate((manifold.period1, manifold.period2)):
            d = wrap_signed(y[..., i] - x[..., i], period)
            lift = _lift_choice(d, period, dt_total, u[..., i])
            out.append(x[..., i] + 0.5 * lift + sd * z[..., i])
        return manifold.canonical(np.stack(out, axis=-1))
    if isinstance(manifold, Sphere2):
        if not biased_ok:
            raise DomainError("sphere bridges are approximate; pass biased_ok=True to use them")
        if np.any(manifold.dist(x, y) >= manifold.cut_radius()):
            raise DomainError("sphere bridge endpoints beyond the cut radius")
        m0 = manifold.exp(x, 0.5 * manifold.log(x, y))
        return manifold.exp(m0, sd * manifold.gaussian_tangent(m0, z))
    raise DomainError(f"no bridge sampler for {manifold!r}")


def sample_bridge_midpoint(rng: np.random.Generator, spec: ManifoldSpec, x, y, dt_total: float, biased_ok=False):
    """Sample the midpoint of the bridge x -> y; density prop. to h(dt/2, x, m) h(dt/2, m, y)."""
    xa, ya = _coords(spec, x), _coords(spec, y)
    z = rng.standard_normal(spec.coord_dim)
    u = rng.random(spec.coord_dim)
    m = bridge_midpoint(spec, xa, ya, dt_total, z, u, biased_ok)
    return Point(spec, tuple(m)) if isinstance(x, Point) else m
