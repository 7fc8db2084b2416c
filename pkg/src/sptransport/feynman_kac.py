"""Feynman-Kac estimators with Trotter-weighted reverse transport.

With nodes x_0 = x, ..., x_n = c(t) and dt = t / n the per-path weight is

    K_k(c) = prod_{j=1..n} P(x_{j-1}, x_j) exp(-dt V(x_j)),

the j = 1 factor leftmost, so the factor nearest x_0 acts last. Its mean
against eta(c(t)) estimates (exp(-t(H + V)) eta)(x).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import __version__
from .bundles import BundleSpec, CircleU1, FiberVector, TransportOp, dagger
from .heat_kernels import kernel
from .manifolds import Circle, DomainError, ManifoldSpec, Point
from .paths import DyadicPath, sample_bridge_ensemble, sample_ensemble
from .transport import endpoint_operators, ordered_product, step_operators

SCHEMA_VERSION = 1
HERMITIAN_TOL = 1e-12
#: Relative floor on kernel standard errors. When every bridge sample agrees
#: (one winding class dominates) the sample spread is pure rounding noise.
ROUNDING_FLOOR = 1e-12


class EstimationError(RuntimeError):
    """Raised when an ensemble carries no usable paths (e.g. all rejected)."""


# ---------------------------------------------------------------------------
# potentials
# ---------------------------------------------------------------------------

_SX = np.array([[0, 1], [1, 0]], dtype=complex)
_SZ = np.array([[1, 0], [0, -1]], dtype=complex)


@dataclass(frozen=True)
class Potential:
    """A potential bounded below by ``beta``.

    ``func`` maps coordinate arrays (..., coord_dim) to real values (...) for
    scalar potentials or Hermitian matrices (..., r, r) for endomorphism ones.
    """

    name: str
    func: Callable
    beta: float
    kind: str = "scalar"
    rank: int = 1

    def values(self, coords):
        v = self.func(np.asarray(coords, float))
        if self.kind == "scalar":
            return np.asarray(v, float)
        v = np.asarray(v, complex)
        if np.max(np.abs(v - dagger(v)), initial=0.0) > HERMITIAN_TOL:
            raise DomainError(f"potential {self.name!r} is not Hermitian")
        return v

    def matrices(self, coords, rank: int):
        """Values as (..., rank, rank) Hermitian matrices."""
        v = self.values(coords)
        if self.kind == "scalar":
            return v[..., None, None] * np.eye(rank)
        if v.shape[-1] != rank:
            raise DomainError(f"potential {self.name!r} has rank {v.shape[-1]}, bundle has {rank}")
        return v

    def __call__(self, p: Point):
        return self.values(p.array)

    def check_lower_bound(self, coords, tol=1e-9) -> bool:
        v = self.values(coords)
        low = v if self.kind == "scalar" else np.linalg.eigvalsh(v)
        return bool(np.all(low >= self.beta - tol))


def _first_coord(x):
    return x[..., 0]


def potential_from_spec(spec) -> Potential:
    """Catalog: ``zero``, ``const:<c>``, ``cos`` (cos of the first coordinate),
    ``sphere_z`` (height on the sphere), ``matrix_cos`` (cos(th) sz + sx/2, rank 2)."""
    if isinstance(spec, Potential):
        return spec
    if isinstance(spec, dict):
        name = str(spec.get("kind", "zero"))
        if name == "const":
            name = f"const:{spec.get('value', 0.0)}"
    else:
        name = str(spec or "zero")
    if name == "zero":
        return Potential("zero", lambda x: np.zeros(x.shape[:-1]), 0.0)
    if name.startswith("const:"):
        c = float(name.split(":", 1)[1])
        return Potential(f"const:{c!r}", lambda x: np.full(x.shape[:-1], c), c)
    if name == "cos":
        return Potential("cos", lambda x: np.cos(_first_coord(x)), -1.0)
    if name == "sphere_z":
        return Potential("sphere_z", lambda x: x[..., 2] / np.linalg.norm(x, axis=-1), -1.0)
    if name == "matrix_cos":
        def f(x):
            c = np.cos(_first_coord(x))
            return c[..., None, None] * _SZ + 0.5 * _SX

        return Potential("matrix_cos", f, -math.sqrt(1.25), kind="endomorphism", rank=2)
    raise DomainError(f"unknown potential {name!r}")


def expm_hermitian(h):
    """exp(h) for Hermitian (..., r, r) via eigendecomposition."""
    h = np.asarray(h, complex)
    if h.shape[-1] == 1:
        return np.exp(h.real).astype(complex)
    w, u = np.linalg.eigh(h)
    return (u * np.exp(w)[..., None, :]) @ dagger(u)


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------


def trotter_weights(spec: BundleSpec, pot: Potential, nodes, t: float):
    """Batched K_k(c): (..., r, r) maps E_{c(t)} -> E_x, plus rejection flags."""
    nodes = np.asarray(nodes, float)
    n = nodes.shape[-2] - 1
    dt = t / n
    fwd, ok = step_operators(spec, nodes)
    back = dagger(fwd)  # P(x_{j-1}, x_j), zero where rejected
    r = spec.rank
    if pot.kind == "scalar" and pot.name == "zero":
        factors = back
    else:
        damp = expm_hermitian(-dt * pot.matrices(nodes[..., 1:, :], r))
        factors = back @ damp
    # ordered_product puts index 0 rightmost; here j = 1 must be leftmost
    K = ordered_product(factors[..., ::-1, :, :])
    rejected = ~np.all(ok, axis=-1)
    K[rejected] = 0.0
    return K, rejected


def scalar_weights(spec: BundleSpec, V, nodes, t: float):
    """exp(-dt sum_{j>=1} V(x_j)) times the reverse endpoint transport."""
    pot = potential_from_spec(V) if not isinstance(V, Potential) else V
    if pot.kind != "scalar":
        raise DomainError("scalar_weights needs a scalar potential")
    nodes = np.asarray(nodes, float)
    dt = t / (nodes.shape[-2] - 1)
    ops, rejected = endpoint_operators(spec, nodes)
    damp = np.exp(-dt * np.sum(pot.values(nodes[..., 1:, :]), axis=-1))
    return damp[..., None, None] * dagger(ops), rejected


def trotter_weight(path: DyadicPath, pot: Potential, spec: BundleSpec) -> TransportOp:
    """K_k(c) as a map from the fiber over c(t) to the fiber over x_0."""
    if path.manifold != spec.base:
        raise DomainError("path is not on the bundle's base manifold")
    K, rejected = trotter_weights(spec, potential_from_spec(pot), path.nodes, path.horizon)
    return TransportOp(path.endpoint, path.base_point, K, bool(rejected))


# ---------------------------------------------------------------------------
# estimates
# ---------------------------------------------------------------------------


@dataclass
class FkEstimate:
    value: np.ndarray
    stderr: np.ndarray
    stderr_re: np.ndarray
    stderr_im: np.ndarray
    n_paths: int
    depth: int
    rejection_rate: float
    metadata: dict = field(default_factory=dict)

    def fiber_vector(self, x: Point) -> FiberVector:
        return FiberVector(x, self.value)

    def sigma_distance(self, oracle) -> float:
        """max over components of |value - oracle| / stderr."""
        diff = np.abs(self.value - np.asarray(oracle, complex))
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(self.stderr > 0, diff / self.stderr, np.where(diff > 0, np.inf, 0.0))
        return float(np.max(z))

    def to_json(self, oracle=None) -> dict:
        out = {
            "schema_version": SCHEMA_VERSION,
            "version": __version__,
            "estimate": {"re": self.value.real.tolist(), "im": self.value.imag.tolist()},
            "stderr": self.stderr.tolist(),
            "stderr_re": self.stderr_re.tolist(),
            "stderr_im": self.stderr_im.tolist(),
            "n_paths": self.n_paths,
            "depth": self.depth,
            "rejection_rate": self.rejection_rate,
            "inputs": self.metadata,
        }
        if oracle is not None:
            o = np.asarray(oracle, complex)
            out["oracle"] = {"re": o.real.tolist(), "im": o.imag.tolist()}
            out["sigma_distance"] = self.sigma_distance(o)
        return out


def summarize(samples, rejected, depth, metadata=None) -> FkEstimate:
    """Mean and component-wise standard errors of per-path samples (N, ...)."""
    samples = np.asarray(samples, complex)
    n = samples.shape[0]
    if n < 2:
        raise EstimationError("need at least two paths")
    if np.all(rejected):
        raise EstimationError("every path was rejected; no estimate possible")
    mean = samples.mean(axis=0)
    se_re = samples.real.std(axis=0, ddof=1) / math.sqrt(n)
    se_im = samples.imag.std(axis=0, ddof=1) / math.sqrt(n)
    return FkEstimate(mean, np.hypot(se_re, se_im), se_re, se_im, n, depth, float(np.mean(rejected)), metadata or {})


def _eta_values(eta, coords, rank):
    vals = np.asarray(eta(coords), complex)
    if vals.shape == coords.shape[:-1]:
        vals = vals[..., None]
    if vals.shape[-1] != rank:
        raise DomainError(f"eta must return {rank} components")
    if not np.all(np.isfinite(vals)):
        raise DomainError("eta is not finite on the sampled endpoints")
    return vals


def _point_coords(spec: ManifoldSpec, x):
    return spec.canonical(np.asarray(x.array if isinstance(x, Point) else x, float))


def _inputs(spec, pot, x, t, k, n_paths, seed, **extra):
    return {
        "manifold": spec.base.to_dict(),
        "bundle": spec.to_dict(),
        "potential": pot.name,
        "t": float(t),
        "x": [float(a) for a in x],
        "k": int(k),
        "n_paths": int(n_paths),
        "seed": int(seed),
        **extra,
    }


def fk_estimate(x, t, eta, pot, spec: BundleSpec, k=8, n_paths=10000, seed=0, experiment="feynman-kac", ensemble=None) -> FkEstimate:
    """Monte-Carlo (exp(-t(H + V)) eta)(x); ``eta`` maps coords (N, d) -> (N, r)."""
    pot = potential_from_spec(pot)
    x = _point_coords(spec.base, x)
    ens = ensemble or sample_ensemble(spec.base, x, t, k, n_paths, seed, experiment)
    nodes = ens.at_depth(k)
    K, rejected = trotter_weights(spec, pot, nodes, t)
    vals = _eta_values(eta, nodes[:, -1, :], spec.rank)
    samples = np.einsum("nij,nj->ni", K, vals)
    meta = _inputs(spec, pot, x, t, k, ens.n_paths, ens.seed, sampling=ens.metadata)
    return summarize(samples, rejected, k, meta)


def scalar_fk_estimate(x, t, eta, V, spec: BundleSpec, k=8, n_paths=10000, seed=0, experiment="feynman-kac", ensemble=None) -> FkEstimate:
    """Same target as :func:`fk_estimate` with the weight exp(-Riemann sum of V)."""
    pot = potential_from_spec(V)
    x = _point_coords(spec.base, x)
    ens = ensemble or sample_ensemble(spec.base, x, t, k, n_paths, seed, experiment)
    nodes = ens.at_depth(k)
    K, rejected = scalar_weights(spec, pot, nodes, t)
    vals = _eta_values(eta, nodes[:, -1, :], spec.rank)
    samples = np.einsum("nij,nj->ni", K, vals)
    meta = _inputs(spec, pot, x, t, k, ens.n_paths, ens.seed, sampling=ens.metadata)
    return summarize(samples, rejected, k, meta)


@dataclass
class KernelEstimate:
    matrix: np.ndarray
    stderr: np.ndarray
    stderr_re: np.ndarray
    stderr_im: np.ndarray
    scalar_kernel: float
    n_paths: int
    rejection_rate: float

    @property
    def op_norm(self) -> float:
        return float(np.linalg.norm(self.matrix, 2))

    @property
    def op_norm_stderr(self) -> float:
        # crude but conservative: the Frobenius norm of the entrywise errors
        return max(float(np.linalg.norm(self.stderr)), ROUNDING_FLOOR * self.scalar_kernel)

    def entry_stderr(self, i=0, j=0) -> float:
        return max(float(self.stderr[i, j]), ROUNDING_FLOOR * self.scalar_kernel)


def heat_kernel_estimate(t, x, y, spec: BundleSpec, k=6, n_paths=10000, seed=0, experiment="heat-kernel", biased_ok=False) -> KernelEstimate:
    """h(t, x, y) times the bridge mean of the reverse endpoint transport."""
    m = spec.base
    x = _point_coords(m, x)
    y = _point_coords(m, y)
    ens = sample_bridge_ensemble(m, x, y, t, k, n_paths, seed, experiment, biased_ok)
    ops, rejected = endpoint_operators(spec, ens.nodes)
    h = float(kernel(m, t, x, y))
    est = summarize(h * dagger(ops), rejected, k)
    return KernelEstimate(est.value, est.stderr, est.stderr_re, est.stderr_im, h, est.n_paths, est.rejection_rate)


@dataclass
class DiamagneticReport:
    rows: list
    max_violation_sigma: float
    schema_version: int = SCHEMA_VERSION

    def to_json(self):
        return {"schema_version": self.schema_version, "max_violation_sigma": self.max_violation_sigma, "rows": self.rows}


def diamagnetic_check(t, pairs, spec: BundleSpec, k=6, n_paths=10000, seed=0, experiment="diamagnetic") -> DiamagneticReport:
    """Compare |h_nabla(t, x, y)|_op with h(t, x, y) over a list of point pairs.

    A violation is measured in units of the estimate's standard error: the
    reported number is max (|est|_op - h) / stderr, so a value <= 3 passes a
    3-sigma check.
    """
    rows = []
    worst = -np.inf
    for i, (x, y) in enumerate(pairs):
        est = heat_kernel_estimate(t, x, y, spec, k, n_paths, seed, f"{experiment}/{i}")
        se = est.op_norm_stderr
        excess = est.op_norm - est.scalar_kernel
        sig = excess / se if se > 0 else (0.0 if excess <= 0 else np.inf)
        worst = max(worst, sig)
        rows.append(
            {
                "x": [float(a) for a in np.atleast_1d(x)],
                "y": [float(a) for a in np.atleast_1d(y)],
                "op_norm": est.op_norm,
                "scalar_kernel": est.scalar_kernel,
                "ratio": est.op_norm / est.scalar_kernel,
                "stderr": se,
                "violation_sigma": sig,
            }
        )
    return DiamagneticReport(rows, float(worst))


def circle_u1_bundle(alpha: float, radius: float = 1.0) -> BundleSpec:
    return BundleSpec(Circle(radius), CircleU1(alpha))
