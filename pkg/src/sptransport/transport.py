"""Dyadic transport products along sampled paths and their depth-convergence study.

For nodes x_0, ..., x_n the depth-k product is

    P(x_n, x_{n-1}) ... P(x_1, x_0) v,

earliest step applied first. Any zero factor (a step at or beyond the cut
radius) makes the whole product zero and marks the path as rejected.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .bundles import BundleSpec, FiberCovector, FiberVector, TransportOp, dagger, sharp_map
from .manifolds import TWO_PI, DomainError, wrap_signed
from .paths import DyadicPath, PathEnsemble

ISOMETRY_TOL = 1e-8


# ---------------------------------------------------------------------------
# batched core
# ---------------------------------------------------------------------------


def step_operators(spec: BundleSpec, nodes):
    """Per-step transports ``P(x_{j+1}, x_j)``: (..., n, r, r) and acceptance flags (..., n)."""
    nodes = np.asarray(nodes, float)
    return spec.step_transport(nodes[..., :-1, :], nodes[..., 1:, :])


def ordered_product(mats):
    """``mats[..., n-1, :, :] @ ... @ mats[..., 0, :, :]`` (earliest factor rightmost)."""
    mats = np.asarray(mats)
    n, r = mats.shape[-3], mats.shape[-1]
    if r == 1:
        return np.prod(mats, axis=-3)
    out = np.broadcast_to(np.eye(r, dtype=complex), (*mats.shape[:-3], r, r)).copy()
    for j in range(n):
        out = mats[..., j, :, :] @ out
    return out


def endpoint_operators(spec: BundleSpec, nodes):
    """Full depth products x_0 -> x_n for a batch of node arrays; returns (ops, rejected)."""
    mats, ok = step_operators(spec, nodes)
    ops = ordered_product(mats)
    rejected = ~np.all(ok, axis=-1)
    ops[rejected] = 0.0
    return ops, rejected


def accumulated_angle(nodes):
    """Sum of signed short-arc increments of a circle path (the U(1) phase argument)."""
    th = np.asarray(nodes, float)[..., 0]
    return np.sum(wrap_signed(np.diff(th, axis=-1), TWO_PI), axis=-1)


# ---------------------------------------------------------------------------
# object API
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TransportResult:
    value: FiberVector
    rejected: bool
    depth: int
    operator: TransportOp


def _check_path(path: DyadicPath, spec: BundleSpec):
    if path.manifold != spec.base:
        raise DomainError("path is not on the bundle's base manifold")


def endpoint_operator(path: DyadicPath, spec: BundleSpec) -> TransportOp:
    """Operator form x_0 -> c(t) of the depth-k product; zero if any step is rejected."""
    _check_path(path, spec)
    ops, rejected = endpoint_operators(spec, path.nodes)
    return TransportOp(path.base_point, path.endpoint, ops, bool(rejected))


def transport_product(path: DyadicPath, v: FiberVector, spec: BundleSpec) -> TransportResult:
    if not v.fiber.close_to(path.base_point, 1e-12):
        raise DomainError("vector is not in the fiber over the path's base point")
    if v.components.shape != (spec.rank,):
        raise DomainError(f"vector needs {spec.rank} components")
    op = endpoint_operator(path, spec)
    return TransportResult(op.apply(v), op.is_zero, path.depth, op)


def inner(a, b) -> complex:
    """Fiber inner product, linear in the first slot."""
    return complex(np.sum(np.asarray(a) * np.conj(np.asarray(b))))


def pairing_functional(path: DyadicPath, omega: FiberCovector, eta_value: FiberVector, spec: BundleSpec) -> complex:
    """``<eta(c(t)), P_k v>`` with ``omega = v^flat``; zero on rejected paths.

    The modulus is at most (1/sqrt(r)) |omega| |eta(c(t))| with equality for
    eta(c(t)) parallel to the transported vector.
    """
    if not eta_value.fiber.close_to(path.endpoint, 1e-9):
        raise DomainError("eta value is not in the fiber over the path endpoint")
    v = sharp_map(omega)
    res = transport_product(path, v, spec)
    return inner(eta_value.components, res.value.components)


# ---------------------------------------------------------------------------
# convergence study
# ---------------------------------------------------------------------------


@dataclass
class ConvergenceRow:
    k: int
    mean_sq_diff: float
    stderr: float
    rejection_rate: float


@dataclass
class ConvergenceTable:
    rows: list
    n_paths: int
    seed: int
    metadata: dict = field(default_factory=dict)

    COLUMNS = ("k", "mean_sq_diff", "stderr", "rejection_rate", "n_paths", "seed")

    def column(self, name):
        return np.array([getattr(r, name) for r in self.rows])

    def to_csv(self, preamble: str = "") -> str:
        buf = io.StringIO()
        buf.write(preamble)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows:
            w.writerow([r.k, repr(r.mean_sq_diff), repr(r.stderr), repr(r.rejection_rate), self.n_paths, self.seed])
        return buf.getvalue()

    def nonincreasing(self, n_sigma: float = 4.0) -> bool:
        """Each step up is within ``n_sigma`` combined standard errors."""
        m, se = self.column("mean_sq_diff"), self.column("stderr")
        return bool(np.all(np.diff(m) <= n_sigma * np.hypot(se[1:], se[:-1])))


def transported_vectors(spec: BundleSpec, nodes, v):
    """``P_k v`` for each path (zero where rejected) and the rejection flags."""
    ops, rejected = endpoint_operators(spec, nodes)
    return ops @ np.asarray(v, complex), rejected


def convergence_study(ens: PathEnsemble, v, spec: BundleSpec, depths=None) -> ConvergenceTable:
    """Mean of |P_{k+1} v - P_k v|^2 over the ensemble for consecutive depths.

    Rejected paths enter as zero vectors, as in the cut-off definition.
    """
    if ens.manifold != spec.base:
        raise DomainError("ensemble and bundle live on different manifolds")
    depths = list(range(ens.depth + 1)) if depths is None else sorted(int(k) for k in depths)
    if len(depths) < 2 or depths[-1] > ens.depth or depths[0] < 0:
        raise DomainError(f"depths {depths} not covered by ensemble of depth {ens.depth}")
    if any(b != a + 1 for a, b in zip(depths, depths[1:])):
        raise DomainError("depths must be consecutive")
    v = np.asarray(v.components if isinstance(v, FiberVector) else v, complex)
    vecs, rej = {}, {}
    for k in depths:
        vecs[k], rej[k] = transported_vectors(spec, ens.at_depth(k), v)
    n = ens.n_paths
    rows = []
    for k in depths[:-1]:
        d2 = np.sum(np.abs(vecs[k + 1] - vecs[k]) ** 2, axis=-1)
        se = float(np.std(d2, ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
        rows.append(ConvergenceRow(k, float(np.mean(d2)), se, float(np.mean(rej[k]))))
    meta = dict(ens.metadata, final_rejection_rate=float(np.mean(rej[depths[-1]])))
    return ConvergenceTable(rows, n, ens.seed, meta)


def isometry_defect(spec: BundleSpec, nodes, v):
    """max | |P_k v| - |v| | over non-rejected paths, and the rejection rate."""
    vecs, rejected = transported_vectors(spec, nodes, v)
    norms = np.linalg.norm(vecs, axis=-1)
    good = ~rejected
    defect = float(np.max(np.abs(norms[good] - np.linalg.norm(v)))) if good.any() else float("nan")
    return defect, float(np.mean(rejected))


def unitarity_defects(ops):
    r = ops.shape[-1]
    return np.linalg.norm(dagger(ops) @ ops - np.eye(r), ord=2, axis=(-2, -1))
