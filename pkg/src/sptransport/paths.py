"""Dyadic Brownian paths and refinement-consistent ensembles.

A path at depth k records the positions at times j*t/2^k, j = 0..2^k. An
ensemble is always generated at its finest depth; coarser depths are read off
as sub-samples of the same nodes, so depth-k and depth-(k+1) quantities are
evaluated on a common underlying path.
"""
from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import streams
from .heat_kernels import (
    SPHERE_STEP_GUARD,
    apply_transition,
    bridge_midpoint,
    transition_noise_shape,
    transition_substeps,
)
from .manifolds import DomainError, ManifoldSpec, Point, Sphere2, manifold_from_dict

BINARY_MAGIC = b"DYAD"
BINARY_VERSION = 1
# magic, version, coord_dim, depth, reserved, n_paths, horizon, seed, metadata length
_HEADER = struct.Struct("<4sHHHHQdQI")


def _check_depth(t, k):
    if not t > 0:
        raise DomainError("path horizon must be positive")
    if int(k) != k or k < 0:
        raise DomainError("depth must be a nonnegative integer")


def scheme_name(manifold: ManifoldSpec) -> str:
    return "geodesic_random_walk" if isinstance(manifold, Sphere2) else "exact_gaussian"


# ---------------------------------------------------------------------------
# array-level samplers
# ---------------------------------------------------------------------------


def transition_noise(rng, manifold: ManifoldSpec, t: float, k: int) -> np.ndarray:
    """Standard normals (2^k, substeps, coord_dim) driving one depth-k path."""
    return rng.standard_normal((2**k, *transition_noise_shape(manifold, t / 2**k)))


def propagate(manifold: ManifoldSpec, x0, t: float, z) -> np.ndarray:
    """Nodes (..., n + 1, coord_dim) from noise ``z`` (..., n, substeps, coord_dim)."""
    z = np.asarray(z, float)
    n = z.shape[-3]
    dt = t / n
    nodes = np.empty((*z.shape[:-3], n + 1, manifold.coord_dim))
    nodes[..., 0, :] = manifold.canonical(np.asarray(x0, float))
    for j in range(n):
        nodes[..., j + 1, :] = apply_transition(manifold, nodes[..., j, :], dt, z[..., j, :, :])
    return nodes


def sample_nodes(rng, manifold: ManifoldSpec, x0, t: float, k: int) -> np.ndarray:
    """Node array (2^k + 1, coord_dim) of one path, by sequential transitions."""
    _check_depth(t, k)
    return propagate(manifold, x0, t, transition_noise(rng, manifold, t, k))


def _midpoints(manifold, nodes, t, z, u, biased_ok):
    n = nodes.shape[-2] - 1
    mids = bridge_midpoint(manifold, nodes[..., :-1, :], nodes[..., 1:, :], t / n, z, u, biased_ok)
    out = np.empty((*nodes.shape[:-2], 2 * n + 1, nodes.shape[-1]))
    out[..., 0::2, :] = nodes
    out[..., 1::2, :] = mids
    return out


def refine_nodes(rng, manifold: ManifoldSpec, nodes, t: float, biased_ok=False) -> np.ndarray:
    """Insert bridge midpoints between consecutive nodes; old nodes kept bit-exact."""
    nodes = np.asarray(nodes, float)
    n = nodes.shape[-2] - 1
    cd = manifold.coord_dim
    z = rng.standard_normal((n, cd))
    u = rng.random((n, cd))
    return _midpoints(manifold, nodes, t, z, u, biased_ok)


def bridge_noise(rng, manifold: ManifoldSpec, k: int) -> np.ndarray:
    """Level-ordered (2^k - 1, 2*coord_dim) array of [normals | uniforms] for a depth-k bridge."""
    cd = manifold.coord_dim
    rows = []
    for level in range(k):
        n = 2**level
        rows.append(np.concatenate([rng.standard_normal((n, cd)), rng.random((n, cd))], axis=-1))
    return np.concatenate(rows) if rows else np.empty((0, 2 * cd))


def fill_bridge(manifold: ManifoldSpec, x0, y, t: float, noise, biased_ok=False) -> np.ndarray:
    """Bridge nodes from level-ordered ``noise`` (..., 2^k - 1, 2*coord_dim)."""
    noise = np.asarray(noise, float)
    cd = manifold.coord_dim
    batch = noise.shape[:-2]
    nodes = np.empty((*batch, 2, cd))
    nodes[..., 0, :] = manifold.canonical(np.asarray(x0, float))
    nodes[..., 1, :] = manifold.canonical(np.asarray(y, float))
    start = 0
    while start < noise.shape[-2]:
        n = nodes.shape[-2] - 1
        block = noise[..., start : start + n, :]
        nodes = _midpoints(manifold, nodes, t, block[..., :cd], block[..., cd:], biased_ok)
        start += n
    return nodes


def bridge_nodes(rng, manifold: ManifoldSpec, x0, y, t: float, k: int, biased_ok=False) -> np.ndarray:
    """Node array of a bridge from x0 to y, filled in by recursive midpoint bridging."""
    _check_depth(t, k)
    return fill_bridge(manifold, x0, y, t, bridge_noise(rng, manifold, k), biased_ok)


def max_step_nodes(manifold: ManifoldSpec, nodes) -> np.ndarray:
    nodes = np.asarray(nodes, float)
    if nodes.shape[-2] < 2:
        return np.zeros(nodes.shape[:-2])
    return np.max(manifold.dist(nodes[..., :-1, :], nodes[..., 1:, :]), axis=-1)


# ---------------------------------------------------------------------------
# single paths
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DyadicPath:
    base_point: Point
    horizon: float
    depth: int
    nodes: np.ndarray

    def __post_init__(self):
        m = self.base_point.manifold
        nodes = np.array(self.nodes, dtype=float)
        if nodes.shape != (2**self.depth + 1, m.coord_dim):
            raise DomainError(f"depth {self.depth} path needs {2**self.depth + 1} nodes")
        if not np.array_equal(nodes[0], self.base_point.array):
            raise DomainError("first node must be the base point")
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)

    @property
    def manifold(self) -> ManifoldSpec:
        return self.base_point.manifold

    @property
    def times(self) -> np.ndarray:
        return np.arange(2**self.depth + 1) * (self.horizon / 2**self.depth)

    def node(self, j: int) -> Point:
        return Point(self.manifold, tuple(self.nodes[j]))

    @property
    def points(self):
        return [self.node(j) for j in range(len(self.nodes))]

    @property
    def endpoint(self) -> Point:
        return self.node(-1)

    def at_depth(self, k: int) -> "DyadicPath":
        if not 0 <= k <= self.depth:
            raise DomainError("can only coarsen to a depth between 0 and the path depth")
        return DyadicPath(self.base_point, self.horizon, k, self.nodes[:: 2 ** (self.depth - k)])


def sample_path(rng, x0: Point, t: float, k: int) -> DyadicPath:
    """Brownian path from ``x0`` recorded at the dyadic times of depth ``k``."""
    m = x0.manifold
    return DyadicPath(x0, t, k, sample_nodes(rng, m, x0.array, t, k))


def refine(path: DyadicPath, rng, biased_ok=False) -> DyadicPath:
    """Depth k+1 path through the same nodes, new midpoints drawn from bridges."""
    nodes = refine_nodes(rng, path.manifold, path.nodes, path.horizon, biased_ok)
    return DyadicPath(path.base_point, path.horizon, path.depth + 1, nodes)


def sample_bridge_path(rng, x0: Point, y: Point, t: float, k: int, biased_ok=False) -> DyadicPath:
    """Brownian bridge from ``x0`` to ``y`` over ``[0, t]`` at depth ``k``."""
    if x0.manifold != y.manifold:
        raise DomainError("bridge endpoints on different manifolds")
    return DyadicPath(x0, t, k, bridge_nodes(rng, x0.manifold, x0.array, y.array, t, k, biased_ok))


def max_step(path: DyadicPath) -> float:
    return float(max_step_nodes(path.manifold, path.nodes))


# ---------------------------------------------------------------------------
# ensembles
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class PathEnsemble:
    """``nodes[i, j]`` is path ``i`` at time ``j * horizon / 2**depth``."""

    manifold: ManifoldSpec
    base_point: np.ndarray
    horizon: float
    depth: int
    nodes: np.ndarray
    seed: int = 0
    experiment: str = "paths"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, float)
        self.base_point = np.asarray(self.base_point, float)
        if self.nodes.ndim != 3 or self.nodes.shape[1:] != (2**self.depth + 1, self.manifold.coord_dim):
            raise DomainError("ensemble node array has the wrong shape for its depth")

    @property
    def n_paths(self) -> int:
        return self.nodes.shape[0]

    def at_depth(self, k: int) -> np.ndarray:
        """Node array of every path at depth ``k`` (a view, no copy)."""
        if not 0 <= k <= self.depth:
            raise DomainError(f"depth {k} not available (ensemble depth {self.depth})")
        return self.nodes[:, :: 2 ** (self.depth - k)]

    def path(self, i: int, k=None) -> DyadicPath:
        k = self.depth if k is None else k
        return DyadicPath(Point(self.manifold, tuple(self.base_point)), self.horizon, k, self.at_depth(k)[i])

    @property
    def paths(self):
        return [self.path(i) for i in range(self.n_paths)]

    def max_steps(self, k=None) -> np.ndarray:
        return max_step_nodes(self.manifold, self.at_depth(self.depth if k is None else k))

    def header(self) -> dict:
        return {
            "manifold": self.manifold.to_dict(),
            "base_point": [float(a) for a in self.base_point],
            "horizon": float(self.horizon),
            "depth": int(self.depth),
            "n_paths": int(self.n_paths),
            "seed": int(self.seed),
            "experiment": self.experiment,
            "metadata": self.metadata,
        }

    # -- export -------------------------------------------------------------
    def to_csv(self, k=None) -> str:
        """Long-format CSV: path_id, j, time, c0, c1, ..."""
        k = self.depth if k is None else k
        nodes = self.at_depth(k)
        cd = self.manifold.coord_dim
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["path_id", "j", "time"] + [f"c{i}" for i in range(cd)])
        dt = self.horizon / 2**k
        for i in range(nodes.shape[0]):
            for j in range(nodes.shape[1]):
                w.writerow([i, j, repr(j * dt)] + [repr(float(c)) for c in nodes[i, j]])
        return buf.getvalue()

    def to_bytes(self) -> bytes:
        meta = json.dumps(self.header(), sort_keys=True).encode("utf-8")
        head = _HEADER.pack(
            BINARY_MAGIC,
            BINARY_VERSION,
            self.manifold.coord_dim,
            self.depth,
            0,
            self.n_paths,
            float(self.horizon),
            int(self.seed) & 0xFFFFFFFFFFFFFFFF,
            len(meta),
        )
        return head + meta + self.nodes.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "PathEnsemble":
        if len(data) < _HEADER.size or data[:4] != BINARY_MAGIC:
            raise DomainError("not a DYAD ensemble file")
        magic, version, cd, depth, _, n_paths, horizon, seed, mlen = _HEADER.unpack_from(data)
        if version != BINARY_VERSION:
            raise DomainError(f"unsupported DYAD version {version}")
        off = _HEADER.size
        meta = json.loads(data[off : off + mlen].decode("utf-8"))
        off += mlen
        count = n_paths * (2**depth + 1) * cd
        nodes = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(n_paths, 2**depth + 1, cd)
        return cls(
            manifold_from_dict(meta["manifold"]),
            np.array(meta["base_point"]),
            horizon,
            depth,
            nodes.astype(float),
            seed=meta["seed"],
            experiment=meta.get("experiment", "paths"),
            metadata=meta.get("metadata", {}),
        )


def _sampling_metadata(manifold, t, k):
    dt = t / 2**k
    m = transition_substeps(manifold, dt)
    meta = {"scheme": scheme_name(manifold), "substeps": m, "guard_triggered": m > 1}
    if isinstance(manifold, Sphere2):
        meta["step_guard"] = SPHERE_STEP_GUARD * manifold.radius**2
    return meta


def sample_ensemble(manifold: ManifoldSpec, x0, t: float, k: int, n_paths: int, seed: int, experiment="paths") -> PathEnsemble:
    """``n_paths`` paths at depth ``k``; path ``i`` uses stream ``i`` of (seed, experiment).

    Path ``i`` is bit-identical to ``sample_path(streams.stream(seed, experiment, i), x0, t, k)``.
    """
    _check_depth(t, k)
    if n_paths < 1:
        raise DomainError("need at least one path")
    x0 = manifold.canonical(np.asarray(x0.array if isinstance(x0, Point) else x0, float))
    z = streams.per_path(lambda g: transition_noise(g, manifold, t, k), seed, experiment, n_paths)
    nodes = propagate(manifold, x0, t, z)
    return PathEnsemble(manifold, x0, t, k, nodes, seed, experiment, _sampling_metadata(manifold, t, k))


def sample_bridge_ensemble(manifold, x0, y, t, k, n_paths, seed, experiment="bridges", biased_ok=False) -> PathEnsemble:
    _check_depth(t, k)
    if n_paths < 1:
        raise DomainError("need at least one path")
    x0 = manifold.canonical(np.asarray(x0.array if isinstance(x0, Point) else x0, float))
    y = manifold.canonical(np.asarray(y.array if isinstance(y, Point) else y, float))
    noise = streams.per_path(lambda g: bridge_noise(g, manifold, k), seed, experiment, n_paths, purpose="bridge")
    nodes = fill_bridge(manifold, x0, y, t, noise, biased_ok)
    meta = {"scheme": "midpoint_bridge", "exact": not isinstance(manifold, Sphere2), "endpoint": [float(a) for a in y]}
    return PathEnsemble(manifold, x0, t, k, nodes, seed, experiment, meta)


def refine_ensemble(ens: PathEnsemble, biased_ok=False, purpose=None) -> PathEnsemble:
    """Refine every path by one level; path ``i`` draws from its own bridge stream."""
    purpose = purpose or f"refine{ens.depth + 1}"
    n = 2**ens.depth
    cd = ens.manifold.coord_dim

    def draw(g):
        # same draw order as refine_nodes
        return np.concatenate([g.standard_normal((n, cd)), g.random((n, cd))], axis=-1)

    noise = streams.per_path(draw, ens.seed, ens.experiment, ens.n_paths, purpose)
    out = _midpoints(ens.manifold, ens.nodes, ens.horizon, noise[..., :cd], noise[..., cd:], biased_ok)
    meta = dict(ens.metadata, refined_from=ens.depth)
    return PathEnsemble(ens.manifold, ens.base_point, ens.horizon, ens.depth + 1, out, ens.seed, ens.experiment, meta)
