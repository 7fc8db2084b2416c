"""Experiment configs and runners shared by the CLI and the verify suite.

A config is a flat mapping (from TOML, JSON or command-line flags). Each
runner returns an :class:`Outcome`: the result payload, a table for CSV
output, and scalar metrics that suite checks compare against thresholds.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bundles import BundleSpec, CircleU1, LeviCivitaSphere, TrivialFlat, bundle_from_dict, holonomy, rotation_angle
from .feynman_kac import (
    fk_estimate,
    heat_kernel_estimate,
    potential_from_spec,
    scalar_fk_estimate,
)
from .heat_kernels import TRUNCATION
from .manifolds import TWO_PI, Circle, DomainError, Euclidean, Sphere2, manifold_from_dict, minimizing_geodesic
from .paths import PathEnsemble, refine_ensemble, sample_ensemble
from .reference import (
    CHERNOFF_RAD,
    chernoff_product_error,
    exhaustion_convergence,
    spectral_semigroup_circle,
    twisted_circle_kernel,
)
from .transport import convergence_study, isometry_defect

KINDS = ("sample-paths", "transport-convergence", "feynman-kac", "heat-kernel", "chernoff", "exhaustion")

DEFAULTS = {
    "manifold": {"kind": "circle", "radius": 1.0},
    "bundle": {"kind": "flat"},
    "potential": "zero",
    "t": 1.0,
    "depth": 6,
    "n_paths": 1000,
    "seed": 0,
}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# parsing helpers
# ---------------------------------------------------------------------------


def parse_range(text):
    """``"2..7"`` -> [2, ..., 7]; ``"1,2,4"`` -> [1, 2, 4]; lists pass through."""
    if isinstance(text, (list, tuple)):
        return [int(a) for a in text]
    if isinstance(text, int):
        return [text]
    text = str(text).strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(a) for a in text.split(",") if a.strip()]


def parse_floats(text):
    if isinstance(text, (list, tuple)):
        return [float(a) for a in text]
    if isinstance(text, (int, float)):
        return [float(text)]
    return [float(a) for a in str(text).split(",") if a.strip()]


def parse_manifold_flag(text: str) -> dict:
    """``sphere2``, ``sphere2:2``, ``circle:1.5``, ``euclidean:2``, ``torus:6.28,12.57``."""
    kind, _, arg = str(text).partition(":")
    kind = kind.strip().lower()
    if kind in ("sphere", "sphere2"):
        return {"kind": "sphere2", "radius": float(arg or 1.0)}
    if kind == "circle":
        return {"kind": "circle", "radius": float(arg or 1.0)}
    if kind == "euclidean":
        return {"kind": "euclidean", "dim": int(arg or 1)}
    if kind in ("torus", "flat_torus", "flattorus"):
        periods = parse_floats(arg) if arg else [TWO_PI, TWO_PI]
        return {"kind": "flat_torus", "periods": periods}
    raise ConfigError(f"unknown manifold {text!r}")


def parse_bundle_flag(text: str) -> dict:
    """``flat``, ``flat:2``, ``circle_u1:0.3``, ``levi-civita``, ``matrix:su2_plane``."""
    kind, _, arg = str(text).partition(":")
    kind = kind.strip().lower().replace("-", "_")
    if kind == "flat":
        return {"kind": "flat", "rank": int(arg or 1)}
    if kind == "circle_u1":
        return {"kind": "circle_u1", "alpha": float(arg or 0.0)}
    if kind in ("levi_civita", "levicivita"):
        return {"kind": "levi_civita"}
    if kind == "matrix":
        return {"kind": "matrix", "entry": arg or "su2_plane"}
    raise ConfigError(f"unknown bundle {text!r}")


def _as_dict(value, parser):
    return parser(value) if isinstance(value, str) else dict(value)


def resolve(config: dict) -> dict:
    """Fill defaults, normalize spec strings and validate; returns a JSON-ready dict."""
    cfg = {**DEFAULTS, **{k: v for k, v in config.items() if v is not None}}
    kind = cfg.get("experiment")
    if kind not in KINDS:
        raise ConfigError(f"experiment must be one of {', '.join(KINDS)}; got {kind!r}")
    cfg["manifold"] = _as_dict(cfg["manifold"], parse_manifold_flag)
    cfg["bundle"] = _as_dict(cfg["bundle"], parse_bundle_flag)
    if "depths" in cfg:
        cfg["depths"] = parse_range(cfg["depths"])
    for key in ("x", "y", "grid"):
        if key in cfg:
            cfg[key] = parse_floats(cfg[key])
    cfg["t"] = float(cfg["t"])
    cfg["n_paths"] = int(cfg["n_paths"])
    cfg["seed"] = int(cfg["seed"])
    cfg["depth"] = int(cfg["depth"])
    if not cfg["t"] > 0:
        raise ConfigError("t must be positive")
    if cfg["n_paths"] < 1:
        raise ConfigError("n_paths must be at least 1")
    cfg.setdefault("name", kind)
    # build once to validate catalog ids
    try:
        m = manifold_from_dict(cfg["manifold"])
        bundle_from_dict(m, cfg["bundle"])
        potential_from_spec(cfg["potential"])
    except DomainError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _specs(cfg):
    m = manifold_from_dict(cfg["manifold"])
    return m, bundle_from_dict(m, cfg["bundle"])


def _base_point(m, cfg, key="x"):
    if key in cfg:
        return m.canonical(np.asarray(cfg[key], float))
    default = {"sphere2": [0.0, 0.0, m.radius if hasattr(m, "radius") else 1.0]}
    return m.canonical(np.asarray(default.get(cfg["manifold"]["kind"], [0.0] * m.coord_dim), float))


@dataclass
class Outcome:
    result: dict
    metrics: dict
    header: list = field(default_factory=list)
    table: object = field(default_factory=list)  # list of rows, or a callable yielding rows
    binary: bytes = b""

    def rows(self):
        return self.table() if callable(self.table) else self.table


# ---------------------------------------------------------------------------
# runners
# ---------------------------------------------------------------------------


def run_sample_paths(cfg) -> Outcome:
    m, _ = _specs(cfg)
    x0 = _base_point(m, cfg)
    k = cfg["depth"]
    ens = sample_ensemble(m, x0, cfg["t"], k, cfg["n_paths"], cfg["seed"], cfg["name"])
    steps = ens.max_steps()
    metrics = {"max_step": float(steps.max()), "n_paths": ens.n_paths}
    if isinstance(m, Euclidean) and m.dim == 1 and ens.n_paths > 2:
        metrics["covariance_sigma"] = covariance_sigma(ens.nodes[:, :, 0], ens.horizon)
    if m.cut_radius() < math.inf:
        metrics["cut_fraction"] = float(np.mean(steps >= m.cut_radius()))
    if not isinstance(m, Sphere2):
        # refinement must keep every existing node bit-for-bit
        sub = PathEnsemble(m, ens.base_point, ens.horizon, k, ens.nodes[:100], ens.seed, ens.experiment)
        fine = refine_ensemble(sub)
        metrics["retention_mismatches"] = int(np.sum(fine.nodes[:, 0::2] != sub.nodes))
    header = ["path_id", "j", "time"] + [f"c{i}" for i in range(m.coord_dim)]
    dt = ens.horizon / 2**k

    def table():
        for i in range(ens.n_paths):
            for j in range(ens.nodes.shape[1]):
                yield [i, j, j * dt, *ens.nodes[i, j]]

    result = {"ensemble": ens.header()}
    return Outcome(result, metrics, header, table, ens.to_bytes())


def covariance_sigma(x, horizon) -> float:
    """max over node pairs of |cov(c(s), c(u)) - 2 min(s, u)| / stderr."""
    n_paths, n_nodes = x.shape
    times = np.arange(n_nodes) * horizon / (n_nodes - 1)
    idx = np.unique(np.linspace(1, n_nodes - 1, min(n_nodes - 1, 8)).astype(int))
    xc = x[:, idx] - x[:, idx].mean(axis=0)
    worst = 0.0
    for a in range(len(idx)):
        for b in range(a, len(idx)):
            prod = xc[:, a] * xc[:, b]
            cov = prod.sum() / (n_paths - 1)
            se = prod.std(ddof=1) / math.sqrt(n_paths)
            target = 2 * min(times[idx[a]], times[idx[b]])
            worst = max(worst, abs(cov - target) / se)
    return float(worst)


def run_transport_convergence(cfg) -> Outcome:
    m, spec = _specs(cfg)
    x0 = _base_point(m, cfg)
    depths = cfg.get("depths") or list(range(0, cfg["depth"] + 1))
    ens = sample_ensemble(m, x0, cfg["t"], max(depths), cfg["n_paths"], cfg["seed"], cfg["name"])
    v = np.zeros(spec.rank, complex)
    v[0] = 1.0
    tab = convergence_study(ens, v, spec, depths)
    msd, se = tab.column("mean_sq_diff"), tab.column("stderr")
    ups = np.diff(msd) - 4.0 * np.hypot(se[1:], se[:-1])
    defect, rej = isometry_defect(spec, ens.at_depth(max(depths)), v)
    metrics = {
        "max_mean_sq_diff": float(msd.max()),
        "nonincreasing_violations": int(np.sum(ups > 0)),
        "final_over_initial": float(msd[-1] / msd[0]) if msd[0] > 0 else 0.0,
        "max_rejection_rate": float(tab.column("rejection_rate").max()),
        "final_rejection_rate": rej,
        "isometry_defect": 0.0 if math.isnan(defect) else defect,
    }
    if isinstance(spec.connection, LeviCivitaSphere):
        metrics["octant_holonomy_error"] = octant_holonomy_error(m.radius)
    rows = [[r.k, r.mean_sq_diff, r.stderr, r.rejection_rate, tab.n_paths, tab.seed] for r in tab.rows]
    result = {"rows": [dict(zip(tab.COLUMNS, r)) for r in rows], "sampling": ens.metadata}
    return Outcome(result, metrics, list(tab.COLUMNS), rows)


def octant_holonomy_error(radius=1.0, method="magnus") -> float:
    """|angle - pi/2| for transport around the octant triangle (north pole, x, y)."""
    m = Sphere2(radius)
    spec = BundleSpec(m, LeviCivitaSphere())
    corners = [m.point(0, 0, radius), m.point(radius, 0, 0), m.point(0, radius, 0)]
    loop = [minimizing_geodesic(a, b) for a, b in zip(corners, corners[1:] + corners[:1])]
    return abs(abs(rotation_angle(holonomy(loop, spec, method=method))) - math.pi / 2)


def _eta_from_cfg(cfg, rank):
    mode = int(cfg.get("eta_mode", 0))

    def eta(x):
        phase = np.exp(1j * mode * x[..., 0])
        out = np.zeros((*x.shape[:-1], rank), complex)
        out[..., 0] = phase
        return out

    return eta, mode


def _fk_oracle(cfg, spec, pot, x0, mode):
    m = spec.base
    if not (isinstance(m, Circle) and m.radius == 1.0 and spec.rank == 1 and pot.kind == "scalar"):
        return None, "no spectral oracle for this manifold/bundle/potential"
    conn = spec.connection
    alpha = conn.alpha if isinstance(conn, CircleU1) else 0.0
    V = None if pot.name == "zero" else (lambda th: pot.values(th))
    res = spectral_semigroup_circle(alpha, V, cfg["t"], lambda th: np.exp(1j * mode * th[..., 0]), x=[x0[0]])
    return complex(res.values[0]), None


def run_feynman_kac(cfg) -> Outcome:
    m, spec = _specs(cfg)
    pot = potential_from_spec(cfg["potential"])
    x0 = _base_point(m, cfg)
    eta, mode = _eta_from_cfg(cfg, spec.rank)
    estimator = scalar_fk_estimate if cfg.get("estimator", "trotter") == "scalar" else fk_estimate
    est = estimator(x0, cfg["t"], eta, pot, spec, cfg["depth"], cfg["n_paths"], cfg["seed"], cfg["name"])
    oracle, reason = _fk_oracle(cfg, spec, pot, x0, mode)
    payload = est.to_json(None if oracle is None else [oracle] + [0.0] * (spec.rank - 1))
    if reason:
        payload["oracle_skipped"] = reason
    payload["truncation"] = TRUNCATION
    metrics = {"rejection_rate": est.rejection_rate}
    if oracle is not None:
        metrics["sigma_distance"] = payload["sigma_distance"]
        if abs(oracle) > 0:
            metrics["rel_stderr"] = float(est.stderr[0] / abs(oracle))
    header = ["component", "re", "im", "stderr", "oracle_re", "oracle_im"]
    rows = []
    for i, val in enumerate(est.value):
        o = (oracle if i == 0 else 0.0) if oracle is not None else float("nan")
        rows.append([i, val.real, val.imag, est.stderr[i], complex(o).real, complex(o).imag])
    return Outcome(payload, metrics, header, rows)


def _pairs(cfg, m):
    if "pairs" in cfg:
        return [(np.atleast_1d(np.asarray(a, float)), np.atleast_1d(np.asarray(b, float))) for a, b in cfg["pairs"]]
    if "grid" in cfg:
        pts = [np.array([float(a)]) for a in parse_floats(cfg["grid"])]
        return [(a, b) for a in pts for b in pts]
    return [(_base_point(m, cfg), _base_point(m, cfg, "y") if "y" in cfg else _base_point(m, cfg))]


def run_heat_kernel(cfg) -> Outcome:
    m, spec = _specs(cfg)
    conn = spec.connection
    rows, out_rows = [], []
    worst_sigma, worst_violation, worst_ratio, least_ratio = 0.0, -math.inf, 0.0, math.inf
    have_oracle = isinstance(m, Circle) and m.radius == 1.0 and isinstance(conn, (CircleU1, TrivialFlat)) and spec.rank == 1
    for i, (x, y) in enumerate(_pairs(cfg, m)):
        est = heat_kernel_estimate(
            cfg["t"], x, y, spec, cfg["depth"], cfg["n_paths"], cfg["seed"], f"{cfg['name']}/{i}", bool(cfg.get("biased_ok", False))
        )
        se = est.op_norm_stderr
        excess = est.op_norm - est.scalar_kernel
        viol = excess / se if se > 0 else (0.0 if excess <= 0 else math.inf)
        ratio = est.op_norm / est.scalar_kernel
        worst_violation = max(worst_violation, viol)
        worst_ratio = max(worst_ratio, ratio)
        least_ratio = min(least_ratio, ratio)
        row = {
            "x": list(map(float, x)),
            "y": list(map(float, y)),
            "estimate": {"re": est.matrix.real.tolist(), "im": est.matrix.imag.tolist()},
            "stderr": est.stderr.tolist(),
            "scalar_kernel": est.scalar_kernel,
            "op_norm": est.op_norm,
            "ratio": ratio,
            "violation_sigma": viol,
            "rejection_rate": est.rejection_rate,
        }
        o = complex("nan")
        if have_oracle:
            alpha = conn.alpha if isinstance(conn, CircleU1) else 0.0
            o = complex(twisted_circle_kernel(alpha, cfg["t"], x[0], y[0]))
            s = est.entry_stderr()
            sig = abs(est.matrix[0, 0] - o) / s if s > 0 else (0.0 if est.matrix[0, 0] == o else math.inf)
            row["oracle"] = {"re": o.real, "im": o.imag}
            row["sigma_distance"] = sig
            worst_sigma = max(worst_sigma, sig)
        rows.append(row)
        out_rows.append([i, x[0], y[0], est.matrix[0, 0].real, est.matrix[0, 0].imag, est.stderr[0, 0], est.scalar_kernel, ratio, o.real, o.imag])
    metrics = {"max_violation_sigma": float(worst_violation), "max_ratio": float(worst_ratio), "min_ratio": float(least_ratio)}
    if have_oracle:
        metrics["max_sigma_distance"] = float(worst_sigma)
    header = ["pair", "x0", "y0", "re", "im", "stderr", "scalar_kernel", "ratio", "oracle_re", "oracle_im"]
    return Outcome({"rows": rows}, metrics, header, out_rows)


def run_chernoff(cfg) -> Outcome:
    conn = cfg["bundle"]
    alpha = float(conn["alpha"]) if conn.get("kind") == "circle_u1" else None
    ts = parse_floats(cfg.get("ts", [cfg["t"]]))
    ks = parse_range(cfg.get("ks", [4, 8, 16, 32, 64]))
    rad = float(cfg.get("rad", CHERNOFF_RAD))
    reports = [chernoff_product_error(t, ks, alpha, cfg.get("f", "exp_cos"), rad) for t in ts]
    avg = np.mean([r.errors for r in reports], axis=0)
    contraction = max(r.contraction for r in reports)
    metrics = {
        "strict_decrease_violations": int(np.sum(np.diff(avg) >= 0)),
        "last_over_second": float(avg[-1] / avg[1]) if len(avg) > 1 else 1.0,
        "contraction_excess": float(contraction - 1.0),
    }
    rows = [[rep.t, row.k, row.sup_error, rep.n_nodes] for rep in reports for row in rep.rows]
    result = {"reports": [r.to_json() for r in reports], "mean_errors": avg.tolist(), "ks": ks}
    return Outcome(result, metrics, ["t", "k", "sup_error", "n_nodes"], rows)


def run_exhaustion(cfg) -> Outcome:
    js = parse_range(cfg.get("js", "1..6"))
    x = float(cfg.get("x", [0.0])[0])
    y = float(cfg.get("y", [x])[0])
    tab = exhaustion_convergence(cfg["t"], x, y, [(-j, j) for j in js])
    metrics = {
        "violations": tab.monotonicity_violations(),
        "bounded": int(tab.bounded()),
        "terminal_gap": tab.terminal_gap,
    }
    rows = [[r.j, r.a, r.b, r.value, r.deficit, tab.free] for r in tab.rows]
    return Outcome(tab.to_json(), metrics, ["j", "a", "b", "value", "deficit", "free"], rows)


RUNNERS = {
    "sample-paths": run_sample_paths,
    "transport-convergence": run_transport_convergence,
    "feynman-kac": run_feynman_kac,
    "heat-kernel": run_heat_kernel,
    "chernoff": run_chernoff,
    "exhaustion": run_exhaustion,
}


def run_experiment(config: dict):
    cfg = resolve(config)
    return cfg, RUNNERS[cfg["experiment"]](cfg)
