"""Command line: ``sptransport run <experiment> ...`` and ``sptransport verify [suite]``."""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .experiments import KINDS, ConfigError, run_experiment
from .manifolds import DomainError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SCHEMA_VERSION = 1

# flag name -> config key
FLAG_KEYS = {
    "manifold": "manifold",
    "bundle": "bundle",
    "potential": "potential",
    "t": "t",
    "depth": "depth",
    "depths": "depths",
    "n_paths": "n_paths",
    "seed": "seed",
    "x": "x",
    "y": "y",
    "eta_mode": "eta_mode",
    "estimator": "estimator",
    "ts": "ts",
    "ks": "ks",
    "js": "js",
    "rad": "rad",
    "grid": "grid",
    "output": "output",
    "output_dir": "output_dir",
    "format": "format",
    "name": "name",
}


def load_config(path) -> dict:
    """TOML or JSON, chosen by extension (``.json`` -> JSON, anything else TOML)."""
    p = Path(path)
    text = p.read_bytes()
    if p.suffix.lower() == ".json":
        return json.loads(text.decode("utf-8"))
    return tomllib.loads(text.decode("utf-8"))


def _default_format(kind):
    return "json" if kind in ("feynman-kac", "heat-kernel") else "csv"


def _json_default(o):
    if hasattr(o, "tolist"):
        return o.tolist()
    if isinstance(o, complex):
        return {"re": o.real, "im": o.imag}
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _clean(o):
    """Replace non-finite floats (not valid JSON) by strings."""
    if isinstance(o, float) and not math.isfinite(o):
        return str(o)
    if isinstance(o, dict):
        return {k: _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    return o


def dumps(obj) -> str:
    return json.dumps(_clean(json.loads(json.dumps(obj, default=_json_default))), sort_keys=True, indent=2) + "\n"


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def render(cfg: dict, outcome) -> bytes:
    fmt = cfg.get("format") or _default_format(cfg["experiment"])
    public = {k: v for k, v in cfg.items() if k not in ("output", "output_dir")}
    if fmt == "json":
        doc = {
            "schema_version": SCHEMA_VERSION,
            "version": __version__,
            "config": public,
            "result": outcome.result,
            "metrics": outcome.metrics,
        }
        return dumps(doc).encode("utf-8")
    if fmt == "csv":
        buf = io.StringIO()
        buf.write(f"# sptransport {__version__} schema {SCHEMA_VERSION}\n")
        buf.write("# config: " + json.dumps(_clean(public), sort_keys=True, default=_json_default) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(outcome.header)
        for row in outcome.rows():
            w.writerow([_cell(v) for v in row])
        return buf.getvalue().encode("utf-8")
    if fmt == "dyad":
        if not outcome.binary:
            raise ConfigError("binary output is only available for sample-paths")
        return outcome.binary
    raise ConfigError(f"unknown format {fmt!r}")


def output_path(cfg) -> Path | None:
    if not cfg.get("output"):
        return None
    root = Path(cfg.get("output_dir", ".")).resolve()
    target = (root / cfg["output"]).resolve()
    if root != target and root not in target.parents:
        raise ConfigError(f"output {cfg['output']!r} escapes output_dir {str(root)!r}")
    return target


def write_atomic(path: Path, data: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _error(exc, code=2):
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
    return code


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def cmd_run(args) -> int:
    try:
        config = load_config(args.config) if args.config else {}
        if args.experiment:
            config["experiment"] = args.experiment
        for flag, key in FLAG_KEYS.items():
            val = getattr(args, flag, None)
            if val is not None:
                config[key] = val
        cfg, outcome = run_experiment(config)
        data = render(cfg, outcome)
        path = output_path(cfg)
        if path is None:
            sys.stdout.buffer.write(data)
        else:
            write_atomic(path, data)
        return 0
    except (ConfigError, DomainError, ValueError, KeyError, TypeError, OSError, tomllib.TOMLDecodeError) as exc:
        return _error(exc)


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

BUNDLED_SUITE = "acceptance.suite"


def load_suite(path=None) -> list:
    if path is None:
        text = resources.files("sptransport").joinpath(BUNDLED_SUITE).read_text("utf-8")
        doc = tomllib.loads(text)
    else:
        doc = load_config(path)
    return list(doc.get("experiment", []))


def evaluate_checks(name, checks, metrics):
    """Yield (name, metric, value, rule, status, note) per check."""
    for chk in checks:
        metric = chk.get("metric")
        label = chk.get("criterion", name)
        if metric not in metrics:
            yield label, metric, None, "", "SKIP", chk.get("reason", f"metric {metric!r} not produced")
            continue
        value = metrics[metric]
        ok = True
        rules = []
        if "max" in chk:
            ok &= value <= chk["max"]
            rules.append(f"<= {chk['max']}")
        if "min" in chk:
            ok &= value >= chk["min"]
            rules.append(f">= {chk['min']}")
        yield label, metric, value, " and ".join(rules), "PASS" if ok else "FAIL", ""


def cmd_verify(args) -> int:
    try:
        experiments = load_suite(args.suite)
    except (OSError, ValueError, tomllib.TOMLDecodeError) as exc:
        return _error(exc)
    if not experiments:
        return _error(ConfigError("no experiments"))
    failures = 0
    out = sys.stdout
    out.write(f"{'status':6}  {'criterion':34}  {'metric':28}  {'value':>14}  rule\n")
    for exp in experiments:
        exp = dict(exp)
        checks = exp.pop("check", [])
        name = exp.get("name", exp.get("experiment", "?"))
        try:
            _, outcome = run_experiment(exp)
            metrics = outcome.metrics
        except (ConfigError, DomainError, ValueError, KeyError, TypeError) as exc:
            out.write(f"{'FAIL':6}  {name:34}  {'(error)':28}  {'':>14}  {type(exc).__name__}: {exc}\n")
            failures += 1
            continue
        if not checks:
            out.write(f"{'SKIP':6}  {name:34}  {'':28}  {'':>14}  no checks configured\n")
        for label, metric, value, rule, status, note in evaluate_checks(name, checks, metrics):
            shown = "" if value is None else f"{value:14.6g}"
            out.write(f"{status:6}  {label:34}  {str(metric):28}  {shown:>14}  {rule or note}\n")
            failures += status == "FAIL"
    out.write(f"{'FAILED' if failures else 'OK'}: {failures} failing check(s)\n")
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sptransport", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("experiment", nargs="?", choices=KINDS)
    run.add_argument("--config", help="TOML or JSON config file; flags override it")
    run.add_argument("--manifold", help="e.g. sphere2, circle:1.0, euclidean:2, torus:6.28,12.57")
    run.add_argument("--bundle", help="e.g. flat, flat:2, circle_u1:0.3, levi-civita, matrix:su2_plane")
    run.add_argument("--potential", help="zero, const:<c>, cos, sphere_z, matrix_cos")
    run.add_argument("--t", type=float)
    run.add_argument("--depth", type=int)
    run.add_argument("--depths", help="range like 2..7")
    run.add_argument("--n-paths", dest="n_paths", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--x", help="base point coordinates, comma separated")
    run.add_argument("--y", help="second point (bridges / kernels)")
    run.add_argument("--eta-mode", dest="eta_mode", type=int, help="eta = exp(i n theta) in the first component")
    run.add_argument("--estimator", choices=["trotter", "scalar"])
    run.add_argument("--ts", help="chernoff time grid, comma separated")
    run.add_argument("--ks", help="chernoff product counts")
    run.add_argument("--js", help="exhaustion domain indices, e.g. 1..6")
    run.add_argument("--rad", type=float, help="chernoff cut-off radius")
    run.add_argument("--grid", help="heat-kernel point grid (all pairs), comma separated")
    run.add_argument("--name", help="experiment id used for seeding")
    run.add_argument("--output", "-o", help="output file, relative to --output-dir")
    run.add_argument("--output-dir", dest="output_dir")
    run.add_argument("--format", choices=["csv", "json", "dyad"])
    run.set_defaults(func=cmd_run)

    ver = sub.add_parser("verify", help="run a suite of experiments with thresholds")
    ver.add_argument("suite", nargs="?", help="suite file (default: bundled acceptance.suite)")
    ver.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
