"""Command-line front end: gen-set, width, build, analyze, verify.

Every command takes an optional flat YAML config (``--config``); explicit
flags override it and unknown keys are errors. Reports are JSON with sorted
keys and embed the fully resolved config. Exit codes: 0 pass, 1 check or
threshold failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad parameters or unreadable inputs (exit code 2)."""


# ---------------------------------------------------------------------------
# parameter parsing
# ---------------------------------------------------------------------------


def _vec(v) -> tuple:
    if isinstance(v, str):
        parts = [p for p in v.replace(" ", "").split(",") if p]
    elif isinstance(v, (list, tuple)):
        parts = list(v)
    else:
        raise ValueError(f"expected a vector, got {v!r}")
    out = tuple(float(p) for p in parts)
    if not out or not all(math.isfinite(c) for c in out):
        raise ValueError(f"bad vector {v!r}")
    return out


def _vec_list(v) -> tuple:
    """'1,0;0,1' or a list of vectors."""
    if isinstance(v, str):
        items = [s for s in v.split(";") if s.strip()]
    elif isinstance(v, (list, tuple)):
        items = list(v)
    else:
        raise ValueError(f"expected a list of vectors, got {v!r}")
    out = tuple(_vec(s) for s in items)
    if not out:
        raise ValueError("empty vector list")
    return out


def _float_list(v) -> tuple:
    if isinstance(v, str):
        v = [p for p in v.replace(" ", "").split(",") if p]
    elif not isinstance(v, (list, tuple)):
        v = [v]
    out = tuple(float(p) for p in v)
    if not out:
        raise ValueError("empty list")
    return out


def _int_list(v) -> tuple:
    return tuple(int(round(x)) for x in _float_list(v))


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    if isinstance(v, str) and v.lower() in ("1", "true", "yes", "on"):
        return True
    if isinstance(v, str) and v.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {v!r}")


def _int(v) -> int:
    if isinstance(v, bool):
        raise ValueError("expected an integer")
    f = float(v)
    if f != int(f):
        raise ValueError(f"expected an integer, got {v!r}")
    return int(f)


def _positive(x) -> bool:
    return x > 0


def _nonneg(x) -> bool:
    return x >= 0


def _unit_interval(x) -> bool:
    return 0 < x <= 1


def _all_positive(xs) -> bool:
    return all(x > 0 for x in xs)


@dataclass(frozen=True)
class Param:
    name: str
    parse: Callable[[Any], Any]
    default: Any
    check: Optional[Callable[[Any], bool]] = None
    help: str = ""
    choices: Optional[tuple] = None
    rule: str = ""

    def resolve(self, raw):
        if raw is None:
            return None
        try:
            val = self.parse(raw)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"{self.name}: {exc}") from None
        if self.choices is not None and val not in self.choices:
            raise UsageError(f"{self.name}: expected one of {', '.join(self.choices)}, got {val!r}")
        if self.check is not None and not self.check(val):
            raise UsageError(f"{self.name}: value {val!r} out of range ({self.rule})")
        return val


PARAMS: dict = {
    "gen-set": [
        Param("kind", str, None, help="four-corner, cantor-product, graph-family, line-neighborhood or box",
              choices=("four-corner", "cantor-product", "graph-family", "line-neighborhood", "box")),
        Param("depth", _int, 3, _nonneg, "construction depth", rule=">= 0"),
        Param("ratio", float, 1 / 3, lambda r: 0 < r < 0.5, "Cantor ratio", rule="in (0, 0.5)"),
        Param("y_samples", _int, 17, _positive, "samples per vertical line (cantor-product)", rule="> 0"),
        Param("k_max", _int, 8, _positive, "number of graphs (graph-family)", rule="> 0"),
        Param("samples", _int, 33, lambda s: s >= 2, "samples per graph (graph-family)", rule=">= 2"),
        Param("lines", _int, 8, _positive, "line count (line-neighborhood)", rule="> 0"),
        Param("eps", float, 0.05, _positive, "strip budget (line-neighborhood)", rule="> 0"),
        Param("axis", _vec, (0.0, 1.0), help="cone axis, e.g. 0,1"),
        Param("aperture", float, 0.6, _unit_interval, "cone aperture", rule="in (0, 1]"),
        Param("h", float, 1 / 128, _positive, "grid spacing for raster output", rule="> 0"),
        Param("lo", _vec, (0.0, 0.0), help="lower box corner for raster output"),
        Param("hi", _vec, (1.0, 1.0), help="upper box corner for raster output"),
        Param("box_lo", _vec, (0.25, 0.25), help="lower corner of the occupied box (kind box)"),
        Param("box_hi", _vec, (0.75, 0.75), help="upper corner of the occupied box (kind box)"),
        Param("padding", _int, 4, _nonneg, "padding cells", rule=">= 0"),
        Param("out", str, None, help="output path (.csv for point sets, .pbm for rasters)"),
        Param("report", str, None, help="optional JSON report path"),
    ],
    "width": [
        Param("set", str, None, help="input .csv point set or .pbm raster"),
        Param("axis", _vec, (1.0, 0.0), help="cone axis"),
        Param("aperture", float, 0.5, _unit_interval, "cone aperture", rule="in (0, 1]"),
        Param("s_max", _int, 3, lambda s: 1 <= s <= 8, "maximal lattice step", rule="in 1..8"),
        Param("oracle", _bool, False, help="also run the brute-force oracle (at most 400 nodes)"),
        Param("h", float, 1 / 64, _positive, "grid spacing for point-set input", rule="> 0"),
        Param("lo", _vec, None, help="lower grid corner for point-set input (default: bounding box)"),
        Param("hi", _vec, None, help="upper grid corner for point-set input (default: bounding box)"),
        Param("radii", _float_list, None, _all_positive, "neighborhood radii for point-set input "
              "(default 4h,2h)", rule="> 0"),
        Param("report", str, None, help="optional JSON report path"),
    ],
    "build": [
        Param("pipeline", str, None, help="theorem4 or theorem9", choices=("theorem4", "theorem9")),
        Param("set", str, None, help="input .csv point set"),
        Param("eps", float, 0.3, lambda e: 0 < e < 1, "Lipschitz slack (theorem4)", rule="in (0, 1)"),
        Param("stages", _int, 3, _nonneg, "K: stage pairs (theorem4) or refinement steps (theorem9)",
              rule=">= 0"),
        Param("i_max", _int, 4, _positive, "stage-selection levels (theorem4)", rule="> 0"),
        Param("h", float, 1 / 256, _positive, "grid spacing", rule="> 0"),
        Param("lo", _vec, None, help="lower grid corner (default: bounding box - 1/8)"),
        Param("hi", _vec, None, help="upper grid corner (default: bounding box + 1/8)"),
        Param("s_max", _int, 3, lambda s: 1 <= s <= 8, "maximal lattice step", rule="in 1..8"),
        Param("width_threshold", float, 0.1, _positive, "normal-cone probe threshold", rule="> 0"),
        Param("strict", _bool, False, help="stop at the first failed check instead of recording it"),
        Param("probe", _bool, True, help="run the normal-cone probe before theorem9"),
        Param("out", str, None, help="trace directory"),
    ],
    "analyze": [
        Param("trace", str, None, help="trace directory written by build"),
        Param("mode", str, "residual", help="residual, gap or dini", choices=("residual", "gap", "dini")),
        Param("directions", _vec_list, None, help="directions y, e.g. '1,0;0,1' "
              "(default: 0,0 for residual, 1,0 otherwise)"),
        Param("base", str, "gradient", help="residual target base: gradient or zero",
              choices=("gradient", "zero")),
        Param("j_min", _int, 3, _nonneg, "smallest dyadic exponent", rule=">= 0"),
        Param("j_max", _int, 8, _nonneg, "largest dyadic exponent", rule=">= 0"),
        Param("residual_tol", float, 0.1, _nonneg, "residual pass level", rule=">= 0"),
        Param("slack", float, 0.2, _nonneg, "gap slack relative to |y|", rule=">= 0"),
        Param("dini_target", float, 1.7, _nonneg, "dini mode: required upper - lower per |y|", rule=">= 0"),
        Param("threshold", float, 0.9, lambda t: 0 <= t <= 1, "required pass rate", rule="in [0, 1]"),
        Param("out", str, None, help="output directory (default: the trace directory)"),
    ],
    "verify": [
        Param("criteria", _int_list, (1, 2, 3, 4, 5, 6, 7, 8, 9), lambda c: all(1 <= k <= 9 for k in c),
              "criteria to run, e.g. 1,2,3", rule="each in 1..9"),
        Param("out", str, None, help="directory for per-criterion JSON reports"),
    ],
}

REQUIRED = {"gen-set": ("kind", "out"), "width": ("set",), "build": ("pipeline", "set", "out"),
            "analyze": ("trace",), "verify": ()}


def _load_config(path) -> dict:
    import yaml

    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise UsageError(f"config {path} is not valid YAML: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a flat mapping")
    for k, v in data.items():
        if isinstance(v, dict):
            raise UsageError(f"config key {k!r}: nested blocks are not supported")
    return {str(k).replace("-", "_"): v for k, v in data.items()}


def resolve_config(command: str, file_values: dict, flag_values: dict) -> dict:
    """Defaults, then config file, then flags; unknown keys are errors."""
    params = {p.name: p for p in PARAMS[command]}
    unknown = sorted(set(file_values) - set(params))
    if unknown:
        raise UsageError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
    cfg = {}
    for name, p in params.items():
        raw = flag_values.get(name)
        if raw is None:
            raw = file_values.get(name)
        val = p.resolve(raw)
        cfg[name] = p.default if val is None else val
    missing = [k for k in REQUIRED[command] if cfg.get(k) is None]
    if missing:
        raise UsageError(f"{command}: missing required parameter(s): {', '.join(missing)}")
    return cfg


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


def dump_json(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def _emit(report: dict, path=None) -> None:
    text = dump_json(report)
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    sys.stdout.write(text)


def _read_points(path):
    from .geometry import read_pointcloud

    p = Path(path)
    if not p.is_file():
        raise UsageError(f"input file not found: {path}")
    try:
        return read_pointcloud(p)
    except (ValueError, IndexError) as exc:
        raise UsageError(f"cannot read point set {path}: {exc}") from None


def _box_for(E, lo, hi, margin: float):
    n = E.n
    if lo is None:
        lo = (E.points.min(axis=0) - margin) if len(E) else np.full(n, -margin)
    if hi is None:
        hi = (E.points.max(axis=0) + margin) if len(E) else np.full(n, 1 + margin)
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    if lo.shape != (n,) or hi.shape != (n,):
        raise UsageError(f"grid corners must have {n} coordinates")
    if np.any(hi <= lo):
        raise UsageError("grid box is empty (hi <= lo)")
    return lo, hi


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_set(cfg: dict) -> int:
    from .geometry import (
        Cone,
        GridDomain,
        GridSet,
        gen_cantor_product,
        gen_four_corner_cantor,
        gen_graph_family,
        gen_line_neighborhood_set,
        write_gridset,
        write_pointcloud,
    )

    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    kind = cfg["kind"]
    report = {"command": "gen-set", "config": cfg, "output": str(out)}
    if kind in ("four-corner", "cantor-product", "graph-family"):
        if kind == "four-corner":
            E = gen_four_corner_cantor(cfg["depth"])
        elif kind == "cantor-product":
            E = gen_cantor_product(cfg["ratio"], cfg["depth"], cfg["y_samples"])
        else:
            E = gen_graph_family(cfg["k_max"], cfg["samples"])
        write_pointcloud(E, out)
        report.update({"rows": len(E), "format": "csv"})
    else:
        try:
            d = GridDomain.box(cfg["lo"], cfg["hi"], cfg["h"], padding=cfg["padding"])
            if d.n != 2:
                raise ValueError("raster sets are planar")
            if kind == "box":
                G = GridSet.from_box(d, cfg["box_lo"], cfg["box_hi"])
            else:
                G = gen_line_neighborhood_set(cfg["lines"], cfg["eps"], Cone.from_direction(cfg["axis"],
                                                                                           cfg["aperture"]), d)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        write_gridset(G, out)
        inner = ~d.padding_mask()
        report.update({"format": "pbm", "cells": int(inner.sum()), "occupied": int(G.count),
                       "occupied_fraction": float(G.count) / float(inner.sum()), "domain": d.to_dict()})
    _emit(report, cfg["report"])
    return EXIT_OK


def cmd_width(cfg: dict) -> int:
    from .geometry import Cone, GridDomain, neighborhood, read_gridset
    from .width import width_brute_force, width_open

    path = Path(cfg["set"])
    if not path.is_file():
        raise UsageError(f"input file not found: {path}")
    try:
        cone = Cone.from_direction(cfg["axis"], cfg["aperture"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    report = {"command": "width", "config": cfg}
    if path.suffix.lower() == ".pbm":
        try:
            sets = [(None, read_gridset(path))]
        except (OSError, ValueError, KeyError) as exc:
            raise UsageError(f"cannot read raster {path}: {exc}") from None
    else:
        E = _read_points(path)
        radii = cfg["radii"] or (4 * cfg["h"], 2 * cfg["h"])
        lo, hi = _box_for(E, cfg["lo"], cfg["hi"], max(radii) + cfg["h"])
        d = GridDomain.box(lo, hi, cfg["h"], padding=cfg["s_max"] + 1)
        sets = [(r, neighborhood(E, r, d)) for r in radii]
    if len(cone.e) != sets[0][1].domain.n:
        raise UsageError("cone axis dimension does not match the set")
    rows = []
    status = EXIT_OK
    for r, G in sets:
        res = width_open(G, cone, cfg["s_max"])
        row = {"radius": r, "value": res.value, "occupied": int(G.count), "nodes": int(np.prod(G.domain.node_shape)),
               "path": [list(v) for v in res.argmax_path.nodes]}
        if cfg["oracle"]:
            if row["nodes"] > 400:
                raise UsageError(f"oracle limited to 400 grid nodes, this grid has {row['nodes']}")
            brute = width_brute_force(G, cone, cfg["s_max"])
            row["oracle"] = brute
            row["oracle_equal"] = brute == res.value
            if not row["oracle_equal"]:
                status = EXIT_FAIL
        rows.append(row)
    report["results"] = rows
    report["value"] = rows[-1]["value"]
    _emit(report, cfg["report"])
    return status


def cmd_build(cfg: dict) -> int:
    from .builder import BuildConfig, BuildError, theorem4_build, theorem9_build
    from .fields import ScalarField
    from .geometry import GridDomain, write_pointcloud

    E = _read_points(cfg["set"])
    lo, hi = _box_for(E, cfg["lo"], cfg["hi"], 0.125)
    out = Path(cfg["out"])
    d = GridDomain.box(lo, hi, cfg["h"])
    bcfg = BuildConfig(s_max=cfg["s_max"], width_threshold=cfg["width_threshold"], strict=cfg["strict"])
    try:
        if cfg["pipeline"] == "theorem4":
            f, u = theorem4_build(E, cfg["eps"], ScalarField.constant(d, 1.0), cfg["stages"], bcfg,
                                  i_max=cfg["i_max"])
            trace = f.meta["trace"]
            trace.write(out)
            manifest = json.loads((out / "manifest.json").read_text())
            failed = trace.failed_checks()
            manifest["max_u"] = float(np.linalg.norm(u, axis=1).max()) if len(u) else 0.0
        else:
            f = theorem9_build(E, cfg["stages"], d, bcfg, probe=cfg["probe"])
            out.mkdir(parents=True, exist_ok=True)
            f.write(out / "f_final.sfld")
            steps = []
            failed = []
            for s in f.meta.get("steps", []):
                sub = s.get("trace")
                sub_failed = sub.failed_checks() if sub is not None else []
                failed.extend({"step": s["k"], **c} for c in sub_failed)
                steps.append({k: v for k, v in s.items() if k != "trace"} | {"failed_checks": sub_failed})
            checks = f.meta.get("checks", {})
            failed.extend({"stage": "final", "check": k, **c} for k, c in checks.items() if not c["ok"])
            manifest = {"steps": steps, "checks": checks, "issues": f.meta.get("issues", []),
                        "probe_rejections": f.meta.get("probe_rejections"), "failed_checks": failed}
    except BuildError as exc:
        sys.stderr.write(f"build failed: {exc}\n")
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest.json").write_text(dump_json({"pipeline": cfg["pipeline"], "config": cfg,
                                                      "error": str(exc), "details": getattr(exc, "details", {})}))
        return EXIT_FAIL
    write_pointcloud(E, out / "points.csv")
    manifest.update({"pipeline": cfg["pipeline"], "config": cfg, "domain": d.to_dict(),
                     "lipschitz": f.lipschitz(), "points": len(E)})
    (out / "manifest.json").write_text(dump_json(manifest))
    groups: dict = {}
    for c in failed:
        groups.setdefault(c["check"], []).append(c)
    for name, cs in groups.items():
        where = [str(c.get("stage", c.get("step"))) for c in cs]
        shown = ", ".join(where[:8]) + (", ..." if len(where) > 8 else "")
        sys.stderr.write(f"failed check {name} at {len(cs)} stage(s): {shown} "
                         f"(first value={cs[0].get('value')}, bound={cs[0].get('bound')})\n")
    summary = {"command": "build", "pipeline": cfg["pipeline"], "out": str(out), "lipschitz": f.lipschitz(),
               "failed_checks": len(failed), "config": cfg}
    _emit(summary)
    return EXIT_FAIL if failed else EXIT_OK


def cmd_analyze(cfg: dict) -> int:
    from .analysis import dini_derivatives, gap_report, residual_profile
    from .fields import ScalarField, VectorField

    trace = Path(cfg["trace"])
    field_path, points_path = trace / "f_final.sfld", trace / "points.csv"
    if not field_path.is_file() or not points_path.is_file():
        raise UsageError(f"{trace} is not a trace directory (needs f_final.sfld and points.csv)")
    if cfg["j_max"] < cfg["j_min"]:
        raise UsageError("j_max must be >= j_min")
    f = ScalarField.read(field_path)
    E = _read_points(points_path)
    n = f.domain.n
    mode = cfg["mode"]
    dirs = cfg["directions"] or (((0.0,) * n,) if mode == "residual" else ((1.0,) + (0.0,) * (n - 1),))
    if any(len(y) != n for y in dirs):
        raise UsageError(f"directions must have {n} coordinates")
    dirs = np.asarray(dirs, dtype=np.float64)
    out = Path(cfg["out"] or trace)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    try:
        if mode == "residual":
            radii = 2.0 ** -np.arange(cfg["j_min"], cfg["j_max"] + 1)
            grad = np.stack(np.gradient(f.values, f.domain.h), axis=-1)
            gfield = VectorField(f.domain, grad)
            header = ["index", "dir", "minimum", "argmin_radius", "passed"]
            for i, x in enumerate(E.points):
                base = gfield(x) if cfg["base"] == "gradient" else np.zeros(n)
                for k, y in enumerate(dirs):
                    prof = residual_profile(f, x, base + y, radii)
                    rows.append([i, k, prof.minimum, prof.argmin_radius, prof.minimum <= cfg["residual_tol"]])
        elif mode == "gap":
            if not E.has_normals:
                raise UsageError("gap mode needs normal data in points.csv")
            rep = gap_report(f, E, dirs, cfg["j_min"], cfg["j_max"], cfg["slack"])
            header = ["index", "dir", "upper", "lower", "gap", "bound", "passed"]
            nd = len(dirs)
            for m, r in enumerate(rep.rows):
                rows.append([r.index, m % nd, r.upper, r.lower, r.gap, r.bound, r.passed])
        else:
            header = ["index", "dir", "upper", "lower", "gap", "target", "passed"]
            for i, x in enumerate(E.points):
                for k, y in enumerate(dirs):
                    est = dini_derivatives(f, x, y, cfg["j_min"], cfg["j_max"])
                    target = cfg["dini_target"] * float(np.linalg.norm(y))
                    rows.append([i, k, est.upper, est.lower, est.gap, target, est.gap >= target])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    csv_path = out / f"analysis_{mode}.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else int(v) for v in r])
    passed = [bool(r[-1]) for r in rows]
    rate = float(np.mean(passed)) if passed else 1.0
    per_dir = {}
    for k in range(len(dirs)):
        sel = [bool(r[-1]) for r in rows if r[1] == k]
        per_dir[str(k)] = float(np.mean(sel)) if sel else 1.0
    ok = rate >= cfg["threshold"]
    summary = {"command": "analyze", "mode": mode, "config": cfg, "rows": len(rows), "pass_rate": rate,
               "pass_rate_by_direction": per_dir, "directions": dirs, "passed": ok, "csv": csv_path.name}
    (out / f"analysis_{mode}.json").write_text(dump_json(summary))
    _emit(summary)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_verify(cfg: dict) -> int:
    from .acceptance import run_all

    def echo(line):
        sys.stdout.write(line + "\n")
        sys.stdout.flush()

    results = run_all(sorted(set(cfg["criteria"])), cfg["out"], echo)
    if cfg["out"]:
        Path(cfg["out"], "summary.json").write_text(dump_json({
            "config": cfg, "results": [{"criterion": r.number, "passed": r.passed, "summary": r.summary}
                                       for r in results]}))
    return EXIT_OK if all(r.ok for r in results) else EXIT_FAIL


COMMANDS = {"gen-set": cmd_gen_set, "width": cmd_width, "build": cmd_build, "analyze": cmd_analyze,
            "verify": cmd_verify}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="conewidth", description="Cone widths, non-differentiable Lipschitz constructions "
                                                   "and finite-scale certificates.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name, params in PARAMS.items():
        sp = sub.add_parser(name, help=f"{name} command")
        sp.add_argument("--config", help="flat YAML file of parameters (flags override it)")
        for p in params:
            flag = "--" + p.name.replace("_", "-")
            extra = f" [default: {p.default}]" if p.default is not None else ""
            if p.parse is _bool:
                sp.add_argument(flag, dest=p.name, default=None, nargs="?", const="true", help=p.help + extra)
            else:
                sp.add_argument(flag, dest=p.name, default=None, help=p.help + extra)
    return parser


def _set_threads() -> None:
    raw = os.environ.get("CONEWIDTH_THREADS")
    if raw is None or raw == "":
        return
    try:
        k = int(raw)
    except ValueError:
        raise UsageError(f"CONEWIDTH_THREADS must be an integer, got {raw!r}") from None
    import numba

    if not 1 <= k <= numba.config.NUMBA_NUM_THREADS:
        raise UsageError(f"CONEWIDTH_THREADS must lie in 1..{numba.config.NUMBA_NUM_THREADS}")
    numba.set_num_threads(k)


def main(argv=None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        _set_threads()
        file_values = _load_config(args.config) if args.config else {}
        flags = {p.name: getattr(args, p.name) for p in PARAMS[args.command]}
        cfg = resolve_config(args.command, file_values, flags)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        sys.stderr.write(f"conewidth: error: {exc}\n")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
