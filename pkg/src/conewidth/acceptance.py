"""Acceptance criteria as callable checks with deterministic JSON reports.

Each ``criterion_N`` returns a ``CriterionResult``. ``report`` holds every
measured quantity and is written with sorted keys and no timing data, so
repeated runs produce byte-identical files; the runtime is kept separately.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .analysis import dini_derivatives, example_e_check, gap_report, residual_profile
from .builder import (
    BuildConfig,
    ball_sequence,
    mollify_glue,
    select_stages,
    stage_cover_sum,
    theorem4_build,
    theorem9_build,
)
from .fields import ScalarField, VectorField
from .geometry import (
    Cone,
    GridDomain,
    GridSet,
    PointCloud,
    gen_cantor_product,
    gen_four_corner_cantor,
    gen_graph_family,
    gen_line_neighborhood_set,
)
from .width import build_step_set, estimate_normal_cone, width_brute_force, width_dp, width_function_from_values, width_open

__all__ = ["CriterionResult", "CRITERIA", "run_criterion", "run_all", "format_line", "width_function_violations"]


@dataclass
class CriterionResult:
    number: int
    title: str
    passed: bool
    summary: str
    report: dict
    seconds: float = 0.0
    limit: Optional[float] = None

    @property
    def in_time(self) -> bool:
        return self.limit is None or self.seconds < self.limit

    @property
    def ok(self) -> bool:
        return self.passed and self.in_time

    def report_bytes(self) -> bytes:
        body = {"criterion": self.number, "title": self.title, "passed": self.passed, "report": self.report}
        return (json.dumps(_plain(body), indent=2, sort_keys=True) + "\n").encode()


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


def format_line(r: CriterionResult) -> str:
    verdict = "PASS" if r.ok else "FAIL"
    timing = f"{r.seconds:.1f} s" + ("" if r.limit is None else f" of {r.limit:g} s")
    return f"criterion {r.number} [{verdict}] {r.title}: {r.summary} ({timing})"


def _unit_box(h: float, margin: float = 0.125) -> GridDomain:
    return GridDomain.box([-margin, -margin], [1 + margin, 1 + margin], h)


def _lenient() -> BuildConfig:
    return BuildConfig(strict=False)


# ---------------------------------------------------------------------------
# 1. oracle equivalence
# ---------------------------------------------------------------------------


def oracle_cases(count: int = 200, seed: int = 20240611):
    """Deterministic random grids of at most 8 x 8 cells with cones and step radii."""
    rng = np.random.default_rng(seed)
    apertures = (0.5, 0.7, 0.9)
    for i in range(count):
        dims = tuple(int(v) for v in rng.integers(1, 9, size=2))
        density = float(rng.uniform(0.2, 0.9))
        occ = rng.random(dims) < density
        alpha = apertures[int(rng.integers(0, 3))]
        s_max = int(rng.integers(1, 3))
        dom = GridDomain((0.0, 0.0), 0.125, dims, padding=0)
        yield i, GridSet(dom, occ), Cone((1.0, 0.0), alpha), s_max


def criterion_1() -> CriterionResult:
    rows = []
    mismatches = 0
    for i, G, cone, s_max in oracle_cases():
        try:
            dp = width_open(G, cone, s_max).value
        except ValueError as exc:
            rows.append({"case": i, "error": str(exc)})
            mismatches += 1
            continue
        bf = width_brute_force(G, cone, s_max)
        equal = dp == bf
        mismatches += not equal
        rows.append({"case": i, "dims": list(G.domain.dims), "aperture": cone.aperture, "s_max": s_max,
                     "dp": dp, "brute_force": bf, "equal": equal})
    n = len(rows)
    return CriterionResult(1, "oracle equivalence", mismatches == 0,
                           f"{n - mismatches}/{n} grids agree exactly", {"cases": rows}, limit=60)


# ---------------------------------------------------------------------------
# 2. width-function properties
# ---------------------------------------------------------------------------


def _ahead(a: np.ndarray, axis: int, t: int, fill):
    """out[x] = a[x + t e_axis], ``fill`` where that node does not exist."""
    out = np.full_like(a, fill)
    n = a.shape[axis]
    src = [slice(None)] * a.ndim
    dst = [slice(None)] * a.ndim
    if t >= 0:
        src[axis], dst[axis] = slice(t, n), slice(0, max(0, n - t))
    else:
        src[axis], dst[axis] = slice(0, max(0, n + t)), slice(-t, n)
    out[tuple(dst)] = a[tuple(src)]
    return out


def width_function_violations(G: GridSet, cone: Cone, s_max: int = 3, shifts=(1, 2, 4, 8)) -> dict:
    """Largest excess over each exact width-function bound, node-wise.

    The lateral slope uses the most transverse lattice step, whose cosine c
    with the axis gives tan(beta) = c / sqrt(1 - c^2). The cone axis must be
    a coordinate direction.
    """
    d = G.domain
    h = d.h
    axis = int(np.argmax(np.abs(cone.e)))
    sign = int(np.sign(cone.e[axis]))
    if not np.isclose(abs(cone.e[axis]), 1.0):
        raise ValueError("the property scan needs a coordinate axis")
    lateral = [a for a in range(d.n) if a != axis]
    steps = build_step_set(cone, s_max)
    c = steps.min_cosine
    tan_b = c / math.sqrt(1.0 - c * c) if c < 1 else 0.0
    V, _ = width_dp(G, steps)
    width = float(V.max())
    g = width_function_from_values(V, h, cone.e)
    gf = ScalarField(d, g)
    inside = G.node_interior_mask()
    out = {"width": width, "tan_beta": tan_b, "tolerance": 2 * h * (1 + 1 / cone.aperture)}
    out["range"] = max(0.0, float(-g.min()), float(g.max() - width))
    lat = 0.0
    for a in lateral:
        for k in (1, 2, -1, -2):
            y = _ahead(g, a, k, np.nan)
            ok = ~np.isnan(y)
            lat = max(lat, float(np.max(np.abs(y - g)[ok] - abs(k) * h * tan_b)))
    out["lateral"] = max(0.0, lat)
    mono = 0.0
    equal = 0.0
    for k in shifts:
        r = k * h
        y = _ahead(g, axis, sign * k, np.nan)
        ok = ~np.isnan(y)
        mono = max(mono, float(np.max((g - y)[ok])), float(np.max((y - g - r)[ok])))
        # [x, x + r e] lies in the open set when every node on it is interior
        seg = ok.copy()
        for j in range(k + 1):
            seg &= _ahead(inside, axis, sign * j, False)
        if seg.any():
            equal = max(equal, float(np.max(np.abs(y - g - r)[seg])))
    out["monotone"] = max(0.0, mono)
    out["unit_rate"] = equal
    out["lipschitz_value"] = gf.lipschitz()
    out["lipschitz"] = max(0.0, gf.lipschitz() - (1 + tan_b))
    return out


ITEMS = ("range", "lateral", "monotone", "unit_rate", "lipschitz")


def width_fixtures(h: float):
    d = GridDomain.box([0.0, 0.0], [1.0, 1.0], h)
    nodes = d.node_coords()
    disk = GridSet.from_node_mask(d, np.linalg.norm(nodes - 0.5, axis=-1) < 0.3)
    ell = GridSet.from_box(d, [0.1, 0.1], [0.4, 0.9]) | GridSet.from_box(d, [0.1, 0.1], [0.9, 0.4])
    line_cone = Cone((0.0, 1.0), 0.6)
    lines = gen_line_neighborhood_set(8, 0.2, line_cone, d)
    return [("disk", disk, Cone((0.0, 1.0), 0.7)), ("ell", ell, Cone((1.0, 0.0), 0.89)),
            ("lines", lines, line_cone)]


def criterion_2(spacings=(1 / 128, 1 / 256)) -> CriterionResult:
    results = {}
    ok = True
    for h in spacings:
        for name, G, cone in width_fixtures(h):
            v = width_function_violations(G, cone)
            results.setdefault(name, {})[repr(h)] = v
            ok &= all(v[item] <= v["tolerance"] for item in ITEMS)
    refine = {}
    for name, per_h in results.items():
        hs = sorted(per_h, key=float, reverse=True)
        for coarse, fine in zip(hs, hs[1:]):
            for item in ITEMS:
                worse = per_h[fine][item] > per_h[coarse][item] + 1e-12
                refine[f"{name}/{item}/{fine}"] = {"coarse": per_h[coarse][item], "fine": per_h[fine][item],
                                                     "ok": not worse}
                ok &= not worse
    worst = max(v[item] / v["tolerance"] for per_h in results.values() for v in per_h.values() for item in ITEMS)
    return CriterionResult(2, "width-function properties", bool(ok),
                           f"worst violation {worst:.3f} of tolerance; refinement "
                           f"{sum(r['ok'] for r in refine.values())}/{len(refine)} non-increasing",
                           {"fixtures": results, "refinement": refine}, limit=180)


# ---------------------------------------------------------------------------
# 3. mollified gluing
# ---------------------------------------------------------------------------


def kinked_fixture(h: float = 1 / 64):
    d = GridDomain.box([0.0, 0.0], [1.0, 1.0], h)
    c = np.array([0.5, 0.5])
    g = ScalarField.from_function(d, lambda X: np.linalg.norm(X - c, axis=-1))
    H = GridSet.from_node_mask(d, np.linalg.norm(d.node_coords() - c, axis=-1) < 0.3)
    return d, g, H


def criterion_3(h: float = 1 / 64) -> CriterionResult:
    d, g, H = kinked_fixture(h)
    Phi = VectorField.constant(d, [0.0, 0.0])
    xi = ScalarField.constant(d, 1.0)
    omega = ScalarField.constant(d, 0.05)
    f = mollify_glue(g, H, Phi, xi, omega)
    inside = H.node_interior_mask()
    active = inside & (xi.values > 0)
    off_equal = bool(np.array_equal(f.values[~active], g.values[~active]))
    gap = float(np.max(np.abs(f.values - g.values) - omega.values))
    bound = xi.values * (1 + omega.values) + 4 * h * g.lipschitz()
    dev = np.linalg.norm(f.fd_gradient() - Phi.values, axis=-1) - bound
    grad_excess = float(dev[inside].max())
    ok = off_equal and gap <= 0 and grad_excess <= 0
    return CriterionResult(3, "mollified gluing", ok,
                           f"off-set bit-equal={off_equal}, max(|f-g|-omega)={gap:.3g}, "
                           f"max gradient excess={grad_excess:.3g}",
                           {"off_set_equal": off_equal, "value_excess": gap, "gradient_excess": grad_excess,
                            "bumps": f.meta.get("bumps"), "h": h}, limit=60)


# ---------------------------------------------------------------------------
# 4. first construction
# ---------------------------------------------------------------------------


def criterion_4(h: float = 1 / 256, eps: float = 0.3, K: int = 3) -> CriterionResult:
    E = gen_cantor_product(1 / 3, 4)
    d = _unit_box(h)
    f, u = theorem4_build(E, eps, ScalarField.constant(d, 1.0), K, _lenient())
    trace = f.meta["trace"]
    lip = f.lipschitz()
    lip_bound = trace.meta["checks"]["lipschitz"]["bound"]
    unorm = float(np.linalg.norm(u, axis=1).max()) if len(u) else 0.0
    radii = 2.0 ** -np.arange(3, 9)
    e1 = np.array([1.0, 0.0])
    res_pass = []
    res_rows = []
    for x, ux in zip(E.points, u):
        mins = [residual_profile(f, x, ux + s * e1, radii).minimum for s in (1.0, -1.0)]
        res_rows.append(mins)
        res_pass.append(max(mins) <= 0.1)
    res_rate = float(np.mean(res_pass))
    gap = gap_report(f, E, [e1], slack=0.2)
    checks = {"a": lip <= lip_bound, "b": unorm <= eps, "c": res_rate >= 0.9,
              "d": gap.pass_rate >= 0.9}
    report = {
        "h": h, "eps": eps, "K": K, "lipschitz": lip, "lipschitz_bound": lip_bound, "max_u": unorm,
        "residual_minima": res_rows, "residual_pass_rate": res_rate, "gap_pass_rate": gap.pass_rate,
        "gaps": [[r.upper, r.lower, r.bound] for r in gap.rows], "checks": checks,
        "failed_stage_checks": trace.failed_checks(), "issue_count": len(trace.issues),
    }
    summary = (f"(a) Lip={lip:.3g}<= {lip_bound:.3g}: {checks['a']}; (b) max|u|={unorm:.3g}: {checks['b']}; "
               f"(c) residual rate={res_rate:.2f}: {checks['c']}; (d) gap rate={gap.pass_rate:.2f}: {checks['d']}")
    return CriterionResult(4, "first construction certificate", all(checks.values()), summary, report, limit=600)


# ---------------------------------------------------------------------------
# 5. second construction
# ---------------------------------------------------------------------------


def criterion_5(h: float = 1 / 256, K: int = 4) -> CriterionResult:
    E = gen_four_corner_cantor(4)
    d = _unit_box(h)
    f = theorem9_build(E, K, d, _lenient())
    lip = f.lipschitz()
    lip_bound = f.meta["checks"]["lipschitz"]["bound"] if K else 1.0
    per_dir = {}
    dir_ok = True
    for k in range(1, K + 1):
        e_k = ball_sequence(k, 2)
        eta_k = 2.0 ** (-k - 1)
        mins = [residual_profile(f, x, e_k).minimum for x in E.points]
        rate = float(np.mean([m <= eta_k + 0.05 for m in mins]))
        per_dir[k] = {"direction": e_k, "eta": eta_k, "pass_rate": rate, "minima": mins}
        dir_ok &= rate >= 0.9
    gaps = {}
    gap_ok = True
    for y in ((1.0, 0.0), (0.0, 1.0)):
        vals = [dini_derivatives(f, x, y).gap for x in E.points]
        rate = float(np.mean([v >= 2 - 0.3 for v in vals]))
        gaps[str(y)] = {"pass_rate": rate, "gaps": vals}
        gap_ok &= rate >= 0.8
    lip_ok = lip <= lip_bound
    report = {"h": h, "K": K, "lipschitz": lip, "lipschitz_bound": lip_bound, "directions": per_dir,
              "dini": gaps, "steps": [{k: v for k, v in s.items() if k != "trace"} for s in f.meta["steps"]],
              "issue_count": len(f.meta["issues"])}
    rates = ", ".join(f"{per_dir[k]['pass_rate']:.2f}" for k in per_dir)
    summary = (f"Lip={lip:.3g}<={lip_bound:.3g}: {lip_ok}; residual rates [{rates}]: {dir_ok}; "
               f"dini gap rates {[round(g['pass_rate'], 2) for g in gaps.values()]}: {gap_ok}")
    return CriterionResult(5, "second construction certificate", lip_ok and dir_ok and gap_ok, summary, report,
                           limit=600)


# ---------------------------------------------------------------------------
# 6. stage selection
# ---------------------------------------------------------------------------


def _normal_directions(E: PointCloud, index: int) -> list:
    """Unit members of the normal set used for the density scan."""
    nrm = E.normals[index]
    if np.isnan(nrm).any():
        ang = np.arange(8) * np.pi / 4
        return [np.array([math.cos(a), math.sin(a)]) for a in ang]
    return [nrm, -nrm]


def criterion_6(h: float = 1 / 32) -> CriterionResult:
    d = _unit_box(h)
    fixtures = [("cantor_product", gen_cantor_product(1 / 3, 4), 0.3, 4),
                ("four_corner", gen_four_corner_cantor(3), 0.3, 3)]
    report = {}
    ok = True
    for name, E, eps, i_max in fixtures:
        stages = select_stages(E, eps, i_max, d, _lenient())
        cover = stage_cover_sum(stages, d)
        taus = {lv["level"]: lv["tau_i"] for lv in stages.meta["levels"]}
        sigma_exact = all(st.sigma == 3.0 ** (-2) * (eps * 2.0 ** -st.provenance[0]) ** 3 / 3 for st in stages)
        sigma_exact &= all(st.sigma == taus[st.provenance[0]] for st in stages)
        eta = 2 * eps * 2.0 ** -i_max
        top = [st for st in stages if st.provenance[0] == i_max]
        phis = np.stack([st.phi_at(E.points) for st in top], axis=1) if top else np.zeros((len(E), 0))
        dirs = np.array([st.direction for st in top]).reshape(-1, 2)
        misses = 0
        for i in range(len(E)):
            for e in _normal_directions(E, i):
                close = np.linalg.norm(dirs - e, axis=1) < eta
                hit = close & (phis[i] >= 1.0) & np.array([st.sigma < eta for st in top], dtype=bool)
                misses += not hit.any()
        cover_ok = float(cover.max()) <= eps
        good = cover_ok and sigma_exact and misses == 0
        ok &= good
        report[name] = {"eps": eps, "i_max": i_max, "stages": len(stages), "cover_max": float(cover.max()),
                        "sigma_exact": sigma_exact, "density_eta": eta, "density_misses": misses,
                        "overlap": max(st.partition.overlap for st in stages) if len(stages) else 0}
    summary = "; ".join(f"{k}: cover {v['cover_max']:.3g}<={v['eps']}, sigma exact={v['sigma_exact']}, "
                        f"density misses={v['density_misses']}" for k, v in report.items())
    return CriterionResult(6, "stage selection", ok, summary, report, limit=60)


# ---------------------------------------------------------------------------
# 7. graph-family counterexample
# ---------------------------------------------------------------------------


def criterion_7(h: float = 1 / 64, slack: float = 0.05) -> CriterionResult:
    E = gen_graph_family(8, 33)
    d = GridDomain.box([-1.25, -1.25], [1.25, 1.25], h)
    const = ScalarField.constant(d, 0.0)
    lin = ScalarField.from_function(d, lambda X: X[..., 1])
    built = theorem9_build(E, 2, d, _lenient(), probe=False)
    lip = built.lipschitz()
    rescaled = ScalarField(d, built.values / max(1.0, lip))
    report = {}
    ok = True
    for name, f in (("constant", const), ("linear", lin), ("built", rescaled)):
        res = example_e_check(f, E)
        passed = res.minimum < 1 - slack
        ok &= passed
        report[name] = {"minimum": res.minimum, "point": res.point, "passed": passed}
    report["built_lipschitz_before_rescale"] = lip
    summary = ", ".join(f"{k} min={v['minimum']:.3g}" for k, v in report.items() if isinstance(v, dict))
    return CriterionResult(7, "graph-family check", ok, summary, report, limit=120)


# ---------------------------------------------------------------------------
# 8. joining accepted directions
# ---------------------------------------------------------------------------


def _join_check(E, probes, dirs, eps_list, r_list, **kw) -> list:
    """Accepted pairs at threshold 0.1 and whether their normalized sums pass at 0.25."""
    rows = []
    for x in probes:
        base = estimate_normal_cone(E, x, eps_list, r_list, dirs, 0.1, **kw)
        acc = [np.asarray(a) for a in base.accepted]
        pairs, joined = [], []
        for i in range(len(acc)):
            for j in range(i + 1, len(acc)):
                s = acc[i] + acc[j]
                if np.linalg.norm(s) < 1e-9:
                    continue
                pairs.append((acc[i], acc[j]))
                joined.append(s / np.linalg.norm(s))
        verdicts = []
        if joined:
            relaxed = estimate_normal_cone(E, x, eps_list, r_list, np.array(joined), 0.25, **kw)
            verdicts = [relaxed.is_accepted(v) for v in joined]
        same_side = [bool(a @ b > 0) for a, b in pairs]
        rows.append({"point": x, "accepted": acc, "pairs": len(pairs), "joined_accepted": verdicts,
                     "same_half_plane": same_side})
    return rows


def criterion_8() -> CriterionResult:
    """Joined directions, as specified (neighborhood r/4, threshold 0.1).

    With an r/4 thickening every nonempty local set has width near r/2, so
    nothing is accepted at 0.1 r and the implication holds vacuously. A
    supplementary run with an r/64 thickening, where acceptances do occur,
    is attached to the report but does not decide the verdict.
    """
    E = gen_cantor_product(1 / 3, 4)
    ang = np.arange(8) * np.pi / 4
    dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    probe_idx = [0, 40, 140, 271]
    eps_list, r_list = [0.5], [1 / 16, 1 / 32]
    rows = _join_check(E, E.points[probe_idx], dirs, eps_list, r_list)
    ok = all(all(r["joined_accepted"]) for r in rows)
    n_pairs = sum(r["pairs"] for r in rows)

    E2 = gen_cantor_product(1 / 3, 4, y_samples=257)
    ang2 = np.arange(24) * np.pi / 12
    dirs2 = np.stack([np.cos(ang2), np.sin(ang2)], axis=1)
    idx2 = [0, len(E2) // 2, 1000]
    r2 = [1 / 32, 1 / 64]
    rows2 = _join_check(E2, E2.points[idx2], dirs2, eps_list, r2, cells_per_radius=256, inner_fraction=1 / 64)

    def tally(rows, same):
        v = [a for r in rows for a, s in zip(r["joined_accepted"], r["same_half_plane"]) if s == same]
        return sum(v), len(v)

    s_ok, s_n = tally(rows2, True)
    c_ok, c_n = tally(rows2, False)
    summary = (f"{sum(sum(r['joined_accepted']) for r in rows)}/{n_pairs} joined directions accepted"
               + (" (no accepted pairs: vacuous)" if n_pairs == 0 else "")
               + f"; thin-neighborhood run: same half-plane {s_ok}/{s_n}, opposite {c_ok}/{c_n}")
    report = {"probes": rows, "eps": eps_list, "radii": r_list,
              "supplementary": {"y_samples": 257, "inner_fraction": 1 / 64, "cells_per_radius": 256,
                                "radii": r2, "probes": rows2, "same_half_plane": [s_ok, s_n],
                                "opposite_half_plane": [c_ok, c_n]}}
    return CriterionResult(8, "joined directions", ok, summary, report, limit=180)


# ---------------------------------------------------------------------------
# 9. determinism
# ---------------------------------------------------------------------------


def criterion_9(first: Optional[dict] = None) -> CriterionResult:
    """Repeat criteria 1, 4 and 5 and compare report bytes with a first run."""
    first = dict(first or {})
    same = {}
    for n in (1, 4, 5):
        if n not in first:
            first[n] = CRITERIA[n]().report_bytes()
        again = CRITERIA[n]().report_bytes()
        same[n] = again == first[n]
    return CriterionResult(9, "determinism", all(same.values()),
                           ", ".join(f"criterion {k} identical={v}" for k, v in same.items()), {"identical": same})


CRITERIA: dict = {1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4, 5: criterion_5,
                  6: criterion_6, 7: criterion_7, 8: criterion_8, 9: criterion_9}


def run_criterion(n: int, out_dir=None, **kwargs) -> CriterionResult:
    t0 = time.perf_counter()
    res = CRITERIA[n](**kwargs)
    res.seconds = time.perf_counter() - t0
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"criterion_{n}.json").write_bytes(res.report_bytes())
    return res


def run_all(numbers=None, out_dir=None, echo: Optional[Callable[[str], None]] = None) -> list:
    numbers = sorted(CRITERIA) if numbers is None else list(numbers)
    results = []
    first = {}
    for n in numbers:
        if n == 9:
            res = run_criterion(9, out_dir, first=first)
        else:
            res = run_criterion(n, out_dir)
            if n in (1, 4, 5):
                first[n] = res.report_bytes()
        results.append(res)
        if echo:
            echo(format_line(res))
    return results
