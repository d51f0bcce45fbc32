"""Lipschitz functions assembled from width functions.

The constructions are layered:

* ``lemma1_build`` glues width functions of thin neighborhoods of E with a
  bump partition, giving a function whose gradient is close to a fixed
  direction near E while staying small.
* ``lemma2_build`` stacks such functions along the level sets of a cut-off
  ``phi`` (the staircase) and smooths the result with ``mollify_glue``.
* ``run_recursion`` chains staircases stage by stage, shrinking the budget
  field with ``modulus_field``.
* ``theorem4_build`` and ``theorem9_build`` drive the recursion with stage
  lists from ``select_stages`` or from the per-step refinement in ``lemma_u``.

Every builder takes a ``BuildConfig``. With ``strict=True`` an unmet
precondition (width budget, coverage) raises ``BuildError``; with
``strict=False`` the builder continues with the closest admissible choice
and records the shortfall under ``meta["issues"]``.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .fields import ScalarField, VectorField, interpolate
from .geometry import Cone, GridDomain, GridSet, PointCloud, as_vec, distance_to_complement, neighborhood, rho_field
from .width import build_step_set, width_dp, width_function_from_values, width_open

__all__ = [
    "ScalarField",
    "VectorField",
    "BuildConfig",
    "BuildError",
    "BumpPartition",
    "StageConfig",
    "StageList",
    "TraceEntry",
    "BuildTrace",
    "bump_profile",
    "tau_of_sigma",
    "positive_set",
    "build_partition",
    "mollify_glue",
    "modulus_field",
    "lemma1_build",
    "lemma2_build",
    "select_stages",
    "stage_cover_sum",
    "run_recursion",
    "lemma_u",
    "theorem4_build",
    "theorem9_build",
    "ball_sequence",
    "zahorski_sum",
]


class BuildError(RuntimeError):
    """A construction step could not meet its requirements."""

    def __init__(self, message: str, details: Optional[dict] = None, trace=None):
        super().__init__(message)
        self.details = details or {}
        self.trace = trace


@dataclass(frozen=True)
class BuildConfig:
    """Discretization knobs shared by the builders.

    radius_cells: ladder of neighborhood radii (in units of h) tried for each
        thin neighborhood, smallest first.
    partition_floor: bump weights are b_k / max(S, floor); the weights sum to
        one wherever the raw bump sum S reaches the floor.
    """

    s_max: int = 3
    theta: float = 0.9
    radius_cells: tuple = (1.5, 3.0, 6.0, 12.0)
    max_bump_radius: float = 0.25
    partition_floor: float = 0.5
    max_bumps_per_build: int = 4096
    partition_max_bumps: int = 64
    width_threshold: float = 0.1
    precondition_slack: float = 0.1
    bisection_steps: int = 12
    max_stage_builds: int = 64
    strict: bool = True

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


class _Log:
    def __init__(self, strict: bool):
        self.strict = strict
        self.issues: list = []

    def fail(self, message: str, **details):
        if self.strict:
            raise BuildError(message, details)
        self.issues.append({"message": message, **details})

    def extend(self, issues, **context):
        for item in issues:
            self.issues.append({**item, **context})


def _check(value: float, bound: float) -> dict:
    return {"value": float(value), "bound": float(bound), "ok": bool(value <= bound)}


def bump_profile(t) -> np.ndarray:
    """exp(1 - 1/(1 - t^2)) for |t| < 1 and 0 otherwise; equals 1 at t = 0."""
    t = np.asarray(t, dtype=np.float64)
    out = np.zeros_like(t)
    inside = np.abs(t) < 1.0
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - t[inside] ** 2))
    return out


def tau_of_sigma(sigma: float) -> float:
    """Cone aperture used with staircase accuracy ``sigma``: sin(arctan(sigma / 15))."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    return math.sin(math.atan(sigma / 15.0))


def positive_set(f: ScalarField) -> GridSet:
    """Cells on whose closure the interpolant of ``f`` is positive (all corners > 0)."""
    return GridSet.from_node_mask(f.domain, f.values > 0)


def _cells_all(domain: GridDomain, node_mask: np.ndarray) -> np.ndarray:
    occ = np.ones(domain.cell_shape, dtype=bool)
    for corner in itertools.product((0, 1), repeat=domain.n):
        occ &= node_mask[tuple(slice(c, c + s) for c, s in zip(corner, domain.cell_shape))]
    return occ


def _cells_reduce(domain: GridDomain, values: np.ndarray, op) -> np.ndarray:
    parts = [values[tuple(slice(c, c + s) for c, s in zip(corner, domain.cell_shape))]
             for corner in itertools.product((0, 1), repeat=domain.n)]
    return op.reduce(parts)


def _bump_window(domain: GridDomain, center: np.ndarray, radius: float, pad: int = 1):
    """Node slices around a ball and the raw bump values on them."""
    h = domain.h
    shape = np.asarray(domain.node_shape)
    u = (center - domain.lower) / h
    lo = np.clip(np.ceil(u - radius / h - 1e-9).astype(np.int64) - pad, 0, shape - 1)
    hi = np.clip(np.floor(u + radius / h + 1e-9).astype(np.int64) + pad, 0, shape - 1)
    axes = [domain.lower[a] + h * np.arange(lo[a], hi[a] + 1) - center[a] for a in range(domain.n)]
    grids = np.meshgrid(*axes, indexing="ij")
    dist = np.sqrt(sum(g * g for g in grids))
    sl = tuple(slice(int(a), int(b) + 1) for a, b in zip(lo, hi))
    return sl, bump_profile(dist / radius) if radius > 0 else np.zeros(dist.shape), dist


@dataclass(frozen=True, eq=False)
class BumpPartition:
    """Radial bumps b((x - c_k) / R_k) with normalized weights.

    With ``floor=None`` the weights are b_k / S on the union of supports
    (S the raw bump sum). With a floor they are b_k / max(S, floor), which
    keeps them continuous and sums to one where S >= floor.
    """

    domain: GridDomain
    centers: np.ndarray
    radii: np.ndarray
    overlap: int
    floor: Optional[float] = None

    def __len__(self) -> int:
        return int(len(self.radii))

    def window(self, k: int):
        sl, vals, _ = _bump_window(self.domain, self.centers[k], float(self.radii[k]))
        return sl, vals

    def total(self) -> np.ndarray:
        S = np.zeros(self.domain.node_shape)
        for k in range(len(self)):
            sl, vals = self.window(k)
            S[sl] += vals
        return S

    def _denominator(self, S: np.ndarray) -> np.ndarray:
        if self.floor is None:
            return np.where(S > 0, S, 1.0)
        return np.maximum(S, self.floor)

    def weight(self, k: int, total: Optional[np.ndarray] = None) -> np.ndarray:
        S = self.total() if total is None else total
        out = np.zeros(self.domain.node_shape)
        sl, vals = self.window(k)
        out[sl] = vals / self._denominator(S[sl])
        return out

    def weights_sum(self) -> np.ndarray:
        S = self.total()
        return np.where(S > 0, S / self._denominator(S), 0.0)

    def raw_at(self, pts) -> np.ndarray:
        """Exact raw bump values at points, shape (m, K)."""
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, self.domain.n)
        if not len(self):
            return np.zeros((len(pts), 0))
        dist = np.linalg.norm(pts[:, None, :] - self.centers[None, :, :], axis=-1)
        return bump_profile(dist / self.radii[None, :])

    def weights_at(self, pts) -> np.ndarray:
        """Exact normalized weights at points, shape (m, K)."""
        B = self.raw_at(pts)
        S = B.sum(axis=1, keepdims=True)
        return B / self._denominator(S)

    def support_count(self) -> np.ndarray:
        """Number of bumps whose open support contains each node."""
        count = np.zeros(self.domain.node_shape, dtype=np.int64)
        for k in range(len(self)):
            sl, vals = self.window(k)
            count[sl] += vals > 0
        return count


def build_partition(carriers: Sequence, domain: Optional[GridDomain] = None, floor: Optional[float] = None,
                    points=None) -> BumpPartition:
    """Bump partition from (center, radius, carrier) triples.

    Each open ball B(center, radius) must lie inside its carrier (a GridSet,
    or None to skip the check). ``points``, if given, must each lie in the
    support of some bump.
    """
    centers, radii = [], []
    for center, radius, carrier in carriers:
        c = as_vec(center)
        if not radius > 0:
            raise ValueError("bump radius must be positive")
        if carrier is not None:
            domain = domain or carrier.domain
            if distance_to_complement(carrier, c) < radius:
                raise ValueError(f"ball at {c.tolist()} of radius {radius:g} is not inside its carrier")
        centers.append(c)
        radii.append(float(radius))
    if domain is None:
        raise ValueError("a domain is needed when no carrier is given")
    part = BumpPartition(domain, np.asarray(centers, dtype=np.float64).reshape(-1, domain.n),
                         np.asarray(radii, dtype=np.float64), 0, floor)
    count = part.support_count()
    part = replace(part, overlap=int(count.max()) if len(part) else 0)
    if points is not None:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, domain.n)
        gaps = np.flatnonzero(part.raw_at(pts).sum(axis=1) <= 0)
        if gaps.size:
            raise ValueError(f"points not covered by any bump: {pts[gaps].tolist()}")
    return part


# ---------------------------------------------------------------------------
# Mollified gluing and modulus fields
# ---------------------------------------------------------------------------


def _kernel(s: float, h: float, n: int) -> np.ndarray:
    r = int(math.ceil(s / h))
    axes = [np.arange(-r, r + 1) * h] * n
    grids = np.meshgrid(*axes, indexing="ij")
    dist = np.sqrt(sum(g * g for g in grids))
    K = bump_profile(dist / s)
    return K / K.sum()


def _expanded(sl, pad: int, shape):
    lo = [max(0, s.start - pad) for s in sl]
    hi = [min(n, s.stop + pad) for s, n in zip(sl, shape)]
    inner = tuple(slice(s.start - a, s.start - a + (s.stop - s.start)) for s, a in zip(sl, lo))
    return tuple(slice(a, b) for a, b in zip(lo, hi)), inner


def mollify_glue(g: ScalarField, H: GridSet, Phi: VectorField, xi: ScalarField, omega: ScalarField, *,
                 theta: float = 0.9, bisection_steps: int = 12, slack: float = 0.1,
                 strict: bool = True) -> ScalarField:
    """Smooth ``g`` patch-wise inside H where xi > 0, keeping |f - g| <= omega.

    Nodes of H with xi * omega > 0 are covered greedily (largest local budget
    first) by bumps of radius theta * w0, w0 = min(1, xi*omega, omega, rho^2)/2.
    Bump k carries g mollified at a scale found by bisection so that
    |f_k - g| <= 2^(-k-1) w0 / m_k and |f_k' - Phi| <= xi + w0 on its support,
    where m_k = 1 + max |grad phi_k|. Off those nodes f equals g exactly.
    """
    d = g.domain
    h = d.h
    log = _Log(strict)
    inside = H.node_interior_mask()
    grad = g.fd_gradient()
    dev = np.linalg.norm(grad - Phi.values, axis=-1)
    excess = np.where(inside, dev - (1.0 + slack) * xi.values, -np.inf)
    if inside.any() and excess.max() > 1e-12:
        idx = np.unravel_index(int(np.argmax(excess)), excess.shape)
        log.fail("gradient precondition violated", node=[int(i) for i in idx],
                 deviation=float(dev[idx]), xi=float(xi.values[idx]))
    U = inside & (xi.values > 0) & (omega.values > 0)
    meta = {"bumps": 0, "issues": log.issues}
    if not U.any():
        return ScalarField(d, g.values.copy(), meta)
    rhoU = ndimage.distance_transform_edt(U) * h
    w0 = np.where(U, 0.5 * np.minimum.reduce([np.ones(d.node_shape), xi.values * omega.values,
                                              omega.values, rhoU ** 2]), 0.0)
    flat = np.flatnonzero(U)
    order = flat[np.lexsort((flat, -w0.reshape(-1)[flat]))]
    covered = np.zeros(d.node_shape, dtype=bool)
    windows = []
    for f_idx in order:
        if covered.flat[f_idx]:
            continue
        idx = np.unravel_index(int(f_idx), d.node_shape)
        c = d.node(idx)
        R = theta * float(w0[idx])
        sl, vals, _ = _bump_window(d, c, R)
        covered[sl] |= vals > 0
        covered[idx] = True
        windows.append((sl, vals, R))
    S = np.zeros(d.node_shape)
    for sl, vals, _ in windows:
        S[sl] += vals
    gv = g.values
    acc = np.zeros(d.node_shape)
    scales = []
    for kk, (sl, vals, R) in enumerate(windows, start=1):
        supp = vals > 0
        w = np.where(supp, vals / np.where(S[sl] > 0, S[sl], 1.0), 0.0)
        wg = np.gradient(w, h) if min(w.shape) > 1 else [np.zeros_like(w)] * d.n
        m_k = 1.0 + float(np.sqrt(sum(c * c for c in wg)).max())
        bound1 = 2.0 ** (-kk - 1) / m_k * w0[sl]
        bound2 = xi.values[sl] + w0[sl]
        g_loc = gv[sl]
        phi_loc = Phi.values[sl]

        def mollified(s):
            K = _kernel(s, h, d.n)
            r = K.shape[0] // 2
            big, inner = _expanded(sl, r, d.node_shape)
            return ndimage.correlate(gv[big], K, mode="nearest")[inner]

        def admissible(fk):
            if np.any(np.abs(fk - g_loc)[supp] > bound1[supp]):
                return False
            fg = np.stack(np.gradient(fk, h), axis=-1) if min(fk.shape) > 1 else np.zeros(fk.shape + (d.n,))
            return not np.any(np.linalg.norm(fg - phi_loc, axis=-1)[supp] > bound2[supp])

        s = 0.0
        fk = g_loc
        if R > h and bound1[supp].max() > 0:
            cand = mollified(R)
            if admissible(cand):
                s, fk = R, cand
            else:
                lo, hi = 0.0, R
                best = None
                for _ in range(bisection_steps):
                    mid = 0.5 * (lo + hi)
                    if mid <= h:
                        lo = mid
                        continue
                    cand = mollified(mid)
                    if admissible(cand):
                        lo, best = mid, cand
                    else:
                        hi = mid
                if best is not None:
                    s, fk = lo, best
        scales.append(s)
        acc[sl] += np.where(supp, w * fk, 0.0)
    out = gv.copy()
    out[U] = acc[U]
    meta.update({"bumps": len(windows), "mollified_bumps": int(sum(s > 0 for s in scales)),
                 "max_scale": float(max(scales)) if scales else 0.0})
    return ScalarField(d, out, meta)


def modulus_field(g: ScalarField, H: GridSet, omega: ScalarField, eta: float) -> ScalarField:
    """xi = eta * phi / 12 on H, where phi(x) is the largest dyadic radius h*2^m
    (capped at min(rho_H, omega, 1)/2) over which the finite-difference
    gradient of g varies by at most eta/2 within H.

    The oscillation is measured on the enclosing square, which can only
    overestimate it, so phi is conservative.
    """
    if not (0 < eta <= 1):
        raise ValueError("eta must lie in (0, 1]")
    d = g.domain
    h = d.h
    inside = H.node_interior_mask()
    if not inside.any():
        return ScalarField(d, np.zeros(d.node_shape), {"radius": np.zeros(d.node_shape)})
    cap = np.where(inside, 0.5 * np.minimum(np.minimum(rho_field(H), omega.values), 1.0), 0.0)
    grad = g.fd_gradient()
    best = np.where(inside, h, 0.0)
    alive = inside.copy()
    cap_max = float(cap.max())
    m = 1
    while alive.any() and h * 2 ** (m - 1) < cap_max:
        r = h * 2 ** m
        half = int(math.ceil(r / h)) - 1
        size = 2 * half + 1
        osc2 = np.zeros(d.node_shape)
        for a in range(d.n):
            comp = grad[..., a]
            hi = ndimage.maximum_filter(np.where(inside, comp, -np.inf), size=size, mode="constant", cval=-np.inf)
            lo = ndimage.minimum_filter(np.where(inside, comp, np.inf), size=size, mode="constant", cval=np.inf)
            osc2 += (hi - lo) ** 2
        alive &= np.sqrt(osc2) <= eta / 2
        best[alive] = r
        m += 1
    phi = np.where(inside, np.minimum(cap, best), 0.0)
    return ScalarField(d, np.where(inside, eta * phi / 12.0, 0.0), {"radius": phi})


# ---------------------------------------------------------------------------
# Glued width functions
# ---------------------------------------------------------------------------


def _local_width_function(G_occ: np.ndarray, sl, domain: GridDomain, steps, cache: Optional[dict]):
    """Width function of the grid set ``G_occ`` on the node window ``sl``.

    The dynamic program runs on a box around the set and the window, widened
    until the forward ray search cannot leave it before its gain is spent.
    """
    cells = np.argwhere(G_occ)
    win_shape = tuple(s.stop - s.start for s in sl)
    if not len(cells):
        return np.zeros(win_shape), 0.0
    h = domain.h
    node_shape = np.asarray(domain.node_shape)
    s_max = steps.max_radius
    lo0 = np.minimum(cells.min(axis=0), [s.start for s in sl])
    hi0 = np.maximum(cells.max(axis=0) + 1, [s.stop - 1 for s in sl])
    margin = s_max + 2
    while True:
        lo = np.maximum(lo0 - margin, 0)
        hi = np.minimum(hi0 + margin, node_shape - 1)
        cell_sl = tuple(slice(int(a), int(b)) for a, b in zip(lo, hi))
        occ = G_occ[cell_sl]
        key = None
        if cache is not None:
            key = (tuple(lo), tuple(hi), steps.steps, steps.cone.axis, occ.tobytes())
        if key is not None and key in cache:
            gwin, vmax = cache[key]
        else:
            sub = GridDomain(tuple(domain.lower + h * lo), h, tuple(int(v) for v in hi - lo), padding=0)
            V, _ = width_dp(GridSet(sub, occ), steps)
            vmax = float(V.max())
            gwin = width_function_from_values(V, h, steps.cone.e)
            if cache is not None:
                cache[key] = (gwin, vmax)
        reach_ok = vmax <= (margin - s_max - 1) * h or (np.all(lo == 0) and np.all(hi == node_shape - 1))
        if reach_ok:
            break
        margin = s_max + 2 + int(math.ceil(vmax / h))
    inner = tuple(slice(s.start - int(a), s.stop - int(a)) for s, a in zip(sl, lo))
    return gwin[inner], vmax


def _cover_near_points(points: np.ndarray, domain: GridDomain, rho: np.ndarray, cfg: BuildConfig, log: _Log):
    """Greedy node-centered bumps until the raw bump sum reaches the floor at
    every corner of every cell holding a point."""
    h = domain.h
    n = domain.n
    S = np.zeros(domain.node_shape)
    centers, radii, windows = [], [], []
    taken = set()
    shape = np.asarray(domain.node_shape)
    uncovered = 0
    for p in points:
        u = (p - domain.lower) / h
        base = np.floor(u).astype(np.int64)
        corners = [tuple(int(v) for v in base + np.asarray(c)) for c in itertools.product((0, 1), repeat=n)]
        nearest = tuple(int(v) for v in np.clip(np.rint(u).astype(np.int64), 0, shape - 1))
        for c in [nearest] + corners:
            if all(S[q] >= cfg.partition_floor for q in corners):
                break
            if c in taken or rho[c] <= 0:
                continue
            if len(centers) >= cfg.max_bumps_per_build:
                break
            R = min(cfg.max_bump_radius, cfg.theta * float(rho[c]))
            center = domain.node(c)
            sl, vals, dist = _bump_window(domain, center, R)
            S[sl] += vals
            taken.add(c)
            centers.append(center)
            radii.append(R)
            windows.append((sl, vals, dist))
        if not all(S[q] >= cfg.partition_floor for q in corners):
            uncovered += 1
    if len(centers) >= cfg.max_bumps_per_build:
        log.fail("bump budget exhausted", max_bumps=cfg.max_bumps_per_build)
    return centers, radii, windows, S, uncovered


def lemma1_build(E: PointCloud, e, omega: ScalarField, eps: float, widths_cfg: Optional[BuildConfig] = None, *,
                 G: Optional[GridSet] = None, cache: Optional[dict] = None):
    """Glue width functions of thin neighborhoods of E into g with g' close to e.

    Returns (g, H). ``G`` is the open set {omega > 0}; it defaults to the
    cells where omega is positive at every corner. Each bump k gets a width
    budget eps_k with sum_k eps_k |grad phi_k| <= eps/2 and
    eps_k phi_k <= min(1, rho_G^2, omega) / M (M the measured overlap), and a
    neighborhood G_k of the nearby points of E, the widest on the radius
    ladder whose width stays below eps_k. H keeps the cells of G where the
    weights sum to one and every bump touching the cell has it in its G_k.
    """
    cfg = widths_cfg or BuildConfig()
    log = _Log(cfg.strict)
    d = omega.domain
    h = d.h
    n = d.n
    e = as_vec(e, n)
    if abs(float(np.linalg.norm(e)) - 1.0) > 1e-9:
        raise ValueError("e must be a unit vector")
    if not eps > 0:
        raise ValueError("eps must be positive")
    tau = tau_of_sigma(7.0 * eps)
    steps = build_step_set(Cone.from_direction(e, tau), cfg.s_max)
    if G is None:
        G = positive_set(omega)
    tol = 2 * h * (1 + 1 / tau)
    meta = {"eps": float(eps), "tau": tau, "tolerance": tol, "issues": log.issues}
    pts_mask = G.contains_points(E.points) if len(E) else np.zeros(0, dtype=bool)
    EG = E.points[pts_mask]
    if not len(EG):
        meta.update({"bumps": 0, "points": 0})
        return ScalarField(d, np.zeros(d.node_shape), meta), GridSet.empty(d)
    rho = rho_field(G)
    budget_field = np.minimum(np.minimum(1.0, rho ** 2), omega.values)
    centers, radii, windows, S, uncovered = _cover_near_points(EG, d, rho, cfg, log)
    floor = cfg.partition_floor
    # overlap counted on supports widened by one node so interpolation stays inside
    count = np.zeros(d.node_shape, dtype=np.int64)
    for (sl, vals, dist), R in zip(windows, radii):
        count[sl] += dist < R + h
    M = max(1, int(count.max())) if windows else 1
    radii_ladder = sorted(r * h for r in cfg.radius_cells)
    gval = np.zeros(d.node_shape)
    H_occ = G.occupancy & _cells_all(d, S >= floor - 1e-12)
    shortfalls = []
    chosen_radii = []
    for k, ((sl, vals, dist), R, c) in enumerate(zip(windows, radii, centers)):
        supp = vals > 0
        w = np.where(supp, vals / np.maximum(S[sl], floor), 0.0)
        wg = np.gradient(w, h) if min(w.shape) > 1 else [np.zeros_like(w)] * n
        grad_max = float(np.sqrt(sum(a * a for a in wg)).max())
        b1 = 0.999 * (eps / 2) / (M * grad_max) if grad_max > 0 else math.inf
        with np.errstate(divide="ignore"):
            b2 = float(np.min(budget_field[sl][supp] / (M * w[supp])))
        budget = min(b1, b2)
        dists = np.linalg.norm(EG - c, axis=1)
        picked = None
        measured = []
        for r in radii_ladder:
            local = EG[dists < R + r + h]
            if not len(local):
                picked = (r, np.zeros(G.occupancy.shape, dtype=bool), np.zeros(w.shape), 0.0)
                break
            Gk = neighborhood(PointCloud(local), r, d).occupancy & G.occupancy
            gk, vmax = _local_width_function(Gk, sl, d, steps, cache)
            measured.append([float(r), vmax])
            if vmax < budget:
                picked = (r, Gk, gk, vmax)
                continue
            if picked is None:
                shortfalls.append({"bump": k, "budget": budget, "widths": measured})
                picked = (r, Gk, gk, vmax)
            break
        r, Gk, gk, vmax = picked
        chosen_radii.append(r)
        csl = tuple(slice(s.start, max(s.start, s.stop - 1)) for s in sl)
        if vmax >= budget:
            # over budget: cap at the budget so size and slope bounds survive,
            # and give up the cells where the cap is active
            capped = gk >= budget
            gk = np.minimum(gk, budget)
            if capped.any() and min(capped.shape) > 1:
                win = GridDomain(tuple(d.lower), h, tuple(s - 1 for s in capped.shape), padding=0)
                H_occ[csl] &= ~_cells_reduce(win, capped, np.logical_or)
        gval[sl] += w * gk
        # cells meeting the closed support must lie in G_k
        cell_lo = d.lower + h * np.asarray([s.start for s in csl])
        axes = [cell_lo[a] + h * np.arange(csl[a].stop - csl[a].start) for a in range(n)]
        grids = np.meshgrid(*axes, indexing="ij")
        gap2 = sum(np.maximum(np.maximum(g0 - c[a], c[a] - (g0 + h)), 0.0) ** 2 for a, g0 in enumerate(grids))
        touch = gap2 <= R * R
        H_occ[csl] &= ~touch | Gk[csl]
    if shortfalls:
        worst = max(shortfalls, key=lambda s: s["widths"][0][1] / max(s["budget"], 1e-300) if s["widths"] else 0)
        log.fail("width budget unattainable at the configured radii", bumps=len(shortfalls),
                 of=len(windows), worst=worst)
    H = GridSet(d, H_occ)
    missing = int((~H.contains_points(EG)).sum())
    if uncovered or missing:
        log.fail("sample points left outside H", missing=missing, uncovered=uncovered, points=len(EG))
    g = ScalarField(d, gval)
    checks = {
        "g_le_omega": _check(float(np.max(gval - omega.values)), 0.0),
        "g_nonneg": _check(float(-gval.min()), 0.0),
        "lipschitz": _check(g.lipschitz(), 1 + eps + tol),
    }
    hin = H.node_interior_mask()
    if hin.any():
        gd = np.linalg.norm(g.fd_gradient() - e, axis=-1)[hin]
        checks["gradient_on_H"] = _check(float(gd.max()), eps + tol)
    meta.update({"bumps": len(windows), "points": int(len(EG)), "overlap": M, "checks": checks,
                 "radii_used": sorted(set(chosen_radii))})
    return ScalarField(d, gval, meta), H


# ---------------------------------------------------------------------------
# Staircase
# ---------------------------------------------------------------------------


def _staircase_count(sigma: float) -> int:
    k = math.ceil(6.0 / sigma)
    if k > 7.0 / sigma:
        k = math.floor(7.0 / sigma)
    return int(k)


def _width_precondition(E: PointCloud, mask: np.ndarray, cone: Cone, domain: GridDomain, cfg: BuildConfig):
    pts = E.points[mask]
    if not len(pts):
        return 0.0, 0.0
    r = min(cfg.radius_cells) * domain.h
    G = neighborhood(PointCloud(pts), r, domain)
    value = width_open(G, cone, cfg.s_max).value
    span = pts.max(axis=0) - pts.min(axis=0)
    scale = max(float(np.linalg.norm(span)) + 2 * r, 2 * r)
    return value, scale


def lemma2_build(E: PointCloud, omega: ScalarField, phi: ScalarField, e, sigma: float,
                 widths_cfg: Optional[BuildConfig] = None, *, G: Optional[GridSet] = None,
                 cache: Optional[dict] = None):
    """Staircase of glued width functions along the level sets of ``phi``.

    Returns (f, psi, H) with |f| <= omega |e|, f = 0 where phi = 0,
    psi = phi on H and f' close to psi e. ``G`` is the open set {omega > 0}.
    Stages whose input set repeats the previous one reuse its output, so the
    ceil(6/sigma) stages cost one build per distinct set.
    """
    cfg = widths_cfg or BuildConfig()
    log = _Log(cfg.strict)
    d = omega.domain
    h = d.h
    n = d.n
    e = as_vec(e, n)
    enorm = float(np.linalg.norm(e))
    G0 = positive_set(omega) if G is None else G
    meta = {"sigma": float(sigma), "issues": log.issues}
    if enorm == 0.0 or sigma >= 1.0:
        meta["degenerate"] = True
        return ScalarField(d, np.zeros(d.node_shape), meta), ScalarField(d, phi.values.copy()), G0
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    ehat = e / enorm
    sig = sigma if enorm <= 1 else sigma / enorm
    k = _staircase_count(sig)
    eps = sig / 7.0
    tau = tau_of_sigma(sig)
    cone = Cone.from_direction(ehat, tau)
    in_supp = phi(E.points) > 0 if len(E) else np.zeros(0, dtype=bool)
    wval, scale = _width_precondition(E, in_supp, cone, d, cfg)
    meta.update({"k": k, "eps": eps, "tau": tau, "width": wval, "width_scale": scale})
    if wval > cfg.width_threshold * scale:
        log.fail("width precondition fails", width=wval, threshold=cfg.width_threshold * scale)
    pv = phi.values
    min_phi = _cells_reduce(d, pv, np.minimum)
    max_phi = _cells_reduce(d, pv, np.maximum)
    H0_occ = G0.occupancy & (min_phi > 0)
    G0_nodes = G0.node_interior_mask()
    jmap = np.where(G0_nodes, 0, -1)
    H_occ = H0_occ & (max_phi < 2.0 / k)
    gsum = np.zeros(d.node_shape)
    local_cache = {} if cache is None else cache
    prev_G = None
    prev_out = None
    H_prev = H0_occ
    i = 1
    builds = []
    while i <= k:
        Gi = H_prev & (min_phi > i / k)
        if not Gi.any():
            break
        if prev_G is not None and np.array_equal(Gi, prev_G):
            g_i, H_i = prev_out
            vmin = float(min_phi[Gi].min())
            nxt = max(i + 1, int(math.ceil(vmin * k)) - 1)
            while nxt / k < vmin:
                nxt += 1
            run = min(nxt, k + 1) - i
        else:
            if len(builds) >= cfg.max_stage_builds:
                log.fail("too many distinct staircase stages", builds=len(builds), stage=i)
                break
            Gset = GridSet(d, Gi)
            rho = rho_field(Gset)
            omega_i = ScalarField(d, 0.5 * np.minimum(omega.values, rho ** 2))
            try:
                g_i, H_i = lemma1_build(E, ehat, omega_i, eps, cfg, G=Gset, cache=local_cache)
            except BuildError as exc:
                raise BuildError(f"stage {i}: {exc}", {**exc.details, "stage": i}) from exc
            log.extend(g_i.meta.get("issues", []), stage=i)
            builds.append({"stage": i, "cells": int(Gi.sum()), "H_cells": H_i.count,
                           "checks": g_i.meta.get("checks", {})})
            run = 1
        j_last = i + run - 1
        gsum += run * g_i.values
        jmap[GridSet(d, Gi).node_interior_mask()] = j_last
        H_occ |= H_i.occupancy & (max_phi < (j_last + 2.0) / k)
        prev_G, prev_out, H_prev = Gi, (g_i, H_i), H_i.occupancy
        i += run
    g = ScalarField(d, gsum / k)
    psi = np.where(jmap >= 0, np.minimum((jmap + 2.0) / k, pv), 0.0)
    H = GridSet(d, H_occ)
    rhoH = rho_field(H)
    Phi = VectorField(d, psi[..., None] * ehat)
    xi = ScalarField(d, 5.0 * np.minimum(1.0 / k, pv))
    om_hat = ScalarField(d, 0.2 * np.minimum(np.minimum(omega.values, pv), rhoH ** 2))
    f = mollify_glue(g, H, Phi, xi, om_hat, theta=cfg.theta, bisection_steps=cfg.bisection_steps,
                     slack=cfg.precondition_slack, strict=cfg.strict)
    log.extend(f.meta.get("issues", []), step="mollify")
    fv = enorm * f.values
    hin = H.node_interior_mask()
    fgrad = np.stack(np.gradient(fv, h), axis=-1)
    dev = np.linalg.norm(fgrad - psi[..., None] * e, axis=-1)
    supp_nodes = pv > 0
    checks = {
        "f_le_omega": _check(float(np.max(np.abs(fv) - omega.values * enorm)), 0.0),
        "f_zero_off_phi": _check(float(np.max(np.abs(fv[pv == 0]), initial=0.0)), 0.0),
        "psi_eq_phi_on_H": _check(float(np.max(np.abs(psi - pv)[hin], initial=0.0)), 0.0),
        "gradient_on_phi_support": _check(float(np.max(dev[supp_nodes], initial=0.0)), sigma),
    }
    meta.update({"builds": builds, "checks": checks, "mollify": {k2: v for k2, v in f.meta.items() if k2 != "issues"}})
    return ScalarField(d, fv, meta), ScalarField(d, psi), H


# ---------------------------------------------------------------------------
# Stage selection
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StageConfig:
    """One recursion stage: accuracy sigma, direction e, cut-off phi = min(1, scale * w_bump)."""

    sigma: float
    direction: np.ndarray
    bump: int
    provenance: tuple
    partition: BumpPartition
    scale: float = 1.0

    def phi(self) -> ScalarField:
        w = self.partition.weight(self.bump)
        return ScalarField(self.partition.domain, np.minimum(1.0, self.scale * w))

    def phi_at(self, pts) -> np.ndarray:
        return np.minimum(1.0, self.scale * self.partition.weights_at(pts)[:, self.bump])

    def negated(self) -> "StageConfig":
        return replace(self, direction=-np.asarray(self.direction))

    def describe(self) -> dict:
        return {"sigma": self.sigma, "direction": [float(v) for v in self.direction], "bump": self.bump,
                "provenance": list(self.provenance), "center": self.partition.centers[self.bump].tolist(),
                "radius": float(self.partition.radii[self.bump]), "scale": self.scale}


class StageList(list):
    """A list of StageConfig with selection metadata."""

    meta: dict

    def __init__(self, items=(), meta=None):
        super().__init__(items)
        self.meta = meta or {}


def lattice_net(eps: float, n: int) -> np.ndarray:
    """Points of the cubic lattice of spacing eps/sqrt(n) inside the closed unit ball,
    ordered by decreasing norm, ties lexicographically."""
    a = eps / math.sqrt(n)
    m = int(math.floor(1.0 / a))
    z = np.stack(np.meshgrid(*[np.arange(-m, m + 1)] * n, indexing="ij"), axis=-1).reshape(-1, n)
    pts = z * a
    norms = np.linalg.norm(pts, axis=1)
    keep = norms <= 1.0 + 1e-12
    pts, norms, z = pts[keep], norms[keep], z[keep]
    order = np.lexsort(tuple(z[:, c] for c in range(n - 1, -1, -1)) + (-np.round(norms, 12),))
    return pts[order]


def _normal_distance(q: np.ndarray, normals: np.ndarray, full: np.ndarray):
    """Distance from q to N(E, x) within the unit ball and the closest member, per point."""
    t = np.clip(normals @ q, -1.0, 1.0)
    closest = t[:, None] * normals
    closest[full] = q
    dist = np.linalg.norm(closest - q, axis=1)
    return dist, closest


def _lattice(n: int):
    """Lattice generator matrix (rows) and bump radius per unit spacing.

    In the plane the hexagonal lattice with radius 0.75 s: above the covering
    radius s/sqrt(3) and below sqrt(3)/2 s, the smallest radius at which four
    balls share a point, so every point lies in one to three supports. In
    other dimensions a cubic lattice with radius 0.65 s sqrt(n), whose order
    can exceed n + 1.
    """
    if n == 2:
        return np.array([[1.0, 0.0], [0.5, math.sqrt(3.0) / 2.0]]), 0.75
    return np.eye(n), 0.65 * math.sqrt(n)


def lattice_partition(points: np.ndarray, validity: np.ndarray, domain: GridDomain, theta: float = 0.9,
                      max_bumps: int = 64, log: Optional[_Log] = None):
    """Bump partition of low order covering ``points``, subordinated to the
    balls B(y, validity_y).

    Bumps sit on a lattice anchored at the origin with spacing
    s = theta * min(validity) / (2 c), c the radius factor, so every bump
    whose ball meets a point y satisfies |center - y| + R < validity_y. Only
    bumps whose open ball contains a point are kept; at the points the kept
    bumps are exactly the lattice bumps, so the weights b / max(S, floor)
    sum to one there. Returns (partition, owner) with owner[k] the index of
    the nearest point to bump k.
    """
    log = log or _Log(True)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, domain.n)
    n = domain.n
    if not len(pts):
        return BumpPartition(domain, np.zeros((0, n)), np.zeros(0), 0, None), []
    A, c = _lattice(n)
    s = theta * float(np.min(validity)) / (2.0 * c)
    if s < 2 * domain.h:
        log.fail("validity radius below the grid scale", spacing=s, h=domain.h)
        s = 2 * domain.h
    R = c * s
    Ainv = np.linalg.inv(A)
    coords = (pts / s) @ Ainv
    reach = int(math.ceil(c * float(np.abs(Ainv).sum(axis=0).max()))) + 1
    first: dict = {}
    for off in itertools.product(range(-reach, reach + 1), repeat=n):
        idx = np.floor(coords).astype(np.int64) + np.asarray(off)
        cen = (idx * s) @ A
        for i in np.flatnonzero(np.linalg.norm(cen - pts, axis=1) < R):
            key = tuple(int(v) for v in idx[i])
            first[key] = min(first.get(key, len(pts)), int(i))
    # bumps ordered by the first point they reach, so a truncated list covers a prefix of the points
    keys = sorted(first, key=lambda k: (first[k], k))
    if len(keys) > max_bumps:
        log.fail("partition bump budget exhausted", bumps=len(keys), max_bumps=max_bumps)
        keys = keys[:max_bumps]
    centers = (np.asarray(keys, dtype=np.float64).reshape(-1, n) * s) @ A
    # the nearest point to a kept center lies within R of it, so its validity ball holds the support
    owner = [int(np.argmin(np.linalg.norm(pts - cen, axis=1))) for cen in centers]
    raw = BumpPartition(domain, centers, np.full(len(centers), R), 0, None)
    S = raw.raw_at(pts).sum(axis=1)
    floor = 0.9 * float(S[S > 0].min())
    part = BumpPartition(domain, centers, np.full(len(centers), R), 0, floor)
    part = replace(part, overlap=int(part.raw_at(pts).astype(bool).sum(axis=1).max()))
    return part, owner


def select_stages(E: PointCloud, eps: float, i_max: int, domain: Optional[GridDomain] = None,
                  widths_cfg: Optional[BuildConfig] = None, *, max_stages: Optional[int] = None) -> StageList:
    """Stages (sigma_l, e_l, phi_l) covering every normal direction of E at every level.

    Level i uses eps_i = 2^-i eps, tau_i = 3^-n eps_i^(n+1) / (n+1), a lattice
    net of the unit ball at spacing eps_i / sqrt(n), and for each net point a
    bump partition of the points whose normal set comes within eps_i of it.
    Stages are ordered by (level, net point, bump); ``max_stages`` stops the
    scan once that many have been emitted.
    """
    cfg = widths_cfg or BuildConfig()
    log = _Log(cfg.strict)
    if not E.has_normals:
        raise ValueError("every point needs normal data")
    if not eps > 0 or i_max < 0:
        raise ValueError("eps must be positive and i_max nonnegative")
    n = E.n
    if domain is None:
        domain = GridDomain.box(np.zeros(n), np.ones(n), 1 / 64)
    pts = E.points
    full = E.full_space()
    normals = np.where(full[:, None], 0.0, E.normals)
    stages = StageList()
    levels = []
    partitions: dict = {}
    for i in range(1, i_max + 1):
        if max_stages is not None and len(stages) >= max_stages:
            break
        eps_i = eps * 2.0 ** (-i)
        tau_i = 3.0 ** (-n) * eps_i ** (n + 1) / (n + 1)
        net = lattice_net(eps_i, n)
        emitted = 0
        for j, q in enumerate(net):
            if not len(pts) or (max_stages is not None and len(stages) >= max_stages):
                break
            dist, closest = _normal_distance(q, normals, full)
            mask = dist < eps_i
            if not mask.any():
                continue
            sub = np.flatnonzero(mask)
            key = sub.tobytes()
            if key not in partitions:
                part, owner = lattice_partition(pts[sub], E.delta[sub], domain, cfg.theta,
                                                cfg.partition_max_bumps, log)
                partitions[key] = (part, [int(sub[o]) for o in owner])
            part, owners = partitions[key]
            for kk in range(len(part)):
                e_l = closest[owners[kk]]
                stages.append(StageConfig(tau_i, e_l, kk, (i, j, kk), part, float(n + 1)))
                emitted += 1
        levels.append({"level": i, "eps_i": eps_i, "tau_i": tau_i, "net_size": int(len(net)),
                       "stages": emitted})
    stages.meta = {"eps": eps, "i_max": i_max, "levels": levels, "issues": log.issues}
    return stages


def stage_cover_sum(stages: Sequence[StageConfig], domain: Optional[GridDomain] = None) -> np.ndarray:
    """Node field sum_l sigma_l * 1[node in supp phi_l]."""
    if domain is None:
        if not stages:
            raise ValueError("a domain is needed for an empty stage list")
        domain = stages[0].partition.domain
    # stages sharing a partition bump share a support; add their sigmas once
    grouped: dict = {}
    for st in stages:
        key = (id(st.partition), st.bump)
        if key not in grouped:
            grouped[key] = [st, []]
        grouped[key][1].append(st.sigma)
    total = np.zeros(domain.node_shape)
    for st, sigmas in grouped.values():
        sl, vals = st.partition.window(st.bump)
        total[sl] += math.fsum(sigmas) * (vals > 0)
    return total


# ---------------------------------------------------------------------------
# Recursion
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TraceEntry:
    f: ScalarField
    H: GridSet
    omega: ScalarField
    psi: Optional[ScalarField]
    stage: Optional[StageConfig]
    checks: dict = field(default_factory=dict)


@dataclass(eq=False)
class BuildTrace:
    """Per-stage record of a recursive construction."""

    E: PointCloud
    entries: list
    u: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)
    issues: list = field(default_factory=list)

    @property
    def f(self) -> ScalarField:
        return self.entries[-1].f

    def failed_checks(self) -> list:
        out = []
        for j, entry in enumerate(self.entries):
            for name, c in entry.checks.items():
                if not c["ok"]:
                    out.append({"stage": j, "check": name, **c})
        for name, c in self.meta.get("checks", {}).items():
            if not c["ok"]:
                out.append({"stage": "final", "check": name, **c})
        return out

    def manifest(self) -> dict:
        stages = []
        for j, entry in enumerate(self.entries):
            stages.append({
                "index": j,
                "stage": entry.stage.describe() if entry.stage is not None else None,
                "H_cells": entry.H.count,
                "omega_max": float(entry.omega.values.max()),
                "f_max_abs": entry.f.max_abs(),
                "lipschitz": entry.f.lipschitz(),
                "checks": entry.checks,
            })
        return {"stages": stages, "meta": _jsonable(self.meta), "issues": _jsonable(self.issues),
                "failed_checks": self.failed_checks(),
                "u": None if self.u is None else np.asarray(self.u).tolist()}

    def write(self, directory) -> None:
        """One field file per stage plus manifest.json."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        for j, entry in enumerate(self.entries):
            entry.f.write(out / f"f_{j:03d}.sfld")
            entry.omega.write(out / f"omega_{j:03d}.sfld")
            if entry.psi is not None:
                entry.psi.write(out / f"psi_{j:03d}.sfld")
        self.f.write(out / "f_final.sfld")
        with open(out / "manifest.json", "w") as fh:
            json.dump(self.manifest(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def _grad_at(values: np.ndarray, domain: GridDomain, pts: np.ndarray) -> np.ndarray:
    grad = np.stack(np.gradient(values, domain.h), axis=-1)
    if not len(pts):
        return np.zeros((0, domain.n))
    return np.stack([interpolate(grad[..., a], domain, pts) for a in range(domain.n)], axis=-1)


def run_recursion(E: PointCloud, f0: ScalarField, H0: GridSet, omega0: ScalarField, stages: Sequence[StageConfig],
                  K: int, widths_cfg: Optional[BuildConfig] = None) -> BuildTrace:
    """Apply K staircases in sequence, each inside the previous open set.

    omega_0 is first replaced by min(1, omega_0, rho_H0^2)/2. Stage j runs the
    staircase with budget omega_{j-1} inside H_{j-1}, adds it to f, and sets
    omega_j = min(omega_{j-1}, xi_j, rho_Hj^2)/2 with xi_j the modulus field
    of f_j at accuracy sigma_j.
    """
    cfg = widths_cfg or BuildConfig()
    if K < 0 or K > len(stages):
        raise ValueError("K must lie between 0 and the number of stages")
    d = f0.domain
    log = _Log(cfg.strict)
    rho0 = rho_field(H0)
    om = ScalarField(d, np.where(H0.node_interior_mask(),
                                 0.5 * np.minimum(np.minimum(1.0, omega0.values), rho0 ** 2), 0.0))
    trace = BuildTrace(E, [TraceEntry(f0, H0, om, None, None)], issues=log.issues)
    f, H = f0, H0
    cache: dict = {}
    pts = E.points
    for j in range(1, K + 1):
        st = stages[j - 1]
        phi = st.phi()
        try:
            g, psi, Hj = lemma2_build(E, om, phi, st.direction, st.sigma, cfg, G=H, cache=cache)
        except BuildError as exc:
            raise BuildError(f"stage {j}: {exc}", {**exc.details, "stage": j}, trace) from exc
        log.extend(g.meta.get("issues", []), stage=j)
        fj = f + g
        xi = modulus_field(fj, Hj, om, min(1.0, st.sigma))
        rho = rho_field(Hj)
        om_next = ScalarField(d, 0.5 * np.minimum(np.minimum(om.values, xi.values), rho ** 2))
        in_H = Hj.contains_points(pts) if len(pts) else np.zeros(0, dtype=bool)
        hin = Hj.node_interior_mask()
        checks = {
            "nested": _check(float(np.sum(Hj.occupancy & ~H.occupancy)), 0.0),
            "E_in_H": _check(float(np.sum(~in_H)), 0.0),
            "increment_le_omega": _check(float(np.max(np.abs(g.values) - om.values)), 0.0),
            "omega_halving": _check(float(np.max(om_next.values - 0.5 * np.minimum(
                np.minimum(1.0, om.values), rho ** 2))), 0.0),
            "psi_eq_phi_on_H": _check(float(np.max(np.abs(psi.values - phi.values)[hin], initial=0.0)), 0.0),
        }
        on_supp = phi(pts) > 0 if len(pts) else np.zeros(0, dtype=bool)
        if on_supp.any():
            diff = _grad_at(fj.values - f.values, d, pts[on_supp])
            target = psi(pts[on_supp])[:, None] * np.asarray(st.direction)[None, :]
            checks["increment_gradient"] = _check(float(np.linalg.norm(diff - target, axis=1).max()), st.sigma)
        trace.entries.append(TraceEntry(fj, Hj, om_next, psi, st, checks))
        if cfg.strict:
            bad = [name for name, c in checks.items() if not c["ok"]]
            if bad:
                raise BuildError(f"stage {j}: checks failed: {', '.join(bad)}", {"stage": j}, trace)
        f, H, om = fj, Hj, om_next
    return trace


# ---------------------------------------------------------------------------
# End-to-end builders
# ---------------------------------------------------------------------------


def u_variation(points: np.ndarray, u: np.ndarray, radii) -> list:
    """[r, max |u_i - u_j| over sample pairs within distance r] for each radius."""
    from scipy.spatial import cKDTree

    tree = cKDTree(points)
    out = []
    for r in radii:
        pairs = tree.query_pairs(float(r), output_type="ndarray")
        v = float(np.linalg.norm(u[pairs[:, 0]] - u[pairs[:, 1]], axis=1).max()) if len(pairs) else 0.0
        out.append([float(r), v])
    return out


def theorem4_build(E: PointCloud, eps: float, omega: ScalarField, K: int, widths_cfg: Optional[BuildConfig] = None,
                   *, i_max: int = 4):
    """f with Lip(f) <= 1 + eps whose restricted gradient u is small on E.

    Stages come from ``select_stages`` at eps/2; each of the first K is used
    twice, with direction e and then -e on the same cut-off. Returns (f, u);
    the full BuildTrace is in ``f.meta["trace"]``.
    """
    cfg = widths_cfg or BuildConfig()
    d = omega.domain
    H0 = positive_set(omega)
    f0 = ScalarField(d, np.zeros(d.node_shape))
    if len(E) == 0 or K == 0:
        trace = BuildTrace(E, [TraceEntry(f0, H0, omega, None, None)], u=np.zeros((0, d.n)))
        return ScalarField(d, f0.values, {"trace": trace}), np.zeros((len(E), d.n))
    selected = select_stages(E, eps / 2, i_max, d, cfg, max_stages=K)
    if len(selected) < K:
        raise BuildError(f"only {len(selected)} stages available, {K} requested")
    doubled = []
    for st in selected[:K]:
        doubled.extend([st, st.negated()])
    trace = run_recursion(E, f0, H0, omega, doubled, 2 * K, cfg)
    f = trace.f
    u = _grad_at(f.values, d, E.points)
    tol = 2 * d.h * (1 + 1 / min(tau_of_sigma(st.sigma) for st in doubled))
    partial = np.zeros(d.node_shape + (d.n,))
    cancel = 0.0
    for a in range(1, len(trace.entries), 2):
        for entry in trace.entries[a:a + 2]:
            partial += entry.psi.values[..., None] * np.asarray(entry.stage.direction)
        cancel = max(cancel, float(np.linalg.norm(partial, axis=-1).max()))
    trace.u = u
    trace.meta.update({
        "eps": eps, "K": K, "tolerance": tol, "selection": _jsonable(selected.meta),
        # continuity of u is not assertable on samples; report its variation instead
        "u_variation": u_variation(E.points, u, 2.0 ** -np.arange(3, 9)),
        "checks": {
            "lipschitz": _check(f.lipschitz(), 1 + eps + tol),
            "u_norm": _check(float(np.linalg.norm(u, axis=1).max()), eps),
            "interleaving": _check(cancel, 1.0),
        },
    })
    trace.issues.extend(selected.meta.get("issues", []))
    return ScalarField(d, f.values, {"trace": trace}), u


def ball_sequence(k: int, n: int = 2) -> np.ndarray:
    """k-th point (k >= 1) of a generalized golden-ratio sequence in the unit ball,
    scaled by 1 - 2^-k."""
    if n != 2:
        raise NotImplementedError("the direction sequence is planar")
    g = 1.32471795724474602596  # plastic number, the 2-d generalized golden ratio
    a1, a2 = 1.0 / g, 1.0 / (g * g)
    u1 = (0.5 + a1 * k) % 1.0
    u2 = (0.5 + a2 * k) % 1.0
    r = math.sqrt(u1)
    p = np.array([r * math.cos(2 * math.pi * u2), r * math.sin(2 * math.pi * u2)])
    return (1.0 - 2.0 ** (-k)) * p


def _oscillation_radius(grad: np.ndarray, domain: GridDomain, x: np.ndarray, limit: float, cap: float,
                        r_min: float) -> float:
    """Largest dyadic radius r in [r_min, cap] with gradient oscillation < limit on B(x, r)."""
    best = None
    r = r_min
    while r <= cap + 1e-12:
        sl, _, dist = _bump_window(domain, x, r, pad=0)
        vals = grad[sl][dist < r]
        if len(vals) and float(np.linalg.norm(vals.max(axis=0) - vals.min(axis=0))) >= limit:
            break
        best = r
        r *= 2
    return best if best is not None else r_min


def lemma_u(E: PointCloud, H: GridSet, omega: ScalarField, f: ScalarField, e, eta: float,
            widths_cfg: Optional[BuildConfig] = None):
    """One refinement step: returns (g, xi, U) with g' pushed toward e near E.

    Around each point x a ball B_x is chosen on which the gradient of f varies
    by less than eta/4; a lattice partition gamma_k subordinated to these
    balls (gamma_k supported in B_{x_k}) drives paired stages
    (-f'(x_k), gamma_k), (e, gamma_k) at accuracy eta / (8 (n+1)).
    """
    cfg = widths_cfg or BuildConfig()
    log = _Log(cfg.strict)
    d = f.domain
    n = d.n
    e = as_vec(e, n)
    sigma = eta / (8 * (n + 1))
    in_H = H.contains_points(E.points) if len(E) else np.zeros(0, dtype=bool)
    pts = E.points[in_H]
    meta = {"eta": eta, "sigma": sigma, "issues": log.issues}
    if not len(pts):
        xi = modulus_field(f, H, omega, eta / 2)
        return ScalarField(d, f.values.copy(), meta), xi, H
    grad = f.fd_gradient()
    rho = rho_field(H)
    r_min = 2 * d.h
    radii = []
    short = 0
    for x in pts:
        cap = min(float(interpolate(rho, d, x[None])[0]), 1.0)
        r = _oscillation_radius(grad, d, x, eta / 4, cap, r_min)
        sl, _, dist = _bump_window(d, x, r, pad=0)
        vals = grad[sl][dist < r]
        if len(vals) and float(np.linalg.norm(vals.max(axis=0) - vals.min(axis=0))) >= eta / 4:
            short += 1
        radii.append(r)
    if short:
        log.fail("no ball with small gradient oscillation", points=short, radius=r_min)
    part, owner = lattice_partition(pts, np.asarray(radii), d, cfg.theta, cfg.partition_max_bumps, log)
    stages = []
    for kk in range(len(part)):
        xk = pts[owner[kk]]
        gk = _grad_at(f.values, d, xk[None])[0]
        stages.append(StageConfig(sigma, -gk, kk, (0, 0, kk), part, 1.0))
        stages.append(StageConfig(sigma, e, kk, (0, 1, kk), part, 1.0))
    trace = run_recursion(E, f, H, ScalarField(d, 0.5 * omega.values), stages, len(stages), cfg)
    g = trace.f
    U = trace.entries[-1].H
    xi = modulus_field(g, U, omega, eta / 2)
    meta.update({"bumps": len(part), "trace": trace})
    log.extend(trace.issues)
    return ScalarField(d, g.values, meta), xi, U


def theorem9_build(E: PointCloud, K: int, domain: Optional[GridDomain] = None,
                   widths_cfg: Optional[BuildConfig] = None, *, probe: bool = True) -> ScalarField:
    """K refinement steps toward the directions of ``ball_sequence``.

    Step k uses eta_k = 2^(-k-1); f_0 = 0, H_0 the whole box, omega_0 = 1.
    The per-step traces are in ``meta["steps"]``.
    """
    cfg = widths_cfg or BuildConfig()
    log = _Log(cfg.strict)
    if domain is None:
        domain = GridDomain.box(np.zeros(E.n), np.ones(E.n), 1 / 256)
    d = domain
    f = ScalarField(d, np.zeros(d.node_shape))
    meta = {"K": K, "issues": log.issues, "steps": []}
    if K == 0 or len(E) == 0:
        return ScalarField(d, f.values, meta)
    if probe:
        from .width import estimate_normal_cone

        probes = E.points[np.unique(np.linspace(0, len(E) - 1, 3).astype(int))]
        rejected = 0
        for x in probes:
            est = estimate_normal_cone(E, x, [0.5], [4.0 ** -2, 4.0 ** -3], [(1.0, 0.0), (0.0, 1.0)],
                                       cfg.width_threshold, cfg.s_max)
            rejected += 2 - len(est.accepted)
        meta["probe_rejections"] = rejected
        if rejected:
            log.fail("probe directions rejected by the normal-cone estimate", rejected=rejected)
    H = GridSet.full(d)
    omega = ScalarField(d, np.ones(d.node_shape))
    tol_terms = []
    for k in range(1, K + 1):
        e_k = ball_sequence(k, d.n)
        eta_k = 2.0 ** (-k - 1)
        g, xi, U = lemma_u(E, H, omega, f, e_k, eta_k, cfg)
        log.extend(g.meta.get("issues", []), step=k)
        sigma = eta_k / (8 * (d.n + 1))
        tol = 2 * d.h * (1 + 1 / tau_of_sigma(sigma))
        tol_terms.append(tol)
        lip = g.lipschitz()
        meta["steps"].append({"k": k, "direction": e_k.tolist(), "eta": eta_k, "lipschitz": lip,
                              "bound": 1 - 2.0 ** (-k - 1), "tolerance": tol, "H_cells": U.count,
                              "trace": g.meta.get("trace")})
        f, H, omega = ScalarField(d, g.values), U, xi
    meta["checks"] = {"lipschitz": _check(f.lipschitz(), 1 - 2.0 ** (-K - 1) + max(tol_terms))}
    return ScalarField(d, f.values, meta)


def zahorski_sum(pieces: Sequence) -> ScalarField:
    """sum over pieces (g, (k, j)) of 2^(-k-j) g."""
    if not pieces:
        raise ValueError("need at least one piece")
    seen = set()
    domain = pieces[0][0].domain
    total = np.zeros(domain.node_shape)
    weights = []
    for g, (k, j) in pieces:
        if (k, j) in seen:
            raise ValueError(f"duplicate index {(k, j)}")
        if g.domain != domain:
            raise ValueError("pieces live on different domains")
        seen.add((k, j))
        c = 2.0 ** (-k - j)
        total = total + c * g.values
        weights.append({"index": [int(k), int(j)], "weight": c})
    return ScalarField(domain, total, {"weights": weights})
