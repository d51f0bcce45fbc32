"""Finite-scale differentiability certificates for sampled Lipschitz functions.

Limits over t -> 0 or r -> 0 are replaced by the max/min over a dyadic
ladder of scales, and suprema over balls by a fixed deterministic sample of
the ball. Every report carries the scales and slacks it used.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .fields import ScalarField
from .geometry import PointCloud, as_vec

__all__ = [
    "DerivativeEstimate",
    "ResidualProfile",
    "GapRow",
    "GapReport",
    "ExampleEResult",
    "lipschitz_estimate",
    "dyadic_scales",
    "dini_derivatives",
    "ball_pattern",
    "residual_profile",
    "normal_support",
    "gap_report",
    "example_e_check",
]

DEFAULT_J = (3, 10)
GAP_SLACK = 0.2
RESIDUAL_SLACK = 0.1


def lipschitz_estimate(f: ScalarField) -> float:
    """Lipschitz constant of the multilinear interpolant of ``f``."""
    return f.lipschitz()


def dyadic_scales(j_min: int, j_max: int) -> np.ndarray:
    if j_max < j_min:
        raise ValueError("j_max must be >= j_min")
    return 2.0 ** -np.arange(j_min, j_max + 1, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class DerivativeEstimate:
    """Difference quotients (f(x + t y) - f(x)) / t over a ladder of t."""

    point: np.ndarray
    direction: np.ndarray
    scales: np.ndarray
    quotients: np.ndarray

    @property
    def upper(self) -> float:
        return float(self.quotients.max())

    @property
    def lower(self) -> float:
        return float(self.quotients.min())

    @property
    def gap(self) -> float:
        return self.upper - self.lower


def dini_derivatives(f: ScalarField, x, y, j_min: int = DEFAULT_J[0], j_max: int = DEFAULT_J[1]) -> DerivativeEstimate:
    """Upper and lower directional difference quotients at t = 2^-j, j_min <= j <= j_max."""
    d = f.domain
    x = as_vec(x, d.n)
    y = as_vec(y, d.n)
    ts = dyadic_scales(j_min, j_max)
    if not d.in_domain(x):
        raise ValueError("base point outside the grid domain")
    for j, t in zip(range(j_min, j_max + 1), ts):
        if not d.in_domain(x + t * y):
            raise ValueError(f"probe at scale 2^-{j} leaves the grid domain")
    probes = x[None, :] + ts[:, None] * y[None, :]
    vals = f(probes)
    q = (vals - f(x)) / ts
    return DerivativeEstimate(x, y, ts, q)


def ball_pattern(n: int = 2, directions: int = 64, shells: int = 4) -> np.ndarray:
    """Fixed points of the closed unit ball: ``directions`` unit vectors on each
    of ``shells`` spheres of radius j / shells, j = 1..shells.

    In the plane the directions follow the golden-angle sequence; in higher
    dimensions an unscrambled Halton sequence pushed through the normal
    quantile function and normalized.
    """
    if directions < 1 or shells < 1:
        raise ValueError("directions and shells must be positive")
    if n == 2:
        golden = (math.sqrt(5.0) - 1.0) / 2.0
        ang = 2.0 * math.pi * ((0.5 + golden * np.arange(directions)) % 1.0)
        dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    else:
        from scipy.stats import norm, qmc

        u = qmc.Halton(d=n, scramble=False).random(directions + 1)[1:]
        z = norm.ppf(np.clip(u, 1e-12, 1 - 1e-12))
        dirs = z / np.linalg.norm(z, axis=1, keepdims=True)
    radii = np.arange(1, shells + 1) / shells
    return (radii[:, None, None] * dirs[None, :, :]).reshape(-1, n)


@dataclass(frozen=True, eq=False)
class ResidualProfile:
    """sup over sampled |y| <= r of |f(x + y) - f(x) - <e, y>| / r, per radius."""

    point: np.ndarray
    target: np.ndarray
    radii: np.ndarray
    residuals: np.ndarray

    @property
    def minimum(self) -> float:
        return float(self.residuals.min())

    @property
    def argmin_radius(self) -> float:
        return float(self.radii[int(np.argmin(self.residuals))])

    def rows(self) -> list:
        return [(float(r), float(v)) for r, v in zip(self.radii, self.residuals)]


def residual_profile(f: ScalarField, x, e, radii: Optional[Sequence[float]] = None,
                     ball_samples=None) -> ResidualProfile:
    """Linear-approximation residuals of ``f`` at ``x`` against ``e``.

    ``ball_samples`` is either an (m, n) array of points of the unit ball or
    None for the default pattern (64 directions on 4 shells). ``radii``
    defaults to 2^-j for j = 3..10.
    """
    d = f.domain
    x = as_vec(x, d.n)
    e = as_vec(e, d.n)
    rs = dyadic_scales(*DEFAULT_J) if radii is None else np.asarray(radii, dtype=np.float64)
    if np.any(rs <= 0):
        raise ValueError("radii must be positive")
    B = ball_pattern(d.n) if ball_samples is None else np.asarray(ball_samples, dtype=np.float64).reshape(-1, d.n)
    if np.any(np.linalg.norm(B, axis=1) > 1 + 1e-12):
        raise ValueError("ball samples must lie in the closed unit ball")
    fx = f(x)
    res = np.empty(len(rs))
    for i, r in enumerate(rs):
        Y = r * B
        pts = x[None, :] + Y
        if not (d.in_domain(pts.min(axis=0)) and d.in_domain(pts.max(axis=0))):
            raise ValueError(f"ball of radius {r:g} leaves the grid domain")
        res[i] = float(np.max(np.abs(f(pts) - fx - Y @ e))) / r
    return ResidualProfile(x, e, rs, res)


def normal_support(E: PointCloud, index: int, y) -> float:
    """max over the normal set of point ``index`` of <v, y>.

    A point with normal n carries the segment {t n : |t| <= 1}, giving |<n, y>|;
    a point whose normal data is "all directions" carries the unit ball, giving |y|.
    """
    y = as_vec(y, E.n)
    if not E.has_normals:
        raise ValueError("the point cloud carries no normal data")
    nrm = E.normals[index]
    if np.isnan(nrm).any():
        return float(np.linalg.norm(y))
    return abs(float(nrm @ y))


class GapRow(NamedTuple):
    index: int
    point: tuple
    direction: tuple
    upper: float
    lower: float
    gap: float
    bound: float
    passed: bool


@dataclass(frozen=True, eq=False)
class GapReport:
    """Per (sample, direction) comparison of the Dini gap with twice the normal support."""

    rows: list
    slack: float
    scales: tuple
    meta: dict = field(default_factory=dict)

    @property
    def pass_rate(self) -> float:
        return float(np.mean([r.passed for r in self.rows])) if self.rows else 1.0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "x", "y", "dir_x", "dir_y", "upper", "lower", "gap", "bound", "passed"])
            for r in self.rows:
                w.writerow([r.index, *(repr(c) for c in r.point), *(repr(c) for c in r.direction),
                            repr(r.upper), repr(r.lower), repr(r.gap), repr(r.bound), int(r.passed)])


def gap_report(f: ScalarField, E: PointCloud, directions, j_min: int = DEFAULT_J[0], j_max: int = DEFAULT_J[1],
               slack: float = GAP_SLACK, indices: Optional[Sequence[int]] = None) -> GapReport:
    """Check upper - lower >= 2 sup_{v in N(x)} <v, y> - slack |y| at each sample.

    The slack is relative to |y|, so rescaling y scales both sides and keeps
    the verdict.
    """
    dirs = np.asarray(directions, dtype=np.float64).reshape(-1, E.n)
    idx = range(len(E)) if indices is None else indices
    rows = []
    for i in idx:
        x = E.points[i]
        for y in dirs:
            est = dini_derivatives(f, x, y, j_min, j_max)
            bound = 2.0 * normal_support(E, i, y)
            passed = est.gap >= bound - slack * float(np.linalg.norm(y))
            rows.append(GapRow(int(i), tuple(float(c) for c in x), tuple(float(c) for c in y),
                               est.upper, est.lower, est.gap, bound, bool(passed)))
    return GapReport(rows, float(slack), (j_min, j_max))


class ExampleEResult(NamedTuple):
    minimum: float
    point: np.ndarray


def example_e_check(f: ScalarField, E: PointCloud, j_min: int = DEFAULT_J[0], j_max: int = DEFAULT_J[1],
                    lipschitz_tol: float = 1e-9) -> ExampleEResult:
    """Smallest upper Dini estimate of ``f`` along the sample normals e_x.

    A 1-Lipschitz f that is "fully non-differentiable" along the normals
    would reach 1 at every sample; a minimum below 1 - slack exhibits a point
    where it does not.
    """
    lip = lipschitz_estimate(f)
    if lip > 1.0 + lipschitz_tol:
        raise ValueError(f"measured Lipschitz constant {lip:.6g} exceeds 1")
    if not E.has_normals or E.full_space().any():
        raise ValueError("every sample needs a single normal direction")
    if not len(E):
        raise ValueError("empty point cloud")
    best = math.inf
    where = None
    for x, nrm in zip(E.points, E.normals):
        up = dini_derivatives(f, x, nrm, j_min, j_max).upper
        if up < best:
            best, where = up, x
    return ExampleEResult(float(best), np.array(where))
