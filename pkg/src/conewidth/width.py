"""Widths of grid sets along cone-monotone lattice paths.

Paths are polylines through lattice nodes whose steps come from a finite set
of primitive integer offsets inside the cone. Every step advances along the
cone axis, so the path graph is acyclic and the best path is found by a
single dynamic-programming sweep.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numba
import numpy as np

from .fields import ScalarField
from .geometry import Cone, GridDomain, GridSet, PointCloud, as_vec, cone_contains, neighborhood

BRUTE_FORCE_NODE_LIMIT = 400


@dataclass(frozen=True)
class StepSet:
    cone: Cone
    max_radius: int
    steps: tuple

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.steps, dtype=np.int64).reshape(-1, self.cone.n)

    @property
    def min_cosine(self) -> float:
        """Smallest cosine between a step and the cone axis."""
        arr = self.array.astype(np.float64)
        return float(np.min(arr @ self.cone.e / np.linalg.norm(arr, axis=1)))


def build_step_set(cone: Cone, s_max: int) -> StepSet:
    """Primitive integer offsets in the cone with sup-norm at most ``s_max``, in lexicographic order."""
    if s_max < 1:
        raise ValueError("s_max must be >= 1")
    steps = []
    for d in itertools.product(range(-s_max, s_max + 1), repeat=cone.n):
        if not any(d):
            continue
        if math.gcd(*d) != 1:
            continue
        v = np.asarray(d, dtype=np.float64)
        if float(v @ cone.e) > 0 and cone_contains(cone, v):
            steps.append(tuple(int(c) for c in d))
    if not steps:
        raise ValueError(
            f"no lattice step with sup-norm <= {s_max} lies in the cone of aperture {cone.aperture}; increase s_max"
        )
    return StepSet(cone, int(s_max), tuple(sorted(steps)))


@dataclass(frozen=True)
class ConePath:
    nodes: tuple
    step_set: StepSet

    def __post_init__(self):
        steps = set(self.step_set.steps)
        e = self.step_set.cone.e
        for a, b in zip(self.nodes, self.nodes[1:]):
            d = tuple(int(y - x) for x, y in zip(a, b))
            if d not in steps:
                raise ValueError(f"path step {d} is not in the step set")
            if not float(np.dot(d, e)) > 0:
                raise ValueError("path does not advance along the cone axis")

    def __len__(self) -> int:
        return len(self.nodes)


@dataclass(frozen=True, eq=False)
class WidthResult:
    value: float
    argmax_path: ConePath
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "path": [list(p) for p in self.argmax_path.nodes],
            "steps": [list(s) for s in self.argmax_path.step_set.steps],
            **self.meta,
        }


def step_pattern(d: Sequence[int]) -> list:
    """Pieces of the unit-spacing segment from 0 to ``d``.

    Each piece is (parameter length, tuple of cell offsets): the piece lies in
    the open set exactly when all listed cells are occupied. A piece running
    along a cell face lists every cell sharing that face.
    """
    n = len(d)
    ts = {Fraction(0), Fraction(1)}
    for k in range(n):
        if d[k] != 0:
            m = abs(d[k])
            ts.update(Fraction(j, m) for j in range(1, m))
    ts = sorted(ts)
    pieces = []
    for t0, t1 in zip(ts, ts[1:]):
        tm = (t0 + t1) / 2
        per_axis = []
        for k in range(n):
            c = d[k] * tm
            if c.denominator == 1:
                per_axis.append((int(c) - 1, int(c)))
            else:
                per_axis.append((math.floor(c),))
        cells = tuple(itertools.product(*per_axis))
        pieces.append((t1 - t0, cells))
    return pieces


def _pad_occupancy(occ: np.ndarray, pad: int) -> np.ndarray:
    out = np.zeros(tuple(s + 2 * pad for s in occ.shape), dtype=bool)
    out[tuple(slice(pad, pad + s) for s in occ.shape)] = occ
    return out


def edge_weights(G: GridSet, steps: StepSet) -> np.ndarray:
    """Inside-length of each step leaving each node, shape (num_steps,) + node_shape."""
    d = G.domain
    s_max = steps.max_radius
    P = _pad_occupancy(G.occupancy, s_max + 1)
    off = s_max + 1
    shape = d.node_shape
    W = np.zeros((len(steps.steps),) + shape)
    for si, step in enumerate(steps.steps):
        seg = d.h * float(np.linalg.norm(step))
        acc = np.zeros(shape)
        for dt, cells in step_pattern(step):
            length = seg * float(dt)
            ind = np.ones(shape, dtype=bool)
            for c in cells:
                sl = tuple(slice(off + ck, off + ck + s) for ck, s in zip(c, shape))
                ind &= P[sl]
            acc = acc + length * ind
        W[si] = acc
    return W


def edge_weight(G: GridSet, node: Sequence[int], step: Sequence[int]) -> float:
    """Scalar version of :func:`edge_weights` for one node and step."""
    d = G.domain
    seg = d.h * float(np.linalg.norm(step))
    acc = 0.0
    for dt, cells in step_pattern(tuple(step)):
        length = seg * float(dt)
        ok = True
        for c in cells:
            idx = tuple(int(a) + int(b) for a, b in zip(node, c))
            if any(i < 0 or i >= s for i, s in zip(idx, d.cell_shape)) or not G.occupancy[idx]:
                ok = False
                break
        acc = acc + length * (1.0 if ok else 0.0)
    return acc


@numba.njit(cache=True)
def _dp_kernel(order, node_idx, shape, steps, W_flat, strides):
    num = order.shape[0]
    ns = steps.shape[0]
    n = steps.shape[1]
    V = np.zeros(node_idx.shape[0])
    back = np.full(node_idx.shape[0], -1, dtype=np.int64)
    for oi in range(num):
        v = order[oi]
        best = 0.0
        arg = -1
        for s in range(ns - 1, -1, -1):
            ok = True
            p = 0
            for k in range(n):
                c = node_idx[v, k] - steps[s, k]
                if c < 0 or c >= shape[k]:
                    ok = False
                    break
                p += c * strides[k]
            if not ok:
                continue
            cand = V[p] + W_flat[s, p]
            if cand > best:
                best = cand
                arg = s
        V[v] = best
        back[v] = arg
    return V, back


def _node_order(shape, e) -> tuple:
    idx = np.indices(shape).reshape(len(shape), -1).T.astype(np.int64)
    key = idx.astype(np.float64) @ e
    # primary key: progress along the axis; ties broken lexicographically
    order = np.lexsort(tuple(idx[:, k] for k in range(idx.shape[1] - 1, -1, -1)) + (key,))
    return idx, order.astype(np.int64)


def width_dp(G: GridSet, steps: StepSet) -> tuple:
    """Best inside-length of a path ending at each node, plus backpointers (step index or -1)."""
    d = G.domain
    shape = d.node_shape
    W = edge_weights(G, steps)
    idx, order = _node_order(shape, steps.cone.e)
    strides = np.asarray([int(np.prod(shape[k + 1:])) for k in range(len(shape))], dtype=np.int64)
    V, back = _dp_kernel(order, idx, np.asarray(shape, dtype=np.int64), steps.array, W.reshape(len(steps.steps), -1), strides)
    return V.reshape(shape), back.reshape(shape)


def _trace_path(back: np.ndarray, steps: StepSet, end) -> list:
    path = [tuple(int(c) for c in end)]
    arr = steps.array
    while True:
        s = back[path[-1]]
        if s < 0:
            break
        path.append(tuple(int(a - b) for a, b in zip(path[-1], arr[s])))
    return path[::-1]


def width_open(G: GridSet, cone: Cone, s_max: int = 3) -> WidthResult:
    """Largest inside-length of a cone-monotone lattice path through ``G``."""
    steps = build_step_set(cone, s_max)
    V, back = width_dp(G, steps)
    vmax = float(V.max())
    meta = {"h": G.domain.h, "s_max": s_max, "aperture": cone.aperture, "axis": list(cone.axis)}
    if vmax <= 0.0:
        return WidthResult(0.0, ConePath((), steps), meta)
    # first maximal node in lexicographic index order
    flat = int(np.flatnonzero(V.reshape(-1) == vmax)[0])
    end = np.unravel_index(flat, V.shape)
    nodes = _trace_path(back, steps, end)
    return WidthResult(vmax, ConePath(tuple(nodes), steps), meta)


def path_score(G: GridSet, path: ConePath) -> float:
    """Left-to-right sum of edge weights along a path, the same arithmetic as the DP."""
    acc = 0.0
    for a, b in zip(path.nodes, path.nodes[1:]):
        acc = acc + edge_weight(G, a, tuple(y - x for x, y in zip(a, b)))
    return acc


def width_brute_force(G: GridSet, cone: Cone, s_max: int = 3, prune: bool = True) -> float:
    """Exhaustive depth-first search over all cone paths.

    Path values are accumulated left to right exactly as in the DP. With
    ``prune`` a branch is abandoned when its running value does not beat the
    best running value already seen at that node; since floating addition is
    monotone, no continuation of a dominated branch can do better.
    """
    d = G.domain
    total = int(np.prod(d.node_shape))
    if total > BRUTE_FORCE_NODE_LIMIT:
        raise ValueError(f"brute force refused: {total} nodes exceeds the limit of {BRUTE_FORCE_NODE_LIMIT}")
    steps = build_step_set(cone, s_max)
    shape = d.node_shape
    weights = {}
    for node in itertools.product(*(range(s) for s in shape)):
        out = []
        for st in steps.steps:
            nxt = tuple(a + b for a, b in zip(node, st))
            if all(0 <= c < s for c, s in zip(nxt, shape)):
                out.append((nxt, edge_weight(G, node, st)))
        weights[node] = out
    seen = {}
    best = 0.0
    for start in weights:
        stack = [(start, 0.0)]
        while stack:
            node, val = stack.pop()
            if val > best:
                best = val
            if prune:
                if node in seen and val <= seen[node]:
                    continue
                seen[node] = val
            for nxt, w in weights[node]:
                stack.append((nxt, val + w))
    return best


def inside_length(a, b, G: GridSet) -> float:
    """Length of [a, b] inside the open set, by parametric traversal of the cell grid."""
    d = G.domain
    a = as_vec(a, d.n)
    b = as_vec(b, d.n)
    if not (d.in_domain(a) and d.in_domain(b)):
        raise ValueError("segment leaves the grid domain")
    diff = b - a
    total = float(np.linalg.norm(diff))
    if total == 0.0:
        return 0.0
    ua = (a - d.lower) / d.h
    ub = (b - d.lower) / d.h
    ts = [0.0, 1.0]
    for k in range(d.n):
        lo, hi = sorted((ua[k], ub[k]))
        if hi - lo > 0:
            for m in range(int(math.floor(lo)) + 1, int(math.ceil(hi))):
                ts.append((m - ua[k]) / (ub[k] - ua[k]))
    ts = sorted(set(t for t in ts if 0.0 <= t <= 1.0))
    acc = 0.0
    for t0, t1 in zip(ts, ts[1:]):
        if t1 <= t0:
            continue
        mid = ua + 0.5 * (t0 + t1) * (ub - ua)
        per_axis = []
        for k in range(d.n):
            r = round(mid[k])
            if abs(mid[k] - r) < 1e-9 and ua[k] == ub[k]:
                per_axis.append((int(r) - 1, int(r)))
            else:
                per_axis.append((int(math.floor(mid[k])),))
        ok = True
        for c in itertools.product(*per_axis):
            if any(i < 0 or i >= s for i, s in zip(c, d.cell_shape)) or not G.occupancy[c]:
                ok = False
                break
        if ok:
            acc += (t1 - t0) * total
    return acc


def path_inside_length(G: GridSet, path: ConePath) -> float:
    d = G.domain
    return sum(inside_length(d.node(a), d.node(b), G) for a, b in zip(path.nodes, path.nodes[1:]))


def width_of_set(E: PointCloud, cone: Cone, radii: Sequence[float], s_max: int = 3,
                 domain: Optional[GridDomain] = None) -> list:
    """Widths of the r-neighborhoods of ``E`` for each radius (strictly decreasing)."""
    radii = [float(r) for r in radii]
    if any(b >= a for a, b in zip(radii, radii[1:])):
        raise ValueError("radii must be strictly decreasing")
    if domain is None:
        domain = GridDomain.box((0.0, 0.0), (1.0, 1.0), 1 / 64)
    out = []
    for r in radii:
        G = neighborhood(E, r, domain)
        res = width_open(G, cone, s_max)
        out.append((r, res.value, dict(G.meta)))
    return out


@numba.njit(cache=True)
def _interp2(V, x0, x1):
    n0, n1 = V.shape
    i = int(math.floor(x0))
    j = int(math.floor(x1))
    if i > n0 - 2:
        i = n0 - 2
    if j > n1 - 2:
        j = n1 - 2
    if i < 0:
        i = 0
    if j < 0:
        j = 0
    fx = x0 - i
    fy = x1 - j
    return ((1 - fx) * (1 - fy) * V[i, j] + fx * (1 - fy) * V[i + 1, j]
            + (1 - fx) * fy * V[i, j + 1] + fx * fy * V[i + 1, j + 1])


@numba.njit(cache=True)
def _ray_max_2d(V, e0, e1, h, vmax):
    n0, n1 = V.shape
    out = np.zeros(V.shape)
    for i in range(n0):
        for j in range(n1):
            best = V[i, j]
            k = 1
            while k * 0.5 * h <= vmax:
                x0 = i + k * 0.5 * e0
                x1 = j + k * 0.5 * e1
                if x0 < 0 or x1 < 0 or x0 > n0 - 1 or x1 > n1 - 1:
                    break
                val = _interp2(V, x0, x1) - k * 0.5 * h
                if val > best:
                    best = val
                k += 1
            out[i, j] = best if best > 0.0 else 0.0
    return out


def width_function_from_values(V: np.ndarray, h: float, e: np.ndarray) -> np.ndarray:
    """g(x) = max(0, max_j V(x + j (h/2) e) - j h/2) on the node lattice."""
    if V.ndim != 2:
        raise NotImplementedError("the ray search is implemented for planar grids")
    return _ray_max_2d(np.ascontiguousarray(V), float(e[0]), float(e[1]), float(h), float(V.max()))


def width_function(G: GridSet, cone: Cone, s_max: int = 3) -> ScalarField:
    """Best cone-path gain into the forward axis ray, minus the distance travelled back."""
    steps = build_step_set(cone, s_max)
    V, _ = width_dp(G, steps)
    g = width_function_from_values(V, G.domain.h, cone.e)
    return ScalarField(G.domain, g, {"width": float(V.max())})


@dataclass(frozen=True, eq=False)
class NormalConeEstimate:
    point: np.ndarray
    directions: np.ndarray
    values: dict
    accepted: tuple
    threshold: float

    def is_accepted(self, e) -> bool:
        e = as_vec(e)
        return any(np.allclose(e, np.asarray(a), atol=1e-12) for a in self.accepted)


def local_width(E: PointCloud, x, r: float, cone: Cone, s_max: int = 3, cells_per_radius: int = 16,
                inner_fraction: float = 0.25) -> float:
    """Width of the (inner_fraction * r)-neighborhood of E inside B(x, r), on a grid of spacing r/cells_per_radius."""
    x = as_vec(x)
    if not 0 < inner_fraction <= 1:
        raise ValueError("inner_fraction must lie in (0, 1]")
    h = r / cells_per_radius
    inner = inner_fraction * r
    span = r + inner
    ncell = int(math.ceil(2 * span / h))
    lo = x - span
    domain = GridDomain(tuple(lo), h, tuple([ncell] * len(x)), padding=s_max + 1)
    mask = np.linalg.norm(E.points - x, axis=1) < r
    local = E.subset(mask)
    if len(local) == 0:
        return 0.0
    G = neighborhood(local, inner, domain)
    return width_open(G, cone, s_max).value


def estimate_normal_cone(E: PointCloud, x, eps_list, r_list, directions, threshold: float = 0.1,
                         s_max: int = 3, cells_per_radius: int = 16,
                         inner_fraction: float = 0.25) -> NormalConeEstimate:
    """Directions whose local widths fall to ``threshold * r`` at some radius, for every aperture.

    The local sets are thickened by ``inner_fraction * r``, so any nonempty
    one has width of order ``2 * inner_fraction * r``; thresholds below that
    floor accept nothing.
    """
    x = as_vec(x)
    if not len(eps_list) or not len(r_list) or not len(directions):
        raise ValueError("eps_list, r_list and directions must be nonempty")
    dirs = np.asarray(directions, dtype=np.float64).reshape(-1, len(x))
    values = {}
    accepted = []
    for di, e in enumerate(dirs):
        ok_all = True
        for eps in eps_list:
            cone = Cone.from_direction(e, eps)
            ok = False
            for r in r_list:
                w = local_width(E, x, r, cone, s_max, cells_per_radius, inner_fraction)
                values[(di, float(eps), float(r))] = w
                if w <= threshold * r:
                    ok = True
            ok_all &= ok
        if ok_all:
            accepted.append(tuple(float(c) for c in e / np.linalg.norm(e)))
    return NormalConeEstimate(x, dirs, values, tuple(accepted), float(threshold))
