"""Cones, grid domains, grid sets, distance fields and test-set generators."""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy import ndimage

UNIT_TOL = 1e-12


def as_vec(v, n: Optional[int] = None) -> np.ndarray:
    """Coerce ``v`` to a float64 vector, optionally checking its dimension."""
    arr = np.asarray(v, dtype=np.float64).reshape(-1)
    if n is not None and arr.shape[0] != n:
        raise ValueError(f"expected a vector of dimension {n}, got {arr.shape[0]}")
    return arr


@dataclass(frozen=True)
class Cone:
    """The closed cone {v : <v, axis> >= aperture * |v|} around a unit axis."""

    axis: tuple
    aperture: float

    def __post_init__(self):
        axis = as_vec(self.axis)
        if axis.shape[0] < 2:
            raise ValueError("cone axis must have dimension >= 2")
        if abs(np.linalg.norm(axis) - 1.0) > UNIT_TOL:
            raise ValueError(f"cone axis must be a unit vector, |axis| = {np.linalg.norm(axis)!r}")
        if not (0.0 < self.aperture <= 1.0):
            raise ValueError(f"aperture must lie in (0, 1], got {self.aperture!r}")
        object.__setattr__(self, "axis", tuple(float(a) for a in axis))
        object.__setattr__(self, "aperture", float(self.aperture))

    @classmethod
    def from_direction(cls, direction, aperture: float) -> "Cone":
        """Build a cone from any nonzero direction by normalizing it."""
        d = as_vec(direction)
        norm = np.linalg.norm(d)
        if norm == 0.0:
            raise ValueError("cone direction must be nonzero")
        return cls(tuple(d / norm), aperture)

    @property
    def e(self) -> np.ndarray:
        return np.asarray(self.axis, dtype=np.float64)

    @property
    def n(self) -> int:
        return len(self.axis)


def cone_contains(cone: Cone, v) -> bool:
    """Return True when ``v`` lies in the cone; the zero vector always does."""
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.shape[0] != cone.n:
        raise ValueError(f"dimension mismatch: cone is {cone.n}-dimensional, vector has {v.shape[0]} entries")
    return bool(float(np.dot(v, cone.e)) >= cone.aperture * float(np.linalg.norm(v)))


@dataclass(frozen=True)
class GridDomain:
    """A box of ``dims`` cells of side ``h`` starting at ``origin``, padded by empty cells.

    Node arrays have shape ``node_shape`` and cell arrays ``cell_shape``; both
    include the padding, so array index ``i`` sits at ``lower + h * i``.
    """

    origin: tuple
    h: float
    dims: tuple
    padding: int = 4

    def __post_init__(self):
        origin = tuple(float(o) for o in np.asarray(self.origin, dtype=np.float64).reshape(-1))
        dims = tuple(int(d) for d in self.dims)
        if len(origin) != len(dims):
            raise ValueError("origin and dims must have the same length")
        if len(dims) < 2:
            raise ValueError("domain dimension must be >= 2")
        if any(d < 1 for d in dims):
            raise ValueError(f"all dims must be >= 1, got {dims}")
        if self.padding < 0:
            raise ValueError("padding must be >= 0")
        if not self.h > 0:
            raise ValueError("spacing h must be positive")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "h", float(self.h))
        object.__setattr__(self, "padding", int(self.padding))

    @classmethod
    def box(cls, lo, hi, h: float, padding: int = 4) -> "GridDomain":
        """Domain covering the box [lo, hi] (per axis) with spacing ``h``."""
        lo = as_vec(lo)
        hi = as_vec(hi, lo.shape[0])
        dims = tuple(max(1, int(math.ceil((b - a) / h - 1e-9))) for a, b in zip(lo, hi))
        return cls(tuple(lo), h, dims, padding)

    @property
    def n(self) -> int:
        return len(self.dims)

    @property
    def cell_shape(self) -> tuple:
        return tuple(d + 2 * self.padding for d in self.dims)

    @property
    def node_shape(self) -> tuple:
        return tuple(d + 2 * self.padding + 1 for d in self.dims)

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.origin) - self.padding * self.h

    @property
    def upper(self) -> np.ndarray:
        return self.lower + self.h * np.asarray(self.cell_shape, dtype=np.float64)

    @property
    def box_lower(self) -> np.ndarray:
        return np.asarray(self.origin, dtype=np.float64)

    @property
    def box_upper(self) -> np.ndarray:
        return np.asarray(self.origin) + self.h * np.asarray(self.dims, dtype=np.float64)

    def node(self, index) -> np.ndarray:
        """Coordinates of the node with array index ``index``."""
        return self.lower + self.h * np.asarray(index, dtype=np.float64)

    def node_coords(self) -> np.ndarray:
        """All node coordinates, shape ``node_shape + (n,)``."""
        axes = [self.lower[k] + self.h * np.arange(s) for k, s in enumerate(self.node_shape)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def cell_centers(self) -> np.ndarray:
        axes = [self.lower[k] + self.h * (np.arange(s) + 0.5) for k, s in enumerate(self.cell_shape)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def in_box(self, x, tol: float = 1e-12) -> bool:
        """True when ``x`` lies in the unpadded closed box."""
        x = as_vec(x, self.n)
        return bool(np.all(x >= self.box_lower - tol) and np.all(x <= self.box_upper + tol))

    def in_domain(self, x, tol: float = 1e-12) -> bool:
        """True when ``x`` lies in the padded closed box."""
        x = as_vec(x, self.n)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def padding_mask(self) -> np.ndarray:
        """Boolean cell array, True on padding cells."""
        mask = np.ones(self.cell_shape, dtype=bool)
        inner = tuple(slice(self.padding, self.padding + d) for d in self.dims)
        mask[inner] = False
        return mask

    def to_dict(self) -> dict:
        return {"origin": list(self.origin), "spacing": self.h, "dims": list(self.dims), "padding": self.padding}

    @classmethod
    def from_dict(cls, d: dict) -> "GridDomain":
        return cls(tuple(d["origin"]), float(d["spacing"]), tuple(d["dims"]), int(d["padding"]))


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GridSet:
    """An open set: the interior of the union of the closed occupied cells."""

    domain: GridDomain
    occupancy: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        occ = np.asarray(self.occupancy, dtype=bool)
        if occ.shape != self.domain.cell_shape:
            raise ValueError(f"occupancy shape {occ.shape} != cell shape {self.domain.cell_shape}")
        if np.any(occ & self.domain.padding_mask()):
            raise ValueError("padding cells must never be occupied")
        object.__setattr__(self, "occupancy", _frozen(occ))

    @classmethod
    def empty(cls, domain: GridDomain) -> "GridSet":
        return cls(domain, np.zeros(domain.cell_shape, dtype=bool))

    @classmethod
    def full(cls, domain: GridDomain) -> "GridSet":
        return cls(domain, ~domain.padding_mask())

    @classmethod
    def from_box(cls, domain: GridDomain, lo, hi) -> "GridSet":
        """Cells lying inside the closed box [lo, hi]."""
        c = domain.cell_centers()
        lo = as_vec(lo, domain.n)
        hi = as_vec(hi, domain.n)
        half = domain.h / 2
        occ = np.all((c - half >= lo - 1e-12) & (c + half <= hi + 1e-12), axis=-1)
        return cls(domain, occ & ~domain.padding_mask())

    @classmethod
    def from_node_mask(cls, domain: GridDomain, mask: np.ndarray) -> "GridSet":
        """Cells all of whose corner nodes are flagged in ``mask``."""
        mask = np.asarray(mask, dtype=bool)
        occ = np.ones(domain.cell_shape, dtype=bool)
        for corner in itertools.product((0, 1), repeat=domain.n):
            sl = tuple(slice(c, c + s) for c, s in zip(corner, domain.cell_shape))
            occ &= mask[sl]
        return cls(domain, occ & ~domain.padding_mask())

    @property
    def count(self) -> int:
        return int(self.occupancy.sum())

    def is_empty(self) -> bool:
        return not bool(self.occupancy.any())

    def __and__(self, other: "GridSet") -> "GridSet":
        self._check(other)
        return GridSet(self.domain, self.occupancy & other.occupancy)

    def __or__(self, other: "GridSet") -> "GridSet":
        self._check(other)
        return GridSet(self.domain, self.occupancy | other.occupancy)

    def minus(self, other: "GridSet") -> "GridSet":
        self._check(other)
        return GridSet(self.domain, self.occupancy & ~other.occupancy)

    def issubset(self, other: "GridSet") -> bool:
        self._check(other)
        return not bool(np.any(self.occupancy & ~other.occupancy))

    def same_as(self, other: "GridSet") -> bool:
        return self.domain == other.domain and np.array_equal(self.occupancy, other.occupancy)

    def _check(self, other: "GridSet"):
        if self.domain != other.domain:
            raise ValueError("grid sets live on different domains")

    def node_interior_mask(self) -> np.ndarray:
        """Nodes lying in the open set, i.e. all adjacent cells occupied."""
        d = self.domain
        padded = np.zeros(tuple(s + 2 for s in d.cell_shape), dtype=bool)
        padded[tuple(slice(1, -1) for _ in d.cell_shape)] = self.occupancy
        mask = np.ones(d.node_shape, dtype=bool)
        for corner in itertools.product((0, 1), repeat=d.n):
            sl = tuple(slice(c, c + s) for c, s in zip(corner, d.node_shape))
            mask &= padded[sl]
        return mask

    def contains_points(self, pts) -> np.ndarray:
        """Membership of points in the open set (interior of the occupied union)."""
        d = self.domain
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, d.n)
        out = np.ones(len(pts), dtype=bool)
        if not len(pts):
            return out
        u = (pts - d.lower) / d.h
        base = np.floor(u).astype(np.int64)
        # a point on a cell face or corner needs every adjacent cell occupied
        on_face = np.abs(u - np.rint(u)) < 1e-9
        base = np.where(on_face, np.rint(u).astype(np.int64), base)
        shape = np.asarray(d.cell_shape)
        for corner in itertools.product((0, 1), repeat=d.n):
            shift = np.asarray(corner)
            idx = base - np.where(on_face, shift, 0)
            valid = np.all((idx >= 0) & (idx < shape), axis=1)
            hit = np.zeros(len(pts), dtype=bool)
            hit[valid] = self.occupancy[tuple(idx[valid].T)]
            out &= hit
        return out


def distance_to_complement(G: GridSet, x) -> float:
    """Euclidean distance from ``x`` to the closed complement of ``G`` (brute force over cells)."""
    d = G.domain
    x = as_vec(x, d.n)
    if not d.in_domain(x):
        raise ValueError("point lies outside the grid domain")
    lo = d.lower
    # distance to everything outside the padded domain
    best = float(np.min(np.minimum(x - lo, d.upper - x)))
    free = np.argwhere(~G.occupancy)
    if free.size:
        cell_lo = lo + d.h * free
        cell_hi = cell_lo + d.h
        gap = np.maximum(np.maximum(cell_lo - x, x - cell_hi), 0.0)
        best = min(best, float(np.sqrt((gap * gap).sum(axis=1)).min()))
    return max(best, 0.0)


def rho_field(G: GridSet) -> np.ndarray:
    """Distance to the complement of ``G`` at every node (exact on the lattice)."""
    inside = G.node_interior_mask()
    if not inside.any():
        return np.zeros(G.domain.node_shape)
    return ndimage.distance_transform_edt(inside) * G.domain.h


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Sample points with optional normal data.

    ``normals`` holds one row per point; a row of NaN means "all directions".
    ``normals is None`` means the cloud carries no normal data at all.
    """

    points: np.ndarray
    normals: Optional[np.ndarray] = None
    delta: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts.reshape(0, 2) if pts.size == 0 else pts.reshape(1, -1)
        object.__setattr__(self, "points", _frozen(pts))
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64).reshape(pts.shape)
            finite = ~np.isnan(nrm).any(axis=1)
            norms = np.linalg.norm(nrm[finite], axis=1)
            if norms.size and np.max(np.abs(norms - 1.0)) > UNIT_TOL:
                raise ValueError("normal vectors must be unit")
            object.__setattr__(self, "normals", _frozen(nrm))
            delta = np.ones(len(pts)) if self.delta is None else np.asarray(self.delta, dtype=np.float64)
            if delta.shape != (len(pts),) or np.any(~(delta > 0)):
                raise ValueError("validity radii must be positive, one per point")
            object.__setattr__(self, "delta", _frozen(delta))

    @classmethod
    def empty(cls, n: int = 2, with_normals: bool = True) -> "PointCloud":
        pts = np.zeros((0, n))
        return cls(pts, np.zeros((0, n)) if with_normals else None, np.zeros(0) if with_normals else None)

    def __len__(self) -> int:
        return int(self.points.shape[0])

    @property
    def n(self) -> int:
        return int(self.points.shape[1])

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def full_space(self) -> np.ndarray:
        """Boolean mask of points whose normal data is "all directions"."""
        if self.normals is None:
            return np.zeros(len(self), dtype=bool)
        return np.isnan(self.normals).any(axis=1)

    def subset(self, mask) -> "PointCloud":
        mask = np.asarray(mask)
        return PointCloud(
            self.points[mask],
            None if self.normals is None else self.normals[mask],
            None if self.delta is None else self.delta[mask],
        )


def neighborhood(E: PointCloud, r: float, domain: GridDomain) -> GridSet:
    """Cells whose closure meets some open ball B(p, r), p in E.

    Cells that would fall in the padding are dropped and reported in ``meta``.
    """
    if not r > 0:
        raise ValueError("radius must be positive")
    meta = {"radius": float(r)}
    if r < domain.h / 2:
        meta["warning"] = f"radius {r:g} below h/2 = {domain.h / 2:g}; the set may not cover E between samples"
    occ = np.zeros(domain.cell_shape, dtype=bool)
    if len(E) == 0:
        return GridSet(domain, occ, meta)
    pts = E.points
    lo = domain.lower
    h = domain.h
    base = np.floor((pts - lo) / h).astype(np.int64)
    reach = int(math.ceil(r / h)) + 1
    shape = np.asarray(domain.cell_shape)
    pad = domain.padding_mask()
    clipped = False
    for off in itertools.product(range(-reach, reach + 1), repeat=domain.n):
        idx = base + np.asarray(off)
        cell_lo = lo + h * idx
        gap = np.maximum(np.maximum(cell_lo - pts, pts - (cell_lo + h)), 0.0)
        hit = np.sqrt((gap * gap).sum(axis=1)) < r
        inside = np.all((idx >= 0) & (idx < shape), axis=1)
        if np.any(hit & ~inside):
            clipped = True
        idx = idx[hit & inside]
        if idx.size:
            occ[tuple(idx.T)] = True
    if np.any(occ & pad):
        clipped = True
        occ &= ~pad
    if clipped:
        meta["clipped"] = True
    return GridSet(domain, occ, meta)


def gen_four_corner_cantor(depth: int) -> PointCloud:
    """Lower-left corners of the 4**depth squares of the four-corner Cantor construction."""
    if not (1 <= depth <= 8):
        raise ValueError("depth must lie in 1..8")
    pts = np.zeros((1, 2))
    corners = np.array([[0.0, 0.0], [0.75, 0.0], [0.0, 0.75], [0.75, 0.75]])
    for level in range(depth):
        scale = 0.25 ** level
        pts = (pts[:, None, :] + scale * corners[None, :, :]).reshape(-1, 2)
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]
    return PointCloud(pts, np.full(pts.shape, np.nan), np.ones(len(pts)))


def cantor_left_endpoints(ratio: float, depth: int) -> np.ndarray:
    """Left endpoints of the 2**depth intervals of the Cantor construction with the given ratio."""
    starts = np.zeros(1)
    length = 1.0
    for _ in range(depth):
        starts = np.concatenate([starts, starts + (1.0 - ratio) * length])
        length *= ratio
    return np.sort(starts)


def gen_cantor_product(ratio: float, depth: int, y_samples: int = 17) -> PointCloud:
    """Samples of C x [0, 1] with normal (1, 0) and validity radius 1.

    The x-coordinates are the left endpoints of the depth-level intervals; the
    y-coordinates are ``y_samples`` equispaced values in [0, 1].
    """
    if not (0.0 < ratio < 0.5):
        raise ValueError("ratio must lie in (0, 1/2)")
    if not (0 <= depth <= 10):
        raise ValueError("depth must lie in 0..10")
    if y_samples < 2:
        raise ValueError("need at least two y samples")
    xs = cantor_left_endpoints(ratio, depth)
    ys = np.linspace(0.0, 1.0, y_samples)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    normals = np.tile([1.0, 0.0], (len(pts), 1))
    return PointCloud(pts, normals, np.ones(len(pts)))


def bump_graph(s):
    """The fixed C^1 profile (1 - s^2)^2 on [-1, 1]."""
    s = np.asarray(s, dtype=np.float64)
    return (1.0 - s * s) ** 2


def bump_graph_slope(s):
    s = np.asarray(s, dtype=np.float64)
    return -4.0 * s * (1.0 - s * s)


def gen_graph_family(k_max: int, samples: int) -> PointCloud:
    """Graphs of profile/k for k = 0, +-1, ..., +-k_max with unit normals (-slope, 1)."""
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    if samples < 16:
        raise ValueError("samples must be >= 16")
    s = np.linspace(-1.0, 1.0, samples)
    ks = [0] + [k for j in range(1, k_max + 1) for k in (j, -j)]
    pts, nrm = [], []
    for k in ks:
        if k == 0:
            y = np.zeros_like(s)
            slope = np.zeros_like(s)
        else:
            y = bump_graph(s) / k
            slope = bump_graph_slope(s) / k
        v = np.stack([-slope, np.ones_like(s)], axis=1)
        pts.append(np.stack([s, y], axis=1))
        nrm.append(v / np.linalg.norm(v, axis=1, keepdims=True))
    pts = np.concatenate(pts)
    return PointCloud(pts, np.concatenate(nrm), np.ones(len(pts)))


def rational_lines() -> Iterator[tuple]:
    """Diagonal enumeration of lines y = (p/q) x + r/s by increasing height.

    Height is max(|p|, q, |r|, s); within a height, p and r run 0, 1, -1, 2, -2, ...
    and q, s run upward. Each line (as a pair of reduced fractions) appears once.
    """
    seen = set()
    height = 1

    def signed(m):
        yield 0
        for a in range(1, m + 1):
            yield a
            yield -a

    while True:
        for p in signed(height):
            for q in range(1, height + 1):
                for r in signed(height):
                    for s in range(1, height + 1):
                        if max(abs(p), q, abs(r), s) != height:
                            continue
                        key = (Fraction(p, q), Fraction(r, s))
                        if key in seen:
                            continue
                        seen.add(key)
                        yield key
        height += 1


def gen_line_neighborhood_set(line_count: int, eps_budget: float, cone: Cone, domain: GridDomain) -> GridSet:
    """Rasterized union of eps_j-strips around the admissible ones among the first lines.

    Line j (1-based) of the enumeration is kept when its unit direction u has
    |<u, axis>| < aperture / 2; its strip half-width is eps_budget * 2**-j.
    """
    if line_count < 1:
        raise ValueError("line_count must be >= 1")
    if not eps_budget > 0:
        raise ValueError("eps_budget must be positive")
    if domain.n != 2 or cone.n != 2:
        raise ValueError("line sets are planar")
    e = cone.e
    nodes = domain.node_coords()
    occ = np.zeros(domain.cell_shape, dtype=bool)
    kept = []
    for j, (slope, icpt) in enumerate(itertools.islice(rational_lines(), line_count), start=1):
        u = np.array([1.0, float(slope)])
        u /= np.linalg.norm(u)
        if not abs(float(u @ e)) < cone.aperture / 2:
            continue
        eps_j = eps_budget * 2.0 ** (-j)
        kept.append((str(slope), str(icpt), eps_j))
        normal = np.array([-u[1], u[0]])
        c0 = np.array([0.0, float(icpt)])
        sd = (nodes - c0) @ normal
        # min over the closed cell of |signed distance| is < eps_j
        corners = [sd[i:i + occ.shape[0], k:k + occ.shape[1]] for i in (0, 1) for k in (0, 1)]
        lo = np.minimum.reduce(corners)
        hi = np.maximum.reduce(corners)
        dist = np.where((lo <= 0) & (hi >= 0), 0.0, np.minimum(np.abs(lo), np.abs(hi)))
        occ |= dist < eps_j
    occ &= ~domain.padding_mask()
    return GridSet(domain, occ, {"lines": kept})


def write_gridset(G: GridSet, path) -> None:
    """Write a binary PBM (P4) plus a JSON sidecar with the domain header."""
    path = Path(path)
    d = G.domain
    if d.n != 2:
        raise ValueError("PBM export is planar")
    nx, ny = d.cell_shape
    # image rows run from top (largest y) to bottom
    img = G.occupancy.T[::-1, :]
    packed = np.packbits(img.astype(np.uint8), axis=1)
    with open(path, "wb") as fh:
        fh.write(f"P4\n{nx} {ny}\n".encode("ascii"))
        fh.write(packed.tobytes())
    header = d.to_dict()
    header["meta"] = {k: v for k, v in G.meta.items() if isinstance(v, (str, int, float, bool))}
    Path(str(path) + ".json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")


def read_gridset(path) -> GridSet:
    path = Path(path)
    header = json.loads(Path(str(path) + ".json").read_text())
    d = GridDomain.from_dict(header)
    raw = path.read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 3:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while raw[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P4":
        raise ValueError("not a binary PBM file")
    nx, ny = int(tokens[1]), int(tokens[2])
    if (nx, ny) != d.cell_shape:
        raise ValueError("PBM size does not match its header")
    row_bytes = (nx + 7) // 8
    packed = np.frombuffer(raw[pos:pos + row_bytes * ny], dtype=np.uint8).reshape(ny, row_bytes)
    img = np.unpackbits(packed, axis=1)[:, :nx].astype(bool)
    return GridSet(d, img[::-1, :].T.copy())


def write_pointcloud(E: PointCloud, path) -> None:
    """CSV with columns x, y[, z...], nx, ny[, ...], delta; blank normals mean all directions."""
    n = E.n
    names = ["x", "y", "z"][:n] if n <= 3 else [f"x{k}" for k in range(n)]
    cols = names + ["n" + c for c in names] + ["delta"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for i in range(len(E)):
            row = [repr(float(v)) for v in E.points[i]]
            if E.normals is None or np.isnan(E.normals[i]).any():
                row += [""] * n
            else:
                row += [repr(float(v)) for v in E.normals[i]]
            row.append("" if E.delta is None else repr(float(E.delta[i])))
            w.writerow(row)


def read_pointcloud(path) -> PointCloud:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError("empty point file")
    head = rows[0]
    if head[-1] != "delta" or (len(head) - 1) % 2:
        raise ValueError(f"unexpected CSV header {head}")
    n = (len(head) - 1) // 2
    body = rows[1:]
    pts = np.array([[float(v) for v in r[:n]] for r in body], dtype=np.float64).reshape(-1, n)
    has_delta = any(r[-1] != "" for r in body)
    if not body:
        return PointCloud(np.zeros((0, n)), np.zeros((0, n)), np.zeros(0))
    nrm = np.array([[float(v) if v != "" else np.nan for v in r[n:2 * n]] for r in body])
    delta = np.array([float(r[-1]) if r[-1] != "" else 1.0 for r in body])
    return PointCloud(pts, nrm if has_delta else None, delta if has_delta else None)


def points_in_box(E: PointCloud, lo: Sequence[float], hi: Sequence[float], tol: float = 1e-12) -> bool:
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    return bool(np.all((E.points >= lo - tol) & (E.points <= hi + tol)))
