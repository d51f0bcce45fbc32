"""Grid-sampled scalar and vector fields with multilinear interpolation."""

from __future__ import annotations

import csv
import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import GridDomain, _frozen, as_vec

MAGIC = b"SFLD"
FORMAT_VERSION = 1


def _corner_slices(shape, corner):
    return tuple(slice(c, c + s - 1) for c, s in zip(corner, shape))


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Real node samples on a grid domain, read through the multilinear interpolant."""

    domain: GridDomain
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.shape != self.domain.node_shape:
            raise ValueError(f"values shape {vals.shape} != node shape {self.domain.node_shape}")
        object.__setattr__(self, "values", _frozen(vals))
        object.__setattr__(self, "_lip", None)

    @classmethod
    def zeros(cls, domain: GridDomain) -> "ScalarField":
        return cls(domain, np.zeros(domain.node_shape))

    @classmethod
    def constant(cls, domain: GridDomain, c: float) -> "ScalarField":
        return cls(domain, np.full(domain.node_shape, float(c)))

    @classmethod
    def from_function(cls, domain: GridDomain, fn) -> "ScalarField":
        """Sample ``fn`` (vectorized over an (..., n) coordinate array) at every node."""
        return cls(domain, np.asarray(fn(domain.node_coords()), dtype=np.float64))

    def __add__(self, other: "ScalarField") -> "ScalarField":
        self._check(other)
        return ScalarField(self.domain, self.values + other.values)

    def __sub__(self, other: "ScalarField") -> "ScalarField":
        self._check(other)
        return ScalarField(self.domain, self.values - other.values)

    def scaled(self, c: float) -> "ScalarField":
        return ScalarField(self.domain, c * self.values)

    def _check(self, other):
        if self.domain != other.domain:
            raise ValueError("fields live on different domains")

    def at_node(self, index) -> float:
        return float(self.values[tuple(index)])

    def __call__(self, x) -> np.ndarray | float:
        """Multilinear interpolation at a point (n,) or points (m, n)."""
        pts = np.asarray(x, dtype=np.float64)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts)
        out = interpolate(self.values, self.domain, pts)
        return float(out[0]) if single else out

    def lipschitz(self) -> float:
        """Exact Lipschitz constant of the multilinear interpolant.

        On each cell every partial derivative is multi-affine, so the gradient
        norm is convex there and peaks at a cell vertex, where the partials
        are the adjacent edge differences over h.
        """
        if self._lip is None:
            object.__setattr__(self, "_lip", lipschitz_of_values(self.values, self.domain.h))
        return self._lip

    def fd_gradient(self) -> np.ndarray:
        """Central-difference gradient at nodes (one-sided on the boundary)."""
        return np.stack(np.gradient(self.values, self.domain.h, edge_order=1), axis=-1)

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values)))

    def write(self, path) -> None:
        """Binary export: magic, version, ndim, dims, padding, origin, spacing, float64 samples."""
        d = self.domain
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<II", FORMAT_VERSION, d.n))
            fh.write(struct.pack(f"<{d.n}q", *d.dims))
            fh.write(struct.pack("<q", d.padding))
            fh.write(struct.pack(f"<{d.n}d", *d.origin))
            fh.write(struct.pack("<d", d.h))
            fh.write(np.ascontiguousarray(self.values, dtype="<f8").tobytes())

    @classmethod
    def read(cls, path) -> "ScalarField":
        raw = Path(path).read_bytes()
        if raw[:4] != MAGIC:
            raise ValueError("not a scalar field file")
        version, n = struct.unpack_from("<II", raw, 4)
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported field format version {version}")
        pos = 12
        dims = struct.unpack_from(f"<{n}q", raw, pos)
        pos += 8 * n
        (padding,) = struct.unpack_from("<q", raw, pos)
        pos += 8
        origin = struct.unpack_from(f"<{n}d", raw, pos)
        pos += 8 * n
        (h,) = struct.unpack_from("<d", raw, pos)
        pos += 8
        d = GridDomain(origin, h, dims, padding)
        vals = np.frombuffer(raw, dtype="<f8", offset=pos).reshape(d.node_shape)
        return cls(d, vals.astype(np.float64))

    def write_csv(self, path) -> None:
        d = self.domain
        coords = d.node_coords().reshape(-1, d.n)
        vals = self.values.reshape(-1)
        names = ["x", "y", "z"][: d.n] if d.n <= 3 else [f"x{k}" for k in range(d.n)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(names + ["value"])
            for c, v in zip(coords, vals):
                w.writerow([repr(float(a)) for a in c] + [repr(float(v))])


@dataclass(frozen=True, eq=False)
class VectorField:
    """One vector per grid node."""

    domain: GridDomain
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.shape != self.domain.node_shape + (self.domain.n,):
            raise ValueError("vector field shape does not match its domain")
        object.__setattr__(self, "values", _frozen(vals))

    @classmethod
    def constant(cls, domain: GridDomain, v) -> "VectorField":
        v = as_vec(v, domain.n)
        return cls(domain, np.broadcast_to(v, domain.node_shape + (domain.n,)))

    def norm(self) -> np.ndarray:
        return np.linalg.norm(self.values, axis=-1)

    def __call__(self, x) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
        comps = [interpolate(self.values[..., k], self.domain, pts) for k in range(self.domain.n)]
        out = np.stack(comps, axis=-1)
        return out[0] if np.asarray(x).ndim == 1 else out


def lipschitz_of_values(values: np.ndarray, h: float) -> float:
    n = values.ndim
    if min(values.shape) < 2:
        return 0.0
    best = 0.0
    cell_shape = tuple(s - 1 for s in values.shape)
    for vertex in itertools.product((0, 1), repeat=n):
        sq = np.zeros(cell_shape)
        for k in range(n):
            lo = list(vertex)
            hi = list(vertex)
            lo[k], hi[k] = 0, 1
            diff = values[_corner_slices(values.shape, hi)] - values[_corner_slices(values.shape, lo)]
            sq += diff * diff
        best = max(best, float(np.sqrt(sq.max())))
    return best / h


def interpolate(values: np.ndarray, domain: GridDomain, pts: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of node ``values`` at points ``pts`` (m, n)."""
    n = domain.n
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, n)
    u = (pts - domain.lower) / domain.h
    hi = np.asarray(values.shape) - 1
    if np.any(u < -1e-9) or np.any(u > hi + 1e-9):
        raise ValueError("evaluation point outside the grid domain")
    u = np.clip(u, 0, hi)
    base = np.minimum(np.floor(u).astype(np.int64), hi - 1)
    frac = u - base
    out = np.zeros(len(pts))
    for corner in itertools.product((0, 1), repeat=n):
        c = np.asarray(corner)
        w = np.prod(np.where(c == 1, frac, 1.0 - frac), axis=1)
        out += w * values[tuple((base + c).T)]
    return out


