"""Finite windows of k^{-1} Z^d, grid functions and the dyadic decomposition.

Boxes follow the half-open convention ``c + (-M, M]^d``.  Points are kept
as integer coordinates in units of ``1/k`` and enumerated row-major (last
coordinate fastest).
"""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DomainError


def _fraction(value) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, int):
        return Fraction(value)
    return Fraction(value).limit_denominator(1 << 20)


@dataclass(frozen=True, eq=False)
class LatticeBox:
    """The points of ``center + (-M, M]^d`` on the lattice k^{-1} Z^d.

    ``center`` is given in lattice units, i.e. as an integer vector ``c``
    with physical center ``c / k``.
    """

    k: int
    M: Fraction
    d: int
    center: tuple = None

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 1:
            raise ConfigurationError(f"k must be a positive integer, got {self.k}")
        if self.d < 1:
            raise ConfigurationError(f"dimension must be positive, got {self.d}")
        M = _fraction(self.M)
        if M <= 0:
            raise ConfigurationError(f"half-width must be positive, got {self.M}")
        if (2 * M * self.k).denominator != 1:
            raise ConfigurationError(f"2*M*k must be an integer (M={M}, k={self.k})")
        center = (0,) * self.d if self.center is None else tuple(int(c) for c in self.center)
        if len(center) != self.d:
            raise ConfigurationError("center has the wrong dimension")
        object.__setattr__(self, "k", int(self.k))
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "center", center)

    @property
    def side(self) -> int:
        """Number of points along each axis."""
        return int(2 * self.M * self.k)

    @property
    def size(self) -> int:
        return self.side**self.d

    def __len__(self):
        return self.size

    @property
    def lo(self) -> np.ndarray:
        """Smallest integer coordinate along each axis."""
        return np.array(self.center, dtype=np.int64) + (math.floor(-self.M * self.k) + 1)

    @cached_property
    def int_points(self) -> np.ndarray:
        axes = [np.arange(self.side, dtype=np.int64) + lo for lo in self.lo]
        grid = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([g.reshape(-1) for g in grid], axis=1)
        pts.setflags(write=False)
        return pts

    @cached_property
    def points(self) -> np.ndarray:
        pts = self.int_points / self.k
        pts.setflags(write=False)
        return pts

    def index_of(self, int_points) -> np.ndarray:
        """Row-major indices of integer points, -1 for points outside."""
        p = np.atleast_2d(np.asarray(int_points, dtype=np.int64)) - self.lo
        inside = np.all((p >= 0) & (p < self.side), axis=1)
        idx = np.zeros(len(p), dtype=np.int64)
        for axis in range(self.d):
            idx = idx * self.side + p[:, axis]
        return np.where(inside, idx, -1)

    def contains(self, int_points) -> np.ndarray:
        return self.index_of(int_points) >= 0

    def subset_indices(self, other: "LatticeBox") -> np.ndarray:
        """Indices in ``self`` of every point of ``other`` (which must lie inside)."""
        if other.k != self.k or other.d != self.d:
            raise DomainError("sub-box must share k and dimension")
        idx = self.index_of(other.int_points)
        if np.any(idx < 0):
            raise DomainError("sub-box is not contained in the box")
        return idx

    def same_as(self, other: "LatticeBox") -> bool:
        return (
            self.k == other.k and self.M == other.M and self.d == other.d and self.center == other.center
        )

    def __repr__(self):
        return f"LatticeBox(k={self.k}, M={self.M}, d={self.d}, center={self.center})"


def box_points(k: int, M, d: int, center=None) -> LatticeBox:
    return LatticeBox(k, M, d, center)


def integer_box(radius, d: int, center=None) -> LatticeBox:
    """``B_r(y) ∩ Z^d`` for integer center ``y``."""
    return LatticeBox(1, radius, d, center)


@dataclass(eq=False)
class GridFunction:
    """Scalar or vector values attached to the points of a box."""

    box: LatticeBox
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape[0] != self.box.size or self.values.ndim > 2:
            raise DomainError(
                f"values of shape {self.values.shape} do not match a box of {self.box.size} points"
            )

    @property
    def ncomp(self) -> int:
        return 1 if self.values.ndim == 1 else self.values.shape[1]

    def norm(self) -> float:
        """L^2(mu^k) norm; mu^k puts mass k^{-d} on each point."""
        return math.sqrt(np.sum(self.values**2) * self.box.k ** (-self.box.d))

    def inner(self, other: "GridFunction") -> float:
        return float(np.sum(self.values * other.values)) * self.box.k ** (-self.box.d)

    def to_csv(self, path):
        write_grid_csv(self, path)

    def to_binary(self, path):
        write_grid_binary(self, path)


def average(f: GridFunction, sub_box: LatticeBox = None):
    """Arithmetic mean of ``f`` over ``sub_box`` (default: the whole box)."""
    if sub_box is None:
        vals = f.values
    else:
        if sub_box.size == 0:
            raise DomainError("cannot average over an empty box")
        vals = f.values[f.box.subset_indices(sub_box)]
    if len(vals) == 0:
        raise DomainError("cannot average over an empty box")
    return vals.mean(axis=0)


@dataclass(frozen=True)
class DyadicDecomposition:
    """Centers of the cubes ``z + (-2^n, 2^n]^d`` tiling ``(-2^m, 2^m]^d``."""

    m: int
    n: int
    d: int
    centers: np.ndarray = field(repr=False)

    @property
    def count(self) -> int:
        return len(self.centers)

    def cell_of(self, int_points) -> np.ndarray:
        """Index into ``centers`` of the cell containing each point of Z^d."""
        p = np.atleast_2d(np.asarray(int_points, dtype=np.int64))
        half, width = 1 << self.m, 1 << (self.n + 1)
        t = (p + half - 1) // width
        per_axis = 1 << (self.m - self.n)
        if np.any((p <= -half) | (p > half)):
            raise DomainError("point outside (-2^m, 2^m]^d")
        idx = np.zeros(len(p), dtype=np.int64)
        for axis in range(self.d):
            idx = idx * per_axis + t[:, axis]
        return idx

    def cell_box(self, i: int) -> LatticeBox:
        return LatticeBox(1, 1 << self.n, self.d, tuple(self.centers[i]))


def multiscale_centers(m: int, n: int, d: int) -> DyadicDecomposition:
    """The set Z^d_{m,n}: points of B_{2^m} whose coordinates are odd multiples of 2^n."""
    if n < 0 or m < 0:
        raise DomainError("levels must be non-negative")
    if n > m:
        raise DomainError(f"sublevel n={n} exceeds level m={m}")
    if m == n:
        centers = np.zeros((1, d), dtype=np.int64)
    else:
        axis = (2 * np.arange(1 << (m - n), dtype=np.int64) + 1 - (1 << (m - n))) << n
        grid = np.meshgrid(*([axis] * d), indexing="ij")
        centers = np.stack([g.reshape(-1) for g in grid], axis=1)
    centers.setflags(write=False)
    return DyadicDecomposition(m, n, d, centers)


def block_averages(f: GridFunction, decomposition: DyadicDecomposition) -> np.ndarray:
    """Average of ``f`` over every cell of the decomposition, in center order."""
    box = f.box
    if box.k != 1 or box.M != (1 << decomposition.m) or any(box.center):
        raise DomainError("block averages need f on B_{2^m} ∩ Z^d centered at 0")
    cells = decomposition.cell_of(box.int_points)
    counts = np.bincount(cells, minlength=decomposition.count)
    vals = f.values if f.values.ndim == 2 else f.values[:, None]
    sums = np.stack(
        [np.bincount(cells, weights=vals[:, c], minlength=decomposition.count) for c in range(vals.shape[1])],
        axis=1,
    )
    out = sums / counts[:, None]
    return out if f.values.ndim == 2 else out[:, 0]


class PiecewiseConstant:
    """Step extension of a grid function to R^d.

    A lattice point ``z`` owns the cell ``prod_i (z_i - 1/k, z_i]``, so the
    cells of a box tile ``c + (-M, M]^d`` exactly when Mk is an integer.
    Outside the box the extension vanishes.
    """

    def __init__(self, u: GridFunction):
        self.u = u
        self.box = u.box

    def owner(self, x) -> np.ndarray:
        """Integer coordinates of the lattice point owning each real point."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.ceil(x * self.box.k).astype(np.int64)

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        idx = self.box.index_of(self.owner(x))
        vals = self.u.values
        shape = (len(x),) + vals.shape[1:]
        out = np.zeros(shape)
        inside = idx >= 0
        out[inside] = vals[idx[inside]]
        return out

    def l2_norm(self) -> float:
        cell_volume = self.box.k ** (-self.box.d)
        return math.sqrt(cell_volume * float(np.sum(self.u.values**2)))


def embed_piecewise_constant(u: GridFunction) -> PiecewiseConstant:
    return PiecewiseConstant(u)


def l2_distance(u: GridFunction, g) -> float:
    """Lattice-sampled L^2(mu^k) distance between ``u`` and a function ``g``.

    ``g`` maps an ``(n, d)`` array of physical points to values.  This is a
    surrogate for the L^2(R^d) distance of the step extension; the two
    differ by O(1/k) times the Lipschitz constant of ``g``.
    """
    ref = np.asarray(g(u.box.points), dtype=float).reshape(u.values.shape)
    diff = u.values - ref
    return math.sqrt(float(np.sum(diff**2)) * u.box.k ** (-u.box.d))


# persistence -----------------------------------------------------------

_HEADER = "<6q"


def write_grid_binary(f: GridFunction, path):
    """Little-endian: int64 header (k, M_num, M_den, d, count, ncomp), int64 center[d], float64 values."""
    box = f.box
    with open(path, "wb") as fh:
        fh.write(struct.pack(_HEADER, box.k, box.M.numerator, box.M.denominator, box.d, box.size, f.ncomp))
        fh.write(np.asarray(box.center, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(f.values, dtype="<f8").tobytes())


def read_grid_binary(path) -> GridFunction:
    data = Path(path).read_bytes()
    hsize = struct.calcsize(_HEADER)
    k, num, den, d, count, ncomp = struct.unpack(_HEADER, data[:hsize])
    center = np.frombuffer(data[hsize : hsize + 8 * d], dtype="<i8")
    box = LatticeBox(k, Fraction(num, den), d, tuple(int(c) for c in center))
    if box.size != count:
        raise ConfigurationError(f"{path}: header count {count} does not match the box")
    vals = np.frombuffer(data[hsize + 8 * d :], dtype="<f8").copy()
    if vals.size != count * ncomp:
        raise ConfigurationError(f"{path}: truncated value block")
    return GridFunction(box, vals if ncomp == 1 else vals.reshape(count, ncomp))


def write_grid_csv(f: GridFunction, path):
    box = f.box
    vals = f.values if f.values.ndim == 2 else f.values[:, None]
    header = [f"x{i + 1}" for i in range(box.d)] + [f"v{j + 1}" for j in range(vals.shape[1])]
    with open(path, "w", newline="") as fh:
        fh.write(f"# k={box.k} M={box.M} d={box.d} center={','.join(map(str, box.center))}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for p, v in zip(box.points, vals):
            w.writerow([repr(float(c)) for c in p] + [repr(float(c)) for c in v])


def read_grid_csv(path) -> GridFunction:
    text = Path(path).read_text()
    first, _, rest = text.partition("\n")
    meta = dict(item.split("=", 1) for item in first.lstrip("# ").split())
    center = tuple(int(c) for c in meta["center"].split(",")) if meta.get("center") else None
    box = LatticeBox(int(meta["k"]), Fraction(meta["M"]), int(meta["d"]), center)
    rows = list(csv.reader(io.StringIO(rest)))
    header, body = rows[0], rows[1:]
    arr = np.array(body, dtype=float)
    vals = arr[:, box.d :]
    pts = np.rint(arr[:, : box.d] * box.k).astype(np.int64)
    if not np.array_equal(pts, box.int_points):
        raise ConfigurationError(f"{path}: point list does not match the box header")
    return GridFunction(box, vals[:, 0] if len(header) == box.d + 1 else vals)
