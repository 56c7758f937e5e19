"""Discrete jump generators on lattice boxes, Dirichlet energies and the potential V.

In lattice units a pair of points ``x = i/k``, ``y = j/k`` interacts with
strength ``k^alpha * w_{i,j} / |i - j|^(d+alpha)``; the ``k^{-d}`` of the
measure and the ``k^{d+alpha}`` of the distance combine into ``k^alpha``.

Two boundary treatments are offered.  ``restricted`` keeps only the jumps
inside the box (constants are in the kernel).  ``killed`` treats the box as
the support of the argument and adds the jumps to the exterior with unit
weights, which makes it exact for the whole-lattice operator with mean
weights outside the box.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property, lru_cache

import numba as nb
import numpy as np
from scipy import fft as sfft
from scipy import integrate

from .environment import Environment, pair_weight
from .errors import ConfigurationError, DomainError, ResourceError
from .lattice import GridFunction, LatticeBox

VARIANTS = ("random", "reference", "compensated")
BOUNDARIES = ("restricted", "killed")

DENSE_LIMIT = 4096
# a cached dense matrix of this many rows costs about 2 GiB
CACHE_LIMIT = int(os.environ.get("STABLE_HOMOG_DENSE_CACHE", 16384))


def check_alpha(alpha):
    if not 0.0 < alpha < 2.0:
        raise DomainError(f"alpha must lie in (0, 2), got {alpha}")


# ---------------------------------------------------------------------------
# numba kernels


@nb.njit(inline="always", cache=True)
def _offset_index(pts, i, j, side, d):
    idx = 0
    for a in range(d):
        diff = pts[i, a] - pts[j, a]
        if diff < 0:
            diff = -diff
        idx = idx * side + diff
    return idx


@nb.njit(parallel=True, cache=True)
def _apply_rows(pts, f, table, side, seed, kind, param, kappa, out):
    n, d = pts.shape
    nc = f.shape[1]
    for i in nb.prange(n):
        acc = np.zeros(nc)
        for j in range(n):
            if j == i:
                continue
            t = table[_offset_index(pts, i, j, side, d)]
            if t == 0.0:
                continue
            kw = t * pair_weight(seed, kind, param, pts[i], pts[j])
            for c in range(nc):
                acc[c] += kw * (f[j, c] - f[i, c])
        for c in range(nc):
            out[i, c] = acc[c] - kappa[i] * f[i, c]


@nb.njit(parallel=True, cache=True)
def _fill_dense(pts, table, side, seed, kind, param, A):
    n, d = pts.shape
    # full rows keep the writes contiguous; the canonical pair key makes
    # A[i, j] and A[j, i] bitwise equal
    for i in nb.prange(n):
        for j in range(n):
            if j == i:
                continue
            t = table[_offset_index(pts, i, j, side, d)]
            if t == 0.0:
                continue
            A[i, j] = t * pair_weight(seed, kind, param, pts[i], pts[j])


@nb.njit(parallel=True, cache=True)
def _row_stats(pts, table, side, seed, kind, param, comp_r2, k, rsw, rs1, bw, b1):
    n, d = pts.shape
    for i in nb.prange(n):
        for j in range(n):
            if j == i:
                continue
            t = table[_offset_index(pts, i, j, side, d)]
            if t == 0.0:
                continue
            kw = t * pair_weight(seed, kind, param, pts[i], pts[j])
            rsw[i] += kw
            rs1[i] += t
            r2 = 0.0
            for a in range(d):
                r2 += float(pts[j, a] - pts[i, a]) ** 2
            if r2 <= comp_r2:
                for a in range(d):
                    z = (pts[j, a] - pts[i, a]) / k
                    bw[i, a] += z * kw
                    b1[i, a] += z * t


@nb.njit(parallel=True, cache=True)
def _energy(pts, f, seed, kind, param, expo, out):
    n, d = pts.shape
    nc = f.shape[1]
    for i in nb.prange(n):
        acc = 0.0
        for j in range(i + 1, n):
            r2 = 0.0
            for a in range(d):
                r2 += float(pts[i, a] - pts[j, a]) ** 2
            w = pair_weight(seed, kind, param, pts[i], pts[j])
            if w == 0.0:
                continue
            s = 0.0
            for c in range(nc):
                s += (f[i, c] - f[j, c]) ** 2
            acc += s * w * r2 ** (-0.5 * expo)
        out[i] = acc


@nb.njit(parallel=True, cache=True)
def _potential(pts, offsets, coefs, seed, kind, param, paired, shift, out):
    n, d = pts.shape
    m = offsets.shape[0]
    for i in nb.prange(n):
        x = pts[i]
        y = np.empty(d, dtype=np.int64)
        yb = np.empty(d, dtype=np.int64)
        acc = np.zeros(d)
        for s in range(m):
            for a in range(d):
                y[a] = x[a] + offsets[s, a]
            w = pair_weight(seed, kind, param, x, y)
            if paired:
                for a in range(d):
                    yb[a] = x[a] - offsets[s, a]
                w = w - pair_weight(seed, kind, param, x, yb)
            else:
                w = w - shift
            for a in range(d):
                acc[a] += coefs[s, a] * w
        for a in range(d):
            out[i, a] = acc[a]


@nb.njit(cache=True)
def _find(parent, i):
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


@nb.njit(cache=True)
def _components(pts, table, side, seed, kind, param):
    n, d = pts.shape
    parent = np.arange(n)
    for i in range(n):
        for j in range(i + 1, n):
            t = table[_offset_index(pts, i, j, side, d)]
            if t == 0.0 or pair_weight(seed, kind, param, pts[i], pts[j]) == 0.0:
                continue
            a = _find(parent, i)
            b = _find(parent, j)
            if a != b:
                parent[max(a, b)] = min(a, b)
    count = 0
    for i in range(n):
        if _find(parent, i) == i:
            count += 1
    return count


# ---------------------------------------------------------------------------
# lattice sums


def _ball_offsets(radius: float, d: int, half: bool = False) -> np.ndarray:
    """Nonzero integer vectors with |z| <= radius (only z > 0 lexicographically if ``half``)."""
    r = int(math.floor(radius))
    axis = np.arange(-r, r + 1, dtype=np.int64)
    grid = np.stack([g.reshape(-1) for g in np.meshgrid(*([axis] * d), indexing="ij")], axis=1)
    r2 = np.sum(grid**2, axis=1)
    keep = (r2 > 0) & (r2 <= radius * radius + 1e-9)
    if half:
        first = np.zeros(len(grid), dtype=bool)
        decided = np.zeros(len(grid), dtype=bool)
        for a in range(d):
            first |= ~decided & (grid[:, a] > 0)
            decided |= grid[:, a] != 0
        keep &= first
    return grid[keep]


@lru_cache(maxsize=None)
def _outside_cube_integral(d: int, alpha: float) -> float:
    """Integral of |z|^{-d-alpha} over the complement of [-1, 1]^d.

    Radially this is (1/alpha) times the integral of |t|_inf^alpha over the
    sphere; projecting the sphere onto the 2d cube faces turns that into
    2d * int_{[-1,1]^{d-1}} (1 + |u|^2)^{-(d+alpha)/2} du, a smooth integrand.
    """
    if d == 1:
        return 2.0 / alpha
    p = -(d + alpha) / 2
    if d == 2:
        val, _ = integrate.quad(lambda u: (1 + u * u) ** p, 0.0, 1.0, epsabs=0, epsrel=1e-13)
        return 2 * d * 2 * val / alpha
    val, _ = integrate.dblquad(lambda v, u: (1 + u * u + v * v) ** p, 0.0, 1.0, 0.0, 1.0, epsabs=0, epsrel=1e-13)
    return 2 * d * 4 * val / alpha


_CUBE_HALF = {1: 1 << 16, 2: 1024, 3: 128}


@lru_cache(maxsize=None)
def lattice_zeta(d: int, alpha: float, cutoff: float = None) -> float:
    """Sum of |z|^{-d-alpha} over nonzero z in Z^d (within ``cutoff`` if given).

    The untruncated sum is taken exactly over a large cube and the remainder
    is the integral of the kernel outside the cube's cells; the midpoint
    error of that integral is O(L^{-alpha-2}).
    """
    check_alpha(alpha)
    if cutoff is not None:
        z = _ball_offsets(cutoff, d)
        return float(np.sum(np.sum(z.astype(float) ** 2, axis=1) ** (-(d + alpha) / 2)))
    L = _CUBE_HALF[d]
    axis = np.arange(-L, L + 1, dtype=float) ** 2
    total = 0.0
    if d == 1:
        r2 = axis[axis > 0]
        total = float(np.sum(r2 ** (-(1 + alpha) / 2)))
    else:
        rest = np.add.outer(axis, axis) if d == 3 else axis
        for a2 in axis:
            r2 = (a2 + rest).reshape(-1)
            r2 = r2[r2 > 0]
            total += float(np.sum(r2 ** (-(d + alpha) / 2)))
    return total + (L + 0.5) ** (-alpha) * _outside_cube_integral(d, alpha)


# ---------------------------------------------------------------------------
# operator


class NonlocalOperator:
    """A discrete jump generator on a lattice box.

    Parameters
    ----------
    box : LatticeBox
        Window of k^{-1} Z^d; ``box.k`` is the scale.
    alpha : float
        Stability index in (0, 2).
    env : Environment or None
        ``None`` means unit weights.  The ``reference`` variant always uses
        unit weights.
    variant : {"random", "reference", "compensated"}
    boundary : {"restricted", "killed"}
    jump_cutoff : float, optional
        Keep only jumps with |i - j| <= cutoff in lattice units.
    """

    def __init__(
        self,
        box: LatticeBox,
        alpha: float,
        env: Environment = None,
        variant: str = "random",
        boundary: str = "restricted",
        jump_cutoff: float = None,
        r_ext_factor: float = 2.0,
    ):
        check_alpha(alpha)
        if variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {variant!r}")
        if boundary not in BOUNDARIES:
            raise ConfigurationError(f"unknown boundary mode {boundary!r}")
        if env is not None and env.dim != box.d:
            raise DomainError("environment and box dimensions differ")
        if jump_cutoff is not None and jump_cutoff < 1:
            raise ConfigurationError("jump_cutoff must be at least 1")
        self.box = box
        self.alpha = float(alpha)
        self.env = env
        self.variant = variant
        self.boundary = boundary
        self.jump_cutoff = jump_cutoff
        # only used by the lattice-sum tail; kept for configuration parity
        self.r_ext_factor = r_ext_factor
        self._dense = None

    # basic properties

    @property
    def k(self) -> int:
        return self.box.k

    @property
    def d(self) -> int:
        return self.box.d

    @property
    def size(self) -> int:
        return self.box.size

    @property
    def deterministic(self) -> bool:
        return self.env is None or self.env.is_constant or self.variant == "reference"

    def kernel_args(self):
        if self.deterministic:
            return np.uint64(0), 0, 0.0
        return self.env.kernel_args()

    @cached_property
    def table(self) -> np.ndarray:
        """k^alpha |a|^{-d-alpha} indexed by the flattened vector of |offsets|."""
        side, d = self.box.side, self.d
        axis = np.arange(side, dtype=float) ** 2
        r2 = axis
        for _ in range(d - 1):
            r2 = np.add.outer(r2, axis)
        r2 = r2.reshape(-1)
        with np.errstate(divide="ignore"):
            t = float(self.k) ** self.alpha * r2 ** (-(d + self.alpha) / 2)
        t[0] = 0.0
        if self.jump_cutoff is not None:
            t[r2 > self.jump_cutoff**2 + 1e-9] = 0.0
        return t

    @cached_property
    def _stats(self):
        n, d = self.size, self.d
        rsw, rs1 = np.zeros(n), np.zeros(n)
        bw, b1 = np.zeros((n, d)), np.zeros((n, d))
        comp_r2 = np.inf if self.alpha > 1 else float(self.k) ** 2
        _row_stats(
            self.box.int_points, self.table, self.box.side, *self.kernel_args(), comp_r2, float(self.k), rsw, rs1, bw, b1
        )
        return rsw, rs1, bw, b1

    @cached_property
    def exterior_mass(self) -> float:
        """k^alpha times the full (or cutoff) lattice sum of the kernel."""
        return float(self.k) ** self.alpha * lattice_zeta(self.d, self.alpha, self.jump_cutoff)

    @cached_property
    def kappa(self) -> np.ndarray:
        """Killing rate: kernel mass of the jumps leaving the box, unit weights."""
        if self.boundary == "restricted":
            return np.zeros(self.size)
        return self.exterior_mass - self._unit_rowsum

    @cached_property
    def drift(self) -> np.ndarray:
        """Compensator vector b(x) with L_hat f = L f - grad f . b."""
        if self.deterministic and self.boundary == "killed":
            return np.zeros((self.size, self.d))
        _, _, bw, b1 = self._stats
        if self.boundary == "killed":
            return bw - b1
        return bw

    @cached_property
    def diagonal(self) -> np.ndarray:
        if self.deterministic:
            return -self._unit_rowsum - self.kappa
        if self._dense is not None:
            return np.diag(self._dense).copy()
        return -self._stats[0] - self.kappa

    # deterministic fast path -------------------------------------------

    @cached_property
    def _fft_plan(self):
        side, d = self.box.side, self.d
        full = self.table.reshape((side,) * d)
        for axis in range(d):
            mirrored = np.flip(np.take(full, np.arange(1, side), axis=axis), axis=axis)
            full = np.concatenate([mirrored, full], axis=axis)
        shape = tuple(sfft.next_fast_len(3 * side - 2, real=True) for _ in range(d))
        return shape, sfft.rfftn(full, shape)

    def _convolve(self, F: np.ndarray) -> np.ndarray:
        """(K * f)_i = sum_j K(i - j) f_j for columns of F."""
        side, d = self.box.side, self.d
        shape, khat = self._fft_plan
        out = np.empty_like(F)
        sl = tuple(slice(side - 1, 2 * side - 1) for _ in range(d))
        for c in range(F.shape[1]):
            grid = F[:, c].reshape((side,) * d)
            full = sfft.irfftn(sfft.rfftn(grid, shape) * khat, shape)
            out[:, c] = full[sl].reshape(-1)
        return out

    @cached_property
    def _unit_rowsum(self) -> np.ndarray:
        return self._convolve(np.ones((self.size, 1)))[:, 0]

    # application ---------------------------------------------------------

    def matvec(self, F: np.ndarray) -> np.ndarray:
        """Apply the jump part (no compensator) to an (N,) or (N, c) array."""
        F = np.asarray(F, dtype=float)
        flat = F.ndim == 1
        F2 = F[:, None] if flat else F
        if F2.shape[0] != self.size:
            raise DomainError(f"array of length {F2.shape[0]} does not match a box of {self.size} points")
        if self.deterministic:
            out = self._convolve(F2) + self.diagonal[:, None] * F2
        elif self._dense is not None:
            out = self._dense @ F2
        else:
            out = np.empty_like(F2)
            _apply_rows(
                self.box.int_points, np.ascontiguousarray(F2), self.table, self.box.side, *self.kernel_args(), self.kappa, out
            )
        return out[:, 0] if flat else out

    def apply_direct(self, F: np.ndarray) -> np.ndarray:
        """Pair-by-pair evaluation, independent of any cached matrix or FFT."""
        F = np.asarray(F, dtype=float)
        flat = F.ndim == 1
        F2 = np.ascontiguousarray(F[:, None] if flat else F)
        out = np.empty_like(F2)
        _apply_rows(self.box.int_points, F2, self.table, self.box.side, *self.kernel_args(), self.kappa, out)
        return out[:, 0] if flat else out

    def component_count(self) -> int:
        """Connected components of the graph of positive in-box weights."""
        return int(_components(self.box.int_points, self.table, self.box.side, *self.kernel_args()))

    def materialize(self, limit: int = None) -> bool:
        """Cache the dense matrix for repeated products; returns whether it did."""
        limit = CACHE_LIMIT if limit is None else limit
        if self.deterministic or self._dense is not None:
            return self._dense is not None
        if self.size > limit:
            return False
        self._dense = self._build_dense()
        return True

    def release(self):
        self._dense = None

    def _build_dense(self) -> np.ndarray:
        n = self.size
        A = np.zeros((n, n))
        _fill_dense(self.box.int_points, self.table, self.box.side, *self.kernel_args(), A)
        rows = A.sum(axis=1)
        A[np.diag_indices(n)] = -rows - self.kappa
        return A

    def __repr__(self):
        env = "unit" if self.env is None else f"seed={self.env.seed}, law={self.env.law}"
        return (
            f"NonlocalOperator({self.box!r}, alpha={self.alpha}, {env}, variant={self.variant}, "
            f"boundary={self.boundary}, jump_cutoff={self.jump_cutoff})"
        )


def apply(op: NonlocalOperator, f: GridFunction, grad=None) -> GridFunction:
    """Apply ``op`` to ``f``; the compensated variant also needs ``grad``, an (N, d) array."""
    if not f.box.same_as(op.box):
        raise DomainError(f"function lives on {f.box!r}, operator on {op.box!r}")
    out = op.matvec(f.values)
    if op.variant == "compensated":
        if grad is None:
            raise DomainError("the compensated variant needs the gradient of f")
        grad = np.asarray(getattr(grad, "values", grad), dtype=float)
        if grad.shape != (op.size, op.d) or f.values.ndim != 1:
            raise DomainError("gradient must be an (N, d) array for a scalar f")
        out = out - np.einsum("ij,ij->i", grad, op.drift)
    return GridFunction(op.box, out)


def assemble_dense(op: NonlocalOperator, limit: int = DENSE_LIMIT) -> np.ndarray:
    """Dense matrix of the jump part of ``op`` (entries computed once per pair)."""
    if op.size > limit:
        raise ResourceError(f"dense assembly of {op.size} points exceeds the limit {limit}")
    if op._dense is not None:
        return op._dense.copy()
    if not op.deterministic:
        return op._build_dense()
    n = op.size
    A = np.zeros((n, n))
    _fill_dense(op.box.int_points, op.table, op.box.side, np.uint64(0), 0, 0.0, A)
    A[np.diag_indices(n)] = op.diagonal
    return A


# ---------------------------------------------------------------------------
# energies and potentials


def dirichlet_energy(env, U: LatticeBox, f, alpha: float) -> float:
    """1/2 sum over x != y in U of |f(x) - f(y)|^2 w_{x,y} / |x - y|^{d+alpha}.

    ``U`` must be a box of Z^d (k = 1); ``env`` may be ``None`` for unit weights.
    Vector-valued ``f`` gives the sum of the componentwise energies.
    """
    check_alpha(alpha)
    if U.k != 1:
        raise DomainError("the energy is defined on boxes of Z^d (k = 1)")
    vals = np.asarray(getattr(f, "values", f), dtype=float)
    if vals.shape[0] != U.size:
        raise DomainError("function does not match the box")
    vals = np.ascontiguousarray(vals[:, None] if vals.ndim == 1 else vals)
    args = (np.uint64(0), 0, 0.0) if env is None else env.kernel_args()
    out = np.empty(U.size)
    _energy(U.int_points, vals, *args, float(U.d + alpha), out)
    return float(out.sum())


@dataclass
class Potential:
    """V(x) = sum_{0<|z|<=R} z |z|^{-d-alpha} w_{x,x+z} on a box of Z^d."""

    values: GridFunction
    alpha: float
    radius: float

    @property
    def box(self):
        return self.values.box


def potential_field(env, alpha: float, box: LatticeBox, R_V: float, truncated_at: float = None, form: str = "paired"):
    """Compute V (or V_m with ``truncated_at = 2^m``) at every point of ``box``.

    ``form`` picks the summation: ``paired`` adds ``c(z)(w_{x,x+z} - w_{x,x-z})``
    over half the ball and vanishes exactly for unit weights; ``raw`` sums
    ``c(z) w_{x,x+z}`` and ``fluctuation`` sums ``c(z)(w_{x,x+z} - 1)``.
    """
    check_alpha(alpha)
    if box.k != 1:
        raise DomainError("the potential lives on Z^d (k = 1)")
    if form not in ("paired", "raw", "fluctuation"):
        raise ConfigurationError(f"unknown summation form {form!r}")
    R = float(R_V) if truncated_at is None else min(float(R_V), float(truncated_at))
    if R < 1:
        raise DomainError("truncation radius must be at least 1")
    d = box.d
    if env is not None and env.dim != d:
        raise DomainError("environment and box dimensions differ")
    out = np.zeros((box.size, d))
    if env is None or (env.is_constant and form == "paired"):
        return Potential(GridFunction(box, out), float(alpha), R)
    offsets = _ball_offsets(R, d, half=form == "paired")
    z = offsets.astype(float)
    coefs = z * np.sum(z**2, axis=1, keepdims=True) ** (-(d + alpha) / 2)
    shift = 1.0 if form == "fluctuation" else 0.0
    _potential(box.int_points, offsets, coefs, *env.kernel_args(), form == "paired", shift, out)
    return Potential(GridFunction(box, out), float(alpha), R)


def potential_bound(alpha: float, d: int, R: float, upper_bound: float) -> float:
    """sum_{0<|z|<=R} |z|^{1-d-alpha} times the weight bound."""
    z = _ball_offsets(R, d).astype(float)
    return float(np.sum(np.sum(z**2, axis=1) ** ((1 - d - alpha) / 2))) * upper_bound


@dataclass
class IdentityCheck:
    residual: float
    scale: float

    @property
    def relative(self) -> float:
        return self.residual / self.scale if self.scale > 0 else self.residual


def generator_compensator_identity_check(
    env, k: int, alpha: float, g, jump_cutoff: float = None, potential_radius: float = None, box_m=1
) -> IdentityCheck:
    """max |L^k g - L_hat^k g - k^{alpha-1} <grad g, V(k.)>| over B_M.

    Both operators are truncated at ``jump_cutoff`` (lattice units, default
    2k) and V at ``potential_radius``; these must agree.  The operators act
    on a box enlarged by the cutoff so every retained jump from B_M stays
    inside.  ``g`` needs ``value`` and ``gradient`` methods on (n, d) arrays.
    """
    if not 1.0 < alpha < 2.0:
        raise DomainError("the identity uses the uncompensated-indicator branch, alpha in (1, 2)")
    cutoff = float(2 * k if jump_cutoff is None else jump_cutoff)
    if potential_radius is not None and float(potential_radius) != cutoff:
        raise DomainError(f"truncation mismatch: jumps cut at {cutoff}, potential at {potential_radius}")
    d = env.dim if env is not None else len(getattr(g, "center", (0, 0)))
    inner = LatticeBox(k, box_m, d)
    outer = LatticeBox(k, inner.M + Fraction(math.ceil(cutoff), k), d)
    plain = NonlocalOperator(outer, alpha, env, "random", "restricted", jump_cutoff=cutoff)
    comp = NonlocalOperator(outer, alpha, env, "compensated", "restricted", jump_cutoff=cutoff)
    gv = GridFunction(outer, g.value(outer.points))
    grad = g.gradient(outer.points)
    idx = outer.subset_indices(inner)
    lg = apply(plain, gv).values[idx]
    lhat = apply(comp, gv, grad).values[idx]
    # the potential is read at kx, i.e. at the integer coordinates of the inner box
    V = potential_field(env, alpha, LatticeBox(1, inner.M * k, d), cutoff).values.values
    corr = float(k) ** (alpha - 1) * np.einsum("ij,ij->i", grad[idx], V)
    resid = float(np.max(np.abs(lg - lhat - corr)))
    scale = float(max(np.max(np.abs(lg)), np.max(np.abs(corr)), np.max(np.abs(lhat))))
    return IdentityCheck(resid, scale)
