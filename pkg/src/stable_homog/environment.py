"""Seed-deterministic i.i.d. conductance fields on unordered lattice pairs.

Weights are never stored.  Each unordered pair ``{x, y}`` is put in
canonical (lexicographic) order, both points are zig-zag packed into one
64-bit word, and the pair is hashed together with the seed by a
splitmix64-style mixer.  The top 53 bits give a uniform variate that is
pushed through the inverse CDF of the law.  The same numba kernels are
used by the operator assembly, so scalar lookups and bulk assembly agree
bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np

from .errors import ConfigurationError, DomainError

CONSTANT, UNIFORM, BERNOULLI = 0, 1, 2

# coordinates are zig-zag packed into 21-bit fields, three fields per word
MAX_DIM = 3
COORD_LIMIT = 1 << 20

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_S63 = np.int64(63)
_S1 = np.uint64(1)
_FIELD = np.uint64(21)
_TWO53 = 1.0 / 9007199254740992.0


@nb.njit(inline="always", cache=True)
def _mix(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@nb.njit(inline="always", cache=True)
def _pack(p):
    word = np.uint64(0)
    for i in range(p.shape[0]):
        c = np.int64(p[i])
        zz = np.uint64((c << np.int64(1)) ^ (c >> _S63))
        word = (word << _FIELD) | zz
    return word


@nb.njit(inline="always", cache=True)
def _less(a, b):
    for i in range(a.shape[0]):
        if a[i] < b[i]:
            return True
        if a[i] > b[i]:
            return False
    return False


@nb.njit(inline="always", cache=True)
def pair_uniform(seed, a, b):
    """Uniform variate in [0, 1) attached to the unordered pair {a, b}."""
    pa = _pack(a)
    pb = _pack(b)
    # select rather than branch around the packing; numba compiles the
    # branchy form into something several times slower
    first = _less(a, b)
    lo = pa if first else pb
    hi = pb if first else pa
    h = _mix(seed + _GOLDEN)
    h = _mix(h ^ lo)
    h = _mix((h + _GOLDEN) ^ hi)
    return np.float64(h >> _S11) * _TWO53


@nb.njit(inline="always", cache=True)
def law_value(kind, param, u):
    if kind == 0:
        return 1.0
    if kind == 1:
        return 1.0 - param + 2.0 * param * u
    if u < param:
        return 1.0 / param
    return 0.0


@nb.njit(inline="always", cache=True)
def pair_weight(seed, kind, param, a, b):
    if kind == 0:
        return 1.0
    return law_value(kind, param, pair_uniform(seed, a, b))


@nb.njit(cache=True)
def _weights_many(seed, kind, param, xs, ys, out):
    for i in range(xs.shape[0]):
        out[i] = pair_weight(seed, kind, param, xs[i], ys[i])


@dataclass(frozen=True)
class ConductanceLaw:
    """Law of a single conductance; every law has mean exactly 1.

    ``kind`` is one of ``constant``, ``uniform`` (Uniform[1-h, 1+h]) or
    ``bernoulli`` (value 1/p with probability p, else 0).
    """

    kind: str = "constant"
    param: float = 0.0

    def __post_init__(self):
        if self.kind == "constant":
            object.__setattr__(self, "param", 0.0)
        elif self.kind == "uniform":
            if not 0.0 <= self.param <= 1.0:
                raise ConfigurationError(f"uniform half-width must lie in [0, 1], got {self.param}")
        elif self.kind == "bernoulli":
            if not 0.0 < self.param <= 1.0:
                raise ConfigurationError(f"bernoulli p must lie in (0, 1], got {self.param}")
        else:
            raise ConfigurationError(f"unknown conductance law {self.kind!r}")

    @property
    def code(self) -> int:
        return {"constant": CONSTANT, "uniform": UNIFORM, "bernoulli": BERNOULLI}[self.kind]

    @property
    def upper_bound(self) -> float:
        if self.kind == "uniform":
            return 1.0 + self.param
        if self.kind == "bernoulli":
            return 1.0 / self.param
        return 1.0

    @property
    def variance(self) -> float:
        if self.kind == "uniform":
            return self.param**2 / 3.0
        if self.kind == "bernoulli":
            return (1.0 - self.param) / self.param
        return 0.0

    @property
    def is_constant(self) -> bool:
        return self.variance == 0.0

    def __str__(self):
        if self.kind == "constant":
            return "constant"
        return f"{self.kind}:{self.param:g}"


def parse_law(text: str) -> ConductanceLaw:
    """Parse ``constant``, ``uniform:h`` or ``bernoulli:p``."""
    if isinstance(text, ConductanceLaw):
        return text
    name, _, arg = text.strip().partition(":")
    name = name.lower()
    if name == "constant":
        if arg:
            raise ConfigurationError("the constant law takes no parameter")
        return ConductanceLaw("constant")
    if name not in ("uniform", "bernoulli") or not arg:
        raise ConfigurationError(f"cannot parse law {text!r}; expected constant, uniform:h or bernoulli:p")
    try:
        value = float(arg)
    except ValueError:
        raise ConfigurationError(f"law parameter {arg!r} is not a number") from None
    return ConductanceLaw(name, value)


@dataclass(frozen=True)
class Environment:
    """A fixed realisation of the random conductances on Z^d."""

    seed: int
    law: ConductanceLaw
    dim: int

    def __post_init__(self):
        if isinstance(self.law, str):
            object.__setattr__(self, "law", parse_law(self.law))
        if not 1 <= self.dim <= MAX_DIM:
            raise ConfigurationError(f"dimension must be between 1 and {MAX_DIM}, got {self.dim}")
        object.__setattr__(self, "seed", int(self.seed) & 0xFFFFFFFFFFFFFFFF)

    @property
    def useed(self) -> np.uint64:
        return np.uint64(self.seed)

    @property
    def is_constant(self) -> bool:
        return self.law.is_constant

    @property
    def upper_bound(self) -> float:
        return self.law.upper_bound

    def kernel_args(self):
        """Arguments the numba kernels take to reproduce this field."""
        return self.useed, self.law.code, float(self.law.param)


def _as_point(env, x):
    p = np.asarray(x, dtype=np.int64).reshape(-1)
    if p.shape[0] != env.dim:
        raise DomainError(f"point {tuple(p)} has dimension {p.shape[0]}, environment has {env.dim}")
    if np.any(np.abs(p) >= COORD_LIMIT):
        raise DomainError(f"coordinates of {tuple(p)} exceed the supported range +-{COORD_LIMIT}")
    return p


def conductance(env: Environment, x, y) -> float:
    """Weight w_{x,y} of the unordered pair {x, y}."""
    a = _as_point(env, x)
    b = _as_point(env, y)
    if np.array_equal(a, b):
        raise DomainError("conductance is only defined for distinct points")
    return float(pair_weight(*env.kernel_args(), a, b))


def fluctuation(env: Environment, x, y) -> float:
    """Centred weight w_{x,y} - 1."""
    return conductance(env, x, y) - 1.0


def conductances(env: Environment, xs, ys) -> np.ndarray:
    """Vectorised :func:`conductance` over matching rows of ``xs`` and ``ys``."""
    xs = np.ascontiguousarray(np.atleast_2d(xs), dtype=np.int64)
    ys = np.ascontiguousarray(np.atleast_2d(ys), dtype=np.int64)
    if xs.shape != ys.shape or xs.shape[1] != env.dim:
        raise DomainError(f"point arrays must both have shape (n, {env.dim})")
    if np.any((xs == ys).all(axis=1)):
        raise DomainError("conductance is only defined for distinct points")
    if np.any(np.abs(xs) >= COORD_LIMIT) or np.any(np.abs(ys) >= COORD_LIMIT):
        raise DomainError(f"coordinates exceed the supported range +-{COORD_LIMIT}")
    out = np.empty(xs.shape[0])
    _weights_many(*env.kernel_args(), xs, ys, out)
    return out


def box_pairs(env: Environment, half_width: int):
    """All unordered pairs of B_M = (-M, M]^d in Z^d with their weights.

    Returns ``(xs, ys, w)`` with ``xs[i] < ys[i]`` in row-major point order.
    """
    from .lattice import LatticeBox

    pts = LatticeBox(1, half_width, env.dim).int_points
    i, j = np.triu_indices(len(pts), k=1)
    return pts[i], pts[j], conductances(env, pts[i], pts[j])


def surface_area(d: int) -> float:
    """Surface area of the unit sphere in R^d."""
    return 2.0 * math.pi ** (d / 2.0) / math.gamma(d / 2.0)
