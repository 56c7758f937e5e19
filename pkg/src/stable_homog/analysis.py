"""Empirical checks of the inequalities and intermediate quantities behind
the homogenization rate: common neighbours, Poincare constants, corrector
energies, block-average concentration, operator differences and the
two-scale expansion."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DomainError, SolverError
from .lattice import GridFunction, LatticeBox, block_averages, multiscale_centers
from .operators import NonlocalOperator, apply, check_alpha, dirichlet_energy, potential_field
from .reference import QuadratureConfig, SmoothBump, frac_generator_apply, make_test_function
from .solvers import (
    DEFAULT_TOL,
    CorrectorField,
    smallest_nonzero_eigenpair,
    solve_poisson_meanzero,
    solve_resolvent,
)

OK, CENSORED = "ok", "censored"


def default_theta(alpha: float, d: int) -> float:
    return (alpha / d + 1.0) / 2.0


# ---------------------------------------------------------------------------
# common neighbours


def common_neighbor_density(env, x1, x2, y, r, delta: float) -> float:
    """Fraction of z in B_r(y), z not in {x1, x2}, with w_{x1,z} > delta and w_{x2,z} > delta.

    The denominator is |B_r(y)|, excluded points included.
    """
    from .environment import conductances

    x1 = np.asarray(x1, dtype=np.int64)
    x2 = np.asarray(x2, dtype=np.int64)
    if np.array_equal(x1, x2):
        raise DomainError("the two anchor points must differ")
    if r < 1:
        raise DomainError("radius must be at least 1")
    box = LatticeBox(1, r, env.dim, tuple(np.asarray(y, dtype=np.int64)))
    z = box.int_points
    keep = ~(np.all(z == x1, axis=1) | np.all(z == x2, axis=1))
    zk = z[keep]
    w1 = conductances(env, np.broadcast_to(x1, zk.shape), zk)
    w2 = conductances(env, np.broadcast_to(x2, zk.shape), zk)
    return float(np.count_nonzero((w1 > delta) & (w2 > delta))) / box.size


# ---------------------------------------------------------------------------
# Poincare


@dataclass
class PoincareRecord:
    r: int
    gap: float
    box_size: int
    statistic: float
    status: str = OK
    seed: int = None

    @property
    def infinite(self) -> bool:
        return math.isinf(self.statistic)


def poincare_statistic(env, alpha: float, r: int, y=None, tol=1e-10, return_vector=False):
    """Sharp constant s(r) = r^{d-alpha} / (gap |B_r|) on B_r(y) ∩ Z^d."""
    check_alpha(alpha)
    if r < 2:
        raise DomainError("radius must be at least 2")
    d = env.dim if env is not None else len(y)
    box = LatticeBox(1, r, d, None if y is None else tuple(y))
    op = NonlocalOperator(box, alpha, env, "random", "restricted")
    res = smallest_nonzero_eigenpair(op, tol)
    op.release()
    seed = None if env is None else env.seed
    if res.zero_gap:
        rec = PoincareRecord(r, 0.0, box.size, math.inf, CENSORED, seed)
    else:
        rec = PoincareRecord(r, res.value, box.size, r ** (d - alpha) / (res.value * box.size), OK, seed)
    return (rec, res.vector) if return_vector else rec


def poincare_sides(env, alpha: float, r: int, f, s: float, y=None):
    """Both sides of  avg f^2 - (avg f)^2 <= s r^{alpha-d} E(f, f)  on B_r(y)."""
    d = env.dim
    box = LatticeBox(1, r, d, None if y is None else tuple(y))
    vals = np.asarray(f, dtype=float)
    lhs = float(np.mean(vals**2) - np.mean(vals) ** 2)
    rhs = s * r ** (alpha - d) * dirichlet_energy(env, box, vals, alpha)
    return lhs, rhs


# ---------------------------------------------------------------------------
# multi-scale Poincare


@dataclass
class MultiscaleRecord:
    m: int
    n: int
    lhs: float
    local: float
    energy_term: float

    @property
    def excess(self) -> float:
        return self.lhs - self.local

    @property
    def constant(self) -> float:
        """Smallest C making the inequality hold for this (f, g)."""
        if self.excess <= 0:
            return 0.0
        return math.inf if self.energy_term == 0 else self.excess / self.energy_term

    def rhs(self, C: float) -> float:
        return self.local + C * self.energy_term


def multiscale_poincare_check(env, alpha: float, m: int, n: int, f, g) -> MultiscaleRecord:
    """Evaluate the terms of the multi-scale inequality for f, g on B_{2^m}.

    lhs   = sum_x f (g - avg_{B_{2^m}} g)
    local = sum_z sum_{x in B_{2^n}(z)} f (g - avg_{B_{2^n}(z)} g)
    energy_term = E(g, g)^{1/2} sum_{k=n}^{m-1} 2^{k(d+alpha)/2} (sum_y (avg_{B_{2^k}(y)} f)^2)^{1/2}
    """
    check_alpha(alpha)
    if not 0 <= n <= m:
        raise DomainError("need 0 <= n <= m")
    d = env.dim
    box = LatticeBox(1, 1 << m, d)
    fv = np.asarray(getattr(f, "values", f), dtype=float)
    gv = np.asarray(getattr(g, "values", g), dtype=float)
    lhs = float(np.sum(fv * (gv - gv.mean())))
    dec = multiscale_centers(m, n, d)
    cells = dec.cell_of(box.int_points)
    g_avg = block_averages(GridFunction(box, gv), dec)
    local = float(np.sum(fv * (gv - g_avg[cells])))
    energy = dirichlet_energy(env, box, gv, alpha)
    total = 0.0
    for k in range(n, m):
        f_avg = block_averages(GridFunction(box, fv), multiscale_centers(m, k, d))
        total += 2 ** (k * (d + alpha) / 2) * math.sqrt(float(np.sum(f_avg**2)))
    return MultiscaleRecord(m, n, lhs, local, math.sqrt(energy) * total)


# ---------------------------------------------------------------------------
# correctors


def corrector_radius(m: int, truncated: bool) -> int:
    """Truncation of V for the level-m corrector: 2^m for V_m, else 2^{m+2}."""
    return 1 << m if truncated else 1 << (m + 2)


def compute_corrector(env, alpha: float, m: int, truncated=False, radius=None, tol=DEFAULT_TOL, precond="jacobi"):
    """Mean-zero solution of L_{B_{2^m}} phi = -V + avg V with V cut at ``radius``."""
    check_alpha(alpha)
    if not truncated and not 1.0 < alpha < 2.0:
        raise DomainError("the untruncated potential needs alpha in (1, 2); use the truncated V_m")
    box = LatticeBox(1, 1 << m, env.dim)
    R = corrector_radius(m, truncated) if radius is None else radius
    V = potential_field(env, alpha, box, R).values.values
    op = NonlocalOperator(box, alpha, env, "random", "restricted")
    try:
        field = solve_poisson_meanzero(op, -V, tol=tol, precond=precond)
    finally:
        op.release()
    field.meta.update(radius=R, truncated=truncated, alpha=alpha)
    return field


@dataclass
class EnergyRecord:
    m: int
    energy: float
    normalized: float
    status: str = OK
    iterations: int = 0
    reason: str = ""
    seed: int = None


def energy_normalization(alpha: float, d: int, m: int, truncated: bool) -> float:
    if truncated and alpha < 1.0:
        return 2.0 ** (m * (d + 2 * (1 - alpha)))
    return 2.0 ** (m * d)


def corrector_energy_scan(env, alpha: float, m_range, truncated=False, tol=DEFAULT_TOL):
    """Normalized corrector energies over ``m_range``; solver failures are censored."""
    out = []
    for m in m_range:
        try:
            field = compute_corrector(env, alpha, m, truncated, tol=tol)
        except SolverError as exc:
            iters = exc.report.iterations if exc.report else 0
            out.append(EnergyRecord(m, math.nan, math.nan, CENSORED, iters, str(exc), env.seed))
            continue
        norm = energy_normalization(alpha, env.dim, m, truncated)
        out.append(EnergyRecord(m, field.energy, field.energy / norm, OK, field.report.iterations, "", env.seed))
    return out


# ---------------------------------------------------------------------------
# concentration


@dataclass
class ConcentrationRecord:
    m: int
    k_sub: int
    statistic: float
    bound: float
    theta: float
    status: str = OK
    seed: int = None


def block_average_concentration(env, alpha: float, m: int, k_range, theta=None, radius=None):
    """sum over y in Z_{m,k} of |avg_{B_{2^k}(y)} V|^2 for each k, V cut at 2^m."""
    check_alpha(alpha)
    d = env.dim
    if not d > alpha:
        raise DomainError("the concentration bound needs d > alpha")
    theta = default_theta(alpha, d) if theta is None else theta
    if not alpha / d < theta < 1:
        raise DomainError(f"theta must lie in (alpha/d, 1) = ({alpha / d:g}, 1)")
    box = LatticeBox(1, 1 << m, d)
    V = potential_field(env, alpha, box, (1 << m) if radius is None else radius).values
    out = []
    for k in k_range:
        avg = block_averages(V, multiscale_centers(m, k, d))
        stat = float(np.sum(avg**2))
        out.append(ConcentrationRecord(m, k, stat, 2.0 ** ((m - k) * d - theta * k * d), theta, OK, env.seed))
    return out


# ---------------------------------------------------------------------------
# operator differences

WHICH = ("ref_vs_continuum", "hat_vs_ref", "random_vs_ref")


@dataclass
class DiffRecord:
    k: int
    which: str
    sq_norm: float
    seed: int = None
    status: str = OK


def operator_difference_norm(env, alpha: float, k: int, which: str, g: SmoothBump, box_m=2, quad=None) -> DiffRecord:
    """Squared L^2(mu^k) norm over B_M of one of the operator differences.

    Operators act in killed mode, so for ``g`` supported in the box they
    equal the whole-lattice sums with mean weights outside the box.
    """
    check_alpha(alpha)
    if which not in WHICH:
        raise DomainError(f"unknown difference {which!r}; expected one of {WHICH}")
    if which == "random_vs_ref" and not alpha < 1.0:
        raise DomainError("the random-versus-reference comparison assumes alpha in (0, 1)")
    d = g.d
    box = LatticeBox(k, box_m, d)
    gv = GridFunction(box, g.value(box.points))
    ref = NonlocalOperator(box, alpha, None, "reference", "killed")
    lref = apply(ref, gv).values
    if which == "ref_vs_continuum":
        diff = lref - frac_generator_apply(g, box.points, alpha, quad)
    elif which == "hat_vs_ref":
        hat = NonlocalOperator(box, alpha, env, "compensated", "killed")
        diff = apply(hat, gv, g.gradient(box.points)).values - lref
    else:
        rnd = NonlocalOperator(box, alpha, env, "random", "killed")
        diff = apply(rnd, gv).values - lref
    seed = None if env is None else env.seed
    return DiffRecord(k, which, float(np.sum(diff**2)) * k ** (-d), seed)


# ---------------------------------------------------------------------------
# two-scale expansion


@dataclass
class TwoScaleRecord:
    k: int
    m: int
    expansion_gap: float  # |v_k - u_bar|
    solution_gap: float  # |u_k - v_k|
    bound: float
    status: str = OK
    seed: int = None
    meta: dict = field(default_factory=dict)

    def as_dict(self):
        return asdict(self)


def corrector_level(k: int) -> int:
    """m with 2^m <= k < 2^{m+1}."""
    if k < 1:
        raise DomainError("k must be positive")
    return k.bit_length() - 1


def two_scale_diagnostic(env, alpha: float, k: int, g: SmoothBump, lam: float = 1.0, corrector: CorrectorField = None,
                         box_m=2, tol=DEFAULT_TOL, quad=None) -> TwoScaleRecord:
    """Distances of v_k = u_bar + k^{-1} <grad u_bar, phi_{m+2}(k.)> to u_bar and to u_k.

    ``u_bar = g`` and ``u_k`` solves the killed resolvent equation with
    f = lam g - L g.  ``bound`` is k^{-1} sup|grad g| 2^{d/2} (avg_{B_k} |phi|^2)^{1/2}.
    """
    if not 1.0 < alpha < 2.0:
        raise DomainError("the two-scale expansion is set up for alpha in (1, 2)")
    m = corrector_level(k)
    if corrector is None:
        raise DomainError(f"the corrector phi_{m + 2} is required")
    if corrector.m != m + 2:
        raise DomainError(f"k = {k} needs the corrector of level {m + 2}, got level {corrector.m}")
    d = g.d
    box = LatticeBox(k, box_m, d)
    grad = g.gradient(box.points)
    phi_box = corrector.values.box
    idx = phi_box.index_of(box.int_points)
    phi = np.zeros((box.size, d))
    inside = idx >= 0
    phi[inside] = corrector.values.values[idx[inside]]
    support = np.any(grad != 0, axis=1)
    if np.any(support & ~inside):
        raise DomainError("the corrector box does not cover k * supp(grad g)")
    gv = g.value(box.points)
    v = gv + np.einsum("ij,ij->i", grad, phi) / k
    meas = k ** (-d)
    expansion_gap = math.sqrt(float(np.sum((v - gv) ** 2)) * meas)
    tf = make_test_function(g, lam, alpha, box, quad)
    op = NonlocalOperator(box, alpha, env, "random", "killed")
    try:
        u, _ = solve_resolvent(op, lam, tf.f, tol)
    finally:
        op.release()
    solution_gap = math.sqrt(float(np.sum((u.values - v) ** 2)) * meas)
    ball = LatticeBox(1, k, d)
    bidx = phi_box.index_of(ball.int_points)
    phi_ball = corrector.values.values[bidx[bidx >= 0]]
    bound = g.grad_sup() / k * 2 ** (d / 2) * math.sqrt(float(np.mean(np.sum(phi_ball**2, axis=1))))
    seed = None if env is None else env.seed
    return TwoScaleRecord(k, m, expansion_gap, solution_gap, bound, OK, seed)
