"""Conjugate-gradient solves for the resolvent and corrector equations and a
block inverse iteration for the spectral gap."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, SolverError
from .lattice import GridFunction
from .operators import NonlocalOperator, dirichlet_energy

DEFAULT_TOL = 1e-9
ZERO_GAP = 1e-12


@dataclass
class SolveReport:
    iterations: int
    residual: float
    tol: float
    wall_time: float
    converged: bool = True
    reason: str = ""


def default_maxiter(n: int) -> int:
    return int(10 * math.sqrt(n)) + 200


def _project(X):
    return X - X.mean(axis=0, keepdims=True)


def conjugate_gradient(matvec, B, tol=DEFAULT_TOL, maxiter=None, precond=None, project=False, stall_window=60):
    """Solve A X = B column by column for symmetric positive (semi)definite A.

    All columns advance together so one product serves every right-hand
    side.  With ``project`` the iterates stay orthogonal to constants, which
    is how the mean-zero Poisson problem is solved.  ``precond`` is the
    inverse diagonal, or ``None``.

    Returns ``(X, report)``; the report's residual is the worst relative
    residual over the columns, recomputed from scratch at the end.
    """
    t0 = time.perf_counter()
    B = np.asarray(B, dtype=float)
    flat = B.ndim == 1
    B = B[:, None] if flat else B
    n, ncol = B.shape
    maxiter = default_maxiter(n) if maxiter is None else maxiter
    P = _project if project else (lambda Y: Y)
    Bp = P(B)
    bnorm = np.linalg.norm(Bp, axis=0)
    safe = np.where(bnorm > 0, bnorm, 1.0)
    X = np.zeros_like(Bp)
    R = Bp.copy()
    Z = P(R * precond[:, None]) if precond is not None else R.copy()
    D = Z.copy()
    rz = np.sum(R * Z, axis=0)
    active = bnorm > 0
    best = np.where(active, 1.0, 0.0)
    since_best = np.zeros(ncol, dtype=int)
    it = 0
    stalled = False
    while it < maxiter and np.any(active):
        AD = P(matvec(D))
        dad = np.sum(D * AD, axis=0)
        if np.any(dad[active] <= 0):
            stalled = True
            break
        step = np.where(active, rz / np.where(dad > 0, dad, 1.0), 0.0)
        X += D * step
        R -= AD * step
        it += 1
        rel = np.linalg.norm(R, axis=0) / safe
        active &= rel > tol
        improved = rel < 0.99 * best
        best = np.where(improved, rel, best)
        since_best = np.where(improved, 0, since_best + 1)
        if np.any(active & (since_best > stall_window)):
            stalled = True
            break
        Z = P(R * precond[:, None]) if precond is not None else R
        rz_new = np.sum(R * Z, axis=0)
        beta = np.where(active, rz_new / np.where(rz > 0, rz, 1.0), 0.0)
        D = Z + D * beta
        rz = rz_new
    true_res = np.linalg.norm(Bp - P(matvec(X)), axis=0) / safe
    worst = float(np.max(true_res)) if ncol else 0.0
    report = SolveReport(it, worst, tol, time.perf_counter() - t0, converged=worst <= tol)
    if stalled:
        report.reason = "stagnation"
    elif not report.converged:
        report.reason = "max iterations" if it >= maxiter else "residual drift"
    return (X[:, 0] if flat else X), report


def _prepare(op: NonlocalOperator):
    if not op.deterministic:
        op.materialize()


def solve_resolvent(op: NonlocalOperator, lam: float, f: GridFunction, tol=DEFAULT_TOL, maxiter=None, precond=None):
    """Solve (lam - L) u = f on the box of ``op``.

    ``precond="jacobi"`` enables the diagonal preconditioner.  Raises
    SolverError carrying the report when the tolerance is not met.
    """
    if lam <= 0:
        raise DomainError(f"lambda must be positive, got {lam}")
    if tol <= 0:
        raise DomainError("tolerance must be positive")
    if not f.box.same_as(op.box):
        raise DomainError("right-hand side and operator live on different boxes")
    if op.variant == "compensated":
        raise DomainError("the resolvent is defined for the random and reference variants")
    _prepare(op)
    M = 1.0 / (lam - op.diagonal) if precond == "jacobi" else None
    u, report = conjugate_gradient(lambda V: lam * V - op.matvec(V), f.values, tol, maxiter, M)
    if not report.converged:
        raise SolverError(f"resolvent solve did not converge ({report.reason}, residual {report.residual:.3g})", report)
    return GridFunction(op.box, u), report


@dataclass
class CorrectorField:
    """Mean-zero solution of L phi = rhs on B_{2^m} with its energy."""

    m: int
    values: GridFunction
    energy: float
    report: SolveReport
    meta: dict = field(default_factory=dict)

    @property
    def normalized_energy(self) -> float:
        return self.energy / 2 ** (self.m * self.values.box.d)


def _check_corrector_op(op: NonlocalOperator):
    if op.boundary != "restricted":
        raise DomainError("the local Poisson equation uses the restricted operator")
    if op.box.k != 1:
        raise DomainError("the local Poisson equation lives on Z^d (k = 1)")


def solve_poisson_meanzero(op: NonlocalOperator, rhs, tol=DEFAULT_TOL, maxiter=None, precond=None) -> CorrectorField:
    """Solve L phi = rhs - mean(rhs) with sum(phi) = 0, componentwise.

    Stagnation is followed by a connectivity check so a disconnected
    weighted graph is reported as such.
    """
    _check_corrector_op(op)
    vals = np.asarray(getattr(rhs, "values", rhs), dtype=float)
    if vals.shape[0] != op.size:
        raise DomainError("right-hand side does not match the box")
    vals = vals - vals.mean(axis=0)
    M = float(op.box.M)
    m = int(round(math.log2(M))) if M >= 1 else 0
    _prepare(op)
    Minv = None
    if precond == "jacobi":
        diag = -op.diagonal
        Minv = np.where(diag > 0, 1.0 / np.where(diag > 0, diag, 1.0), 0.0)
    if not np.any(vals):
        phi = np.zeros_like(vals)
        report = SolveReport(0, 0.0, tol, 0.0)
    else:
        # -L is positive semidefinite, so solve (-L) phi = -rhs
        phi, report = conjugate_gradient(lambda V: -op.matvec(V), -vals, tol, maxiter, Minv, project=True)
        if not report.converged:
            parts = op.component_count()
            if parts > 1:
                report.reason = f"disconnected ({parts} components)"
                raise SolverError(f"the weighted graph on the box is disconnected into {parts} components", report)
            raise SolverError(f"corrector solve did not converge ({report.reason}, residual {report.residual:.3g})", report)
    phi = phi - phi.mean(axis=0)
    lphi = op.matvec(phi)
    energy = float(-np.sum(phi * lphi))
    return CorrectorField(m, GridFunction(op.box, phi), max(energy, 0.0), report)


def corrector_energy(field: CorrectorField, env, alpha: float) -> float:
    """Energy of a corrector by the independent pair sum."""
    return dirichlet_energy(env, field.values.box, field.values, alpha)


# ---------------------------------------------------------------------------
# spectral gap


@dataclass
class GapResult:
    value: float
    vector: np.ndarray
    iterations: int
    residual: float
    zero_gap: bool = False


def smallest_nonzero_eigenpair(op: NonlocalOperator, tol=1e-10, block=4, maxiter=200, seed=0) -> GapResult:
    """Smallest eigenvalue of -L on the complement of constants.

    Block inverse iteration: each sweep solves (-L) Y = X by projected CG,
    then a Rayleigh-Ritz step on span(Y) picks the new block.  Stops when
    the leading Ritz pair's residual is below ``tol`` relative to its value.
    A disconnected graph gives a zero gap.
    """
    if op.boundary != "restricted":
        raise DomainError("the spectral gap is taken for the restricted operator")
    n = op.size
    if n < 2:
        raise DomainError("the box needs at least two points")
    if op.component_count() > 1:
        return GapResult(0.0, np.zeros(n), 0, 0.0, zero_gap=True)
    _prepare(op)
    block = max(1, min(block, n - 1))
    rng = np.random.default_rng(seed)
    X = _project(rng.standard_normal((n, block)))
    X, _ = np.linalg.qr(X)
    theta_prev = np.inf
    resid = np.inf
    for it in range(1, maxiter + 1):
        inner_tol = max(min(1e-3, resid * 1e-2), 1e-13)
        Y, _ = conjugate_gradient(lambda V: -op.matvec(V), X, inner_tol, 4 * default_maxiter(n), project=True)
        Y, _ = np.linalg.qr(_project(Y))
        AY = -op.matvec(Y)
        H = Y.T @ AY
        H = 0.5 * (H + H.T)
        vals, vecs = np.linalg.eigh(H)
        X = Y @ vecs
        AX = AY @ vecs
        theta = vals[0]
        if theta <= ZERO_GAP:
            return GapResult(0.0, X[:, 0], it, 0.0, zero_gap=True)
        r = AX[:, 0] - theta * X[:, 0]
        resid = float(np.linalg.norm(r) / theta)
        if resid < tol or (resid < math.sqrt(tol) and abs(theta - theta_prev) <= tol * theta):
            return GapResult(float(theta), X[:, 0], it, resid)
        theta_prev = theta
    raise SolverError(f"gap iteration did not converge (residual {resid:.3g})", SolveReport(maxiter, resid, tol, 0.0, False))


def smallest_nonzero_eigenvalue(op: NonlocalOperator, tol=1e-10) -> float:
    return smallest_nonzero_eigenpair(op, tol).value
