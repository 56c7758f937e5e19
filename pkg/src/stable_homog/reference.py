"""The continuum side: the stable-like generator on R^d, bump test functions
and resolvent pairs (f, g) with (lambda - L)g = f known exactly.

For a radial bump ``g`` the generator at ``x`` depends only on
``s = |x - c|``.  It is evaluated in the symmetric form

    L g(x) = 1/2 int_{S^{d-1}} int_0^inf (g(x+r t) + g(x-r t) - 2 g(x)) r^{-1-alpha} dr dt,

which is absolutely convergent for every alpha in (0, 2).  Along a line
through ``x`` the bump is supported on a chord, so the radial integral is
split at the chord ends, the segment touching r = 0 gets Gauss-Jacobi
nodes for the weight r^{1-alpha}, and the remaining -2 g(x) r^{-1-alpha}
tail is integrated in closed form.  The angular integral only sees the
projection ``b = (x - c) . t`` and reduces to one dimension.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import mpmath
import numpy as np
from scipy import integrate, special

from .environment import surface_area
from .errors import AccuracyError, DomainError
from .lattice import GridFunction, LatticeBox
from .operators import check_alpha


@dataclass(frozen=True)
class SmoothBump:
    """amplitude * exp(1 - 1/(1 - |x-c|^2/r^2)) inside the ball, 0 outside."""

    center: tuple
    radius: float = 1.0
    amplitude: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in np.atleast_1d(self.center)))
        if self.radius <= 0:
            raise DomainError("bump radius must be positive")

    @property
    def d(self) -> int:
        return len(self.center)

    def _q(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = x - np.asarray(self.center)
        return y, np.sum(y**2, axis=1) / self.radius**2

    def value(self, x) -> np.ndarray:
        _, q = self._q(x)
        out = np.zeros(len(q))
        inside = q < 1
        out[inside] = self.amplitude * np.exp(1.0 - 1.0 / (1.0 - q[inside]))
        return out

    __call__ = value

    def gradient(self, x) -> np.ndarray:
        y, q = self._q(x)
        out = np.zeros_like(y)
        inside = q < 1
        qi = q[inside]
        gi = self.amplitude * np.exp(1.0 - 1.0 / (1.0 - qi))
        out[inside] = -(gi * 2.0 / (self.radius**2 * (1.0 - qi) ** 2))[:, None] * y[inside]
        return out

    def hessian(self, x) -> np.ndarray:
        y, q = self._q(x)
        n, d = y.shape
        out = np.zeros((n, d, d))
        inside = q < 1
        qi, yi = q[inside], y[inside]
        rho2 = self.radius**2
        gi = self.amplitude * np.exp(1.0 - 1.0 / (1.0 - qi))
        a = -2.0 / (rho2 * (1.0 - qi) ** 2)
        da = -4.0 / (rho2 * (1.0 - qi) ** 3)
        outer = yi[:, :, None] * yi[:, None, :]
        out[inside] = (gi * a)[:, None, None] * np.eye(d) + (gi * (a * a + 2.0 * da / rho2))[:, None, None] * outer
        return out

    def grad_sup(self) -> float:
        """sup |grad g| on a fine radial grid."""
        q = np.linspace(0.0, 1.0, 20001)[:-1]
        r = np.sqrt(q) * self.radius
        g = np.exp(1.0 - 1.0 / (1.0 - q))
        return float(abs(self.amplitude) * np.max(g * 2.0 * r / (self.radius**2 * (1.0 - q) ** 2)))

    def scaled(self, s: float) -> "SmoothBump":
        """The bump x -> g(x / s)."""
        return SmoothBump(tuple(s * c for c in self.center), self.radius * s, self.amplitude)


@dataclass(frozen=True)
class QuadratureConfig:
    """Node counts of the polar rule; the coarse pass gives the error estimate."""

    n_angle: int = 96
    n_radial: int = 96
    tol: float = 1e-8
    method: str = "polar"
    k_ref: int = 256
    split: float = 0.25


_RULES: dict = {}


def _rule(kind, n, alpha=None):
    key = (kind, n, alpha)
    if key not in _RULES:
        if kind == "legendre":
            _RULES[key] = special.roots_legendre(n)
        else:
            _RULES[key] = special.roots_jacobi(n, 0.0, 1.0 - alpha)
    return _RULES[key]


def _line_values(bump_A, rho2, s2, b, t, G0, q0):
    """g(x + t th) - g(x) along lines with projections b; accurate for small t."""
    q = (s2 + 2.0 * b * t + t * t) / rho2
    inside = q < 1.0
    out = np.where(inside, 0.0, -G0)
    if G0 != 0.0:
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            expo = -(2.0 * b * t + t * t) / (rho2 * (1.0 - q) * (1.0 - q0))
            inner = G0 * np.expm1(expo)
    else:
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            inner = bump_A * np.exp(1.0 - 1.0 / (1.0 - q))
    return np.where(inside, inner, out)


def _radial(bump: SmoothBump, s: float, b: np.ndarray, alpha: float, n: int, r_lo: float = 0.0):
    """int_{r_lo}^inf (g(x+r th) + g(x-r th) - 2 g(x)) r^{-1-alpha} dr for each projection b >= 0."""
    rho2 = bump.radius**2
    s2 = s * s
    q0 = s2 / rho2
    G0 = bump.amplitude * math.exp(1.0 - 1.0 / (1.0 - q0)) if q0 < 1 else 0.0
    D = np.sqrt(np.maximum(b * b - s2 + rho2, 0.0))
    xl, wl = _rule("legendre", n)
    total = np.zeros(len(b))

    def h(r):
        bb = b[:, None]
        return _line_values(bump.amplitude, rho2, s2, bb, r, G0, q0) + _line_values(
            bump.amplitude, rho2, s2, bb, -r, G0, q0
        )

    def legendre(lo, hi):
        lo = np.maximum(lo, r_lo)
        hi = np.maximum(hi, lo)
        half = 0.5 * (hi - lo)
        r = (0.5 * (hi + lo))[:, None] + half[:, None] * xl[None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            vals = np.where(r > 0, h(r) * r ** (-1.0 - alpha), 0.0)
        return half * (vals @ wl)

    if q0 < 1.0:
        near, far = -b + D, b + D  # chord ends on the two sides of x
        if r_lo == 0.0:
            xj, wj = _rule("jacobi", n, alpha)
            r = near[:, None] * (0.5 * (1.0 + xj))[None, :]
            with np.errstate(divide="ignore", invalid="ignore"):
                vals = np.where(r > 0, h(r) / (r * r), 0.0)
            total += (0.5 * near) ** (2.0 - alpha) * (vals @ wj)
        else:
            total += legendre(np.zeros_like(near), near)
        total += legendre(near, far)
        total += -2.0 * G0 * np.maximum(far, r_lo) ** (-alpha) / alpha
    else:
        hit = D > 0
        lo, hi = np.where(hit, b - D, 0.0), np.where(hit, b + D, 0.0)
        total += np.where(hit, legendre(lo, hi), 0.0)
    return total


def _angular(bump: SmoothBump, s: float, alpha: float, n_ang: int, n_rad: int, r_lo: float = 0.0) -> float:
    d = bump.d
    rho = bump.radius
    if d == 1:
        return float(_radial(bump, s, np.array([s]), alpha, n_rad, r_lo)[0])
    if s == 0.0:
        F = _radial(bump, 0.0, np.array([0.0]), alpha, n_rad, r_lo)[0]
        return float(0.5 * surface_area(d) * F)
    x, w = _rule("legendre", n_ang)
    if s < rho or r_lo > 0:
        u_lo = 0.0
    else:
        u_lo = math.sqrt(max(s * s - rho * rho, 0.0)) / s
    if d == 2:
        # 2 * int_0^{psi0} F(s cos psi) dpsi
        psi0 = math.acos(u_lo)
        psi = 0.5 * psi0 * (1.0 + x)
        F = _radial(bump, s, s * np.cos(psi), alpha, n_rad, r_lo)
        return float(2.0 * 0.5 * psi0 * (F @ w))
    # d = 3: 2 pi int_{u_lo}^1 F(s u) du
    u = u_lo + 0.5 * (1.0 - u_lo) * (1.0 + x)
    F = _radial(bump, s, s * u, alpha, n_rad, r_lo)
    return float(2.0 * math.pi * 0.5 * (1.0 - u_lo) * (F @ w))


def _lattice_near(bump: SmoothBump, x: np.ndarray, alpha: float, K: int, r_s: float) -> np.ndarray:
    """K^{-d} sum over 0 < |z| < r_s of (g(x+z) + g(x-z) - 2g(x))/2 |z|^{-d-alpha}."""
    d = bump.d
    m = int(math.floor(r_s * K))
    axis = np.arange(-m, m + 1)
    grid = np.stack([g.reshape(-1) for g in np.meshgrid(*([axis] * d), indexing="ij")], axis=1)
    r2 = np.sum(grid**2, axis=1)
    grid = grid[(r2 > 0) & (r2 < (r_s * K) ** 2)]
    z = grid / K
    kern = np.sum(z**2, axis=1) ** (-(d + alpha) / 2) * K ** (-d)
    out = np.empty(len(x))
    for i, p in enumerate(x):
        g0 = bump.value(p[None, :])[0]
        second = 0.5 * (bump.value(p + z) + bump.value(p - z)) - g0
        out[i] = second @ kern
    return out


def frac_generator_apply(g: SmoothBump, x, alpha: float, quad: QuadratureConfig = None, return_estimate=False):
    """Evaluate the limit generator on the bump ``g`` at the points ``x``.

    Raises AccuracyError when the coarse/fine disagreement exceeds ``quad.tol``.
    """
    check_alpha(alpha)
    quad = quad or QuadratureConfig()
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != g.d:
        raise DomainError("points and bump have different dimensions")
    if g.amplitude == 0.0:
        zero = np.zeros(len(x))
        return (zero, 0.0) if return_estimate else zero
    dist = np.sqrt(np.sum((x - np.asarray(g.center)) ** 2, axis=1))
    # every point at the same distance from the center gets the same value
    keys = np.round(dist, 12)
    uniq, inverse = np.unique(keys, return_inverse=True)
    r_lo = quad.split * g.radius if quad.method == "lattice" else 0.0
    fine = np.array([_angular(g, s, alpha, quad.n_angle, quad.n_radial, r_lo) for s in uniq])
    coarse = np.array(
        [_angular(g, s, alpha, max(2 * quad.n_angle // 3, 4), max(2 * quad.n_radial // 3, 4), r_lo) for s in uniq]
    )
    estimate = float(np.max(np.abs(fine - coarse))) if len(uniq) else 0.0
    vals = fine[inverse]
    if quad.method == "lattice":
        vals = vals + _lattice_near(g, x, alpha, quad.k_ref, r_lo)
    elif quad.method != "polar":
        raise DomainError(f"unknown quadrature method {quad.method!r}")
    if estimate > quad.tol * max(1.0, abs(g.amplitude)):
        raise AccuracyError(f"quadrature error estimate {estimate:.3g} exceeds tolerance {quad.tol:.3g}", estimate)
    return (vals, estimate) if return_estimate else vals


@dataclass
class TestFunction:
    """f = lambda g - L g sampled on a box, with the exact resolvent u = g."""

    g: SmoothBump
    lam: float
    alpha: float
    box: LatticeBox
    f: GridFunction
    u: GridFunction
    accuracy: float
    meta: dict = field(default_factory=dict)

    __test__ = False  # not a pytest class


def make_test_function(g: SmoothBump, lam: float, alpha: float, box: LatticeBox, quad: QuadratureConfig = None):
    if lam <= 0:
        raise DomainError(f"lambda must be positive, got {lam}")
    if g.d != box.d:
        raise DomainError("bump and box have different dimensions")
    pts = box.points
    gv = g.value(pts)
    Lg, est = frac_generator_apply(g, pts, alpha, quad, return_estimate=True)
    return TestFunction(g, float(lam), float(alpha), box, GridFunction(box, lam * gv - Lg), GridFunction(box, gv), est)


# ---------------------------------------------------------------------------
# symbol of the generator


def _radial_symbol(alpha: float, tol: float) -> float:
    """int_0^inf (1 - cos u) u^{-1-alpha} du by tanh-sinh plus oscillatory quadrature."""
    with mpmath.workdps(30):
        a = mpmath.mpf(alpha)
        head, e1 = mpmath.quad(lambda u: (1 - mpmath.cos(u)) * u ** (-1 - a), [0, 1], error=True)
        osc = mpmath.quadosc(lambda u: -mpmath.cos(u) * u ** (-1 - a), [1, mpmath.inf], omega=1)
        val = head + 1 / a + osc
        # compare against a second pass with a shifted split point
        head2 = mpmath.quad(lambda u: (1 - mpmath.cos(u)) * u ** (-1 - a), [0, 2])
        osc2 = mpmath.quadosc(lambda u: -mpmath.cos(u) * u ** (-1 - a), [2, mpmath.inf], omega=1)
        val2 = head2 + 2 ** (-a) / a + osc2
        err = abs(val - val2) + abs(e1)
    if err > tol * abs(val):
        raise AccuracyError(f"radial symbol integral not converged (estimate {float(err):.3g})", float(err))
    return float(val)


def _angular_moment(xi: np.ndarray, alpha: float, tol: float) -> float:
    """int_{S^{d-1}} |xi . t|^alpha dt in fixed coordinates."""
    d = len(xi)
    if d == 1:
        return 2.0 * abs(xi[0]) ** alpha
    if d == 2:
        phi0 = math.atan2(xi[1], xi[0])
        kinks = sorted({(phi0 + math.pi / 2) % (2 * math.pi), (phi0 - math.pi / 2) % (2 * math.pi)})
        pts = [0.0] + kinks + [2 * math.pi]
        fn = lambda t: abs(xi[0] * math.cos(t) + xi[1] * math.sin(t)) ** alpha
        total, err = 0.0, 0.0
        for lo, hi in zip(pts[:-1], pts[1:]):
            v, e = integrate.quad(fn, lo, hi, epsabs=0, epsrel=1e-13, limit=200)
            total += v
            err += e
    elif d == 3:
        fn = lambda phi, th: abs(
            xi[0] * math.sin(th) * math.cos(phi) + xi[1] * math.sin(th) * math.sin(phi) + xi[2] * math.cos(th)
        ) ** alpha * math.sin(th)
        total, err = integrate.dblquad(fn, 0.0, math.pi, 0.0, 2 * math.pi, epsabs=0, epsrel=1e-11)
    else:
        raise DomainError("symbol is implemented for d <= 3")
    if err > tol * abs(total):
        raise AccuracyError(f"angular moment not converged (estimate {err:.3g})", err)
    return total


def symbol(xi, alpha: float, tol: float = 1e-9) -> float:
    """int (1 - cos(xi . z)) |z|^{-d-alpha} dz evaluated by quadrature."""
    check_alpha(alpha)
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    if not np.any(xi):
        return 0.0
    return _radial_symbol(alpha, tol) * _angular_moment(xi, alpha, tol)


def symbol_constant(d: int, alpha: float, tol: float = 1e-9) -> float:
    """c(d, alpha) with int (1 - cos(xi . z)) |z|^{-d-alpha} dz = c |xi|^alpha."""
    e1 = np.zeros(d)
    e1[0] = 1.0
    return symbol(e1, alpha, tol)


def symbol_constant_closed(d: int, alpha: float) -> float:
    """pi^{d/2} |Gamma(-alpha/2)| / (2^alpha Gamma((d + alpha)/2))."""
    return math.pi ** (d / 2) * abs(math.gamma(-alpha / 2)) / (2**alpha * math.gamma((d + alpha) / 2))
