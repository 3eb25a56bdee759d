"""Jang operator, capillarity-regularized radial solves and their tau -> 0 limit.

The operator acting on a graphing function f over (M, g, K) is

    J(f) = H_g(f) - tr_g(K)(f),
    H_g(f) = P^{ij} Hess_ij f / sqrt(1 + |df|^2),   tr_g(K)(f) = P^{ij} K_ij,
    P^{ij} = g^{ij} - f^i f^j / (1 + |df|^2).

For spherically symmetric data g = g_rr dr^2 + G sigma and K = K_rr dr^2 +
K_ang sigma, and a radial f, this reduces with w = 1 + g^rr f'^2 to

    J = (g^rr / sqrt w) [Hess_rr / w + G' f' / G] - g^rr K_rr / w - 2 K_ang / G.

The regularized problem J(f) = tau f is discretized with central differences
in x = ln r and solved with a damped Newton iteration on the tridiagonal
Jacobian.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicHermiteSpline, CubicSpline
from scipy.linalg import solve_banded

from .barriers import BarrierSolution
from .geometry_core import (
    HarmonicCoeffs,
    RadialGrid,
    SphereGrid,
    christoffel_symbols,
    fit_decay_tail,
)
from .initial_data import InitialData, SQRT4PI


class JangSolverError(RuntimeError):
    """Newton iteration failed to converge."""

    def __init__(self, message, last_residual=None, iterations=None):
        super().__init__(message)
        self.last_residual = last_residual
        self.iterations = iterations


class TrappingError(RuntimeError):
    """A solution or Newton iterate left the slab between the barriers."""


class ConvergenceFailure(RuntimeError):
    """Iterates of a continuation schedule did not form a Cauchy sequence."""


# ---------------------------------------------------------------------------
# pointwise operator


def _graph_projector(g, df):
    ginv = np.linalg.inv(g)
    up = np.einsum("...ij,...j->...i", ginv, df)
    w2 = 1.0 + np.einsum("...i,...i->...", up, df)
    P = ginv - np.einsum("...i,...j->...ij", up, up) / w2[..., None, None]
    return P, w2


def mean_curvature_of_graph(df, ddf, g, dg):
    """Mean curvature of the graph of f, from df, the coordinate second
    derivatives ddf and the metric with its first derivatives.

    Arrays broadcast over leading axes: df (...,3), ddf/g (...,3,3),
    dg (...,3,3,3) with dg[...,l,i,j] = d_l g_ij.
    """
    df = np.asarray(df)
    P, w2 = _graph_projector(g, df)
    gamma = christoffel_symbols(g, dg, check=False)
    hess = ddf - np.einsum("...kij,...k->...ij", gamma, df)
    return np.einsum("...ij,...ij->...", P, hess) / np.sqrt(w2)


def trace_K_of_graph(df, K, g):
    """Trace of K over the graph's tangent space (K extended by zero in t)."""
    P, _ = _graph_projector(g, np.asarray(df))
    return np.einsum("...ij,...ij->...", P, K)


def jang_operator_3d(data: InitialData, r, theta, phi, df, ddf):
    """H_g(f) - tr_g(K)(f) at sample points, given coordinate derivatives of f."""
    s = data.sample(r, theta, phi)
    return mean_curvature_of_graph(df, ddf, s.g, s.dg) - trace_K_of_graph(df, s.K, s.g)


# ---------------------------------------------------------------------------
# radial reduction


class RadialCoefficients:
    """Radial coefficient functions of spherically symmetric data on a grid."""

    def __init__(self, data: InitialData, r):
        if not data.spherically_symmetric:
            raise ValueError(f"data {data.name!r} is not spherically symmetric")
        self.r = np.asarray(r, float)
        prof = data.radial_profiles(self.r)
        self.ginv = 1.0 / prof["grr"]
        self.gamma = prof["grr_r"] / (2 * prof["grr"])
        self.log_G_r = prof["G_r"] / prof["G"]
        self.Krr = prof["Krr"]
        self.kang = 2 * prof["Kang"] / prof["G"]

    def operator(self, d1, d2):
        """J from f' and f'' (works for complex d1 as well)."""
        w = 1 + self.ginv * d1 * d1
        sw = np.sqrt(w)
        hess = d2 - self.gamma * d1
        return self.ginv / sw * (hess / w + self.log_G_r * d1) - self.ginv * self.Krr / w - self.kang

    def d_operator(self, d1, d2):
        """(dJ/df', dJ/df'') with the first by complex step."""
        step = 1e-30
        dj1 = self.operator(d1 + 1j * step, d2).imag / step
        w = 1 + self.ginv * d1 * d1
        dj2 = self.ginv / w**1.5
        return dj1, dj2

    def tangential_trace(self, d1):
        w = 1 + self.ginv * d1 * d1
        return self.ginv * self.Krr / w + self.kang


def _interior_derivatives(f, grid: RadialGrid):
    h = grid.step
    r = grid.nodes[1:-1]
    fx = (f[2:] - f[:-2]) / (2 * h)
    fxx = (f[2:] - 2 * f[1:-1] + f[:-2]) / (h * h)
    return fx / r, (fxx - fx) / (r * r)


def _check_log_grid(grid: RadialGrid):
    if grid.spacing_mode != "logarithmic":
        raise ValueError("the radial Jang discretization needs a logarithmic grid")


def jang_residual(f, data: InitialData, tau: float = 0.0, grid: RadialGrid | None = None):
    """H_g(f) - tr_g(K)(f) - tau f at the interior nodes of a log grid.

    ``f`` holds samples on ``grid``; derivatives are second-order central
    differences in ln r.  The returned array has grid.size - 2 entries.
    """
    _check_log_grid(grid)
    f = np.asarray(f, float)
    coeffs = RadialCoefficients(data, grid.nodes[1:-1])
    d1, d2 = _interior_derivatives(f, grid)
    return coeffs.operator(d1, d2) - tau * f[1:-1]


def radial_operator(data: InitialData, r, d1, d2):
    """J for a radial f with given analytic derivatives at radii r."""
    return RadialCoefficients(data, r).operator(np.asarray(d1, float), np.asarray(d2, float))


def kform_identity_check(phi, data: InitialData, grid: RadialGrid) -> float:
    """Max discrepancy between J(phi) and sqrt(1+r^2)[k' + (2/r)(k - s) - (1-k^2)/V].

    Valid on the hyperbolic background, where both sides are evaluated
    independently: J from finite differences of phi, the bracket from the
    slope variable k = phi' V / sqrt(1 + V^2 phi'^2) and its own derivative.
    The comparison skips the two nodes next to each end, where the nested
    k' stencil would reach a one-sided (first-order after division by h)
    value of k.
    """
    _check_log_grid(grid)
    phi = np.asarray(phi, float)
    r = grid.nodes
    V = np.sqrt(1 + r * r)
    lhs = jang_residual(phi, data, 0.0, grid)
    h = grid.step
    d1 = np.gradient(phi, h, edge_order=2) / r
    k = V * d1 / np.sqrt(1 + V * V * d1 * d1)
    kp = np.gradient(k, h, edge_order=2) / r
    rhs = V * (kp + (2 / r) * (k - r / V) - (1 - k * k) / V)
    return float(np.max(np.abs(lhs - rhs[1:-1])[1:-1]))


# ---------------------------------------------------------------------------
# center-regular shooting for tau = 0


def regular_center_profile(data: InitialData, r_max: float, grid: RadialGrid | None = None,
                           steps_per_decade: int = 2000, r_center: float = 1e-6):
    """Exact radial Jang solution that is smooth at the center.

    With the unit normal's radial component k = sqrt(g^rr) f'/sqrt(w), the
    tau = 0 equation is the first-order ODE
        k' = sqrt(g_rr) [g^rr (1 - k^2) K_rr + 2 K_ang/G] - k G'/G,   k(0) = 0,
    and f' = sqrt(g_rr) k / sqrt(1 - k^2).  It is integrated with classical
    RK4 in ln r, sampling the data once at all stage radii.  Returns
    (r, f, k) on ``grid`` (or on the integration nodes) with f(0) = 0, and
    raises JangSolverError if |k| reaches 1 (the graph blows up).
    """
    if not data.regular_center:
        raise ValueError("data has no regular center")
    if grid is not None:
        r_max = max(r_max, float(grid.nodes[-1]))
    n = int(np.ceil(np.log10(r_max / r_center) * steps_per_decade))
    x = np.linspace(np.log(r_center), np.log(r_max), 2 * n + 1)
    rs = np.exp(x)
    p = data.radial_profiles(rs)
    sg = np.sqrt(p["grr"])
    src = sg * 2 * p["Kang"] / p["G"]
    quad = sg * p["Krr"] / p["grr"]
    damp = p["G_r"] / p["G"]

    def rhs(j, k):
        om = 1 - k * k
        if om <= 0:
            raise JangSolverError(f"radial Jang solution blows up near r = {rs[j]:.6g}")
        kp = quad[j] * om + src[j] - k * damp[j]
        return rs[j] * kp, rs[j] * sg[j] * k / np.sqrt(om)

    h = x[2] - x[0]
    k = (quad[0] + src[0]) / 3 * r_center
    f = 0.5 * sg[0] * k * r_center
    ks = np.empty(n + 1)
    fs = np.empty(n + 1)
    dk = np.empty(n + 1)
    df = np.empty(n + 1)
    ks[0], fs[0] = k, f
    dk[0], df[0] = rhs(0, k)
    # Kahan-compensated accumulation: f grows like r over ~1e5 steps, and the
    # plain running sum leaves a random walk that finite differences of the
    # samples (curvature, conformal solve) would amplify.
    ck = cf = 0.0
    for i in range(n):
        j = 2 * i
        a1, b1 = dk[i], df[i]
        a2, b2 = rhs(j + 1, k + 0.5 * h * a1)
        a3, b3 = rhs(j + 1, k + 0.5 * h * a2)
        a4, b4 = rhs(j + 2, k + h * a3)
        y = h * (a1 + 2 * a2 + 2 * a3 + a4) / 6 - ck
        t = k + y
        ck = (t - k) - y
        k = t
        y = h * (b1 + 2 * b2 + 2 * b3 + b4) / 6 - cf
        t = f + y
        cf = (t - f) - y
        f = t
        ks[i + 1], fs[i + 1] = k, f
        dk[i + 1], df[i + 1] = rhs(j + 2, k)
    xn = x[::2]
    if grid is None:
        return np.exp(xn), fs, ks
    xs = np.log(grid.nodes)
    sel = xs >= xn[0]
    fk = CubicHermiteSpline(xn, ks, dk)(xs[sel])
    ff = CubicHermiteSpline(xn, fs, df)(xs[sel])
    return grid.nodes[sel], ff, fk


# ---------------------------------------------------------------------------
# regularized boundary value problem


@dataclass
class JangProblem:
    data: InitialData
    grid: RadialGrid
    tau: float
    boundary_value: float
    inner: str = "auto"  # "regular_center", "dirichlet" or "auto"
    inner_value: float | None = None

    def __post_init__(self):
        _check_log_grid(self.grid)
        if not (0 <= self.tau < 1):
            raise ValueError("tau must lie in [0, 1)")
        if self.inner == "auto":
            self.inner = "regular_center" if self.data.regular_center else "dirichlet"
        if self.inner not in ("regular_center", "dirichlet"):
            raise ValueError(f"unknown inner boundary condition {self.inner!r}")

    @property
    def R(self) -> float:
        return float(self.grid.nodes[-1])

    @property
    def r_inner(self) -> float:
        return float(self.grid.nodes[0])

    @classmethod
    def on_ball(cls, data, R, tau, boundary_value, n=400, r_center=1e-3):
        """Problem on a log grid that starts close to the center."""
        return cls(data, RadialGrid.logarithmic(r_center, R, n), tau, boundary_value, "regular_center")

    @classmethod
    def on_annulus(cls, data, r_inner, R, tau, boundary_value, inner_value, n=400):
        return cls(data, RadialGrid.logarithmic(r_inner, R, n), tau, boundary_value, "dirichlet", inner_value)


@dataclass
class JangSolution:
    grid: RadialGrid
    f: np.ndarray
    tau: float
    residual_norm: float
    newton_iterations: int
    trapped: bool
    residual_history: list = field(default_factory=list)
    boundary_value: float = 0.0
    trap_margin: float = float("nan")
    raw_residual_norm: float = float("nan")

    @property
    def R(self) -> float:
        return float(self.grid.nodes[-1])

    def derivative(self):
        return np.gradient(self.f, self.grid.step, edge_order=2) / self.grid.nodes

    def interpolate(self, r):
        return CubicSpline(np.log(self.grid.nodes), self.f)(np.log(np.asarray(r, float)))

    def report(self, f_samples_path: str | None = None) -> dict:
        return {
            "tau": self.tau,
            "R": self.R,
            "iterations": self.newton_iterations,
            "residual_norm": self.residual_norm,
            "trapped": bool(self.trapped),
            "f_samples_path": f_samples_path,
        }

    def to_json(self, path=None) -> str:
        return json.dumps(self.report(path), indent=2)


def _row_weights(r):
    """Interior row scaling r^2/(1+r^2).

    Near the center the stencil entries grow like 1/(h r)^2, so unscaled
    residuals there carry a roundoff floor of order eps |f| / (h r)^2.  The
    weighted rows measure the defect in units of f instead.
    """
    return r * r / (1 + r * r)


def _system(f, problem: JangProblem, coeffs: RadialCoefficients):
    """Weighted residual and banded Jacobian for solve_banded((1, 2), ...).

    Banded storage: ab[2 + i - j, j] = A[i, j].
    """
    grid = problem.grid
    h = grid.step
    n = grid.size
    r = grid.nodes[1:-1]
    wt = _row_weights(r)
    d1, d2 = _interior_derivatives(f, grid)
    F = np.empty(n)
    F[1:-1] = wt * (coeffs.operator(d1, d2) - problem.tau * f[1:-1])
    a1, a2 = coeffs.d_operator(d1, d2)
    lower = wt * (-a1 / (2 * h * r) + a2 * (1 / (h * h) + 1 / (2 * h)) / (r * r))
    upper = wt * (a1 / (2 * h * r) + a2 * (1 / (h * h) - 1 / (2 * h)) / (r * r))
    diag = wt * (-2 * a2 / (h * h * r * r) - problem.tau)
    ab = np.zeros((4, n))
    ab[2, 1:-1] = diag
    ab[1, 2:] = upper
    ab[3, :-2] = lower
    F[-1] = f[-1] - problem.boundary_value
    ab[2, -1] = 1.0
    if problem.inner == "dirichlet":
        F[0] = f[0] - problem.inner_value
        ab[2, 0] = 1.0
    else:
        # Regular center: f = a + b r^2 + O(r^4).  On a log grid with ratio q
        # the first three nodes then satisfy q^2 (f_1 - f_0) = f_2 - f_1.
        q2 = (grid.nodes[1] / grid.nodes[0]) ** 2
        F[0] = (q2 * (f[1] - f[0]) - (f[2] - f[1])) / h
        ab[2, 0] = -q2 / h
        ab[1, 1] = (q2 + 1) / h
        ab[0, 2] = -1 / h
    return F, ab


def _slab(problem: JangProblem, barriers: BarrierSolution | None):
    """Barrier values at the nodes where they are defined (r >= r0)."""
    if barriers is None:
        return None
    r = problem.grid.nodes
    sel = (r >= barriers.r0) & (r <= barriers.grid.nodes[-1])
    lo = barriers.f_minus(r[sel])
    hi = barriers.f_plus(r[sel])
    return sel, lo, hi


def initial_guess(problem: JangProblem, barriers: BarrierSolution | None):
    r = problem.grid.nodes
    if barriers is None:
        f = np.sqrt(1 + r * r)
        return f + problem.boundary_value - f[-1]
    sel, lo, hi = _slab(problem, barriers)
    f = np.empty_like(r)
    f[sel] = 0.5 * (lo + hi)
    if np.any(~sel):
        first = np.argmax(sel)
        f[:first] = f[first]
    # match the boundary data exactly
    f += np.linspace(0, 1, r.size) * (problem.boundary_value - f[-1])
    if problem.inner == "dirichlet":
        f += np.linspace(1, 0, r.size) * (problem.inner_value - f[0])
    return f


def _newton(problem, coeffs, f, tol, max_iter, slab, trap_tol):
    f = np.array(f, float)
    if problem.inner == "dirichlet":
        f[0] = problem.inner_value
    f[-1] = problem.boundary_value
    F, ab = _system(f, problem, coeffs)
    norm = float(np.max(np.abs(F)))
    history = [norm]
    it = 0
    while norm > tol:
        if it >= max_iter:
            raise JangSolverError(
                f"Newton did not converge in {max_iter} iterations (residual {norm:.3e})", norm, it
            )
        try:
            step = solve_banded((1, 2), ab, -F)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise JangSolverError(f"singular Jacobian: {exc}", norm, it) from exc
        lam = 1.0
        while True:
            trial = f + lam * step
            Ft, abt = _system(trial, problem, coeffs)
            nt = float(np.max(np.abs(Ft)))
            if np.isfinite(nt) and nt < (1 - 1e-4 * lam) * norm:
                break
            lam *= 0.5
            if lam < 1e-10:
                break
        if lam < 1e-10:
            # stagnation at the roundoff floor counts as convergence
            if norm <= 100 * tol:
                break
            raise JangSolverError(f"line search failed (residual {norm:.3e})", norm, it)
        f, F, ab, norm = trial, Ft, abt, nt
        it += 1
        history.append(norm)
        if slab is not None and norm < 1e-3:
            sel, lo, hi = slab
            viol = max(float(np.max(lo - f[sel])), float(np.max(f[sel] - hi)))
            if viol > trap_tol * max(1.0, float(np.max(np.abs(f)))):
                raise TrappingError(f"Newton iterate leaves the barrier slab by {viol:.3e}")
    return f, norm, it, history


def solve_regularized_bvp(
    problem: JangProblem,
    barriers: BarrierSolution | None = None,
    tol: float = 1e-10,
    max_iter: int = 60,
    trap_tol: float = 1e-6,
    guess=None,
    continuation_depth: int = 12,
) -> JangSolution:
    """Damped Newton solve of J(f) = tau f with the problem's boundary data.

    Convergence is measured on the residual weighted by r^2/(1+r^2) (see
    ``_row_weights``); the unweighted max |J(f) - tau f| is reported as
    ``raw_residual_norm``.

    The line search backtracks on the max-norm of the residual.  Iterates
    that leave the barrier slab by more than ``trap_tol`` abort the solve;
    nothing is projected back.  Starting points are tried in order: the
    given guess (or the barrier midpoint), a translate of sqrt(1+r^2)
    matching the boundary data, and finally a continuation from tau/4.
    """
    coeffs = RadialCoefficients(problem.data, problem.grid.nodes[1:-1])
    slab = _slab(problem, barriers)
    starts = [initial_guess(problem, barriers) if guess is None else np.array(guess, float)]
    if barriers is not None or guess is not None:
        starts.append(initial_guess(problem, None))
    result = None
    last = None
    for f0 in starts:
        try:
            result = _newton(problem, coeffs, f0, tol, max_iter, slab, trap_tol)
            break
        except JangSolverError as exc:
            last = exc
    if result is None and problem.tau > 0 and continuation_depth > 0:
        easier = JangProblem(problem.data, problem.grid, problem.tau / 4, problem.boundary_value,
                             problem.inner, problem.inner_value)
        try:
            prev = solve_regularized_bvp(easier, barriers, tol, max_iter, trap_tol, None,
                                         continuation_depth - 1)
            result = _newton(problem, coeffs, prev.f, tol, max_iter, slab, trap_tol)
        except JangSolverError as exc:
            last = exc
    if result is None:
        raise last
    f, norm, it, history = result
    trapped = True
    margin = float("nan")
    if slab is not None:
        sel, lo, hi = slab
        scale = 1e-8 * max(1.0, float(np.max(np.abs(f))))
        margin = float(min(np.min(f[sel] - lo), np.min(hi - f[sel])))
        trapped = bool(margin >= -scale)
    raw = float(np.max(np.abs(jang_residual(f, problem.data, problem.tau, problem.grid))))
    return JangSolution(problem.grid, f, problem.tau, norm, it, trapped, history,
                        problem.boundary_value, margin, raw)


def apriori_bound_holds(solution: JangSolution, data: InitialData, tol: float = 1e-8) -> bool:
    """tau max|f| <= max(sup |tr^g K|, tau |f(R)|) + tol."""
    prof = data.radial_profiles(solution.grid.nodes)
    trK = prof["Krr"] / prof["grr"] + 2 * prof["Kang"] / prof["G"]
    bound = max(float(np.max(np.abs(trK))), solution.tau * abs(solution.boundary_value))
    return solution.tau * float(np.max(np.abs(solution.f))) <= bound + tol


# ---------------------------------------------------------------------------
# continuation


@dataclass
class LimitReport:
    schedule: list
    region: tuple
    differences: list
    ratios: list
    solutions: list
    final: JangSolution
    cauchy: bool
    tail_exponent: float | None = None
    log_coefficient: float | None = None

    def optimal_constant_error(self, reference, r_lo=None, r_hi=None):
        """sup |f - reference - C| on the region with C minimizing the sup."""
        r_lo, r_hi = r_lo or self.region[0], r_hi or self.region[1]
        r = self.final.grid.nodes
        sel = (r >= r_lo) & (r <= r_hi)
        d = self.final.f[sel] - reference(r[sel])
        return float(0.5 * (d.max() - d.min()))


def default_schedule(tau0=1e-2, R0=200.0, steps=6, grow=True):
    """tau_n = tau0 2^-n with R_n = R0 2^(n/2) (or fixed R0 when grow is False)."""
    return [(R0 * (2 ** (n / 2) if grow else 1.0), tau0 * 2.0**-n) for n in range(steps)]


def geometric_limit(
    data: InitialData,
    barriers: BarrierSolution | None,
    schedule,
    region=(5.0, 50.0),
    nodes_per_decade: int = 120,
    alpha: float = 0.0,
    boundary="midpoint",
    tol: float = 1e-10,
    strict: bool = False,
    tail_region: tuple | None = None,
) -> LimitReport:
    """Solve along a (R_n, tau_n) schedule and compare iterates on ``region``.

    ``boundary`` selects f(R_n): 'midpoint' of the barriers, 'upper',
    'lower', or a callable of R.  Differences are sup-norms on ``region``
    between consecutive iterates; the sequence is declared Cauchy when they
    decrease monotonically.  The expansion of the final iterate is checked
    on ``tail_region`` (default: from region[0] to R/2).
    """
    solutions = []
    guess_prev = None
    for R, tau in schedule:
        if callable(boundary):
            bv = float(boundary(R))
        elif barriers is None:
            bv = float(np.sqrt(1 + R * R))
        else:
            hi = float(barriers.f_plus(R))
            lo = float(barriers.f_minus(R))
            bv = {"midpoint": 0.5 * (hi + lo), "upper": hi, "lower": lo}[boundary]
        r_start = 1e-3 if data.regular_center else barriers.r0
        n = int(np.ceil(np.log10(R / r_start) * nodes_per_decade)) + 1
        grid = RadialGrid.logarithmic(r_start, R, n)
        if data.regular_center:
            prob = JangProblem(data, grid, tau, bv, "regular_center")
        else:
            mid = 0.5 * (float(barriers.f_plus(r_start)) + float(barriers.f_minus(r_start)))
            prob = JangProblem(data, grid, tau, bv, "dirichlet", mid)
        guess = None
        if guess_prev is not None:
            # continue f - sqrt(1+r^2) - alpha ln r as a constant beyond the old R
            rr = grid.nodes
            inside = np.minimum(rr, guess_prev.R)
            base = guess_prev.interpolate(inside) - np.sqrt(1 + inside**2) - alpha * np.log(inside)
            guess = base + np.sqrt(1 + rr * rr) + alpha * np.log(rr)
        solutions.append(solve_regularized_bvp(prob, barriers, tol=tol, guess=guess))
        guess_prev = solutions[-1]
    probe = np.geomspace(region[0], region[1], 400)
    vals = [s.interpolate(probe) for s in solutions]
    diffs = [float(np.max(np.abs(b - a))) for a, b in zip(vals[:-1], vals[1:])]
    ratios = [a / b for a, b in zip(diffs[:-1], diffs[1:]) if b > 0]
    cauchy = all(b < a for a, b in zip(diffs[:-1], diffs[1:]))
    if strict and not cauchy:
        raise ConvergenceFailure(f"differences {diffs} do not decrease")
    final = solutions[-1]
    report = LimitReport(list(schedule), tuple(region), diffs, ratios, solutions, final, cauchy)
    tail_region = tail_region or (region[0], final.R / 2)
    report.tail_exponent, report.log_coefficient = _tail_expansion(final, alpha, tail_region)
    return report


def _tail_expansion(sol: JangSolution, alpha: float, region):
    """Log coefficient of f - sqrt(1+r^2) and the remainder decay exponent.

    On the outer part of ``region`` r f' - r^2/V is fitted to
    a + (b + c ln r)/r: a is the ln r coefficient and the remainder decay is
    measured from the derivative of f - V - a ln r, which removes the free
    additive constant.
    """
    r = sol.grid.nodes
    sel = (r >= region[0]) & (r <= region[1])
    if sel.sum() < 10:
        return None, None
    V = np.sqrt(1 + r * r)
    d = sol.derivative()
    y = (r * d - r * r / V)[sel]
    x = r[sel]
    A = np.column_stack([np.ones_like(x), 1 / x, np.log(x) / x])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    a = float(coef[0])
    rem = np.abs(d[sel] - x / V[sel] - alpha / x)
    if np.any(rem == 0) or alpha == 0:
        return None, a
    try:
        fit = fit_decay_tail(x, rem)
    except Exception:
        return None, a
    return fit.p - 1.0, a


# ---------------------------------------------------------------------------
# ansatz check on a 3D tail grid


@dataclass
class AnsatzFit:
    constant: HarmonicCoeffs
    log: HarmonicCoeffs
    residual: float
    radii: np.ndarray

    @property
    def constant_part(self) -> float:
        """Spherical mean of the fitted constant."""
        return float(self.constant[0, 0] / SQRT4PI)

    @property
    def log_part(self) -> float:
        return float(self.log[0, 0] / SQRT4PI)

    @property
    def constant_sup(self) -> float:
        return float(np.max(np.abs(self.constant.table)))

    @property
    def log_sup(self) -> float:
        return float(np.max(np.abs(self.log.table)))


def ansatz_leading_coefficient(phi, psi: HarmonicCoeffs, data: InitialData, tail: RadialGrid,
                               sphere: SphereGrid | None = None) -> AnsatzFit:
    """Fit r^3 J(phi + psi) = a + b ln r per harmonic mode over ``tail``.

    ``phi`` is a callable returning (phi, phi', phi'') at radii r.  Angular
    derivatives of psi are analytic; J is the full 3D operator.
    """
    sphere = sphere or SphereGrid.for_degree(max(psi.L, 8) * 2)
    th, ph = sphere.mesh
    ev = psi.evaluate(th, ph, 2)
    z = np.zeros_like(th)
    rows = []
    for r in tail.nodes:
        _, p1, p2 = phi(np.array([r]))
        df = np.stack([z + p1[0], ev[(1, 0)], ev[(0, 1)]], axis=-1)
        ddf = np.zeros(th.shape + (3, 3))
        ddf[..., 0, 0] = p2[0]
        ddf[..., 1, 1] = ev[(2, 0)]
        ddf[..., 1, 2] = ddf[..., 2, 1] = ev[(1, 1)]
        ddf[..., 2, 2] = ev[(0, 2)]
        Jv = jang_operator_3d(data, np.full(th.shape, r), th, ph, df, ddf)
        rows.append(HarmonicCoeffs.analyze(r**3 * Jv, sphere, psi.L).table)
    rows = np.array(rows)
    x = tail.nodes
    A = np.column_stack([np.ones_like(x), np.log(x)])
    flat = rows.reshape(len(x), -1)
    coef, *_ = np.linalg.lstsq(A, flat, rcond=None)
    resid = float(np.max(np.abs(A @ coef - flat))) if flat.size else 0.0
    shape = rows.shape[1:]
    return AnsatzFit(
        HarmonicCoeffs(psi.L, coef[0].reshape(shape)),
        HarmonicCoeffs(psi.L, coef[1].reshape(shape)),
        resid,
        x,
    )


def analytic_profile(alpha: float):
    """phi = sqrt(1+r^2) + alpha ln r with exact derivatives."""

    def phi(r):
        r = np.asarray(r, float)
        V = np.sqrt(1 + r * r)
        return V + alpha * np.log(r), r / V + alpha / r, 1 / V**3 - alpha / (r * r)

    return phi
