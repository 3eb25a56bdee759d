"""Conformal factor on a spherically symmetric Jang graph and the mass chain.

The graph metric is g_bar = a(r) dr^2 + G(r) sigma.  We solve

    -Lap u + Scal u / 8 = 0

for a radial u > 0, read off u = 1 + A/r + ..., and compare the mass of
u^4 g_bar computed two ways: alpha + 2A, and the ADM flux integral.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import solve_banded

from .geometry_core import RadialGrid, SphereGrid
from .graph_geometry import (
    ADMResult,
    GraphFunction,
    adm_mass,
    induced_metric,
    scalar_curvature_direct,
)
from .initial_data import InitialData


class ConformalSolverError(RuntimeError):
    """The discrete solve produced a non-positive conformal factor."""


class ConformalPreconditionError(ValueError):
    """The scalar curvature of the graph does not decay fast enough."""


class ConformalInconsistencyError(RuntimeError):
    """The two conformal mass computations disagree."""


class ExtractionWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# radial graph metric


@dataclass
class RadialGraphMetric:
    """Samples of a(r) = g_bar_rr, G(r) and Scal(r) on a radial grid."""

    grid: RadialGrid
    a: np.ndarray
    G: np.ndarray
    scal: np.ndarray
    label: str = "graph"

    def scaled_potential(self, lam: float) -> "RadialGraphMetric":
        return RadialGraphMetric(self.grid, self.a, self.G, lam * self.scal, self.label)


def radial_graph_metric(gf: GraphFunction, data: InitialData, grid: RadialGrid,
                        label: str = "graph", route: str = "radial") -> RadialGraphMetric:
    """Samples of the rotationally symmetric graph metric and its scalar curvature.

    ``route="radial"`` uses the warped-product formula

        Scal = 2/G - 2 G''/(a G) + G'^2/(2 a G^2) + a' G'/(a^2 G),

    with a = g_rr + f'^2, which keeps roundoff at the level of the
    individual terms.  ``route="direct"`` evaluates the full Christoffel
    expression instead; it agrees to roundoff but its noise floor is
    larger, which matters once Scal is weighted by r^3 in the solve.
    """
    if gf.psi is not None and any(abs(v) > 0 for _, _, v in gf.psi.nonzero()):
        raise ValueError("conformal solves are restricted to rotationally symmetric graphs")
    r = grid.nodes
    if route == "direct":
        gm = induced_metric(gf, data, r, np.full(r.shape, np.pi / 2), np.zeros(r.shape))
        if not np.allclose(gm.g[..., 0, 1:], 0.0, atol=1e-12) or not np.allclose(
            gm.g[..., 2, 2], gm.g[..., 1, 1], rtol=1e-12
        ):
            raise ValueError("graph metric is not of the form a dr^2 + G sigma")
        return RadialGraphMetric(grid, gm.g[..., 0, 0].copy(), gm.g[..., 1, 1].copy(),
                                 scalar_curvature_direct(gm), label)
    if route != "radial":
        raise ValueError(f"unknown scalar curvature route {route!r}")
    p = data.radial_profiles(r)
    _, f1, f2, _ = (np.asarray(x, float) for x in gf.radial_jet(r))
    a = p["grr"] + f1 * f1
    a_r = p["grr_r"] + 2 * f1 * f2
    G, G1, G2 = p["G"], p["G_r"], p["G_rr"]
    scal = 2 / G - 2 * G2 / (a * G) + G1 * G1 / (2 * a * G * G) + a_r * G1 / (a * a * G)
    return RadialGraphMetric(grid, a, G.copy(), scal, label)


def flat_radial_metric(grid: RadialGrid, scal=None, label: str = "flat") -> RadialGraphMetric:
    r = grid.nodes
    s = np.zeros_like(r) if scal is None else np.asarray(scal(r) if callable(scal) else scal, float)
    return RadialGraphMetric(grid, np.ones_like(r), r * r, s, label)


def scal_decay_rate(metric: RadialGraphMetric, decades: float = 1.0, negligible: float = 1e-5) -> float:
    """Log-log slope of |Scal| over the outermost ``decades``.

    The slope only matters if the tail can move the expansion coefficient:
    when the tail charge int r^2 |Scal| / 8 dr is below ``negligible`` the
    rate is reported as inf.  This lets exactly flat graphs, whose sampled
    curvature is pure roundoff, pass the precondition.
    """
    r = metric.grid.nodes
    sel = r >= r[-1] / 10**decades
    rs = r[sel]
    s = np.abs(metric.scal[sel])
    if rs.size < 5:
        return float("inf")
    charge = float(np.trapezoid(rs * rs * s / 8.0, rs))
    nz = s > 1e-300
    if charge <= negligible or nz.sum() < 5:
        return float("inf")
    slope = np.polyfit(np.log(rs[nz]), np.log(s[nz]), 1)[0]
    return float(-slope)


# ---------------------------------------------------------------------------
# solve


@dataclass
class ConformalSolve:
    grid: RadialGrid
    u: np.ndarray
    A: float
    conformal_mass: float | None
    boundary_radius: float
    bound: float
    scal_rate: float
    tail: tuple
    warnings: list = field(default_factory=list)

    def jet(self, r):
        """u and du/dr at radii inside the grid (cubic spline in ln r or r)."""
        x, to_x = _coordinate(self.grid)
        spl = CubicSpline(x, self.u)
        r = np.asarray(r, float)
        xr = to_x(r)
        dx = 1.0 / r if self.grid.spacing_mode == "logarithmic" else 1.0
        return spl(xr), spl(xr, 1) * dx

    def summary(self) -> dict:
        return {
            "A": self.A,
            "conformal_mass": self.conformal_mass,
            "boundary_radius": self.boundary_radius,
            "bound": self.bound,
            "scal_rate": self.scal_rate,
            "u_min": float(self.u.min()),
            "u_max": float(self.u.max()),
            "warnings": list(self.warnings),
        }


def _coordinate(grid: RadialGrid):
    if grid.spacing_mode == "logarithmic":
        return np.log(grid.nodes), np.log
    if grid.spacing_mode == "uniform":
        return grid.nodes.copy(), (lambda r: r)
    raise ValueError(f"unsupported grid spacing {grid.spacing_mode!r}")


def _tridiagonal(metric: RadialGraphMetric):
    """Rows of the discrete operator on the uniform computational coordinate x.

    With J = dr/dx the equation reads -(P/J u_x)_x + J W u = 0 where
    P = G / sqrt(a) and W = sqrt(a) G Scal / 8.  Inside: mirror ghost for
    u_r = 0.  Outside: ghost from the Robin relation u_r = -(u - 1)/r.
    """
    grid = metric.grid
    r = grid.nodes
    x, _ = _coordinate(grid)
    h = float(x[1] - x[0])
    J = r if grid.spacing_mode == "logarithmic" else np.ones_like(r)
    sa = np.sqrt(metric.a)
    Q = metric.G / sa / J
    W = J * sa * metric.G * metric.scal / 8.0
    # unknown is v = u - 1, so the exactly flat case has a zero right-hand side
    # and the near-center rows (Q ~ r) cannot amplify row-sum roundoff.
    n = r.size
    Qh = 0.5 * (Q[1:] + Q[:-1])
    lower = np.zeros(n)
    diag = np.zeros(n)
    upper = np.zeros(n)
    rhs = -W.copy()
    h2 = h * h
    diag[1:-1] = (Qh[1:] + Qh[:-1]) / h2 + W[1:-1]
    upper[1:-1] = -Qh[1:] / h2
    lower[1:-1] = -Qh[:-1] / h2
    # inner node: u_{-1} = u_1, face values Q_{+-1/2} -> Q_0 on the mirror.
    diag[0] = 2 * Qh[0] / h2 + W[0]
    upper[0] = -2 * Qh[0] / h2
    # outer node: v_{N+1} = v_{N-1} - 2 h (J/r) v_N, Q_{N+1/2} = 2 Q_N - Q_{N-1/2}.
    qp = 2 * Q[-1] - Qh[-1]
    beta = 2 * h * J[-1] / r[-1]
    diag[-1] = (qp * (1 + beta) + Qh[-1]) / h2 + W[-1]
    lower[-1] = -(qp + Qh[-1]) / h2
    return lower, diag, upper, rhs


def _solve_linear(metric: RadialGraphMetric) -> np.ndarray:
    lower, diag, upper, rhs = _tridiagonal(metric)
    ab = np.zeros((3, diag.size))
    ab[0, 1:] = upper[:-1]
    ab[1] = diag
    ab[2, :-1] = lower[1:]
    return solve_banded((1, 1), ab, rhs)


def solve_conformal_factor(metric: RadialGraphMetric, alpha: float | None = None,
                           tail: tuple | None = None, min_rate: float = 3.0) -> ConformalSolve:
    """Positive radial solution of -Lap u + Scal u / 8 = 0 with u -> 1.

    ``alpha`` (the ADM mass of the graph) is only used to report the
    formula mass alpha + 2A.  The expansion coefficient is fitted on
    ``tail`` (default: the outermost decade of the grid).
    """
    rate = scal_decay_rate(metric)
    if not rate > min_rate:
        raise ConformalPreconditionError(
            f"scalar curvature decays like r^-{rate:.3g}; need a rate above {min_rate}"
        )
    v = _solve_linear(metric)
    u = 1.0 + v
    if not np.all(np.isfinite(u)) or np.any(u <= 0):
        bad = int(np.argmin(u)) if np.all(np.isfinite(u)) else 0
        raise ConformalSolverError(
            f"conformal factor is not positive (min {np.nanmin(u):.6g} at r = {metric.grid.nodes[bad]:.6g})"
        )
    r = metric.grid.nodes
    if tail is None:
        tail = (r[-1] / 10.0, r[-1])
    caught = []
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always", ExtractionWarning)
        A = extract_A(r, u, tail)
        caught = [str(w.message) for w in rec if issubclass(w.category, ExtractionWarning)]
    bound = float(max(np.max(u), 1.0 / np.min(u)))
    mass = None if alpha is None else float(alpha + 2 * A)
    return ConformalSolve(metric.grid, u, A, mass, float(r[-1]), bound, rate, tuple(tail), caught)


def extract_A(r, u, tail=None, residual_threshold: float = 1e-2) -> float:
    """Coefficient A in u = 1 + A/r + c/r^2 from a least-squares fit on ``tail``.

    r (u - 1) is fitted against 1 and 1/r with weights proportional to r so
    the outer samples, where the truncated expansion is most accurate,
    dominate.  A residual above ``residual_threshold`` (relative to
    max(|A|, 1e-12)) is reported as an ExtractionWarning.
    """
    r = np.asarray(r, float)
    u = np.asarray(u, float)
    if tail is not None:
        sel = (r >= tail[0] * (1 - 1e-12)) & (r <= tail[1] * (1 + 1e-12))
        r, u = r[sel], u[sel]
    if r.size < 3:
        raise ValueError("coefficient fit needs at least 3 tail samples")
    dev = np.abs(u - 1)
    if dev.max() > 0 and dev[-1] > 2 * dev[0] + 1e-14:
        raise ValueError("u does not approach 1 on the fitted tail")
    y = r * (u - 1)
    w = np.sqrt(r / r.max())
    M = np.column_stack([np.ones_like(r), 1.0 / r])
    coef, *_ = np.linalg.lstsq(M * w[:, None], y * w, rcond=None)
    A = float(coef[0])
    resid = float(np.max(np.abs(M @ coef - y)))
    if resid > residual_threshold * max(abs(A), 1e-12) and resid > 1e-13:
        warnings.warn(f"expansion fit residual {resid:.3e} for A = {A:.6g}", ExtractionWarning,
                      stacklevel=2)
    return A


# ---------------------------------------------------------------------------
# mass


@dataclass
class ConformalMass:
    formula: float
    quadrature: float
    adm: ADMResult

    @property
    def discrepancy(self) -> float:
        return abs(self.formula - self.quadrature)


def conformal_metric_at(metric_at, u_jet):
    """metric_at for u^4 g from metric_at for g and u_jet(r) -> (u, u_r)."""

    def at(R, sphere):
        g, dg = metric_at(R, sphere)
        u, du = (float(np.asarray(v)) for v in u_jet(np.asarray(float(R))))
        c = u**4
        out = c * dg
        out[..., 0, :, :] += 4 * u**3 * du * g
        return c * g, out

    return at


def conformal_mass(metric_at, u_jet, alpha: float, A: float, radii,
                   sphere: SphereGrid | None = None, powers=(1, 2), rel_tol: float = 0.05,
                   abs_tol: float = 1e-6) -> ConformalMass:
    """Mass of u^4 g by the formula alpha + 2A and by ADM quadrature.

    The disagreement is measured against the largest of |alpha| and the
    two results.  For a rotationally symmetric graph with a smooth center
    the conformal metric is flat, both routes return 0, and alpha is the
    only meaningful scale.
    """
    adm = adm_mass(conformal_metric_at(metric_at, u_jet), radii, sphere, powers)
    formula = float(alpha + 2 * A)
    res = ConformalMass(formula, adm.mass, adm)
    scale = max(abs(formula), abs(adm.mass), abs(alpha))
    if res.discrepancy > max(rel_tol * scale, abs_tol):
        raise ConformalInconsistencyError(
            f"conformal mass routes disagree: alpha + 2A = {formula:.6g}, quadrature = {adm.mass:.6g}"
        )
    return res


# ---------------------------------------------------------------------------
# report


CHAIN_COLUMNS = ("E", "alpha", "M_bar", "A", "M_conf", "margin_PMT", "margin_A")


@dataclass
class MassChainReport:
    E: float
    alpha: float
    M_bar: float
    A: float
    M_conf: float
    tolerance: float = 0.01
    label: str = ""

    @property
    def margin_PMT(self) -> float:
        return self.E - self.M_conf

    @property
    def margin_A(self) -> float:
        return -self.alpha / 4 - self.A

    @property
    def checks(self) -> dict:
        tol = self.tolerance
        return {
            "alpha_equals_2E": abs(self.alpha - 2 * self.E) <= tol,
            "graph_mass_equals_alpha": abs(self.M_bar - self.alpha) <= 2 * tol * max(1.0, abs(self.alpha)),
            "A_below_minus_alpha_over_4": self.margin_A >= -tol,
            "conformal_mass_below_E": self.margin_PMT >= -tol,
        }

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def row(self) -> dict:
        return {c: float(getattr(self, c)) for c in CHAIN_COLUMNS}

    def to_json(self) -> str:
        return json.dumps(
            {
                "label": self.label,
                **self.row(),
                "checks": self.checks,
                "passed": self.passed,
                "conformal_mass_nonnegative": self.M_conf >= -self.tolerance,
            },
            indent=2,
        )

    def table(self) -> str:
        width = 14
        head = "".join(f"{c:>{width}}" for c in CHAIN_COLUMNS)
        vals = "".join(f"{v:>{width}.6g}" for v in self.row().values())
        lines = [head, vals]
        for name, ok in self.checks.items():
            lines.append(f"  {name}: {'pass' if ok else 'FAIL'}")
        lines.append(f"  conformal mass >= 0 (reported only): {self.M_conf >= -self.tolerance}")
        return "\n".join(lines)


def mass_chain_report(E: float, alpha: float, M_bar: float, A: float, M_conf: float,
                      tolerance: float = 0.01, label: str = "") -> MassChainReport:
    return MassChainReport(float(E), float(alpha), float(M_bar), float(A), float(M_conf), tolerance, label)
