"""Induced geometry of a graph t = f(x) over initial data and its ADM mass.

A graph function is handled through its jet: f together with coordinate
derivatives up to third order at points of a tensor grid (radial nodes x
sphere nodes).  The radial part F(r) is either given in closed form or as
samples on a logarithmic grid (second-order finite differences), the angular
part psi(theta, phi) is a finite harmonic expansion with exact derivatives.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .geometry_core import (
    HarmonicCoeffs,
    RadialGrid,
    SphereGrid,
    christoffel_symbols,
    extrapolate_inverse_powers,
    radial_derivatives,
    scalar_curvature,
    sphere_integrate,
)
from .initial_data import FieldSample, InitialData, constraints_from_sample


_ANGULAR3 = {
    (1, 1, 1): (3, 0),
    (1, 1, 2): (2, 1),
    (1, 2, 2): (1, 2),
    (2, 2, 2): (0, 3),
}


class GraphFunction:
    """f(r, theta, phi) = F(r) + psi(theta, phi).

    ``radial_jet(r)`` returns (F, F', F'', F''') at radii r.
    """

    def __init__(self, radial_jet, psi: HarmonicCoeffs | None = None, label: str = "f"):
        self.radial_jet = radial_jet
        self.psi = psi
        self.label = label

    @classmethod
    def from_samples(cls, values, grid: RadialGrid, psi=None, label="f", reference=None) -> "GraphFunction":
        """Radial part from samples; derivatives available at grid nodes only.

        With a closed-form ``reference`` jet (for instance
        ``analytic_radial(alpha)``) only values - reference is differenced.
        On a log grid the central-difference error of f' for f ~ r is a
        constant relative error of order h^2, which the ADM flux multiplies
        by R; differencing the deviation avoids that.
        """
        values = np.asarray(values, float)
        nodes = grid.nodes
        if reference is None:
            ref = [np.zeros_like(nodes)] * 4
        else:
            ref = [np.asarray(x, float) for x in reference(nodes)]
        dev = values - ref[0]
        d1, d2, d3 = radial_derivatives(dev, grid, order=3)
        d1, d2, d3 = d1 + ref[1], d2 + ref[2], d3 + ref[3]

        def jet(r):
            r = np.asarray(r, float)
            idx = np.clip(np.searchsorted(nodes, r), 0, nodes.size - 1)
            lower = np.clip(idx - 1, 0, nodes.size - 1)
            pick = np.where(np.abs(nodes[lower] - r) < np.abs(nodes[idx] - r), lower, idx)
            if np.any(np.abs(nodes[pick] - r) > 1e-9 * r):
                raise ValueError("sampled graph functions can only be evaluated at grid nodes")
            return values[pick], d1[pick], d2[pick], d3[pick]

        gf = cls(jet, psi, label)
        gf.grid = grid
        return gf

    @classmethod
    def analytic(cls, fn, psi=None, label="f") -> "GraphFunction":
        return cls(fn, psi, label)

    def shifted(self, c: float) -> "GraphFunction":
        base = self.radial_jet

        def jet(r):
            F, a, b, d = base(r)
            return F + c, a, b, d

        gf = GraphFunction(jet, self.psi, self.label)
        if hasattr(self, "grid"):
            gf.grid = self.grid
        return gf

    def jet(self, r, theta, phi):
        """(f, df, ddf, dddf) with shapes (...), (...,3), (...,3,3), (...,3,3,3)."""
        r, theta, phi = np.broadcast_arrays(np.asarray(r, float), theta, phi)
        F, F1, F2, F3 = self.radial_jet(r)
        shape = r.shape
        f = np.array(F, float, copy=True)
        df = np.zeros(shape + (3,))
        ddf = np.zeros(shape + (3, 3))
        dddf = np.zeros(shape + (3, 3, 3))
        df[..., 0] = F1
        ddf[..., 0, 0] = F2
        dddf[..., 0, 0, 0] = F3
        if self.psi is not None:
            ev = self.psi.evaluate(theta, phi, 3)
            f = f + ev[(0, 0)]
            df[..., 1] = ev[(1, 0)]
            df[..., 2] = ev[(0, 1)]
            ddf[..., 1, 1] = ev[(2, 0)]
            ddf[..., 1, 2] = ddf[..., 2, 1] = ev[(1, 1)]
            ddf[..., 2, 2] = ev[(0, 2)]
            for (i, j, k), key in _ANGULAR3.items():
                for perm in {(i, j, k), (i, k, j), (j, i, k), (j, k, i), (k, i, j), (k, j, i)}:
                    dddf[(...,) + perm] = ev[key]
        return f, df, ddf, dddf


def analytic_radial(alpha: float = 0.0, constant: float = 0.0):
    """Closed-form jet of F = sqrt(1+r^2) + alpha ln r + constant."""

    def jet(r):
        r = np.asarray(r, float)
        V = np.sqrt(1 + r * r)
        return (
            V + alpha * np.log(r) + constant,
            r / V + alpha / r,
            1 / V**3 - alpha / r**2,
            -3 * r / V**5 + 2 * alpha / r**3,
        )

    return jet


@dataclass
class GraphMetric:
    """g_bar = g + df df with first and second coordinate derivatives."""

    g: np.ndarray
    dg: np.ndarray
    ddg: np.ndarray
    inv: np.ndarray
    base: FieldSample
    df: np.ndarray
    ddf: np.ndarray
    dddf: np.ndarray
    points: tuple

    def inverse_defect(self) -> float:
        eye = np.einsum("...ij,...jk->...ik", self.inv, self.g)
        return float(np.max(np.abs(eye - np.eye(3))))


def induced_metric(gf: GraphFunction, data: InitialData, r, theta, phi) -> GraphMetric:
    """Induced metric of the graph and its inverse.

    The rank-one update g^ij - f^i f^j / (1 + |df|^2) cancels two terms of
    size r^2 in the rr entry on hyperbolic backgrounds, losing about eps r^2.
    g_bar itself is well conditioned (g_bar_rr -> 1), so it is inverted
    directly.
    """
    r, theta, phi = np.broadcast_arrays(np.asarray(r, float), theta, phi)
    s = data.sample(r, theta, phi)
    _, df, ddf, dddf = gf.jet(r, theta, phi)
    g = s.g + np.einsum("...i,...j->...ij", df, df)
    dg = s.dg + np.einsum("...li,...j->...lij", ddf, df) + np.einsum("...i,...lj->...lij", df, ddf)
    ddg = (
        s.ddg
        + np.einsum("...mli,...j->...mlij", dddf, df)
        + np.einsum("...li,...mj->...mlij", ddf, ddf)
        + np.einsum("...mi,...lj->...mlij", ddf, ddf)
        + np.einsum("...i,...mlj->...mlij", df, dddf)
    )
    inv = np.linalg.inv(g)
    return GraphMetric(g, dg, ddg, inv, s, df, ddf, dddf, (r, theta, phi))


@dataclass
class SecondFundamentalForm:
    A: np.ndarray
    H: np.ndarray
    norm2: np.ndarray
    diff_norm2: np.ndarray


def _norm2(T, inv):
    return np.einsum("...ik,...jl,...ij,...kl->...", inv, inv, T, T)


def second_fundamental_form(gm: GraphMetric) -> SecondFundamentalForm:
    """A_ij = Hess^g_ij f / sqrt(1 + |df|_g^2), with |A|^2 and |A - K|^2 in g_bar."""
    s = gm.base
    gamma = christoffel_symbols(s.g, s.dg, check=False)
    hess = gm.ddf - np.einsum("...kij,...k->...ij", gamma, gm.df)
    ginv = np.linalg.inv(s.g)
    w2 = 1 + np.einsum("...ij,...i,...j->...", ginv, gm.df, gm.df)
    A = hess / np.sqrt(w2)[..., None, None]
    H = np.einsum("...ij,...ij->...", gm.inv, A)
    return SecondFundamentalForm(A, H, _norm2(A, gm.inv), _norm2(A - s.K, gm.inv))


def _q_from_metric(gm: GraphMetric, sff: SecondFundamentalForm):
    s = gm.base
    ginv = np.linalg.inv(s.g)
    up = np.einsum("...ij,...j->...i", ginv, gm.df)
    w2 = 1 + np.einsum("...i,...i->...", up, gm.df)
    return np.einsum("...j,...ij->...i", up, sff.A - s.K) / np.sqrt(w2)[..., None]


def q_oneform(gf: GraphFunction, data: InitialData, r, theta, phi):
    """q_i = f^j (A_ij - K_ij) / sqrt(1 + |df|_g^2)."""
    gm = induced_metric(gf, data, r, theta, phi)
    return _q_from_metric(gm, second_fundamental_form(gm))


def _q_density(gf, data, r, theta, phi):
    """Vector density sqrt(det g_bar) g_bar^{ij} q_j (coordinate factor included)."""
    gm = induced_metric(gf, data, r, theta, phi)
    q = _q_from_metric(gm, second_fundamental_form(gm))
    vol = np.sqrt(np.linalg.det(gm.g))
    return vol[..., None] * np.einsum("...ij,...j->...i", gm.inv, q), vol, gm, q


def div_q(gf: GraphFunction, data: InitialData, grid: RadialGrid, sphere: SphereGrid,
          angular_step: float = 1e-3):
    """div^{g_bar} q on grid x sphere.

    The radial derivative uses the second-order stencils of the radial grid;
    angular derivatives use fourth-order central differences in theta and
    phi, which is exact enough since f is smooth in the angles.
    """
    th, ph = sphere.mesh
    r = grid.nodes[:, None, None]
    dens, vol, gm, q = _q_density(gf, data, r, th[None], ph[None])
    (dr,) = radial_derivatives(dens[..., 0], grid, order=1)
    out = dr
    h = angular_step
    c = np.array([1.0, -8.0, 8.0, -1.0]) / (12 * h)
    for axis, (a, b) in ((1, (1, 0)), (2, (0, 1))):
        acc = 0.0
        for coef, k in zip(c, (-2, -1, 1, 2)):
            dk, *_ = _q_density(gf, data, r, th[None] + a * k * h, ph[None] + b * k * h)
            acc = acc + coef * dk[..., axis]
        out = out + acc
    return out / vol, gm, q


@dataclass
class SYTerms:
    scal: np.ndarray
    mu: np.ndarray
    J_w: np.ndarray
    diff_norm2: np.ndarray
    q_norm2: np.ndarray
    div_q: np.ndarray


def scalar_curvature_sy(gf: GraphFunction, data: InitialData, grid: RadialGrid,
                        sphere: SphereGrid) -> SYTerms:
    """Scal = 2(mu - J(w)) + |A - K|^2 + 2|q|^2 - 2 div q, termwise.

    w is the normalized gradient f^i / sqrt(1 + |df|_g^2).  The identity
    holds for solutions of the Jang equation.
    """
    dq, gm, q = div_q(gf, data, grid, sphere)
    s = gm.base
    mu, J, _ = constraints_from_sample(s)
    ginv = np.linalg.inv(s.g)
    up = np.einsum("...ij,...j->...i", ginv, gm.df)
    w2 = 1 + np.einsum("...i,...i->...", up, gm.df)
    J_w = np.einsum("...i,...i->...", J, up) / np.sqrt(w2)
    sff = second_fundamental_form(gm)
    qn = np.einsum("...ij,...i,...j->...", gm.inv, q, q)
    scal = 2 * (mu - J_w) + sff.diff_norm2 + 2 * qn - 2 * dq
    return SYTerms(scal, mu, J_w, sff.diff_norm2, qn, dq)


def scalar_curvature_direct(gm: GraphMetric) -> np.ndarray:
    """Scalar curvature of g_bar from its Christoffel symbols."""
    return scalar_curvature(gm.g, gm.dg, gm.ddg)


# ---------------------------------------------------------------------------
# ADM mass


def _flat_polar(r, th):
    """Flat metric dr^2 + r^2 sigma and its first derivatives."""
    shape = np.broadcast(r, th).shape
    r = np.broadcast_to(r, shape)
    th = np.broadcast_to(th, shape)
    d = np.zeros(shape + (3, 3))
    dd = np.zeros(shape + (3, 3, 3))
    s, c = np.sin(th), np.cos(th)
    d[..., 0, 0] = 1
    d[..., 1, 1] = r * r
    d[..., 2, 2] = r * r * s * s
    dd[..., 0, 1, 1] = 2 * r
    dd[..., 0, 2, 2] = 2 * r * s * s
    dd[..., 1, 2, 2] = 2 * r * r * s * c
    return d, dd


def adm_surface_integral(g, dg, R: float, sphere: SphereGrid) -> float:
    """(1/16 pi) int_{S_R} (div_delta e - d tr_delta e)(d_r) R^2 dmu_sigma.

    e = g - delta with delta the flat metric in the same polar chart; the
    divergence and trace use delta's Levi-Civita connection.  This is the
    coordinate-invariant form of the Cartesian ADM flux.
    """
    th, _ = sphere.mesh
    d, dd = _flat_polar(np.full(th.shape, float(R)), th)
    e = g - d
    de = dg - dd
    dinv = np.linalg.inv(d)
    Gam = christoffel_symbols(d, dd, check=False)
    div_r = (
        np.einsum("...ij,...ij->...", dinv, de[..., :, :, 0])
        - np.einsum("...ij,...lij,...l->...", dinv, Gam, e[..., :, 0])
        - np.einsum("...ij,...li,...jl->...", dinv, Gam[..., :, :, 0], e)
    )
    dinv_r = -np.einsum("...ia,...ab,...bj->...ij", dinv, dd[..., 0, :, :], dinv)
    dtr_r = np.einsum("...ij,...ij->...", dinv_r, e) + np.einsum("...ij,...ij->...", dinv, de[..., 0, :, :])
    return float(sphere_integrate((div_r - dtr_r) * R * R, sphere) / (16 * np.pi))


@dataclass
class ADMResult:
    mass: float
    radii: np.ndarray
    integrals: np.ndarray
    rate: float
    fit_residual: float
    warnings: list = field(default_factory=list)

    def table(self):
        return np.column_stack([self.radii, self.integrals, np.full(self.radii.shape, self.mass)])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["R", "mass_integral", "extrapolated"])
        for row in self.table():
            w.writerow([f"{x:.17g}" for x in row])
        return buf.getvalue()


def adm_mass(metric_at, radii, sphere: SphereGrid | None = None, powers=(1,),
             residual_threshold: float = 1e-3) -> ADMResult:
    """Surface integrals at each radius and their extrapolation.

    ``metric_at(R, sphere)`` returns (g, dg) in the polar chart at the sphere
    nodes on {r = R}.  The limit is fitted as m + sum c_k R^-k over
    ``powers``; the truncation rate is the log-log slope of |m(R) - m|.
    """
    sphere = sphere or SphereGrid.for_degree(8)
    radii = np.asarray(radii, float)
    vals = np.array([adm_surface_integral(*metric_at(R, sphere), R, sphere) for R in radii])
    if radii.size > len(powers):
        limit, _, resid = extrapolate_inverse_powers(radii, vals, powers)
    else:
        limit, resid = float(vals[-1]), float("nan")
    dev = np.abs(vals - limit)
    rate = float("nan")
    good = dev > 1e-14 * max(1.0, abs(limit))
    if good.sum() >= 2:
        rate = float(-np.polyfit(np.log(radii[good]), np.log(dev[good]), 1)[0])
    warnings = []
    if np.isfinite(resid) and resid > residual_threshold * max(1.0, abs(limit)):
        warnings.append(f"extrapolation residual {resid:.3e} above threshold")
    return ADMResult(limit, radii, vals, rate, resid, warnings)


def schwarzschild_metric(m: float):
    """metric_at for (1 + m/2r)^4 delta in polar coordinates."""

    def metric_at(R, sphere):
        th, _ = sphere.mesh
        d, dd = _flat_polar(np.full(th.shape, float(R)), th)
        u = 1 + m / (2 * R)
        c = u**4
        dc = 4 * u**3 * (-m / (2 * R * R))
        dg = c * dd
        dg[..., 0, :, :] += dc * d
        return c * d, dg

    return metric_at


def flat_metric():
    def metric_at(R, sphere):
        th, _ = sphere.mesh
        return _flat_polar(np.full(th.shape, float(R)), th)

    return metric_at


def graph_metric_at(gf: GraphFunction, data: InitialData):
    def metric_at(R, sphere):
        th, ph = sphere.mesh
        gm = induced_metric(gf, data, np.full(th.shape, float(R)), th, ph)
        return gm.g, gm.dg

    return metric_at


def graph_adm_mass(gf: GraphFunction, data: InitialData, radii, sphere=None, powers=(1, 2)) -> ADMResult:
    """ADM mass of the graph metric g + df df in the base polar chart."""
    if hasattr(gf, "grid"):
        nodes = gf.grid.nodes
        radii = np.unique(nodes[np.argmin(np.abs(nodes[None, :] - np.asarray(radii)[:, None]), axis=1)])
    return adm_mass(graph_metric_at(gf, data), radii, sphere, powers)


def ss_mass_profile(gf: GraphFunction, data: InitialData, radii):
    """Spherically symmetric flux m(R) = [R g_rr + G/R - G'] / 2 of the graph metric."""
    radii = np.asarray(radii, float)
    gm = induced_metric(gf, data, radii, np.pi / 2, 0.0)
    grr = gm.g[..., 0, 0]
    G = gm.g[..., 1, 1]
    Gp = gm.dg[..., 0, 1, 1]
    return 0.5 * (radii * grr + G / radii - Gp)


# ---------------------------------------------------------------------------
# report


@dataclass
class GraphGeometryReport:
    radii: np.ndarray
    A_norm2: np.ndarray
    H: np.ndarray
    q_r: np.ndarray
    scal_sy: np.ndarray
    scal_direct: np.ndarray
    diff_norm2: np.ndarray
    adm: ADMResult | None = None

    @property
    def route_discrepancy(self) -> float:
        return float(np.max(np.abs(self.scal_sy - self.scal_direct)))

    def summary(self) -> dict:
        out = {
            "route_discrepancy": self.route_discrepancy,
            "max_abs_scal_direct": float(np.max(np.abs(self.scal_direct))),
            "max_diff_norm2": float(np.max(self.diff_norm2)),
        }
        if self.adm is not None:
            out.update(
                adm_mass=self.adm.mass,
                adm_rate=self.adm.rate,
                adm_fit_residual=self.adm.fit_residual,
                warnings=self.adm.warnings,
            )
        return out

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2)


def graph_geometry_report(gf: GraphFunction, data: InitialData, grid: RadialGrid,
                          sphere: SphereGrid | None = None, adm_radii=None) -> GraphGeometryReport:
    """Both scalar-curvature routes, A, q and (optionally) the ADM mass table."""
    sphere = sphere or SphereGrid.for_degree(4)
    sy = scalar_curvature_sy(gf, data, grid, sphere)
    th, ph = sphere.mesh
    gm = induced_metric(gf, data, grid.nodes[:, None, None], th[None], ph[None])
    sff = second_fundamental_form(gm)
    q = _q_from_metric(gm, sff)
    direct = scalar_curvature_direct(gm)
    adm = None
    if adm_radii is not None:
        adm = graph_adm_mass(gf, data, adm_radii, sphere)
    return GraphGeometryReport(grid.nodes, sff.norm2, sff.H, q[..., 0], sy.scal, direct, sff.diff_norm2, adm)
