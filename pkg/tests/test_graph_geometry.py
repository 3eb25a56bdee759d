import json

import numpy as np
import pytest

from conftest import laplacian_on_grid
from jangmass.barriers import psi_from_spec
from jangmass.geometry_core import (
    HarmonicCoeffs,
    RadialGrid,
    SphereGrid,
    fit_decay_tail,
    observed_order,
    scalar_curvature,
)
from jangmass.graph_geometry import (
    GraphFunction,
    adm_mass,
    analytic_radial,
    div_q,
    flat_metric,
    graph_adm_mass,
    graph_geometry_report,
    induced_metric,
    q_oneform,
    scalar_curvature_direct,
    scalar_curvature_sy,
    schwarzschild_metric,
    second_fundamental_form,
    ss_mass_profile,
)
from jangmass.jang_solver import regular_center_profile


def _constant(c):
    def jet(r):
        r = np.asarray(r, float)
        z = np.zeros_like(r)
        return z + c, z, z, z

    return GraphFunction.analytic(jet)


def _on_sphere(gf, data, grid, sphere):
    th, ph = sphere.mesh
    return induced_metric(gf, data, grid.nodes[:, None, None], th[None], ph[None])


# --- induced metric -------------------------------------------------------


def test_inverse_is_accurate_far_out(wang_m_sigma, sphere8):
    data, spec = wang_m_sigma
    psi = HarmonicCoeffs.from_entries([(1, 1, 0.3), (2, 0, -0.2)])
    gf = GraphFunction.analytic(analytic_radial(1.0), psi)
    grid = RadialGrid.logarithmic(1.0, 1e3, 20)
    gm = _on_sphere(gf, data, grid, sphere8)
    assert gm.inverse_defect() <= 1e-12
    # the rank-one update formula agrees up to its own cancellation error
    ginv = np.linalg.inv(gm.base.g)
    up = np.einsum("...ij,...j->...i", ginv, gm.df)
    w2 = 1 + np.einsum("...i,...i->...", up, gm.df)
    rank_one = ginv - np.einsum("...i,...j->...ij", up, up) / w2[..., None, None]
    r2 = grid.nodes[:, None, None, None, None] ** 2
    assert np.max(np.abs(rank_one - gm.inv) / (1 + r2)) < 1e-14


def test_constant_graph_leaves_data_unchanged(wang_m_sigma, sphere8):
    data, _ = wang_m_sigma
    grid = RadialGrid.logarithmic(1.0, 100.0, 15)
    gm = _on_sphere(_constant(2.5), data, grid, sphere8)
    assert np.array_equal(gm.g, gm.base.g)
    assert np.array_equal(gm.dg, gm.base.dg)
    sff = second_fundamental_form(gm)
    assert np.max(np.abs(sff.A)) == 0.0
    assert np.max(np.abs(sff.H)) == 0.0


def test_hyperboloid_graph_is_flat_space(hyperboloid, sphere8):
    """The graph of sqrt(1+r^2) over (H^3, b) is a flat slice: A = K, q = 0."""
    grid = RadialGrid.logarithmic(0.5, 200.0, 41)
    gf = GraphFunction.analytic(analytic_radial(0.0))
    gm = _on_sphere(gf, hyperboloid, grid, sphere8)
    r = grid.nodes[:, None, None]
    assert np.allclose(gm.g[..., 0, 0], 1.0, atol=1e-12)
    assert np.allclose(gm.g[..., 1, 1], r * r, rtol=1e-13)
    sff = second_fundamental_form(gm)
    assert np.max(sff.diff_norm2) < 1e-20
    th, ph = sphere8.mesh
    q = q_oneform(gf, hyperboloid, r, th[None], ph[None])
    assert np.max(np.abs(q)) < 1e-12
    assert np.max(np.abs(scalar_curvature_direct(gm))) < 1e-9
    sy = scalar_curvature_sy(gf, hyperboloid, grid, sphere8)
    assert np.max(np.abs(sy.scal)) < 1e-6


# --- scalar curvature directly --------------------------------------------


def _polar_flat_jets(r, th):
    shape = np.broadcast(r, th).shape
    r = np.broadcast_to(np.asarray(r, float), shape)
    th = np.broadcast_to(np.asarray(th, float), shape)
    s, c = np.sin(th), np.cos(th)
    d = np.zeros(shape + (3, 3))
    dd = np.zeros(shape + (3, 3, 3))
    ddd = np.zeros(shape + (3, 3, 3, 3))
    d[..., 0, 0] = 1
    d[..., 1, 1] = r * r
    d[..., 2, 2] = (r * s) ** 2
    dd[..., 0, 1, 1] = 2 * r
    dd[..., 0, 2, 2] = 2 * r * s * s
    dd[..., 1, 2, 2] = 2 * r * r * s * c
    ddd[..., 0, 0, 1, 1] = 2
    ddd[..., 0, 0, 2, 2] = 2 * s * s
    ddd[..., 0, 1, 2, 2] = ddd[..., 1, 0, 2, 2] = 4 * r * s * c
    ddd[..., 1, 1, 2, 2] = 2 * r * r * (c * c - s * s)
    return d, dd, ddd


def test_flat_polar_chart_has_zero_curvature():
    r = np.linspace(0.5, 20, 7)[:, None]
    th = np.linspace(0.3, 2.8, 5)[None, :]
    d, dd, ddd = _polar_flat_jets(r, th)
    assert np.max(np.abs(scalar_curvature(d, dd, ddd))) < 1e-12


@pytest.mark.parametrize("a", [0.5, 1.0, 3.0])
def test_round_cylinder_curvature(a):
    """dr^2 + a^2 sigma has scalar curvature 2/a^2."""
    th = np.linspace(0.2, 2.9, 9)
    s, c = np.sin(th), np.cos(th)
    g = np.zeros(th.shape + (3, 3))
    dg = np.zeros(th.shape + (3, 3, 3))
    ddg = np.zeros(th.shape + (3, 3, 3, 3))
    g[..., 0, 0] = 1
    g[..., 1, 1] = a * a
    g[..., 2, 2] = (a * s) ** 2
    dg[..., 1, 2, 2] = 2 * a * a * s * c
    ddg[..., 1, 1, 2, 2] = 2 * a * a * (c * c - s * s)
    assert np.allclose(scalar_curvature(g, dg, ddg), 2 / a**2, rtol=1e-12)


def test_schwarzschild_slice_is_scalar_flat():
    m = 0.7
    r = np.geomspace(1.0, 50.0, 9)[:, None]
    th = np.linspace(0.3, 2.8, 5)[None, :]
    d, dd, ddd = _polar_flat_jets(r, th)
    u = 1 + m / (2 * r)
    c0 = u**4
    c1 = 4 * u**3 * (-m / (2 * r * r))
    c2 = 12 * u**2 * (m / (2 * r * r)) ** 2 + 4 * u**3 * (m / r**3)
    c0, c1, c2 = (np.broadcast_to(x, d.shape[:-2]) for x in (c0, c1, c2))
    g = c0[..., None, None] * d
    dg = c0[..., None, None, None] * dd
    dg[..., 0, :, :] += c1[..., None, None] * d
    ddg = c0[..., None, None, None, None] * ddd
    ddg[..., 0, :, :, :] += c1[..., None, None, None] * dd
    ddg[..., :, 0, :, :] += c1[..., None, None, None] * dd
    ddg[..., 0, 0, :, :] += c2[..., None, None] * d
    assert np.max(np.abs(scalar_curvature(g, dg, ddg))) < 1e-10


# --- ADM mass -------------------------------------------------------------


def test_schwarzschild_adm_mass(sphere8):
    res = adm_mass(schwarzschild_metric(0.7), np.geomspace(50, 2000, 10), sphere8, powers=(1, 2, 3))
    assert abs(res.mass - 0.7) < 1e-6
    assert not res.warnings


def test_flat_adm_mass_is_zero(sphere8):
    res = adm_mass(flat_metric(), [10.0, 100.0, 1000.0], sphere8)
    assert abs(res.mass) < 1e-12


def test_adm_csv_has_one_row_per_radius(sphere8):
    radii = np.geomspace(50, 2000, 6)
    res = adm_mass(schwarzschild_metric(0.3), radii, sphere8, powers=(1, 2))
    lines = res.to_csv().strip().splitlines()
    assert lines[0] == "R,mass_integral,extrapolated"
    assert len(lines) == 1 + radii.size
    assert float(lines[1].split(",")[0]) == pytest.approx(50.0)


def test_graph_mass_of_wang_family(wang_m_sigma, sphere8):
    data, _ = wang_m_sigma
    gf = GraphFunction.analytic(analytic_radial(1.0))
    res = graph_adm_mass(gf, data, np.geomspace(1e2, 1e4, 10), sphere8)
    assert abs(res.mass - 1.0) < 1e-3


def test_graph_mass_ignores_constant_shift(wang_m_sigma, sphere8):
    data, _ = wang_m_sigma
    gf = GraphFunction.analytic(analytic_radial(1.0))
    radii = np.geomspace(1e2, 1e4, 8)
    a = graph_adm_mass(gf, data, radii, sphere8)
    b = graph_adm_mass(gf.shifted(13.0), data, radii, sphere8)
    assert np.array_equal(a.integrals, b.integrals)


def test_symmetric_flux_profile_matches_surface_integral(wang_m_sigma, sphere8):
    data, _ = wang_m_sigma
    gf = GraphFunction.analytic(analytic_radial(1.0))
    radii = np.array([200.0, 2000.0])
    prof = ss_mass_profile(gf, data, radii)
    surf = graph_adm_mass(gf, data, radii, sphere8, powers=(1,)).integrals
    assert np.allclose(prof, surf, rtol=1e-6)


# --- asymptotics of the Jang graph ----------------------------------------


def test_wang_graph_tail(wang_m_sigma):
    """g_bar_rr - 1 ~ 2 alpha / r, r^2 q_r -> -alpha, |A|^2 -> 2."""
    data, _ = wang_m_sigma
    alpha = 1.0
    gf = GraphFunction.analytic(analytic_radial(alpha))
    r = np.geomspace(1e2, 1e4, 25)
    gm = induced_metric(gf, data, r, np.pi / 3, 0.4)
    fit = fit_decay_tail(r, gm.g[:, 0, 0] - 1)
    assert fit.p == pytest.approx(1.0, abs=0.05)
    assert fit.c == pytest.approx(2 * alpha, rel=0.05)
    q = q_oneform(gf, data, r, np.pi / 3, 0.4)
    assert r[-1] ** 2 * q[-1, 0] == pytest.approx(-alpha, rel=0.05)
    sff = second_fundamental_form(gm)
    assert sff.norm2[-1] == pytest.approx(2.0, rel=1e-3)


def test_quadrupole_scalar_curvature_profile(quadrupole_spec, quadrupole_data):
    """r^3 Scal -> 2 Lap psi and r^3 div q -> -Lap psi on the leading graph."""
    psi = psi_from_spec(quadrupole_spec)
    gf = GraphFunction.analytic(analytic_radial(1.0), psi)
    sphere = SphereGrid.for_degree(8)
    grid = RadialGrid.logarithmic(100.0, 1000.0, 41)
    lap = laplacian_on_grid(psi, sphere)
    scale = np.max(np.abs(2 * lap))
    sy = scalar_curvature_sy(gf, quadrupole_data, grid, sphere)
    R = grid.nodes[-3]
    assert np.max(np.abs(R**3 * sy.scal[-3] - 2 * lap)) <= 0.1 * scale
    dq, _, _ = div_q(gf, quadrupole_data, grid, sphere)
    assert np.max(np.abs(R**3 * dq[-3] + lap)) <= 0.1 * scale / 2


def _route_gap(data, n, sphere):
    grid = RadialGrid.logarithmic(1.0, 100.0, n)
    _, f, _ = regular_center_profile(data, 100.0, grid)
    gf = GraphFunction.from_samples(f, grid)
    sy = scalar_curvature_sy(gf, data, grid, sphere)
    direct = scalar_curvature_direct(_on_sphere(gf, data, grid, sphere))
    window = grid.mask(2.0, 50.0)
    return float(np.max(np.abs(sy.scal - direct)[window]))


@pytest.mark.parametrize("family", ["hyperboloid", "wang_m_sigma"])
def test_curvature_routes_converge(family, hyperboloid, wang_m_sigma):
    data = hyperboloid if family == "hyperboloid" else wang_m_sigma[0]
    sphere = SphereGrid.for_degree(4)
    coarse, fine = _route_gap(data, 241, sphere), _route_gap(data, 481, sphere)
    assert fine < coarse
    assert observed_order(coarse, fine) >= 1.8


def test_sampled_graph_rejects_off_grid_points(hyperboloid):
    grid = RadialGrid.logarithmic(1.0, 10.0, 11)
    gf = GraphFunction.from_samples(np.sqrt(1 + grid.nodes**2), grid)
    with pytest.raises(ValueError):
        gf.jet(np.array([1.2345]), 1.0, 0.0)


def test_report_summary_round_trips(wang_m_sigma):
    data, _ = wang_m_sigma
    grid = RadialGrid.logarithmic(1.0, 100.0, 61)
    _, f, _ = regular_center_profile(data, 100.0, grid)
    gf = GraphFunction.from_samples(f, grid, reference=analytic_radial(1.0))
    rep = graph_geometry_report(gf, data, grid, adm_radii=[30.0, 50.0, 80.0])
    summary = json.loads(rep.to_json())
    assert summary["route_discrepancy"] == pytest.approx(rep.route_discrepancy)
    assert {"adm_mass", "adm_rate", "warnings"} <= summary.keys()
    assert rep.scal_sy.shape == rep.scal_direct.shape
