"""Static matplotlib figures written next to each stage's CSV/JSON output."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None, "Creation Time": None}  # keep PNG bytes reproducible


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)


def _positive(x):
    x = np.abs(np.asarray(x, float))
    return np.where(x > 0, x, np.nan)


def constraints_figure(path, r, mu_mean, margin_min, mass_table):
    fig, (a, b) = plt.subplots(1, 2, figsize=(10, 4))
    a.loglog(r, _positive(mu_mean), label="|mean mu|")
    a.loglog(r, _positive(margin_min), "--", label="|min (mu - |J|)|")
    a.set_xlabel("r")
    a.legend()
    a.set_title("constraint densities")
    b.plot(1 / mass_table[:, 0], mass_table[:, 1], "o-")
    b.set_xlabel("1/R")
    b.set_ylabel("E(R)")
    b.set_title("energy surface integrals")
    _save(fig, path)


def barriers_figure(path, bar):
    r = bar.grid.nodes
    fig, (a, b) = plt.subplots(1, 2, figsize=(10, 4))
    V = np.sqrt(1 + r * r)
    a.semilogx(r, bar.phi_plus - V, label="phi_+ - sqrt(1+r^2)")
    a.semilogx(r, bar.phi_minus - V, label="phi_- - sqrt(1+r^2)")
    a.set_xlabel("r")
    a.legend()
    a.set_title("barrier profiles")
    b.loglog(r, _positive(bar.delta_plus), label="|k_+ - r/V|")
    b.loglog(r, _positive(bar.delta_minus), "--", label="|k_- - r/V|")
    if bar.params.alpha:
        b.loglog(r, bar.params.alpha / r**3, ":", label="alpha / r^3")
    b.set_xlabel("r")
    b.legend()
    b.set_title("barrier decay")
    _save(fig, path)


def solve_figure(path, limit, alpha):
    fig, (a, b) = plt.subplots(1, 2, figsize=(10, 4))
    for (R, tau), sol in zip(limit.schedule, limit.solutions):
        r = sol.grid.nodes
        a.semilogx(r, sol.f - np.sqrt(1 + r * r) - alpha * np.log(r), label=f"tau={tau:.2e}")
    a.set_xlabel("r")
    a.set_ylabel("f - sqrt(1+r^2) - alpha ln r")
    a.legend(fontsize=7)
    a.set_title("regularized solutions")
    if limit.differences:
        b.semilogy(range(1, len(limit.differences) + 1), limit.differences, "o-")
    b.set_xlabel("step")
    b.set_ylabel("sup difference on region")
    b.set_title("iterate differences")
    _save(fig, path)


def geometry_figure(path, r, scal_direct, scal_sy, adm):
    fig, (a, b) = plt.subplots(1, 2, figsize=(10, 4))
    a.loglog(r, _positive(scal_direct), label="|Scal| direct")
    a.loglog(r, _positive(scal_sy), "--", label="|Scal| identity")
    a.loglog(r, _positive(np.asarray(scal_sy) - np.asarray(scal_direct)), ":", label="route difference")
    a.set_xlabel("r")
    a.legend()
    a.set_title("graph scalar curvature")
    if adm is not None:
        b.plot(1 / adm.radii, adm.integrals, "o-", label="flux integral")
        b.axhline(adm.mass, color="k", lw=0.8, label=f"extrapolated {adm.mass:.6g}")
        b.legend()
    b.set_xlabel("1/R")
    b.set_title("ADM mass")
    _save(fig, path)


def conformal_figure(path, r, u, A):
    fig, (a, b) = plt.subplots(1, 2, figsize=(10, 4))
    a.semilogx(r, u)
    a.set_xlabel("r")
    a.set_ylabel("u")
    a.set_title("conformal factor")
    b.semilogx(r, r * (u - 1), label="r (u - 1)")
    b.axhline(A, color="k", lw=0.8, label=f"A = {A:.6g}")
    b.set_xlabel("r")
    b.legend()
    b.set_title("expansion coefficient")
    _save(fig, path)


def convergence_figure(path, resolution, errors):
    fig, a = plt.subplots(figsize=(5, 4))
    a.loglog(resolution, errors, "o-", label="error")
    e0 = errors[0]
    res = np.asarray(resolution, float)
    a.loglog(res, e0 * (res[0] / res) ** 2, ":", label="second order")
    a.set_xlabel("nodes per decade")
    a.legend()
    a.set_title("grid refinement")
    _save(fig, path)
