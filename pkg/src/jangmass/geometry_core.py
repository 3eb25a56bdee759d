"""Shared numerical substrate: radial and spherical grids, real spherical
harmonics, quadrature, Christoffel symbols, finite differences and fits.

Index convention for every tensor array in the package: coordinates are
ordered (r, theta, phi) and a tensor sample at a point occupies the trailing
axes, so a metric field has shape (..., 3, 3) and its first derivatives have
shape (..., 3, 3, 3) with ``dg[..., l, i, j] = d_l g_ij``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special


class DegenerateMetricError(ValueError):
    """Raised when a metric sample is not positive definite."""


class UnsolvableRHSError(ValueError):
    """Raised when a sphere Poisson right-hand side has nonzero mean."""


class DecaySignError(ValueError):
    """Raised when tail samples change sign or vanish."""


# ---------------------------------------------------------------------------
# Radial grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RadialGrid:
    nodes: np.ndarray
    spacing_mode: str = "logarithmic"

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size < 3:
            raise ValueError("radial grid needs at least three nodes")
        if nodes[0] <= 0.0:
            raise ValueError("radial grid must start at a positive radius")
        if np.any(np.diff(nodes) <= 0.0):
            raise ValueError("radial nodes must be strictly increasing")
        if self.spacing_mode not in ("uniform", "logarithmic"):
            raise ValueError(f"unknown spacing mode {self.spacing_mode!r}")
        if self.spacing_mode == "logarithmic":
            ratios = nodes[1:] / nodes[:-1]
            if np.max(np.abs(ratios / ratios[0] - 1.0)) > 1e-12:
                raise ValueError("logarithmic grid ratios are not constant")
        else:
            steps = np.diff(nodes)
            if np.max(np.abs(steps / steps[0] - 1.0)) > 1e-9:
                raise ValueError("uniform grid steps are not constant")
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def logarithmic(cls, r_min: float, r_max: float, n: int) -> "RadialGrid":
        q = np.exp((np.log(r_max) - np.log(r_min)) / (n - 1))
        return cls(r_min * q ** np.arange(n), "logarithmic")

    @classmethod
    def uniform(cls, r_min: float, r_max: float, n: int) -> "RadialGrid":
        return cls(np.linspace(r_min, r_max, n), "uniform")

    @property
    def step(self) -> float:
        """Spacing in the grid's natural variable (ln r or r)."""
        if self.spacing_mode == "logarithmic":
            return float(np.log(self.nodes[1] / self.nodes[0]))
        return float(self.nodes[1] - self.nodes[0])

    @property
    def size(self) -> int:
        return int(self.nodes.size)

    def refined(self) -> "RadialGrid":
        """Grid with the step halved over the same interval."""
        n = 2 * self.size - 1
        if self.spacing_mode == "logarithmic":
            return RadialGrid.logarithmic(self.nodes[0], self.nodes[-1], n)
        return RadialGrid.uniform(self.nodes[0], self.nodes[-1], n)

    def mask(self, lo: float, hi: float) -> np.ndarray:
        return (self.nodes >= lo * (1 - 1e-12)) & (self.nodes <= hi * (1 + 1e-12))


def _stencil_1(u: np.ndarray, h: float) -> np.ndarray:
    d = np.empty_like(u)
    d[1:-1] = (u[2:] - u[:-2]) / (2 * h)
    d[0] = (-3 * u[0] + 4 * u[1] - u[2]) / (2 * h)
    d[-1] = (3 * u[-1] - 4 * u[-2] + u[-3]) / (2 * h)
    return d


def _stencil_2(u: np.ndarray, h: float) -> np.ndarray:
    d = np.empty_like(u)
    d[1:-1] = (u[2:] - 2 * u[1:-1] + u[:-2]) / h**2
    d[0] = (2 * u[0] - 5 * u[1] + 4 * u[2] - u[3]) / h**2
    d[-1] = (2 * u[-1] - 5 * u[-2] + 4 * u[-3] - u[-4]) / h**2
    return d


def _stencil_3(u: np.ndarray, h: float) -> np.ndarray:
    d = np.empty_like(u)
    d[2:-2] = (u[4:] - 2 * u[3:-1] + 2 * u[1:-3] - u[:-4]) / (2 * h**3)
    fwd = np.array([-5.0, 18.0, -24.0, 14.0, -3.0]) / (2 * h**3)
    for i in (0, 1):
        d[i] = fwd @ u[i : i + 5]
        d[-1 - i] = -(fwd @ u[::-1][i : i + 5])
    return d


def radial_derivatives(values: np.ndarray, grid: RadialGrid, order: int = 2):
    """Second-order finite-difference r-derivatives of samples on ``grid``.

    Differences are taken in the grid's natural variable (ln r for
    logarithmic grids) and converted with the chain rule.  Returns a tuple
    (f', f'', ...) up to ``order`` (at most 3).  ``values`` may carry extra
    trailing axes.
    """
    u = np.asarray(values, dtype=float)
    h = grid.step
    r = grid.nodes.reshape((-1,) + (1,) * (u.ndim - 1))
    ux = _stencil_1(u, h)
    out = []
    if grid.spacing_mode == "uniform":
        out.append(ux)
        if order >= 2:
            out.append(_stencil_2(u, h))
        if order >= 3:
            out.append(_stencil_3(u, h))
        return tuple(out)
    out.append(ux / r)
    if order >= 2:
        uxx = _stencil_2(u, h)
        out.append((uxx - ux) / r**2)
    if order >= 3:
        uxxx = _stencil_3(u, h)
        out.append((uxxx - 3 * uxx + 2 * ux) / r**3)
    return tuple(out)


# ---------------------------------------------------------------------------
# Sphere grids and real spherical harmonics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SphereGrid:
    """Gauss-Legendre colatitudes times uniform longitudes."""

    degree: int
    theta: np.ndarray
    phi: np.ndarray
    theta_weights: np.ndarray

    @classmethod
    def for_degree(cls, L: int = 16) -> "SphereGrid":
        nlat, nlon = L + 1, 2 * L + 2
        x, w = np.polynomial.legendre.leggauss(nlat)
        theta = np.arccos(x)[::-1]
        w = w[::-1]
        phi = 2 * np.pi * np.arange(nlon) / nlon
        return cls(L, theta, phi, w * (2 * np.pi / nlon))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.theta.size, self.phi.size)

    @property
    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.theta, self.phi, indexing="ij")

    @property
    def weights(self) -> np.ndarray:
        return np.repeat(self.theta_weights[:, None], self.phi.size, axis=1)


def sphere_integrate(samples: np.ndarray, grid: SphereGrid) -> float | np.ndarray:
    """Quadrature over the unit sphere of samples shaped (..., nlat, nlon)."""
    return np.tensordot(np.asarray(samples), grid.weights, axes=([-2, -1], [0, 1]))


def _legendre_table(L: int, theta: np.ndarray):
    """Normalized P_l^m(cos theta), m >= 0, and three theta-derivatives.

    Returns an array of shape (4, L+1, L+1, npts) indexed [deriv, l, m].
    The Condon-Shortley phase is removed so that the degree-one harmonics
    are proportional to the Cartesian coordinates.
    """
    th = np.atleast_1d(theta).ravel()
    p = special.sph_legendre_p_all(L, L, th, diff_n=2)
    table = np.zeros((4, L + 1, L + 1, th.size))
    table[:3] = p[:, :, : L + 1, :]
    ell = np.arange(L + 1)[:, None, None]
    em = np.arange(L + 1)[None, :, None]
    phase = (-1.0) ** em
    table[:3] *= phase
    s, c = np.sin(th), np.cos(th)
    lam = ell * (ell + 1)
    P, P1, P2 = table[0], table[1], table[2]
    table[3] = (
        P1 / s**2
        - (c / s) * P2
        - (lam - em**2 / s**2) * P1
        - (2 * em**2 * c / s**3) * P
    )
    return table


def harmonic_basis(L: int, theta: np.ndarray, phi: np.ndarray, max_order: int = 0):
    """Real orthonormal spherical harmonics and their angular derivatives.

    ``theta`` and ``phi`` are broadcast together.  The result is a dict keyed
    by (a, b), the number of theta and phi derivatives, with a + b at most
    ``max_order`` (<= 3).  Each entry has shape (L+1, 2L+1, *points) and is
    indexed [l, m + L].
    """
    th, ph = np.broadcast_arrays(np.asarray(theta, float), np.asarray(phi, float))
    shape = th.shape
    # volume samples repeat the same sphere nodes at every radius
    pts, inverse = np.unique(np.column_stack([th.ravel(), ph.ravel()]), axis=0, return_inverse=True)
    inverse = inverse.ravel()
    leg = _legendre_table(L, pts[:, 0])
    ph = pts[:, 1]
    out = {}
    ms = np.arange(-L, L + 1)
    for a in range(min(max_order, 3) + 1):
        for b in range(min(max_order, 3) - a + 1):
            Y = np.zeros((L + 1, 2 * L + 1, ph.size))
            for j, m in enumerate(ms):
                am = abs(m)
                if m == 0:
                    trig = np.ones_like(ph) if b == 0 else np.zeros_like(ph)
                    fac = 1.0
                else:
                    fac = np.sqrt(2.0)
                    # b-th derivative of cos(am phi) or sin(am phi)
                    shift = b * np.pi / 2
                    trig = am**b * (np.cos(am * ph + shift) if m > 0 else np.sin(am * ph + shift))
                Y[am:, j, :] = fac * leg[a, am:, am, :] * trig
            out[(a, b)] = Y[:, :, inverse].reshape((L + 1, 2 * L + 1) + shape)
    return out


@dataclass
class HarmonicCoeffs:
    """Real spherical-harmonic coefficients c[l, m + L] for l <= L."""

    L: int
    table: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.table is None:
            self.table = np.zeros((self.L + 1, 2 * self.L + 1))
        self.table = np.array(self.table, dtype=float)
        if self.table.shape != (self.L + 1, 2 * self.L + 1):
            raise ValueError("coefficient table has the wrong shape")
        ell = np.arange(self.L + 1)[:, None]
        m = np.arange(-self.L, self.L + 1)[None, :]
        if np.any(self.table[np.abs(m) > ell] != 0.0):
            raise ValueError("coefficients with |m| > l must vanish")

    @classmethod
    def from_entries(cls, entries, L: int | None = None) -> "HarmonicCoeffs":
        entries = list(entries)
        lmax = max([int(l) for l, _, _ in entries], default=0)
        L = max(L or 0, lmax)
        out = cls(L)
        for l, m, v in entries:
            out[int(l), int(m)] += float(v)
        return out

    def __getitem__(self, lm):
        l, m = lm
        if abs(m) > l or l > self.L:
            return 0.0
        return self.table[l, m + self.L]

    def __setitem__(self, lm, value):
        l, m = lm
        if abs(m) > l or l > self.L:
            raise IndexError(f"mode {(l, m)} outside truncation degree {self.L}")
        self.table[l, m + self.L] = value

    def padded(self, L: int) -> "HarmonicCoeffs":
        if L < self.L:
            raise ValueError("cannot pad to a lower degree")
        t = np.zeros((L + 1, 2 * L + 1))
        t[: self.L + 1, L - self.L : L + self.L + 1] = self.table
        return HarmonicCoeffs(L, t)

    def __add__(self, other: "HarmonicCoeffs") -> "HarmonicCoeffs":
        L = max(self.L, other.L)
        return HarmonicCoeffs(L, self.padded(L).table + other.padded(L).table)

    def __sub__(self, other):
        return self + other.scaled(-1.0)

    def scaled(self, factor: float) -> "HarmonicCoeffs":
        return HarmonicCoeffs(self.L, factor * self.table)

    def nonzero(self):
        """Iterate over (l, m, value) for nonzero coefficients."""
        for l in range(self.L + 1):
            for m in range(-l, l + 1):
                v = self.table[l, m + self.L]
                if v != 0.0:
                    yield l, m, float(v)

    def laplacian(self) -> "HarmonicCoeffs":
        ell = np.arange(self.L + 1)[:, None]
        return HarmonicCoeffs(self.L, -ell * (ell + 1) * self.table)

    def evaluate(self, theta, phi, max_order: int = 0):
        """Values and angular derivatives at broadcast points.

        Returns a dict keyed like :func:`harmonic_basis`.
        """
        basis = harmonic_basis(self.L, theta, phi, max_order)
        return {k: np.tensordot(self.table, v, axes=([0, 1], [0, 1])) for k, v in basis.items()}

    def synthesize(self, grid: SphereGrid) -> np.ndarray:
        th, ph = grid.mesh
        return self.evaluate(th, ph)[(0, 0)]

    @classmethod
    def analyze(cls, samples: np.ndarray, grid: SphereGrid, L: int | None = None) -> "HarmonicCoeffs":
        """Project samples of shape (nlat, nlon) onto harmonics up to degree L."""
        L = grid.degree if L is None else L
        th, ph = grid.mesh
        Y = harmonic_basis(L, th, ph)[(0, 0)]
        table = np.tensordot(Y * grid.weights, samples, axes=([2, 3], [0, 1]))
        ell = np.arange(L + 1)[:, None]
        m = np.arange(-L, L + 1)[None, :]
        table[np.abs(m) > ell] = 0.0
        return cls(L, table)


def analyze_stack(samples: np.ndarray, grid: SphereGrid, L: int | None = None) -> np.ndarray:
    """Harmonic tables for a stack of sphere samples shaped (n, nlat, nlon)."""
    L = grid.degree if L is None else L
    th, ph = grid.mesh
    Y = harmonic_basis(L, th, ph)[(0, 0)] * grid.weights
    return np.einsum("lmij,nij->nlm", Y, samples)


def solve_sphere_poisson(rhs: HarmonicCoeffs, tol: float = 1e-10) -> HarmonicCoeffs:
    """Mean-zero psi with Laplacian on the unit sphere equal to ``rhs``."""
    scale = max(1.0, float(np.max(np.abs(rhs.table))))
    if abs(rhs[0, 0]) > tol * scale:
        raise UnsolvableRHSError(
            f"right-hand side has mean coefficient {rhs[0, 0]:.3e}; it must integrate to zero"
        )
    ell = np.arange(rhs.L + 1)[:, None].astype(float)
    with np.errstate(divide="ignore", invalid="ignore"):
        table = np.where(ell > 0, -rhs.table / (ell * (ell + 1)), 0.0)
    return HarmonicCoeffs(rhs.L, table)


# ---------------------------------------------------------------------------
# Differential geometry helpers
# ---------------------------------------------------------------------------


def check_positive_definite(g: np.ndarray) -> None:
    try:
        np.linalg.cholesky(g)
    except np.linalg.LinAlgError as exc:
        raise DegenerateMetricError("metric is not positive definite") from exc


def christoffel_symbols(g: np.ndarray, dg: np.ndarray, check: bool = True) -> np.ndarray:
    """Christoffel symbols Gamma[..., k, i, j] of the second kind.

    ``g`` has shape (..., 3, 3) and ``dg[..., l, i, j] = d_l g_ij``.  For
    the polar charts used here the angular derivatives may be zero, in which
    case the result reduces to the block formulas of the hyperbolic chart,
    e.g. Gamma^r_rr = -r/(1+r^2) and Gamma^r_{mu nu} = -(1+r^2) d_r g_{mu nu}/2.
    """
    g = np.asarray(g, float)
    dg = np.asarray(dg, float)
    if check:
        check_positive_definite(g)
    ginv = np.linalg.inv(g)
    # lower[..., l, i, j] = (d_i g_lj + d_j g_li - d_l g_ij) / 2
    lower = 0.5 * (
        np.swapaxes(dg, -3, -2) + np.moveaxis(dg, -3, -1) - dg
    )
    return np.einsum("...kl,...lij->...kij", ginv, lower)


def christoffel_derivatives(g, dg, ddg):
    """Partial derivatives d_m Gamma^k_ij, shape (..., m, k, i, j).

    ``ddg[..., m, l, i, j] = d_m d_l g_ij``.
    """
    ginv = np.linalg.inv(g)
    lower = 0.5 * (np.swapaxes(dg, -3, -2) + np.moveaxis(dg, -3, -1) - dg)
    dlower = 0.5 * (
        np.swapaxes(ddg, -3, -2) + np.moveaxis(ddg, -3, -1) - ddg
    )
    dginv = -np.einsum("...ka,...mab,...bl->...mkl", ginv, dg, ginv)
    return np.einsum("...mkl,...lij->...mkij", dginv, lower) + np.einsum(
        "...kl,...mlij->...mkij", ginv, dlower
    )


def scalar_curvature(g, dg, ddg) -> np.ndarray:
    """Scalar curvature from a metric and its first two partial derivatives."""
    ginv = np.linalg.inv(g)
    Gam = christoffel_symbols(g, dg, check=False)
    dGam = christoffel_derivatives(g, dg, ddg)
    # R_ij = d_k G^k_ij - d_j G^k_ik + G^k_kl G^l_ij - G^k_jl G^l_ik
    term1 = np.einsum("...kkij->...ij", dGam)
    term2 = np.einsum("...jkik->...ij", dGam)
    term3 = np.einsum("...kkl,...lij->...ij", Gam, Gam)
    term4 = np.einsum("...kjl,...lik->...ij", Gam, Gam)
    ric = term1 - term2 + term3 - term4
    return np.einsum("...ij,...ij->...", ginv, ric)


# ---------------------------------------------------------------------------
# Fitting and extrapolation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DecayFit:
    c: float
    p: float
    fit_residual: float


def fit_decay_tail(r, samples, model: str = "power", fixed_power: float | None = None) -> DecayFit:
    """Least-squares fit of c r^-p (or c r^-p ln r) in log-log coordinates.

    With ``fixed_power`` only the coefficient is fitted.  This is the better
    estimator of a leading coefficient once the exponent is known: in a free
    fit any exponent error is multiplied by ln r in the intercept.
    """
    r = np.asarray(r, float)
    y = np.asarray(samples, float)
    if r.size < 10:
        raise ValueError("tail fit needs at least 10 samples")
    if r.max() / r.min() < 10.0 * (1 - 1e-12):
        raise ValueError("tail fit needs samples spanning at least one decade")
    if np.any(y == 0.0) or not (np.all(y > 0) or np.all(y < 0)):
        raise DecaySignError("samples vanish or change sign; fit the absolute deviation")
    sign = 1.0 if y[0] > 0 else -1.0
    target = np.log(np.abs(y))
    if model == "power":
        pass
    elif model == "power_log":
        if r.min() <= 1.0:
            raise ValueError("log model needs r > 1")
        target = target - np.log(np.log(r))
    else:
        raise ValueError(f"unknown decay model {model!r}")
    if fixed_power is None:
        A = np.column_stack([np.ones_like(r), -np.log(r)])
        (lnc, p), *_ = np.linalg.lstsq(A, target, rcond=None)
    else:
        p = float(fixed_power)
        lnc = float(np.mean(target + p * np.log(r)))
    c = sign * float(np.exp(lnc))
    fitted = c * r ** (-p) * (np.log(r) if model == "power_log" else 1.0)
    resid = float(np.max(np.abs(fitted - y) / np.abs(y)))
    return DecayFit(c, float(p), resid)


def extrapolate_inverse_powers(R, values, powers=(1,)):
    """Fit values(R) = limit + sum_k c_k R^-k and return (limit, coeffs, residual)."""
    R = np.asarray(R, float)
    v = np.asarray(values, float)
    A = np.column_stack([np.ones_like(R)] + [R ** (-float(k)) for k in powers])
    sol, *_ = np.linalg.lstsq(A, v, rcond=None)
    resid = float(np.max(np.abs(A @ sol - v))) if v.size else 0.0
    return float(sol[0]), sol[1:], resid


def observed_order(coarse_error: float, fine_error: float, ratio: float = 2.0) -> float:
    """Convergence order from errors on grids whose step differs by ``ratio``."""
    return float(np.log(abs(coarse_error) / abs(fine_error)) / np.log(ratio))
