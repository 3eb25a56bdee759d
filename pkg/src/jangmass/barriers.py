"""Upper and lower barriers f = phi(r) + psi(theta, phi) for the Jang equation.

The radial profile enters through k = phi' V / sqrt(1 + V^2 phi'^2) with
V = sqrt(1+r^2).  The two bounding first-order ODEs for k are integrated
from k(r0) = -1 (upper barrier) and k(r0) = +1 (lower barrier); phi is then
recovered from phi' = k / (V sqrt(1-k^2)).

Numerically the deviation delta = k - r/V is the quantity of interest: it
decays like alpha/r^3 while k itself tends to 1.  Both the ODE and the phi
quadrature are written in terms of delta so that no digits are lost to
cancellation against r/V.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline

from .geometry_core import (
    HarmonicCoeffs,
    RadialGrid,
    SphereGrid,
    solve_sphere_poisson,
)
from .initial_data import InitialData, WangDataSpec, energy_wang, SQRT4PI


class BarrierFailureError(RuntimeError):
    """The barrier trajectory reached |k| = 1 beyond r0."""


class BarrierDomainError(ValueError):
    """The ODE right-hand side was evaluated with |k| > 1."""


class BarrierOrderingError(RuntimeError):
    """Assembled barriers violate f_minus <= f_plus."""


SIDES = ("upper", "lower")


@dataclass(frozen=True)
class BarrierODEParams:
    C1: float = 0.0
    C2: float = 0.0
    C3: float = 0.0
    C4: float = 0.0
    C5: float = 0.0
    C6: float = 0.0
    C7: float = 0.0
    C8: float = 0.0
    alpha: float = 0.0
    r0: float = 1.0
    check_signs: bool = True

    def __post_init__(self):
        for i, c in enumerate(self.constants, start=1):
            if c < 0 or not np.isfinite(c):
                raise ValueError(f"C{i} must be a nonnegative finite number, got {c}")
        if self.r0 <= 0:
            raise ValueError("r0 must be positive")
        if self.check_signs and not self.sign_conditions_hold():
            raise BarrierFailureError(
                f"sign conditions fail for r0 = {self.r0:g}; increase r0"
            )

    @property
    def constants(self) -> tuple:
        return (self.C1, self.C2, self.C3, self.C4, self.C5, self.C6, self.C7, self.C8)

    def with_r0(self, r0: float) -> "BarrierODEParams":
        d = asdict(self)
        d["r0"] = r0
        return BarrierODEParams(**d)

    def sign_conditions_hold(self, decades: float = 6.0, n: int = 400) -> bool:
        """k = -1 and k = +1 push trajectories inward for every r >= r0.

        For the upper equation k = +1 is a supersolution and k = -1 a
        subsolution; likewise for the lower equation.  Both are tested on a
        logarithmic sample of [r0, r0 * 10^decades].
        """
        r = self.r0 * np.logspace(0, decades, n)
        for side in SIDES:
            if np.any(ode_rhs(side, r, -1.0, self) <= 0) or np.any(ode_rhs(side, r, 1.0, self) >= 0):
                return False
        return True


def _correction(r, k, delta, sq, V, p: BarrierODEParams):
    """Sum of the C1..C6 terms (all nonnegative)."""
    r2 = r * r
    out = p.C1 / r2 * np.abs(sq / V - 3 * k / r2 + 2 / r2)
    out = out + p.C2 / r2 * np.abs(sq / V - 1 / r2)
    out = out + p.C3 / r**3 * np.abs(delta)
    omk2 = sq * sq
    out = out + p.C4 / r**3 * np.abs(k) * omk2 + p.C5 / r**3 * omk2 + p.C6 / r**5
    return out


def _bracket(r, k, sq, p: BarrierODEParams):
    if p.C7 == 0.0 or p.C8 == 0.0:
        return np.zeros_like(np.asarray(r * k, float))
    x = p.C8 * sq * sq / (r * r)
    return p.C7 * (3 - k * k) / r * np.expm1(1.5 * np.log1p(x))


def _one_minus_k2(r, delta):
    """1 - k^2 for k = r/V + delta, written without cancellation."""
    V = np.sqrt(1 + r * r)
    s = r / V
    return 1 / (V * V) - 2 * s * delta - delta * delta


def delta_rhs(side: str, r, delta, params: BarrierODEParams):
    """d(delta)/dr for delta = k - r/sqrt(1+r^2)."""
    r = np.asarray(r, float)
    V = np.sqrt(1 + r * r)
    s = r / V
    k = s + delta
    # Trial stages of the integrator may step marginally past |k| = 1;
    # genuine crossings are caught by the terminal event of the caller.
    omk2 = _one_minus_k2(r, delta)
    sq = np.sqrt(np.maximum(omk2, 0.0))
    base = -(2 / r) * delta - (2 * s * delta + delta * delta) / V + params.alpha * sq / (r * r * V)
    corr = _correction(r, k, delta, sq, V, params)
    if side == "upper":
        return base - corr
    if side == "lower":
        return base + corr + _bracket(r, k, sq, params)
    raise ValueError(f"side must be one of {SIDES}")


def ode_rhs(side: str, r, k, params: BarrierODEParams):
    """dk/dr from the upper or lower bounding equation.

    Solving the barrier equation for k' gives
        k' = -(2/r)(k - s) + (1-k^2)/V + alpha sqrt(1-k^2)/(r^2 V) -/+ corrections
    with s = r/V, the upper side subtracting the C1..C6 terms and the lower
    side adding them together with the C7/C8 bracket.
    """
    r = np.asarray(r, float)
    k = np.asarray(k, float)
    if np.any(np.abs(k) > 1.0):
        raise BarrierDomainError("|k| > 1 in barrier ODE")
    V = np.sqrt(1 + r * r)
    s = r / V
    omk2 = np.maximum(1 - k * k, 0.0)
    sq = np.sqrt(omk2)
    base = -(2 / r) * (k - s) + omk2 / V + params.alpha * sq / (r * r * V)
    corr = _correction(r, k, k - s, sq, V, params)
    if side == "upper":
        return base - corr
    if side == "lower":
        return base + corr + _bracket(r, k, sq, params)
    raise ValueError(f"side must be one of {SIDES}")


@dataclass
class KProfile:
    side: str
    grid: RadialGrid
    k: np.ndarray
    delta: np.ndarray
    r0: float

    @property
    def one_minus_k2(self) -> np.ndarray:
        return _one_minus_k2(self.grid.nodes, self.delta)


def solve_barrier_ivp(
    side: str,
    params: BarrierODEParams,
    grid: RadialGrid,
    k_start: float | None = None,
    rtol: float = 1e-11,
) -> KProfile:
    """Integrate a bounding equation from r0 = grid.nodes[0].

    The start k(r0) = -1 (upper) or +1 (lower) is a square-root branch
    point, so the first stretch [r0, 2 r0] is integrated in t = sqrt(r - r0)
    where the solution is smooth.  The remainder is integrated for delta in
    the variable ln r.  ``k_start`` overrides the initial value.
    """
    r = grid.nodes
    r0 = float(r[0])
    if abs(r0 - params.r0) > 1e-12 * r0:
        raise ValueError("grid must start at params.r0")
    k0 = (-1.0 if side == "upper" else 1.0) if k_start is None else float(k_start)
    if abs(k0) > 1:
        raise BarrierDomainError("initial k outside [-1, 1]")
    r_switch = min(2 * r0, r[-1])
    t_end = np.sqrt(r_switch - r0)

    def rhs_t(t, y):
        rr = r0 + t * t
        d = y[0]
        return [2 * t * delta_rhs(side, rr, d, params)]

    def hit_edge(t, y):
        if t <= 0:
            return 1.0
        return _one_minus_k2(r0 + t * t, y[0])

    hit_edge.terminal = True
    hit_edge.direction = -1
    V0 = np.sqrt(1 + r0 * r0)
    d0 = k0 - r0 / V0
    sol_a = solve_ivp(
        rhs_t, (0.0, t_end), [d0], method="DOP853", rtol=rtol, atol=1e-16,
        dense_output=True, events=hit_edge,
    )
    if sol_a.status == 1 or not sol_a.success:
        raise BarrierFailureError(f"{side} barrier reached |k| = 1 near r0 = {r0:g}")
    delta = np.empty_like(r)
    near = r <= r_switch
    delta[near] = sol_a.sol(np.sqrt(np.maximum(r[near] - r0, 0.0)))[0]
    delta[0] = d0
    far = ~near
    if np.any(far):
        def rhs_x(x, y):
            rr = np.exp(x)
            return [rr * delta_rhs(side, rr, y[0], params)]

        def hit_edge_x(x, y):
            return _one_minus_k2(np.exp(x), y[0])

        hit_edge_x.terminal = True
        hit_edge_x.direction = -1
        sol_b = solve_ivp(
            rhs_x, (np.log(r_switch), np.log(r[-1])), [sol_a.y[0, -1]], method="DOP853",
            rtol=rtol, atol=1e-24, t_eval=np.log(r[far]), events=hit_edge_x,
        )
        if sol_b.status == 1 or not sol_b.success or sol_b.y.shape[1] != far.sum():
            raise BarrierFailureError(f"{side} barrier reached |k| = 1 beyond r0 = {r0:g}")
        delta[far] = sol_b.y[0]
    k = r / np.sqrt(1 + r * r) + delta
    omk2 = _one_minus_k2(r, delta)
    if np.any(omk2[1:] <= 0):
        raise BarrierFailureError(f"{side} barrier reached |k| = 1 beyond r0 = {r0:g}")
    return KProfile(side, grid, k, delta, r0)


def phi_prime_minus_slope(r, delta):
    """phi' - r/V computed from delta without cancellation."""
    r = np.asarray(r, float)
    V = np.sqrt(1 + r * r)
    s = r / V
    eps = V * V * (2 * s * delta + delta * delta)
    root = np.sqrt(1 - eps)
    return (delta + s * eps / (1 + root)) / root


def _normalization_constant(r, w, alpha):
    """C in a least-squares fit w = C + (a + b ln r)/r over the last decade."""
    sel = r >= r[-1] / 10
    x = r[sel]
    A = np.column_stack([np.ones_like(x), 1 / x, np.log(x) / x])
    coef, *_ = np.linalg.lstsq(A, w[sel], rcond=None)
    return float(coef[0])


def integrate_phi(k, grid: RadialGrid, alpha: float = 0.0, delta=None, normalize: bool = True):
    """Profile phi from k samples, normalized so phi - r - alpha ln r -> 0.

    phi' = k / sqrt((1 - k^2)(1 + r^2)) has an integrable 1/sqrt(r - r0)
    singularity where |k| = 1 at the first node.  The quadrature integrates
    phi' - r/V, written as a smooth function of t = sqrt(r - r0), with a cubic
    spline antiderivative and adds sqrt(1+r^2) back analytically.
    """
    r = grid.nodes
    if isinstance(k, KProfile):
        delta = k.delta
        k = k.k
    k = np.asarray(k, float)
    V = np.sqrt(1 + r * r)
    if delta is None:
        delta = k - r / V
    omk2 = _one_minus_k2(r, delta)
    if np.any(omk2[1:] <= 0):
        raise BarrierFailureError("k reaches +-1 away from the first node: phi' is not integrable")
    r0 = r[0]
    t = np.sqrt(r - r0)
    g = np.empty_like(r)
    g[1:] = 2 * t[1:] * phi_prime_minus_slope(r[1:], delta[1:])
    singular = omk2[0] <= 1e-14
    if singular:
        # smooth in t: extrapolate the value at t = 0 from the next nodes
        coef = np.polyfit(t[1:6], g[1:6], 3)
        g[0] = np.polyval(coef, 0.0)
    else:
        g[0] = 0.0
    # In t the integrand grows like t at large r; integrate in t over the
    # near-start stretch and in ln r beyond it, where phi' - r/V ~ alpha/r.
    split = int(np.searchsorted(r, 2 * r0))
    split = min(max(split, 6), r.size - 1)
    phi_dev = np.zeros_like(r)
    sp_t = CubicSpline(t[: split + 1], g[: split + 1])
    phi_dev[: split + 1] = sp_t.antiderivative()(t[: split + 1])
    if split < r.size - 1:
        x = np.log(r[split:])
        integrand = r[split:] * phi_prime_minus_slope(r[split:], delta[split:])
        sp_x = CubicSpline(x, integrand)
        phi_dev[split:] = phi_dev[split] + sp_x.antiderivative()(x) - sp_x.antiderivative()(x[0])
    phi = V - V[0] + phi_dev
    if normalize:
        w = phi_dev - V[0] - alpha * np.log(r)
        C = _normalization_constant(r, w + V - r, alpha)
        phi = phi - C
    return phi


@dataclass
class BarrierSolution:
    grid: RadialGrid
    params: BarrierODEParams
    k_plus: np.ndarray
    k_minus: np.ndarray
    delta_plus: np.ndarray
    delta_minus: np.ndarray
    phi_plus: np.ndarray
    phi_minus: np.ndarray
    psi: HarmonicCoeffs
    attempts: list = field(default_factory=list)

    @property
    def r0(self) -> float:
        return float(self.grid.nodes[0])

    @property
    def f_gap(self) -> np.ndarray:
        """f_plus - f_minus, independent of the angular section."""
        return self.phi_plus - self.phi_minus

    def _spline(self, side):
        t = np.sqrt(self.grid.nodes - self.r0)
        phi = self.phi_plus if side == "upper" else self.phi_minus
        return CubicSpline(t, phi)

    def phi(self, side: str, r):
        """Interpolated phi_plus (side 'upper') or phi_minus at radii r >= r0."""
        r = np.asarray(r, float)
        if np.any(r < self.r0 * (1 - 1e-12)) or np.any(r > self.grid.nodes[-1] * (1 + 1e-12)):
            raise ValueError("radius outside the barrier grid")
        return self._spline(side)(np.sqrt(np.maximum(r - self.r0, 0.0)))

    def psi_values(self, theta, phi):
        return self.psi.evaluate(theta, phi)[(0, 0)]

    def f_plus(self, r, theta=np.pi / 2, phi=0.0):
        return self.phi("upper", r) + self.psi_values(theta, phi)

    def f_minus(self, r, theta=np.pi / 2, phi=0.0):
        return self.phi("lower", r) + self.psi_values(theta, phi)

    def radial_derivatives(self, side: str):
        """phi' and phi'' at grid nodes beyond r0 from k and the ODE."""
        r = self.grid.nodes[1:]
        delta = (self.delta_plus if side == "upper" else self.delta_minus)[1:]
        V = np.sqrt(1 + r * r)
        k = r / V + delta
        omk2 = _one_minus_k2(r, delta)
        sq = np.sqrt(omk2)
        kp = ode_rhs(side, r, np.clip(k, -1, 1), self.params)
        d1 = k / (V * sq)
        d2 = kp / (V * omk2 * sq) - k * r / (V**3 * sq)
        return r, d1, d2

    def with_psi_shift(self, c: float) -> "BarrierSolution":
        """Barriers for psi + c (a vertical translation of both)."""
        psi = HarmonicCoeffs(self.psi.L, self.psi.table.copy())
        psi[0, 0] = psi[0, 0] + c * SQRT4PI
        return BarrierSolution(
            self.grid, self.params, self.k_plus, self.k_minus, self.delta_plus,
            self.delta_minus, self.phi_plus, self.phi_minus, psi, list(self.attempts),
        )

    def to_rows(self):
        """Rows (r, k_plus, k_minus, phi_plus, phi_minus, f_gap)."""
        return np.column_stack(
            [self.grid.nodes, self.k_plus, self.k_minus, self.phi_plus, self.phi_minus, self.f_gap]
        )


def psi_from_spec(spec: WangDataSpec, alpha: float | None = None) -> HarmonicCoeffs:
    """Mean-zero solution of Lap psi = tr m / 2 + tr p - alpha."""
    if alpha is None:
        alpha = 2 * energy_wang(spec)
    rhs = spec.m.trace_coeffs().scaled(0.5) + spec.p.trace_coeffs()
    rhs = rhs.padded(max(rhs.L, 0))
    rhs[0, 0] = rhs[0, 0] - alpha * SQRT4PI
    return solve_sphere_poisson(rhs, tol=1e-9)


def constants_from_data(
    data: InitialData,
    spec: WangDataSpec,
    r0: float,
    tail: RadialGrid | None = None,
    sphere: SphereGrid | None = None,
) -> BarrierODEParams:
    """Structure constants from sampled sup-norms of the data.

    C1 = sup |tr m|/2 and C2 = sup |tr p|, each increased by the amplitude
    sup |tr e| of the metric (resp. extrinsic) remainders e.  With d2 = sup r^2 |d psi|_g^2 and
    the K - g radial component c_rr:
      C3 = 2 d2,  C4 = 2 d2 + sup r^3 |d_r g(psi#, psi#)|/2,
      C5 = d2 (1 + sqrt(1 + d2/r0^2)) + sup r^4 |c_rr|,
      C6 = 2 (C1 + C2) + C3 + C5  (a data-scale bound for the r^-5 remainder),
      C7 = 1 and C8 = d2 when psi is not constant, else 0.
    The sup-norms are taken over ``tail`` x ``sphere``.
    """
    sphere = sphere or SphereGrid.for_degree(16)
    tail = tail or RadialGrid.logarithmic(r0, 1e3 * r0, 60)
    th, ph = sphere.mesh
    alpha = 2 * energy_wang(spec)
    C1 = 0.5 * float(np.max(np.abs(spec.m.trace(th, ph))))
    C2 = float(np.max(np.abs(spec.p.trace(th, ph))))
    # Remainders decaying like r^-q (q > 3) relative to sigma act at order
    # r^-(q+1) in the Jang operator; those up to q = 4 are absorbed into the
    # r^-4 scale of the C1 (metric) and C2 (extrinsic) terms.
    for rem in spec.remainders:
        amp = float(np.max(np.abs(rem.tensor.trace(th, ph)))) * r0 ** (4.0 - min(rem.power, 4.0))
        if rem.target == "g":
            C1 += amp
        else:
            C2 += amp
    psi = psi_from_spec(spec, alpha)
    d = psi.evaluate(th, ph, 1)
    dpsi = np.stack([np.zeros_like(th), d[(1, 0)], d[(0, 1)]], axis=-1)
    d2 = 0.0
    dgpp = 0.0
    crr = 0.0
    for rr in tail.nodes:
        s = data.sample(np.full(th.shape, rr), th, ph)
        ginv = np.linalg.inv(s.g)
        norm2 = np.einsum("...ij,...i,...j->...", ginv, dpsi, dpsi)
        d2 = max(d2, float(np.max(rr * rr * norm2)))
        up = np.einsum("...ij,...j->...i", ginv, dpsi)
        dg_pp = np.einsum("...ij,...i,...j->...", s.dg[..., 0, :, :], up, up)
        dgpp = max(dgpp, float(np.max(0.5 * rr**3 * np.abs(dg_pp))))
        crr = max(crr, float(np.max(rr**4 * np.abs(s.K[..., 0, 0] - s.g[..., 0, 0]))))
    if d2 < 1e-14:
        d2 = dgpp = 0.0
    C3 = 2 * d2
    C4 = 2 * d2 + dgpp
    C5 = d2 * (1 + np.sqrt(1 + d2 / r0**2)) + crr
    C6 = 2 * (C1 + C2) + C3 + C5
    C7, C8 = (1.0, d2) if d2 > 0 else (0.0, 0.0)
    return BarrierODEParams(C1, C2, C3, C4, C5, C6, C7, C8, alpha, r0, check_signs=False)


def barrier_grid(r0: float, r_max: float = 1e4, per_decade: int = 400) -> RadialGrid:
    n = max(int(np.ceil(np.log10(r_max / r0) * per_decade)) + 1, 50)
    return RadialGrid.logarithmic(r0, r_max, n)


def assemble_barriers(
    params: BarrierODEParams,
    spec: WangDataSpec,
    r_max: float = 1e4,
    per_decade: int = 400,
    max_doublings: int = 6,
) -> BarrierSolution:
    """Integrate both bounding equations, build phi, psi and check ordering.

    On sign-condition or barrier failure r0 is doubled, up to
    ``max_doublings`` times.
    """
    alpha_spec = 2 * energy_wang(spec)
    if abs(params.alpha - alpha_spec) > 1e-9 * max(1.0, abs(alpha_spec)):
        raise ValueError(f"params.alpha = {params.alpha} but 2E = {alpha_spec}")
    psi = psi_from_spec(spec, params.alpha)
    attempts = []
    p = params
    last_error = None
    for _ in range(max_doublings + 1):
        try:
            if not p.sign_conditions_hold():
                raise BarrierFailureError(f"sign conditions fail at r0 = {p.r0:g}")
            grid = barrier_grid(p.r0, max(r_max, 100 * p.r0), per_decade)
            up = solve_barrier_ivp("upper", p, grid)
            lo = solve_barrier_ivp("lower", p, grid)
            attempts.append((p.r0, "ok"))
            break
        except BarrierFailureError as exc:
            attempts.append((p.r0, str(exc)))
            last_error = exc
            p = p.with_r0(2 * p.r0)
    else:
        raise BarrierFailureError(f"no admissible r0 after {max_doublings} doublings: {last_error}")
    phi_p = integrate_phi(up, grid, p.alpha)
    phi_m = integrate_phi(lo, grid, p.alpha)
    gap = phi_p - phi_m
    tol = 1e-10 * np.maximum(1.0, np.abs(phi_p))
    bad = gap < -tol
    if np.any(bad):
        i = int(np.argmin(gap))
        raise BarrierOrderingError(
            f"f_minus > f_plus at r = {grid.nodes[i]:.6g} (gap {gap[i]:.3e})"
        )
    return BarrierSolution(grid, p, up.k, lo.k, up.delta, lo.delta, phi_p, phi_m, psi, attempts)


def barriers_for_data(
    data: InitialData,
    spec: WangDataSpec,
    r0: float = 2.0,
    r_max: float = 1e4,
    per_decade: int = 400,
    overrides: dict | None = None,
) -> BarrierSolution:
    """constants_from_data followed by assemble_barriers."""
    p = constants_from_data(data, spec, r0)
    if overrides:
        d = asdict(p)
        d.update(overrides)
        p = BarrierODEParams(**{**d, "check_signs": False})
    return assemble_barriers(p, spec, r_max=r_max, per_decade=per_decade)
