"""Asymptotically hyperbolic initial data sets (g, K) in a polar chart.

Data with Wang asymptotics are built from a :class:`WangDataSpec`:

    g = dr^2/(1+r^2) + r^2 sigma + h_3(r) m + sum_remainders h_p(r) T
    K = dr^2/(1+r^2) + r^2 sigma + h_3(r) p + sum_remainders h_p(r) T

where h_p(r) ~ r^(2-p) at infinity.  The default "smooth" profile
h_p(r) = r^4 (1+r^2)^(-(p+2)/2) makes the data regular at the origin; the
"exact" profile h_p(r) = r^(2-p) reproduces the pure power and is only valid
for r > 0.

Symmetric 2-tensors on the unit sphere are stored as four scalar fields in
the basis

    sigma            -> a (d theta^2 + sin^2 theta d phi^2)
    dtheta2          -> b d theta^2
    sin_dtheta_dphi  -> c sin theta (d theta d phi + d phi d theta)
    sin2_dphi2       -> d sin^2 theta d phi^2

so T_thth = a + b, T_thph = c sin theta, T_phph = (a + d) sin^2 theta and
tr^sigma T = 2a + b + d.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .geometry_core import (
    HarmonicCoeffs,
    SphereGrid,
    RadialGrid,
    christoffel_symbols,
    extrapolate_inverse_powers,
    fit_decay_tail,
    DecaySignError,
    scalar_curvature,
    sphere_integrate,
)

COMPONENTS = ("sigma", "dtheta2", "sin_dtheta_dphi", "sin2_dphi2")
SQRT4PI = float(np.sqrt(4 * np.pi))


class SpecValidationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Tensors on the sphere
# ---------------------------------------------------------------------------


def _trig_derivs(theta, kind: str, n: int):
    s, c = np.sin(theta), np.cos(theta)
    if kind == "sin":
        return [s, c, -s, -c][n]
    if kind == "sin2":
        return [s * s, 2 * s * c, 2 * (c * c - s * s), -8 * s * c][n]
    raise ValueError(kind)


@dataclass
class SphereTensor:
    """Symmetric 2-tensor field on the unit sphere in the four-field basis."""

    fields: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in self.fields:
            if name not in COMPONENTS:
                raise SpecValidationError(
                    f"unknown tensor component {name!r}; expected one of {COMPONENTS}"
                )

    @classmethod
    def isotropic(cls, scale: float) -> "SphereTensor":
        """The tensor ``scale * sigma``."""
        return cls({"sigma": HarmonicCoeffs.from_entries([(0, 0, scale * SQRT4PI)])})

    def is_zero(self) -> bool:
        return all(not np.any(c.table) for c in self.fields.values())

    def _field(self, name) -> HarmonicCoeffs:
        return self.fields.get(name, HarmonicCoeffs(0))

    def scaled(self, factor: float) -> "SphereTensor":
        return SphereTensor({k: v.scaled(factor) for k, v in self.fields.items()})

    def __add__(self, other: "SphereTensor") -> "SphereTensor":
        names = set(self.fields) | set(other.fields)
        return SphereTensor({n: self._field(n) + other._field(n) for n in names})

    def trace_coeffs(self) -> HarmonicCoeffs:
        """Harmonic coefficients of tr^sigma T = 2a + b + d."""
        return self._field("sigma").scaled(2.0) + self._field("dtheta2") + self._field("sin2_dphi2")

    def trace(self, theta, phi) -> np.ndarray:
        return self.trace_coeffs().evaluate(theta, phi)[(0, 0)]

    def components(self, theta, phi, max_order: int = 2):
        """Covariant components T_{mu nu} and angular derivatives.

        Returns a dict keyed by (a, b) (numbers of theta and phi
        derivatives, a + b <= max_order) of arrays shaped (*points, 2, 2).
        """
        th = np.asarray(theta, float)
        ev = {n: self._field(n).evaluate(theta, phi, max_order) for n in COMPONENTS}
        shape = np.broadcast(th, np.asarray(phi, float)).shape
        th = np.broadcast_to(th, shape)
        out = {}
        from math import comb

        for a in range(max_order + 1):
            for b in range(max_order + 1 - a):
                T = np.zeros(shape + (2, 2))
                T[..., 0, 0] = ev["sigma"][(a, b)] + ev["dtheta2"][(a, b)]
                tp = np.zeros(shape)
                pp = np.zeros(shape)
                for k in range(a + 1):
                    w = comb(a, k)
                    tp += w * ev["sin_dtheta_dphi"][(k, b)] * _trig_derivs(th, "sin", a - k)
                    pp += w * (ev["sigma"][(k, b)] + ev["sin2_dphi2"][(k, b)]) * _trig_derivs(
                        th, "sin2", a - k
                    )
                T[..., 0, 1] = T[..., 1, 0] = tp
                T[..., 1, 1] = pp
                out[(a, b)] = T
        return out

    def to_entries(self):
        rows = []
        for name in COMPONENTS:
            if name in self.fields:
                for l, m, v in self.fields[name].nonzero():
                    rows.append({"l": l, "m": m, "component": name, "value": v})
        return rows

    @classmethod
    def from_entries(cls, rows) -> "SphereTensor":
        grouped: dict[str, list] = {}
        for row in rows:
            try:
                l, m, comp, val = int(row["l"]), int(row["m"]), row["component"], float(row["value"])
            except (KeyError, TypeError, ValueError) as exc:
                raise SpecValidationError(f"malformed coefficient entry {row!r}") from exc
            if l < 0 or abs(m) > l:
                raise SpecValidationError(f"invalid harmonic index (l={l}, m={m})")
            if comp not in COMPONENTS:
                raise SpecValidationError(f"unknown tensor component {comp!r}")
            grouped.setdefault(comp, []).append((l, m, val))
        return cls({k: HarmonicCoeffs.from_entries(v) for k, v in grouped.items()})


# ---------------------------------------------------------------------------
# Radial profiles
# ---------------------------------------------------------------------------


def radial_profile(r, power: float, kind: str = "smooth"):
    """h(r) ~ r^(2-power) at infinity together with h' and h''."""
    r = np.asarray(r, float)
    p = float(power)
    if kind == "exact":
        return r ** (2 - p), (2 - p) * r ** (1 - p), (2 - p) * (1 - p) * r ** (-p)
    if kind != "smooth":
        raise ValueError(f"unknown profile kind {kind!r}")
    q = (p + 2) / 2
    u = 1 + r * r
    h = r**4 * u ** (-q)
    h1 = 4 * r**3 * u ** (-q) - 2 * q * r**5 * u ** (-q - 1)
    h2 = 12 * r**2 * u ** (-q) - 18 * q * r**4 * u ** (-q - 1) + 4 * q * (q + 1) * r**6 * u ** (-q - 2)
    return h, h1, h2


# ---------------------------------------------------------------------------
# Specs
# ---------------------------------------------------------------------------


@dataclass
class Remainder:
    """Subleading angular term h_power(r) * tensor added to g or K."""

    target: str
    power: float
    tensor: SphereTensor

    def __post_init__(self):
        if self.target not in ("g", "K"):
            raise SpecValidationError("remainder target must be 'g' or 'K'")
        if self.power <= 3:
            raise SpecValidationError("remainders must decay faster than the r^-3 leading term")


@dataclass
class WangDataSpec:
    m: SphereTensor = field(default_factory=SphereTensor)
    p: SphereTensor = field(default_factory=SphereTensor)
    remainders: list = field(default_factory=list)
    profile: str = "smooth"

    def __post_init__(self):
        if self.profile not in ("smooth", "exact"):
            raise SpecValidationError(f"unknown profile {self.profile!r}")

    @classmethod
    def from_json(cls, doc) -> "WangDataSpec":
        if isinstance(doc, str):
            doc = json.loads(doc)
        if not isinstance(doc, dict):
            raise SpecValidationError("data spec must be a JSON object")
        unknown = set(doc) - {"m", "p", "remainders", "profile"}
        if unknown:
            raise SpecValidationError(f"unknown data spec keys {sorted(unknown)}")
        rems = []
        for item in doc.get("remainders", []) or []:
            try:
                rems.append(
                    Remainder(item["target"], float(item["power"]), SphereTensor.from_entries(item["terms"]))
                )
            except (KeyError, TypeError) as exc:
                raise SpecValidationError(f"malformed remainder {item!r}") from exc
        return cls(
            SphereTensor.from_entries(doc.get("m", [])),
            SphereTensor.from_entries(doc.get("p", [])),
            rems,
            doc.get("profile", "smooth"),
        )

    def to_json(self) -> dict:
        return {
            "m": self.m.to_entries(),
            "p": self.p.to_entries(),
            "remainders": [
                {"target": r.target, "power": r.power, "terms": r.tensor.to_entries()}
                for r in self.remainders
            ],
            "profile": self.profile,
        }


def energy_wang(spec: WangDataSpec) -> float:
    """E = (1/16 pi) * integral over S^2 of (tr m + 2 tr p).

    Only the l = 0 coefficient survives integration, and the integral of a
    field with mean coefficient c_00 is sqrt(4 pi) c_00.
    """
    c00 = spec.m.trace_coeffs()[0, 0] + 2.0 * spec.p.trace_coeffs()[0, 0]
    return SQRT4PI * c00 / (16 * np.pi)


# ---------------------------------------------------------------------------
# Initial data container
# ---------------------------------------------------------------------------


class FieldSample(NamedTuple):
    g: np.ndarray
    dg: np.ndarray
    ddg: np.ndarray
    K: np.ndarray
    dK: np.ndarray


class InitialData:
    """Evaluators for (g, K) and their partial derivatives in a polar chart.

    ``sampler(r, theta, phi)`` returns a :class:`FieldSample` for broadcast
    point arrays.
    """

    def __init__(
        self,
        sampler: Callable,
        r_min: float = 0.0,
        name: str = "custom",
        spec: WangDataSpec | None = None,
        spherically_symmetric: bool = False,
        derivative_mode: str = "analytic",
        fd_step: float | None = None,
        regular_center: bool = False,
    ):
        self._sampler = sampler
        self.r_min = float(r_min)
        self.name = name
        self.spec = spec
        self.spherically_symmetric = spherically_symmetric
        self.derivative_mode = derivative_mode
        self.fd_step = fd_step
        self.regular_center = regular_center

    def sample(self, r, theta=np.pi / 2, phi=0.0) -> FieldSample:
        r = np.asarray(r, float)
        if np.any(r <= self.r_min) and not (self.regular_center and np.all(r > 0)):
            raise ValueError(f"radius below validity radius r_min = {self.r_min}")
        return self._sampler(r, np.asarray(theta, float), np.asarray(phi, float))

    def radial_profiles(self, r):
        """Spherically symmetric reduction on the equator.

        Returns a dict with g_rr, G (angular coefficient of sigma), their
        first r-derivatives, K_rr, K_ang (angular coefficient of K) and the
        r-derivative of K_ang.
        """
        s = self.sample(r, np.pi / 2, 0.0)
        return {
            "grr": s.g[..., 0, 0],
            "grr_r": s.dg[..., 0, 0, 0],
            "G": s.g[..., 1, 1],
            "G_r": s.dg[..., 0, 1, 1],
            "G_rr": s.ddg[..., 0, 0, 1, 1],
            "Krr": s.K[..., 0, 0],
            "Kang": s.K[..., 1, 1],
            "Kang_r": s.dK[..., 0, 1, 1],
        }

    def with_extrinsic_scale(self, lam: float) -> "InitialData":
        """Same metric with K replaced by lam * K."""
        base = self._sampler

        def sampler(r, th, ph):
            s = base(r, th, ph)
            return s._replace(K=lam * s.K, dK=lam * s.dK)

        return InitialData(
            sampler,
            self.r_min,
            f"{self.name}*K{lam:g}",
            None,
            self.spherically_symmetric,
            self.derivative_mode,
            self.fd_step,
            self.regular_center,
        )

    @classmethod
    def from_callables(
        cls,
        g_fn: Callable,
        K_fn: Callable,
        r_min: float = 0.0,
        step: float = 1e-4,
        name: str = "black-box",
        spherically_symmetric: bool = False,
    ) -> "InitialData":
        """Wrap point evaluators of g and K with central finite differences.

        The radial step is ``step * r`` and the angular step is ``step``.
        """

        def steps(r):
            return [step * r, step * np.ones_like(r), step * np.ones_like(r)]

        def shifted(fn, x, k, d):
            y = list(x)
            y[k] = y[k] + d
            return fn(*y)

        def sampler(r, th, ph):
            r, th, ph = np.broadcast_arrays(r, th, ph)
            x = (r, th, ph)
            hs = steps(r)
            g = g_fn(*x)
            K = K_fn(*x)
            dg = np.zeros(g.shape[:-2] + (3, 3, 3))
            dK = np.zeros_like(dg)
            ddg = np.zeros(g.shape[:-2] + (3, 3, 3, 3))
            for k in range(3):
                h = hs[k][..., None, None]
                gp, gm = shifted(g_fn, x, k, hs[k]), shifted(g_fn, x, k, -hs[k])
                dg[..., k, :, :] = (gp - gm) / (2 * h)
                dK[..., k, :, :] = (shifted(K_fn, x, k, hs[k]) - shifted(K_fn, x, k, -hs[k])) / (2 * h)
                ddg[..., k, k, :, :] = (gp - 2 * g + gm) / h**2
                for l in range(k + 1, 3):
                    hl = hs[l][..., None, None]
                    y = list(x)
                    vals = []
                    for sk, sl in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                        y = list(x)
                        y[k] = x[k] + sk * hs[k]
                        y[l] = x[l] + sl * hs[l]
                        vals.append(g_fn(*y))
                    mixed = (vals[0] - vals[1] - vals[2] + vals[3]) / (4 * h * hl)
                    ddg[..., k, l, :, :] = ddg[..., l, k, :, :] = mixed
            return FieldSample(g, dg, ddg, K, dK)

        return cls(sampler, r_min, name, None, spherically_symmetric, "finite-difference", step)


def _hyperbolic_block(r, th):
    """b and its first and second partial derivatives."""
    shape = np.broadcast(r, th).shape
    r = np.broadcast_to(r, shape)
    th = np.broadcast_to(th, shape)
    u = 1 + r * r
    s2 = np.sin(th) ** 2
    ds2 = np.sin(2 * th)
    dds2 = 2 * np.cos(2 * th)
    g = np.zeros(shape + (3, 3))
    dg = np.zeros(shape + (3, 3, 3))
    ddg = np.zeros(shape + (3, 3, 3, 3))
    g[..., 0, 0] = 1 / u
    g[..., 1, 1] = r * r
    g[..., 2, 2] = r * r * s2
    dg[..., 0, 0, 0] = -2 * r / u**2
    dg[..., 0, 1, 1] = 2 * r
    dg[..., 0, 2, 2] = 2 * r * s2
    dg[..., 1, 2, 2] = r * r * ds2
    ddg[..., 0, 0, 0, 0] = (6 * r * r - 2) / u**3
    ddg[..., 0, 0, 1, 1] = 2
    ddg[..., 0, 0, 2, 2] = 2 * s2
    ddg[..., 0, 1, 2, 2] = ddg[..., 1, 0, 2, 2] = 2 * r * ds2
    ddg[..., 1, 1, 2, 2] = r * r * dds2
    return g, dg, ddg


def _add_angular(g, dg, ddg, r, th, ph, tensor: SphereTensor, power, kind, order=2):
    """Add h_power(r) * tensor to the angular block (in place)."""
    if tensor.is_zero():
        return
    h, h1, h2 = radial_profile(r, power, kind)
    T = tensor.components(th, ph, order)
    h = np.asarray(h)[..., None, None]
    h1 = np.asarray(h1)[..., None, None]
    h2 = np.asarray(h2)[..., None, None]
    ang = (slice(1, 3), slice(1, 3))
    g[(...,) + ang] += h * T[(0, 0)]
    if dg is None:
        return
    dg[(..., 0) + ang] += h1 * T[(0, 0)]
    dg[(..., 1) + ang] += h * T[(1, 0)]
    dg[(..., 2) + ang] += h * T[(0, 1)]
    if ddg is None:
        return
    ddg[(..., 0, 0) + ang] += h2 * T[(0, 0)]
    for k, key in ((1, (1, 0)), (2, (0, 1))):
        ddg[(..., 0, k) + ang] += h1 * T[key]
        ddg[(..., k, 0) + ang] += h1 * T[key]
    ddg[(..., 1, 1) + ang] += h * T[(2, 0)]
    ddg[(..., 2, 2) + ang] += h * T[(0, 2)]
    ddg[(..., 1, 2) + ang] += h * T[(1, 1)]
    ddg[(..., 2, 1) + ang] += h * T[(1, 1)]


def make_hyperboloid_data() -> InitialData:
    """The hyperboloid (H^3, b, b)."""

    def sampler(r, th, ph):
        shape = np.broadcast(r, th, ph).shape
        g, dg, ddg = _hyperbolic_block(np.broadcast_to(r, shape), np.broadcast_to(th, shape))
        return FieldSample(g, dg, ddg, g.copy(), dg.copy())

    return InitialData(
        sampler,
        0.0,
        "hyperboloid",
        WangDataSpec(),
        spherically_symmetric=True,
        regular_center=True,
    )


def _is_isotropic(t: SphereTensor) -> bool:
    for name, coeffs in t.fields.items():
        for l, m, v in coeffs.nonzero():
            if name != "sigma" or l != 0:
                return False
    return True


def make_wang_data(spec: WangDataSpec, name: str = "wang") -> InitialData:
    kind = spec.profile
    g_terms = [(spec.m, 3.0)] + [(r.tensor, r.power) for r in spec.remainders if r.target == "g"]
    k_terms = [(spec.p, 3.0)] + [(r.tensor, r.power) for r in spec.remainders if r.target == "K"]

    def sampler(r, th, ph):
        shape = np.broadcast(r, th, ph).shape
        r_, th_, ph_ = (np.broadcast_to(x, shape) for x in (r, th, ph))
        b, db, ddb = _hyperbolic_block(r_, th_)
        g, dg, ddg = b.copy(), db.copy(), ddb.copy()
        K, dK = b.copy(), db.copy()
        for tensor, power in g_terms:
            _add_angular(g, dg, ddg, r_, th_, ph_, tensor, power, kind)
        for tensor, power in k_terms:
            _add_angular(K, dK, None, r_, th_, ph_, tensor, power, kind, order=1)
        return FieldSample(g, dg, ddg, K, dK)

    symmetric = all(_is_isotropic(t) for t, _ in g_terms + k_terms)
    return InitialData(
        sampler,
        0.0,
        name,
        spec,
        spherically_symmetric=symmetric,
        regular_center=(kind == "smooth"),
    )


def _star_mass_function(R, M):
    """M(R)/R = M q(R) with q = R^2 (1+R^2)^(-3/2); returns q, q', q''."""
    u = 1 + R * R
    q = R * R * u**-1.5
    q1 = (2 * R - R**3) * u**-2.5
    q2 = (2 - 3 * R * R) * u**-2.5 - 5 * R * (2 * R - R**3) * u**-3.5
    return M * q, M * q1, M * q2


def make_umbilic_star_data(mass: float = 0.5) -> InitialData:
    """Spherically symmetric umbilic data K = g in an areal chart.

    g = dR^2 / (1 + R^2 - 2 M(R)/R) + R^2 sigma with the smooth mass
    function M(R) = mass * R^3 / (1+R^2)^(3/2).  Then J = 0 and
    2 mu = Scal + 6 = 4 M'(R)/R^2 >= 0, so the dominant energy condition
    holds, and 2M(R)/R < 1 rules out marginally trapped coordinate
    spheres.  The energy equals ``mass``.
    """

    def sampler(r, th, ph):
        shape = np.broadcast(r, th, ph).shape
        r_, th_ = (np.broadcast_to(x, shape) for x in (r, th))
        g, dg, ddg = _hyperbolic_block(r_, th_)
        mq, mq1, mq2 = _star_mass_function(r_, mass)
        F = 1 + r_ * r_ - 2 * mq
        F1 = 2 * r_ - 2 * mq1
        F2 = 2 - 2 * mq2
        g[..., 0, 0] = 1 / F
        dg[..., 0, 0, 0] = -F1 / F**2
        ddg[..., 0, 0, 0, 0] = -F2 / F**2 + 2 * F1**2 / F**3
        return FieldSample(g, dg, ddg, g.copy(), dg.copy())

    return InitialData(
        sampler, 0.0, f"umbilic_star(M={mass:g})", None, spherically_symmetric=True, regular_center=True
    )


BUILTIN_FAMILIES = ("hyperboloid", "wang_m_sigma", "wang_mp", "wang_m_sigma_r4", "umbilic_star")


def builtin_spec(name: str) -> WangDataSpec | None:
    if name == "hyperboloid":
        return WangDataSpec()
    if name == "wang_m_sigma":
        return WangDataSpec(m=SphereTensor.isotropic(1.0))
    if name == "wang_mp":
        return WangDataSpec(m=SphereTensor.isotropic(1 / 3), p=SphereTensor.isotropic(1 / 3))
    if name == "wang_m_sigma_r4":
        return WangDataSpec(
            m=SphereTensor.isotropic(1.0),
            remainders=[Remainder("g", 4.0, SphereTensor.isotropic(2.0))],
        )
    if name == "umbilic_star":
        return None
    raise KeyError(f"unknown builtin family {name!r}; choose from {BUILTIN_FAMILIES}")


def builtin_family(name: str) -> tuple[InitialData, WangDataSpec | None]:
    """Named fixture families used by the CLI and the acceptance tests."""
    if name == "hyperboloid":
        return make_hyperboloid_data(), WangDataSpec()
    if name == "umbilic_star":
        return make_umbilic_star_data(0.5), None
    spec = builtin_spec(name)
    return make_wang_data(spec, name), spec


# ---------------------------------------------------------------------------
# Constraints
# ---------------------------------------------------------------------------


def constraints_from_sample(s: FieldSample):
    """(mu, J, |J|_g) from a field sample."""
    ginv = np.linalg.inv(s.g)
    scal = scalar_curvature(s.g, s.dg, s.ddg)
    trK = np.einsum("...ij,...ij->...", ginv, s.K)
    Kup = np.einsum("...ia,...jb,...ab->...ij", ginv, ginv, s.K)
    K2 = np.einsum("...ij,...ij->...", Kup, s.K)
    mu = 0.5 * (scal + trK**2 - K2)
    Gam = christoffel_symbols(s.g, s.dg)
    # nabla_j K_ki = d_j K_ki - Gam^l_jk K_li - Gam^l_ji K_kl, indexed [j, k, i]
    nabK = s.dK - np.einsum("...ljk,...li->...jki", Gam, s.K) - np.einsum("...lji,...kl->...jki", Gam, s.K)
    divK = np.einsum("...jk,...jki->...i", ginv, nabK)
    dginv = -np.einsum("...ja,...iab,...bk->...ijk", ginv, s.dg, ginv)
    dtrK = np.einsum("...ijk,...jk->...i", dginv, s.K) + np.einsum("...jk,...ijk->...i", ginv, s.dK)
    J = divK - dtrK
    Jn = np.sqrt(np.maximum(np.einsum("...ij,...i,...j->...", ginv, J, J), 0.0))
    return mu, J, Jn


def compute_constraints(data: InitialData, r, theta=np.pi / 2, phi=0.0):
    """Energy density mu and current covector J at the given points."""
    mu, J, _ = constraints_from_sample(data.sample(r, theta, phi))
    return mu, J


@dataclass
class ConstraintReport:
    r: np.ndarray
    theta: np.ndarray
    phi: np.ndarray
    mu: np.ndarray
    J_norm: np.ndarray
    margin: np.ndarray
    min_margin: float
    argmin: tuple
    violated: bool


def dec_report(data: InitialData, radial: RadialGrid, sphere: SphereGrid, tol: float = 1e-10) -> ConstraintReport:
    """Sample mu, |J|_g and the dominant-energy margin mu - |J|_g.

    Only margins below ``-tol`` are flagged; the default absorbs roundoff.
    """
    th, ph = sphere.mesh
    r3 = radial.nodes[:, None, None]
    mu, _, Jn = constraints_from_sample(data.sample(r3, th[None], ph[None]))
    margin = mu - Jn
    idx = np.unravel_index(int(np.argmin(margin)), margin.shape)
    loc = (float(radial.nodes[idx[0]]), float(sphere.theta[idx[1]]), float(sphere.phi[idx[2]]))
    mm = float(margin[idx])
    return ConstraintReport(radial.nodes, sphere.theta, sphere.phi, mu, Jn, margin, mm, loc, mm < -tol)


# ---------------------------------------------------------------------------
# Mass functional
# ---------------------------------------------------------------------------


def _lapse_functions(r, th, ph):
    """V_(0..3) and their differentials (dr, dtheta, dphi components)."""
    rr = np.broadcast_to(r, th.shape)
    V0 = np.sqrt(1 + rr * rr)
    n = np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)])
    n_th = np.stack([np.cos(th) * np.cos(ph), np.cos(th) * np.sin(ph), -np.sin(th)])
    n_ph = np.stack([-np.sin(th) * np.sin(ph), np.sin(th) * np.cos(ph), np.zeros_like(th)])
    V = np.concatenate([V0[None], rr * n])
    dV = np.zeros((4,) + th.shape + (3,))
    dV[0, ..., 0] = rr / V0
    dV[1:, ..., 0] = n
    dV[1:, ..., 1] = rr * n_th
    dV[1:, ..., 2] = rr * n_ph
    return V, dV


def mass_functional_integrands(data: InitialData, R: float, sphere: SphereGrid):
    """Surface densities of the mass functional on {r = R} for V_(0..3).

    The density, integrated against d mu^sigma, is

        [V (div e - d tr e) + tr(e) dV - (e + 2 eta)(grad V, .) + 2 tr(eta) dV](nu) R^2

    with e = g - b, eta = K - g, nu = sqrt(1+R^2) d_r and all operations
    taken with respect to b.
    """
    th, ph = sphere.mesh
    s = data.sample(np.full(th.shape, float(R)), th, ph)
    b, db, _ = _hyperbolic_block(np.full(th.shape, float(R)), th)
    e = s.g - b
    de = s.dg - db
    eta = s.K - s.g
    binv = np.linalg.inv(b)
    Gam = christoffel_symbols(b, db, check=False)
    # (div e)_r = b^{ij} (d_i e_jr - Gam^l_ij e_lr - Gam^l_ir e_jl)
    div_r = (
        np.einsum("...ij,...ij->...", binv, de[..., :, :, 0])
        - np.einsum("...ij,...lij,...l->...", binv, Gam, e[..., :, 0])
        - np.einsum("...ij,...li,...jl->...", binv, Gam[..., :, :, 0], e)
    )
    dbinv_r = -np.einsum("...ia,...ab,...bj->...ij", binv, db[..., 0, :, :], binv)
    dtr_r = np.einsum("...ij,...ij->...", dbinv_r, e) + np.einsum("...ij,...ij->...", binv, de[..., 0, :, :])
    tr_e = np.einsum("...ij,...ij->...", binv, e)
    tr_eta = np.einsum("...ij,...ij->...", binv, eta)
    V, dV = _lapse_functions(float(R), th, ph)
    gradV = np.einsum("...ij,k...j->k...i", binv, dV)
    nu = np.sqrt(1 + R * R)
    out = []
    for k in range(4):
        w = e + 2 * eta
        val = (
            V[k] * (div_r - dtr_r)
            + tr_e * dV[k, ..., 0]
            - np.einsum("...i,...i->...", gradV[k], w[..., :, 0])
            + 2 * tr_eta * dV[k, ..., 0]
        )
        out.append(nu * val * R * R)
    return np.stack(out)


@dataclass
class MassVectorResult:
    E: float
    P: np.ndarray
    table: np.ndarray  # columns R, E(R), P1(R), P2(R), P3(R)
    rate: float
    warnings: list


def mass_vector(
    data: InitialData,
    radii,
    sphere: SphereGrid | None = None,
    residual_threshold: float = 1e-3,
) -> MassVectorResult:
    """Energy-momentum from mass-functional surface integrals.

    Each component is extrapolated with value(R) = limit + c/R; the
    truncation rate is the log-log slope of |value(R) - limit|.
    """
    sphere = sphere or SphereGrid.for_degree(16)
    radii = np.asarray(radii, float)
    if np.any(np.diff(radii) <= 0):
        raise ValueError("radii must be increasing")
    rows = []
    for R in radii:
        dens = mass_functional_integrands(data, R, sphere)
        rows.append(sphere_integrate(dens, sphere) / (16 * np.pi))
    vals = np.array(rows)
    limits = []
    warnings = []
    for k in range(4):
        lim, _, resid = extrapolate_inverse_powers(radii, vals[:, k], (1,))
        scale = max(1e-12, abs(lim), float(np.max(np.abs(vals[:, k]))))
        if resid > residual_threshold * max(scale, 1.0):
            warnings.append(f"component {k}: extrapolation residual {resid:.3e} exceeds threshold")
        limits.append(lim)
    dev = np.abs(vals[:, 0] - limits[0])
    rate = float("nan")
    if radii.size >= 10 and radii[-1] / radii[0] >= 10 and np.all(dev > 0):
        try:
            rate = fit_decay_tail(radii, dev).p
        except (DecaySignError, ValueError):
            pass
    table = np.column_stack([radii, vals])
    return MassVectorResult(limits[0], np.array(limits[1:]), table, rate, warnings)


def trapping_margin(data: InitialData, R: float, sphere: SphereGrid | None = None) -> float:
    """min over the sphere {r = R} of H - |tr K| restricted to the sphere.

    H is the mean curvature for the normal pointing to increasing r.
    """
    sphere = sphere or SphereGrid.for_degree(8)
    th, ph = sphere.mesh
    s = data.sample(np.full(th.shape, float(R)), th, ph)
    ginv = np.linalg.inv(s.g)
    Gam = christoffel_symbols(s.g, s.dg)
    grr = ginv[..., 0, 0]
    n_up = ginv[..., :, 0] / np.sqrt(grr)[..., None]
    P = ginv - n_up[..., :, None] * n_up[..., None, :]
    H = -np.einsum("...ij,...ij->...", P, Gam[..., 0, :, :]) / np.sqrt(grr)
    trK = np.einsum("...ij,...ij->...", P, s.K)
    return float(np.min(H - np.abs(trK)))
