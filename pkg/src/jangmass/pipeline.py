"""Configuration-driven stages: constraints, barriers, solve, geometry, conformal.

Each stage reads the shared :class:`RunContext`, stores its in-memory result
under ``ctx.results[stage]`` and writes CSV/JSON/PNG artifacts into the
output directory.  All numeric CSV fields use 17 significant digits and no
data file carries a timestamp, so identical configs give identical files.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import os
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import metadata

import jsonschema
import numpy as np

from . import plotting
from .barriers import barriers_for_data, psi_from_spec
from .conformal import (
    conformal_mass,
    mass_chain_report,
    radial_graph_metric,
    solve_conformal_factor,
)
from .geometry_core import RadialGrid, SphereGrid, fit_decay_tail, observed_order
from .graph_geometry import (
    GraphFunction,
    analytic_radial,
    graph_adm_mass,
    graph_geometry_report,
    graph_metric_at,
)
from .initial_data import (
    BUILTIN_FAMILIES,
    SpecValidationError,
    WangDataSpec,
    builtin_family,
    dec_report,
    energy_wang,
    make_wang_data,
    mass_vector,
)
from .jang_solver import (
    JangProblem,
    apriori_bound_holds,
    geometric_limit,
    regular_center_profile,
    solve_regularized_bvp,
)

STAGES = ("constraints", "barriers", "solve", "geometry", "conformal", "convergence")
PREREQUISITES = {
    "constraints": (),
    "barriers": (),
    "solve": ("barriers",),
    "geometry": ("solve",),
    "conformal": ("geometry",),
    "convergence": (),
}


class ConfigError(ValueError):
    """Malformed or inconsistent pipeline configuration."""


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------------------
# configuration

_pos = {"type": "number", "exclusiveMinimum": 0}
_int_pos = {"type": "integer", "minimum": 1}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["data"],
    "properties": {
        "data": {
            "oneOf": [
                {"type": "string", "enum": list(BUILTIN_FAMILIES)},
                {"type": "object"},
            ]
        },
        "label": {"type": "string"},
        "stages": {"type": "array", "items": {"enum": list(STAGES)}, "uniqueItems": True},
        "tolerance": _pos,
        "grids": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "r_center": _pos,
                "R": _pos,
                "nodes_per_decade": _int_pos,
                "sphere_degree": _int_pos,
                "region": {"type": "array", "items": _pos, "minItems": 2, "maxItems": 2},
            },
        },
        "barriers": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "r0": _pos,
                "r_max": _pos,
                "per_decade": _int_pos,
                "overrides": {
                    "type": "object",
                    "additionalProperties": False,
                    "patternProperties": {"^C[1-8]$": {"type": "number", "minimum": 0}},
                },
            },
        },
        "tau": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tau0": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "steps": {"type": "integer", "minimum": 2},
                "grow": {"type": "boolean"},
                "boundary": {"enum": ["midpoint", "upper", "lower"]},
            },
        },
        "constraints": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mass_radii": {"type": "array", "items": _pos, "minItems": 3},
                "dec_nodes": _int_pos,
            },
        },
        "geometry": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"adm_radii": {"type": "array", "items": _pos, "minItems": 3}},
        },
        "conformal": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "source": {"enum": ["profile", "limit"]},
                "R": _pos,
                "nodes_per_decade": _int_pos,
                "tail": {"type": "array", "items": _pos, "minItems": 2, "maxItems": 2},
                "chain_tolerance": _pos,
            },
        },
        "convergence": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "levels": {"type": "integer", "minimum": 2, "maximum": 6},
                "base_nodes_per_decade": _int_pos,
                "R": _pos,
            },
        },
    },
}

DEFAULTS = {
    "label": "",
    "stages": ["constraints", "barriers", "solve", "geometry", "conformal"],
    "tolerance": 1e-10,
    "grids": {"r_center": 1e-3, "R": 200.0, "nodes_per_decade": 120, "sphere_degree": 4,
              "region": [5.0, 50.0]},
    "barriers": {"r0": 2.0, "r_max": 1e4, "per_decade": 400, "overrides": {}},
    "tau": {"tau0": 1e-9, "steps": 4, "grow": False, "boundary": "midpoint"},
    "constraints": {"mass_radii": list(np.geomspace(100.0, 1000.0, 12)), "dec_nodes": 40},
    "geometry": {"adm_radii": None},
    "conformal": {"source": "profile", "R": 1000.0, "nodes_per_decade": 200, "tail": None,
                  "chain_tolerance": 0.01},
    "convergence": {"levels": 3, "base_nodes_per_decade": 60, "R": 100.0},
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class PipelineConfig:
    doc: dict

    @classmethod
    def from_dict(cls, doc) -> "PipelineConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        try:
            jsonschema.validate(doc, CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"invalid config at {where}: {exc.message}") from None
        full = _merge(DEFAULTS, doc)
        if isinstance(full["data"], dict):
            try:
                WangDataSpec.from_json(full["data"])
            except (SpecValidationError, ValueError, KeyError, TypeError) as exc:
                raise ConfigError(f"invalid inline data spec: {exc}") from None
        g = full["grids"]
        if g["R"] <= 10 * g["r_center"]:
            raise ConfigError("grids.R must exceed ten times grids.r_center")
        lo, hi = g["region"]
        if not lo < hi <= g["R"]:
            raise ConfigError("grids.region must be an increasing pair inside (0, R]")
        stages = full["stages"]
        for s in stages:
            missing = [p for p in PREREQUISITES[s] if p not in stages]
            if missing:
                raise ConfigError(f"stage {s!r} requires {missing} to be enabled")
        return cls(full)

    @classmethod
    def from_file(cls, path: str) -> "PipelineConfig":
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(doc)

    def with_overrides(self, tolerance: float | None = None, stages=None) -> "PipelineConfig":
        doc = copy.deepcopy(self.doc)
        if tolerance is not None:
            doc["tolerance"] = float(tolerance)
        if stages is not None:
            doc["stages"] = list(stages)
        return PipelineConfig.from_dict(doc)

    def canonical(self) -> str:
        return json.dumps(self.doc, sort_keys=True, separators=(",", ":"), default=float)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def __getitem__(self, key):
        return self.doc[key]


# ---------------------------------------------------------------------------
# context and helpers


@dataclass
class RunContext:
    config: PipelineConfig
    out: str
    jobs: int = 1
    results: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)
    status: dict = field(default_factory=dict)

    def __post_init__(self):
        os.makedirs(self.out, exist_ok=True)
        d = self.config["data"]
        if isinstance(d, str):
            self.data, self.spec = builtin_family(d)
            self.family = d
        else:
            self.spec = WangDataSpec.from_json(d)
            self.data = make_wang_data(self.spec, "inline")
            self.family = "inline"
        self.sphere = SphereGrid.for_degree(self.config["grids"]["sphere_degree"])

    @property
    def energy(self) -> float | None:
        return None if self.spec is None else float(energy_wang(self.spec))

    @property
    def alpha(self) -> float:
        if self.spec is not None:
            return 2 * self.energy
        sol = self.results.get("solve")
        return float(sol["limit"].log_coefficient or 0.0) if sol else 0.0

    def path(self, name: str) -> str:
        return os.path.join(self.out, name)

    def write_text(self, name: str, text: str) -> str:
        p = self.path(name)
        with open(p, "w") as fh:
            fh.write(text)
        self.artifacts.append(name)
        return p

    def write_json(self, name: str, obj) -> str:
        return self.write_text(name, json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")

    def write_csv(self, name: str, header, rows) -> str:
        p = self.path(name)
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(x) for x in row])
        self.artifacts.append(name)
        return p

    def figure(self, name: str, fn, *args) -> None:
        fn(self.path(name), *args)
        self.artifacts.append(name)


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return str(x)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if np.isfinite(x) else None
    return obj


def versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("artifact", "numpy", "scipy", "matplotlib", "click", "jsonschema"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


# ---------------------------------------------------------------------------
# stages


def stage_constraints(ctx: RunContext) -> dict:
    g = ctx.config["grids"]
    c = ctx.config["constraints"]
    radial = RadialGrid.logarithmic(max(g["r_center"], 1e-2), g["R"], c["dec_nodes"])
    rep = dec_report(ctx.data, radial, ctx.sphere)
    mv = mass_vector(ctx.data, np.asarray(c["mass_radii"], float))
    mu_mean = rep.mu.mean(axis=(1, 2))
    margin_min = rep.margin.min(axis=(1, 2))
    ctx.write_csv("dec.csv", ["r", "mu_mean", "min_margin"], zip(radial.nodes, mu_mean, margin_min))
    ctx.write_csv("mass_vector.csv", ["R", "E", "P1", "P2", "P3"], mv.table)
    summary = {
        "min_dec_margin": rep.min_margin,
        "dec_violated": bool(rep.violated),
        "E_extrapolated": mv.E,
        "P_extrapolated": mv.P,
        "truncation_rate": mv.rate,
        "E_formula": ctx.energy,
        "warnings": mv.warnings,
    }
    ctx.write_json("constraints.json", summary)
    ctx.figure("constraints.png", plotting.constraints_figure, radial.nodes, mu_mean, margin_min, mv.table)
    return {"dec": rep, "mass_vector": mv, "summary": summary}


def _barrier_alpha_fits(bar, tail=(1e2, 1e4)):
    """Leading coefficient of k - r/sqrt(1+r^2) on the tail, per side.

    'coefficient' is the constant a in r^3 delta = a + (b + c ln r)/r,
    which absorbs the O(r^-4 log r) correction; the free log-log exponent is
    reported when delta keeps one sign on the tail.
    """
    r = bar.grid.nodes
    sel = (r >= tail[0] * 0.999) & (r <= tail[1] * 1.001)
    x = r[sel]
    M = np.column_stack([np.ones_like(x), 1 / x, np.log(x) / x])
    out = {}
    for side, delta in (("upper", bar.delta_plus), ("lower", bar.delta_minus)):
        y = delta[sel]
        coef, *_ = np.linalg.lstsq(M, x**3 * y, rcond=None)
        entry = {"coefficient": float(coef[0]), "exponent": None}
        try:
            entry["exponent"] = fit_decay_tail(x, y).p
        except ValueError as exc:
            entry["note"] = str(exc)
        out[side] = entry
    return out


def stage_barriers(ctx: RunContext) -> dict:
    if ctx.spec is None:
        ctx.write_json("barriers.json", {"skipped": "family has no asymptotic data spec"})
        return {"barriers": None}
    b = ctx.config["barriers"]
    overrides = b["overrides"] or None
    bar = barriers_for_data(ctx.data, ctx.spec, b["r0"], b["r_max"], b["per_decade"], overrides)
    fits = _barrier_alpha_fits(bar, (max(1e2, 10 * bar.r0), b["r_max"]))
    ctx.write_csv("barriers.csv", ["r", "k_plus", "k_minus", "phi_plus", "phi_minus", "f_gap"], bar.to_rows())
    coeffs = [fits[s]["coefficient"] for s in ("upper", "lower") if fits[s]["coefficient"] is not None]
    summary = {
        "r0": bar.r0,
        "alpha": bar.params.alpha,
        "constants": dict(zip(("C1", "C2", "C3", "C4", "C5", "C6", "C7", "C8"), bar.params.constants)),
        "fits": fits,
        "fitted_alpha": float(np.mean(coeffs)) if coeffs else None,
        "attempts": [list(a) for a in bar.attempts],
        "psi_coefficients": [list(x) for x in bar.psi.nonzero()],
    }
    ctx.write_json("barriers.json", summary)
    ctx.figure("barriers.png", plotting.barriers_figure, bar)
    return {"barriers": bar, "summary": summary}


def stage_solve(ctx: RunContext) -> dict:
    g = ctx.config["grids"]
    t = ctx.config["tau"]
    bar = ctx.results.get("barriers", {}).get("barriers")
    schedule = [
        (g["R"] * (2 ** (n / 2) if t["grow"] else 1.0), t["tau0"] * 2.0**-n) for n in range(t["steps"])
    ]
    alpha = ctx.alpha
    limit = geometric_limit(
        ctx.data, bar, schedule, tuple(g["region"]), g["nodes_per_decade"], alpha,
        boundary=t["boundary"], tol=ctx.config["tolerance"],
    )
    rows = []
    for n, ((R, tau), sol) in enumerate(zip(schedule, limit.solutions)):
        diff = limit.differences[n - 1] if n > 0 else float("nan")
        rows.append([n, R, tau, diff, sol.newton_iterations, sol.residual_norm, sol.raw_residual_norm,
                     sol.trapped, apriori_bound_holds(sol, ctx.data), sol.trap_margin])
    ctx.write_csv("limit.csv", ["n", "R", "tau", "difference", "iterations", "residual", "raw_residual",
                                "trapped", "apriori_bound", "trap_margin"], rows)
    fin = limit.final
    V = np.sqrt(1 + fin.grid.nodes**2)
    ctx.write_csv("solution.csv", ["r", "f", "f_minus_V_minus_alpha_log_r"],
                  zip(fin.grid.nodes, fin.f, fin.f - V - alpha * np.log(fin.grid.nodes)))
    oracle_error = None
    if ctx.data.regular_center:
        try:
            _, fo, _ = regular_center_profile(ctx.data, fin.R, grid=fin.grid)
            d = (fin.f - fo)[fin.grid.mask(*g["region"])]
            oracle_error = float(0.5 * (d.max() - d.min()))
        except Exception as exc:  # the oracle is a diagnostic only
            oracle_error = f"unavailable: {exc}"
    summary = {
        "schedule": schedule,
        "differences": limit.differences,
        "ratios": limit.ratios,
        "cauchy": limit.cauchy,
        "all_trapped": all(s.trapped for s in limit.solutions),
        "all_apriori": all(apriori_bound_holds(s, ctx.data) for s in limit.solutions),
        "log_coefficient": limit.log_coefficient,
        "tail_exponent": limit.tail_exponent,
        "alpha": alpha,
        "oracle_error_on_region": oracle_error,
    }
    ctx.write_json("solve.json", summary)
    ctx.figure("solve.png", plotting.solve_figure, limit, alpha)
    return {"limit": limit, "summary": summary}


def _graph_function(ctx: RunContext):
    fin = ctx.results["solve"]["limit"].final
    return GraphFunction.from_samples(fin.f, fin.grid, reference=analytic_radial(ctx.alpha), label="jang"), fin.grid


def stage_geometry(ctx: RunContext) -> dict:
    gf, grid = _graph_function(ctx)
    radii = ctx.config["geometry"]["adm_radii"]
    R = grid.nodes[-1]
    if radii is None:
        radii = np.geomspace(R / 10, R / 2, 8)
    rep = graph_geometry_report(gf, ctx.data, grid, ctx.sphere, adm_radii=radii)
    w = ctx.sphere.weights / (4 * np.pi)

    def mean(a):
        return np.einsum("ijk,jk->i", a, w)

    ctx.write_csv("geometry.csv", ["r", "scal_direct", "scal_sy", "A_norm2", "H", "q_r"],
                  zip(grid.nodes, mean(rep.scal_direct), mean(rep.scal_sy), mean(rep.A_norm2),
                      mean(rep.H), mean(rep.q_r)))
    ctx.write_text("adm_mass.csv", rep.adm.to_csv())
    summary = rep.summary()
    summary["alpha"] = ctx.alpha
    ctx.write_json("geometry.json", summary)
    ctx.figure("geometry.png", plotting.geometry_figure, grid.nodes, mean(rep.scal_direct),
               mean(rep.scal_sy), rep.adm)
    return {"report": rep, "graph": gf, "summary": summary}


def _conformal_graph(ctx: RunContext):
    """Graph used for the conformal solve and its grid.

    'profile' integrates the tau = 0 radial equation from the smooth center
    out to conformal.R (the solve stage reports its distance to the
    regularized limit); 'limit' reuses the final regularized iterate, whose
    Dirichlet boundary layer near R biases the expansion coefficient.
    """
    c = ctx.config["conformal"]
    if c["source"] == "limit":
        return ctx.results["geometry"]["graph"], ctx.results["solve"]["limit"].final.grid
    R = c["R"]
    r_c = ctx.config["grids"]["r_center"]
    n = int(np.ceil(np.log10(R / r_c) * c["nodes_per_decade"])) + 1
    grid = RadialGrid.logarithmic(r_c, R, n)
    _, f, _ = regular_center_profile(ctx.data, R, grid=grid)
    return GraphFunction.from_samples(f, grid, reference=analytic_radial(ctx.alpha), label="profile"), grid


def _truncated(metric, n):
    g = metric.grid
    grid = RadialGrid.logarithmic(g.nodes[0], g.nodes[n - 1], n)
    return type(metric)(grid, metric.a[:n], metric.G[:n], metric.scal[:n], metric.label)


def stage_conformal(ctx: RunContext) -> dict:
    if not ctx.data.regular_center:
        raise ValueError("conformal solve needs a graph that closes smoothly at the center")
    c = ctx.config["conformal"]
    gf, grid = _conformal_graph(ctx)
    R = grid.nodes[-1]
    graph_adm = graph_adm_mass(gf, ctx.data, np.geomspace(R / 10, R / 2, 8), ctx.sphere)
    radii = graph_adm.radii  # snapped to grid nodes
    alpha_graph = graph_adm.mass
    metric = radial_graph_metric(gf, ctx.data, grid)
    tail = tuple(c["tail"]) if c["tail"] else (R / 10, R)
    cs = solve_conformal_factor(metric, alpha=alpha_graph, tail=tail)
    # R-doubling: the outer Robin condition biases A by O(1/R)
    half = int(np.searchsorted(grid.nodes, R / 2 * (1 + 1e-9)))
    cs_half = solve_conformal_factor(_truncated(metric, half), tail=(tail[0] / 2, tail[1] / 2))
    A_extrap = 2 * cs.A - cs_half.A
    cm = conformal_mass(graph_metric_at(gf, ctx.data), cs.jet, alpha_graph, A_extrap, radii, ctx.sphere)
    E = ctx.energy if ctx.energy is not None else 0.5 * ctx.alpha
    M_bar = ctx.results["geometry"]["report"].adm.mass
    chain = mass_chain_report(E, 2 * E, M_bar, A_extrap, cm.quadrature, c["chain_tolerance"],
                              ctx.config["label"] or ctx.family)
    ctx.write_csv("conformal.csv", ["r", "u", "scal"], zip(grid.nodes, cs.u, metric.scal))
    ctx.write_text("conformal_mass.csv", cm.adm.to_csv())
    summary = {
        **cs.summary(),
        "source": c["source"],
        "A_at_R": cs.A,
        "A_at_half_R": cs_half.A,
        "A_extrapolated": A_extrap,
        "graph_adm_mass": alpha_graph,
        "mass_formula": cm.formula,
        "mass_quadrature": cm.quadrature,
    }
    ctx.write_json("conformal.json", summary)
    doc = json.loads(chain.to_json())
    doc["M_conf_formula"] = cm.formula
    ctx.write_json("mass_chain.json", doc)
    ctx.write_text("mass_chain.txt", chain.table() + "\n")
    ctx.figure("conformal.png", plotting.conformal_figure, grid.nodes, cs.u, A_extrap)
    return {"solve": cs, "mass": cm, "chain": chain, "summary": summary}


# convergence ---------------------------------------------------------------


def _convergence_level(args):
    family, R, npd = args
    data, _ = builtin_family(family)
    n = int(np.ceil(np.log10(R / 1e-3) * npd)) + 1
    grid = RadialGrid.logarithmic(1e-3, R, n)
    _, fo, _ = regular_center_profile(data, R, grid=grid)
    prob = JangProblem(data, grid, 0.0, float(fo[-1]), "regular_center")
    sol = solve_regularized_bvp(prob, None, guess=fo)
    err = float(np.max(np.abs(sol.f - fo)))
    return npd, n, err


def stage_convergence(ctx: RunContext) -> dict:
    """Grid refinement of the tau = 0 radial solve against the shooting oracle."""
    c = ctx.config["convergence"]
    if not ctx.data.regular_center:
        raise ValueError("grid study needs data with a regular center")
    levels = [(ctx.family if ctx.family != "inline" else "hyperboloid", c["R"],
               c["base_nodes_per_decade"] * 2**i) for i in range(c["levels"])]
    if ctx.family == "inline":
        raise ValueError("grid study runs on builtin families only")
    if ctx.jobs > 1:
        with ProcessPoolExecutor(max_workers=ctx.jobs) as pool:
            out = list(pool.map(_convergence_level, levels))
    else:
        out = [_convergence_level(a) for a in levels]
    rows = []
    for i, (npd, n, err) in enumerate(out):
        order = observed_order(out[i - 1][2], err) if i > 0 and err > 0 else float("nan")
        rows.append(["grid", npd, n, err, order])
    ctx.write_csv("convergence.csv", ["study", "nodes_per_decade", "nodes", "error", "order"], rows)
    summary = {"orders": [r[4] for r in rows[1:]], "errors": [r[3] for r in rows]}
    ctx.write_json("convergence.json", summary)
    ctx.figure("convergence.png", plotting.convergence_figure, [r[1] for r in rows], [r[3] for r in rows])
    return {"rows": rows, "summary": summary}


STAGE_FUNCTIONS = {
    "constraints": stage_constraints,
    "barriers": stage_barriers,
    "solve": stage_solve,
    "geometry": stage_geometry,
    "conformal": stage_conformal,
    "convergence": stage_convergence,
}


def write_manifest(ctx: RunContext, ok: bool, error: str | None = None) -> str:
    doc = {
        "config_hash": ctx.config.hash,
        "config": ctx.config.doc,
        "family": ctx.family,
        "versions": versions(),
        "stages": ctx.status,
        "artifacts": sorted(set(ctx.artifacts)),
        "success": ok,
        "error": error,
    }
    p = ctx.path("manifest.json")
    with open(p, "w") as fh:
        fh.write(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")
    return p


def run_stages(config: PipelineConfig, out: str, stages=None, jobs: int = 1) -> RunContext:
    """Run ``stages`` (default: the config's list) in dependency order.

    Raises StageError on the first failure, after writing the manifest with
    the artifacts produced so far.
    """
    stages = list(stages or config["stages"])
    ctx = RunContext(config, out, jobs)
    for name in STAGES:
        if name not in stages:
            continue
        try:
            ctx.results[name] = STAGE_FUNCTIONS[name](ctx)
            ctx.status[name] = "ok"
        except Exception as exc:
            ctx.status[name] = f"failed: {type(exc).__name__}: {exc}"
            err = StageError(name, exc)
            write_manifest(ctx, False, str(err))
            raise err from exc
    write_manifest(ctx, True)
    return ctx
