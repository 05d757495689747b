"""Test-function generators, a pseudo-time relaxation solver and config-driven runs."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numba
import numpy as np

from . import io
from .flatness import FlatnessConfig, classify_singular_set
from .grid import Grid, GridFunction, Mask, hessian_field
from .harnack import (
    Report,
    barrier_check,
    covering_step,
    decay_iteration,
    derive_constants,
    holder_decay,
    verify_density,
    verify_measure_lemma,
    weak_harnack,
    weak_Leps,
)
from .operators import EllipticityParams, OperatorSpec, make_operator
from .paraboloid import Quadratic


class ConfigError(ValueError):
    """Raised for malformed or inconsistent experiment configs."""


class DivergenceError(RuntimeError):
    """Raised when the relaxation residual keeps growing."""


class StageError(RuntimeError):
    """Wraps a failure inside :func:`run` with the stage that raised it."""

    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"stage {stage!r} failed: {exc}")
        self.stage = stage
        self.__cause__ = exc


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------


@dataclass
class Generated:
    u: GridFunction
    f: GridFunction
    metadata: dict[str, Any]


# perturbation shapes: value and constant Hessian (all are quadratics)
_SHAPES: dict[str, tuple[Callable[[np.ndarray], np.ndarray], Callable[[int], np.ndarray]]] = {
    "x1x2": (lambda x: x[..., 0] * x[..., 1], lambda n: _sym(n, {(0, 1): 1.0})),
    "x1^2-x2^2": (lambda x: x[..., 0] ** 2 - x[..., 1] ** 2, lambda n: _sym(n, {(0, 0): 2.0, (1, 1): -2.0})),
    "|x|^2": (lambda x: np.sum(x * x, axis=-1), lambda n: 2.0 * np.eye(n)),
}


def _sym(n: int, entries: dict[tuple[int, int], float]) -> np.ndarray:
    H = np.zeros((n, n))
    for (i, j), v in entries.items():
        H[i, j] = H[j, i] = v
    return H


def _operator_from(params: dict, default: str) -> tuple[str, OperatorSpec]:
    name = params.get("operator", default)
    ell = params.get("ellipticity")
    return name, make_operator(name, EllipticityParams.from_dict(ell) if ell else None)


def generate(name: str, params: dict | None, grid: Grid) -> Generated:
    """Build ``(u, f)`` satisfying the declared operator equation at the nodes.

    ``radial-sigma-k``      ``u = (t/2)|x|^2``, ``f = C(n,k) t^k`` (params ``k``, ``t``)
    ``small-perturbation``  ``u = delta w`` for a quadratic shape ``w`` (params ``delta``, ``shape``)
    ``paraboloid-family``   ``u = (b/2)|x - z0|^2 + l.x + c`` (params ``b``, ``z0``, ``l``, ``c``)
    ``c11-crease``          ``u = delta x1|x1|``, trace, ``f = 2 delta sign(x1)``
    """
    params = dict(params or {})
    n = grid.dim
    x = grid.coords
    if name == "radial-sigma-k":
        k = int(params.get("k", 2))
        t = float(params.get("t", 0.1))
        if not 1 <= k <= n:
            raise ConfigError(f"k={k} out of range for n={n}")
        op = params.get("operator", f"sigma-k:{k}")
        q = Quadratic(0.0, np.zeros(n), 0.5 * t * np.eye(n))
        fval = math.comb(n, k) * t**k
        meta = {
            "closed_form": "u = (t/2)|x|^2, f = C(n,k) t^k",
            "operator": op,
            "quadratic": q.to_dict(),
            "f_value": fval,
        }
        return Generated(grid.sample(q), GridFunction(grid, np.full(grid.shape, fval)), _meta(name, params, meta))
    if name == "small-perturbation":
        delta = float(params.get("delta", 1e-3))
        shape = params.get("shape", "x1x2")
        if shape not in _SHAPES:
            raise ConfigError(f"unknown perturbation shape {shape!r}; known: {sorted(_SHAPES)}")
        if n < 2 and shape != "|x|^2":
            raise ConfigError(f"shape {shape!r} needs dim >= 2")
        w, hess = _SHAPES[shape]
        op_name, F = _operator_from(params, "trace")
        fval = float(F(delta * hess(n)))
        meta = {"closed_form": f"u = delta * {shape}", "operator": op_name, "f_value": fval}
        return Generated(
            GridFunction(grid, delta * w(x)), GridFunction(grid, np.full(grid.shape, fval)), _meta(name, params, meta)
        )
    if name == "paraboloid-family":
        b = float(params.get("b", 2.0))
        z0 = np.asarray(params.get("z0", [0.0] * n), dtype=float)
        ell = np.asarray(params.get("l", [0.0] * n), dtype=float)
        c = float(params.get("c", 0.0))
        if z0.size != n or ell.size != n:
            raise ConfigError("z0 and l must have length dim")
        op_name, F = _operator_from(params, "trace")
        q = Quadratic(c + 0.5 * b * z0 @ z0, ell - b * z0, 0.5 * b * np.eye(n))
        fval = float(F(b * np.eye(n)))
        meta = {
            "closed_form": "u = (b/2)|x - z0|^2 + l.x + c",
            "operator": op_name,
            "quadratic": q.to_dict(),
            "f_value": fval,
        }
        return Generated(grid.sample(q), GridFunction(grid, np.full(grid.shape, fval)), _meta(name, params, meta))
    if name == "c11-crease":
        delta = float(params.get("delta", 1e-2))
        x1 = x[..., 0]
        meta = {
            "closed_form": "u = delta x1|x1|, f = 2 delta sign(x1)",
            "operator": "trace",
            "crease": "x1 = 0",
        }
        return Generated(
            GridFunction(grid, delta * x1 * np.abs(x1)),
            GridFunction(grid, 2.0 * delta * np.sign(x1)),
            _meta(name, params, meta),
        )
    raise ConfigError(f"unknown generator {name!r}")


GENERATORS = ("radial-sigma-k", "small-perturbation", "paraboloid-family", "c11-crease")


def _meta(name: str, params: dict, extra: dict) -> dict:
    return {"generator": name, "params": params, **extra}


def nodal_residual(F: OperatorSpec, u: GridFunction, f: GridFunction, margin: int = 1) -> np.ndarray:
    """``|F(D^2 u) - f|`` at domain nodes with a ``margin``-node stencil (NaN elsewhere)."""
    H = hessian_field(u)
    ok = u.domain.members & u.grid.margin_mask(margin).members
    out = np.full(u.grid.shape, np.nan)
    out[ok] = np.abs(F(H[ok]) - f.values[ok])
    return out


# ---------------------------------------------------------------------------
# relaxation solver
# ---------------------------------------------------------------------------


@dataclass
class SolveResult:
    u: GridFunction
    converged: bool
    iterations: int
    residual: float
    dt: float

    def to_dict(self) -> dict:
        return {"converged": self.converged, "iterations": self.iterations, "residual": self.residual, "dt": self.dt}


_KIND = {"trace": 0, "pucci-minus": 1, "pucci-plus": 2}


@numba.njit(cache=True, inline="always")
def _pucci_term(e, kind, lam, Lam):  # pragma: no cover
    if kind == 1:
        return lam * e if e > 0 else Lam * e
    return Lam * e if e > 0 else lam * e


@numba.njit(cache=True)
def _relax_kernel(u, interior, axis_off, diag_p, diag_m, f, h2, kind, lam, Lam, dt, tol, max_iter):  # pragma: no cover
    m = interior.shape[0]
    n = axis_off.shape[0]
    r = np.empty(m)
    ax = np.empty(n)
    prev = np.inf
    growth = 0
    it = 0
    sup = np.inf
    while it < max_iter:
        sup = 0.0
        for q in range(m):
            i = interior[q]
            c = u[i]
            tr = 0.0
            for a in range(n):
                d = (u[i + axis_off[a]] - 2.0 * c + u[i - axis_off[a]]) / h2
                ax[a] = d
                tr += d
            if kind == 0:
                val = tr
            elif lam == Lam:
                val = lam * tr
            else:
                # extremum over orthonormal frames drawn from the stencil directions:
                # the axis frame, and for each coordinate plane its two diagonals
                # plus the remaining axes; every term is monotone in the neighbours
                val = 0.0
                for a in range(n):
                    val += _pucci_term(ax[a], kind, lam, Lam)
                k = 0
                for a in range(n):
                    for b in range(a + 1, n):
                        dp = (u[i + diag_p[k]] - 2.0 * c + u[i - diag_p[k]]) / (2.0 * h2)
                        dm = (u[i + diag_m[k]] - 2.0 * c + u[i - diag_m[k]]) / (2.0 * h2)
                        cand = _pucci_term(dp, kind, lam, Lam) + _pucci_term(dm, kind, lam, Lam)
                        for e in range(n):
                            if e != a and e != b:
                                cand += _pucci_term(ax[e], kind, lam, Lam)
                        if (kind == 1 and cand < val) or (kind == 2 and cand > val):
                            val = cand
                        k += 1
            r[q] = val - f[q]
            if abs(r[q]) > sup:
                sup = abs(r[q])
        if sup <= tol:
            return it, sup, 0
        if sup > prev:
            growth += 1
            if growth >= 100:
                return it, sup, 2
        else:
            growth = 0
        prev = sup
        for q in range(m):
            u[interior[q]] += dt * r[q]
        it += 1
    return it, sup, 1


def solver_interior(grid: Grid, domain: Mask) -> Mask:
    """Domain nodes whose axis and diagonal neighbours all lie in the domain."""
    d = domain.members
    ok = d & grid.margin_mask(1).members
    n = grid.dim
    steps = [s for s in np.ndindex(*(3,) * n) if any(v != 1 for v in s)]
    pad = np.pad(d, 1, constant_values=False)
    for s in steps:
        sl = tuple(slice(1 + (v - 1), 1 + (v - 1) + grid.resolution) for v in s)
        ok &= pad[sl]
    return Mask(grid, ok)


def relax_solve(
    F: OperatorSpec,
    f: GridFunction | None,
    boundary: GridFunction,
    tol: float = 1e-8,
    max_iter: int = 2_000_000,
    dt: float | None = None,
) -> SolveResult:
    """Pseudo-time marching ``u <- u + dt (F(D^2 u) - f)`` with boundary values held fixed.

    Trace and Pucci operators run in a compiled loop on a monotone wide stencil:
    the Pucci value is the minimum (``M-``) or maximum (``M+``) over orthonormal
    frames built from axis and 45 degree diagonal directions of the summed
    one-dimensional Pucci terms.  It is exact whenever the Hessian's eigenvectors
    form one of those frames, and it satisfies a discrete comparison principle.
    Other operators use a vectorised fallback with the central-difference
    Hessian.  The default step is ``h^2 / (2 Lam n^2)``.
    """
    grid = boundary.grid
    n = grid.dim
    h2 = grid.h**2
    Lam = F.Lam if F.Lam is not None else 1.0
    lam = F.lam if F.lam is not None else 1.0
    if dt is None:
        dt = h2 / (2.0 * Lam * n * n)
    inner = solver_interior(grid, boundary.domain)
    u = boundary.values.copy()
    u[~boundary.domain.members] = 0.0
    fv = np.zeros(grid.shape) if f is None else f.values
    strides = np.array([grid.resolution ** (n - 1 - a) for a in range(n)], dtype=np.int64)
    interior_lin = np.flatnonzero(inner.members.ravel()).astype(np.int64)
    base = F.name.split(":")[0]
    if base in _KIND:
        axis_off = strides.copy()
        pairs = [(a, b) for a in range(n) for b in range(a + 1, n)]
        diag_p = np.array([strides[a] + strides[b] for a, b in pairs], dtype=np.int64)
        diag_m = np.array([strides[a] - strides[b] for a, b in pairs], dtype=np.int64)
        flat = u.ravel()
        it, res, code = _relax_kernel(
            flat,
            interior_lin,
            axis_off,
            diag_p,
            diag_m,
            fv.ravel()[interior_lin].copy(),
            h2,
            _KIND[base],
            float(lam),
            float(Lam),
            float(dt),
            float(tol),
            int(max_iter),
        )
        u = flat.reshape(grid.shape)
    else:
        it, res, code = _relax_numpy(F, u, inner, fv, grid, dt, tol, max_iter)
    if code == 2:
        raise DivergenceError(f"residual grew for 100 consecutive iterations (iteration {it}, residual {res})")
    return SolveResult(boundary.with_values(u), code == 0, int(it), float(res), float(dt))


def _relax_numpy(F, u, inner, fv, grid, dt, tol, max_iter):
    sel = inner.members
    growth = 0
    prev = np.inf
    res = np.inf
    for it in range(max_iter):
        H = hessian_field(GridFunction(grid, u, Mask(grid, np.ones(grid.shape, dtype=bool))))[sel]
        r = F(H) - fv[sel]
        res = float(np.max(np.abs(r))) if r.size else 0.0
        if res <= tol:
            return it, res, 0
        growth = growth + 1 if res > prev else 0
        if growth >= 100:
            return it, res, 2
        prev = res
        u[sel] += dt * r
    return max_iter, res, 1


# ---------------------------------------------------------------------------
# configs and runs
# ---------------------------------------------------------------------------

SCHEMA_VERSION = io.SCHEMA_VERSION
CHECKS = ("measure", "density", "covering", "decay", "weak-leps", "weak-harnack", "holder", "barrier", "flatness")


@dataclass
class ExperimentConfig:
    generator: str
    generator_params: dict = field(default_factory=dict)
    operator: str = "trace"
    ellipticity: EllipticityParams = field(default_factory=lambda: EllipticityParams(1.0, 1.0))
    flatness: FlatnessConfig = field(default_factory=FlatnessConfig)
    dim: int = 2
    resolution: int = 65
    checks: list[dict] = field(default_factory=list)
    seed: int = 0
    output: str = "out"
    name: str = "experiment"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        try:
            gen = d["generator"]
            checks = [c if isinstance(c, dict) else {"check": c} for c in d.get("checks", [])]
            for c in checks:
                if c.get("check") not in CHECKS:
                    raise ConfigError(f"unknown check {c.get('check')!r}; known: {list(CHECKS)}")
            grid = d.get("grid", {})
            return cls(
                generator=gen["name"] if isinstance(gen, dict) else str(gen),
                generator_params=dict(gen.get("params", {})) if isinstance(gen, dict) else {},
                operator=d.get("operator", "trace"),
                ellipticity=EllipticityParams.from_dict(d.get("ellipticity", {"lam": 1.0, "Lam": 1.0})),
                flatness=FlatnessConfig.from_dict(d.get("flatness", {})),
                dim=int(grid.get("dim", 2)),
                resolution=int(grid.get("resolution", 65)),
                checks=checks,
                seed=int(d.get("seed", 0)),
                output=str(d.get("output", "out")),
                name=str(d.get("name", "experiment")),
            )
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "generator": {"name": self.generator, "params": self.generator_params},
            "operator": self.operator,
            "ellipticity": self.ellipticity.to_dict(),
            "flatness": self.flatness.to_dict(),
            "grid": {"dim": self.dim, "resolution": self.resolution},
            "checks": self.checks,
            "seed": self.seed,
            "output": self.output,
        }


def run_check(spec: dict, u: GridFunction, f: GridFunction, cfg: ExperimentConfig) -> Report:
    """Run one named check with its parameters from ``spec``."""
    grid = u.grid
    p_ell = cfg.ellipticity
    dc = derive_constants(grid.dim, p_ell, spec.get("sigma", 0.5))
    kind = spec["check"]
    if kind == "measure":
        a = float(spec.get("opening", 1.0))
        V = grid.ball(float(spec.get("centers_radius", 0.25)))
        rhs = f if spec.get("use_rhs", False) else None
        return verify_measure_lemma(u, a, V, dc, p_ell, rhs)
    if kind == "density":
        return verify_density(u, dc, p_ell, f)
    if kind == "covering":
        E = grid.ball(float(spec.get("E_radius", 0.125)))
        F = grid.ball(float(spec.get("F_radius", 0.5)))
        return covering_step(E, F, float(spec.get("mu", dc.mu)))
    if kind == "decay":
        return decay_iteration(u, dc, p_ell, f, int(spec.get("kmax", 1)))
    if kind == "weak-leps":
        return weak_Leps(u, dc, p_ell, spec.get("levels"), float(spec.get("t_shift", 0.0)))
    if kind == "weak-harnack":
        return weak_harnack(u, f, dc, p_ell)
    if kind == "holder":
        return holder_decay(u, dc, p_ell, f)
    if kind == "barrier":
        return barrier_check(
            spec.get("x0", [0.0] * grid.dim),
            float(spec.get("r", 0.5)),
            float(spec.get("opening", 1.0)),
            dc,
            p_ell,
            int(spec.get("samples", 10_000)),
            seed=cfg.seed,
        )
    if kind == "flatness":
        F = make_operator(cfg.operator, p_ell)
        res = classify_singular_set(u, f, F, cfg.flatness, int(spec.get("stride", cfg.flatness.stride)))
        return Report(
            check="flatness",
            hypotheses={},
            lhs=res.measure,
            rhs=float("nan"),
            verdict="pass",
            details={
                "points": res.points,
                "undetermined": res.undetermined,
                "singular_measure": res.measure,
                "cauchy_C": res.cauchy_C,
                "config": cfg.flatness.to_dict(),
            },
        )
    raise ConfigError(f"unknown check {kind!r}")


def run(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> tuple[dict, int]:
    """Generator, then each check; writes ``report.json`` plus a CSV per series.

    Returns the report and the exit code (0 unless some check failed).
    """
    out = Path(out_dir if out_dir is not None else cfg.output)
    try:
        grid = Grid(cfg.dim, cfg.resolution)
    except ValueError as exc:
        raise StageError("grid", exc) from exc
    try:
        gen = generate(cfg.generator, cfg.generator_params, grid)
    except Exception as exc:
        raise StageError("generate", exc) from exc
    reports = []
    for spec in cfg.checks:
        try:
            reports.append(run_check(spec, gen.u, gen.f, cfg))
        except Exception as exc:
            raise StageError(spec["check"], exc) from exc
    failed = [r.check for r in reports if r.verdict == "fail"]
    doc = {
        "schema_version": SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "generator": gen.metadata,
        "checks": [r.to_dict() for r in reports],
        "failed": failed,
        "exit_code": 1 if failed else 0,
    }
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(doc, out / "report.json")
    for i, r in enumerate(reports):
        if r.series:
            io.write_series_csv(r.series, out / f"{i:02d}-{r.check}-series.csv")
    return doc, doc["exit_code"]
