"""Quadratic approximation at shrinking scales and pointwise C^{2,alpha} classification.

At a point ``x0`` the classifier fits a quadratic at each scale
``s_k = eta^k r0``, shifts its Hessian by a multiple of the identity so that the
equation ``F(D^2 P_k, DP_k(0), P_k(0), x0) = f(x0)`` holds exactly, and tracks

* the residual ratio ``||u - P_k||_{L^inf(B_{s_k})} / s_k^(2+alpha)``;
* the increment ratio ``||P_k - P_{k-1}||_{s_k} / s_k^(2+alpha)``.

Quadratics returned by the fitting routines are in coordinates centred at the
fit center; :meth:`Quadratic.shifted` converts them to global coordinates.
"""

from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np
from scipy.ndimage import map_coordinates
from scipy.signal import fftconvolve

from .grid import Grid, GridError, GridFunction, Mask
from .operators import OperatorSpec, PreconditionError, make_operator
from .paraboloid import Quadratic


class BracketError(RuntimeError):
    """Raised when a monotone root bracket cannot be established."""


@dataclass(frozen=True)
class FlatnessConfig:
    alpha: float = 0.5
    eta: float = 0.5
    r0: float = 0.25
    delta: float = 1e-2
    kmax: int = 30
    fit_tol: float = 1e-9
    cauchy_C: float | None = None
    stride: int = 1

    def __post_init__(self):
        for name in ("alpha", "eta", "r0"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.kmax < 0 or self.stride < 1:
            raise ValueError("kmax must be >= 0 and stride >= 1")

    def scales(self, grid: Grid) -> np.ndarray:
        """``eta^k r0`` for ``k = 0..kmax`` while at least ``8h``."""
        out = []
        for k in range(self.kmax + 1):
            s = self.eta**k * self.r0
            if s < 8.0 * grid.h * (1 - 1e-12):
                break
            out.append(s)
        if not out:
            raise GridError(f"r0={self.r0} is below the resolution floor 8h={8 * grid.h}")
        return np.array(out)

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "FlatnessConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class PointClassification:
    index: tuple[int, ...]
    verdict: str  # "regular" or "undetermined-at-resolution"
    depth: int
    scales: list[float]
    residuals: list[float]
    residual_ratios: list[float]
    cauchy_ratios: list[float]
    cauchy_C: float
    limit: Quadratic | None
    seed_shift: float
    reasons: list[str] = field(default_factory=list)

    @property
    def regular(self) -> bool:
        return self.verdict == "regular"

    def to_dict(self) -> dict:
        return {
            "index": list(self.index),
            "verdict": self.verdict,
            "depth": self.depth,
            "scales": self.scales,
            "residuals": self.residuals,
            "residual_ratios": self.residual_ratios,
            "cauchy_ratios": self.cauchy_ratios,
            "cauchy_C": self.cauchy_C,
            "limit": None if self.limit is None else self.limit.to_dict(),
            "seed_shift": self.seed_shift,
            "reasons": self.reasons,
        }


# ---------------------------------------------------------------------------
# monotone root finding
# ---------------------------------------------------------------------------


def _bisect(g, lo, hi, tol=1e-10, max_iter=200):
    """Vectorised bisection for increasing ``g`` with ``g(lo) <= 0 <= g(hi)``."""
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    best = 0.5 * (lo + hi)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        gm = g(mid)
        best = mid
        if np.all(np.abs(gm) <= 0.01 * tol) or np.all(hi - lo <= 4 * np.finfo(float).eps * np.maximum(1, np.abs(mid))):
            break
        neg = gm < 0
        lo = np.where(neg, mid, lo)
        hi = np.where(neg, hi, mid)
    return best


def _expanding_bracket(g, half_width, max_doublings=80):
    w = np.array(half_width, dtype=float)
    for _ in range(max_doublings):
        glo, ghi = g(-w), g(w)
        bad = (glo > 0) | (ghi < 0)
        if not np.any(bad):
            return -w, w
        w = np.where(bad, 2 * w, w)
    raise BracketError("could not bracket the root; the operator may not be elliptic here")


def initial_quadratic(
    F: OperatorSpec, f0: float, n: int, lam: float | None = None, tol: float = 1e-10
) -> tuple[float, Quadratic]:
    """Solve ``F(tI, 0, 0, 0) = f0`` by bisection on ``[-|f0|/(n lam), |f0|/(n lam)]``.

    ``lam`` defaults to ``F.lam``.  Without any ellipticity constant the bracket
    is grown from ``|f0|/n`` until it changes sign.  Returns ``t`` and
    ``P0 = (t/2)|x|^2``.
    """
    lam = F.lam if lam is None else lam
    eye = np.eye(n)

    def g(s):
        s = np.atleast_1d(s)
        return F(s[:, None, None] * eye) - f0

    pad = tol
    if lam is not None:
        B = abs(f0) / (n * lam)
        lo, hi = -B - pad, B + pad
        if g(lo)[0] > tol or g(hi)[0] < -tol:
            raise BracketError(
                f"F(sI) - f0 does not change sign on [{lo}, {hi}]; is {F.name} elliptic with lambda={lam}?"
            )
    else:
        lo, hi = (x[0] for x in _expanding_bracket(g, [abs(f0) / n + pad]))
    if g(np.array([0.0]))[0] == 0.0:
        t = 0.0
    else:
        t = float(_bisect(g, [lo], [hi], tol)[0])
    return t, Quadratic(0.0, np.zeros(n), 0.5 * t * eye)


def _compat_shift(F, H, p, z, x, f0, scale, lam, tol=1e-10):
    """Batched ``a`` with ``F(scale (H + aI), p, z, x) = f0``."""
    n = H.shape[-1]
    eye = np.eye(n)

    def g(a):
        return F(scale * (H + a[:, None, None] * eye), p, z, x) - f0

    r0 = g(np.zeros(H.shape[0]))
    done = r0 == 0
    width = np.abs(r0) / (n * (lam if lam else 1.0) * scale) + tol
    lo, hi = _expanding_bracket(g, width)
    a = _bisect(g, lo, hi, tol)
    return np.where(done, 0.0, a)


def compat_adjust(
    F: OperatorSpec,
    P: Quadratic,
    f0: float,
    scale: float = 1.0,
    x: Sequence[float] | None = None,
    lam: float | None = None,
) -> float:
    """Shift ``a`` with ``F(scale (D^2 P + aI), DP(0), P(0), x) = f0``.

    The bracket starts at ``|residual|/(n lam scale)`` and widens if needed.
    """
    n = P.dim
    x = np.zeros(n) if x is None else np.asarray(x, dtype=float)
    lam = F.lam if lam is None else lam
    a = _compat_shift(
        F, P.hessian[None], P.b[None], np.array([P.a0]), x[None], f0, scale, lam
    )
    return float(a[0])


# ---------------------------------------------------------------------------
# quadratic fits
# ---------------------------------------------------------------------------


def _monomials(n: int) -> list[tuple[int, ...]]:
    out = [(-1, -1)]
    out += [(i, -1) for i in range(n)]
    out += [(i, j) for i in range(n) for j in range(i, n)]
    return out


def _design(y: np.ndarray) -> np.ndarray:
    """Monomial design matrix ``[1, y_i, y_i y_j (i <= j)]``."""
    cols = []
    for i, j in _monomials(y.shape[1]):
        if i < 0:
            cols.append(np.ones(y.shape[0]))
        elif j < 0:
            cols.append(y[:, i])
        else:
            cols.append(y[:, i] * y[:, j])
    return np.stack(cols, axis=1)


def _coef_to_quadratic(c: np.ndarray, s: float, n: int) -> Quadratic:
    """Coefficients in the scaled variable ``y/s`` to a quadratic in ``y``."""
    b = np.zeros(n)
    C = np.zeros((n, n))
    for m, (i, j) in enumerate(_monomials(n)):
        if i < 0:
            continue
        if j < 0:
            b[i] = c[m] / s
        elif i == j:
            C[i, i] = c[m] / s**2
        else:
            C[i, j] = C[j, i] = 0.5 * c[m] / s**2
    return Quadratic(c[0], b, C)


def _quadratic_to_coef(P: Quadratic, s: float) -> np.ndarray:
    n = P.dim
    out = []
    for i, j in _monomials(n):
        if i < 0:
            out.append(P.a0)
        elif j < 0:
            out.append(P.b[i] * s)
        elif i == j:
            out.append(P.C[i, i] * s**2)
        else:
            out.append(2.0 * P.C[i, j] * s**2)
    return np.array(out)


def fit_quadratic(u: GridFunction, center: Sequence[float], r: float) -> tuple[Quadratic, float]:
    """Least-squares quadratic over the nodes of ``B_r(center)`` and its L^inf residual.

    The quadratic is in coordinates relative to ``center``.
    """
    grid = u.grid
    n = grid.dim
    c = np.asarray(center, dtype=float)
    mask = grid.ball(r, c).members & u.domain.members
    if np.count_nonzero(mask) < 3**n:
        raise GridError(f"B_{r}({c.tolist()}) holds fewer than {3**n} nodes")
    y = grid.coords[mask] - c
    A = _design(y / r)
    coef, *_ = np.linalg.lstsq(A, u.values[mask], rcond=None)
    resid = float(np.max(np.abs(u.values[mask] - A @ coef)))
    return _coef_to_quadratic(coef, r, n), resid


@dataclass(frozen=True)
class _Stencil:
    offsets: np.ndarray  # (K, n) integer
    design: np.ndarray  # (K, ncoef) in scaled variables
    pinv: np.ndarray  # (ncoef, K)
    radius_nodes: int


@functools.lru_cache(maxsize=64)
def _stencil(n: int, h: float, s: float) -> _Stencil:
    R = int(math.floor(s / h * (1 + 1e-12)))
    rng = np.arange(-R, R + 1)
    offs = np.stack(np.meshgrid(*([rng] * n), indexing="ij"), -1).reshape(-1, n)
    keep = np.sum((offs * h) ** 2, axis=1) <= s * s * (1 + 1e-12)
    offs = offs[keep]
    A = _design(offs * h / s)
    return _Stencil(offs, A, np.linalg.pinv(A), R)


def _batch_coefficients(u: GridFunction, points: np.ndarray, st: _Stencil) -> np.ndarray:
    """Least-squares coefficients at many centers; FFT correlation for large batches."""
    grid = u.grid
    vals = np.where(u.domain.members, u.values, 0.0)
    m, K = points.shape[0], st.offsets.shape[0]
    if m * K <= 20_000_000:
        strides = np.array([grid.resolution ** (grid.dim - 1 - a) for a in range(grid.dim)])
        lin = points @ strides
        window = vals.ravel()[lin[:, None] + (st.offsets @ strides)[None, :]]
        return window @ st.pinv.T
    R = st.radius_nodes
    shape = (2 * R + 1,) * grid.dim
    out = np.empty((m, st.pinv.shape[0]))
    idx = tuple((st.offsets + R).T)
    pts = tuple(points.T)
    for j in range(st.pinv.shape[0]):
        kern = np.zeros(shape)
        kern[idx] = st.pinv[j]
        # correlation = convolution with the reflected kernel
        corr = fftconvolve(vals, kern[(slice(None, None, -1),) * grid.dim], mode="same")
        out[:, j] = corr[pts]
    return out


@numba.njit(cache=True, parallel=False)
def _linf_residual(flat, lin_points, lin_offs, design, coef, out):  # pragma: no cover - compiled
    m = lin_points.shape[0]
    K = lin_offs.shape[0]
    nc = design.shape[1]
    for i in range(m):
        worst = 0.0
        base = lin_points[i]
        for k in range(K):
            pred = 0.0
            for j in range(nc):
                pred += design[k, j] * coef[i, j]
            err = abs(flat[base + lin_offs[k]] - pred)
            if err > worst:
                worst = err
        out[i] = worst


def _batch_residuals(u: GridFunction, points: np.ndarray, st: _Stencil, coef: np.ndarray) -> np.ndarray:
    grid = u.grid
    strides = np.array([grid.resolution ** (grid.dim - 1 - a) for a in range(grid.dim)], dtype=np.int64)
    out = np.empty(points.shape[0])
    _linf_residual(
        np.ascontiguousarray(u.values.ravel()),
        (points @ strides).astype(np.int64),
        (st.offsets @ strides).astype(np.int64),
        np.ascontiguousarray(st.design),
        np.ascontiguousarray(coef),
        out,
    )
    return out


def _coef_norm(c: np.ndarray, n: int) -> np.ndarray:
    """``||P||_s`` from coefficients in the scaled variable ``y/s`` (batched)."""
    mons = _monomials(n)
    lin = [m for m, (i, j) in enumerate(mons) if i >= 0 and j < 0]
    quad = [(m, i, j) for m, (i, j) in enumerate(mons) if j >= 0]
    C = np.zeros(c.shape[:-1] + (n, n))
    for m, i, j in quad:
        if i == j:
            C[..., i, i] = c[..., m]
        else:
            C[..., i, j] = C[..., j, i] = 0.5 * c[..., m]
    spec = np.max(np.abs(np.linalg.eigvalsh(C)), axis=-1)
    return np.abs(c[..., 0]) + np.linalg.norm(c[..., lin], axis=-1) + spec


def _rescale_coef(c: np.ndarray, ratio: float, n: int) -> np.ndarray:
    """Coefficients for variable ``y/s`` to variable ``y/(ratio s)``."""
    out = c.copy()
    for m, (i, j) in enumerate(_monomials(n)):
        if i < 0:
            continue
        out[..., m] *= ratio if j < 0 else ratio**2
    return out


def _hessian_from_coef(c: np.ndarray, s: float, n: int):
    H = np.zeros(c.shape[:-1] + (n, n))
    b = np.zeros(c.shape[:-1] + (n,))
    for m, (i, j) in enumerate(_monomials(n)):
        if i < 0:
            continue
        if j < 0:
            b[..., i] = c[..., m] / s
        elif i == j:
            H[..., i, i] = 2.0 * c[..., m] / s**2
        else:
            H[..., i, j] = H[..., j, i] = c[..., m] / s**2
    return H, b


def _add_identity(c: np.ndarray, a: np.ndarray, s: float, n: int) -> np.ndarray:
    """Add ``(a/2)|y|^2`` to scaled coefficients."""
    out = c.copy()
    for m, (i, j) in enumerate(_monomials(n)):
        if i >= 0 and i == j:
            out[..., m] += 0.5 * a * s**2
    return out


# ---------------------------------------------------------------------------
# rescaling
# ---------------------------------------------------------------------------


def rescale_v(
    u: GridFunction,
    P: Quadratic,
    r: float,
    alpha: float,
    center: Sequence[float] | None = None,
) -> GridFunction:
    """``v(x) = (u(c + r x) - P(r x)) / r^(2+alpha)`` on the same grid.

    ``u - P(. - c)`` is interpolated multilinearly, so ``v`` vanishes exactly
    when ``u`` agrees with ``P`` at the nodes.
    """
    grid = u.grid
    if r < 8.0 * grid.h * (1 - 1e-12):
        raise GridError(f"r={r} is below the resampling floor 8h={8 * grid.h}")
    c = np.zeros(grid.dim) if center is None else np.asarray(center, dtype=float)
    diff = u.values - P(grid.coords - c)
    pos = (c + r * grid.coords + 1.0) / grid.h
    coords = np.moveaxis(pos, -1, 0)
    v = map_coordinates(diff, coords, order=1, mode="nearest")
    return GridFunction(grid, v / r ** (2.0 + alpha))


# ---------------------------------------------------------------------------
# iteration
# ---------------------------------------------------------------------------


def _recentered_operator(F: OperatorSpec, Q: Quadratic, x0) -> OperatorSpec:
    """``G(M) = F(M + D^2 Q, DQ(0), Q(0), x0) - F(D^2 Q, DQ(0), Q(0), x0)``."""
    HQ, bQ, zQ = Q.hessian, Q.b, Q.a0
    x0 = np.asarray(x0, dtype=float)
    base = F(HQ, bQ, zQ, x0)

    def G(M, p, z, x):
        batch = M.shape[:-2]
        return F(M + HQ, np.broadcast_to(bQ, batch + bQ.shape), np.full(batch, zQ), np.broadcast_to(x0, batch + x0.shape)) - base

    return OperatorSpec(f"recentered:{F.name}", G, lam=F.lam, Lam=F.Lam)


@dataclass
class _BatchResult:
    scales: np.ndarray
    residuals: np.ndarray  # (m, K)
    ratios: np.ndarray  # (m, K)
    cauchy: np.ndarray  # (m, K); column 0 is 0
    seed_shift: np.ndarray  # (m,)
    final_coef: np.ndarray  # (m, ncoef) in variable y/s_last
    regular: np.ndarray  # (m,)
    reasons: list[list[str]]


def _iterate_batch(u, f, F, cfg, points, C_cfg) -> _BatchResult:
    grid = u.grid
    n = grid.dim
    scales = cfg.scales(grid)
    m = points.shape[0]
    X0 = grid.coords[tuple(points.T)]
    f0 = f.values[tuple(points.T)] if f is not None else np.zeros(m)
    K = scales.size
    res = np.zeros((m, K))
    ratio = np.zeros((m, K))
    cauchy = np.zeros((m, K))
    seed = np.zeros(m)
    prev = None
    for k, s in enumerate(scales):
        st = _stencil(n, grid.h, float(s))
        coef = _batch_coefficients(u, points, st)
        H, b = _hessian_from_coef(coef, s, n)
        a = _compat_shift(F, H, b, coef[:, 0], X0, f0, 1.0, F.lam)
        if k == 0:
            seed = a
        coef = _add_identity(coef, a, s, n)
        res[:, k] = _batch_residuals(u, points, st, coef)
        ratio[:, k] = res[:, k] / s ** (2.0 + cfg.alpha)
        if prev is not None:
            prev_here = _rescale_coef(prev, s / scales[k - 1], n)
            cauchy[:, k] = _coef_norm(coef - prev_here, n) / s ** (2.0 + cfg.alpha)
        prev = coef
    reasons: list[list[str]] = [[] for _ in range(m)]
    regular = np.ones(m, dtype=bool)
    bad_ratio = np.any(ratio > 1.0, axis=1)
    bad_cauchy = np.any(cauchy > C_cfg, axis=1)
    if K >= 2:
        # local decay order of the residual between the two finest scales;
        # flag when it drops below 2 + alpha/2 (C^{2,alpha} gives >= 2 + alpha,
        # a second-derivative jump gives 2)
        growth = (ratio[:, -1] > ratio[:, -2] * cfg.eta ** (-0.5 * cfg.alpha)) & (res[:, -1] > cfg.fit_tol)
    else:
        growth = np.zeros(m, dtype=bool)
    for i in np.flatnonzero(bad_ratio | bad_cauchy | growth):
        if bad_ratio[i]:
            reasons[i].append("residual ratio above 1")
        if bad_cauchy[i]:
            reasons[i].append("increment bound exceeded")
        if growth[i]:
            reasons[i].append("residual ratio grows at the finest scale")
    regular &= ~(bad_ratio | bad_cauchy | growth)
    return _BatchResult(scales, res, ratio, cauchy, seed, prev, regular, reasons)


def _smooth_fixture(grid: Grid) -> tuple[GridFunction, GridFunction]:
    """Harmonic cubic with unit sup norm on the unit ball (trace operator, f = 0)."""
    x = grid.coords
    if grid.dim == 1:
        u = x[..., 0] ** 3
        return GridFunction(grid, u), GridFunction(grid, 6.0 * x[..., 0])
    u = x[..., 0] ** 3 - 3.0 * x[..., 0] * x[..., 1] ** 2
    return GridFunction(grid, u), GridFunction(grid, np.zeros(grid.shape))


@functools.lru_cache(maxsize=32)
def _calibrated(dim: int, resolution: int, alpha: float, eta: float, r0: float, kmax: int) -> float:
    grid = Grid(dim, resolution)
    cfg = FlatnessConfig(alpha=alpha, eta=eta, r0=r0, kmax=kmax, cauchy_C=math.inf)
    u, f = _smooth_fixture(grid)
    pts = candidate_points(grid, cfg, stride=max(1, (resolution - 1) // 8))
    out = _iterate_batch(u, f, make_operator("trace"), cfg, pts, math.inf)
    return float(out.cauchy.max())


def calibrate_cauchy_constant(grid: Grid, cfg: FlatnessConfig, factor: float = 10.0) -> float:
    """``factor`` times the largest increment ratio seen on a smooth harmonic fixture."""
    observed = _calibrated(grid.dim, grid.resolution, cfg.alpha, cfg.eta, cfg.r0, cfg.kmax)
    return factor * max(observed, 1e-12)


def candidate_points(grid: Grid, cfg: FlatnessConfig, stride: int | None = None) -> np.ndarray:
    """Nodes ``x0`` with ``|x0| + r0 <= 1`` on the stride lattice through the center node."""
    stride = cfg.stride if stride is None else stride
    c = grid.center_index[0]
    keep = np.zeros(grid.shape, dtype=bool)
    on_lattice = np.ones(grid.shape, dtype=bool)
    for axis in range(grid.dim):
        idx = np.arange(grid.resolution)
        sel = (idx - c) % stride == 0
        shape = [1] * grid.dim
        shape[axis] = grid.resolution
        on_lattice &= sel.reshape(shape)
    keep = on_lattice & (grid.radius + cfg.r0 <= 1.0 + 1e-12)
    return np.argwhere(keep)


def _check_point(grid: Grid, idx, cfg: FlatnessConfig):
    x0 = grid.point(idx)
    R = int(math.floor(cfg.r0 / grid.h * (1 + 1e-12)))
    inside = all(R <= i <= grid.resolution - 1 - R for i in idx)
    if not inside or np.linalg.norm(x0) + cfg.r0 > 1.0 + 1e-12:
        raise PreconditionError(f"point {list(idx)} is not interior with margin r0={cfg.r0}")


def caffarelli_iterate(
    u: GridFunction,
    f: GridFunction | None,
    F: OperatorSpec,
    x0: Sequence[float],
    cfg: FlatnessConfig = FlatnessConfig(),
) -> PointClassification:
    """Classify the node nearest ``x0``.

    The base fit ``Q`` at scale ``r0`` recenters the operator; the seed shift is
    the root of ``G(tI) = f(x0) - F(D^2 Q, ...)`` from :func:`initial_quadratic`.
    """
    grid = u.grid
    idx = grid.nearest_index(x0)
    _check_point(grid, idx, cfg)
    C_cfg = cfg.cauchy_C if cfg.cauchy_C is not None else calibrate_cauchy_constant(grid, cfg)
    pts = np.array([idx])
    out = _iterate_batch(u, f, F, cfg, pts, C_cfg)
    n = grid.dim
    xg = grid.point(idx)
    Q, _ = fit_quadratic(u, xg, float(out.scales[0]))
    G = _recentered_operator(F, Q, xg)
    fx = float(f.values[idx]) if f is not None else 0.0
    t, _ = initial_quadratic(G, fx - F(Q.hessian, Q.b, Q.a0, xg), n)
    limit = _coef_to_quadratic(out.final_coef[0], float(out.scales[-1]), n).shifted(xg)
    return PointClassification(
        index=tuple(int(i) for i in idx),
        verdict="regular" if out.regular[0] else "undetermined-at-resolution",
        depth=int(out.scales.size - 1),
        scales=out.scales.tolist(),
        residuals=out.residuals[0].tolist(),
        residual_ratios=out.ratios[0].tolist(),
        cauchy_ratios=out.cauchy[0, 1:].tolist(),
        cauchy_C=C_cfg,
        limit=limit,
        seed_shift=t,
        reasons=out.reasons[0],
    )


@dataclass
class SingularSetResult:
    mask: Mask
    measure: float
    points: int
    undetermined: int
    cauchy_C: float
    config: FlatnessConfig
    batch: _BatchResult
    point_indices: np.ndarray

    def limit(self, i: int) -> Quadratic:
        """Limit quadratic of the ``i``-th candidate point, in global coordinates."""
        grid = self.mask.grid
        p = self.point_indices[i]
        s_last = float(self.batch.scales[-1])
        return _coef_to_quadratic(self.batch.final_coef[i], s_last, grid.dim).shifted(grid.point(p))

    def limit_hessians(self) -> np.ndarray:
        """Hessians of all limit quadratics, shape ``(points, n, n)``."""
        H, _ = _hessian_from_coef(self.batch.final_coef, float(self.batch.scales[-1]), self.mask.grid.dim)
        return H

    def classifications(self) -> list[dict]:
        b = self.batch
        out = []
        for i, idx in enumerate(self.point_indices):
            out.append(
                {
                    "index": [int(v) for v in idx],
                    "verdict": "regular" if b.regular[i] else "undetermined-at-resolution",
                    "residual_ratios": b.ratios[i].tolist(),
                    "cauchy_ratios": b.cauchy[i, 1:].tolist(),
                    "limit": self.limit(i).to_dict(),
                    "reasons": b.reasons[i],
                }
            )
        return out


def classify_singular_set(
    u: GridFunction,
    f: GridFunction | None,
    F: OperatorSpec,
    cfg: FlatnessConfig = FlatnessConfig(),
    stride: int | None = None,
) -> SingularSetResult:
    """Classify every candidate node; the undetermined ones form the singular mask."""
    grid = u.grid
    stride = cfg.stride if stride is None else stride
    C_cfg = cfg.cauchy_C if cfg.cauchy_C is not None else calibrate_cauchy_constant(grid, cfg)
    pts = candidate_points(grid, cfg, stride)
    out = _iterate_batch(u, f, F, cfg, pts, C_cfg)
    members = np.zeros(grid.shape, dtype=bool)
    bad = pts[~out.regular]
    if bad.size:
        members[tuple(bad.T)] = True
    mask = Mask(grid, members)
    return SingularSetResult(
        mask=mask,
        measure=mask.count * (stride * grid.h) ** grid.dim,
        points=int(pts.shape[0]),
        undetermined=int(bad.shape[0]),
        cauchy_C=C_cfg,
        config=cfg,
        batch=out,
        point_indices=pts,
    )


# ---------------------------------------------------------------------------
# twice differentiability and weighted seminorms
# ---------------------------------------------------------------------------


def twice_diff_test(
    u: GridFunction,
    x: Sequence[float],
    grad: Sequence[float],
    hess: np.ndarray,
    eps: float,
) -> tuple[bool, float]:
    """Largest dyadic ``r`` with ``sup_{B_{r/2}(x)} |h| <= 2 eps r^2`` at ``r`` and every dyadic radius below it down to ``8h``.

    ``h`` is ``u`` minus its second-order Taylor polynomial at ``x``.  Returns
    ``(passed, r_witness)``; ``r_witness`` is 0 when no radius qualifies.
    """
    grid = u.grid
    x = np.asarray(x, dtype=float)
    dist = 1.0 - np.linalg.norm(x)
    if dist <= 0:
        raise PreconditionError("x must be interior")
    grad = np.asarray(grad, dtype=float)
    hess = np.asarray(hess, dtype=float)
    idx = grid.nearest_index(x)
    ux = float(u.values[idx])
    d = grid.coords - x
    taylor = ux + d @ grad + 0.5 * np.einsum("...i,ij,...j->...", d, hess, d)
    hdev = np.abs(u.values - taylor)
    rad = np.sqrt(np.sum(d * d, axis=-1))
    radii = []
    j = 0
    while 2.0**-j >= 8.0 * grid.h * (1 - 1e-12):
        if 2.0**-j <= dist * (1 + 1e-12):
            radii.append(2.0**-j)
        j += 1
    witness = 0.0
    for r in sorted(radii):  # ascending: stop at the first failure
        sel = (rad <= 0.5 * r * (1 + 1e-12)) & u.domain.members
        sup = float(hdev[sel].max()) if sel.any() else 0.0
        if sup <= 2.0 * eps * r * r:
            witness = r
        else:
            break
    return witness > 0, witness


@numba.njit(cache=True)
def _pair_sup(pts, vals, d, h, expo):  # pragma: no cover - compiled
    m = pts.shape[0]
    n = pts.shape[1]
    best = 0.0
    for i in range(m):
        for j in range(i + 1, m):
            dist2 = 0.0
            for k in range(n):
                t = pts[i, k] - pts[j, k]
                dist2 += t * t
            dist = math.sqrt(dist2)
            if dist < h * (1 - 1e-12):
                continue
            w = min(d[i], d[j]) ** expo
            q = w * abs(vals[i] - vals[j]) / dist
            if q > best:
                best = q
    return best


def weighted_seminorms(u: GridFunction, R: float, n: int | None = None) -> tuple[float, float]:
    """``sup d_x^n |u(x)|`` and ``sup d_{x,y}^(n+1) |u(x) - u(y)|/|x - y|`` over ``B_R``.

    ``d_x = R - |x|`` and ``d_{x,y} = min(d_x, d_y)``; pairs closer than ``h``
    are skipped.  ``n`` defaults to the grid dimension.
    """
    grid = u.grid
    n = grid.dim if n is None else n
    sel = (grid.radius < R) & u.domain.members
    if not sel.any():
        raise GridError(f"no nodes inside B_{R}")
    pts = grid.coords[sel]
    vals = u.values[sel]
    d = R - grid.radius[sel]
    zero = float(np.max(d**n * np.abs(vals)))
    lip = float(_pair_sup(pts, vals, d, grid.h, float(n + 1)))
    return zero, lip


@dataclass
class InterpolationReport:
    R: float
    eps: float
    zero_norm: float
    lip_seminorm: float
    integral: float
    constant: float
    minimal_constant: float

    @property
    def holds(self) -> bool:
        return self.constant >= self.minimal_constant

    def to_dict(self) -> dict:
        return dict(self.__dict__, holds=self.holds)


def interpolation_check(
    u: GridFunction, R: float, eps_interp: float, constant: float = 1.0, n: int | None = None
) -> InterpolationReport:
    """Both sides of ``|u|_0 <= eps [u]_{0,1} + C eps^-n int |u|`` and the smallest ``C`` that works."""
    grid = u.grid
    n = grid.dim if n is None else n
    zero, lip = weighted_seminorms(u, R, n)
    sel = (grid.radius < R) & u.domain.members
    integral = float(np.sum(np.abs(u.values[sel])) * grid.cell_volume)
    gap = zero - eps_interp * lip
    if gap <= 0:
        cmin = 0.0
    elif integral == 0:
        cmin = math.inf
    else:
        cmin = gap / (eps_interp ** (-n) * integral)
    return InterpolationReport(R, eps_interp, zero, lip, integral, constant, cmin)
