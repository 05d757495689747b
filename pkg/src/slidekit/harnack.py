"""Constants and executable checks for the measure, density, covering and Harnack estimates.

Every check returns a :class:`Report`.  Conditional statements whose hypotheses
fail on the given data get the verdict ``"vacuous"`` instead of ``"fail"``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy.special import logsumexp

from .grid import EmptyRegionError, Grid, GridFunction, Mask, oscillation
from .operators import EllipticityParams, PreconditionError, gamma_constant, pucci, spectral_norm
from .paraboloid import contact_set


# ---------------------------------------------------------------------------
# constants
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DerivedConstants:
    n: int
    Gamma: float
    rho0: float
    p: int
    C0: float
    M: int
    mu: float
    theta: float
    eps: float
    eps0: float
    sigma: float
    sigma_source: str = "empirical"

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _ceil_int(x: float) -> int:
    # guards against x = 3.0000000000000004 style rounding in the formula
    return int(math.ceil(x - 1e-12 * max(1.0, abs(x))))


def opening_factor(p: int, C0: float) -> int:
    """Smallest integer ``M`` with ``2 C0/(M-1) + 1/64 <= 1/16`` and ``M >= 1 + (p+1) 2^(p+2)``."""
    from_sup = _ceil_int(1.0 + 128.0 * C0 / 3.0)
    from_size = 1 + (p + 1) * 2 ** (p + 2)
    return max(from_sup, from_size, 2)


def derive_constants(n: int, params: EllipticityParams, sigma: float = 0.5) -> DerivedConstants:
    """The full constant cascade for dimension ``n``.

    ``sigma`` (the right-hand-side smallness in the oscillation decay) has no
    computable value; it is passed through, capped at 1, and labelled empirical.
    """
    if n not in (1, 2, 3):
        raise ValueError(f"n must be 1, 2 or 3, got {n}")
    lam, Lam, b0 = params.lam, params.Lam, params.b0
    Gamma = gamma_constant(n, params)
    p = max(1, _ceil_int((2.0 * (n - 1) * Lam + 4.0 * b0 + 1.0) / lam))
    C0 = (2.0**p - 1.0) / p
    M = opening_factor(p, C0)
    mu = ((M - 1) / (8.0 * M)) ** n * (1.0 + Gamma) ** (-n)
    theta = 5.0 ** (-n) * mu
    eps = -math.log1p(-theta) / math.log(M)
    return DerivedConstants(
        n=n,
        Gamma=Gamma,
        rho0=8.0 * Gamma,
        p=p,
        C0=C0,
        M=M,
        mu=mu,
        theta=theta,
        eps=eps,
        eps0=eps / 2.0,
        sigma=min(1.0, float(sigma)),
    )


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class Report:
    check: str
    hypotheses: dict[str, Any] = field(default_factory=dict)
    lhs: float = float("nan")
    rhs: float = float("nan")
    tolerance: float = 0.0
    verdict: str = "pass"
    series: list[dict[str, Any]] = field(default_factory=list)
    details: dict[str, Any] = field(default_factory=dict)

    @property
    def hypotheses_hold(self) -> bool:
        return all(v is True for v in self.hypotheses.values() if isinstance(v, bool))

    def to_dict(self) -> dict:
        return {
            "check": self.check,
            "hypotheses": self.hypotheses,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "tolerance": self.tolerance,
            "verdict": self.verdict,
            "series": self.series,
            "details": self.details,
        }


def _gate(hyp: dict[str, Any]) -> bool:
    return all(v for v in hyp.values() if isinstance(v, bool))


def _sup(f: GridFunction | None, mask: Mask | None = None) -> float:
    if f is None:
        return 0.0
    return f.sup_norm(mask)


# ---------------------------------------------------------------------------
# barrier
# ---------------------------------------------------------------------------


def barrier_derivatives(x, x0, r: float, a: float, p: int, y1):
    """Exact gradient and Hessian of the radial barrier at points ``x`` of the annulus.

    The barrier is ``-(a/2)|x - y1|^2 + a r^2 (t^-p - 1)/p`` with ``t = |x - x0|/r``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y1 = np.broadcast_to(np.asarray(y1, dtype=float), x.shape)
    d = x - np.asarray(x0, dtype=float)
    rad = np.linalg.norm(d, axis=-1)
    t = rad / r
    e = d / rad[:, None]
    n = x.shape[-1]
    grad = -a * (x - y1) - a * r * t[:, None] ** (-p - 1) * e
    outer = e[:, :, None] * e[:, None, :]
    eye = np.eye(n)
    s = t ** (-p - 2)
    hess = -a * eye + a * ((p + 1) * s)[:, None, None] * outer - a * s[:, None, None] * (eye - outer)
    return grad, hess, t


def barrier_check(
    x0: Sequence[float],
    r: float,
    a: float,
    dc: DerivedConstants,
    p_ell: EllipticityParams,
    samples: int = 10_000,
    seed: int = 0,
    y1: Sequence[float] | None = None,
    rel_tol: float = 1e-12,
) -> Report:
    """Check ``M^-(D^2 psi) - b0|D psi| >= a`` and the size bounds on sampled annulus points.

    Radii ``t`` are uniform on ``[1/2, 1]`` with both ends included; the
    paraboloid centers ``y1`` are uniform in the unit ball unless given.
    The inequality is tested with a relative slack ``rel_tol`` since ``t = 1``
    is an equality case.
    """
    x0 = np.asarray(x0, dtype=float)
    n = x0.size
    if not a > 0:
        raise PreconditionError("opening must be positive")
    if not r > 0 or np.linalg.norm(x0) + r > 1.0 + 1e-12:
        raise PreconditionError("the ball B_r(x0) must lie inside the unit ball")
    rng = np.random.default_rng(seed)
    t = rng.uniform(0.5, 1.0, samples)
    t[:2] = [1.0, 0.5][: min(2, samples)]
    dirs = rng.standard_normal((samples, n))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    if y1 is None:
        yv = rng.standard_normal((samples, n))
        yv /= np.linalg.norm(yv, axis=1, keepdims=True)
        yv *= rng.uniform(0, 1, (samples, 1)) ** (1.0 / n)
    else:
        yv = np.broadcast_to(np.asarray(y1, dtype=float), (samples, n))
    x = x0 + r * t[:, None] * dirs
    grad, hess, tt = barrier_derivatives(x, x0, r, a, dc.p, yv)
    lhs = pucci(hess, "minus", p_ell) - p_ell.b0 * np.linalg.norm(grad, axis=-1)
    chain = a * tt ** (-dc.p - 2) * (p_ell.lam * dc.p - 2 * (n - 1) * p_ell.Lam - 4 * p_ell.b0)
    tol = rel_tol * a
    ok_main = lhs >= a - tol
    ok_hess = spectral_norm(hess) <= dc.M * a + tol
    ok_grad = np.linalg.norm(grad, axis=-1) <= dc.M * a + tol
    ok_chain = lhs >= chain - tol * np.maximum(1.0, chain / a)
    verdict = "pass" if (ok_main.all() and ok_hess.all() and ok_grad.all()) else "fail"
    worst = int(np.argmin(lhs - a))
    return Report(
        check="barrier",
        hypotheses={"ball_inside_unit_ball": True, "opening_positive": True},
        lhs=float(lhs.min()),
        rhs=float(a),
        tolerance=tol,
        verdict=verdict,
        series=[
            {"t": float(tt[i]), "lhs": float(lhs[i]), "chain_lower_bound": float(chain[i])}
            for i in range(min(samples, 2))
        ],
        details={
            "samples": samples,
            "violations": int(np.count_nonzero(~ok_main)),
            "hessian_size_violations": int(np.count_nonzero(~ok_hess)),
            "gradient_size_violations": int(np.count_nonzero(~ok_grad)),
            "chain_violations": int(np.count_nonzero(~ok_chain)),
            "worst_t": float(tt[worst]),
            "max_hessian_norm": float(spectral_norm(hess).max()),
            "max_gradient_norm": float(np.linalg.norm(grad, axis=-1).max()),
            "size_bound": float(dc.M * a),
        },
    )


# ---------------------------------------------------------------------------
# measure lemma and density
# ---------------------------------------------------------------------------


def verify_measure_lemma(
    u: GridFunction,
    a: float,
    V: Mask,
    dc: DerivedConstants,
    p_ell: EllipticityParams,
    f: GridFunction | None = None,
    tol_factor: float = 10.0,
) -> Report:
    """Compare ``|T_a(V)|`` with ``(1+Gamma)^-n |V|``.

    Only the listed hypotheses are checked here; membership of ``u`` in the
    Pucci class is the caller's business (see ``pucci_class_test``).
    """
    grid = u.grid
    n = grid.dim
    h = grid.h
    cs = contact_set(u, a, V)
    hyp = {
        "rhs_below_opening": _sup(f) < a,
        "opening_below_range": a <= p_ell.rho / dc.Gamma * (1 + 1e-12),
        "centers_in_closed_ball": V <= grid.ball(1.0),
        "touch_points_interior": cs.excluded == 0,
        "centers_nonempty": not V.is_empty(),
        "pucci_class": "not checked",
    }
    factor = (1.0 + dc.Gamma) ** (-n)
    t_meas = cs.interior.measure
    v_meas = V.measure
    ratio = t_meas / v_meas if v_meas > 0 else float("nan")
    tol = tol_factor * h
    if not _gate(hyp):
        verdict = "vacuous"
    else:
        verdict = "pass" if ratio >= factor * (1.0 - tol) else "fail"
    return Report(
        check="measure",
        hypotheses=hyp,
        lhs=t_meas,
        rhs=factor * v_meas,
        tolerance=tol,
        verdict=verdict,
        details={
            "ratio": ratio,
            "bound": factor,
            "opening": a,
            "touch_nodes": cs.touch.count,
            "interior_touch_nodes": cs.interior.count,
            "excluded_noninterior": cs.excluded,
            "center_nodes": V.count,
        },
    )


def density_hypotheses(u: GridFunction, p_ell: EllipticityParams, f: GridFunction | None) -> dict:
    grid = u.grid
    return {
        "u_nonnegative": u.min() >= 0.0,
        "rhs_at_most_8": _sup(f) <= 8.0,
        "u_at_most_rho": u.sup_norm() <= p_ell.rho,
        "inf_quarter_ball_at_most_1": u.min(grid.ball(0.25) & u.domain) <= 1.0,
    }


def verify_density(
    u: GridFunction,
    dc: DerivedConstants,
    p_ell: EllipticityParams,
    f: GridFunction | None = None,
    tol_factor: float = 10.0,
) -> Report:
    """Both density ratios ``|T_8 cap B_1|/|B_1|`` and ``|{u <= 2} cap B_1|/|B_1|`` against ``4^-n (1+Gamma)^-n``."""
    grid = u.grid
    n = grid.dim
    hyp = density_hypotheses(u, p_ell, f)
    ball = grid.ball(1.0) & u.domain
    cs = contact_set(u, 8.0, grid.ball(0.25))
    b_meas = ball.measure
    touch_ratio = (cs.interior & ball).measure / b_meas
    low = Mask(grid, ball.members & (u.values <= 2.0))
    low_ratio = low.measure / b_meas
    bound = 4.0 ** (-n) * (1.0 + dc.Gamma) ** (-n)
    tol = tol_factor * grid.h
    if not _gate(hyp):
        verdict = "vacuous"
    else:
        ok = touch_ratio >= bound * (1 - tol) and low_ratio >= bound * (1 - tol)
        verdict = "pass" if ok else "fail"
    return Report(
        check="density",
        hypotheses=hyp,
        lhs=min(touch_ratio, low_ratio),
        rhs=bound,
        tolerance=tol,
        verdict=verdict,
        details={
            "touch_ratio": touch_ratio,
            "sublevel_ratio": low_ratio,
            "mu": dc.mu,
            "excluded_noninterior": cs.excluded,
        },
    )


# ---------------------------------------------------------------------------
# covering
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Ball:
    center: tuple[float, ...]
    radius: float


def dyadic_ball_family(grid: Grid, min_radius: float | None = None) -> list[Ball]:
    """Balls of radius ``2^-j`` centred on the ``2^-j`` lattice that fit inside ``B_1``.

    ``j`` runs from 0 while the radius stays at least ``min_radius`` (default ``4h``).
    """
    rmin = 4.0 * grid.h if min_radius is None else min_radius
    out = []
    j = 0
    while 2.0**-j >= rmin * (1 - 1e-12):
        r = 2.0**-j
        m = int(round(1.0 / r))
        ticks = np.arange(-m, m + 1) * r
        mesh = np.stack(np.meshgrid(*([ticks] * grid.dim), indexing="ij"), -1).reshape(-1, grid.dim)
        ok = np.linalg.norm(mesh, axis=1) + r <= 1.0 + 1e-12
        out.extend(Ball(tuple(c.tolist()), r) for c in mesh[ok])
        j += 1
    return out


def _ball_window(grid: Grid, ball: Ball):
    """Index box around ``ball`` and the membership mask inside it."""
    c = np.asarray(ball.center)
    lo = np.clip(np.floor((c - ball.radius + 1.0) / grid.h).astype(int) - 1, 0, grid.resolution - 1)
    hi = np.clip(np.ceil((c + ball.radius + 1.0) / grid.h).astype(int) + 2, 0, grid.resolution)
    box = tuple(slice(l, u) for l, u in zip(lo, hi))
    d2 = np.sum((grid.coords[box] - c) ** 2, axis=-1)
    return box, d2 <= ball.radius**2 * (1 + 1e-12)


def covering_step(E: Mask, F: Mask, mu: float, ball_family: list[Ball] | None = None) -> Report:
    """Check the density hypothesis over the ball family; assert the conclusion only if it holds."""
    grid = E.grid
    n = grid.dim
    if E.is_empty():
        raise PreconditionError("the covering step needs a nonempty set E")
    if not 0 < mu < 1:
        raise PreconditionError("mu must lie in (0, 1)")
    unit = grid.ball(1.0)
    if not (E <= F and F <= unit):
        raise PreconditionError("need E inside F inside the closed unit ball")
    family = dyadic_ball_family(grid) if ball_family is None else ball_family
    checked = 0
    failing = []
    for b in family:
        box, inside = _ball_window(grid, b)
        if not np.any(inside & E.members[box]):
            continue
        checked += 1
        cnt = np.count_nonzero(inside)
        hit = np.count_nonzero(inside & F.members[box])
        if not hit > mu * cnt:
            failing.append({"center": list(b.center), "radius": b.radius, "density": hit / cnt})
    lhs = (unit - F).measure
    rhs = (1.0 - mu / 5.0**n) * (unit - E).measure
    hyp = {"family_density": not failing, "balls_checked": checked}
    if failing:
        verdict = "vacuous"
    else:
        verdict = "pass" if lhs <= rhs * (1 + 1e-12) else "fail"
    return Report(
        check="covering",
        hypotheses=hyp,
        lhs=lhs,
        rhs=rhs,
        tolerance=0.0,
        verdict=verdict,
        details={
            "mu": mu,
            "family_size": len(family),
            "hypothesis_failures": len(failing),
            "first_failures": failing[:5],
            "conclusion_asserted": not failing,
        },
    )


# ---------------------------------------------------------------------------
# decay, weak L^eps, weak Harnack
# ---------------------------------------------------------------------------


def admissible_steps(dc: DerivedConstants, p_ell: EllipticityParams) -> int:
    if p_ell.rho < dc.rho0:
        return 0
    return int(math.floor(math.log(p_ell.rho / dc.rho0) / math.log(dc.M) + 1e-12))


def decay_iteration(
    u: GridFunction,
    dc: DerivedConstants,
    p_ell: EllipticityParams,
    f: GridFunction | None = None,
    kmax: int = 1,
) -> Report:
    """``|B_1 \\ T_{8 M^k}|`` for ``k = 1..kmax`` with centers in the closed unit ball."""
    grid = u.grid
    hyp = density_hypotheses(u, p_ell, f)
    hyp["rho_at_least_rho0"] = p_ell.rho >= dc.rho0
    kadm = admissible_steps(dc, p_ell)
    if kmax > kadm:
        warnings.warn(f"kmax={kmax} exceeds the admissible range {kadm}; truncated", stacklevel=2)
        kmax = kadm
    V = grid.ball(1.0)
    open_ball = grid.open_ball(1.0) & u.domain
    b_meas = open_ball.measure
    series = []
    ok = True
    prev = float("inf")
    monotone = True
    for k in range(1, kmax + 1):
        a = 8.0 * float(dc.M) ** k
        cs = contact_set(u, a, V)
        comp = (open_ball - cs.interior).measure
        bound = (1.0 - dc.theta) ** k * b_meas
        series.append({"k": k, "opening": a, "complement": comp, "bound": bound, "pass": comp <= bound})
        ok &= comp <= bound
        monotone &= comp <= prev
        prev = comp
    if not _gate(hyp) or kmax < 1:
        verdict = "vacuous"
    else:
        verdict = "pass" if ok else "fail"
    return Report(
        check="decay",
        hypotheses=hyp,
        lhs=series[-1]["complement"] if series else float("nan"),
        rhs=series[-1]["bound"] if series else float("nan"),
        verdict=verdict,
        series=series,
        details={"kmax_used": kmax, "kmax_admissible": kadm, "nonincreasing": monotone},
    )


def _fit_slope(x: np.ndarray, y: np.ndarray) -> float:
    A = np.stack([x, np.ones_like(x)], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return float(coef[0])


def weak_Leps(
    u: GridFunction,
    dc: DerivedConstants,
    p_ell: EllipticityParams,
    levels: Sequence[float] | None = None,
    t_shift: float = 0.0,
) -> Report:
    """Distribution curve ``|{u > t} cap B_1|`` and the fitted decay exponent.

    Default levels are ``17 M^j`` up to ``17 rho/rho0``.  The exponent is minus
    the least-squares slope of ``log measure`` against ``log(t + t_shift)`` over
    levels with positive measure; fewer than two such levels give ``+inf``.
    """
    grid = u.grid
    hyp = density_hypotheses(u, p_ell, None)
    if levels is None:
        top = 17.0 * p_ell.rho / dc.rho0
        levels = [17.0 * float(dc.M) ** j for j in range(0, 64) if 17.0 * float(dc.M) ** j <= top]
        if not levels:
            levels = [17.0]
    ball = grid.ball(1.0) & u.domain
    vals = u.values[ball.members]
    series = []
    for t in levels:
        m = int(np.count_nonzero(vals > t)) * grid.cell_volume
        series.append({"t": float(t), "measure": m})
    pos = [(s["t"], s["measure"]) for s in series if s["measure"] > 0 and s["t"] + t_shift > 0]
    if len(pos) < 2:
        exponent = float("inf")
    else:
        ts, ms = np.array(pos).T
        exponent = -_fit_slope(np.log(ts + t_shift), np.log(ms))
    return Report(
        check="weak-leps",
        hypotheses=hyp,
        lhs=exponent,
        rhs=dc.eps,
        verdict="pass" if _gate(hyp) else "vacuous",
        series=series,
        details={"fitted_exponent": exponent, "t_shift": t_shift, "eps": dc.eps},
    )


def truncate(u: GridFunction, threshold: float) -> GridFunction:
    """Zero out values strictly above ``threshold`` (ties are kept)."""
    return u.with_values(np.where(u.values > threshold, 0.0, u.values))


def weak_harnack(
    u: GridFunction,
    f: GridFunction | None,
    dc: DerivedConstants,
    p_ell: EllipticityParams,
) -> Report:
    """``||u_rho||_{L^eps0(B_1/4)}`` against ``inf_{B_1/4} u + ||f||``; the ratio is logged.

    The quasi-norm is evaluated in log space: with ``eps0`` of order ``1e-6``
    the plain power underflows.
    """
    grid = u.grid
    n = grid.dim
    quarter = grid.ball(0.25) & u.domain
    hyp = {
        "u_nonnegative": u.min() >= 0.0,
        "u_at_most_rho": u.sup_norm() <= p_ell.rho,
        "scaled_inf_bound": u.min(quarter) + _sup(f) / 8.0 <= p_ell.rho / dc.rho0 * (1 + 1e-12),
        "rho_at_least_rho0": p_ell.rho >= dc.rho0,
    }
    thr = 17.0 * p_ell.rho / dc.rho0
    ur = truncate(u, thr)
    vals = ur.values[quarter.members]
    pos = vals[vals > 0]
    e0 = dc.eps0
    if pos.size:
        log_integral = logsumexp(e0 * np.log(pos) + n * math.log(grid.h))
        log_lhs = log_integral / e0
    else:
        log_lhs = -math.inf
    rhs = u.min(quarter) + _sup(f)
    log_rhs = math.log(rhs) if rhs > 0 else -math.inf
    log_ratio = log_lhs - log_rhs if np.isfinite(log_rhs) else float("nan")
    with np.errstate(over="ignore", under="ignore"):
        ratio = float(np.exp(log_ratio))
    return Report(
        check="weak-harnack",
        hypotheses=hyp,
        lhs=float(np.exp(min(log_lhs, 700.0))) if log_lhs > -745 else 0.0,
        rhs=rhs,
        verdict="pass" if _gate(hyp) else "vacuous",
        details={
            "ratio": ratio,
            "log_ratio": log_ratio,
            "log_lhs": log_lhs,
            "eps0": e0,
            "truncation_level": thr,
            "truncated_nodes": int(np.count_nonzero(u.values[u.domain.members] > thr)),
            "quarter_ball_measure": quarter.measure,
        },
    )


# ---------------------------------------------------------------------------
# oscillation decay
# ---------------------------------------------------------------------------


def holder_decay(
    u: GridFunction,
    dc: DerivedConstants,
    p_ell: EllipticityParams,
    f: GridFunction | None = None,
) -> Report:
    """Oscillation over ``B_{4^-k}(0)`` while ``4^-k >= max(sqrt(2 rho0/rho), 8h)`` and a fitted exponent."""
    grid = u.grid
    floor = max(math.sqrt(2.0 * dc.rho0 / p_ell.rho), 8.0 * grid.h)
    hyp = {
        "u_at_most_1": u.sup_norm() <= 1.0,
        "rhs_at_most_sigma": _sup(f) <= dc.sigma,
        "rho_above_2rho0": p_ell.rho > 2.0 * dc.rho0,
    }
    series = []
    k = 0
    while 4.0**-k >= floor * (1 - 1e-12):
        r = 4.0**-k
        osc = oscillation(u, grid.ball(r) & u.domain)
        series.append({"k": k, "radius": r, "oscillation": osc})
        k += 1
    pos = [(s["radius"], s["oscillation"]) for s in series if s["oscillation"] > 0]
    if len(pos) < 2:
        alpha = float("inf")
    else:
        rs, os_ = np.array(pos).T
        alpha = _fit_slope(np.log(rs), np.log(os_))
    if not _gate(hyp):
        verdict = "vacuous"
    else:
        verdict = "pass" if alpha > 0 else "fail"
    return Report(
        check="holder",
        hypotheses=hyp,
        lhs=alpha,
        rhs=0.0,
        verdict=verdict,
        series=series,
        details={"fitted_alpha": alpha, "radius_floor": floor, "sigma": dc.sigma, "sigma_source": dc.sigma_source},
    )
