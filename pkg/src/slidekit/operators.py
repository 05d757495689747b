"""Pucci extremal operators, sigma_k, user operators F(M, p, z, x) and ellipticity checks.

Every operator callable is batched: ``M`` has shape ``(..., n, n)``, ``p`` and ``x``
shape ``(..., n)`` and ``z`` shape ``(...)``; the result has shape ``(...)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np

from .grid import GridFunction, Mask, gradient_field, hessian_field, spectral_norm, sym_eigenvalues


class PreconditionError(ValueError):
    """Raised when an operation is called outside its stated hypotheses."""


@dataclass(frozen=True)
class EllipticityParams:
    """Structural constants: ellipticity ``lam <= Lam``, drift ``b0``, zeroth order ``c0``, range ``rho``."""

    lam: float
    Lam: float
    b0: float = 0.0
    c0: float = 0.0
    rho: float = 1.0

    def __post_init__(self):
        if not (self.lam > 0 and self.Lam >= self.lam):
            raise ValueError(f"need 0 < lam <= Lam, got lam={self.lam}, Lam={self.Lam}")
        if self.b0 < 0 or self.c0 < 0:
            raise ValueError("b0 and c0 must be nonnegative")
        if not self.rho > 0:
            raise ValueError("rho must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "EllipticityParams":
        return cls(
            lam=float(d.get("lam", d.get("lambda"))),
            Lam=float(d.get("Lam", d.get("Lambda"))),
            b0=float(d.get("b0", 0.0)),
            c0=float(d.get("c0", 0.0)),
            rho=float(d.get("rho", 1.0)),
        )

    def to_dict(self) -> dict:
        return {"lam": self.lam, "Lam": self.Lam, "b0": self.b0, "c0": self.c0, "rho": self.rho}


def gamma_constant(n: int, params: EllipticityParams) -> float:
    """Hessian-bound factor of the contact-set measure estimate."""
    return ((n - 1) * params.Lam + 2.0 * params.b0 + 1.0) / params.lam + 1.0


# ---------------------------------------------------------------------------
# matrix functions
# ---------------------------------------------------------------------------


def pucci(M, side: Literal["minus", "plus"], params: EllipticityParams):
    """Pucci extremal operator of a symmetric matrix (batched)."""
    M = np.asarray(M, dtype=float)
    if side not in ("minus", "plus"):
        raise ValueError(f"side must be 'minus' or 'plus', got {side!r}")
    if params.lam == params.Lam:
        out = params.lam * np.trace(M, axis1=-2, axis2=-1)
        return float(out) if np.ndim(out) == 0 else out
    ev = sym_eigenvalues(M)
    pos = np.sum(np.where(ev > 0, ev, 0.0), axis=-1)
    neg = np.sum(np.where(ev < 0, ev, 0.0), axis=-1)
    if side == "minus":
        out = params.lam * pos + params.Lam * neg
    else:
        out = params.Lam * pos + params.lam * neg
    return float(out) if np.ndim(out) == 0 else out


def elementary_symmetric(ev: np.ndarray, k: int) -> np.ndarray:
    """``sigma_k`` of the trailing axis of ``ev``."""
    ev = np.asarray(ev, dtype=float)
    e = [np.ones(ev.shape[:-1])] + [np.zeros(ev.shape[:-1]) for _ in range(k)]
    for i in range(ev.shape[-1]):
        x = ev[..., i]
        for j in range(k, 0, -1):
            e[j] = e[j] + x * e[j - 1]
    return e[k]


def _check_k(M: np.ndarray, k: int) -> int:
    n = M.shape[-1]
    if not (1 <= k <= n):
        raise ValueError(f"k must satisfy 1 <= k <= {n}, got {k}")
    return n


def sigma_k(M, k: int):
    M = np.asarray(M, dtype=float)
    _check_k(M, k)
    out = elementary_symmetric(sym_eigenvalues(M), k)
    return float(out) if np.ndim(out) == 0 else out


def gamma_k_test(M, k: int):
    """True where the Hessian eigenvalues lie in the cone ``sigma_1, ..., sigma_k > 0``."""
    M = np.asarray(M, dtype=float)
    _check_k(M, k)
    ev = sym_eigenvalues(M)
    ok = np.ones(ev.shape[:-1], dtype=bool)
    for i in range(1, k + 1):
        ok &= elementary_symmetric(ev, i) > 0
    return bool(ok) if np.ndim(ok) == 0 else ok


# ---------------------------------------------------------------------------
# operators F(M, p, z, x)
# ---------------------------------------------------------------------------

OperatorFn = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class OperatorSpec:
    """A fully nonlinear operator ``F(M, p, z, x)``.

    ``lam``/``Lam`` are the declared ellipticity constants near the origin, used
    for root brackets; ``modulus`` is an optional modulus of continuity of ``D_M F``.
    """

    name: str
    fn: OperatorFn
    hessian_only: bool = True
    vanishes_at_zero: bool = True
    lam: float | None = None
    Lam: float | None = None
    modulus: Callable[[float], float] | None = None

    def __call__(self, M, p=None, z=None, x=None):
        M = np.asarray(M, dtype=float)
        batch = M.shape[:-2]
        n = M.shape[-1]
        p = np.zeros(batch + (n,)) if p is None else np.asarray(p, dtype=float)
        z = np.zeros(batch) if z is None else np.asarray(z, dtype=float)
        x = np.zeros(batch + (n,)) if x is None else np.asarray(x, dtype=float)
        out = self.fn(M, p, z, x)
        return float(out) if np.ndim(out) == 0 else np.asarray(out, dtype=float)


def _trace_fn(M, p, z, x):
    return np.trace(M, axis1=-2, axis2=-1)


def make_operator(name: str, params: EllipticityParams | None = None) -> OperatorSpec:
    """Build an operator from its registry name.

    Names: ``trace``, ``pucci-minus``, ``pucci-plus``, ``sigma-k:{k}`` and
    ``shifted-sigma-k:{k}:{t}`` (``sigma_k(M + tI) - sigma_k(tI)``).
    """
    if name == "trace":
        return OperatorSpec("trace", _trace_fn, lam=1.0, Lam=1.0)
    if name in ("pucci-minus", "pucci-plus"):
        if params is None:
            raise ValueError(f"{name} needs ellipticity parameters")
        side = "minus" if name == "pucci-minus" else "plus"
        return OperatorSpec(
            name, lambda M, p, z, x: pucci(M, side, params), lam=params.lam, Lam=params.Lam
        )
    parts = name.split(":")
    if parts[0] == "sigma-k" and len(parts) == 2:
        k = int(parts[1])
        return OperatorSpec(name, lambda M, p, z, x: sigma_k(M, k))
    if parts[0] == "shifted-sigma-k" and len(parts) == 3:
        k, t = int(parts[1]), float(parts[2])

        def shifted(M, p, z, x):
            n = M.shape[-1]
            return sigma_k(M + t * np.eye(n), k) - math.comb(n, k) * t**k

        lam = Lam = None
        if params is not None:
            lam, Lam = params.lam, params.Lam
        return OperatorSpec(name, shifted, lam=lam, Lam=Lam)
    raise KeyError(f"unknown operator {name!r}")


REGISTRY_NAMES = ("trace", "pucci-minus", "pucci-plus", "sigma-k:{k}", "shifted-sigma-k:{k}:{t}")


# ---------------------------------------------------------------------------
# ellipticity sampling
# ---------------------------------------------------------------------------


@dataclass
class EllipticityReport:
    samples: int
    worst_lower: float
    worst_upper: float
    violations: int
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.violations == 0

    def to_dict(self) -> dict:
        return {
            "samples": self.samples,
            "worst_lower_violation": self.worst_lower,
            "worst_upper_violation": self.worst_upper,
            "violations": self.violations,
            "tolerance": self.tolerance,
            "ok": self.ok,
        }


def _random_sym(rng, n, count):
    G = rng.standard_normal((count, n, n))
    S = 0.5 * (G + np.swapaxes(G, -1, -2))
    return S / spectral_norm(S)[:, None, None]


def check_rho_ellipticity(
    F: OperatorSpec,
    params: EllipticityParams,
    sample_count: int,
    seed: int,
    dim: int = 2,
    tol: float = 1e-9,
) -> EllipticityReport:
    """Sample ``lam |N| <= F(M+N) - F(M) <= Lam |N|`` over the rho-box.

    ``|M|, |M + N|, |p|, |z| <= rho`` with ``|.|`` the spectral norm; the positive
    increment ``N`` is measured by its trace, which is the norm under which
    ``trace`` and the Pucci operators have exactly the constants ``(lam, Lam)``.
    """
    if sample_count < 1:
        raise PreconditionError("sample_count must be >= 1")
    rng = np.random.default_rng(seed)
    rho = params.rho
    n = dim
    m_size = rho * rng.uniform(0.0, 1.0, sample_count)
    M = _random_sym(rng, n, sample_count) * m_size[:, None, None]
    A = rng.standard_normal((sample_count, n, n))
    N = np.swapaxes(A, -1, -2) @ A
    N = N / spectral_norm(N)[:, None, None]
    N = N * ((rho - m_size) * rng.uniform(0.0, 1.0, sample_count))[:, None, None]
    p = rng.standard_normal((sample_count, n))
    p *= (rho * rng.uniform(0, 1, sample_count) / np.linalg.norm(p, axis=-1))[:, None]
    z = rng.uniform(-rho, rho, sample_count)
    x = rng.standard_normal((sample_count, n))
    x *= (rng.uniform(0, 1, sample_count) / np.linalg.norm(x, axis=-1))[:, None]

    diff = F(M + N, p, z, x) - F(M, p, z, x)
    size = np.trace(N, axis1=-2, axis2=-1)
    lower = params.lam * size - diff
    upper = diff - params.Lam * size
    violations = int(np.count_nonzero((lower > tol) | (upper > tol)))
    return EllipticityReport(sample_count, float(np.max(lower)), float(np.max(upper)), violations, tol)


# ---------------------------------------------------------------------------
# shifted right-hand sides and Pucci class membership
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SmoothFunction:
    """A C^2 test function with exact derivatives, all taking coordinates ``(..., n)``."""

    value: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    hess: Callable[[np.ndarray], np.ndarray]

    def c11_norm(self, coords: np.ndarray) -> float:
        """``sup|phi| + sup|D phi| + sup||D^2 phi||`` over the given points."""
        v = np.max(np.abs(self.value(coords)))
        g = np.max(np.linalg.norm(self.grad(coords), axis=-1))
        H = np.max(spectral_norm(self.hess(coords)))
        return float(v + g + H)


def zero_function(n: int) -> SmoothFunction:
    return SmoothFunction(
        value=lambda x: np.zeros(x.shape[:-1]),
        grad=lambda x: np.zeros(x.shape),
        hess=lambda x: np.zeros(x.shape[:-1] + (n, n)),
    )


def shifted_rhs(
    F: OperatorSpec,
    f: GridFunction,
    u: GridFunction,
    phi: SmoothFunction,
    params: EllipticityParams,
) -> tuple[GridFunction, GridFunction]:
    """Right-hand sides for which ``u - phi`` lies in the lower/upper Pucci classes.

    Returns ``(f_bar, f_under)`` with
    ``f_bar = f + c0|u - phi| - F(D^2 phi, D phi, phi, x)`` and
    ``f_under = f - c0|u - phi| - F(D^2 phi, D phi, phi, x)``.
    """
    if f.grid != u.grid:
        raise ValueError("f and u live on different grids")
    dom = u.domain.members
    X = u.grid.coords[dom]
    if phi.c11_norm(X) > params.rho:
        raise PreconditionError(f"C^(1,1) norm of phi exceeds rho={params.rho}")
    phi_v = phi.value(X)
    Fphi = F(phi.hess(X), phi.grad(X), phi_v, X)
    gap = params.c0 * np.abs(u.values[dom] - phi_v)
    bar = np.array(f.values, copy=True)
    under = np.array(f.values, copy=True)
    bar[dom] = f.values[dom] + gap - Fphi
    under[dom] = f.values[dom] - gap - Fphi
    return u.with_values(bar), u.with_values(under)


@dataclass
class PucciClassReport:
    side: str
    tolerance: float
    per_opening: list[dict] = field(default_factory=list)

    @property
    def violations(self) -> int:
        return sum(r["violations"] for r in self.per_opening)

    @property
    def ok(self) -> bool:
        return self.violations == 0

    def to_dict(self) -> dict:
        return {
            "side": self.side,
            "tolerance": self.tolerance,
            "violations": self.violations,
            "ok": self.ok,
            "per_opening": self.per_opening,
        }


def _one_sided(u, f, params, a, side, tau, n, max_listed=20):
    from .paraboloid import contact_set

    data = u if side == "super" else -u
    cs = contact_set(data, a, u.domain)
    touch = cs.interior.members & u.grid.margin_mask(2).members
    idx = np.argwhere(touch)
    H = hessian_field(u)[touch]
    g = gradient_field(u)[touch]
    fv = f.values[touch]
    if side == "super":
        slack = pucci(H, "minus", params) - params.b0 * np.linalg.norm(g, axis=-1) - fv
    else:
        slack = fv - pucci(H, "plus", params) - params.b0 * np.linalg.norm(g, axis=-1)
    slack = np.atleast_1d(slack)
    bad = slack > tau
    return {
        "opening": a,
        "side": side,
        "contacts": int(idx.shape[0]),
        "violations": int(np.count_nonzero(bad)),
        "worst": float(np.max(slack)) if slack.size else float("-inf"),
        "violating_nodes": idx[bad][:max_listed].tolist(),
    }


def pucci_class_test(
    u: GridFunction,
    params: EllipticityParams,
    f: GridFunction,
    side: Literal["super", "sub", "star"],
    openings,
    c_tol: float = 10.0,
) -> PucciClassReport:
    """Check the Pucci inequalities at paraboloid contact points.

    Supersolution side: paraboloids of each opening slide up from below and at
    interior contacts ``M^-(D^2 u) - b0|Du| <= f + tau`` must hold.  Subsolution
    side: paraboloids slide down from above and ``M^+(D^2 u) + b0|Du| >= f - tau``.
    ``star`` runs both with ``|f|`` and ``-|f|``.  ``tau = c_tol * h``.
    """
    n = u.grid.dim
    gam = gamma_constant(n, params)
    openings = [float(a) for a in openings]
    for a in openings:
        if a <= 0 or a > params.rho / gam * (1 + 1e-12):
            raise PreconditionError(f"opening {a} outside (0, rho/Gamma = {params.rho / gam}]")
    tau = c_tol * u.grid.h
    report = PucciClassReport(side, tau)
    for a in openings:
        if side == "super":
            report.per_opening.append(_one_sided(u, f, params, a, "super", tau, n))
        elif side == "sub":
            report.per_opening.append(_one_sided(u, f, params, a, "sub", tau, n))
        elif side == "star":
            absf = f.with_values(np.abs(f.values))
            report.per_opening.append(_one_sided(u, absf, params, a, "super", tau, n))
            report.per_opening.append(_one_sided(u, -absf, params, a, "sub", tau, n))
        else:
            raise ValueError(f"unknown side {side!r}")
    return report
