"""Quadratics, sliding paraboloids, Jensen envelopes and contact sets.

The workhorse is a separable lower envelope of parabolas (Felzenszwalb-Huttenlocher)
run one axis at a time.  For ``w > 0`` it computes

    g(y) = min_z  u(z) + w |z - y|^2

over all grid nodes ``z`` with finite ``u``, together with the minimising node.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np

from .grid import (
    Grid,
    GridError,
    GridFunction,
    Mask,
    StencilError,
    as_sym,
    hessian_field,
    gradient_at,
    spectral_norm,
    sym_eigenvalues,
)


# ---------------------------------------------------------------------------
# quadratic polynomials
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Quadratic:
    """``P(x) = a0 + b.x + x^T C x`` with symmetric ``C`` (so ``D^2 P = 2C``)."""

    a0: float
    b: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.b, dtype=float).reshape(-1)
        C = as_sym(np.asarray(self.C, dtype=float).reshape(b.size, b.size))
        object.__setattr__(self, "a0", float(self.a0))
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "C", C)

    @classmethod
    def zero(cls, n: int) -> "Quadratic":
        return cls(0.0, np.zeros(n), np.zeros((n, n)))

    @classmethod
    def from_derivatives(cls, value: float, grad, hess) -> "Quadratic":
        """Taylor form ``value + grad.x + x^T hess x / 2``."""
        return cls(value, grad, 0.5 * np.asarray(hess, dtype=float))

    @property
    def dim(self) -> int:
        return self.b.size

    @property
    def hessian(self) -> np.ndarray:
        return 2.0 * self.C

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.a0 + x @ self.b + np.einsum("...i,ij,...j->...", x, self.C, x)

    def gradient(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.b + 2.0 * x @ self.C

    def norm(self, r: float = 1.0) -> float:
        """Scale-weighted norm ``|a0| + r|b| + r^2 ||C||`` (spectral norm on C)."""
        return abs(self.a0) + r * float(np.linalg.norm(self.b)) + r * r * float(spectral_norm(self.C))

    def scaled(self, s: float) -> "Quadratic":
        """``x -> P(s x)``."""
        return Quadratic(self.a0, s * self.b, s * s * self.C)

    def shifted(self, x0) -> "Quadratic":
        """``x -> P(x - x0)``: turns local coordinates around ``x0`` into global ones."""
        x0 = np.asarray(x0, dtype=float)
        return Quadratic(
            self.a0 - self.b @ x0 + x0 @ self.C @ x0,
            self.b - 2.0 * self.C @ x0,
            self.C,
        )

    def __add__(self, other: "Quadratic") -> "Quadratic":
        return Quadratic(self.a0 + other.a0, self.b + other.b, self.C + other.C)

    def __sub__(self, other: "Quadratic") -> "Quadratic":
        return Quadratic(self.a0 - other.a0, self.b - other.b, self.C - other.C)

    def __mul__(self, c: float) -> "Quadratic":
        return Quadratic(c * self.a0, c * self.b, c * self.C)

    __rmul__ = __mul__

    def __neg__(self) -> "Quadratic":
        return self * -1.0

    def allclose(self, other: "Quadratic", atol: float = 1e-10) -> bool:
        return (
            abs(self.a0 - other.a0) <= atol
            and np.allclose(self.b, other.b, rtol=0, atol=atol)
            and np.allclose(self.C, other.C, rtol=0, atol=atol)
        )

    def to_dict(self) -> dict:
        return {"a0": self.a0, "b": self.b.tolist(), "C": self.C.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Quadratic":
        return cls(d["a0"], d["b"], d["C"])

    def __repr__(self) -> str:
        return f"Quadratic(a0={self.a0!r}, b={self.b.tolist()!r}, C={self.C.tolist()!r})"


@dataclass(frozen=True)
class Paraboloid:
    """Concave paraboloid ``-(a/2)|x - y|^2 + const`` of opening ``a`` centred at ``y``."""

    opening: float
    center: tuple[float, ...]
    const: float = 0.0

    def __post_init__(self):
        if not self.opening > 0:
            raise ValueError("opening must be positive")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    def __call__(self, x) -> np.ndarray:
        d = np.asarray(x, dtype=float) - np.asarray(self.center)
        return -0.5 * self.opening * np.sum(d * d, axis=-1) + self.const

    def as_quadratic(self) -> Quadratic:
        n = len(self.center)
        y = np.asarray(self.center)
        a = self.opening
        return Quadratic(self.const - 0.5 * a * (y @ y), a * y, -0.5 * a * np.eye(n))


# ---------------------------------------------------------------------------
# lower envelope of parabolas
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _envelope_lines(f, c, vals, args):  # pragma: no cover - compiled
    L, N = f.shape
    v = np.empty(N, dtype=np.int64)
    z = np.empty(N + 1, dtype=np.float64)
    for line in range(L):
        k = -1
        for q in range(N):
            fq = f[line, q]
            if not np.isfinite(fq):
                continue
            if k < 0:
                k = 0
                v[0] = q
                z[0] = -np.inf
                z[1] = np.inf
                continue
            s = 0.0
            while True:
                r = v[k]
                s = ((fq + c * (q * q)) - (f[line, r] + c * (r * r))) / (2.0 * c * (q - r))
                if s <= z[k]:
                    k -= 1
                else:
                    break
            k += 1
            v[k] = q
            z[k] = s
            z[k + 1] = np.inf
        if k < 0:
            for p in range(N):
                vals[line, p] = np.inf
                args[line, p] = 0
            continue
        j = 0
        for p in range(N):
            while z[j + 1] < p:
                j += 1
            best = v[j]
            d = p - best
            bv = f[line, best] + c * (d * d)
            if j > 0:
                q = v[j - 1]
                d = p - q
                cv = f[line, q] + c * (d * d)
                if cv <= bv:
                    best = q
                    bv = cv
            if j < k:
                q = v[j + 1]
                d = p - q
                cv = f[line, q] + c * (d * d)
                if cv < bv:
                    best = q
                    bv = cv
            vals[line, p] = bv
            args[line, p] = best


def lower_envelope_1d(f: np.ndarray, c: float) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise ``g[p] = min_q f[q] + c (p - q)^2`` with the smallest minimising ``q``.

    ``f`` is 1-D or 2-D (rows are independent lines); non-finite entries are skipped.
    """
    if not c > 0:
        raise ValueError("parabola weight must be positive")
    f = np.asarray(f, dtype=np.float64)
    lines = np.ascontiguousarray(np.atleast_2d(f))
    vals = np.empty_like(lines)
    args = np.empty(lines.shape, dtype=np.int64)
    _envelope_lines(lines, float(c), vals, args)
    return vals.reshape(f.shape), args.reshape(f.shape)


def separable_min(values: np.ndarray, c: float, track: bool = True):
    """``g(j) = min_i values(i) + c |i - j|^2`` over index vectors, axis by axis.

    Axes are swept last to first, so exact ties resolve to the smallest C-order
    index.  With ``track`` the full minimising index is returned, shape
    ``values.shape + (ndim,)``.
    """
    g = np.asarray(values, dtype=np.float64)
    n = g.ndim
    W = np.moveaxis(np.indices(g.shape), 0, -1) if track else None
    for axis in reversed(range(n)):
        moved = np.moveaxis(g, axis, -1)
        vals, args = lower_envelope_1d(moved.reshape(-1, moved.shape[-1]), c)
        g = np.moveaxis(vals.reshape(moved.shape), -1, axis)
        if track:
            amin = np.moveaxis(args.reshape(moved.shape), -1, axis)
            idx = np.repeat(amin[..., None], n, axis=-1)
            W = np.take_along_axis(W, idx, axis=axis)
    return g, W


def _masked_values(u: GridFunction) -> np.ndarray:
    return np.where(u.domain.members, u.values, np.inf)


def jensen_envelope(u: GridFunction, eps: float) -> GridFunction:
    """Inf-convolution ``u_eps(x) = min_{y in domain} u(y) + |y - x|^2 / eps`` at every node."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    h = u.grid.h
    g, _ = separable_min(_masked_values(u), h * h / eps, track=False)
    return u.with_values(g)


# ---------------------------------------------------------------------------
# contact sets
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class ContactSet:
    """Touch points of paraboloids of one opening centred at the nodes of ``centers``."""

    grid: Grid
    opening: float
    centers: Mask
    center_indices: np.ndarray  # (m, n), C order
    witness: np.ndarray  # (m, n): touch node serving each center
    contact_values: np.ndarray  # (m,): u(x) + (a/2)|x - y|^2
    touch: Mask
    interior: Mask

    @property
    def excluded(self) -> int:
        """Touch nodes that are not interior."""
        return self.touch.count - self.interior.count

    def vertex_map(self) -> dict[tuple[int, ...], list[tuple[int, ...]]]:
        out: dict[tuple[int, ...], list[tuple[int, ...]]] = {}
        for y, x in zip(map(tuple, self.center_indices.tolist()), map(tuple, self.witness.tolist())):
            out.setdefault(x, []).append(y)
        return out

    def to_dict(self) -> dict:
        return {
            "opening": self.opening,
            "dim": self.grid.dim,
            "resolution": self.grid.resolution,
            "touch_nodes": self.touch.indices().tolist(),
            "vertex_pairs": [
                {"center": y, "touch": x}
                for y, x in zip(self.center_indices.tolist(), self.witness.tolist())
            ],
            "summary": {
                "centers": self.centers.count,
                "centers_measure": self.centers.measure,
                "touch": self.touch.count,
                "touch_measure": self.touch.measure,
                "interior_touch": self.interior.count,
                "interior_touch_measure": self.interior.measure,
                "excluded_noninterior": self.excluded,
            },
        }


def interior_mask(grid: Grid) -> Mask:
    """Nodes with ``|x| < 1 - 2h`` (touch points whose stencils stay in the open ball)."""
    return grid.open_ball(1.0 - 2.0 * grid.h)


def _build_contact_set(u, a, V, witness_idx):
    grid = u.grid
    centers = V.indices()
    touch = np.zeros(grid.shape, dtype=bool)
    if centers.size:
        touch[tuple(witness_idx.T)] = True
    touch_mask = Mask(grid, touch)
    X = grid.coords[tuple(witness_idx.T)] if centers.size else np.zeros((0, grid.dim))
    Y = grid.coords[tuple(centers.T)] if centers.size else np.zeros((0, grid.dim))
    uv = u.values[tuple(witness_idx.T)] if centers.size else np.zeros(0)
    cv = uv + 0.5 * a * np.sum((X - Y) ** 2, axis=-1)
    return ContactSet(
        grid=grid,
        opening=float(a),
        centers=V,
        center_indices=centers,
        witness=witness_idx,
        contact_values=cv,
        touch=touch_mask,
        interior=touch_mask & interior_mask(grid),
    )


def contact_set(u: GridFunction, a: float, V: Mask) -> ContactSet:
    """All touch points ``T_a(V)`` via one envelope sweep with witness tracking.

    Each center gets the lexicographically smallest minimiser of
    ``u(z) + (a/2)|z - y|^2`` over the domain nodes.
    """
    if not a > 0:
        raise ValueError("opening must be positive")
    if V.grid != u.grid:
        raise GridError("center mask lives on a different grid")
    if u.domain.is_empty():
        raise GridError("empty domain mask")
    h = u.grid.h
    _, W = separable_min(_masked_values(u), 0.5 * a * h * h, track=True)
    centers = V.indices()
    witness = W[tuple(centers.T)] if centers.size else np.zeros((0, u.grid.dim), dtype=int)
    return _build_contact_set(u, a, V, witness)


def contact_set_bruteforce(u: GridFunction, a: float, V: Mask) -> ContactSet:
    """Per-center full scan; the reference the sweep is tested against.

    The objective is accumulated in the same order as the sweep (last axis
    first) so both see identical floating-point values.
    """
    grid = u.grid
    h = grid.h
    c = 0.5 * a * h * h
    base = _masked_values(u).ravel()
    idx = np.indices(grid.shape).reshape(grid.dim, -1)
    centers = V.indices()
    witness = np.zeros(centers.shape, dtype=int)
    for m, j in enumerate(centers):
        val = base.copy()
        for axis in reversed(range(grid.dim)):
            d = idx[axis] - j[axis]
            val = val + c * (d * d)
        k = int(np.argmin(val))
        witness[m] = np.unravel_index(k, grid.shape)
    return _build_contact_set(u, a, V, witness)


def slide_contact(u: GridFunction, a: float, y: Sequence[float], tie_tol: float = 1e-13):
    """Slide ``P_{a,y}`` up until it touches ``u``; return all touch nodes and the contact value.

    Touch nodes are the minimisers of ``u(z) + (a/2)|z - y|^2`` over domain nodes,
    ties taken within ``tie_tol * (1 + |min|)``.
    """
    if not a > 0:
        raise ValueError("opening must be positive")
    dom = u.domain.members
    if not dom.any():
        raise GridError("empty domain mask")
    y = np.asarray(y, dtype=float)
    X = u.grid.coords[dom]
    obj = u.values[dom] + 0.5 * a * np.sum((X - y) ** 2, axis=-1)
    m = float(np.min(obj))
    ties = obj <= m + tie_tol * (1.0 + abs(m))
    nodes = np.argwhere(dom)[ties]
    return nodes, m


def vertex_recovery(u: GridFunction, a: float, index: Sequence[int]) -> np.ndarray:
    """Center of the touching paraboloid from the slope at an interior touch node."""
    grid = u.grid
    idx = tuple(int(i) for i in index)
    if not interior_mask(grid).members[idx]:
        raise StencilError(f"node {idx} is not interior (|x| < 1 - 2h)")
    return grid.point(idx) + gradient_at(u, idx) / a


@dataclass
class HessianBoundReport:
    opening: float
    upper_factor: float
    tolerance: float
    checked: int
    lower_violations: int
    upper_violations: int
    min_eigenvalue: float
    max_eigenvalue: float

    @property
    def violations(self) -> int:
        return self.lower_violations + self.upper_violations

    @property
    def ok(self) -> bool:
        return self.violations == 0

    def to_dict(self) -> dict:
        return dict(self.__dict__, violations=self.violations, ok=self.ok)


def contact_hessian_check(
    cs: ContactSet, u: GridFunction, a: float, Gamma: float, c_tol: float = 10.0
) -> HessianBoundReport:
    """Eigenvalues of the discrete Hessian at interior touch nodes against ``[-a, Gamma a]``."""
    grid = u.grid
    sel = cs.interior.members & grid.margin_mask(2).members
    H = hessian_field(u)[sel]
    tau = c_tol * grid.h
    if H.shape[0] == 0:
        return HessianBoundReport(a, Gamma, tau, 0, 0, 0, float("nan"), float("nan"))
    ev = sym_eigenvalues(H)
    lo = ev[:, 0] < -a - tau
    hi = ev[:, -1] > Gamma * a + tau
    return HessianBoundReport(
        opening=a,
        upper_factor=Gamma,
        tolerance=tau,
        checked=int(H.shape[0]),
        lower_violations=int(np.count_nonzero(lo)),
        upper_violations=int(np.count_nonzero(hi)),
        min_eigenvalue=float(ev[:, 0].min()),
        max_eigenvalue=float(ev[:, -1].max()),
    )


def line_second_differences(u: GridFunction, index: Sequence[int]) -> dict[tuple[int, ...], float]:
    """``(u(x + he) - 2u(x) + u(x - he)) / (h^2 |e|^2)`` for axis and diagonal steps ``e``."""
    grid = u.grid
    idx = np.asarray(index, dtype=int)
    n = grid.dim
    steps = []
    for i in range(n):
        e = np.zeros(n, dtype=int)
        e[i] = 1
        steps.append(e)
        for j in range(i + 1, n):
            for s in (1, -1):
                e2 = np.zeros(n, dtype=int)
                e2[i], e2[j] = 1, s
                steps.append(e2)
    out = {}
    v = u.values
    for e in steps:
        p, m = idx + e, idx - e
        if np.any(p >= grid.resolution) or np.any(m < 0):
            raise StencilError(f"stencil at {tuple(idx)} leaves the grid")
        out[tuple(e.tolist())] = float(
            (v[tuple(p)] - 2.0 * v[tuple(idx)] + v[tuple(m)]) / (grid.h**2 * float(e @ e))
        )
    return out
