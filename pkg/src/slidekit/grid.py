"""Uniform Cartesian grids on [-1, 1]^n, masks, grid functions and discrete calculus.

Node ``i = (i_0, ..., i_{n-1})`` sits at ``x = -1 + i * h`` with ``h = 2 / (N - 1)``;
array axis ``k`` carries the coordinate ``x_{k+1}``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

# closed-ball membership slack, in units of r^2; keeps nodes exactly on a sphere inside
_BALL_SLACK = 1e-12


class GridError(ValueError):
    """Raised for invalid grids or incompatible grid objects."""


class StencilError(GridError):
    """Raised when a finite-difference stencil leaves the grid."""


class EmptyRegionError(GridError):
    """Raised when a reduction is requested over an empty mask."""


@dataclass(frozen=True)
class Grid:
    dim: int
    resolution: int

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise GridError(f"dim must be 1, 2 or 3, got {self.dim}")
        if self.resolution < 9 or self.resolution % 2 == 0:
            raise GridError(f"resolution must be odd and >= 9, got {self.resolution}")

    @property
    def h(self) -> float:
        return 2.0 / (self.resolution - 1)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.resolution,) * self.dim

    @property
    def center_index(self) -> tuple[int, ...]:
        return ((self.resolution - 1) // 2,) * self.dim

    @property
    def cell_volume(self) -> float:
        return self.h**self.dim

    @cached_property
    def axis(self) -> np.ndarray:
        return -1.0 + np.arange(self.resolution) * self.h

    @cached_property
    def coords(self) -> np.ndarray:
        """Node coordinates, shape ``shape + (dim,)``."""
        mesh = np.meshgrid(*([self.axis] * self.dim), indexing="ij")
        return np.stack(mesh, axis=-1)

    @cached_property
    def radius(self) -> np.ndarray:
        return np.sqrt(np.sum(self.coords**2, axis=-1))

    def point(self, index: Sequence[int]) -> np.ndarray:
        return self.axis[np.asarray(index)]

    def nearest_index(self, x: Sequence[float]) -> tuple[int, ...]:
        x = np.asarray(x, dtype=float)
        i = np.rint((x + 1.0) / self.h).astype(int)
        return tuple(np.clip(i, 0, self.resolution - 1).tolist())

    def ball(self, r: float, center: Sequence[float] | None = None) -> "Mask":
        """Closed ball ``|x - center| <= r`` as a node mask."""
        if center is None:
            d2 = self.radius**2
        else:
            c = np.asarray(center, dtype=float)
            d2 = np.sum((self.coords - c) ** 2, axis=-1)
        return Mask(self, d2 <= r * r * (1.0 + _BALL_SLACK))

    def open_ball(self, r: float, center: Sequence[float] | None = None) -> "Mask":
        if center is None:
            d2 = self.radius**2
        else:
            c = np.asarray(center, dtype=float)
            d2 = np.sum((self.coords - c) ** 2, axis=-1)
        return Mask(self, d2 < r * r * (1.0 - _BALL_SLACK))

    def full(self) -> "Mask":
        return Mask(self, np.ones(self.shape, dtype=bool))

    def empty(self) -> "Mask":
        return Mask(self, np.zeros(self.shape, dtype=bool))

    def margin_mask(self, margin: int = 2) -> "Mask":
        """Nodes at least ``margin`` index steps from every grid face."""
        m = np.zeros(self.shape, dtype=bool)
        inner = tuple(slice(margin, self.resolution - margin) for _ in range(self.dim))
        m[inner] = True
        return Mask(self, m)

    def sample(self, fn) -> "GridFunction":
        """Evaluate ``fn(coords)`` (coords has trailing axis ``dim``) on all nodes."""
        return GridFunction(self, np.asarray(fn(self.coords), dtype=float))


@dataclass(frozen=True, eq=False)
class Mask:
    grid: Grid
    members: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.members, dtype=bool)
        if m.shape != self.grid.shape:
            raise GridError(f"mask shape {m.shape} does not match grid {self.grid.shape}")
        object.__setattr__(self, "members", m)

    def _check(self, other: "Mask") -> None:
        if other.grid != self.grid:
            raise GridError("masks live on different grids")

    def __or__(self, other: "Mask") -> "Mask":
        self._check(other)
        return Mask(self.grid, self.members | other.members)

    def __and__(self, other: "Mask") -> "Mask":
        self._check(other)
        return Mask(self.grid, self.members & other.members)

    def __sub__(self, other: "Mask") -> "Mask":
        self._check(other)
        return Mask(self.grid, self.members & ~other.members)

    def __invert__(self) -> "Mask":
        return Mask(self.grid, ~self.members)

    def __eq__(self, other) -> bool:
        return isinstance(other, Mask) and other.grid == self.grid and bool(
            np.array_equal(self.members, other.members)
        )

    def __le__(self, other: "Mask") -> bool:
        self._check(other)
        return not bool(np.any(self.members & ~other.members))

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.members))

    @property
    def measure(self) -> float:
        return self.count * self.grid.cell_volume

    def is_empty(self) -> bool:
        return self.count == 0

    def indices(self) -> np.ndarray:
        """Member node indices, shape ``(count, dim)``, in C order."""
        return np.argwhere(self.members)


def default_domain(grid: Grid, radius: float = 1.0) -> Mask:
    return grid.ball(radius)


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Real values on every node of ``grid``; only ``domain`` nodes are meaningful."""

    grid: Grid
    values: np.ndarray
    domain: Mask | None = None
    radius: float = 1.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.grid.shape:
            raise GridError(f"values shape {v.shape} does not match grid {self.grid.shape}")
        object.__setattr__(self, "values", v)
        if self.domain is None:
            object.__setattr__(self, "domain", default_domain(self.grid, self.radius))
        elif self.domain.grid != self.grid:
            raise GridError("domain mask lives on a different grid")
        if not np.all(np.isfinite(v[self.domain.members])):
            raise GridError("values must be finite on the domain mask")

    def with_values(self, values: np.ndarray) -> "GridFunction":
        return GridFunction(self.grid, values, self.domain, self.radius)

    def _check(self, other: "GridFunction") -> None:
        if other.grid != self.grid:
            raise GridError("grid functions live on different grids")

    def __add__(self, other):
        if isinstance(other, GridFunction):
            self._check(other)
            return self.with_values(self.values + other.values)
        return self.with_values(self.values + other)

    def __sub__(self, other):
        if isinstance(other, GridFunction):
            self._check(other)
            return self.with_values(self.values - other.values)
        return self.with_values(self.values - other)

    def __mul__(self, c: float):
        return self.with_values(self.values * c)

    __rmul__ = __mul__

    def __neg__(self):
        return self.with_values(-self.values)

    def sup_norm(self, mask: Mask | None = None) -> float:
        m = self.domain if mask is None else mask
        if m.is_empty():
            raise EmptyRegionError("sup norm over an empty mask")
        return float(np.max(np.abs(self.values[m.members])))

    def min(self, mask: Mask | None = None) -> float:
        m = self.domain if mask is None else mask
        if m.is_empty():
            raise EmptyRegionError("minimum over an empty mask")
        return float(np.min(self.values[m.members]))

    def max(self, mask: Mask | None = None) -> float:
        m = self.domain if mask is None else mask
        if m.is_empty():
            raise EmptyRegionError("maximum over an empty mask")
        return float(np.max(self.values[m.members]))


# ---------------------------------------------------------------------------
# discrete calculus
# ---------------------------------------------------------------------------


def _check_interior(grid: Grid, index: Sequence[int], margin: int = 2) -> tuple[int, ...]:
    idx = tuple(int(i) for i in index)
    if len(idx) != grid.dim:
        raise StencilError(f"index {idx} has wrong length for dim {grid.dim}")
    for i in idx:
        if i < margin or i > grid.resolution - 1 - margin:
            raise StencilError(f"node {idx} is closer than {margin} nodes to the grid boundary")
    return idx


def hessian_at(u: GridFunction, index: Sequence[int]) -> np.ndarray:
    """Central-difference Hessian at one node.

    Diagonal entries use the three-point second difference, off-diagonal entries
    the four-point cross stencil; both are exact on quadratics.
    """
    g = u.grid
    idx = _check_interior(g, index)
    v = u.values
    h2 = g.h * g.h
    n = g.dim
    H = np.empty((n, n))

    def at(shift):
        return v[tuple(i + s for i, s in zip(idx, shift))]

    for a in range(n):
        e = [0] * n
        e[a] = 1
        em = [-s for s in e]
        H[a, a] = (at(e) - 2.0 * v[idx] + at(em)) / h2
        for b in range(a + 1, n):
            pp = [0] * n
            pp[a], pp[b] = 1, 1
            pm = [0] * n
            pm[a], pm[b] = 1, -1
            mp = [-s for s in pm]
            mm = [-s for s in pp]
            H[a, b] = H[b, a] = (at(pp) - at(pm) - at(mp) + at(mm)) / (4.0 * h2)
    return H


def gradient_at(u: GridFunction, index: Sequence[int]) -> np.ndarray:
    g = u.grid
    idx = _check_interior(g, index, margin=1)
    v = u.values
    out = np.empty(g.dim)
    for a in range(g.dim):
        ip = list(idx)
        im = list(idx)
        ip[a] += 1
        im[a] -= 1
        out[a] = (v[tuple(ip)] - v[tuple(im)]) / (2.0 * g.h)
    return out


def _shift(v: np.ndarray, offset: Sequence[int]) -> np.ndarray:
    """``out[i] = v[i + offset]`` on the inner block that keeps a 1-node margin."""
    sl = tuple(slice(1 + o, v.shape[k] - 1 + o) for k, o in enumerate(offset))
    return v[sl]


def hessian_field(u: GridFunction) -> np.ndarray:
    """Hessians at every node with a 1-node margin; NaN on the outer layer.

    Shape ``grid.shape + (dim, dim)``.  Same stencils as :func:`hessian_at`.
    """
    g = u.grid
    n = g.dim
    v = u.values
    h2 = g.h * g.h
    out = np.full(g.shape + (n, n), np.nan)
    inner = tuple(slice(1, g.resolution - 1) for _ in range(n))
    zero = [0] * n
    c = _shift(v, zero)
    for a in range(n):
        e = list(zero)
        e[a] = 1
        out[inner + (a, a)] = (_shift(v, e) - 2.0 * c + _shift(v, [-s for s in e])) / h2
        for b in range(a + 1, n):
            pp = list(zero)
            pp[a], pp[b] = 1, 1
            pm = list(zero)
            pm[a], pm[b] = 1, -1
            cross = (
                _shift(v, pp) - _shift(v, pm) - _shift(v, [-s for s in pm]) + _shift(v, [-s for s in pp])
            ) / (4.0 * h2)
            out[inner + (a, b)] = cross
            out[inner + (b, a)] = cross
    return out


def gradient_field(u: GridFunction) -> np.ndarray:
    """Central-difference gradients, NaN on the outer layer; shape ``grid.shape + (dim,)``."""
    g = u.grid
    n = g.dim
    out = np.full(g.shape + (n,), np.nan)
    inner = tuple(slice(1, g.resolution - 1) for _ in range(n))
    for a in range(n):
        e = [0] * n
        e[a] = 1
        out[inner + (a,)] = (_shift(u.values, e) - _shift(u.values, [-s for s in e])) / (2.0 * g.h)
    return out


def oscillation(u: GridFunction, mask: Mask) -> float:
    """``max - min`` of ``u`` over ``mask``."""
    if mask.is_empty():
        raise EmptyRegionError("oscillation over an empty mask")
    vals = u.values[mask.members]
    return float(np.max(vals) - np.min(vals))


def distribution_measure(u: GridFunction, mask: Mask, t: float) -> float:
    """``h^n * #{i in mask : u(i) > t}``."""
    return int(np.count_nonzero(u.values[mask.members] > t)) * u.grid.cell_volume


def sym_eigenvalues(M: np.ndarray) -> np.ndarray:
    """Ascending eigenvalues of a symmetric matrix (or a stack of them)."""
    M = np.asarray(M, dtype=float)
    return np.linalg.eigvalsh(M)


def as_sym(M) -> np.ndarray:
    """Symmetric matrix from the upper triangle of ``M``."""
    M = np.asarray(M, dtype=float)
    upper = np.triu(M)
    return upper + np.triu(M, 1).swapaxes(-1, -2)


def spectral_norm(M: np.ndarray) -> np.ndarray | float:
    ev = sym_eigenvalues(M)
    return np.max(np.abs(ev), axis=-1)
