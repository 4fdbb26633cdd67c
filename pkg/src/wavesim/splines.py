"""Non-uniform B-spline primitives: evaluation, derivatives, knot insertion,
Gauss quadrature.

Conventions: clamped (open) knot vectors with k-fold end knots, simple
interior knots, right-continuous basis functions with the left limit taken
at the right endpoint of the domain.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np


class InvalidGrid(ValueError):
    pass


class InvalidOrder(ValueError):
    pass


class OutOfDomain(ValueError):
    pass


class DuplicateKnot(ValueError):
    pass


class InvalidSpan(ValueError):
    pass


@dataclass(frozen=True)
class KnotGrid:
    """Strictly increasing breakpoints plus derived clamped knot vector."""

    breakpoints: tuple
    order: int
    knots: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        if self.order < 2:
            raise InvalidOrder(f"spline order must be >= 2, got {self.order}")
        if bp.size < 2 or np.any(np.diff(bp) <= 0):
            raise InvalidGrid("breakpoints must be strictly increasing, >= 2 of them")
        object.__setattr__(self, "breakpoints", tuple(bp))
        k = self.order
        knots = np.concatenate([np.full(k, bp[0]), bp[1:-1], np.full(k, bp[-1])])
        object.__setattr__(self, "knots", knots)

    @property
    def a(self):
        return self.breakpoints[0]

    @property
    def b(self):
        return self.breakpoints[-1]

    @property
    def nspans(self):
        return len(self.breakpoints) - 1

    @property
    def dim(self):
        """Dimension of the spline space: #spans + order - 1."""
        return self.nspans + self.order - 1

    def span_of(self, t):
        """Index of the breakpoint span containing t (right-continuous)."""
        if t < self.a or t > self.b:
            raise OutOfDomain(f"t={t} outside [{self.a}, {self.b}]")
        i = int(np.searchsorted(self.breakpoints, t, side="right")) - 1
        return min(i, self.nspans - 1)

    def greville(self):
        """Greville abscissae (knot averages), one per basis function."""
        k = self.order
        return np.array([self.knots[i + 1:i + k].mean() for i in range(self.dim)])


def make_knot_grid(breakpoints, order):
    return KnotGrid(tuple(float(b) for b in breakpoints), int(order))


def _find_span(grid: KnotGrid, t: float) -> int:
    """Knot span index i with knots[i] <= t < knots[i+1] (left limit at b)."""
    knots, k = grid.knots, grid.order
    n = grid.dim - 1
    if t >= grid.b:
        return n
    i = int(np.searchsorted(knots, t, side="right")) - 1
    return min(max(i, k - 1), n)


def basis_and_derivs(grid: KnotGrid, t: float, nu: int):
    """All `order` nonzero basis functions and derivatives 0..nu at t.

    Returns (first_index, ders) where ders has shape (nu+1, order) and
    ders[d, j] is the d-th derivative of B_{first_index+j}(t).
    """
    if t < grid.a or t > grid.b:
        raise OutOfDomain(f"t={t} outside [{grid.a}, {grid.b}]")
    knots, k = grid.knots, grid.order
    p = k - 1
    i = _find_span(grid, t)
    ndu = np.zeros((k, k))
    ndu[0, 0] = 1.0
    left = np.zeros(k)
    right = np.zeros(k)
    for j in range(1, k):
        left[j] = t - knots[i + 1 - j]
        right[j] = knots[i + j] - t
        saved = 0.0
        for r in range(j):
            ndu[j, r] = right[r + 1] + left[j - r]
            temp = ndu[r, j - 1] / ndu[j, r]
            ndu[r, j] = saved + right[r + 1] * temp
            saved = left[j - r] * temp
        ndu[j, j] = saved
    nd = min(nu, p)
    ders = np.zeros((nu + 1, k))
    ders[0, :] = ndu[:, p]
    a = np.zeros((2, k))
    for r in range(k):
        s1, s2 = 0, 1
        a[0, :] = 0.0
        a[0, 0] = 1.0
        for d in range(1, nd + 1):
            dv = 0.0
            rk, pk = r - d, p - d
            if r >= d:
                a[s2, 0] = a[s1, 0] / ndu[pk + 1, rk]
                dv = a[s2, 0] * ndu[rk, pk]
            j1 = 1 if rk >= -1 else -rk
            j2 = d - 1 if r - 1 <= pk else p - r
            for j in range(j1, j2 + 1):
                a[s2, j] = (a[s1, j] - a[s1, j - 1]) / ndu[pk + 1, rk + j]
                dv += a[s2, j] * ndu[rk + j, pk]
            if r <= pk:
                a[s2, d] = -a[s1, d - 1] / ndu[pk + 1, r]
                dv += a[s2, d] * ndu[r, pk]
            ders[d, r] = dv
            s1, s2 = s2, s1
    fac = float(p)
    for d in range(1, nd + 1):
        ders[d, :] *= fac
        fac *= p - d
    return i - p, ders


def bspline_eval(grid: KnotGrid, index: int, t: float) -> float:
    first, ders = basis_and_derivs(grid, t, 0)
    j = index - first
    if 0 <= j < grid.order:
        return float(ders[0, j])
    return 0.0


def bspline_deriv(grid: KnotGrid, index: int, t: float, nu: int) -> float:
    if nu >= grid.order:
        return 0.0
    first, ders = basis_and_derivs(grid, t, nu)
    j = index - first
    if 0 <= j < grid.order:
        return float(ders[nu, j])
    return 0.0


def design_matrix(grid: KnotGrid, ts, nu: int = 0) -> np.ndarray:
    """Dense matrix D with D[q, i] = (d/dt)^nu B_i(ts[q]).

    Vectorized over the evaluation points: the Cox-de Boor triangle builds
    the order (k - nu) values, then nu difference steps raise the order while
    differentiating (terms with a zero knot-difference denominator vanish).
    """
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    k = grid.order
    out = np.zeros((ts.size, grid.dim))
    if nu >= k or ts.size == 0:
        return out
    if np.any(ts < grid.a) or np.any(ts > grid.b):
        raise OutOfDomain(f"points outside [{grid.a}, {grid.b}]")
    knots = grid.knots
    i = np.searchsorted(knots, ts, side="right") - 1
    i = np.clip(i, k - 1, grid.dim - 1)
    i[ts >= grid.b] = grid.dim - 1

    m = k - nu
    N = np.ones((ts.size, 1))
    for j in range(1, m):
        right = [knots[i + r + 1] - ts for r in range(j)]
        left = [ts - knots[i + 1 - j + r] for r in range(j)]
        Nn = np.zeros((ts.size, j + 1))
        saved = np.zeros(ts.size)
        for r in range(j):
            temp = N[:, r] / (right[r] + left[r])
            Nn[:, r] = saved + right[r] * temp
            saved = left[r] * temp
        Nn[:, j] = saved
        N = Nn

    # raise the order by one per differentiation: values of D^s B of order
    # o+1 from D^(s-1) B of order o, nonzero first index dropping by one
    for o in range(m, k):
        Nn = np.zeros((ts.size, o + 1))
        for r in range(o + 1):
            j = i - o + r  # basis index of the target entry
            if r > 0:
                den = knots[j + o] - knots[j]
                Nn[:, r] += np.divide(
                    o * N[:, r - 1], den, out=np.zeros(ts.size), where=den != 0
                )
            if r < o:
                den = knots[j + o + 1] - knots[j + 1]
                Nn[:, r] -= np.divide(
                    o * N[:, r], den, out=np.zeros(ts.size), where=den != 0
                )
        N = Nn

    first = i - (k - 1)
    cols = first[:, None] + np.arange(k)[None, :]
    out[np.arange(ts.size)[:, None], cols] = N
    return out


@dataclass(frozen=True)
class SplineCoeffs:
    """Vector-valued spline: one coefficient row per circuit unknown."""

    grid: KnotGrid
    coeffs: np.ndarray  # shape (n_unknowns, grid.dim)

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.coeffs, dtype=float))
        if c.shape[1] != self.grid.dim:
            raise InvalidGrid(
                f"coefficient columns {c.shape[1]} != spline dimension {self.grid.dim}"
            )
        object.__setattr__(self, "coeffs", c)

    @property
    def nunknowns(self):
        return self.coeffs.shape[0]


def eval_expansion(sc: SplineCoeffs, t, nu: int = 0) -> np.ndarray:
    """Per-unknown nu-th derivative of the expansion at scalar or array t."""
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    D = design_matrix(sc.grid, ts, nu)
    vals = sc.coeffs @ D.T  # (n_unknowns, len(ts))
    if np.isscalar(t) or np.asarray(t).ndim == 0:
        return vals[:, 0]
    return vals


def insert_knot(sc: SplineCoeffs, t_new: float) -> SplineCoeffs:
    """Boehm knot insertion; the returned expansion represents the same
    function on the grid with t_new added as a breakpoint."""
    grid = sc.grid
    if not (grid.a < t_new < grid.b):
        raise OutOfDomain(f"insertion point {t_new} not inside ({grid.a}, {grid.b})")
    if t_new in grid.breakpoints:
        raise DuplicateKnot(f"{t_new} is already a breakpoint")
    new_coeffs, _ = _boehm(grid, sc.coeffs, t_new)
    new_grid = make_knot_grid(sorted(grid.breakpoints + (t_new,)), grid.order)
    return SplineCoeffs(new_grid, new_coeffs)


def _boehm(grid: KnotGrid, coeffs: np.ndarray, u: float):
    """Single Boehm insertion. Returns (new_coeffs, blend_range) where
    blend_range is the index range of freshly blended coefficients."""
    knots, k = grid.knots, grid.order
    n = coeffs.shape[1]
    p = int(np.searchsorted(knots, u, side="right")) - 1
    out = np.zeros((coeffs.shape[0], n + 1))
    lo, hi = p - k + 2, p  # blended indices, inclusive
    out[:, :lo] = coeffs[:, :lo]
    for i in range(lo, hi + 1):
        alpha = (u - knots[i]) / (knots[i + k - 1] - knots[i])
        out[:, i] = alpha * coeffs[:, i] + (1.0 - alpha) * coeffs[:, i - 1]
    out[:, hi + 1:] = coeffs[:, hi:]
    return out, (lo, hi)


@dataclass(frozen=True)
class QuadratureRule:
    nodes: np.ndarray
    weights: np.ndarray


@lru_cache(maxsize=32)
def _leggauss(npoints: int):
    return np.polynomial.legendre.leggauss(npoints)


def gauss_rule(span, npoints: int) -> QuadratureRule:
    """Gauss-Legendre rule mapped onto the span [t0, t1]."""
    t0, t1 = float(span[0]), float(span[1])
    if not t1 > t0:
        raise InvalidSpan(f"degenerate span [{t0}, {t1}]")
    if npoints < 1:
        raise InvalidSpan(f"need >= 1 quadrature point, got {npoints}")
    x, w = _leggauss(npoints)
    half = 0.5 * (t1 - t0)
    mid = 0.5 * (t0 + t1)
    return QuadratureRule(mid + half * x, half * w)
