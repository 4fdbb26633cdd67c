"""Multiresolution machinery over nested non-uniform grids.

A hierarchy is a coarse grid plus, per level, the set of span midpoints
inserted to form the next finer grid. Details are deviations from the
knot-insertion prediction: going from level j to j+1 the coefficient vector
satisfies c_{j+1} = P_j a_j + W_j d_j, where P_j is the knot-insertion
matrix and W_j holds unit columns at one "new" coefficient slot per
inserted midpoint. Both directions are exact, so decompose/reconstruct
round-trip to machine precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .splines import KnotGrid, SplineCoeffs, _boehm, eval_expansion, make_knot_grid


class GridMismatch(ValueError):
    pass


class AlreadyRefined(ValueError):
    pass


class LevelCapExceeded(ValueError):
    pass


def _midpoint(a, b):
    return 0.5 * (a + b)


@dataclass(frozen=True)
class GridHierarchy:
    """Nested breakpoint grids; level 0 coarsest.

    midpoints[j] holds the (sorted) midpoints inserted into the level-j grid
    to form level j+1; each refined span contributes exactly one midpoint.
    """

    base: KnotGrid
    midpoints: tuple = ()  # tuple of tuples of floats, one per level transition
    max_level: int = 8
    _levels: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        levels = [self.base]
        for j, mids in enumerate(self.midpoints):
            bp = np.array(levels[j].breakpoints)
            spans = list(zip(bp[:-1], bp[1:]))
            valid = {_midpoint(a, b) for a, b in spans}
            for m in mids:
                if m not in valid:
                    raise GridMismatch(
                        f"{m} is not a span midpoint of level {j}"
                    )
            new_bp = np.sort(np.concatenate([bp, np.array(mids, dtype=float)]))
            levels.append(make_knot_grid(new_bp, self.base.order))
        if len(levels) - 1 > self.max_level:
            raise LevelCapExceeded(
                f"{len(levels) - 1} levels exceed cap {self.max_level}"
            )
        object.__setattr__(self, "midpoints", tuple(tuple(sorted(m)) for m in self.midpoints))
        object.__setattr__(self, "_levels", tuple(levels))

    @property
    def levels(self):
        return self._levels

    @property
    def nlevels(self):
        return len(self._levels)

    @property
    def finest(self) -> KnotGrid:
        return self._levels[-1]

    def active_spans(self, level):
        """Indices of level-`level` spans that were refined."""
        if level >= len(self.midpoints):
            return set()
        bp = np.array(self._levels[level].breakpoints)
        mids = _midpoint(bp[:-1], bp[1:])
        out = set()
        for m in self.midpoints[level]:
            idx = int(np.argmin(np.abs(mids - m)))
            out.add(idx)
        return out


def refine_spans(h: GridHierarchy, level: int, spans) -> GridHierarchy:
    """Insert the midpoints of the given level-`level` spans.

    Refining at the deepest level creates a new level (subject to the cap).
    Midpoints propagate to every finer grid automatically via nestedness.
    """
    if level > len(h.midpoints):
        raise GridMismatch(f"level {level} does not exist yet")
    if level == len(h.midpoints) and level + 1 > h.max_level:
        raise LevelCapExceeded(f"refining level {level} exceeds cap J={h.max_level}")
    bp = np.array(h.levels[level].breakpoints)
    mids = _midpoint(bp[:-1], bp[1:])
    existing = set(h.midpoints[level]) if level < len(h.midpoints) else set()
    new = list(existing)
    for s in spans:
        if not 0 <= s < len(mids):
            raise GridMismatch(f"span {s} out of range at level {level}")
        m = float(mids[s])
        if m in existing:
            raise AlreadyRefined(f"span {s} at level {level} already refined")
        new.append(m)
    all_mids = list(h.midpoints)
    if level == len(all_mids):
        all_mids.append(tuple(sorted(new)))
    else:
        all_mids[level] = tuple(sorted(new))
    return GridHierarchy(h.base, tuple(all_mids), h.max_level)


_TRANSITION_CACHE = {}


def transition(coarse: KnotGrid, mids):
    """Knot-insertion matrix P (fine_dim x coarse_dim) for inserting `mids`
    into `coarse`, plus slot indices: one fine coefficient index per midpoint
    (sorted order) such that [P | unit columns at slots] is invertible."""
    key = (coarse.breakpoints, coarse.order, tuple(sorted(mids)))
    hit = _TRANSITION_CACHE.get(key)
    if hit is not None:
        return hit
    mids = sorted(mids)
    coeffs = np.eye(coarse.dim)
    grid = coarse
    for m in mids:
        coeffs, _ = _boehm(grid, coeffs, m)
        grid = make_knot_grid(sorted(grid.breakpoints + (m,)), grid.order)
    P = coeffs.T  # (fine_dim, coarse_dim)
    nf, nc = P.shape
    # rows of P forming a well-conditioned square block are "old" slots;
    # the complement hosts the detail unit columns
    _, _, piv = scipy.linalg.qr(P.T, pivoting=True)
    keep = set(piv[:nc])
    slots = sorted(i for i in range(nf) if i not in keep)
    assert len(slots) == len(mids)
    if len(_TRANSITION_CACHE) > 4096:
        _TRANSITION_CACHE.clear()
    _TRANSITION_CACHE[key] = (P, slots, grid)
    return P, slots, grid


@dataclass(frozen=True)
class HierarchicalExpansion:
    """Coarse coefficients plus per-level sparse detail coefficients.

    Details are keyed by (level, midpoint); values are per-unknown columns.
    """

    hierarchy: GridHierarchy
    coarse: np.ndarray  # (n_unknowns, base.dim)
    details: dict  # (level, midpoint) -> ndarray (n_unknowns,)

    @property
    def max_level(self):
        return self.hierarchy.max_level

    def ncoeffs(self):
        return self.coarse.shape[1] + len(self.details)


def _transitions(h: GridHierarchy):
    out = []
    grid = h.base
    for mids in h.midpoints:
        P, slots, fine = transition(grid, mids)
        out.append((grid, mids, P, slots, fine))
        grid = fine
    return out


def reconstruct(he: HierarchicalExpansion) -> SplineCoeffs:
    """Spline coefficients on the finest grid; exact inverse of decompose."""
    h = he.hierarchy
    a = np.atleast_2d(np.asarray(he.coarse, dtype=float))
    for j, (grid, mids, P, slots, fine) in enumerate(_transitions(h)):
        c = a @ P.T
        for m, slot in zip(sorted(mids), slots):
            d = he.details.get((j, m))
            if d is not None:
                c[:, slot] += d
        a = c
    return SplineCoeffs(h.finest, a)


def decompose(fine: SplineCoeffs, h: GridHierarchy) -> HierarchicalExpansion:
    """Split a finest-grid expansion into coarse + per-level details."""
    if fine.grid != h.finest:
        raise GridMismatch("expansion does not live on the finest grid of the hierarchy")
    trans = _transitions(h)
    c = fine.coeffs
    details = {}
    for j in range(len(trans) - 1, -1, -1):
        grid, mids, P, slots, fgrid = trans[j]
        nf, nc = P.shape
        A = np.zeros((nf, nf))
        A[:, :nc] = P
        for col, slot in enumerate(slots):
            A[slot, nc + col] = 1.0
        sol = np.linalg.solve(A, c.T).T  # (n_unknowns, nf)
        c = sol[:, :nc]
        for col, m in enumerate(sorted(mids)):
            details[(j, m)] = sol[:, nc + col].copy()
    return HierarchicalExpansion(h, c, details)


def detail_norms(h: GridHierarchy):
    """Max-norm of each detail function, keyed like the details.

    The detail function for (level j, midpoint m) is the level-(j+1) basis
    function at the midpoint's slot; sampled at 33 points per support span.
    """
    from .splines import bspline_eval

    out = {}
    for j, (grid, mids, P, slots, fine) in enumerate(_transitions(h)):
        for m, slot in zip(sorted(mids), slots):
            k = fine.order
            lo, hi = fine.knots[slot], fine.knots[slot + k]
            ts = np.linspace(lo, hi, 33 * k + 1)
            out[(j, m)] = max(bspline_eval(fine, slot, t) for t in ts)
    return out


def _prune_hierarchy(h: GridHierarchy, surviving_keys):
    """Un-refine spans whose details all vanished.

    A midpoint without a surviving detail is kept anyway when removing it
    would invalidate the hierarchy: it is an endpoint of the span bisected by
    a surviving deeper midpoint, or it lies strictly inside the basis support
    of a surviving detail. Adjacency of kept breakpoints never changes, so a
    single sweep over the original grids suffices.
    """
    trans = _transitions(h)
    supports = []
    for j, (grid, mids, P, slots, fine) in enumerate(trans):
        for m, slot in zip(sorted(mids), slots):
            if (j, m) in surviving_keys:
                supports.append((fine.knots[slot], fine.knots[slot + fine.order]))

    mids_per_level = [set(m) for m in h.midpoints]

    def needed(j, m):
        if (j, m) in surviving_keys:
            return True
        for j2 in range(j + 1, len(mids_per_level)):
            bp = np.array(h.levels[j2].breakpoints)
            for m2 in mids_per_level[j2]:
                i = int(np.searchsorted(bp, m2))
                if 0 < i < len(bp) and m in (bp[i - 1], bp[i]):
                    return True
        return any(lo < m < hi for lo, hi in supports)

    for j in range(len(mids_per_level) - 1, -1, -1):
        mids_per_level[j] = {m for m in mids_per_level[j] if needed(j, m)}
    while mids_per_level and not mids_per_level[-1]:
        mids_per_level.pop()
    return GridHierarchy(h.base, tuple(tuple(sorted(m)) for m in mids_per_level), h.max_level)


def threshold(he: HierarchicalExpansion, eps: float):
    """Drop details whose scaled magnitude is below eps; coarsen the grid
    where possible. Returns (new expansion, dropped key set)."""
    norms = detail_norms(he.hierarchy)
    dropped = {
        key
        for key, d in he.details.items()
        if np.max(np.abs(d)) * norms[key] < eps
    }
    surviving = {k: v for k, v in he.details.items() if k not in dropped}
    if not dropped:
        return he, set()
    pruned = _prune_hierarchy(he.hierarchy, set(surviving))
    # represent the surviving function on the pruned hierarchy exactly
    kept = HierarchicalExpansion(he.hierarchy, he.coarse, surviving)
    fine = reconstruct(kept)
    restricted = restrict_to(fine, pruned.finest)
    return decompose(restricted, pruned), dropped


def restrict_to(sc: SplineCoeffs, coarse: KnotGrid) -> SplineCoeffs:
    """Represent an expansion on a coarser nested grid.

    Exact when the function lies in the coarse space (least-squares solve of
    the insertion relation); otherwise the best consistent fit.
    """
    extra = sorted(set(sc.grid.breakpoints) - set(coarse.breakpoints))
    if not extra:
        return SplineCoeffs(coarse, sc.coeffs)
    P, _, fine = transition(coarse, extra)
    if fine != sc.grid:
        raise GridMismatch("grids are not nested")
    sol, *_ = np.linalg.lstsq(P, sc.coeffs.T, rcond=None)
    return SplineCoeffs(coarse, sol.T)


def select_refinement(indicators, eta: float):
    """All spans whose indicator reaches eta times the maximum."""
    ind = np.asarray(indicators, dtype=float)
    if ind.size == 0 or np.max(ind) <= 0:
        return set()
    cut = eta * np.max(ind)
    return {int(i) for i in np.nonzero(ind >= cut)[0]}
