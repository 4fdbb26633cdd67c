"""Adaptive spline-Galerkin solver.

The circuit DAE is discretized in time with a B-spline trial space and a
one-order-lower test space on the same breakpoints; the initial condition
row makes the nonlinear system square. Damped Newton alternates with
hierarchical grid refinement driven by residual moments against next-level
detail test functions, and an interval-splitting controller restarts the
solve on shorter spans when Newton cannot converge.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .mna import DaeSystem
from .mra import GridHierarchy, _midpoint, decompose, reconstruct, select_refinement, threshold
from .splines import (
    KnotGrid,
    SplineCoeffs,
    basis_and_derivs,
    design_matrix,
    eval_expansion,
    gauss_rule,
    insert_knot,
    make_knot_grid,
)
from .transient import OutOfRange, Waveform


class SingularSystem(RuntimeError):
    pass


class NoConvergence(RuntimeError):
    def __init__(self, t, detail=""):
        self.t = t
        super().__init__(f"no convergence at t={t:g}s {detail}".rstrip())


class SplitUnderflow(RuntimeError):
    def __init__(self, t, residual_norm):
        self.t = t
        self.residual_norm = residual_norm
        super().__init__(
            f"interval size underflow at t={t:g}s (last residual norm {residual_norm:.3e})"
        )


@dataclass
class WaveletConfig:
    tol: float = 1e-4
    order: int = 4
    initial_spans: int = 8
    max_level: int = 8
    eta: float = 0.1
    newton_max: int = 30
    damping_max_halvings: int = 8
    phase_budget: int = 5
    split_threshold: float = 10.0
    target_size_band: tuple = (32, 128)
    growth: float = 1.5
    splitting: bool = True

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_level < 0:
            raise ValueError("max_level must be >= 0")
        if not 0 < self.eta <= 1:
            raise ValueError("eta must be in (0, 1]")


@dataclass(frozen=True)
class GalerkinProblem:
    """Trial/test spline pair plus the DAE and initial data on one interval."""

    dae: DaeSystem
    trial: KnotGrid
    test: KnotGrid
    nquad: int
    x0: np.ndarray
    tspan: tuple

    def __post_init__(self):
        if self.test.breakpoints != self.trial.breakpoints:
            raise ValueError("trial and test spaces must share breakpoints")
        if self.test.order != self.trial.order - 1:
            raise ValueError("test order must be trial order - 1")
        assert self.test.dim == self.trial.dim - 1
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float))


def make_problem(dae, breakpoints, order, x0, nquad=None):
    trial = make_knot_grid(breakpoints, order)
    test = make_knot_grid(breakpoints, order - 1)
    return GalerkinProblem(
        dae, trial, test, nquad or order + 1, x0, (trial.a, trial.b)
    )


def _quad_all_spans(grid: KnotGrid, nquad: int):
    """Concatenated Gauss nodes and weights over every span."""
    bp = np.asarray(grid.breakpoints)
    x, w = gauss_rule((0.0, 1.0), nquad).nodes, gauss_rule((0.0, 1.0), nquad).weights
    widths = np.diff(bp)
    ts = bp[:-1, None] + widths[:, None] * x[None, :]
    ws = widths[:, None] * w[None, :]
    return ts.ravel(), ws.ravel()


_ASSEMBLY_CACHE = {}


def _assembly_data(gp: GalerkinProblem):
    """Quadrature nodes and design matrices for a trial/test pair, cached per
    grid; Newton iterations and damping probes on one grid reuse them."""
    key = (gp.trial.breakpoints, gp.trial.order, gp.nquad)
    hit = _ASSEMBLY_CACHE.get(key)
    if hit is None:
        ts, w = _quad_all_spans(gp.trial, gp.nquad)
        phi = design_matrix(gp.trial, ts)
        phip = design_matrix(gp.trial, ts, nu=1)
        theta = design_matrix(gp.test, ts)
        masses = w @ theta
        if len(_ASSEMBLY_CACHE) > 256:
            _ASSEMBLY_CACHE.clear()
        hit = _ASSEMBLY_CACHE[key] = (ts, w, phi, phip, theta, masses)
    return hit


def _defect_vals(dae, X, Xp, ts):
    """Pointwise DAE defect d/dt q(x) + f(x) - s(t) from sampled state."""
    if dae.constant_jac_q:
        qdot = dae.jac_q() @ Xp
    else:
        qdot = np.column_stack([dae.jac_q(X[:, i]) @ Xp[:, i] for i in range(ts.size)])
    return qdot + dae.eval_f(X) - dae.eval_s(ts)


def _defect(dae, c: SplineCoeffs, ts):
    """Pointwise DAE defect at the given times."""
    return _defect_vals(dae, eval_expansion(c, ts), eval_expansion(c, ts, nu=1), ts)


def assemble_residual(gp: GalerkinProblem, c: SplineCoeffs) -> np.ndarray:
    """Stacked Galerkin residual: initial-condition block then one block per
    test function, each of length dae.dim."""
    ts, w, phi, phip, theta, _ = _assembly_data(gp)
    defect = _defect_vals(gp.dae, c.coeffs @ phi.T, c.coeffs @ phip.T, ts)
    M = (defect * w) @ theta  # (dim, test.dim)
    r0 = c.coeffs[:, 0] - gp.x0
    return np.concatenate([r0, M.T.ravel()])


def _jacq_tensor(dae, x, xp):
    """FD approximation of d/dx [jac_q(x) @ xp] for state-dependent charge."""
    n = x.size
    J0 = dae.jac_q(x) @ xp
    T = np.zeros((n, n))
    for b in range(n):
        h = 1e-7 * (1.0 + abs(x[b]))
        xb = x.copy()
        xb[b] += h
        T[:, b] = (dae.jac_q(xb) @ xp - J0) / h
    return T


def assemble_jacobian(gp: GalerkinProblem, c: SplineCoeffs):
    """Exact derivative of assemble_residual w.r.t. the coefficient vector
    (unknown ordering: trial index major, circuit unknown minor)."""
    dae, trial, test = gp.dae, gp.trial, gp.test
    k = trial.order
    dim = dae.dim
    nq = gp.nquad
    ts, w, phi, phip, theta, _ = _assembly_data(gp)
    X = c.coeffs @ phi.T
    Xp = c.coeffs @ phip.T
    Jf = dae.jac_f(X)  # (N, dim, dim)
    C = dae.jac_q()
    S = trial.nspans

    if not dae.constant_jac_q:
        Jf = Jf + np.stack(
            [_jacq_tensor(dae, X[:, q], Xp[:, q]) for q in range(ts.size)]
        )

    # per-span local views: test funcs s..s+k-2 and trial funcs s..s+k-1 are
    # the only ones alive on span s
    si = np.arange(S)
    qi = np.arange(nq)
    th = theta.reshape(S, nq, -1)[
        si[:, None, None], qi[None, :, None], (si[:, None] + np.arange(k - 1))[:, None, :]
    ]  # (S, nq, k-1)
    tcols = (si[:, None] + np.arange(k))[:, None, :]
    ph = phi.reshape(S, nq, -1)[si[:, None, None], qi[None, :, None], tcols]
    php = phip.reshape(S, nq, -1)[si[:, None, None], qi[None, :, None], tcols]
    wr = w.reshape(S, nq)
    Jfr = Jf.reshape(S, nq, dim, dim)
    # block(s, l, i) = sum_q w_q theta_lq (C phip_qi + Jf_q phi_qi)
    bc = np.einsum("sq,sql,sqi->sli", wr, th, php)
    bt = np.einsum("sq,sql,sqi,sqab->sliab", wr, th, ph, Jfr)
    blocks = bc[..., None, None] * C + bt  # (S, k-1, k, dim, dim)

    l_ = np.arange(k - 1)
    i_ = np.arange(k)
    a_ = np.arange(dim)
    rows = (
        (1 + si[:, None, None, None, None] + l_[None, :, None, None, None]) * dim
        + a_[None, None, None, :, None]
    )
    cols = (
        (si[:, None, None, None, None] + i_[None, None, :, None, None]) * dim
        + a_[None, None, None, None, :]
    )
    rows, cols, _ = np.broadcast_arrays(rows, cols, blocks)
    # initial-condition block: identity w.r.t. the first coefficient
    rows = np.concatenate([np.arange(dim), rows.ravel()])
    cols = np.concatenate([np.arange(dim), cols.ravel()])
    vals = np.concatenate([np.ones(dim), blocks.ravel()])

    n = (test.dim + 1) * dim
    return scipy.sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsc()


def _row_scales(gp: GalerkinProblem):
    """Characteristic magnitude of each DAE equation over the interval, used
    to make tol act like a relative accuracy on the unknowns."""
    dae = gp.dae
    T = gp.tspan[1] - gp.tspan[0]
    A = np.abs(dae.jac_q()) / T + np.abs(dae.jac_f(gp.x0))
    scale = A @ (1.0 + np.abs(gp.x0))
    return np.maximum(scale, 1e-12)


def _test_masses(gp: GalerkinProblem):
    return _assembly_data(gp)[5]  # integral of each test function


def _residual_norm(gp: GalerkinProblem, F, tol, row_scale, masses):
    dim = gp.dae.dim
    r0 = F[:dim] / (tol * (1.0 + np.abs(gp.x0)))
    M = F[dim:].reshape(gp.test.dim, dim)
    D = M / masses[:, None] / (tol * row_scale[None, :])
    z = np.concatenate([r0, D.ravel()])
    return np.sqrt(np.mean(z**2))


def newton_solve(gp: GalerkinProblem, c_init: SplineCoeffs, cfg: WaveletConfig):
    """Damped Newton on the Galerkin system. Returns (coeffs, converged,
    iterations); non-convergence is a status, not an exception."""
    row_scale = _row_scales(gp)
    masses = _test_masses(gp)
    c = c_init
    F = assemble_residual(gp, c)
    for it in range(cfg.newton_max + 1):
        # the square Galerkin system is solvable to roundoff, so demand the
        # tested moments sit well below tol-level; an RMS right at 1 can hide
        # a single bad equation among many converged ones
        if _residual_norm(gp, F, cfg.tol, row_scale, masses) <= 0.1:
            return c, True, it
        if it == cfg.newton_max:
            return c, False, it
        J = assemble_jacobian(gp, c)
        try:
            lu = scipy.sparse.linalg.splu(J)
        except RuntimeError as exc:
            raise SingularSystem(str(exc)) from exc
        delta = lu.solve(-F)
        if not np.all(np.isfinite(delta)):
            raise SingularSystem("non-finite Newton update")
        dC = delta.reshape(gp.trial.dim, gp.dae.dim).T
        f0 = np.linalg.norm(F)
        for halving in range(cfg.damping_max_halvings + 1):
            lam = 0.5**halving
            cn = SplineCoeffs(gp.trial, c.coeffs + lam * dC)
            Fn = assemble_residual(gp, cn)
            if np.linalg.norm(Fn) < f0:
                break
        else:
            return c, False, it + 1  # damping exhausted: residual will not drop
        c, F = cn, Fn
    return c, False, cfg.newton_max


def refinement_indicators(gp: GalerkinProblem, c: SplineCoeffs, tol: float):
    """Per-span indicators: Galerkin residual tested against the next-level
    detail test function of each span, normalized so 1.0 means tol-level."""
    trial, test, dae = gp.trial, gp.test, gp.dae
    key = ("ind", trial.breakpoints, trial.order, gp.nquad)
    hit = _ASSEMBLY_CACHE.get(key)
    if hit is None:
        bp = np.array(trial.breakpoints)
        mids = _midpoint(bp[:-1], bp[1:])
        # spans too narrow to bisect in floating point get indicator 0
        valid = (mids > bp[:-1]) & (mids < bp[1:])
        if not np.any(valid):
            hit = (valid, None, None, None, None, None, None)
        else:
            fine_bp = np.sort(np.concatenate([bp, mids[valid]]))
            test_fine = make_knot_grid(fine_bp, test.order)
            # detail functional per span: the fine test function peaking at
            # the new midpoint (maximally outside the coarse test space,
            # cheap to locate)
            slots = np.argmax(design_matrix(test_fine, mids[valid]), axis=1)
            fine_grid = make_knot_grid(fine_bp, trial.order)
            ts, w = _quad_all_spans(fine_grid, gp.nquad)
            psi = design_matrix(test_fine, ts)[:, slots]  # (N, #valid)
            phi_f = design_matrix(trial, ts)
            phip_f = design_matrix(trial, ts, nu=1)
            hit = (valid, ts, w, psi, w @ psi, phi_f, phip_f)
        if len(_ASSEMBLY_CACHE) > 256:
            _ASSEMBLY_CACHE.clear()
        _ASSEMBLY_CACHE[key] = hit
    valid, ts, w, psi, mass, phi_f, phip_f = hit
    if not np.any(valid):
        return np.zeros(trial.nspans)
    defect = _defect_vals(dae, c.coeffs @ phi_f.T, c.coeffs @ phip_f.T, ts)
    M = (defect * w) @ psi  # (dim, #valid)
    row_scale = _row_scales(gp)
    out = np.zeros(trial.nspans)
    out[valid] = np.max(np.abs(M) / mass[None, :] / (tol * row_scale[:, None]), axis=0)
    return out


def _newton_dense(res, jac, x, max_iter, rtol):
    for _ in range(max_iter):
        r = res(x)
        if np.max(np.abs(r)) <= rtol:
            return x, True
        try:
            dx = np.linalg.solve(jac(x), -r)
        except np.linalg.LinAlgError:
            return x, False
        if not np.all(np.isfinite(dx)):
            return x, False
        x = x + dx
    return x, False


def make_consistent(dae: DaeSystem, x_guess, t, h, max_iter=25):
    """Project a state onto a consistent value at time t.

    A handoff taken from a spline satisfies the algebraic constraints only to
    discretization accuracy, and the initial-condition row would turn that
    mismatch into an unresolvable boundary layer on the next interval. Stage
    one solves the purely algebraic rows exactly while preserving the charges.
    Hidden output variables (no charge column, absent from every algebraic
    row, e.g. the branch current of a source feeding a capacitive node) are
    not pinned by that; stage two reads them off two backward Euler
    micro-steps of size h, which land them on the value the smooth solution
    takes at t+ without touching the states.
    """
    x0 = np.asarray(x_guess, dtype=float)
    C = dae.jac_q()
    alg_rows = ~np.any(C != 0.0, axis=1)
    state = np.any(C != 0.0, axis=0)
    s = dae.eval_s(t)

    # stage 1: Gauss-Newton on the algebraic rows; the column weighting puts
    # the correction into non-state variables so charges stay (nearly) put
    x = x0.copy()
    if np.any(alg_rows):
        D = np.where(state, 1e-6, 1.0)
        ok = False
        rtol = 1e-12 * (1.0 + np.max(np.abs(s)))
        for _ in range(max_iter):
            r = (dae.eval_f(x) - s)[alg_rows]
            if np.max(np.abs(r)) <= rtol:
                ok = True
                break
            Ja = dae.jac_f(x)[alg_rows] * D[None, :]
            dy = np.linalg.lstsq(Ja, -r, rcond=None)[0]
            if not np.all(np.isfinite(dy)):
                break
            x = x + D * dy
        if not ok:
            # no convergence (e.g. a bistable circuit mid-transition): the
            # raw value is closer to the truth than a diverged projection
            return x0

    hidden = ~state & ~np.any(dae.jac_f(x)[alg_rows] != 0.0, axis=0)
    if not np.any(hidden):
        return x

    xb = x
    for _ in range(2):
        q0 = dae.eval_q(xb)
        xb, ok = _newton_dense(
            lambda y: (dae.eval_q(y) - q0) / h + dae.eval_f(y) - s,
            lambda y: dae.jac_q(y) / h + dae.jac_f(y),
            xb.copy(),
            max_iter,
            1e-9 * (1.0 + np.max(np.abs(dae.eval_f(xb)))),
        )
        if not ok:
            return x
    out = x.copy()
    out[hidden] = xb[hidden]
    return out


@dataclass(frozen=True)
class IntervalStatus:
    status: str  # "converged" | "failed"
    newton_iterations: int
    refinements: int
    spans: int
    residual_norm: float = 0.0

    @property
    def converged(self):
        return self.status == "converged"


def solve_adaptive_interval(dae: DaeSystem, x0, tspan, cfg: WaveletConfig):
    """Newton phases alternating with wavelet-style span refinement.

    Returns (SplineCoeffs, IntervalStatus); the coefficients are coarsened by
    thresholding (eps = tol/10) after convergence so reported grid sizes
    reflect the adaptive representation.
    """
    t_a, t_b = float(tspan[0]), float(tspan[1])
    x0 = np.asarray(x0, dtype=float)
    base_bp = np.linspace(t_a, t_b, cfg.initial_spans + 1)
    gp = make_problem(dae, base_bp, cfg.order, x0)
    # flat start: constant extension of the initial value
    c = SplineCoeffs(gp.trial, np.tile(x0[:, None], (1, gp.trial.dim)))
    span_levels = {(base_bp[s], base_bp[s + 1]): 0 for s in range(cfg.initial_spans)}
    mids_per_level = []
    total_it = 0
    grid_it = 0  # Newton iterations spent on the current grid
    refinements = 0
    max_spans = 4 * cfg.target_size_band[1]

    def failed():
        rn = _residual_norm(
            gp, assemble_residual(gp, c), cfg.tol, _row_scales(gp), _test_masses(gp)
        )
        return c, IntervalStatus("failed", total_it, refinements, gp.trial.nspans, rn)

    while True:
        budget = min(cfg.phase_budget, cfg.newton_max - grid_it)
        c, conv, it = newton_solve(gp, c, replace(cfg, newton_max=max(budget, 0)))
        total_it += it
        grid_it += it
        if not conv:
            damping_dead = it < budget  # bailed before the cap: no descent
            if damping_dead or grid_it >= cfg.newton_max:
                return failed()
            continue  # more phases on the same grid

        ind = refinement_indicators(gp, c, cfg.tol)
        bp = np.array(gp.trial.breakpoints)
        levels = np.array([span_levels[(bp[s], bp[s + 1])] for s in range(gp.trial.nspans)])
        over = ind > 1.0
        refinable = over & (levels < cfg.max_level)
        if not np.any(over):
            break  # all spans resolved
        if not np.any(refinable):
            # level cap everywhere that matters; accept mild overshoot of the
            # target, but a grossly unresolved feature (e.g. an edge finer
            # than the cap allows) must go back to the splitter
            if np.max(ind) > cfg.split_threshold:
                return failed()
            break
        sel = select_refinement(np.where(refinable, ind, 0.0), cfg.eta)
        if gp.trial.nspans + len(sel) > max_spans:
            return failed()  # problem size out of range: let the splitter shrink h
        for s in sorted(sel):
            lo, hi = bp[s], bp[s + 1]
            m = _midpoint(lo, hi)
            lev = span_levels.pop((lo, hi))
            span_levels[(lo, m)] = lev + 1
            span_levels[(m, hi)] = lev + 1
            while len(mids_per_level) <= lev:
                mids_per_level.append([])
            mids_per_level[lev].append(m)
            c = insert_knot(c, m)  # warm start by prolongation
        gp = make_problem(dae, c.grid.breakpoints, cfg.order, x0)
        refinements += 1
        grid_it = 0

    # post-convergence coarsening via thresholding
    if mids_per_level:
        hierarchy = GridHierarchy(
            make_knot_grid(base_bp, cfg.order),
            tuple(tuple(sorted(m)) for m in mids_per_level),
            max_level=max(cfg.max_level, len(mids_per_level)),
        )
        he = decompose(c, hierarchy)
        he, _ = threshold(he, cfg.tol / 10.0)
        c = reconstruct(he)
    return c, IntervalStatus("converged", total_it, refinements, c.grid.nspans)


@dataclass(frozen=True)
class WaveletSolution:
    intervals: tuple  # of (tspan, SplineCoeffs)
    reports: tuple  # of IntervalStatus
    labels: tuple

    @property
    def tspan(self):
        return (self.intervals[0][0][0], self.intervals[-1][0][1])

    def total_knots(self):
        return sum(len(sc.grid.breakpoints) for _, sc in self.intervals)

    def newton_total(self):
        return sum(r.newton_iterations for r in self.reports)


def solve_with_splitting(dae: DaeSystem, x0, tspan, cfg: WaveletConfig | None = None):
    """Cover [0, T] with adaptive-interval solves, halving the interval on
    failure and adapting its length to keep span counts in cfg.target_size_band."""
    cfg = cfg or WaveletConfig()
    t0, T = float(tspan[0]), float(tspan[1])
    x = np.asarray(x0, dtype=float)
    t = t0
    h = T - t0
    h_min = (T - t0) * 2.0**-20
    intervals = []
    reports = []
    n_lo, n_hi = cfg.target_size_band
    # independent-source corners are derivative kinks of the exact solution;
    # a kink interior to a span defeats dyadic refinement, so intervals end
    # exactly on them (the classical solver steps onto them for the same
    # reason)
    corners = sorted({c for _, _, spec in dae.sources
                      for c in spec.corner_times(T) if t0 < c < T})

    while t < T - 1e-15 * (T - t0):
        next_corner = next((c for c in corners if c > t + 1e-15 * (T - t0)), T)
        h = min(h, T - t, next_corner - t)
        c, st = solve_adaptive_interval(dae, x, (t, t + h), cfg)
        if not st.converged:
            if not cfg.splitting:
                raise NoConvergence(t, f"(residual norm {st.residual_norm:.3e})")
            h *= 0.5
            if h < h_min:
                raise SplitUnderflow(t, st.residual_norm)
            continue
        intervals.append(((t, t + h), c))
        reports.append(st)
        t = t + h
        # handoff by evaluation, then projected onto the algebraic constraints
        x = make_consistent(dae, eval_expansion(c, c.grid.b), t, 1e-6 * (T - t0))
        if st.spans < n_lo:
            h *= cfg.growth
        elif st.spans > n_hi:
            h /= cfg.growth
    return WaveletSolution(tuple(intervals), tuple(reports), tuple(dae.unknown_names))


def sample_solution(ws: WaveletSolution, times) -> Waveform:
    """Evaluate the per-interval spline expansions at the given times."""
    ts = np.atleast_1d(np.asarray(times, dtype=float))
    lo, hi = ws.tspan
    if np.any(ts < lo - 1e-15) or np.any(ts > hi + 1e-15):
        raise OutOfRange("requested times outside the solved range")
    ends = np.array([sp[1] for sp, _ in ws.intervals])
    idx = np.minimum(np.searchsorted(ends, ts, side="left"), len(ends) - 1)
    nunk = ws.intervals[0][1].nunknowns
    out = np.zeros((nunk, ts.size))
    for p, (_, sc) in enumerate(ws.intervals):
        sel = idx == p
        if np.any(sel):
            tq = np.clip(ts[sel], sc.grid.a, sc.grid.b)
            out[:, sel] = eval_expansion(sc, tq)
    return Waveform(ts, out, ws.labels)
