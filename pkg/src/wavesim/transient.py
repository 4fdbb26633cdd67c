"""Classical time-stepping reference solver.

Adaptive trapezoidal rule (default) or variable-step BDF2 on the charge
form of the circuit DAE, with step-doubling local error control and Newton
iteration per step. Serves as the oracle the Galerkin method is measured
against.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mna import DaeSystem


class StepSizeUnderflow(RuntimeError):
    def __init__(self, t, msg=""):
        self.t = t
        super().__init__(f"step size underflow at t={t:g}s {msg}".rstrip())


class OutOfRange(ValueError):
    pass


@dataclass(frozen=True)
class Waveform:
    times: np.ndarray
    values: np.ndarray  # (n_unknowns, len(times))
    labels: tuple

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.atleast_2d(np.asarray(self.values, dtype=float))
        if np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing")
        if v.shape[1] != t.size:
            raise ValueError("values column count must match times")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    def row(self, label):
        return self.values[list(self.labels).index(label)]


@dataclass
class TranConfig:
    reltol: float = 1e-4
    abstol_v: float = 1e-9
    abstol_i: float = 1e-12
    h_init: float | None = None
    h_min: float | None = None
    h_max: float | None = None
    method: str = "trapezoidal"
    newton_max: int = 50
    lte_margin: float = 100.0


def _wrms(err, x, reltol, abstol):
    w = abstol + reltol * np.abs(x)
    return np.sqrt(np.mean((err / w) ** 2))


def _newton_step(dae, x_guess, residual, jacobian, cfg, abstol):
    """Damped Newton on a single implicit step. Returns (x, ok)."""
    x = x_guess.copy()
    r = residual(x)
    rnorm = np.max(np.abs(r))
    for _ in range(cfg.newton_max):
        J = jacobian(x)
        try:
            dx = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            return x, False
        lam = 1.0
        accepted = False
        for _ in range(12):
            xn = x + lam * dx
            rn = residual(xn)
            nn = np.max(np.abs(rn))
            if nn < rnorm or rnorm == 0.0:
                accepted = True
                break
            lam *= 0.5
        if not accepted:
            # stagnation at roundoff level still counts as converged
            return (x, True) if _wrms(dx, x, cfg.reltol, abstol) <= 0.1 else (x, False)
        x, r, rnorm = xn, rn, nn
        if _wrms(lam * dx, x, cfg.reltol, abstol) <= 0.01:
            return x, True
    return x, False


def _trap_step(dae, t0, x0, t1, cfg, abstol, x_pred, lu_cache=None):
    h = t1 - t0
    q0 = dae.eval_q(x0)
    rhs0 = dae.eval_s(t0) - dae.eval_f(x0)
    s1 = dae.eval_s(t1)

    if lu_cache is not None and not dae.nonlinear:
        # linear circuit: one factorized solve, no Newton
        import scipy.linalg

        key = round(h, 20)
        if key not in lu_cache:
            lu_cache.clear() if len(lu_cache) > 64 else None
            lu_cache[key] = scipy.linalg.lu_factor(dae.C / h + 0.5 * dae.G_lin)
        rhs = q0 / h + 0.5 * (s1 + rhs0)
        return scipy.linalg.lu_solve(lu_cache[key], rhs), True

    def residual(x):
        return (dae.eval_q(x) - q0) / h - 0.5 * (s1 - dae.eval_f(x) + rhs0)

    def jacobian(x):
        return dae.jac_q(x) / h + 0.5 * dae.jac_f(x)

    return _newton_step(dae, x_pred, residual, jacobian, cfg, abstol)


def _be_step(dae, t0, x0, t1, cfg, abstol, x_pred, lu_cache=None):
    h = t1 - t0
    q0 = dae.eval_q(x0)
    s1 = dae.eval_s(t1)

    if lu_cache is not None and not dae.nonlinear:
        import scipy.linalg

        key = ("be", round(h, 20))
        if key not in lu_cache:
            lu_cache.clear() if len(lu_cache) > 64 else None
            lu_cache[key] = scipy.linalg.lu_factor(dae.C / h + dae.G_lin)
        return scipy.linalg.lu_solve(lu_cache[key], q0 / h + s1), True

    def residual(x):
        return (dae.eval_q(x) - q0) / h + dae.eval_f(x) - s1

    def jacobian(x):
        return dae.jac_q(x) / h + dae.jac_f(x)

    return _newton_step(dae, x_pred, residual, jacobian, cfg, abstol)


def _bdf2_step(dae, t_prev, x_prev, t0, x0, t1, cfg, abstol, x_pred):
    if t_prev is None:
        return _trap_step(dae, t0, x0, t1, cfg, abstol, x_pred)
    h = t1 - t0
    rho = h / (t0 - t_prev)
    a1 = (1 + 2 * rho) / (1 + rho)
    a0 = -(1 + rho)
    am = rho * rho / (1 + rho)
    q0 = dae.eval_q(x0)
    qm = dae.eval_q(x_prev)
    s1 = dae.eval_s(t1)

    def residual(x):
        return (a1 * dae.eval_q(x) + a0 * q0 + am * qm) / h + dae.eval_f(x) - s1

    def jacobian(x):
        return a1 * dae.jac_q(x) / h + dae.jac_f(x)

    return _newton_step(dae, x_pred, residual, jacobian, cfg, abstol)


def tran_solve(dae: DaeSystem, x0, tspan, cfg: TranConfig | None = None) -> Waveform:
    """Adaptive transient solve on [tspan[0], tspan[1]] starting from x0."""
    cfg = cfg or TranConfig()
    t_start, t_end = float(tspan[0]), float(tspan[1])
    T = t_end - t_start
    h_max = cfg.h_max if cfg.h_max is not None else T / 10
    h_min = cfg.h_min if cfg.h_min is not None else T * 1e-14
    h = cfg.h_init if cfg.h_init is not None else min(h_max, T / 1000)
    abstol = np.where(dae.node_rows, cfg.abstol_v, cfg.abstol_i)
    # local error control applies to the differential (state) variables only;
    # algebraic variables are slaved to them through the Newton solve, and
    # exponentially sensitive branch currents would otherwise pin the step
    # size to their solver noise
    x_init = np.asarray(x0, dtype=float)
    state = np.any(np.asarray(dae.jac_q(x_init)) != 0.0, axis=0)
    if not np.any(state):
        state = np.ones(dae.dim, dtype=bool)

    corners = sorted({c for _, _, spec in dae.sources
                      for c in spec.corner_times(t_end) if t_start < c <= t_end})

    times = [t_start]
    xs = [np.asarray(x0, dtype=float)]
    lu_cache = {}
    t = t_start
    x = xs[0]
    t_prev, x_prev = None, None
    use_bdf2 = cfg.method == "bdf2"
    prev_rate, stalls, noise_rate = None, 0, 0.0
    # sources can kick algebraic variables (branch currents) at t=0 and at
    # waveform corners; a backward Euler step damps the inconsistency that
    # trapezoidal would carry as undamped ringing
    startup = True

    while t < t_end - 1e-15 * T:
        next_corner = next((c for c in corners if c > t + 1e-15 * T), t_end)
        h = min(h, h_max, next_corner - t)
        if h < h_min:
            raise StepSizeUnderflow(t)
        tm, t1 = t + 0.5 * h, t + h

        def one(ta, xa, tb, tp, xp, pred):
            if startup:
                return _be_step(dae, ta, xa, tb, cfg, abstol, pred, lu_cache)
            if use_bdf2:
                return _bdf2_step(dae, tp, xp, ta, xa, tb, cfg, abstol, pred)
            return _trap_step(dae, ta, xa, tb, cfg, abstol, pred, lu_cache)

        x_full, ok1 = one(t, x, t1, t_prev, x_prev, x)
        x_half, ok2 = one(t, x, tm, t_prev, x_prev, x)
        if ok2:
            x_half2, ok2 = one(tm, x_half, t1, t, x, x_half)
        if not (ok1 and ok2):
            h *= 0.5
            prev_rate, stalls = None, 0
            continue
        err = (x_half2 - x_full) / 3.0
        # safety margin on the per-step LTE so accumulated error stays
        # ~reltol; the absolute floors get only a mild factor because forcing
        # them much lower runs into the numerical noise of the 1/h scaling
        rate = _wrms(err[state], x_half2[state], cfg.reltol / cfg.lte_margin,
                     abstol[state] / 10.0)
        # The estimate should shrink ~8x per halving.  When it refuses to drop
        # it is roundoff noise from the 1/h scaling, not truncation error, so
        # record that floor and accept steps at it until real truncation error
        # dominates again (noise is h-independent, truncation grows as h^3).
        # truncation error shrinks ~8x per halving; anything better than ~3x
        # is not truncation behavior
        stalled = prev_rate is not None and rate > 0.35 * prev_rate
        stalls = stalls + 1 if stalled else 0
        tiny = np.max(np.abs(err[state])) <= 1e-10 * (1.0 + np.max(np.abs(x_half2[state])))
        if stalls >= 3 and tiny:
            noise_rate = max(noise_rate, 1.5 * rate)
        if rate > max(1.0, noise_rate):
            prev_rate = rate
            h *= 0.5
            continue
        if rate <= 1.0:
            noise_rate = 0.0
        else:
            rate = 0.0  # roundoff-limited accept: regrow the step
        prev_rate, stalls = None, 0
        times.extend([tm, t1])
        xs.extend([x_half, x_half2])
        t_prev, x_prev = tm, x_half
        t, x = t1, x_half2
        startup = False
        if abs(t - next_corner) <= 1e-15 * T:
            t_prev, x_prev = None, None  # discontinuity: restart multistep history
            startup = True
        fac = 0.9 * rate ** (-1.0 / 3.0) if rate > 0 else 2.0
        h = h * min(2.0, max(0.5, fac))

    return Waveform(np.array(times), np.column_stack(xs), tuple(dae.unknown_names))


def resample(w: Waveform, times) -> Waveform:
    """Piecewise-linear interpolation between accepted steps."""
    ts = np.atleast_1d(np.asarray(times, dtype=float))
    if np.any(ts < w.times[0] - 1e-15) or np.any(ts > w.times[-1] + 1e-15):
        raise OutOfRange("requested times outside the solved range")
    vals = np.vstack([np.interp(ts, w.times, row) for row in w.values])
    return Waveform(ts, vals, w.labels)
