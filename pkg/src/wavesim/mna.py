"""Charge/flux-oriented modified nodal analysis.

Builds evaluable q(x), f(x), s(t) with Jacobians from a parsed circuit.
Unknowns are node voltages plus branch currents of V and L elements.
Evaluation is batched: x may be a (dim,) vector or a (dim, N) matrix of
column vectors; device models are vectorized accordingly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .netlist import Circuit, validate

VT_THERMAL = 0.025852  # volts
GMIN = 1e-12  # siemens, junction shunt
_EXP_LIMIT = 40.0  # diode exponent linearized above this


class BuildError(ValueError):
    pass


class NoDcConvergence(RuntimeError):
    pass


class _Diode:
    def __init__(self, p, m, isat, n):
        self.p, self.m = p, m
        self.isat = isat
        self.nvt = n * VT_THERMAL

    def add(self, x, f_out, jac_out):
        vd = _vterm(x, self.p) - _vterm(x, self.m)
        z = vd / self.nvt
        ez = np.exp(np.minimum(z, _EXP_LIMIT))
        elim = np.exp(_EXP_LIMIT)
        i = np.where(z <= _EXP_LIMIT,
                     self.isat * (ez - 1.0),
                     self.isat * (elim * (1.0 + z - _EXP_LIMIT) - 1.0))
        g = np.where(z <= _EXP_LIMIT, self.isat * ez / self.nvt,
                     self.isat * elim / self.nvt)
        i = i + GMIN * vd
        g = g + GMIN
        _stamp_i(f_out, self.p, i)
        _stamp_i(f_out, self.m, -i)
        if jac_out is not None:
            _stamp_g(jac_out, self.p, self.m, g)


class _Mosfet:
    """Level-1 (Shichman-Hodges) MOS, 3 terminals, bulk tied to source.

    The (1 + lambda*vds) factor is kept in the triode region so that the
    drain current and its first derivatives are continuous across the
    triode/saturation boundary.
    """

    def __init__(self, d, g, s, sgn, beta, vt0, lam):
        self.d, self.g, self.s = d, g, s
        self.sgn = sgn  # +1 NMOS, -1 PMOS
        self.beta, self.vt0, self.lam = beta, abs(vt0), lam

    def add(self, x, f_out, jac_out):
        sgn = self.sgn
        vd, vg, vs = (_vterm(x, t) for t in (self.d, self.g, self.s))
        vds_r = sgn * (vd - vs)
        vgs_r = sgn * (vg - vs)
        rev = vds_r < 0
        vds = np.where(rev, -vds_r, vds_r)
        vgs = np.where(rev, vgs_r - vds_r, vgs_r)
        vov = vgs - self.vt0
        b, lam = self.beta, self.lam
        clm = 1.0 + lam * vds
        sat = vds >= vov
        id0 = np.where(vov <= 0, 0.0,
                       np.where(sat,
                                0.5 * b * vov**2 * clm,
                                b * (vov * vds - 0.5 * vds**2) * clm))
        gm = np.where(vov <= 0, 0.0,
                      np.where(sat, b * vov * clm, b * vds * clm))
        gds = np.where(vov <= 0, 0.0,
                       np.where(sat,
                                0.5 * b * vov**2 * lam,
                                b * (vov - vds) * clm
                                + b * (vov * vds - 0.5 * vds**2) * lam))
        ids = sgn * np.where(rev, -id0, id0) + GMIN * (vd - vs)
        gd_d = np.where(rev, gm + gds, gds) + GMIN
        gd_g = np.where(rev, -gm, gm)
        gd_s = -(gd_d + gd_g)
        _stamp_i(f_out, self.d, ids)
        _stamp_i(f_out, self.s, -ids)
        if jac_out is not None:
            for term, gpart in ((self.d, gd_d), (self.g, gd_g), (self.s, gd_s)):
                if term >= 0:
                    if self.d >= 0:
                        jac_out[..., self.d, term] += gpart
                    if self.s >= 0:
                        jac_out[..., self.s, term] -= gpart


def _vterm(x, idx):
    if idx < 0:
        return np.zeros(x.shape[1:])
    return x[idx]


def _stamp_i(f_out, idx, val):
    if idx >= 0:
        f_out[idx] += val


def _stamp_g(jac_out, p, m, g):
    if p >= 0:
        jac_out[..., p, p] += g
        if m >= 0:
            jac_out[..., p, m] -= g
    if m >= 0:
        jac_out[..., m, m] += g
        if p >= 0:
            jac_out[..., m, p] -= g


@dataclass
class DaeSystem:
    """d/dt q(x) + f(x) - s(t) = 0 with x = node voltages + branch currents."""

    dim: int
    unknown_names: list
    node_rows: np.ndarray  # bool mask, True for node-voltage rows
    C: np.ndarray  # constant dq/dx for this device set
    G_lin: np.ndarray
    nonlinear: list
    sources: list  # (row, sign, SourceSpec)
    constant_jac_q: bool = True

    def eval_q(self, x):
        return self.C @ np.asarray(x, dtype=float)

    def eval_f(self, x, gmin_extra=0.0):
        x = np.asarray(x, dtype=float)
        f = self.G_lin @ x
        for dev in self.nonlinear:
            dev.add(x, f, None)
        if gmin_extra:
            f = f + gmin_extra * (self.node_rows[:, None] * x if x.ndim == 2
                                  else self.node_rows * x)
        return f

    def eval_s(self, t, scale=1.0):
        t = np.asarray(t, dtype=float)
        s = np.zeros((self.dim,) + t.shape)
        for row, sign, spec in self.sources:
            s[row] += sign * spec(t)
        return scale * s

    def jac_q(self, x=None):
        return self.C

    def jac_f(self, x, gmin_extra=0.0):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            jac = self.G_lin.copy()
            xw = x[:, None]
            f_dummy = np.zeros((self.dim, 1))
            jview = jac[None, :, :]
            for dev in self.nonlinear:
                dev.add(xw, f_dummy, jview)
            out = jac
        else:
            n = x.shape[1]
            out = np.broadcast_to(self.G_lin, (n, self.dim, self.dim)).copy()
            f_dummy = np.zeros_like(x)
            # device add() broadcasts over the batch axis: reorder to (n,dim,dim)
            for dev in self.nonlinear:
                dev.add(x, f_dummy, _BatchJac(out))
        if gmin_extra:
            idx = np.nonzero(self.node_rows)[0]
            out[..., idx, idx] += gmin_extra
        return out


class _BatchJac:
    """Adapter so device stamps written for [..., i, j] indexing hit a
    (batch, dim, dim) array with per-batch scalar arrays of shape (batch,)."""

    def __init__(self, arr):
        self.arr = arr

    def __getitem__(self, key):
        _, i, j = key
        return self.arr[:, i, j]

    def __setitem__(self, key, val):
        _, i, j = key
        self.arr[:, i, j] = val


def build_dae(circuit: Circuit) -> DaeSystem:
    diags = validate(circuit)
    if diags:
        raise BuildError("; ".join(d.message for d in diags))
    nodes = sorted(n for n in circuit.nodes if n != "0")
    node_idx = {n: i for i, n in enumerate(nodes)}
    node_idx["0"] = -1
    names = [f"v({n})" for n in nodes]
    branches = [d for d in circuit.devices if d.kind in ("V", "L")]
    for d in branches:
        names.append(f"i({d.name})")
    dim = len(nodes) + len(branches)
    node_rows = np.zeros(dim, dtype=bool)
    node_rows[: len(nodes)] = True

    C = np.zeros((dim, dim))
    G = np.zeros((dim, dim))
    nonlinear = []
    sources = []
    bcount = 0
    for d in circuit.devices:
        terms = [node_idx[t] for t in d.terminals]
        if d.kind == "R":
            _stamp_g(G[None, :, :], terms[0], terms[1], 1.0 / d.params["value"])
        elif d.kind == "C":
            _stamp_g(C[None, :, :], terms[0], terms[1], d.params["value"])
        elif d.kind in ("V", "L"):
            bi = len(nodes) + bcount
            bcount += 1
            p, m = terms
            if p >= 0:
                G[p, bi] += 1.0
            if m >= 0:
                G[m, bi] -= 1.0
            if d.kind == "V":
                if p >= 0:
                    G[bi, p] += 1.0
                if m >= 0:
                    G[bi, m] -= 1.0
                sources.append((bi, 1.0, d.source_spec))
            else:
                C[bi, bi] += d.params["value"]
                if p >= 0:
                    G[bi, p] -= 1.0
                if m >= 0:
                    G[bi, m] += 1.0
        elif d.kind == "I":
            p, m = terms
            if p >= 0:
                sources.append((p, -1.0, d.source_spec))
            if m >= 0:
                sources.append((m, 1.0, d.source_spec))
        elif d.kind == "D":
            nonlinear.append(_Diode(terms[0], terms[1], d.params["IS"], d.params["N"]))
        elif d.kind == "MOS":
            td, tg, ts = terms
            sgn = 1.0 if d.params["TYPE"] == "NMOS" else -1.0
            beta = d.params["KP"] * d.params["W"] / d.params["L"]
            nonlinear.append(_Mosfet(td, tg, ts, sgn, beta, d.params["VT0"],
                                     d.params["LAMBDA"]))
            _stamp_g(C[None, :, :], tg, ts, d.params["CGS"])
            _stamp_g(C[None, :, :], tg, td, d.params["CGD"])
    return DaeSystem(dim, names, node_rows, C, G, nonlinear, sources)


@dataclass
class OperatingPoint:
    x0: np.ndarray
    converged: bool
    iterations: int


def _newton_dc(dae, x, t0, gmin_extra, scale, max_iter=200):
    s = dae.eval_s(t0, scale=scale)
    for it in range(max_iter):
        r = dae.eval_f(x, gmin_extra) - s
        rnorm = np.max(np.abs(r))
        J = dae.jac_f(x, gmin_extra)
        try:
            dx = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            return x, False, it
        step = np.max(np.abs(dx))
        if step <= 1e-12 * (1.0 + np.max(np.abs(x))):
            return x + dx, True, it + 1
        lam = 1.0
        for _ in range(30):
            xn = x + lam * dx
            if np.max(np.abs(dae.eval_f(xn, gmin_extra) - s)) < rnorm or rnorm == 0.0:
                break
            lam *= 0.5
        else:
            return x, False, it
        x = x + lam * dx
        if np.max(np.abs(lam * dx)) <= 1e-12 * (1.0 + np.max(np.abs(x))):
            return x, True, it + 1
    return x, False, max_iter


def dc_operating_point(dae: DaeSystem, t0: float = 0.0) -> OperatingPoint:
    """DC solution of f(x) = s(t0), with gmin and source stepping fallbacks."""
    x = np.zeros(dae.dim)
    x, ok, it = _newton_dc(dae, x, t0, 0.0, 1.0)
    total = it
    if ok:
        return OperatingPoint(x, True, total)
    # gmin stepping: decades from 1e-3 down, then the clean problem
    x = np.zeros(dae.dim)
    ok = True
    for g in [10.0 ** (-e) for e in range(3, 13)] + [0.0]:
        x, ok, it = _newton_dc(dae, x, t0, g, 1.0)
        total += it
        if not ok:
            break
    if ok:
        return OperatingPoint(x, True, total)
    # source stepping: ramp all sources from zero
    x = np.zeros(dae.dim)
    ok = True
    for alpha in np.linspace(0.0, 1.0, 21):
        x, ok, it = _newton_dc(dae, x, t0, 0.0, alpha)
        total += it
        if not ok:
            break
    if ok:
        return OperatingPoint(x, True, total)
    raise NoDcConvergence(f"no DC convergence after {total} Newton iterations")
