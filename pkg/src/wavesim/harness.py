"""Evaluation harness: run the solvers on a netlist, compute the maximal
absolute difference against a reference on the transient grid, and emit CSV
waveforms plus machine-readable reports for time-vs-error and
size-vs-error curves.
"""

from __future__ import annotations

import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .galerkin import (
    NoConvergence,
    SingularSystem,
    SplitUnderflow,
    WaveletConfig,
    sample_solution,
    solve_with_splitting,
)
from .mna import BuildError, NoDcConvergence, build_dae, dc_operating_point
from .netlist import Circuit, ParseError, parse, validate
from .transient import StepSizeUnderflow, TranConfig, Waveform, tran_solve

REPORT_SCHEMA_VERSION = 1

SOLVER_ERRORS = (
    NoConvergence,
    SplitUnderflow,
    SingularSystem,
    StepSizeUnderflow,
    NoDcConvergence,
)


class GridMismatch(ValueError):
    pass


def compare(a: Waveform, b: Waveform) -> dict:
    """Per-unknown max |a - b| over all shared grid points."""
    if tuple(a.labels) != tuple(b.labels):
        raise GridMismatch("unknown orderings differ")
    if a.times.size != b.times.size or np.any(a.times != b.times):
        raise GridMismatch("time grids differ")
    per = np.max(np.abs(a.values - b.values), axis=1)
    return {lab: float(d) for lab, d in zip(a.labels, per)}


def overall_diff(per_unknown: dict) -> float:
    return max(per_unknown.values()) if per_unknown else 0.0


@dataclass
class RunReport:
    """One solver run: timing, problem size, and error vs the reference."""

    method: str  # "wavelet" | "transient"
    tol_used: float
    cpu_seconds: float
    grid_points: int  # spline knots (wavelet) or accepted steps (transient)
    newton_total: int
    intervals: int
    max_abs_diff: dict
    status: str = "success"
    detail: str = ""
    schema_version: int = REPORT_SCHEMA_VERSION
    extras: dict = field(default_factory=dict)  # unknown fields round-trip

    def __post_init__(self):
        if self.status == "success":
            if self.grid_points < 2:
                raise ValueError("grid_points must be >= 2")
            if not self.cpu_seconds > 0:
                raise ValueError("cpu_seconds must be positive")
            if any(v < 0 for v in self.max_abs_diff.values()):
                raise ValueError("max_abs_diff must be non-negative")

    @property
    def overall_max_abs_diff(self):
        return overall_diff(self.max_abs_diff)

    def to_dict(self):
        d = asdict(self)
        extras = d.pop("extras")
        d["overall_max_abs_diff"] = self.overall_max_abs_diff
        d.update(extras)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("overall_max_abs_diff", None)
        known = {f for f in cls.__dataclass_fields__ if f != "extras"}
        extras = {k: d.pop(k) for k in list(d) if k not in known}
        return cls(**d, extras=extras)


def failed_report(method, tol, exc) -> RunReport:
    return RunReport(method, tol, 0.0, 0, 0, 0, {},
                     status="failed", detail=f"{type(exc).__name__}: {exc}")


def _tstop(circuit: Circuit) -> float:
    tran = [a for a in circuit.analyses if a.kind == "tran"]
    if not tran:
        raise BuildError("netlist has no .tran analysis")
    return tran[0].params[0]


def run_wavelet(circuit: Circuit, cfg: WaveletConfig):
    """Solve with the adaptive Galerkin method. Returns (solution, report);
    cpu_seconds covers the solve only, not parsing or the DC operating
    point, so timings are comparable across methods."""
    dae = build_dae(circuit)
    op = dc_operating_point(dae)
    tstop = _tstop(circuit)
    t0 = time.perf_counter()
    ws = solve_with_splitting(dae, op.x0, (0.0, tstop), cfg)
    cpu = time.perf_counter() - t0
    report = RunReport("wavelet", cfg.tol, cpu, ws.total_knots(),
                       ws.newton_total(), len(ws.intervals), {})
    return ws, report


def run_transient(circuit: Circuit, cfg: TranConfig):
    dae = build_dae(circuit)
    op = dc_operating_point(dae)
    tstop = _tstop(circuit)
    t0 = time.perf_counter()
    w = tran_solve(dae, op.x0, (0.0, tstop), cfg)
    cpu = time.perf_counter() - t0
    report = RunReport("transient", cfg.reltol, cpu, w.times.size, 0, 1, {})
    return w, report


def waveform_csv(w: Waveform) -> str:
    lines = ["time," + ",".join(w.labels)]
    for j in range(w.times.size):
        row = [f"{w.times[j]:.17g}"] + [f"{v:.17g}" for v in w.values[:, j]]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def atomic_write(path: Path, text: str):
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_text(text)
    os.replace(tmp, path)


def wavelet_grid(ws) -> np.ndarray:
    """Deduplicated knot set of all intervals (output grid when no
    transient reference grid is available)."""
    knots = np.concatenate([np.array(c.grid.breakpoints) for _, c in ws.intervals])
    return np.unique(knots)


@dataclass
class RunOutput:
    reports: list
    files: list
    exit_code: int


def run(
    netlist_path,
    method: str = "both",
    tol: float = 1e-4,
    reltol: float = 1e-4,
    order: int = 4,
    max_level: int = 8,
    splitting: bool = True,
    out_dir=".",
    ladder=None,
    stderr=sys.stderr,
) -> RunOutput:
    """Parse, validate, solve, and write artifacts.

    Exit code 0 on success, 1 on parse/validation errors, 2 on solver
    failure; diagnostics go to stderr.
    """
    path = Path(netlist_path)
    out = Path(out_dir)
    deck = path.stem
    files = []

    if not path.is_file():
        print(f"error: netlist file not found: {path}", file=stderr)
        return RunOutput([], [], 1)
    try:
        circuit = parse(path.read_text())
        diags = validate(circuit)
        if diags:
            for d in diags:
                print(f"error: {d.kind}: {d.message}", file=stderr)
            return RunOutput([], [], 1)
        wcfg = WaveletConfig(tol=tol, order=order, max_level=max_level,
                             splitting=splitting)
        tcfg = TranConfig(reltol=reltol)
    except (ParseError, BuildError, ValueError) as exc:
        print(f"error: {exc}", file=stderr)
        return RunOutput([], [], 1)

    out.mkdir(parents=True, exist_ok=True)

    if ladder is not None:
        try:
            table, reports = sweep(circuit, ladder, wcfg=wcfg)
        except SOLVER_ERRORS as exc:
            print(f"error: {exc}", file=stderr)
            return RunOutput([], [], 2)
        f = out / f"{deck}.sweep.csv"
        atomic_write(f, table)
        files.append(f)
        code = 0 if all(r.status == "success" for r in reports) else 2
        for r in reports:
            if r.status != "success":
                print(f"error: sweep cell {r.method}@{r.tol_used:g}: {r.detail}",
                      file=stderr)
        return RunOutput(reports, files, code)

    reports = []
    try:
        tran_wave = None
        if method in ("transient", "both"):
            tran_wave, tr = run_transient(circuit, tcfg)
            reports.append(tr)
            f = out / f"{deck}.tran.csv"
            atomic_write(f, waveform_csv(tran_wave))
            files.append(f)
        if method in ("wavelet", "both"):
            ws, wr = run_wavelet(circuit, wcfg)
            # the error metric lives on the transient grid when available
            grid = tran_wave.times if tran_wave is not None else wavelet_grid(ws)
            wave = sample_solution(ws, grid)
            if tran_wave is not None:
                wr.max_abs_diff = compare(wave, tran_wave)
            reports.append(wr)
            f = out / f"{deck}.wavelet.csv"
            atomic_write(f, waveform_csv(wave))
            files.append(f)
    except SOLVER_ERRORS as exc:
        print(f"error: no convergence: {exc}", file=stderr)
        return RunOutput(reports, files, 2)

    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "netlist": str(path),
        "deck": deck,
        "runs": [r.to_dict() for r in reports],
    }
    f = out / f"{deck}.report.json"
    atomic_write(f, json.dumps(report, indent=2) + "\n")
    files.append(f)
    return RunOutput(reports, files, 0)


def _sweep_cell(circuit, method, tol, wcfg, ref):
    try:
        if method == "wavelet":
            from dataclasses import replace

            ws, rep = run_wavelet(circuit, replace(wcfg, tol=tol))
            wave = sample_solution(ws, ref.times)
        else:
            wave, rep = run_transient(circuit, TranConfig(reltol=tol))
            wave = _resample_to(wave, ref.times)
        rep.max_abs_diff = compare(wave, ref)
        return rep
    except SOLVER_ERRORS as exc:
        return failed_report(method, tol, exc)


def _resample_to(w: Waveform, times):
    from .transient import resample

    return resample(w, times)


def sweep(circuit: Circuit, ladder, wcfg: WaveletConfig | None = None):
    """Run both methods over the tolerance ladder against one high-accuracy
    transient reference (reltol = min(ladder)/100). Returns (csv_text,
    reports); failed cells become failed rows, the sweep continues.

    Cells run concurrently; SIM_THREADS caps the parallelism.
    """
    ladder = sorted(set(float(t) for t in ladder), reverse=True)
    if not ladder:
        raise ValueError("empty tolerance ladder")
    wcfg = wcfg or WaveletConfig()
    ref, _ = run_transient(circuit, TranConfig(reltol=min(ladder) / 100.0))

    cells = [(m, t) for t in ladder for m in ("wavelet", "transient")]
    workers = int(os.environ.get("SIM_THREADS", "0")) or min(len(cells), os.cpu_count() or 1)
    with ThreadPoolExecutor(max_workers=workers) as ex:
        reports = list(ex.map(lambda c: _sweep_cell(circuit, c[0], c[1], wcfg, ref), cells))

    lines = ["method,tol,cpu_seconds,grid_points,max_abs_diff,status"]
    for r in reports:
        lines.append(
            f"{r.method},{r.tol_used:.17g},{r.cpu_seconds:.17g},"
            f"{r.grid_points},{r.overall_max_abs_diff:.17g},{r.status}"
        )
    return "\n".join(lines) + "\n", reports
