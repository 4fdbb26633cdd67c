"""HTTP service wrapping the simulator core.

POST /simulate runs one or both solvers on an in-body netlist and returns
the run reports plus downsampled waveforms; POST /sweep runs the
tolerance-ladder protocol. Input errors map to 400, solver non-convergence
to 409.
"""

from __future__ import annotations

from typing import Literal

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .galerkin import WaveletConfig, sample_solution
from .harness import (
    REPORT_SCHEMA_VERSION,
    SOLVER_ERRORS,
    _tstop,
    compare,
    run_transient,
    run_wavelet,
    sweep,
)
from .mna import BuildError
from .netlist import ParseError, parse, validate
from .transient import TranConfig, resample

app = FastAPI(title="wavesim", version="0.1.0")


class SimulateRequest(BaseModel):
    netlist: str
    method: Literal["wavelet", "transient", "both"] = "both"
    tol: float = Field(1e-4, gt=0)
    reltol: float = Field(1e-4, gt=0)
    order: int = Field(4, ge=2, le=8)
    max_level: int = Field(8, ge=0)
    splitting: bool = True
    samples: int = Field(500, ge=2, le=20000)


class WaveformModel(BaseModel):
    times: list[float]
    labels: list[str]
    values: list[list[float]]  # one row per label


class RunReportModel(BaseModel):
    method: str
    tol_used: float
    cpu_seconds: float
    grid_points: int
    newton_total: int
    intervals: int
    max_abs_diff: dict[str, float]
    overall_max_abs_diff: float
    status: str
    detail: str


class SimulateResponse(BaseModel):
    schema_version: int
    runs: list[RunReportModel]
    waveforms: dict[str, WaveformModel]


class SweepRequest(BaseModel):
    netlist: str
    ladder: list[float] = Field(min_length=1)
    tol_defaults: SimulateRequest | None = None


class SweepResponse(BaseModel):
    schema_version: int
    csv: str
    runs: list[RunReportModel]


def _parse_or_400(text: str):
    try:
        circuit = parse(text)
    except ParseError as exc:
        raise HTTPException(status_code=400, detail=f"parse error: {exc}")
    diags = validate(circuit)
    if diags:
        raise HTTPException(
            status_code=400,
            detail="; ".join(f"{d.kind}: {d.message}" for d in diags),
        )
    return circuit


def _report_model(rep) -> RunReportModel:
    d = rep.to_dict()
    return RunReportModel(**{k: d[k] for k in RunReportModel.model_fields})


def _waveform_model(w) -> WaveformModel:
    return WaveformModel(times=w.times.tolist(), labels=list(w.labels),
                         values=w.values.tolist())


@app.get("/health")
def health():
    return {"status": "ok", "schema_version": REPORT_SCHEMA_VERSION}


@app.post("/simulate", response_model=SimulateResponse)
def simulate(req: SimulateRequest) -> SimulateResponse:
    circuit = _parse_or_400(req.netlist)
    try:
        tstop = _tstop(circuit)
    except BuildError as exc:
        raise HTTPException(status_code=400, detail=str(exc))
    grid = np.linspace(0.0, tstop, req.samples)
    runs, waveforms = [], {}
    try:
        tran_wave = None
        if req.method in ("transient", "both"):
            tran_wave, rep = run_transient(circuit, TranConfig(reltol=req.reltol))
            runs.append(rep)
            waveforms["transient"] = _waveform_model(resample(tran_wave, grid))
        if req.method in ("wavelet", "both"):
            ws, rep = run_wavelet(
                circuit,
                WaveletConfig(tol=req.tol, order=req.order,
                              max_level=req.max_level, splitting=req.splitting),
            )
            if tran_wave is not None:
                rep.max_abs_diff = compare(
                    sample_solution(ws, tran_wave.times), tran_wave
                )
            runs.append(rep)
            waveforms["wavelet"] = _waveform_model(sample_solution(ws, grid))
    except SOLVER_ERRORS as exc:
        raise HTTPException(status_code=409, detail=f"no convergence: {exc}")
    return SimulateResponse(
        schema_version=REPORT_SCHEMA_VERSION,
        runs=[_report_model(r) for r in runs],
        waveforms=waveforms,
    )


@app.post("/sweep", response_model=SweepResponse)
def run_sweep(req: SweepRequest) -> SweepResponse:
    circuit = _parse_or_400(req.netlist)
    if any(t <= 0 for t in req.ladder):
        raise HTTPException(status_code=400, detail="ladder tolerances must be positive")
    try:
        csv_text, reports = sweep(circuit, req.ladder)
    except SOLVER_ERRORS as exc:
        raise HTTPException(status_code=409, detail=f"no convergence: {exc}")
    return SweepResponse(
        schema_version=REPORT_SCHEMA_VERSION,
        csv=csv_text,
        runs=[_report_model(r) for r in reports],
    )
