"""Shipped fixtures and the calibration search behind them."""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path
from typing import Optional

from scipy.optimize import least_squares

from ..config import RunConfig, load_config
from ..cost_model import CostModel
from ..hardware import CostParams, HardwareSpec
from ..workload import Trace, parse_trace

HERE = Path(__file__).resolve().parent
TRIO_CONFIG = HERE / "trio.yaml"
TRIO_TRACE = HERE / "trio.csv"

# isolated samples/s of job1 and job3
TRIO_TARGETS = {"job1": 0.74, "job3": 1.09}
TRIO_GROUPED = 2.36


def trio() -> tuple[RunConfig, Trace]:
    cfg = load_config(TRIO_CONFIG)
    return cfg, parse_trace(cfg.trace)


def calibrate_trio(
    trace: Optional[Trace] = None,
    hw: HardwareSpec = HardwareSpec(),
    params: CostParams = CostParams(),
    x0: tuple[float, float] = (40e12, 1000.0),
) -> tuple[HardwareSpec, CostParams]:
    """Solve ``gpu_flops`` and ``saturation_tokens`` for the isolated targets."""
    if trace is None:
        trace = parse_trace(TRIO_TRACE)
    jobs = {j.job_id: j for j in trace.jobs}

    def resid(x):
        model = CostModel(replace(hw, gpu_flops=x[0] * 1e12), replace(params, saturation_tokens=x[1]))
        return [model.standalone(jobs[k])[0] / v - 1.0 for k, v in TRIO_TARGETS.items()]

    sol = least_squares(resid, [x0[0] / 1e12, x0[1]], bounds=([1e-3, 0.0], [1e6, 1e6]), xtol=1e-14, ftol=1e-14)
    return replace(hw, gpu_flops=sol.x[0] * 1e12), replace(params, saturation_tokens=sol.x[1])
