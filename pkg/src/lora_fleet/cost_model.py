"""Throughput, slowdown, residual capacity and urgency of jobs and groups.

Everything here is a closed-form stand-in for hardware profiling: a group
is fused, planned over the union of its members' GPUs, and its iteration
time is the pipelined nano-batch makespan at the best nano-batch count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from . import nano_pipeline
from .hardware import CostParams, HardwareSpec
from .ssm_plan import ParallelPlan, PlanInfeasible, group_signature, plan_group
from .workload import JobSpec

INF_URGENCY = math.inf


class InfeasibleJob(RuntimeError):
    """A job that cannot run even on its own allocation."""


class PlanMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ResidualVector:
    compute_residual: float
    memory_residual: float

    def __post_init__(self):
        for v in (self.compute_residual, self.memory_residual):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"residual {v} outside [0, 1]")


@dataclass(frozen=True)
class GroupEstimate:
    group: tuple[str, ...]
    throughput: float
    per_job_throughput: dict
    per_job_slowdown: dict
    t_iter: float
    n_nano: int
    gpus: int
    utilization: float
    residual: ResidualVector

    def violates(self, jobs: Iterable[JobSpec]) -> bool:
        return any(self.per_job_slowdown[j.job_id] > j.max_slowdown for j in jobs)


def _clamp01(x: float) -> float:
    return min(1.0, max(0.0, x))


def _plan_throughput(p: ParallelPlan, hw: HardwareSpec, n_candidates=nano_pipeline.N_CANDIDATES):
    n, t_iter = nano_pipeline.best_fixed_n(p, p.total_batch, n_candidates)
    util = p.useful_flops / (t_iter * p.pooled_gpus * hw.gpu_flops)
    mem_res = 1.0 - max(p.stage_memory) / hw.gpu_memory
    return n, t_iter, util, ResidualVector(_clamp01(1.0 - util), _clamp01(mem_res))


def group_plan(
    jobs: Sequence[JobSpec], hw: HardwareSpec = HardwareSpec(), params: CostParams = CostParams()
) -> ParallelPlan:
    """Plan a group over the sum of its members' GPU demands."""
    return plan_group(jobs, sum(j.gpu_demand for j in jobs), hw, params)


def standalone_profile(
    job: JobSpec, hw: HardwareSpec = HardwareSpec(), params: CostParams = CostParams()
) -> tuple[float, ResidualVector]:
    """Samples/second and unused capacity of a job alone on its own GPUs."""
    try:
        p = group_plan([job], hw, params)
    except PlanInfeasible as exc:
        raise InfeasibleJob(f"job {job.job_id} cannot fit its own allocation: {exc}") from exc
    _, t_iter, _, residual = _plan_throughput(p, hw)
    return job.batch_size / t_iter, residual


def estimate_group(
    group: Iterable[JobSpec],
    hw: HardwareSpec,
    plan: ParallelPlan,
    params: CostParams = CostParams(),
    standalone: Optional[dict] = None,
) -> GroupEstimate:
    """Predicted joint throughput and per-job slowdown of ``group`` under ``plan``.

    ``standalone`` may carry precomputed standalone throughputs by job id.
    """
    jobs = sorted(group, key=lambda j: j.job_id)
    if plan.pooled_gpus != sum(j.gpu_demand for j in jobs):
        raise PlanMismatch(
            f"plan pools {plan.pooled_gpus} GPUs but the group holds {sum(j.gpu_demand for j in jobs)}"
        )
    if plan.signature and plan.signature[0] != group_signature(jobs):
        raise PlanMismatch("plan was built for a different group")
    n, t_iter, util, residual = _plan_throughput(plan, hw)
    per_job = {j.job_id: j.batch_size / t_iter for j in jobs}
    slowdown = {}
    for j in jobs:
        if len(jobs) == 1:
            slowdown[j.job_id] = 1.0
            continue
        alone = standalone[j.job_id] if standalone and j.job_id in standalone else standalone_profile(j, hw, params)[0]
        slowdown[j.job_id] = alone / per_job[j.job_id]
    return GroupEstimate(
        group=tuple(j.job_id for j in jobs),
        throughput=math.fsum(per_job.values()),
        per_job_throughput=per_job,
        per_job_slowdown=slowdown,
        t_iter=t_iter,
        n_nano=n,
        gpus=plan.pooled_gpus,
        utilization=util,
        residual=residual,
    )


def urgency(
    job: JobSpec,
    observed_slowdown: float,
    now: float = 0.0,
    remaining_work_time: float = 0.0,
) -> float:
    """Proximity to violating the job's progress constraint.

    ``max(slowdown / max_slowdown, deadline pressure)``; deadline pressure is
    the standalone time still needed over the wall time left. A passed
    deadline with work outstanding returns ``inf``.
    """
    if observed_slowdown < 0:
        raise ValueError("observed_slowdown must be >= 0")
    score = observed_slowdown / job.max_slowdown
    if job.deadline is not None and remaining_work_time > 0:
        left = job.deadline - now
        if left <= 0:
            return INF_URGENCY
        score = max(score, remaining_work_time / left)
    return score


@dataclass
class CostModel:
    """Memoising front end used by the schedulers and the simulator.

    ``evaluations`` counts group estimates requested (cache hits included);
    the schedulers use it for complexity accounting.
    """

    hw: HardwareSpec = field(default_factory=HardwareSpec)
    params: CostParams = field(default_factory=CostParams)
    evaluations: int = 0
    _standalone: dict = field(default_factory=dict, repr=False)
    _estimates: dict = field(default_factory=dict, repr=False)

    def standalone(self, job: JobSpec) -> tuple[float, ResidualVector]:
        key = job.job_id
        hit = self._standalone.get(key)
        if hit is None or hit[0] is not job:
            hit = (job, standalone_profile(job, self.hw, self.params))
            self._standalone[key] = hit
        return hit[1]

    def plan(self, jobs: Sequence[JobSpec]) -> ParallelPlan:
        return group_plan(jobs, self.hw, self.params)

    def estimate(self, jobs: Sequence[JobSpec]) -> Optional[GroupEstimate]:
        """Estimate for ``jobs``, or None if no memory-feasible plan exists."""
        self.evaluations += 1
        key = frozenset(j.job_id for j in jobs)
        hit = self._estimates.get(key)
        if hit is not None and all(hit[0].get(j.job_id) is j for j in jobs):
            return hit[1]
        try:
            p = self.plan(jobs)
        except PlanInfeasible:
            est = None
        else:
            alone = {j.job_id: self.standalone(j)[0] for j in jobs} if len(jobs) > 1 else None
            est = estimate_group(jobs, self.hw, p, self.params, alone)
        self._estimates[key] = ({j.job_id: j for j in jobs}, est)
        return est
