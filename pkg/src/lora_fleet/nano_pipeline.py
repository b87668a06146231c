"""Nano-batch execution model and the AIMD nano-batch controller.

Each pipeline stage owns one compute resource and one outgoing link. A
nano-batch is computed on the stage, then shipped over the link while the
stage computes the next one. With many micro-batches in flight every
stage/link pair runs concurrently, so the iteration time is set by the
slowest pair. The slowest pair is reported in :class:`PipelineTrace`.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

N_CANDIDATES = (1, 2, 4, 8, 16, 32, 64)


@dataclass(frozen=True)
class NanoSchedule:
    N: int
    per_nano_samples: tuple[int, ...]

    @property
    def total(self) -> int:
        return sum(self.per_nano_samples)


@dataclass(frozen=True)
class PipelineTrace:
    t_comp: tuple[float, ...]
    t_comm: tuple[float, ...]
    t_iter_event: float
    t_iter_analytic: float
    stage: int = 0
    num_stages: int = 1
    comp_all_stages: Optional[float] = None  # summed over every stage

    @property
    def total_comp(self) -> float:
        if self.comp_all_stages is None:
            return sum(self.t_comp)
        return self.comp_all_stages


def partition(group_batch: int, N: int) -> NanoSchedule:
    """Split ``group_batch`` samples into ``N`` nano-batches, larger ones first.

    ``N`` is clamped to ``group_batch`` so no nano-batch is empty.
    """
    if group_batch < 1:
        raise ValueError("group_batch must be >= 1")
    if N < 1:
        raise ValueError("N must be >= 1")
    n = min(N, group_batch)
    q, extra = divmod(group_batch, n)
    sizes = tuple(q + 1 if i < extra else q for i in range(n))
    return NanoSchedule(N=n, per_nano_samples=sizes)


def analytic_time(t_comp: Sequence[float], t_comm: Sequence[float]) -> float:
    """Perfect-overlap approximation: the busier of the two resources."""
    return max(sum(t_comp), sum(t_comm))


_COMP_DONE = 0
_COMM_DONE = 1


def simulate_flow(t_comp: Sequence[float], t_comm: Sequence[float]) -> float:
    """Event-driven run of nano-batches through compute then the link.

    Each resource serves one nano-batch at a time, in order. Returns the time
    the last transfer (or computation, if it is later) finishes.
    """
    if len(t_comp) != len(t_comm):
        raise ValueError("t_comp and t_comm must have one entry per nano-batch")
    n = len(t_comp)
    if n == 0:
        return 0.0
    events: list[tuple[float, int, int]] = [(t_comp[0], _COMP_DONE, 0)]
    link_free_at = 0.0
    link_queue: list[int] = []
    link_busy = False
    clock = 0.0
    while events:
        clock, kind, i = heapq.heappop(events)
        if kind == _COMP_DONE:
            if i + 1 < n:
                heapq.heappush(events, (clock + t_comp[i + 1], _COMP_DONE, i + 1))
            link_queue.append(i)
        else:
            link_busy = False
            link_free_at = clock
        if not link_busy and link_queue:
            j = link_queue.pop(0)
            link_busy = True
            heapq.heappush(events, (max(clock, link_free_at) + t_comm[j], _COMM_DONE, j))
    return clock


def flow_makespan(t_comp: Sequence[float], t_comm: Sequence[float]) -> float:
    """Closed form of :func:`simulate_flow`: ``max_k sum(comp[:k+1]) + sum(comm[k:])``."""
    n = len(t_comp)
    if n == 0:
        return 0.0
    best = -math.inf
    prefix = 0.0
    suffix = sum(t_comm)
    for k in range(n):
        prefix += t_comp[k]
        best = max(best, prefix + suffix)
        suffix -= t_comm[k]
    return best


def _stage_lists(plan, sched: NanoSchedule, s: int) -> tuple[list[float], list[float]]:
    comp = [plan.comp_fixed[s] + plan.comp_per_sample[s] * x for x in sched.per_nano_samples]
    # per-iteration setup (weights streamed once) lands on the first nano-batch
    comp[0] += plan.iter_fixed[s]
    comm = [plan.comm_per_sample[s] * x for x in sched.per_nano_samples]
    return comp, comm


def simulate_iteration(plan, sched: NanoSchedule, hw=None) -> PipelineTrace:
    """Run every stage/link pair through the event engine; keep the slowest.

    ``plan`` supplies per-stage cost coefficients (seconds): ``iter_fixed``
    (once per iteration), ``comp_fixed`` (kernel launches per nano-batch),
    ``comp_per_sample`` and ``comm_per_sample`` (zero on the last stage).
    ``hw`` is accepted for interface symmetry; the plan already carries
    hardware-derived coefficients.
    """
    best: Optional[PipelineTrace] = None
    comp_total = 0.0
    for s in range(plan.num_stages):
        comp, comm = _stage_lists(plan, sched, s)
        comp_total += sum(comp)
        t_event = simulate_flow(comp, comm)
        if best is None or t_event > best.t_iter_event:
            best = PipelineTrace(
                t_comp=tuple(comp),
                t_comm=tuple(comm),
                t_iter_event=t_event,
                t_iter_analytic=analytic_time(comp, comm),
                stage=s,
                num_stages=plan.num_stages,
            )
    assert best is not None
    return replace(best, comp_all_stages=comp_total)


def _balanced_makespan(c0: float, c1: float, d: float, batch: int, n: int) -> float:
    # Two nano sizes (q+1 first, then q): f(k) is piecewise linear in k,
    # so its maximum sits at k in {first, last of big block, first/last of small}.
    q, extra = divmod(batch, n)
    big_a, big_b = c0 + c1 * (q + 1), d * (q + 1)
    small_a, small_b = c0 + c1 * q, d * q

    def f(k: int) -> float:  # 1-based nano index
        n_big_prefix = min(k, extra)
        n_small_prefix = k - n_big_prefix
        prefix = n_big_prefix * big_a + n_small_prefix * small_a
        # suffix includes nano k
        n_big_suffix = max(extra - (k - 1), 0)
        n_small_suffix = (n - k + 1) - n_big_suffix
        return prefix + n_big_suffix * big_b + n_small_suffix * small_b

    points = {1, n}
    if extra:
        points.update({extra, min(extra + 1, n)})
    return max(f(k) for k in points)


def iteration_time(plan, batch: int, N: int) -> float:
    """Fast equivalent of ``simulate_iteration(...).t_iter_event``."""
    n = min(N, batch)
    # The setup term sits on nano-batch 1, which every prefix contains.
    return max(
        plan.iter_fixed[s]
        + _balanced_makespan(plan.comp_fixed[s], plan.comp_per_sample[s], plan.comm_per_sample[s], batch, n)
        for s in plan.distinct_stages()
    )


@dataclass(frozen=True)
class IterationSummary:
    t_iter_event: float
    t_iter_analytic: float
    busy_gpu_seconds: float  # compute time summed over stages
    stage: int
    num_stages: int
    n_nano: int

    @property
    def eta_util(self) -> float:
        if self.t_iter_event <= 0:
            return 0.0
        return self.busy_gpu_seconds / (self.num_stages * self.t_iter_event)

    @property
    def delta_stall(self) -> float:
        return self.t_iter_event - self.t_iter_analytic


def iteration_summary(plan, batch: int, N: int) -> IterationSummary:
    """Closed-form counterpart of :func:`simulate_iteration` plus :func:`monitor`."""
    n = min(N, batch)
    best_s, best_t = 0, -math.inf
    for s in plan.distinct_stages():
        t = plan.iter_fixed[s] + _balanced_makespan(
            plan.comp_fixed[s], plan.comp_per_sample[s], plan.comm_per_sample[s], batch, n
        )
        if t > best_t:
            best_s, best_t = s, t
    # the representative is the first stage with its cost triple, as in simulate_iteration
    comp = plan.iter_fixed[best_s] + n * plan.comp_fixed[best_s] + batch * plan.comp_per_sample[best_s]
    comm = batch * plan.comm_per_sample[best_s]
    busy = math.fsum(
        plan.iter_fixed[s] + n * plan.comp_fixed[s] + batch * plan.comp_per_sample[s]
        for s in range(plan.num_stages)
    )
    return IterationSummary(best_t, max(comp, comm), busy, best_s, plan.num_stages, n)


def best_fixed_n(plan, batch: int, candidates: Sequence[int] = N_CANDIDATES) -> tuple[int, float]:
    """Nano-batch count (among ``candidates``) with the shortest iteration."""
    best_n, best_t = 1, math.inf
    seen = set()
    for c in candidates:
        n = min(c, batch)
        if n in seen:
            continue
        seen.add(n)
        t = iteration_time(plan, batch, n)
        if t < best_t:
            best_n, best_t = n, t
    return best_n, best_t


def monitor(trace: PipelineTrace) -> tuple[float, float]:
    """Utilisation and stall of one iteration.

    ``eta_util`` is compute time summed over stages divided by
    ``stages * t_iter_event``; ``delta_stall`` is the gap between the event
    time and the perfect-overlap estimate.
    """
    if trace.t_iter_event <= 0:
        return 0.0, 0.0
    eta = trace.total_comp / (trace.num_stages * trace.t_iter_event)
    return eta, trace.t_iter_event - trace.t_iter_analytic


@dataclass(frozen=True)
class AimdState:
    N: int = 1
    T_prev: Optional[float] = None
    alpha: int = 4
    beta: float = 0.5
    tau: Optional[float] = None  # absolute margin; None means tau_rel * T_prev
    tau_rel: float = 0.02

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.alpha < 1:
            raise ValueError("alpha must be >= 1")
        if not 0 < self.beta < 1:
            raise ValueError("beta must be in (0, 1)")
        if self.tau is not None and self.tau < 0:
            raise ValueError("tau must be >= 0")

    def margin(self) -> float:
        if self.tau is not None:
            return self.tau
        return self.tau_rel * (self.T_prev or 0.0)


def aimd_step(state: AimdState, T_t: float, cap: Optional[int] = None) -> AimdState:
    """One controller update from the latest end-to-end time ``T_t``.

    Grows N by ``alpha`` when ``T_t`` beats the previous time by at least the
    margin, otherwise shrinks it to ``max(1, floor(beta * N))``. The first
    observation only records ``T_t``. ``cap`` clamps N (the group batch).
    """
    if T_t < 0:
        raise ValueError("T_t must be >= 0")
    if state.T_prev is None:
        n = state.N
    elif T_t <= state.T_prev - state.margin():
        n = state.N + state.alpha
    else:
        n = max(1, math.floor(state.beta * state.N))
    if cap is not None:
        n = max(1, min(n, cap))
    return replace(state, N=n, T_prev=T_t)
