"""Job grouping policies.

``schedule_round`` is the residual-aware hierarchical grouper: queue units
are ordered by urgency (desc) and residual capacity (asc), the head of the
queue is the seed, and a binary cut over the residual-sorted candidates
picks the largest set of high-residual partners that still helps. Merged
units are pushed back and may grow again. Units that cannot grow are
finalized and lifted to the next, wider tier.

``baseline_fifo_memory`` and ``baseline_isolated`` are the comparison
policies. All three return a :class:`GroupingDecision`.

Comparisons made while ordering the queue and cost-model evaluations are
counted on the context so the per-round work can be measured.
"""

from __future__ import annotations

import functools
import heapq
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

from .cost_model import CostModel, GroupEstimate, ResidualVector, urgency
from .hardware import ClusterSpec
from .ssm_plan import ParallelPlan
from .workload import JobSpec

TIERS = ("intra_node", "cross_node", "cross_rank")
POLICIES = ("tlora", "mlora_fifo", "isolated")

# relative slack for "strictly better" throughput comparisons
_GAIN_EPS = 1e-9


@dataclass
class SchedContext:
    """Inputs to a round besides the jobs: cost model, clock and progress signals.

    ``observed_slowdown`` and ``remaining_work`` (standalone seconds still
    needed) are keyed by job id; missing jobs count as 0.
    """

    cost: CostModel
    now: float = 0.0
    observed_slowdown: Mapping[str, float] = field(default_factory=dict)
    remaining_work: Mapping[str, float] = field(default_factory=dict)
    comparisons: int = 0

    def job_urgency(self, job: JobSpec) -> float:
        return urgency(
            job,
            self.observed_slowdown.get(job.job_id, 0.0),
            self.now,
            self.remaining_work.get(job.job_id, 0.0),
        )


@dataclass(frozen=True)
class QueueEntry:
    jobs: tuple[JobSpec, ...]  # sorted by job_id
    urgency: float
    residual: ResidualVector
    tier: str = TIERS[0]
    throughput: float = 0.0  # predicted samples/s of this unit on its own

    @property
    def unit(self):
        return self.jobs[0] if len(self.jobs) == 1 else self.jobs

    @property
    def unit_id(self) -> str:
        return "+".join(j.job_id for j in self.jobs)

    @property
    def gpus(self) -> int:
        return sum(j.gpu_demand for j in self.jobs)

    @property
    def model(self):
        return self.jobs[0].model

    def sort_key(self) -> tuple:
        return (-self.urgency, self.residual.compute_residual, self.residual.memory_residual, self.unit_id)

    def residual_key(self) -> tuple:
        return (self.residual.compute_residual, self.residual.memory_residual, self.unit_id)


@dataclass(frozen=True)
class PlannedGroup:
    jobs: tuple[JobSpec, ...]
    plan: ParallelPlan
    estimate: GroupEstimate

    @property
    def job_ids(self) -> tuple[str, ...]:
        return tuple(j.job_id for j in self.jobs)

    @property
    def gpus(self) -> int:
        return self.plan.pooled_gpus


@dataclass
class GroupingDecision:
    final_groups: list[PlannedGroup]
    deferred: list[JobSpec]
    comparisons: int = 0
    evaluations: int = 0

    @property
    def aggregate_throughput(self) -> float:
        return math.fsum(g.estimate.throughput for g in self.final_groups)

    @property
    def gpus_used(self) -> int:
        return sum(g.gpus for g in self.final_groups)


# -- ordering with comparison counting ---------------------------------------


def sort_queue(entries: Sequence[QueueEntry], ctx: Optional[SchedContext] = None) -> list[QueueEntry]:
    """Urgency descending, then residual ascending; stable."""

    def cmp(a: QueueEntry, b: QueueEntry) -> int:
        if ctx is not None:
            ctx.comparisons += 1
        ka, kb = a.sort_key(), b.sort_key()
        return (ka > kb) - (ka < kb)

    return sorted(entries, key=functools.cmp_to_key(cmp))


class _HeapItem:
    __slots__ = ("key", "entry", "ctx")

    def __init__(self, entry: QueueEntry, ctx: SchedContext):
        self.key = entry.sort_key()
        self.entry = entry
        self.ctx = ctx

    def __lt__(self, other: "_HeapItem") -> bool:
        self.ctx.comparisons += 1
        return self.key < other.key


def _bisect(keys: list, key, ctx: SchedContext) -> int:
    lo, hi = 0, len(keys)
    while lo < hi:
        mid = (lo + hi) // 2
        ctx.comparisons += 1
        if keys[mid] < key:
            lo = mid + 1
        else:
            hi = mid
    return lo


class _ResidualIndex:
    """Per-model lists of live entries in ascending residual order."""

    def __init__(self, ctx: SchedContext):
        self.ctx = ctx
        self.keys: dict = {}
        self.items: dict = {}

    def add(self, e: QueueEntry) -> None:
        keys = self.keys.setdefault(e.model, [])
        items = self.items.setdefault(e.model, [])
        k = e.residual_key()
        i = _bisect(keys, k, self.ctx)
        keys.insert(i, k)
        items.insert(i, e)

    def remove(self, e: QueueEntry) -> None:
        keys, items = self.keys[e.model], self.items[e.model]
        i = _bisect(keys, e.residual_key(), self.ctx)
        assert items[i] is e
        del keys[i]
        del items[i]

    def candidates(self, model) -> list[QueueEntry]:
        return self.items.get(model, [])


# -- entries and partner search ------------------------------------------------


def make_entry(
    jobs: Sequence[JobSpec],
    ctx: SchedContext,
    tier: str = TIERS[0],
    estimate: Optional[GroupEstimate] = None,
) -> Optional[QueueEntry]:
    """Queue unit for ``jobs``; None if the unit has no feasible plan."""
    jobs = tuple(sorted(jobs, key=lambda j: j.job_id))
    est = estimate if estimate is not None else ctx.cost.estimate(jobs)
    if est is None:
        return None
    return QueueEntry(
        jobs=jobs,
        urgency=max(ctx.job_urgency(j) for j in jobs),
        residual=est.residual,
        tier=tier,
        throughput=est.throughput,
    )


@dataclass(frozen=True)
class Merge:
    entry: QueueEntry
    partners: tuple[QueueEntry, ...]
    estimate: GroupEstimate


def _respects_bounds(est: GroupEstimate, jobs: Sequence[JobSpec]) -> bool:
    return all(est.per_job_slowdown[j.job_id] <= j.max_slowdown for j in jobs)


def find_partner(
    seed: QueueEntry,
    queue: Sequence[QueueEntry],
    ctx: SchedContext,
    max_gpus: Optional[int] = None,
    max_jobs: Optional[int] = None,
) -> Optional[Merge]:
    """Grow ``seed`` with the largest high-residual suffix of ``queue`` that helps.

    ``queue`` holds same-model candidates sorted by residual ascending and
    must not contain ``seed``. A cutoff ``m`` is acceptable when the merged
    group fits ``max_gpus`` and ``max_jobs``, has a memory-feasible plan, keeps every member
    within its slowdown bound, and beats the summed throughput of its parts.
    The largest acceptable ``m`` is found by binary search, assuming
    acceptability is monotone in ``m``.
    """
    n = len(queue)
    if n == 0:
        return None
    limit = math.inf if max_gpus is None else max_gpus
    job_limit = math.inf if max_jobs is None else max_jobs
    # suffix totals over the m highest-residual candidates
    tail_gpus, tail_jobs = [0], [0]
    for e in reversed(queue):
        tail_gpus.append(tail_gpus[-1] + e.gpus)
        tail_jobs.append(tail_jobs[-1] + len(e.jobs))
    results: dict[int, Merge] = {}

    def accept(m: int) -> bool:
        if seed.gpus + tail_gpus[m] > limit or len(seed.jobs) + tail_jobs[m] > job_limit:
            return False
        parts = tuple(queue[n - m:])
        jobs = seed.jobs + tuple(j for p in parts for j in p.jobs)
        est = ctx.cost.estimate(jobs)
        if est is None or not _respects_bounds(est, jobs):
            return False
        separate = math.fsum([seed.throughput] + [p.throughput for p in parts])
        if est.throughput <= separate * (1.0 + _GAIN_EPS):
            return False
        entry = make_entry(jobs, ctx, seed.tier, est)
        results[m] = Merge(entry, parts, est)
        return True

    if not accept(1):
        return None
    lo, hi = 1, n
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if accept(mid):
            lo = mid
        else:
            hi = mid - 1
    return results[lo]


def tier_limits(cluster: ClusterSpec, free_gpus: int) -> list[tuple[str, int]]:
    gpn = cluster.hw.gpus_per_node
    return [
        ("intra_node", min(gpn, free_gpus)),
        ("cross_node", min(gpn * cluster.rank_nodes, free_gpus)),
        ("cross_rank", free_gpus),
    ]


def _group_tier(
    entries: list[QueueEntry], tier: str, limit: int, ctx: SchedContext, max_jobs: Optional[int] = None
) -> list[QueueEntry]:
    heap = [_HeapItem(QueueEntry(e.jobs, e.urgency, e.residual, tier, e.throughput), ctx) for e in entries]
    heapq.heapify(heap)
    index = _ResidualIndex(ctx)
    for item in heap:
        index.add(item.entry)
    # keyed by id(); holding the entry keeps its id from being reused by a later merge
    dead: dict[int, QueueEntry] = {}
    finalized = []
    while heap:
        item = heapq.heappop(heap)
        seed = item.entry
        if id(seed) in dead:
            continue
        index.remove(seed)
        merge = find_partner(seed, index.candidates(seed.model), ctx, limit, max_jobs)
        if merge is None:
            finalized.append(seed)
            continue
        for p in merge.partners:
            dead[id(p)] = p
            index.remove(p)
        index.add(merge.entry)
        heapq.heappush(heap, _HeapItem(merge.entry, ctx))
    return finalized


def _admit(
    units: Sequence[Sequence[JobSpec]],
    ctx: SchedContext,
    free_gpus: int,
    free_slots: int,
    infeasible: Sequence[JobSpec] = (),
) -> GroupingDecision:
    groups, deferred = [], list(infeasible)
    for jobs in units:
        jobs = tuple(sorted(jobs, key=lambda j: j.job_id))
        gpus = sum(j.gpu_demand for j in jobs)
        if gpus > free_gpus or len(jobs) > free_slots:
            deferred.extend(jobs)
            continue
        est = ctx.cost.estimate(jobs)
        if est is None:
            deferred.extend(jobs)
            continue
        groups.append(PlannedGroup(jobs, ctx.cost.plan(jobs), est))
        free_gpus -= gpus
        free_slots -= len(jobs)
    return GroupingDecision(groups, deferred)


def _capacity(cluster: ClusterSpec, free_gpus: Optional[int], free_slots: Optional[int]) -> tuple[int, int]:
    g = cluster.total_gpus if free_gpus is None else free_gpus
    s = cluster.concurrency_cap if free_slots is None else free_slots
    return max(0, g), max(0, s)


def schedule_round(
    active: Sequence[JobSpec],
    cluster: ClusterSpec,
    ctx: SchedContext,
    free_gpus: Optional[int] = None,
    free_slots: Optional[int] = None,
) -> GroupingDecision:
    """Group ``active`` jobs tier by tier, then admit groups in queue order."""
    free, slots = _capacity(cluster, free_gpus, free_slots)
    cmp0, ev0 = ctx.comparisons, ctx.cost.evaluations
    entries, infeasible = [], []
    for job in active:
        e = make_entry([job], ctx)
        if e is None:
            infeasible.append(job)
        else:
            entries.append(e)
    if free > 0:
        for tier, limit in tier_limits(cluster, free):
            entries = _group_tier(entries, tier, limit, ctx, slots)
    else:
        entries = sort_queue(entries, ctx)
    decision = _admit([e.jobs for e in entries], ctx, free, slots, infeasible)
    decision.comparisons = ctx.comparisons - cmp0
    decision.evaluations = ctx.cost.evaluations - ev0
    return decision


def _arrival_order(active: Sequence[JobSpec]) -> list[JobSpec]:
    return sorted(active, key=lambda j: (j.submit_time, j.job_id))


def baseline_fifo_memory(
    active: Sequence[JobSpec],
    cluster: ClusterSpec,
    ctx: SchedContext,
    free_gpus: Optional[int] = None,
    free_slots: Optional[int] = None,
) -> GroupingDecision:
    """Pack jobs in arrival order while the pooled plan still fits in memory.

    Each base model has one open group. A job joins its model's open group
    unless the grown group would exceed the free GPUs or job slots or fail
    the memory check; then the open group is closed and the job opens a new one.
    Slowdown bounds and throughput are ignored.
    """
    free, slots = _capacity(cluster, free_gpus, free_slots)
    closed: list[list[JobSpec]] = []
    open_groups: dict = {}
    infeasible = []
    budget, slot_budget = free, slots
    for job in _arrival_order(active):
        if ctx.cost.estimate([job]) is None:
            infeasible.append(job)
            continue
        current = open_groups.get(job.model)
        if current:
            grown = current + [job]
            fits = job.gpu_demand <= budget and len(grown) <= slot_budget + len(current)
            if fits and ctx.cost.estimate(grown) is not None:
                budget -= job.gpu_demand
                slot_budget -= 1
                open_groups[job.model] = grown
                continue
            closed.append(current)
        open_groups[job.model] = [job]
        budget -= job.gpu_demand
        slot_budget -= 1
    units = closed + list(open_groups.values())
    units.sort(key=lambda u: (u[0].submit_time, u[0].job_id))
    return _admit(units, ctx, free, slots, infeasible)


def baseline_isolated(
    active: Sequence[JobSpec],
    cluster: ClusterSpec,
    ctx: SchedContext,
    free_gpus: Optional[int] = None,
    free_slots: Optional[int] = None,
) -> GroupingDecision:
    """Every job runs alone on its own GPUs, admitted in arrival order."""
    free, slots = _capacity(cluster, free_gpus, free_slots)
    units, infeasible = [], []
    for job in _arrival_order(active):
        if ctx.cost.estimate([job]) is None:
            infeasible.append(job)
        else:
            units.append([job])
    return _admit(units, ctx, free, slots, infeasible)


Policy = Callable[..., GroupingDecision]

POLICY_TABLE: dict[str, Policy] = {
    "tlora": schedule_round,
    "mlora_fifo": baseline_fifo_memory,
    "isolated": baseline_isolated,
}


def get_policy(name: str) -> Policy:
    try:
        return POLICY_TABLE[name]
    except KeyError:
        raise ValueError(f"unknown policy {name!r}; choose from {', '.join(POLICIES)}") from None


# -- exhaustive oracle -----------------------------------------------------------


def exhaustive_best_partition(
    jobs: Sequence[JobSpec],
    ctx: SchedContext,
    max_gpus: Optional[int] = None,
) -> tuple[float, list[tuple[str, ...]]]:
    """Best total predicted throughput over all set partitions of ``jobs``.

    A block is allowed when its members share a model, it has a feasible
    plan, every member respects its slowdown bound, and it fits
    ``max_gpus``. Subset dynamic program over bitmasks; fine up to ~12 jobs.
    """
    jobs = sorted(jobs, key=lambda j: j.job_id)
    k = len(jobs)
    if k > 14:
        raise ValueError("exhaustive search is limited to 14 jobs")
    limit = math.inf if max_gpus is None else max_gpus
    value = {}
    for mask in range(1, 1 << k):
        members = [jobs[i] for i in range(k) if mask >> i & 1]
        if len({j.model for j in members}) != 1 or sum(j.gpu_demand for j in members) > limit:
            continue
        est = ctx.cost.estimate(members)
        if est is None or (len(members) > 1 and not _respects_bounds(est, members)):
            continue
        value[mask] = est.throughput
    full = (1 << k) - 1
    best = {0: (0.0, ())}
    for mask in range(1, full + 1):
        low = mask & -mask
        rest = mask ^ low
        top = None
        sub = rest
        while True:
            block = sub | low
            if block in value and (mask ^ block) in best:
                prev, blocks = best[mask ^ block]
                cand = prev + value[block]
                if top is None or cand > top[0]:
                    top = (cand, blocks + (block,))
            if sub == 0:
                break
            sub = (sub - 1) & rest
        if top is not None:
            best[mask] = top
    if full not in best:
        return 0.0, []
    total, blocks = best[full]
    named = [tuple(jobs[i].job_id for i in range(k) if b >> i & 1) for b in blocks]
    return total, sorted(named)
