"""Deterministic discrete-event cluster simulator.

Events are ordered by ``(time, kind, id)`` with kinds ordered
arrival < horizon_end < iteration end < trace_end, so a run is a pure
function of its inputs. Groups advance one fused iteration at a time; every
member takes one optimizer step per iteration. A member that reaches its
step budget leaves, its GPUs return to the pool and the rest of the group is
re-planned. At every horizon boundary the policy regroups all running and
queued jobs; groups whose membership is unchanged keep running untouched.
Only ``tlora`` decouples members whose observed slowdown exceeds their bound.

Every event is written as one JSON line (sorted keys). Record shapes:

``arrival``      t, job
``round``        t, round_id, policy, reason, groups [{group_id, jobs, gpus,
                 pred_throughput, slowdown, n_nano}], deferred
``group_start``  t, group_id, jobs, gpus, penalty, first_iter_at
``iteration``    t, group_id, step, N, t_iter_event, t_iter_analytic,
                 eta_util, delta_stall, busy_gpu_s, samples
``decouple``     t, job, observed_slowdown
``complete``     t, job, jct, queueing, running
``group_end``    t, group_id, reason
``trace_end``    t, unfinished
"""

from __future__ import annotations

import heapq
import io
import json
import logging
import math
import statistics
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, TextIO

from . import nano_pipeline
from .cost_model import CostModel
from .fused_lora import adapter_flops_per_token
from .hardware import ClusterSpec, CostParams
from .nano_pipeline import AimdState, aimd_step, iteration_summary
from .scheduler import GroupingDecision, SchedContext, get_policy
from .ssm_plan import ParallelPlan
from .workload import JobSpec, Trace

log = logging.getLogger(__name__)

__all__ = [
    "ClusterSpec",
    "Event",
    "MetricsReport",
    "SimConfig",
    "SimResult",
    "run",
    "size_class",
    "size_classes",
    "utilization",
]

ARRIVAL, HORIZON_END, ITERATION, TRACE_END = 0, 1, 2, 3
KIND_NAMES = {ARRIVAL: "arrival", HORIZON_END: "horizon_end", ITERATION: "iteration", TRACE_END: "trace_end"}
SIZE_CLASSES = ("small", "medium", "large")


@dataclass(frozen=True, order=True)
class Event:
    time: float
    kind: int
    ident: str
    payload: tuple = field(default=(), compare=False)


@dataclass(frozen=True)
class SimConfig:
    horizon: float = 300.0
    regroup_penalty: float = 5.0          # seconds per regrouped job
    nano_mode: str = "adaptive"           # "adaptive" or "fixed"
    fixed_n: int = 1
    initial_n: int = 1
    aimd_alpha: int = 4
    aimd_beta: float = 0.5
    aimd_tau: Optional[float] = None      # absolute margin; None uses aimd_tau_rel
    aimd_tau_rel: float = 0.02
    cost: CostParams = CostParams()
    max_time: Optional[float] = None      # stop here even if work remains
    admit_on_arrival: bool = False        # otherwise arrivals wait for the next boundary
    admit_on_completion: bool = True      # backfill freed GPUs between boundaries
    log_iterations: bool = True

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError("horizon must be > 0")
        if self.regroup_penalty < 0:
            raise ValueError("regroup_penalty must be >= 0")
        if self.nano_mode not in ("adaptive", "fixed"):
            raise ValueError("nano_mode must be 'adaptive' or 'fixed'")
        if self.fixed_n < 1 or self.initial_n < 1:
            raise ValueError("nano-batch counts must be >= 1")

    def new_aimd(self) -> AimdState:
        return AimdState(
            N=self.initial_n,
            alpha=self.aimd_alpha,
            beta=self.aimd_beta,
            tau=self.aimd_tau,
            tau_rel=self.aimd_tau_rel,
        )


@dataclass
class _JobState:
    job: JobSpec
    done: int = 0
    group: Optional[str] = None
    last_members: Optional[frozenset] = None
    held: float = 0.0            # seconds inside a group, penalty included
    held_since: Optional[float] = None
    finish: Optional[float] = None
    window_samples: float = 0.0
    window_held: float = 0.0
    observed_slowdown: float = 0.0
    decoupled: bool = False

    @property
    def remaining_steps(self) -> int:
        return self.job.step_budget - self.done


@dataclass
class _Group:
    gid: str
    jobs: list[JobSpec]
    plan: ParallelPlan
    aimd: AimdState
    ready_at: float
    alive: bool = True
    step: int = 0
    iter_start: float = 0.0
    pending: Optional[nano_pipeline.IterationSummary] = None

    @property
    def gpus(self) -> int:
        return self.plan.pooled_gpus

    @property
    def batch(self) -> int:
        return self.plan.total_batch

    @property
    def members(self) -> frozenset:
        return frozenset(j.job_id for j in self.jobs)


@dataclass
class MetricsReport:
    policy: str
    total_gpus: int
    makespan: float
    total_samples: float
    aggregate_throughput: float
    throughput_timeline: list[tuple[float, float]]
    jct: dict[str, float]
    queueing: dict[str, float]
    gpu_utilization: float
    colocation_histogram: dict[str, float]
    completed: int
    unfinished: list[str]

    @property
    def median_jct(self) -> float:
        return statistics.median(self.jct.values()) if self.jct else math.nan

    @property
    def mean_jct(self) -> float:
        return statistics.fmean(self.jct.values()) if self.jct else math.nan

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "total_gpus": self.total_gpus,
            "makespan": self.makespan,
            "total_samples": self.total_samples,
            "aggregate_throughput": self.aggregate_throughput,
            "median_jct": self.median_jct,
            "mean_jct": self.mean_jct,
            "gpu_utilization": self.gpu_utilization,
            "completed": self.completed,
            "unfinished": list(self.unfinished),
            "colocation_histogram": dict(self.colocation_histogram),
            "throughput_timeline": [list(p) for p in self.throughput_timeline],
            "jct": dict(self.jct),
            "queueing": dict(self.queueing),
        }

    def summary(self) -> dict:
        return {
            "policy": self.policy,
            "aggregate_throughput": self.aggregate_throughput,
            "median_jct": self.median_jct,
            "mean_jct": self.mean_jct,
            "gpu_utilization": self.gpu_utilization,
            "makespan": self.makespan,
            "completed": self.completed,
        }


@dataclass
class SimResult:
    report: MetricsReport
    log_lines: list[str]

    def write_log(self, fh: TextIO) -> None:
        for line in self.log_lines:
            fh.write(line)
            fh.write("\n")

    def log_text(self) -> str:
        buf = io.StringIO()
        self.write_log(buf)
        return buf.getvalue()

    def records(self) -> list[dict]:
        return [json.loads(line) for line in self.log_lines]


# -- size classes and utilization -------------------------------------------------


def per_iteration_flops(job: JobSpec, params: CostParams = CostParams()) -> float:
    """Forward+backward FLOPs of one optimizer step of ``job`` run alone."""
    m = job.model
    per_token = m.per_layer_flops_per_token + adapter_flops_per_token(job.rank, m.hidden_dim, m.proj_dim)
    return params.passes * job.batch_size * job.seq_len * per_token * m.num_layers


def size_classes(jobs: Sequence[JobSpec], params: CostParams = CostParams()) -> dict[str, str]:
    """Tercile class of every job by per-step compute cost.

    Jobs are ranked by cost (ties by job id); rank ``i`` of ``n`` falls in
    class ``floor(3 i / n)``. Jobs with equal cost all take the lowest class
    any of them reaches.
    """
    ranked = sorted(jobs, key=lambda j: (per_iteration_flops(j, params), j.job_id))
    n = len(ranked)
    out: dict[str, str] = {}
    first_class: dict[float, int] = {}
    for i, j in enumerate(ranked):
        c = per_iteration_flops(j, params)
        cls = first_class.setdefault(c, min(2, 3 * i // n))
        out[j.job_id] = SIZE_CLASSES[cls]
    return out


def size_class(job: JobSpec, population: Sequence[JobSpec], params: CostParams = CostParams()) -> str:
    pop = list(population)
    if all(p.job_id != job.job_id for p in pop):
        pop.append(job)
    return size_classes(pop, params)[job.job_id]


def utilization(log_records: Iterable[dict], cluster: ClusterSpec) -> float:
    """Busy compute GPU-seconds over ``total_gpus * makespan``.

    The makespan runs from the first record to the ``trace_end`` record (or
    the last record).
    """
    busy = 0.0
    t0 = t1 = None
    for rec in log_records:
        t = rec.get("t")
        if t is not None:
            t0 = t if t0 is None else min(t0, t)
            t1 = t if t1 is None else max(t1, t)
        if rec.get("event") == "iteration":
            busy += rec["busy_gpu_s"]
    if t0 is None or t1 is None or t1 <= t0:
        return 0.0
    return min(1.0, busy / (cluster.total_gpus * (t1 - t0)))


# -- the simulator ----------------------------------------------------------------


class _Sim:
    def __init__(self, trace: Trace, cluster: ClusterSpec, policy: str, config: SimConfig):
        self.trace = trace
        self.cluster = cluster
        self.policy_name = policy
        self.policy = get_policy(policy)
        self.cfg = config
        self.cost = CostModel(cluster.hw, config.cost)
        self.lines: list[str] = []
        self.events: list[Event] = []
        self.jobs = {j.job_id: _JobState(j) for j in trace.jobs}
        self.queue: list[str] = []          # job ids waiting, arrival order
        self.groups: dict[str, _Group] = {}
        self.free_gpus = cluster.total_gpus
        self.free_slots = cluster.concurrency_cap
        self.n_groups = 0
        self.n_rounds = 0
        self.pending_arrivals = len(trace.jobs)
        self.now = 0.0
        self.window_start = 0.0
        self.samples_total = 0.0
        self.busy_total = 0.0
        self.iter_samples: list[tuple[float, float]] = []
        self.pairs: dict[str, int] = {}
        self.classes = size_classes(trace.jobs, config.cost)
        self.horizon_scheduled = False

    # logging
    def emit(self, event: str, **fields) -> None:
        fields["event"] = event
        fields["t"] = self.now
        self.lines.append(json.dumps(fields, sort_keys=True, separators=(",", ":")))

    def push(self, time: float, kind: int, ident: str, payload: tuple = ()) -> None:
        heapq.heappush(self.events, Event(time, kind, ident, payload))

    # policy interface
    def context(self) -> SchedContext:
        obs, rem = {}, {}
        for jid, st in self.jobs.items():
            if st.finish is not None:
                continue
            obs[jid] = st.observed_slowdown
            tput = self.cost.standalone(st.job)[0]
            rem[jid] = st.remaining_steps * st.job.batch_size / tput
        return SchedContext(self.cost, now=self.now, observed_slowdown=obs, remaining_work=rem)

    def decide(self, candidates: list[JobSpec], free_gpus: int, free_slots: int, reason: str) -> GroupingDecision:
        ctx = self.context()
        decision = self.policy(candidates, self.cluster, ctx, free_gpus=free_gpus, free_slots=free_slots)
        self.n_rounds += 1
        return decision

    def log_round(self, decision: GroupingDecision, gids: list[str], reason: str) -> None:
        self.emit(
            "round",
            round_id=self.n_rounds,
            policy=self.policy_name,
            reason=reason,
            groups=[
                {
                    "group_id": gid,
                    "jobs": list(g.job_ids),
                    "gpus": g.gpus,
                    "pred_throughput": g.estimate.throughput,
                    "slowdown": dict(g.estimate.per_job_slowdown),
                    "n_nano": g.estimate.n_nano,
                }
                for gid, g in zip(gids, decision.final_groups)
            ],
            deferred=sorted(j.job_id for j in decision.deferred),
        )

    # group lifecycle
    def hold(self, jid: str) -> None:
        self.jobs[jid].held_since = self.now

    def release(self, jid: str) -> None:
        st = self.jobs[jid]
        if st.held_since is not None:
            st.held += self.now - st.held_since
            st.window_held += self.now - max(st.held_since, self.window_start)
            st.held_since = None
        st.group = None

    def start_group(self, jobs: Sequence[JobSpec], plan: ParallelPlan) -> str:
        self.n_groups += 1
        gid = f"g{self.n_groups:05d}"
        members = frozenset(j.job_id for j in jobs)
        regrouped = sum(
            1
            for j in jobs
            if self.jobs[j.job_id].last_members is not None and self.jobs[j.job_id].last_members != members
        )
        penalty = regrouped * self.cfg.regroup_penalty
        g = _Group(gid, sorted(jobs, key=lambda j: j.job_id), plan, self.cfg.new_aimd(), self.now + penalty)
        self.groups[gid] = g
        self.free_gpus -= g.gpus
        self.free_slots -= len(jobs)
        assert self.free_gpus >= 0 and self.free_slots >= 0
        for j in g.jobs:
            st = self.jobs[j.job_id]
            st.group = gid
            st.last_members = members
            self.hold(j.job_id)
        ids = [j.job_id for j in g.jobs]
        for a in range(len(ids)):
            for b in range(a + 1, len(ids)):
                key = "-".join(sorted((self.classes[ids[a]], self.classes[ids[b]]), key=SIZE_CLASSES.index))
                self.pairs[key] = self.pairs.get(key, 0) + 1
        self.emit("group_start", group_id=gid, jobs=ids, gpus=g.gpus, penalty=penalty, first_iter_at=g.ready_at)
        self.begin_iteration(g, g.ready_at)
        return gid

    def end_group(self, g: _Group, reason: str) -> None:
        g.alive = False
        self.free_gpus += g.gpus
        self.free_slots += len(g.jobs)
        for j in g.jobs:
            self.release(j.job_id)
        del self.groups[g.gid]
        self.emit("group_end", group_id=g.gid, reason=reason)

    def current_n(self, g: _Group) -> int:
        if self.cfg.nano_mode == "fixed":
            return self.cfg.fixed_n
        return g.aimd.N

    def begin_iteration(self, g: _Group, at: float) -> None:
        g.iter_start = at
        s = iteration_summary(g.plan, g.batch, self.current_n(g))
        g.pending = s
        self.push(at + s.t_iter_event, ITERATION, g.gid, (g.step,))

    def finish_iteration(self, g: _Group) -> None:
        s = g.pending
        g.step += 1
        samples = float(g.batch)
        self.samples_total += samples
        self.busy_total += s.busy_gpu_seconds
        self.iter_samples.append((self.now, samples))
        if self.cfg.log_iterations:
            self.emit(
                "iteration",
                group_id=g.gid,
                step=g.step,
                N=s.n_nano,
                t_iter_event=s.t_iter_event,
                t_iter_analytic=s.t_iter_analytic,
                eta_util=s.eta_util,
                delta_stall=s.delta_stall,
                busy_gpu_s=s.busy_gpu_seconds,
                samples=samples,
            )
        if self.cfg.nano_mode == "adaptive":
            g.aimd = aimd_step(g.aimd, s.t_iter_event, cap=g.batch)
        finished = []
        for j in g.jobs:
            st = self.jobs[j.job_id]
            st.done += 1
            st.window_samples += j.batch_size
            if st.done >= j.step_budget:
                finished.append(j)
        if not finished:
            self.begin_iteration(g, self.now)
            return
        for j in finished:
            self.complete(j)
        rest = [j for j in g.jobs if j not in finished]
        self.end_group(g, "member_complete" if rest else "all_complete")
        if rest:
            # survivors keep running on their own GPUs; not a regroup
            plan = self.cost.plan(rest)
            self.n_groups += 1
            gid = f"g{self.n_groups:05d}"
            ng = _Group(gid, rest, plan, self.cfg.new_aimd(), self.now)
            self.groups[gid] = ng
            self.free_gpus -= ng.gpus
            self.free_slots -= len(rest)
            members = ng.members
            for j in rest:
                st = self.jobs[j.job_id]
                st.group = gid
                st.last_members = members
                self.hold(j.job_id)
            self.emit("group_start", group_id=gid, jobs=sorted(members), gpus=ng.gpus, penalty=0.0, first_iter_at=self.now)
            self.begin_iteration(ng, self.now)
        if self.cfg.admit_on_completion:
            self.admit("completion")

    def complete(self, job: JobSpec) -> None:
        st = self.jobs[job.job_id]
        self.release(job.job_id)
        st.finish = self.now
        jct = self.now - job.submit_time
        self.emit("complete", job=job.job_id, jct=jct, queueing=jct - st.held, running=st.held)

    # admission and regrouping
    def queued_jobs(self) -> list[JobSpec]:
        return [self.jobs[jid].job for jid in self.queue]

    def launch(self, decision: GroupingDecision, reason: str) -> None:
        gids = []
        for pg in decision.final_groups:
            gids.append(self.start_group(pg.jobs, pg.plan))
            for j in pg.jobs:
                if j.job_id in self.queue:
                    self.queue.remove(j.job_id)
        self.log_round(decision, gids, reason)

    def admit(self, reason: str) -> None:
        if not self.queue or self.free_gpus <= 0 or self.free_slots <= 0:
            return
        decision = self.decide(self.queued_jobs(), self.free_gpus, self.free_slots, reason)
        if decision.final_groups:
            self.launch(decision, reason)

    def observe_window(self) -> None:
        for g in self.groups.values():
            for j in g.jobs:
                st = self.jobs[j.job_id]
                if st.held_since is not None:
                    st.window_held += self.now - max(st.held_since, self.window_start)
                    st.held_since = self.now
        for st in self.jobs.values():
            if st.finish is None and st.window_held > 0:
                alone = self.cost.standalone(st.job)[0]
                inside = st.window_samples / st.window_held
                st.observed_slowdown = math.inf if inside == 0 else alone / inside
            st.window_samples = 0.0
            st.window_held = 0.0
        self.window_start = self.now

    def regroup(self) -> None:
        self.observe_window()
        # decouple jobs running slower than their bound (the baselines ignore it)
        for g in list(self.groups.values()):
            if len(g.jobs) < 2 or self.policy_name != "tlora":
                continue
            slow = [j for j in g.jobs if self.jobs[j.job_id].observed_slowdown > j.max_slowdown]
            for j in slow:
                self.jobs[j.job_id].decoupled = True
                self.emit("decouple", job=j.job_id, observed_slowdown=self.jobs[j.job_id].observed_slowdown)
        running = [j for g in self.groups.values() for j in g.jobs]
        candidates = sorted(running + self.queued_jobs(), key=lambda j: (j.submit_time, j.job_id))
        decision = self.decide(candidates, self.cluster.total_gpus, self.cluster.concurrency_cap, "horizon")
        by_members = {g.members: g for g in self.groups.values()}
        keep = set()
        fresh = []
        for pg in decision.final_groups:
            m = frozenset(pg.job_ids)
            g = by_members.get(m)
            if g is not None and not any(self.jobs[j].decoupled for j in m):
                keep.add(g.gid)
            else:
                fresh.append(pg)
        for g in sorted(self.groups.values(), key=lambda g: g.gid):
            if g.gid not in keep:
                for j in g.jobs:
                    self.queue.append(j.job_id)
                self.end_group(g, "regroup")
        self.queue.sort(key=lambda jid: (self.jobs[jid].job.submit_time, jid))
        for st in self.jobs.values():
            st.decoupled = False
        gids = []
        for pg in fresh:
            gids.append(self.start_group(pg.jobs, pg.plan))
            for j in pg.jobs:
                self.queue.remove(j.job_id)
        kept = [g for g in decision.final_groups if frozenset(g.job_ids) not in {frozenset(pg.job_ids) for pg in fresh}]
        self.log_round(
            GroupingDecision(fresh + kept, decision.deferred),
            gids + [self._gid_of(pg.job_ids) for pg in kept],
            "horizon",
        )

    def _gid_of(self, job_ids) -> str:
        return self.jobs[job_ids[0]].group or ""

    def work_left(self) -> bool:
        return bool(self.pending_arrivals or self.queue or self.groups)

    # main loop
    def run(self) -> SimResult:
        for j in self.trace.jobs:
            self.push(j.submit_time, ARRIVAL, j.job_id)
        start = self.trace.jobs[0].submit_time if self.trace.jobs else 0.0
        self.now = start
        self.window_start = start
        self.push(start, HORIZON_END, "h")
        stop = self.cfg.max_time
        while self.events:
            ev = heapq.heappop(self.events)
            if stop is not None and ev.time > stop:
                self.now = stop
                break
            self.now = ev.time
            if ev.kind == ARRIVAL:
                self.pending_arrivals -= 1
                self.queue.append(ev.ident)
                self.emit("arrival", job=ev.ident)
                if self.cfg.admit_on_arrival:
                    self.admit("arrival")
            elif ev.kind == ITERATION:
                g = self.groups.get(ev.ident)
                if g is None or not g.alive or ev.payload[0] != g.step:
                    continue
                self.finish_iteration(g)
            elif ev.kind == HORIZON_END:
                if self.groups or self.queue:
                    self.regroup()
                else:
                    self.observe_window()
                if self.work_left():
                    # an idle cluster with nothing left to arrive would repeat this round forever
                    if not self.groups and not self.pending_arrivals:
                        break
                    self.push(self.now + self.cfg.horizon, HORIZON_END, "h")
            if not self.work_left():
                break
        for g in list(self.groups.values()):
            for j in g.jobs:
                self.release(j.job_id)
        unfinished = sorted(jid for jid, st in self.jobs.items() if st.finish is None)
        if unfinished:
            log.warning("%d jobs unfinished at trace end", len(unfinished))
        self.emit("trace_end", unfinished=unfinished)
        return SimResult(self.report(start, unfinished), self.lines)

    def report(self, start: float, unfinished: list[str]) -> MetricsReport:
        makespan = self.now - start
        jct, queueing = {}, {}
        for jid, st in sorted(self.jobs.items()):
            if st.finish is not None:
                jct[jid] = st.finish - st.job.submit_time
                queueing[jid] = jct[jid] - st.held
        bucket = self.cfg.horizon
        timeline: list[tuple[float, float]] = []
        if makespan > 0:
            n_buckets = max(1, math.ceil(makespan / bucket))
            sums = [0.0] * n_buckets
            for t, s in self.iter_samples:
                sums[min(n_buckets - 1, int((t - start) // bucket))] += s
            timeline = [(start + i * bucket, sums[i] / bucket) for i in range(n_buckets)]
        total_pairs = sum(self.pairs.values())
        hist = {k: v / total_pairs for k, v in sorted(self.pairs.items())} if total_pairs else {}
        util = self.busy_total / (self.cluster.total_gpus * makespan) if makespan > 0 else 0.0
        return MetricsReport(
            policy=self.policy_name,
            total_gpus=self.cluster.total_gpus,
            makespan=makespan,
            total_samples=self.samples_total,
            aggregate_throughput=self.samples_total / makespan if makespan > 0 else 0.0,
            throughput_timeline=timeline,
            jct=jct,
            queueing=queueing,
            gpu_utilization=min(1.0, util),
            colocation_histogram=hist,
            completed=len(jct),
            unfinished=unfinished,
        )


def run(
    trace: Trace,
    cluster: ClusterSpec = ClusterSpec(),
    policy: str = "tlora",
    config: SimConfig = SimConfig(),
) -> SimResult:
    """Simulate ``trace`` on ``cluster`` under ``policy``; returns metrics and the event log."""
    get_policy(policy)
    return _Sim(trace, cluster, policy, config).run()
