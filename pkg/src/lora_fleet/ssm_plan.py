"""Shared super-model graphs and pipeline-stage planning.

A group's jobs share one backbone node per layer; every job hangs one
adapter branch off each layer. The planner splits layers into contiguous
stages, one GPU each, minimising the slowest stage, and checks memory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from .fused_lora import adapter_flops_per_token, trainable_param_count
from .hardware import CostParams, HardwareSpec
from .workload import JobSpec, ModelSpec


class FusionError(ValueError):
    pass


class PlanInfeasible(RuntimeError):
    pass


@dataclass(frozen=True)
class Branch:
    layer: int
    job_id: str
    rank: int
    batch_size: int
    seq_len: int


@dataclass(frozen=True)
class SsmGraph:
    model: ModelSpec
    jobs: tuple[JobSpec, ...]  # sorted by job_id
    backbone_nodes: tuple[int, ...]
    adapter_branches: dict  # (layer, job_id) -> Branch
    edges: tuple[tuple, ...]

    @property
    def job_ids(self) -> tuple[str, ...]:
        return tuple(j.job_id for j in self.jobs)

    def signature(self) -> tuple:
        """Cost-relevant content, independent of job identities."""
        return (
            self.model,
            tuple(sorted((j.rank, j.batch_size, j.seq_len) for j in self.jobs)),
        )

    def is_acyclic(self) -> bool:
        succ: dict = {}
        indeg: dict = {}
        for a, b in self.edges:
            succ.setdefault(a, []).append(b)
            indeg[b] = indeg.get(b, 0) + 1
            indeg.setdefault(a, 0)
        frontier = [n for n, d in indeg.items() if d == 0]
        seen = 0
        while frontier:
            n = frontier.pop()
            seen += 1
            for m in succ.get(n, ()):
                indeg[m] -= 1
                if indeg[m] == 0:
                    frontier.append(m)
        return seen == len(indeg)


def fuse(group: Iterable[JobSpec]) -> SsmGraph:
    """Attach every job's adapters to a single shared copy of the backbone."""
    jobs = tuple(sorted(group, key=lambda j: j.job_id))
    if not jobs:
        raise FusionError("cannot fuse an empty group")
    if len({j.job_id for j in jobs}) != len(jobs):
        raise FusionError("duplicate job in group")
    models = {j.model for j in jobs}
    if len(models) != 1:
        names = sorted(m.name for m in models)
        raise FusionError(f"jobs use different base models: {names}")
    model = jobs[0].model
    layers = tuple(range(model.num_layers))
    branches = {}
    edges = []
    for layer in layers:
        if layer > 0:
            edges.append((("backbone", layer - 1), ("backbone", layer)))
        for j in jobs:
            branches[(layer, j.job_id)] = Branch(layer, j.job_id, j.rank, j.batch_size, j.seq_len)
            edges.append((("backbone", layer), ("branch", layer, j.job_id)))
            if layer + 1 < model.num_layers:
                edges.append((("branch", layer, j.job_id), ("backbone", layer + 1)))
    return SsmGraph(model, jobs, layers, branches, tuple(edges))


def partition_layers(costs: Sequence[float], n_stages: int) -> tuple[list[tuple[int, int]], float]:
    """Split ``costs`` into ``n_stages`` contiguous non-empty blocks.

    Minimises the largest block sum. Returns ``[(start, stop), ...]`` and
    that bottleneck. Ties prefer shorter leading blocks.
    """
    n = len(costs)
    if not 1 <= n_stages <= n:
        raise ValueError(f"need 1 <= stages <= layers, got {n_stages} stages for {n} layers")
    if all(c == costs[0] for c in costs):
        q, extra = divmod(n, n_stages)
        bounds, start = [], 0
        for s in range(n_stages):
            stop = start + q + (1 if s >= n_stages - extra else 0)
            bounds.append((start, stop))
            start = stop
        return bounds, max(sum(costs[a:b]) for a, b in bounds)

    prefix = [0.0]
    for c in costs:
        prefix.append(prefix[-1] + c)
    inf = float("inf")
    # best[s][i]: minimal bottleneck for the first i layers in s stages
    best = [[inf] * (n + 1) for _ in range(n_stages + 1)]
    cut = [[0] * (n + 1) for _ in range(n_stages + 1)]
    best[0][0] = 0.0
    for s in range(1, n_stages + 1):
        for i in range(s, n - (n_stages - s) + 1):
            for j in range(s - 1, i):
                v = max(best[s - 1][j], prefix[i] - prefix[j])
                if v < best[s][i]:
                    best[s][i] = v
                    cut[s][i] = j
    bounds = []
    i = n
    for s in range(n_stages, 0, -1):
        j = cut[s][i]
        bounds.append((j, i))
        i = j
    bounds.reverse()
    return bounds, best[n_stages][n]


@dataclass(frozen=True)
class Stage:
    layers: tuple[int, int]  # [start, stop)
    gpus: tuple[int, ...]
    node: int

    @property
    def num_layers(self) -> int:
        return self.layers[1] - self.layers[0]


@dataclass(frozen=True)
class ParallelPlan:
    stages: tuple[Stage, ...]
    pooled_gpus: int
    iter_fixed: tuple[float, ...]        # s per iteration per stage (weight streaming)
    comp_fixed: tuple[float, ...]        # s per nano-batch per stage (kernel launches)
    comp_per_sample: tuple[float, ...]   # s per sample per stage
    comm_per_sample: tuple[float, ...]   # s per sample on the outgoing link (0 on last)
    boundary_bytes_per_sample: tuple[float, ...]
    stage_memory: tuple[float, ...]
    total_batch: int
    useful_flops: float                  # per iteration, all stages
    signature: tuple = ()
    representatives: tuple[int, ...] = ()

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    @property
    def stage_costs(self) -> tuple[float, ...]:
        """Compute seconds per stage when the whole batch is one nano-batch."""
        return tuple(
            i + f + p * self.total_batch
            for i, f, p in zip(self.iter_fixed, self.comp_fixed, self.comp_per_sample)
        )

    def boundary_comm(self, samples: int) -> tuple[float, ...]:
        """Bytes crossing each stage boundary for a nano-batch of ``samples``."""
        return tuple(b * samples for b in self.boundary_bytes_per_sample)

    @property
    def nodes_spanned(self) -> int:
        return len({s.node for s in self.stages})

    def distinct_stages(self) -> tuple[int, ...]:
        """One representative index per distinct stage/link cost triple."""
        return self.representatives or tuple(range(self.num_stages))


def _group_rates(jobs: Sequence[JobSpec], params: CostParams):
    m = jobs[0].model
    total_batch = sum(j.batch_size for j in jobs)
    tokens = sum(j.batch_size * j.seq_len for j in jobs)
    # fsum: cached plans are shared by groups listing their jobs in any order
    adapter = math.fsum(
        j.batch_size * j.seq_len * adapter_flops_per_token(j.rank, m.hidden_dim, m.proj_dim)
        for j in jobs
    )
    # FLOPs of one sample through one layer, forward + backward
    flops_per_sample = params.passes * (tokens * m.per_layer_flops_per_token + adapter) / total_batch
    tokens_per_sample = tokens / total_batch
    return total_batch, flops_per_sample, tokens_per_sample


def layer_costs(ssm: SsmGraph, params: CostParams = CostParams()) -> list[float]:
    """FLOPs of each layer for the group's full batch (backbone + branches)."""
    m = ssm.model
    per_layer = []
    for layer in ssm.backbone_nodes:
        branches = [ssm.adapter_branches[(layer, jid)] for jid in ssm.job_ids]
        tokens = sum(b.batch_size * b.seq_len for b in branches)
        cost = tokens * m.per_layer_flops_per_token
        cost += math.fsum(
            b.batch_size * b.seq_len * adapter_flops_per_token(b.rank, m.hidden_dim, m.proj_dim)
            for b in branches
        )
        per_layer.append(params.passes * cost)
    return per_layer


def group_signature(jobs: Sequence[JobSpec]) -> tuple:
    """Same value as ``fuse(jobs).signature()`` without building the graph."""
    models = {j.model for j in jobs}
    if len(models) != 1:
        raise FusionError(f"jobs use different base models: {sorted(m.name for m in models)}")
    return (jobs[0].model, tuple(sorted((j.rank, j.batch_size, j.seq_len) for j in jobs)))


def plan_group(
    jobs: Sequence[JobSpec],
    pooled_gpus: int,
    hw: HardwareSpec = HardwareSpec(),
    params: CostParams = CostParams(),
) -> ParallelPlan:
    """Like ``plan(fuse(jobs), ...)`` but skips graph construction on cache hits."""
    if pooled_gpus < 1:
        raise ValueError("pooled_gpus must be >= 1")
    if not jobs:
        raise FusionError("cannot fuse an empty group")
    jobs = tuple(sorted(jobs, key=lambda j: j.job_id))
    return _plan_cached(group_signature(jobs), jobs, pooled_gpus, hw, params)


def plan(
    ssm: SsmGraph,
    pooled_gpus: int,
    hw: HardwareSpec = HardwareSpec(),
    params: CostParams = CostParams(),
) -> ParallelPlan:
    """Pipeline-parallel plan over ``pooled_gpus`` GPUs packed onto nodes.

    GPUs beyond the layer count join the last stage and sit idle.
    """
    if pooled_gpus < 1:
        raise ValueError("pooled_gpus must be >= 1")
    return _plan_cached(ssm.signature(), ssm.jobs, pooled_gpus, hw, params)


def _plan_cached(signature, jobs, pooled_gpus, hw, params):
    key = (signature, pooled_gpus, hw, params)
    hit = _PLAN_CACHE.get(key)
    if hit is None:
        hit = _build_plan(jobs, pooled_gpus, hw, params)
        if len(_PLAN_CACHE) > 200_000:
            _PLAN_CACHE.clear()
        _PLAN_CACHE[key] = hit
    return hit


_PLAN_CACHE: dict = {}


def _build_plan(jobs, pooled_gpus, hw, params) -> ParallelPlan:
    m = jobs[0].model
    ssm = fuse(jobs)
    ssm_costs = layer_costs(ssm, params)
    n_stages = min(pooled_gpus, m.num_layers)
    bounds, _ = partition_layers(ssm_costs, n_stages)

    total_batch, flops_ps, tokens_ps = _group_rates(jobs, params)
    adapter_kernels = 1 if params.fused_kernel else 2 * len(jobs)
    act_bytes_per_layer = sum(
        j.batch_size * j.seq_len for j in jobs
    ) * m.hidden_dim * params.bytes_per_value * params.activation_factor
    adapter_bytes_per_layer = sum(
        trainable_param_count(j) for j in jobs
    ) / m.num_layers * params.bytes_per_value * (1.0 + params.optimizer_multiplier)
    base_bytes_per_layer = m.base_memory_bytes / m.num_layers
    link_bytes_per_sample = 2.0 * tokens_ps * m.hidden_dim * params.bytes_per_value

    stages, setup, fixed, per_sample, comm, bbytes, memory = [], [], [], [], [], [], []
    for s, (a, b) in enumerate(bounds):
        n_layers = b - a
        gpus = (s,) if s < n_stages - 1 else tuple(range(s, pooled_gpus))
        node = s // hw.gpus_per_node
        stages.append(Stage((a, b), gpus, node))
        launches = n_layers * params.passes * (params.base_kernels_per_layer + adapter_kernels)
        setup.append(
            n_layers * params.passes * params.saturation_tokens * m.per_layer_flops_per_token / hw.gpu_flops
        )
        fixed.append(launches * hw.kernel_launch_overhead)
        per_sample.append(n_layers * flops_ps / hw.gpu_flops)
        if s < n_stages - 1:
            inter = (s + 1) // hw.gpus_per_node != node
            bw = hw.inter_node_bw if inter else hw.intra_node_bw
            bbytes.append(link_bytes_per_sample)
            comm.append(link_bytes_per_sample / bw)
        else:
            comm.append(0.0)
        mem = n_layers * (base_bytes_per_layer + adapter_bytes_per_layer + act_bytes_per_layer)
        memory.append(mem)

    worst = max(range(n_stages), key=lambda i: memory[i])
    if memory[worst] > hw.gpu_memory:
        raise PlanInfeasible(
            f"stage {worst} needs {memory[worst] / 1e9:.1f} GB > {hw.gpu_memory / 1e9:.1f} GB"
        )
    return ParallelPlan(
        stages=tuple(stages),
        pooled_gpus=pooled_gpus,
        iter_fixed=tuple(setup),
        comp_fixed=tuple(fixed),
        comp_per_sample=tuple(per_sample),
        comm_per_sample=tuple(comm),
        boundary_bytes_per_sample=tuple(bbytes),
        stage_memory=tuple(memory),
        total_batch=total_batch,
        useful_flops=total_batch * flops_ps * m.num_layers,
        signature=(ssm.signature(), pooled_gpus),
        representatives=_representatives(setup, fixed, per_sample, comm),
    )


def _representatives(*columns) -> tuple[int, ...]:
    seen = {}
    for s, key in enumerate(zip(*columns)):
        seen.setdefault(key, s)
    return tuple(sorted(seen.values()))
