"""Job definitions and arrival traces.

Traces are stored as a small CSV schema carrying the LoRA attributes
(rank, batch size, sequence length, step budget) that generic cluster
traces lack::

    job_id,submit_time_s,model,rank,batch_size,seq_len,step_budget,gpu_demand,max_slowdown,deadline_s

``max_slowdown`` and ``deadline_s`` may be empty. Lines starting with ``#``
are ignored.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import random
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

logger = logging.getLogger(__name__)

TRACE_COLUMNS = (
    "job_id",
    "submit_time_s",
    "model",
    "rank",
    "batch_size",
    "seq_len",
    "step_budget",
    "gpu_demand",
    "max_slowdown",
    "deadline_s",
)
OPTIONAL_COLUMNS = ("max_slowdown", "deadline_s")

RANK_CHOICES = (2, 4, 8, 16)
BATCH_CHOICES = (1, 2, 4, 8)

DEFAULT_MAX_SLOWDOWN = 1.25
DEFAULT_SEQ_LEN = 512


class TraceError(ValueError):
    """Malformed trace file or row."""


class CatalogError(KeyError):
    """A trace references a base model that is not in the catalog."""


@dataclass(frozen=True)
class ModelSpec:
    name: str
    num_layers: int
    hidden_dim: int
    proj_dim: int
    per_layer_flops_per_token: float
    base_memory_bytes: float

    def __post_init__(self):
        if self.num_layers < 1 or self.hidden_dim < 1 or self.proj_dim < 1:
            raise ValueError(f"model {self.name}: layer and dimension counts must be >= 1")
        if self.base_memory_bytes <= 0:
            raise ValueError(f"model {self.name}: base_memory_bytes must be > 0")


@dataclass(frozen=True)
class JobSpec:
    job_id: str
    model: ModelSpec
    rank: int
    batch_size: int
    seq_len: int
    step_budget: int
    gpu_demand: int
    submit_time: float
    max_slowdown: float = DEFAULT_MAX_SLOWDOWN
    deadline: Optional[float] = None

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError(f"job {self.job_id}: rank must be >= 1, got {self.rank}")
        if self.rank > min(self.model.hidden_dim, self.model.proj_dim):
            raise ValueError(f"job {self.job_id}: rank {self.rank} exceeds min(d, k)")
        if self.batch_size < 1:
            raise ValueError(f"job {self.job_id}: batch_size must be >= 1")
        if self.seq_len < 1:
            raise ValueError(f"job {self.job_id}: seq_len must be >= 1")
        if self.gpu_demand < 1:
            raise ValueError(f"job {self.job_id}: gpu_demand must be >= 1")
        if self.step_budget < 1:
            raise ValueError(f"job {self.job_id}: step_budget must be >= 1")
        if self.max_slowdown < 1:
            raise ValueError(f"job {self.job_id}: max_slowdown must be >= 1")


@dataclass(frozen=True)
class Trace:
    jobs: tuple[JobSpec, ...]
    horizon_end: float

    def __post_init__(self):
        ids = [j.job_id for j in self.jobs]
        if len(set(ids)) != len(ids):
            raise TraceError("duplicate job_id in trace")
        times = [j.submit_time for j in self.jobs]
        if any(b < a for a, b in zip(times, times[1:])):
            raise TraceError("jobs must be ordered by submit_time")

    def __len__(self):
        return len(self.jobs)


# Rough 8B-class shapes: one adapted d x k projection per layer.
LLAMA3_8B = ModelSpec(
    name="llama-3-8b",
    num_layers=32,
    hidden_dim=4096,
    proj_dim=4096,
    per_layer_flops_per_token=2 * 218e6,
    base_memory_bytes=16.1e9,
)
QWEN3_8B = ModelSpec(
    name="qwen-3-8b",
    num_layers=36,
    hidden_dim=4096,
    proj_dim=4096,
    per_layer_flops_per_token=2 * 205e6,
    base_memory_bytes=16.4e9,
)
DEFAULT_CATALOG = (LLAMA3_8B, QWEN3_8B)


def make_trace(jobs: Iterable[JobSpec], horizon_end: Optional[float] = None) -> Trace:
    """Build a Trace, sorting by submit time (stable, ties keep input order)."""
    ordered = tuple(sorted(jobs, key=lambda j: j.submit_time))
    if horizon_end is None:
        horizon_end = ordered[-1].submit_time if ordered else 0.0
    return Trace(jobs=ordered, horizon_end=horizon_end)


def _catalog_index(model_catalog: Sequence[ModelSpec]) -> dict[str, ModelSpec]:
    return {m.name: m for m in model_catalog}


def _parse_row(row: dict, lineno: int, models: dict[str, ModelSpec]) -> JobSpec:
    try:
        name = row["model"].strip()
        if name not in models:
            raise CatalogError(f"line {lineno}: unknown model {name!r}")
        max_slowdown = row.get("max_slowdown") or ""
        deadline = row.get("deadline_s") or ""
        return JobSpec(
            job_id=row["job_id"].strip(),
            model=models[name],
            rank=int(row["rank"]),
            batch_size=int(row["batch_size"]),
            seq_len=int(row["seq_len"]) if row["seq_len"].strip() else DEFAULT_SEQ_LEN,
            step_budget=int(row["step_budget"]),
            gpu_demand=int(row["gpu_demand"]),
            submit_time=float(row["submit_time_s"]),
            max_slowdown=float(max_slowdown) if max_slowdown.strip() else DEFAULT_MAX_SLOWDOWN,
            deadline=float(deadline) if deadline.strip() else None,
        )
    except CatalogError:
        raise
    except (TypeError, ValueError, AttributeError) as exc:
        raise TraceError(f"line {lineno}: {exc}") from exc


def parse_trace_text(
    text: str, model_catalog: Sequence[ModelSpec] = DEFAULT_CATALOG, max_gpus: Optional[int] = None
) -> Trace:
    models = _catalog_index(model_catalog)
    # Keep physical line numbers so errors point at the right row.
    numbered = [
        (i, line) for i, line in enumerate(text.splitlines(), start=1)
        if line.strip() and not line.lstrip().startswith("#")
    ]
    if not numbered:
        raise TraceError("empty trace: header row required")
    header_lineno, header_line = numbered[0]
    header = [h.strip() for h in next(csv.reader([header_line]))]
    required = [c for c in TRACE_COLUMNS if c not in OPTIONAL_COLUMNS]
    missing = [c for c in required if c not in header]
    unknown = [c for c in header if c not in TRACE_COLUMNS]
    if missing or unknown:
        raise TraceError(
            f"line {header_lineno}: bad header (missing={missing}, unknown={unknown})"
        )

    jobs = []
    for lineno, line in numbered[1:]:
        values = next(csv.reader([line]))
        if len(values) > len(header):
            raise TraceError(f"line {lineno}: expected {len(header)} fields, got {len(values)}")
        values += [""] * (len(header) - len(values))
        job = _parse_row(dict(zip(header, values)), lineno, models)
        if max_gpus is not None and job.gpu_demand > max_gpus:
            logger.warning(
                "job %s demands %d GPUs (> cluster max %d); it will stay queued",
                job.job_id, job.gpu_demand, max_gpus,
            )
        jobs.append(job)
    ids = [j.job_id for j in jobs]
    if len(set(ids)) != len(ids):
        raise TraceError("duplicate job_id in trace")
    return make_trace(jobs)


def parse_trace(
    path, model_catalog: Sequence[ModelSpec] = DEFAULT_CATALOG, max_gpus: Optional[int] = None
) -> Trace:
    """Read a trace CSV. Raises TraceError / CatalogError with the offending line."""
    text = Path(path).read_text(encoding="utf-8")
    return parse_trace_text(text, model_catalog, max_gpus=max_gpus)


def _fmt_float(x: float) -> str:
    return repr(float(x))


def serialize_trace(trace: Trace) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS)
    for j in trace.jobs:
        writer.writerow([
            j.job_id,
            _fmt_float(j.submit_time),
            j.model.name,
            j.rank,
            j.batch_size,
            j.seq_len,
            j.step_budget,
            j.gpu_demand,
            _fmt_float(j.max_slowdown),
            "" if j.deadline is None else _fmt_float(j.deadline),
        ])
    return buf.getvalue()


def write_trace(trace: Trace, path) -> None:
    Path(path).write_text(serialize_trace(trace), encoding="utf-8")


@dataclass(frozen=True)
class SynthParams:
    """Knobs for synthetic traces that the published setup leaves open."""

    gpu_choices: tuple[int, ...] = (1, 2, 4, 8)
    gpu_weights: tuple[float, ...] = (0.4, 0.3, 0.2, 0.1)
    step_budget_min: int = 200
    step_budget_max: int = 2000
    seq_len: int = DEFAULT_SEQ_LEN
    max_slowdown: float = DEFAULT_MAX_SLOWDOWN


def synth_trace(
    n_jobs: int,
    seed: int,
    arrival_rate: float,
    model_catalog: Sequence[ModelSpec] = DEFAULT_CATALOG,
    params: SynthParams = SynthParams(),
) -> Trace:
    """Poisson arrivals with rank and batch size drawn uniformly.

    Step budgets are log-uniform in ``[step_budget_min, step_budget_max]``.
    """
    if n_jobs < 1:
        raise ValueError("n_jobs must be >= 1")
    if arrival_rate <= 0:
        raise ValueError("arrival_rate must be > 0")
    if not model_catalog:
        raise ValueError("model_catalog is empty")
    rng = random.Random(seed)
    t = 0.0
    jobs = []
    lo, hi = math.log(params.step_budget_min), math.log(params.step_budget_max)
    width = len(str(n_jobs - 1))
    for i in range(n_jobs):
        if i > 0:
            t += rng.expovariate(arrival_rate)
        model = model_catalog[rng.randrange(len(model_catalog))]
        jobs.append(JobSpec(
            job_id=f"j{i:0{width}d}",
            model=model,
            rank=rng.choice(RANK_CHOICES),
            batch_size=rng.choice(BATCH_CHOICES),
            seq_len=params.seq_len,
            step_budget=int(round(math.exp(rng.uniform(lo, hi)))),
            gpu_demand=rng.choices(params.gpu_choices, weights=params.gpu_weights)[0],
            submit_time=t,
            max_slowdown=params.max_slowdown,
        ))
    return Trace(jobs=tuple(jobs), horizon_end=t)


def scale_arrivals(trace: Trace, factor: float) -> Trace:
    """Compress (factor > 1) or stretch (factor < 1) inter-arrival times."""
    if factor <= 0:
        raise ValueError("factor must be > 0")
    jobs = tuple(replace(j, submit_time=j.submit_time / factor) for j in trace.jobs)
    return Trace(jobs=jobs, horizon_end=trace.horizon_end / factor)
