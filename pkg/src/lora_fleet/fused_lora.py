"""Reference semantics of the fused batched LoRA kernel.

Tokens for each adapter are gathered, pushed through the down-projection
``A_i`` (d x r_i) to a ``(|X_i|, r_i)`` intermediate, then through the
up-projection ``B_i`` (r_i x k) and scattered back. The ``d x k`` adapter
product is never formed. ``materialized_forward`` is the dense
counterpart and exists to check the fused path.

FLOPs use the 2-per-multiply-add convention.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .workload import JobSpec


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class AdapterMatrices:
    job_id: str
    A: np.ndarray  # d x r
    B: np.ndarray  # r x k

    def __post_init__(self):
        if self.A.ndim != 2 or self.B.ndim != 2:
            raise ShapeError(f"adapter {self.job_id}: A and B must be matrices")
        if self.A.shape[1] != self.B.shape[0]:
            raise ShapeError(
                f"adapter {self.job_id}: A has {self.A.shape[1]} columns but B has {self.B.shape[0]} rows"
            )

    @property
    def rank(self) -> int:
        return self.A.shape[1]


@dataclass(frozen=True)
class TokenBatch:
    rows: np.ndarray  # total_tokens x d
    segment_map: tuple[str, ...]  # owning job_id per row

    def __post_init__(self):
        if self.rows.ndim != 2:
            raise ShapeError("token rows must be a matrix")
        if len(self.segment_map) != self.rows.shape[0]:
            raise ShapeError(
                f"segment_map has {len(self.segment_map)} entries for {self.rows.shape[0]} rows"
            )

    def segments(self) -> dict[str, np.ndarray]:
        """Row indices per job, in first-appearance order."""
        idx: dict[str, list[int]] = {}
        for t, job_id in enumerate(self.segment_map):
            idx.setdefault(job_id, []).append(t)
        return {j: np.asarray(v, dtype=np.intp) for j, v in idx.items()}


@dataclass(frozen=True)
class OpCost:
    flops: float = 0.0
    bytes_moved: float = 0.0
    kernel_launches: int = 0

    def __add__(self, other: "OpCost") -> "OpCost":
        return OpCost(
            self.flops + other.flops,
            self.bytes_moved + other.bytes_moved,
            self.kernel_launches + other.kernel_launches,
        )


def _adapter_table(adapters) -> dict[str, AdapterMatrices]:
    if isinstance(adapters, Mapping):
        return dict(adapters)
    return {a.job_id: a for a in adapters}


def _check(batch: TokenBatch, base_weight: np.ndarray, table: dict[str, AdapterMatrices]):
    d = batch.rows.shape[1]
    if base_weight.ndim != 2 or base_weight.shape[0] != d:
        raise ShapeError(f"base weight shape {base_weight.shape} does not accept d={d} inputs")
    k = base_weight.shape[1]
    segments = batch.segments()
    for job_id in segments:
        if job_id not in table:
            raise ShapeError(f"segment {job_id}: no adapter supplied")
        a = table[job_id]
        if a.A.shape[0] != d:
            raise ShapeError(f"segment {job_id}: A has {a.A.shape[0]} rows, expected d={d}")
        if a.B.shape[1] != k:
            raise ShapeError(f"segment {job_id}: B has {a.B.shape[1]} columns, expected k={k}")
    return d, k, segments


def segment_cost(n_tokens: int, d: int, k: int, rank: int) -> float:
    """Adapter FLOPs for one segment: down- then up-projection."""
    return 2.0 * n_tokens * d * rank + 2.0 * n_tokens * rank * k


def fused_forward(
    batch: TokenBatch,
    base_weight: np.ndarray,
    adapters,
    fused: bool = True,
    itemsize: int = 8,
) -> tuple[np.ndarray, OpCost]:
    """Compute ``X @ W + X_i @ A_i @ B_i`` per segment without forming ``A_i @ B_i``.

    With ``fused=False`` the cost reports the per-adapter kernel sequence
    (one launch per projection per adapter, plus the base GEMM).
    """
    table = _adapter_table(adapters)
    d, k, segments = _check(batch, base_weight, table)
    X = batch.rows
    total = X.shape[0]
    out = X @ base_weight
    flops = 2.0 * total * d * k
    moved = float(X.size + base_weight.size + out.size)
    for job_id, idx in segments.items():
        a = table[job_id]
        x_i = X[idx]                      # gather
        h = x_i @ a.A                      # (|X_i|, r_i)
        out[idx] += h @ a.B                # scatter-add
        flops += segment_cost(len(idx), d, k, a.rank)
        moved += float(a.A.size + a.B.size + 2 * x_i.shape[0] * k)
    launches = 1 if fused else 1 + 2 * len(segments)
    return out, OpCost(flops=flops, bytes_moved=moved * itemsize, kernel_launches=launches)


def materialized_forward(batch: TokenBatch, base_weight: np.ndarray, adapters) -> np.ndarray:
    """Dense reference: build ``W + A_i @ B_i`` per adapter and multiply."""
    table = _adapter_table(adapters)
    _, k, segments = _check(batch, base_weight, table)
    out = np.zeros((batch.rows.shape[0], k), dtype=np.result_type(batch.rows, base_weight))
    covered = np.zeros(batch.rows.shape[0], dtype=bool)
    for job_id, idx in segments.items():
        a = table[job_id]
        w_i = base_weight + a.A @ a.B
        out[idx] = batch.rows[idx] @ w_i
        covered[idx] = True
    assert covered.all()
    return out


# Short alias used by the test-suite naming.
materialized_oracle = materialized_forward


def trainable_param_count(job: JobSpec) -> int:
    """Adapter parameters: ``r * (d + k)`` per adapted layer, one per layer."""
    m = job.model
    return job.rank * (m.hidden_dim + m.proj_dim) * m.num_layers


def adapter_flops_per_token(rank: int, d: int, k: int) -> float:
    return segment_cost(1, d, k, rank)


def random_instance(
    rng: np.random.Generator,
    d: int,
    k: int,
    ranks: Sequence[int],
    n_tokens: int,
) -> tuple[TokenBatch, np.ndarray, list[AdapterMatrices]]:
    """Random batch whose tokens are spread over ``len(ranks)`` adapters."""
    adapters = [
        AdapterMatrices(f"a{i}", rng.standard_normal((d, r)), rng.standard_normal((r, k)))
        for i, r in enumerate(ranks)
    ]
    owners = tuple(f"a{int(i)}" for i in rng.integers(0, len(ranks), size=n_tokens))
    batch = TokenBatch(rng.standard_normal((n_tokens, d)), owners)
    return batch, rng.standard_normal((d, k)), adapters
