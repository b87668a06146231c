"""Hardware description and cost-model constants."""

from __future__ import annotations

from dataclasses import dataclass, fields


@dataclass(frozen=True)
class HardwareSpec:
    gpu_flops: float = 150e12         # sustained FLOP/s per GPU
    gpu_memory: float = 80e9          # bytes
    intra_node_bw: float = 100e9      # bytes/s between stages on one node
    inter_node_bw: float = 1.0e9      # bytes/s across nodes
    gpus_per_node: int = 8
    kernel_launch_overhead: float = 8e-6  # seconds

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"HardwareSpec.{f.name} must be positive")
        if self.intra_node_bw < self.inter_node_bw:
            raise ValueError("intra_node_bw must be >= inter_node_bw")


@dataclass(frozen=True)
class CostParams:
    """Calibration constants of the analytic model.

    ``saturation_tokens`` is the per-pass fixed cost of a layer expressed in
    token-equivalents (weight streaming, tile setup): a nano-batch of
    ``t`` tokens runs at ``t / (t + saturation_tokens)`` of peak.
    """

    saturation_tokens: float = 1024.0
    backward_multiplier: float = 2.0
    bytes_per_value: int = 2
    activation_factor: float = 16.0   # activation bytes per token per layer, in units of d * bytes_per_value
    optimizer_multiplier: float = 3.0
    base_kernels_per_layer: int = 8
    fused_kernel: bool = True

    @property
    def passes(self) -> float:
        return 1.0 + self.backward_multiplier


@dataclass(frozen=True)
class ClusterSpec:
    """GPU pool shared by all jobs.

    ``concurrency_cap`` bounds the number of runnable jobs and defaults to
    ``total_gpus``. ``rank_nodes`` is the node count of one rank, the unit of
    the middle grouping tier.
    """

    total_gpus: int = 128
    hw: HardwareSpec = HardwareSpec()
    concurrency_cap: int = 0
    rank_nodes: int = 4

    def __post_init__(self):
        if self.total_gpus < 1:
            raise ValueError("total_gpus must be >= 1")
        if self.concurrency_cap == 0:
            object.__setattr__(self, "concurrency_cap", self.total_gpus)
        if self.concurrency_cap < 1:
            raise ValueError("concurrency_cap must be >= 1")
        if self.rank_nodes < 1:
            raise ValueError("rank_nodes must be >= 1")

    @property
    def num_nodes(self) -> int:
        return -(-self.total_gpus // self.hw.gpus_per_node)
