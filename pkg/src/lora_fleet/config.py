"""Run configuration: a YAML file of nested sections, every key optional.

Example::

    policy: tlora
    seed: 1
    cluster: {total_gpus: 128, rank_nodes: 4}
    hardware: {gpu_flops: 1.5e14, inter_node_bw: 1.0e9}
    sim: {horizon: 300, nano_mode: adaptive}
    aimd: {alpha: 4, beta: 0.5, tau_rel: 0.02}
    workload: {n_jobs: 200, arrival_rate: 1.0}
    sweep: {arrival_scale: [0.5, 1, 2, 5], cluster_size: [32, 64, 128, 256]}

Unknown keys are rejected so typos do not silently fall back to defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Optional

import yaml

from .hardware import ClusterSpec, CostParams, HardwareSpec
from .scheduler import POLICIES
from .sim_engine import SimConfig
from .workload import SynthParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ClusterSection:
    total_gpus: int = 128
    concurrency_cap: int = 0  # 0 means equal to total_gpus
    rank_nodes: int = 4


@dataclass(frozen=True)
class SimSection:
    horizon: float = 300.0
    regroup_penalty: float = 5.0
    nano_mode: str = "adaptive"
    fixed_n: int = 1
    max_time: Optional[float] = None
    admit_on_arrival: bool = False
    admit_on_completion: bool = True
    log_iterations: bool = True


@dataclass(frozen=True)
class AimdSection:
    alpha: int = 4
    beta: float = 0.5
    tau: Optional[float] = None
    tau_rel: float = 0.02
    initial_n: int = 1


@dataclass(frozen=True)
class WorkloadSection:
    n_jobs: int = 200
    arrival_rate: float = 1.0
    step_budget_min: int = 200
    step_budget_max: int = 2000
    seq_len: int = 512
    max_slowdown: float = 1.25
    gpu_choices: tuple = (1, 2, 4, 8)
    gpu_weights: tuple = (0.4, 0.3, 0.2, 0.1)

    def synth_params(self) -> SynthParams:
        return SynthParams(
            gpu_choices=tuple(self.gpu_choices),
            gpu_weights=tuple(self.gpu_weights),
            step_budget_min=self.step_budget_min,
            step_budget_max=self.step_budget_max,
            seq_len=self.seq_len,
            max_slowdown=self.max_slowdown,
        )


@dataclass(frozen=True)
class SweepSection:
    arrival_scale: tuple = ()
    cluster_size: tuple = ()
    nano: tuple = ()  # entries: "adaptive" or an integer fixed N
    policies: tuple = ()
    workers: int = 1


@dataclass(frozen=True)
class RunConfig:
    policy: str = "tlora"
    seed: int = 0
    out: str = "runs"
    trace: Optional[str] = None
    cluster: ClusterSection = ClusterSection()
    hardware: HardwareSpec = HardwareSpec()
    cost: CostParams = CostParams()
    sim: SimSection = SimSection()
    aimd: AimdSection = AimdSection()
    workload: WorkloadSection = WorkloadSection()
    sweep: SweepSection = SweepSection()

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ConfigError(f"policy must be one of {', '.join(POLICIES)}, got {self.policy!r}")
        # build the owning types once so out-of-range values fail at load time
        try:
            self.cluster_spec()
            self.sim_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def cluster_spec(self, total_gpus: Optional[int] = None) -> ClusterSpec:
        gpus = total_gpus if total_gpus is not None else self.cluster.total_gpus
        return ClusterSpec(
            total_gpus=gpus,
            hw=self.hardware,
            concurrency_cap=self.cluster.concurrency_cap,
            rank_nodes=self.cluster.rank_nodes,
        )

    def sim_config(self, **overrides) -> SimConfig:
        s, a = self.sim, self.aimd
        cfg = SimConfig(
            horizon=s.horizon,
            regroup_penalty=s.regroup_penalty,
            nano_mode=s.nano_mode,
            fixed_n=s.fixed_n,
            initial_n=a.initial_n,
            aimd_alpha=a.alpha,
            aimd_beta=a.beta,
            aimd_tau=a.tau,
            aimd_tau_rel=a.tau_rel,
            cost=self.cost,
            max_time=s.max_time,
            admit_on_arrival=s.admit_on_arrival,
            admit_on_completion=s.admit_on_completion,
            log_iterations=s.log_iterations,
        )
        return replace(cfg, **overrides) if overrides else cfg

    def to_dict(self) -> dict:
        out: dict[str, Any] = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if hasattr(v, "__dataclass_fields__"):
                v = {g.name: _plain(getattr(v, g.name)) for g in fields(v)}
            out[f.name] = v
        return out


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


def _section(cls, data: Any, name: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    kwargs = {}
    for k, v in data.items():
        default = known[k].default
        if isinstance(v, list):
            v = tuple(v)
        elif isinstance(v, str) and isinstance(default, (int, float)) and not isinstance(default, bool):
            # YAML 1.1 reads "1e9" as a string
            try:
                v = type(default)(float(v)) if isinstance(default, int) else float(v)
            except ValueError:
                raise ConfigError(f"{name}.{k}: expected a number, got {v!r}") from None
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {name!r}: {exc}") from exc


_SECTIONS = {
    "cluster": ClusterSection,
    "hardware": HardwareSpec,
    "cost": CostParams,
    "sim": SimSection,
    "aimd": AimdSection,
    "workload": WorkloadSection,
    "sweep": SweepSection,
}


def config_from_dict(data: Optional[dict]) -> RunConfig:
    data = dict(data or {})
    unknown = sorted(set(data) - set(_SECTIONS) - {"policy", "seed", "out", "trace"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs: dict[str, Any] = {name: _section(cls, data.get(name), name) for name, cls in _SECTIONS.items()}
    for key in ("policy", "seed", "out", "trace"):
        if key in data:
            kwargs[key] = data[key]
    try:
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: Optional[str | Path]) -> RunConfig:
    """Read ``path``; None gives the all-defaults config.

    A relative ``trace`` entry is resolved against the config file's folder.
    """
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    data = yaml.safe_load(p.read_text(encoding="utf-8"))
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    cfg = config_from_dict(data)
    if cfg.trace is not None and not Path(cfg.trace).is_absolute():
        cfg = replace(cfg, trace=str((p.parent / cfg.trace).resolve()))
    return cfg


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
