import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from lora_fleet.workload import LLAMA3_8B, QWEN3_8B, JobSpec, ModelSpec  # noqa: E402


def make_job(job_id="j0", model=LLAMA3_8B, rank=8, batch_size=4, seq_len=512, step_budget=100,
             gpu_demand=1, submit_time=0.0, **kw) -> JobSpec:
    return JobSpec(job_id, model, rank, batch_size, seq_len, step_budget, gpu_demand, submit_time, **kw)


@pytest.fixture
def job_factory():
    return make_job


@pytest.fixture
def tiny_model():
    return ModelSpec("tiny", num_layers=4, hidden_dim=8, proj_dim=8, per_layer_flops_per_token=2 * 64, base_memory_bytes=1e6)


@pytest.fixture
def models():
    return LLAMA3_8B, QWEN3_8B
