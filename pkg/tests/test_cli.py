import csv
import json

import pytest

from lora_fleet.cli import main
from lora_fleet.config import ConfigError, RunConfig, config_from_dict, dump_config, load_config
from lora_fleet.fixtures import TRIO_CONFIG, TRIO_TRACE
from lora_fleet.workload import parse_trace, scale_arrivals, synth_trace


def _small_config(tmp_path, **extra):
    lines = ["workload: {n_jobs: 6, arrival_rate: 0.5, step_budget_min: 20, step_budget_max: 60}", "cluster: {total_gpus: 16}"]
    lines += [f"{k}: {v}" for k, v in extra.items()]
    p = tmp_path / "run.yaml"
    p.write_text("\n".join(lines) + "\n")
    return str(p)


# -- config ---------------------------------------------------------------------------

def test_defaults():
    cfg = load_config(None)
    assert cfg == RunConfig()
    assert cfg.aimd.alpha == 4 and cfg.aimd.beta == 0.5
    assert cfg.cluster.total_gpus == 128 and cfg.sim.horizon == 300.0


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="typo"):
        config_from_dict({"typo": 1})
    with pytest.raises(ConfigError, match="horizn"):
        config_from_dict({"sim": {"horizn": 10}})


def test_yaml_scientific_strings_coerced(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("hardware: {gpu_flops: 1e12}\ncluster: {total_gpus: '64'}\n")
    cfg = load_config(p)
    assert cfg.hardware.gpu_flops == 1e12
    assert cfg.cluster.total_gpus == 64 and isinstance(cfg.cluster.total_gpus, int)
    p.write_text("hardware: {gpu_flops: fast}\n")
    with pytest.raises(ConfigError, match="gpu_flops"):
        load_config(p)


def test_bad_policy_and_ranges():
    with pytest.raises(ConfigError, match="tlora"):
        config_from_dict({"policy": "fifo"})
    with pytest.raises(ConfigError):
        config_from_dict({"sim": {"horizon": -1}})
    with pytest.raises(ConfigError):
        config_from_dict({"cluster": {"total_gpus": 0}})
    with pytest.raises(ConfigError):
        config_from_dict({"sim": "fast"})


def test_dump_round_trip(tmp_path):
    cfg = load_config(TRIO_CONFIG)
    p = tmp_path / "again.yaml"
    p.write_text(dump_config(cfg))
    assert load_config(p) == cfg


def test_relative_trace_resolved_against_config():
    assert load_config(TRIO_CONFIG).trace == str(TRIO_TRACE)


# -- gen-trace -------------------------------------------------------------------------

def test_gen_trace_is_deterministic(tmp_path, capsys):
    for d in ("a", "b"):
        assert main(["--seed", "1", "--out", str(tmp_path / d), "gen-trace", "--jobs", "20"]) == 0
    a, b = (tmp_path / d / "trace.csv" for d in ("a", "b"))
    assert a.read_bytes() == b.read_bytes()
    assert str(a) in capsys.readouterr().out


def test_gen_trace_arrival_scale(tmp_path):
    main(["--seed", "3", "--out", str(tmp_path), "gen-trace", "--jobs", "15", "--arrival-rate", "0.2"])
    main(["--seed", "3", "--out", str(tmp_path), "gen-trace", "--jobs", "15", "--arrival-rate", "0.2", "--arrival-scale", "2", "--name", "fast.csv"])
    base = parse_trace(tmp_path / "trace.csv")
    fast = parse_trace(tmp_path / "fast.csv")
    want = scale_arrivals(base, 2.0)
    assert [j.submit_time for j in fast.jobs] == pytest.approx([j.submit_time for j in want.jobs], rel=1e-12)
    assert [j.submit_time for j in fast.jobs] == pytest.approx([j.submit_time / 2 for j in base.jobs], rel=1e-12)


def test_gen_trace_matches_library(tmp_path):
    main(["--seed", "5", "--out", str(tmp_path), "gen-trace", "--jobs", "10", "--arrival-rate", "1"])
    assert parse_trace(tmp_path / "trace.csv").jobs == synth_trace(10, 5, 1.0).jobs


def test_gen_trace_missing_jobs_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["--out", str(tmp_path), "gen-trace"])
    assert exc.value.code == 2


# -- replay ----------------------------------------------------------------------------

def test_replay_fixture_all_policies(tmp_path, capsys):
    agg = {}
    for policy in ("tlora", "mlora_fifo", "isolated"):
        out = tmp_path / policy
        assert main(["--config", str(TRIO_CONFIG), "--out", str(out), "replay", "--policy", policy]) == 0
        summary = json.loads(capsys.readouterr().out)
        for name in ("events.jsonl", "metrics.json", "jct.csv", "timeline.csv", "config.yaml"):
            assert (out / name).is_file()
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["policy"] == policy == summary["policy"]
        assert load_config(out / "config.yaml").policy == policy
        agg[policy] = metrics["aggregate_throughput"]
    assert agg["tlora"] >= agg["isolated"]


def test_replay_missing_trace(tmp_path, capsys):
    assert main(["--out", str(tmp_path), "replay", "--trace", str(tmp_path / "nope.csv")]) == 1
    err = capsys.readouterr().err.strip()
    assert err.startswith("lora-fleet: error:") and "nope.csv" in err and "\n" not in err


def test_replay_bogus_policy_lists_choices(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--out", str(tmp_path), "replay", "--policy", "bogus"])
    assert exc.value.code == 2
    err = capsys.readouterr().err
    assert all(p in err for p in ("tlora", "mlora_fifo", "isolated"))


def test_missing_config_file(tmp_path, capsys):
    assert main(["--config", str(tmp_path / "none.yaml"), "replay"]) == 1
    assert "none.yaml" in capsys.readouterr().err


def test_unknown_config_key_exits_nonzero(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("clusterr: {total_gpus: 8}\n")
    assert main(["--config", str(p), "--out", str(tmp_path), "replay"]) == 1
    assert "clusterr" in capsys.readouterr().err


def test_replay_is_byte_identical(tmp_path):
    cfg = _small_config(tmp_path)
    for d in ("a", "b"):
        assert main(["--config", cfg, "--seed", "2", "--out", str(tmp_path / d), "replay"]) == 0
    assert (tmp_path / "a" / "events.jsonl").read_bytes() == (tmp_path / "b" / "events.jsonl").read_bytes()


def test_replay_writes_only_under_out(tmp_path):
    cfg = _small_config(tmp_path)
    before = set(tmp_path.iterdir())
    main(["--config", cfg, "--out", str(tmp_path / "o"), "replay"])
    assert set(tmp_path.iterdir()) - before == {tmp_path / "o"}


# -- sweep -----------------------------------------------------------------------------

def _read_summary(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_sweep_4x4_cross_product(tmp_path):
    cfg = _small_config(tmp_path)
    out = tmp_path / "sweep"
    args = ["--config", cfg, "--out", str(out), "sweep", "--arrival-scale", "0.5", "1", "2", "5", "--cluster-size", "8", "16", "24", "32"]
    assert main(args) == 0
    rows = _read_summary(out / "summary.csv")
    assert len(rows) == 16 and len({r["cell"] for r in rows}) == 16
    assert all((out / r["cell"] / "metrics.json").is_file() for r in rows)


def test_sweep_empty_axes_single_run(tmp_path):
    cfg = _small_config(tmp_path)
    assert main(["--config", cfg, "--out", str(tmp_path / "s"), "sweep"]) == 0
    rows = _read_summary(tmp_path / "s" / "summary.csv")
    assert [r["cell"] for r in rows] == ["tlora"]


def test_sweep_nano_axis(tmp_path):
    cfg = _small_config(tmp_path)
    assert main(["--config", cfg, "--out", str(tmp_path / "s"), "sweep", "--nano", "adaptive", "1", "4"]) == 0
    rows = _read_summary(tmp_path / "s" / "summary.csv")
    assert [r["cell"] for r in rows] == ["tlora_adaptive", "tlora_fixed1", "tlora_fixed4"]


def test_sweep_bad_nano_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["--out", str(tmp_path), "sweep", "--nano", "0"])
    assert exc.value.code == 2


def test_sweep_workers_do_not_change_bytes(tmp_path):
    cfg = _small_config(tmp_path)
    axes = ["--policies", "tlora", "mlora_fifo", "isolated", "--arrival-scale", "1", "2"]
    for w in ("1", "3"):
        assert main(["--config", cfg, "--out", str(tmp_path / f"w{w}"), "sweep", "--workers", w, *axes]) == 0
    one, three = tmp_path / "w1", tmp_path / "w3"
    assert (one / "summary.csv").read_bytes() == (three / "summary.csv").read_bytes()
    for cell in sorted(p.name for p in one.iterdir() if p.is_dir()):
        assert (one / cell / "events.jsonl").read_bytes() == (three / cell / "events.jsonl").read_bytes()


# -- report ----------------------------------------------------------------------------

def test_report_formats_agree(tmp_path, capsys):
    cfg = _small_config(tmp_path)
    run_dir = tmp_path / "r"
    main(["--config", cfg, "--out", str(run_dir), "replay"])
    capsys.readouterr()
    outputs = {}
    for fmt in ("table", "csv", "json"):
        assert main(["report", str(run_dir), "--format", fmt]) == 0
        outputs[fmt] = capsys.readouterr().out
    as_json = json.loads(outputs["json"])[0]
    as_csv = next(csv.DictReader(outputs["csv"].splitlines()))
    for k, v in as_json.items():
        if isinstance(v, float):
            assert float(as_csv[k]) == v
        else:
            assert as_csv[k] == str(v)
    header = outputs["table"].splitlines()[0].split()
    assert {"aggregate_throughput", "median_jct", "gpu_utilization"} <= set(header)


def test_report_over_sweep(tmp_path, capsys):
    cfg = _small_config(tmp_path)
    main(["--config", cfg, "--out", str(tmp_path / "s"), "sweep", "--policies", "tlora", "isolated"])
    capsys.readouterr()
    assert main(["report", str(tmp_path / "s"), "--format", "json"]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert [r["cell"] for r in rows] == ["isolated", "tlora"]


def test_report_missing_dir(tmp_path, capsys):
    assert main(["report", str(tmp_path / "gone")]) == 1
    assert "gone" in capsys.readouterr().err
    (tmp_path / "empty").mkdir()
    assert main(["report", str(tmp_path / "empty")]) == 1
