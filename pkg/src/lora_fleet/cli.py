"""Command-line front end.

    lora-fleet gen-trace --jobs 200 --seed 1 --out runs/trace
    lora-fleet replay --trace runs/trace/trace.csv --policy tlora --out runs/tlora
    lora-fleet sweep --arrival-scale 0.5 1 2 5 --cluster-size 32 64 --out runs/sweep
    lora-fleet report runs/tlora --format csv

Global flags (``--config``, ``--seed``, ``--out``) go before the subcommand.
``LORA_FLEET_LOG`` sets the log level (default WARNING).
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .config import ConfigError, RunConfig, dump_config, load_config
from .scheduler import POLICIES
from .sim_engine import SimResult, run
from .workload import DEFAULT_CATALOG, Trace, TraceError, parse_trace, scale_arrivals, synth_trace, write_trace

log = logging.getLogger("lora_fleet")

SUMMARY_FIELDS = [
    "cell",
    "policy",
    "arrival_scale",
    "cluster_size",
    "nano",
    "aggregate_throughput",
    "median_jct",
    "mean_jct",
    "gpu_utilization",
    "makespan",
    "completed",
]
REPORT_FIELDS = ["policy", "aggregate_throughput", "median_jct", "mean_jct", "gpu_utilization", "makespan", "completed"]


class CliError(Exception):
    pass


def _setup_logging() -> None:
    level = os.environ.get("LORA_FLEET_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _effective_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    return cfg


def _load_or_synth(cfg: RunConfig, trace_path: Optional[str]) -> Trace:
    path = trace_path or cfg.trace
    if path is not None:
        if not Path(path).is_file():
            raise CliError(f"trace file not found: {path}")
        return parse_trace(path, DEFAULT_CATALOG, max_gpus=cfg.cluster.total_gpus)
    w = cfg.workload
    return synth_trace(w.n_jobs, cfg.seed, w.arrival_rate, DEFAULT_CATALOG, w.synth_params())


def _write_run(out: Path, result: SimResult, cfg: RunConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "events.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        result.write_log(fh)
    rep = result.report
    (out / "metrics.json").write_text(json.dumps(rep.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    with open(out / "jct.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["job_id", "jct_s", "queueing_s"])
        for jid, v in rep.jct.items():
            w.writerow([jid, repr(v), repr(rep.queueing[jid])])
    with open(out / "timeline.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_s", "samples_per_s"])
        for t, v in rep.throughput_timeline:
            w.writerow([repr(t), repr(v)])
    (out / "config.yaml").write_text(dump_config(cfg), encoding="utf-8")


# -- subcommands -------------------------------------------------------------------


def cmd_gen_trace(args, cfg: RunConfig) -> int:
    w = cfg.workload
    rate = args.arrival_rate if args.arrival_rate is not None else w.arrival_rate
    trace = synth_trace(args.jobs, cfg.seed, rate, DEFAULT_CATALOG, w.synth_params())
    if args.arrival_scale != 1.0:
        trace = scale_arrivals(trace, args.arrival_scale)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / args.name
    write_trace(trace, path)
    print(path)
    return 0


def cmd_replay(args, cfg: RunConfig) -> int:
    if args.policy is not None:
        cfg = replace(cfg, policy=args.policy)
    trace = _load_or_synth(cfg, args.trace)
    result = run(trace, cfg.cluster_spec(), cfg.policy, cfg.sim_config())
    out = Path(cfg.out)
    _write_run(out, result, cfg)
    print(json.dumps(result.report.summary(), sort_keys=True))
    return 0


def _nano_label(n) -> str:
    return "adaptive" if str(n) == "adaptive" else f"fixed{int(n)}"


def _sweep_cells(cfg: RunConfig, args) -> list[dict]:
    s = cfg.sweep
    scales = args.arrival_scale or list(s.arrival_scale) or [None]
    sizes = args.cluster_size or list(s.cluster_size) or [None]
    nanos = args.nano or list(s.nano) or [None]
    policies = args.policies or list(s.policies) or [cfg.policy]
    cells = []
    for policy, scale, size, nano in itertools.product(policies, scales, sizes, nanos):
        parts = [policy]
        if scale is not None:
            parts.append(f"scale{float(scale):g}")
        if size is not None:
            parts.append(f"gpus{int(size)}")
        if nano is not None:
            parts.append(_nano_label(nano))
        cells.append({"cell": "_".join(parts), "policy": policy, "arrival_scale": scale, "cluster_size": size, "nano": nano})
    return cells


def _run_cell(cell: dict, trace: Trace, cfg: RunConfig, root: Path) -> dict:
    if cell["policy"] not in POLICIES:
        raise CliError(f"unknown policy {cell['policy']!r}")
    t = trace if cell["arrival_scale"] is None else scale_arrivals(trace, float(cell["arrival_scale"]))
    cluster = cfg.cluster_spec(None if cell["cluster_size"] is None else int(cell["cluster_size"]))
    overrides = {}
    nano = cell["nano"]
    if nano is not None:
        if str(nano) == "adaptive":
            overrides["nano_mode"] = "adaptive"
        else:
            overrides.update(nano_mode="fixed", fixed_n=int(nano))
    result = run(t, cluster, cell["policy"], cfg.sim_config(**overrides))
    _write_run(root / cell["cell"], result, replace(cfg, policy=cell["policy"]))
    row = dict(cell)
    row.update({k: v for k, v in result.report.summary().items() if k != "policy"})
    return row


def cmd_sweep(args, cfg: RunConfig) -> int:
    trace = _load_or_synth(cfg, args.trace)
    root = Path(cfg.out)
    root.mkdir(parents=True, exist_ok=True)
    cells = _sweep_cells(cfg, args)
    workers = args.workers or cfg.sweep.workers
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(lambda c: _run_cell(c, trace, cfg, root), cells))
    else:
        rows = [_run_cell(c, trace, cfg, root) for c in cells]
    with open(root / "summary.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in SUMMARY_FIELDS})
    print(f"{len(rows)} runs written to {root}")
    return 0


def _report_rows(run_dir: Path) -> list[dict]:
    metrics = run_dir / "metrics.json"
    summary = run_dir / "summary.csv"
    if metrics.is_file():
        data = json.loads(metrics.read_text(encoding="utf-8"))
        return [{k: data[k] for k in REPORT_FIELDS}]
    if summary.is_file():
        rows = []
        for cell in sorted(p for p in run_dir.iterdir() if (p / "metrics.json").is_file()):
            data = json.loads((cell / "metrics.json").read_text(encoding="utf-8"))
            rows.append({"cell": cell.name, **{k: data[k] for k in REPORT_FIELDS}})
        return rows
    raise CliError(f"no metrics.json or summary.csv in {run_dir}")


def render_report(rows: list[dict], fmt: str) -> str:
    if fmt == "json":
        return json.dumps(rows, sort_keys=True, indent=2) + "\n"
    fieldnames = list(rows[0]) if rows else REPORT_FIELDS
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
        return buf.getvalue()
    cells = [[str(k) for k in fieldnames]]
    for r in rows:
        cells.append([f"{r[k]:.4g}" if isinstance(r[k], float) else str(r[k]) for k in fieldnames])
    widths = [max(len(row[i]) for row in cells) for i in range(len(fieldnames))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells) + "\n"


def cmd_report(args, cfg: RunConfig) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise CliError(f"run directory not found: {run_dir}")
    sys.stdout.write(render_report(_report_rows(run_dir), args.format))
    return 0


# -- parser ------------------------------------------------------------------------


def _positive_float(text: str) -> float:
    v = float(text)
    if v <= 0:
        raise argparse.ArgumentTypeError("must be > 0")
    return v


def _nano_value(text: str):
    if text == "adaptive":
        return text
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("expected 'adaptive' or an integer") from None
    if n < 1:
        raise argparse.ArgumentTypeError("fixed N must be >= 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lora-fleet", description="Multi-LoRA fine-tuning cluster simulator")
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="output directory (default from config)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-trace", help="write a synthetic trace CSV")
    g.add_argument("--jobs", type=int, required=True)
    g.add_argument("--arrival-rate", type=_positive_float, help="jobs per second")
    g.add_argument("--arrival-scale", type=_positive_float, default=1.0, help="divide arrival times by this factor")
    g.add_argument("--name", default="trace.csv", help="file name inside --out")
    g.set_defaults(func=cmd_gen_trace)

    r = sub.add_parser("replay", help="simulate one trace under one policy")
    r.add_argument("--trace", help="trace CSV (default: config trace, else synthetic)")
    r.add_argument("--policy", choices=POLICIES)
    r.set_defaults(func=cmd_replay)

    s = sub.add_parser("sweep", help="run the cross product of the given axes")
    s.add_argument("--trace")
    s.add_argument("--arrival-scale", type=_positive_float, nargs="+")
    s.add_argument("--cluster-size", type=int, nargs="+")
    s.add_argument("--nano", type=_nano_value, nargs="+", help="'adaptive' and/or fixed N values")
    s.add_argument("--policies", choices=POLICIES, nargs="+")
    s.add_argument("--workers", type=int, help="concurrent simulations")
    s.set_defaults(func=cmd_sweep)

    rep = sub.add_parser("report", help="summarise a finished run or sweep directory")
    rep.add_argument("run_dir")
    rep.add_argument("--format", choices=("table", "csv", "json"), default="table")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _effective_config(args)
        return args.func(args, cfg)
    except (CliError, ConfigError, TraceError, FileNotFoundError, KeyError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"lora-fleet: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
