"""Command-line front end.

Subcommands: simulate, model, sweep, synthesize. Configuration comes
from defaults, then an optional flat key=value config file (--config,
or the MFOESIM_CONFIG environment variable), then command-line flags;
later layers win. Config keys are the flag names without the leading
dashes. Every model parameter is overridable through --params-<field>.

Reports are written to --out-dir and validated after writing; the exit
code is 0 only when the outputs parsed back cleanly.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path
from typing import Optional

from . import sim, trace
from .params import ModelParameters

CONFIG_ENV_VAR = "MFOESIM_CONFIG"

SIM_REPORT_KEYS = (
    "schema",
    "hit_rate",
    "mfoe_hits",
    "mfoe_misses",
    "critical_path_speedup",
    "per_core",
)
MODEL_REPORT_KEYS = ("schema", "hit_rate", "speedup", "modeled_runtime_ns")


class CliError(Exception):
    pass


def _param_flag(name: str) -> str:
    return "--params-" + name.replace("_", "-")


def _add_param_overrides(parser: argparse.ArgumentParser) -> None:
    for f in dataclasses.fields(ModelParameters):
        if f.type == "str" or isinstance(f.default, str):
            ftype = str
        elif isinstance(f.default, int) and not isinstance(f.default, bool):
            ftype = int
        else:
            ftype = float
        parser.add_argument(
            _param_flag(f.name),
            dest="params_" + f.name,
            type=ftype,
            default=None,
            help=f"override model parameter {f.name} (default {f.default})",
        )


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="flat key=value config file")
    parser.add_argument("--seed", type=int, default=0, help="seed for all randomness")
    parser.add_argument("--out-dir", default=".", help="directory for report files")
    _add_param_overrides(parser)


def _csv_ints(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part.strip()]


def _csv_floats(text: str) -> list[float]:
    return [float(part) for part in text.split(",") if part.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mfoesim",
        description="Simulator and trace replay model for hardware-offloaded minor faults",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="run the event-driven simulator")
    _add_common(p_sim)
    p_sim.add_argument("--threads", type=int, default=1)
    p_sim.add_argument("--faults-per-thread", type=int, default=32768)
    p_sim.add_argument("--interarrival", type=int, default=21000,
                       help="compute cycles between touches on one thread")
    p_sim.add_argument("--region-pages", type=int, default=None)
    p_sim.add_argument("--stride", type=int, default=1)
    p_sim.add_argument("--redundant-accesses", type=int, default=0)
    p_sim.add_argument("--cores", type=int, default=None)
    p_sim.add_argument("--tlb-entries", type=int, default=64)
    p_sim.add_argument("--table-width", type=int, default=256,
                       help="pre-allocation table slots per core, header included")
    p_sim.add_argument("--refresh-interval-ms", type=float, default=2.0)
    p_sim.add_argument("--total-frames", type=int, default=1 << 20)
    p_sim.add_argument("--numa-nodes", type=int, default=1)
    p_sim.add_argument("--quota-frames", type=int, default=None)
    p_sim.add_argument("--resource-threshold", type=float, default=0.8)

    p_model = sub.add_parser("model", help="replay a fault trace against a configuration")
    _add_common(p_model)
    # not argparse-required so a config file can supply it
    p_model.add_argument("--trace", default=None, help="trace CSV path")
    p_model.add_argument("--width", type=int, default=256,
                         help="pre-allocated frames per core")
    p_model.add_argument("--refresh-interval-ms", type=float, default=2.0)
    p_model.add_argument("--cores", type=int, default=None)

    p_sweep = sub.add_parser("sweep", help="replay a trace across a geometry grid")
    _add_common(p_sweep)
    p_sweep.add_argument("--trace", default=None)
    p_sweep.add_argument("--widths", type=_csv_ints, default=list(trace.DEFAULT_WIDTHS))
    p_sweep.add_argument(
        "--intervals-ms", type=_csv_floats, default=list(trace.DEFAULT_INTERVALS_MS)
    )
    p_sweep.add_argument("--cores", type=int, default=None)

    p_synth = sub.add_parser("synthesize", help="generate a synthetic fault trace")
    _add_common(p_synth)
    p_synth.add_argument("--rate", type=float, default=None, help="faults per second per core")
    p_synth.add_argument("--duration", type=float, default=1.0, help="seconds")
    p_synth.add_argument("--dist", choices=("uniform", "poisson"), default="uniform")
    p_synth.add_argument("--cores", type=int, default=1)
    p_synth.add_argument("--latency-mean-ns", type=int, default=None)
    p_synth.add_argument("--latency-p95-ns", type=int, default=None)
    p_synth.add_argument("--profile", default=None,
                         help="named workload profile (overrides rate/latency)")
    p_synth.add_argument("--trace-out", default="trace.csv",
                         help="output file name under --out-dir")
    # argparse subparsers parse into a fresh namespace and copy the result
    # over the parent's, so config defaults must land on the subparsers too
    parser.subcommand_parsers = {
        "simulate": p_sim,
        "model": p_model,
        "sweep": p_sweep,
        "synthesize": p_synth,
    }
    return parser


def _known_dests(parser: argparse.ArgumentParser) -> dict[str, object]:
    dests: dict[str, object] = {}
    for action in parser._actions:
        if action.dest not in ("help", "command"):
            dests[action.dest] = action.type or str
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sp in action.choices.values():
                for a in sp._actions:
                    if a.dest != "help":
                        dests.setdefault(a.dest, a.type or str)
    return dests


def load_config_file(path: str, parser: argparse.ArgumentParser) -> dict[str, object]:
    """Parse key=value lines; keys mirror flag names one-to-one."""
    dests = _known_dests(parser)
    values: dict[str, object] = {}
    text = Path(path).read_text(encoding="utf-8")
    for line_no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{line_no}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        dest = key.strip().replace("-", "_")
        value = value.strip()
        if dest not in dests:
            raise CliError(f"{path}:{line_no}: unknown config key {key.strip()!r}")
        conv = dests[dest]
        try:
            values[dest] = conv(value)
        except (TypeError, ValueError) as exc:
            raise CliError(f"{path}:{line_no}: bad value for {key.strip()!r}: {exc}") from None
    return values


def _build_params(args: argparse.Namespace) -> ModelParameters:
    overrides = {}
    for f in dataclasses.fields(ModelParameters):
        val = getattr(args, "params_" + f.name, None)
        if val is not None:
            overrides[f.name] = val
    params = ModelParameters(**overrides) if overrides else ModelParameters()
    params.validate()
    return params


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _write_rows(path: Path, rows) -> None:
    _write(path, "\n".join(rows) + "\n")


def _validate_json(path: Path, required_keys) -> None:
    data = json.loads(path.read_text(encoding="utf-8"))
    missing = [k for k in required_keys if k not in data]
    if missing:
        raise CliError(f"{path}: report missing keys {missing}")


def _validate_csv(path: Path, header: str, expect_rows: Optional[int] = None) -> None:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().rstrip("\n")
        if first != header:
            raise CliError(f"{path}: expected header {header!r}")
        if expect_rows is not None:
            count = sum(1 for _ in fh)
            if count != expect_rows:
                raise CliError(f"{path}: expected {expect_rows} rows, found {count}")


def cmd_simulate(args: argparse.Namespace) -> int:
    params = _build_params(args)
    workload = sim.WorkloadSpec(
        threads=args.threads,
        faults_per_thread=args.faults_per_thread,
        interarrival_cycles=args.interarrival,
        region_pages_per_thread=args.region_pages,
        stride_pages=args.stride,
        redundant_accesses=args.redundant_accesses,
    )
    config = sim.SimConfig(
        workload=workload,
        params=params,
        cores=args.cores,
        tlb_entries=args.tlb_entries,
        table_width=args.table_width,
        refresh_interval_ms=args.refresh_interval_ms,
        total_frames=args.total_frames,
        numa_nodes=args.numa_nodes,
        seed=args.seed,
        quota_frames=args.quota_frames,
        resource_threshold=args.resource_threshold,
    )
    report = sim.run(config)

    out = Path(args.out_dir)
    json_path = out / "report.json"
    csv_path = out / "faults.csv"
    _write(json_path, report.to_json())
    _write_rows(csv_path, report.csv_rows())
    _validate_json(json_path, SIM_REPORT_KEYS)
    _validate_csv(csv_path, "timestamp_cycles,core,outcome,latency_cycles", len(report.records))

    print(f"threads={workload.threads} faults={report.mfoe_hits + report.mfoe_misses + report.kernel_faults}")
    print(f"hit_rate={report.hit_rate:.4f}")
    print(f"mean_hit_cycles={report.mean_hit_cycles:.2f}")
    print(f"critical_path_speedup={report.critical_path_speedup:.2f}")
    print(f"report={json_path}")
    return 0


def _require_trace(args: argparse.Namespace) -> str:
    if not args.trace:
        raise CliError("--trace is required (flag or config key)")
    return args.trace


def cmd_model(args: argparse.Namespace) -> int:
    params = _build_params(args)
    fault_trace = trace.ingest(_require_trace(args))
    config = trace.TraceModelConfig(
        width=args.width, refresh_interval_ms=args.refresh_interval_ms, cores=args.cores
    )
    report = trace.apply_model(fault_trace, config, params)

    out = Path(args.out_dir)
    json_path = out / "model_report.json"
    csv_path = out / "timeline.csv"
    _write(json_path, report.to_json())
    _write_rows(csv_path, report.timeline.csv_rows())
    _validate_json(json_path, MODEL_REPORT_KEYS)
    _validate_csv(csv_path, trace.TIMELINE_HEADER, len(report.timeline))

    print(f"faults={report.hits + report.misses}")
    print(f"hit_rate={report.hit_rate:.4f}")
    print(f"residual_overhead_pct={100.0 * report.residual_overhead_fraction:.2f}")
    print(f"speedup={report.speedup:.4f}")
    print(f"report={json_path}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    params = _build_params(args)
    fault_trace = trace.ingest(_require_trace(args))
    grid = trace.sweep(fault_trace, args.widths, args.intervals_ms, params, args.cores)

    out = Path(args.out_dir)
    json_path = out / "sweep.json"
    csv_path = out / "sweep.csv"
    _write(json_path, json.dumps(grid.to_json_dict(), sort_keys=True, indent=2) + "\n")
    _write_rows(csv_path, grid.csv_rows())
    _validate_json(json_path, ("schema", "cells"))
    _validate_csv(csv_path, "width,interval_ms,hit_rate,overhead_pct,speedup", len(grid.cells))

    print(f"cells={len(grid.cells)}")
    print(f"csv={csv_path}")
    return 0


def cmd_synthesize(args: argparse.Namespace) -> int:
    if args.profile is not None:
        fault_trace = trace.synthesize_profile(
            args.profile,
            duration_s=args.duration,
            dist=args.dist,
            cores=args.cores,
            seed=args.seed,
        )
    else:
        if args.rate is None:
            raise CliError("either --rate or --profile is required")
        fault_trace = trace.synthesize(
            args.rate,
            args.duration,
            dist=args.dist,
            cores=args.cores,
            latency_mean_ns=args.latency_mean_ns,
            latency_p95_ns=args.latency_p95_ns,
            seed=args.seed,
        )

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trace_path = out / args.trace_out
    trace.write_trace(fault_trace, str(trace_path))
    _validate_csv(trace_path, trace.TRACE_HEADER, len(fault_trace))

    print(f"events={len(fault_trace)}")
    print(f"trace={trace_path}")
    return 0


_COMMANDS = {
    "simulate": cmd_simulate,
    "model": cmd_model,
    "sweep": cmd_sweep,
    "synthesize": cmd_synthesize,
}


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    config_path = args.config or os.environ.get(CONFIG_ENV_VAR)
    try:
        if config_path:
            overrides = load_config_file(config_path, parser)
            parser.set_defaults(**overrides)
            for sp in parser.subcommand_parsers.values():
                sp.set_defaults(**overrides)
            args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except (CliError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
