"""Trace replay model for hardware-serviced minor faults.

Replays a recorded fault trace against a chosen table geometry and
answers two questions: which faults would the engine have absorbed, and
what would the timeline have looked like. All arithmetic is integer
nanoseconds so replays are exactly reproducible.

Mechanics:

- Per-core frame pools start empty and fill sequentially, core 0 first,
  one frame landing per page at the enable-time fill throughput.
- Once the fill completes, a periodic pass every refresh interval turns
  frames consumed by hits back into available frames. The pass
  snapshots per-core consumed counts, walks cores round-robin (the
  start core rotates each pass), and schedules one landing per recycled
  frame at the background throughput, capped by the per-pass budget
  interval_ns * pages_per_s // 1e9.
- A fault is a hit when its core's pool is non-empty at its shifted
  time: the pool shrinks by one, the fault costs the hit time, and all
  later faults on that core move earlier by (recorded latency - hit
  time). Otherwise it is a miss: the fault costs its recorded latency
  plus the miss penalty, and later same-core faults move later by the
  penalty.
- Simultaneous events resolve landings first, then the periodic pass,
  then faults; remaining ties resolve by core index, then scheduling
  order.

Runtime accounting brackets the original trace from its first fault to
the completion of its latest-finishing fault. The modeled runtime is
that bracket minus total time saved plus total penalties, and the
speedup is the ratio of the two.
"""
from __future__ import annotations

import heapq
import math
import random
from array import array
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional

from .params import LatencySampler, ModelParameters

OUTCOME_MISS = 0
OUTCOME_HIT = 1
OUTCOME_NAMES = ("miss", "hit")

TRACE_HEADER = "timestamp_ns,core,latency_ns"
TIMELINE_HEADER = "orig_timestamp_ns,adjusted_timestamp_ns,core,outcome,modeled_latency_ns"

DEFAULT_WIDTHS = (128, 256, 512, 1024)
DEFAULT_INTERVALS_MS = (2.0, 4.0, 8.0, 16.0, 32.0)

_PRIO_LANDING = 0
_PRIO_TICK = 1
_PRIO_FAULT = 2


class TraceFormatError(ValueError):
    """Malformed trace file; carries the offending line number."""

    def __init__(self, path: str, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


@dataclass(frozen=True)
class TraceRecord:
    timestamp_ns: int
    core: int
    latency_ns: int


class FaultTrace:
    """Ordered minor-fault records with per-core wall-clock timestamps.

    Stored as parallel integer arrays; traces run to millions of
    records and per-record objects would dominate memory.
    """

    __slots__ = ("timestamps_ns", "core_ids", "latencies_ns", "source")

    def __init__(
        self,
        timestamps_ns: Iterable[int] = (),
        core_ids: Iterable[int] = (),
        latencies_ns: Iterable[int] = (),
        source: str = "",
        validate: bool = True,
    ):
        self.timestamps_ns = array("q", timestamps_ns)
        self.core_ids = array("q", core_ids)
        self.latencies_ns = array("q", latencies_ns)
        self.source = source
        if validate:
            self.validate()

    @classmethod
    def from_records(cls, records: Iterable[tuple[int, int, int]], source: str = "") -> "FaultTrace":
        rows = list(records)
        return cls(
            (r[0] for r in rows),
            (r[1] for r in rows),
            (r[2] for r in rows),
            source=source,
        )

    def validate(self) -> None:
        if not (len(self.timestamps_ns) == len(self.core_ids) == len(self.latencies_ns)):
            raise ValueError("trace arrays have mismatched lengths")
        last_per_core: dict[int, int] = {}
        for i in range(len(self.timestamps_ns)):
            core = self.core_ids[i]
            if core < 0:
                raise ValueError(f"record {i}: negative core id")
            if self.latencies_ns[i] <= 0:
                raise ValueError(f"record {i}: latency must be positive")
            t = self.timestamps_ns[i]
            prev = last_per_core.get(core)
            if prev is not None and t < prev:
                raise ValueError(f"record {i}: timestamp regresses on core {core}")
            last_per_core[core] = t

    def __len__(self) -> int:
        return len(self.timestamps_ns)

    def record(self, i: int) -> TraceRecord:
        return TraceRecord(self.timestamps_ns[i], self.core_ids[i], self.latencies_ns[i])

    def records(self) -> Iterator[TraceRecord]:
        for i in range(len(self)):
            yield self.record(i)

    @property
    def core_count(self) -> int:
        return max(self.core_ids) + 1 if self.core_ids else 0

    @property
    def total_runtime_ns(self) -> int:
        """First fault to the completion of the latest-finishing fault."""
        if not self.timestamps_ns:
            return 0
        end = max(t + l for t, l in zip(self.timestamps_ns, self.latencies_ns))
        return end - min(self.timestamps_ns)

    def overhead_fraction(self) -> float:
        runtime = self.total_runtime_ns
        return sum(self.latencies_ns) / runtime if runtime > 0 else 0.0

    def csv_rows(self) -> Iterator[str]:
        yield TRACE_HEADER
        for i in range(len(self)):
            yield f"{self.timestamps_ns[i]},{self.core_ids[i]},{self.latencies_ns[i]}"


def ingest(path: str) -> FaultTrace:
    """Load a trace CSV; empty or comment-only files yield an empty trace."""
    times = array("q")
    cores = array("q")
    lats = array("q")
    last_per_core: dict[int, int] = {}
    saw_header = False
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if not saw_header:
                if line != TRACE_HEADER:
                    raise TraceFormatError(
                        path, line_no, f"expected header {TRACE_HEADER!r}, got {line!r}"
                    )
                saw_header = True
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise TraceFormatError(path, line_no, f"expected 3 fields, got {len(parts)}")
            try:
                t, core, lat = int(parts[0]), int(parts[1]), int(parts[2])
            except ValueError:
                raise TraceFormatError(path, line_no, f"non-integer field in {line!r}") from None
            if core < 0:
                raise TraceFormatError(path, line_no, "negative core id")
            if lat <= 0:
                raise TraceFormatError(path, line_no, "latency must be positive")
            prev = last_per_core.get(core)
            if prev is not None and t < prev:
                raise TraceFormatError(path, line_no, f"timestamp regresses on core {core}")
            last_per_core[core] = t
            times.append(t)
            cores.append(core)
            lats.append(lat)
    trace = FaultTrace(source=path, validate=False)
    trace.timestamps_ns = times
    trace.core_ids = cores
    trace.latencies_ns = lats
    return trace


def write_trace(trace: FaultTrace, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in trace.csv_rows():
            fh.write(row)
            fh.write("\n")


@dataclass
class TraceModelConfig:
    """Geometry the trace is replayed against.

    width counts usable frames per core. cores defaults to the number
    of cores present in the trace.
    """

    width: int = 256
    refresh_interval_ms: float = 2.0
    cores: Optional[int] = None

    def validate(self) -> None:
        if self.width < 1:
            raise ValueError("width must be positive")
        if self.refresh_interval_ms <= 0:
            raise ValueError("refresh interval must be positive")
        if self.cores is not None and self.cores < 1:
            raise ValueError("cores must be positive")


@dataclass
class Timeline:
    """Shifted per-fault timeline in processing order."""

    orig_ns: array
    adjusted_ns: array
    core_ids: array
    outcomes: array
    modeled_latency_ns: array

    def __len__(self) -> int:
        return len(self.orig_ns)

    def row(self, i: int) -> tuple[int, int, int, int, int]:
        return (
            self.orig_ns[i],
            self.adjusted_ns[i],
            self.core_ids[i],
            self.outcomes[i],
            self.modeled_latency_ns[i],
        )

    def csv_rows(self) -> Iterator[str]:
        yield TIMELINE_HEADER
        for i in range(len(self)):
            o, a, c, out, lat = self.row(i)
            yield f"{o},{a},{c},{OUTCOME_NAMES[out]},{lat}"


def _empty_timeline() -> Timeline:
    return Timeline(array("q"), array("q"), array("q"), array("q"), array("q"))


@dataclass
class ModelReport:
    config: dict
    hits: int
    misses: int
    hit_rate: float
    baseline_runtime_ns: int
    modeled_runtime_ns: int
    saved_ns: int
    penalty_ns: int
    speedup: float
    baseline_overhead_fraction: float
    residual_overhead_fraction: float
    timeline: Timeline

    def to_json_dict(self) -> dict:
        return {
            "schema": "mfoesim.modelreport/1",
            "config": self.config,
            "hits": self.hits,
            "misses": self.misses,
            "hit_rate": self.hit_rate,
            "baseline_runtime_ns": self.baseline_runtime_ns,
            "modeled_runtime_ns": self.modeled_runtime_ns,
            "saved_ns": self.saved_ns,
            "penalty_ns": self.penalty_ns,
            "speedup": self.speedup,
            "baseline_overhead_fraction": self.baseline_overhead_fraction,
            "residual_overhead_fraction": self.residual_overhead_fraction,
            "faults": self.hits + self.misses,
        }

    def to_json(self) -> str:
        import json

        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2) + "\n"


def model_constants(config: TraceModelConfig, params: ModelParameters) -> dict:
    """Integer-ns constants the replay runs on; also echoed in reports."""
    clock = params.clock_hz
    return {
        "hit_ns": max(0, round(params.mfoe_hit_cycles * 1e9 / clock)),
        "miss_penalty_ns": max(0, round(params.mfoe_miss_penalty_cycles * 1e9 / clock)),
        "init_page_ns": max(1, round(1e9 / params.init_throughput_pages_per_s)),
        "record_ns": max(1, round(1e9 / params.background_throughput_pages_per_s)),
        "interval_ns": max(1, round(config.refresh_interval_ms * 1e6)),
        "budget_per_tick": (
            max(1, round(config.refresh_interval_ms * 1e6))
            * round(params.background_throughput_pages_per_s)
            // 10**9
        ),
    }


def apply_model(
    trace: FaultTrace,
    config: Optional[TraceModelConfig] = None,
    params: Optional[ModelParameters] = None,
) -> ModelReport:
    config = config or TraceModelConfig()
    params = params or ModelParameters()
    config.validate()
    params.validate()

    n = len(trace)
    trace_cores = trace.core_count
    cores = config.cores if config.cores is not None else max(1, trace_cores)
    if trace_cores > cores:
        raise ValueError(f"trace uses {trace_cores} cores, model configured for {cores}")

    consts = model_constants(config, params)
    echo = {
        "width": config.width,
        "refresh_interval_ms": config.refresh_interval_ms,
        "cores": cores,
        "clock_hz": params.clock_hz,
        **consts,
    }

    if n == 0:
        return ModelReport(
            config=echo,
            hits=0,
            misses=0,
            hit_rate=0.0,
            baseline_runtime_ns=0,
            modeled_runtime_ns=0,
            saved_ns=0,
            penalty_ns=0,
            speedup=1.0,
            baseline_overhead_fraction=0.0,
            residual_overhead_fraction=0.0,
            timeline=_empty_timeline(),
        )

    hit_ns = consts["hit_ns"]
    miss_ns = consts["miss_penalty_ns"]
    init_ns = consts["init_page_ns"]
    record_ns = consts["record_ns"]
    interval_ns = consts["interval_ns"]
    budget_cap = consts["budget_per_tick"]
    width = config.width

    tarr = trace.timestamps_ns
    carr = trace.core_ids
    larr = trace.latencies_ns

    per_core: list[list[int]] = [[] for _ in range(cores)]
    for i in range(n):
        per_core[carr[i]].append(i)

    cursor = [0] * cores
    shift = [0] * cores
    pool = [0] * cores
    used = [0] * cores

    heap: list[tuple[int, int, int, int, int]] = []
    seq = 0
    for p in range(cores * width):
        seq += 1
        heap.append(((p + 1) * init_ns, _PRIO_LANDING, p // width, seq, -1))
    fill_end = cores * width * init_ns
    seq += 1
    heap.append((fill_end + interval_ns, _PRIO_TICK, 0, seq, -1))
    for c in range(cores):
        if per_core[c]:
            i = per_core[c][0]
            seq += 1
            heap.append((tarr[i], _PRIO_FAULT, c, seq, i))
    heapq.heapify(heap)
    push = heapq.heappush
    pop = heapq.heappop

    t_orig = array("q")
    t_adj = array("q")
    t_core = array("q")
    t_out = array("q")
    t_lat = array("q")

    hits = misses = 0
    saved = penalty = 0
    tick_index = 0
    done = 0

    while done < n:
        t, prio, core, _, idx = pop(heap)
        if prio == _PRIO_FAULT:
            lat = larr[idx]
            if pool[core] > 0:
                pool[core] -= 1
                used[core] += 1
                hits += 1
                saved += lat - hit_ns
                shift[core] -= lat - hit_ns
                t_out.append(OUTCOME_HIT)
                t_lat.append(hit_ns)
            else:
                misses += 1
                penalty += miss_ns
                shift[core] += miss_ns
                t_out.append(OUTCOME_MISS)
                t_lat.append(lat + miss_ns)
            t_orig.append(tarr[idx])
            t_adj.append(t)
            t_core.append(core)
            done += 1
            lst = per_core[core]
            cur = cursor[core] + 1
            cursor[core] = cur
            if cur < len(lst):
                nxt = lst[cur]
                seq += 1
                push(heap, (tarr[nxt] + shift[core], _PRIO_FAULT, core, seq, nxt))
        elif prio == _PRIO_LANDING:
            pool[core] += 1
        else:
            remaining = budget_cap
            landed = 0
            start = tick_index % cores
            for k in range(cores):
                c = (start + k) % cores
                take = used[c] if used[c] <= remaining else remaining
                if take:
                    used[c] -= take
                    remaining -= take
                    for _ in range(take):
                        landed += 1
                        seq += 1
                        push(heap, (t + landed * record_ns, _PRIO_LANDING, c, seq, -1))
                if remaining == 0:
                    break
            tick_index += 1
            seq += 1
            push(heap, (t + interval_ns, _PRIO_TICK, 0, seq, -1))

    baseline_runtime = trace.total_runtime_ns
    modeled_runtime = baseline_runtime - saved + penalty
    speedup = baseline_runtime / modeled_runtime if modeled_runtime > 0 else math.inf
    baseline_overhead = sum(larr)
    modeled_overhead = sum(t_lat)
    return ModelReport(
        config=echo,
        hits=hits,
        misses=misses,
        hit_rate=hits / n,
        baseline_runtime_ns=baseline_runtime,
        modeled_runtime_ns=modeled_runtime,
        saved_ns=saved,
        penalty_ns=penalty,
        speedup=speedup,
        baseline_overhead_fraction=(
            baseline_overhead / baseline_runtime if baseline_runtime > 0 else 0.0
        ),
        residual_overhead_fraction=(
            modeled_overhead / modeled_runtime if modeled_runtime > 0 else 0.0
        ),
        timeline=Timeline(t_orig, t_adj, t_core, t_out, t_lat),
    )


# Synthetic trace generation.
#
# Reference workload profiles: steady-state fault rate and the fraction
# of runtime the recorded workload spent in minor-fault handling. Mean
# per-fault latency falls out as overhead_fraction / rate.
@dataclass(frozen=True)
class WorkloadProfile:
    name: str
    faults_per_s: int
    overhead_fraction: float

    def latency_mean_ns(self) -> int:
        return max(1, round(self.overhead_fraction * 1e9 / self.faults_per_s))


WORKLOAD_PROFILES = {
    p.name: p
    for p in (
        WorkloadProfile("gcc", 365_310, 0.2909),
        WorkloadProfile("faas", 108_920, 0.0905),
        WorkloadProfile("dedup", 165_880, 0.0826),
        WorkloadProfile("memcached", 120_060, 0.0647),
        WorkloadProfile("radix", 259_250, 0.1617),
        WorkloadProfile("fft", 222_620, 0.1006),
        WorkloadProfile("xsbench", 89_090, 0.0490),
        WorkloadProfile("gap-bc", 77_740, 0.0308),
        WorkloadProfile("integer-sort", 104_910, 0.0420),
    )
}


def synthesize(
    rate_per_core: float,
    duration_s: float,
    dist: str = "uniform",
    cores: int = 1,
    latency_mean_ns: Optional[int] = None,
    latency_p95_ns: Optional[int] = None,
    seed: int = 0,
    source: str = "synthetic",
) -> FaultTrace:
    """Generate a fault trace. Deterministic for a given (settings, seed) pair.

    uniform spaces faults exactly round(1e9 / rate) ns apart starting at
    zero; poisson draws exponential gaps. Latencies come from the usual
    lognormal two-statistic fit (constant when mean == p95).
    """
    if rate_per_core <= 0:
        raise ValueError("rate must be positive")
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    if cores < 1:
        raise ValueError("need at least one core")
    if dist not in ("uniform", "poisson"):
        raise ValueError(f"unknown distribution {dist!r}")

    defaults = ModelParameters()
    if latency_mean_ns is None:
        latency_mean_ns = round(defaults.baseline_fault_mean_cycles * 1e9 / defaults.clock_hz)
    if latency_p95_ns is None:
        latency_p95_ns = max(
            latency_mean_ns,
            round(defaults.baseline_fault_p95_cycles * 1e9 / defaults.clock_hz),
        )
    sampler = LatencySampler(latency_mean_ns, latency_p95_ns)
    duration_ns = round(duration_s * 1e9)

    events: list[tuple[int, int, int]] = []
    for c in range(cores):
        rng = random.Random(f"{seed}:{c}")
        if dist == "uniform":
            spacing = max(1, round(1e9 / rate_per_core))
            t = 0
            while t < duration_ns:
                events.append((t, c, sampler.sample_int(rng)))
                t += spacing
        else:
            gap_scale = 1e9 / rate_per_core
            acc = 0.0
            while True:
                acc += rng.expovariate(1.0) * gap_scale
                t = round(acc)
                if t >= duration_ns:
                    break
                events.append((t, c, sampler.sample_int(rng)))
    events.sort(key=lambda e: (e[0], e[1]))
    return FaultTrace(
        (e[0] for e in events),
        (e[1] for e in events),
        (e[2] for e in events),
        source=source,
        validate=False,
    )


def synthesize_profile(
    name: str,
    duration_s: float,
    dist: str = "poisson",
    cores: int = 1,
    seed: int = 0,
    params: Optional[ModelParameters] = None,
) -> FaultTrace:
    """Synthesize a trace shaped like a reference workload profile."""
    try:
        prof = WORKLOAD_PROFILES[name]
    except KeyError:
        known = ", ".join(sorted(WORKLOAD_PROFILES))
        raise ValueError(f"unknown profile {name!r}; known: {known}") from None
    p = params or ModelParameters()
    mean = prof.latency_mean_ns()
    p95 = max(mean, round(mean * p.baseline_fault_p95_cycles / p.baseline_fault_mean_cycles))
    return synthesize(
        prof.faults_per_s, duration_s, dist, cores, mean, p95, seed, source=name
    )


@dataclass
class SweepCell:
    width: int
    interval_ms: float
    report: ModelReport


@dataclass
class SweepGrid:
    cells: list[SweepCell]

    def csv_rows(self) -> Iterator[str]:
        yield "width,interval_ms,hit_rate,overhead_pct,speedup"
        for cell in self.cells:
            r = cell.report
            yield (
                f"{cell.width},{cell.interval_ms:g},{r.hit_rate:.6f},"
                f"{100.0 * r.residual_overhead_fraction:.4f},{r.speedup:.6f}"
            )

    def to_json_dict(self) -> dict:
        return {
            "schema": "mfoesim.sweepgrid/1",
            "cells": [
                {
                    "width": cell.width,
                    "interval_ms": cell.interval_ms,
                    **cell.report.to_json_dict(),
                }
                for cell in self.cells
            ],
        }

    def cell(self, width: int, interval_ms: float) -> SweepCell:
        for c in self.cells:
            if c.width == width and c.interval_ms == interval_ms:
                return c
        raise KeyError((width, interval_ms))


def sweep(
    trace: FaultTrace,
    widths: Optional[Iterable[int]] = None,
    intervals_ms: Optional[Iterable[float]] = None,
    params: Optional[ModelParameters] = None,
    cores: Optional[int] = None,
) -> SweepGrid:
    """Replay one trace across a (width, refresh interval) grid."""
    width_list = list(widths) if widths is not None else list(DEFAULT_WIDTHS)
    interval_list = (
        list(intervals_ms) if intervals_ms is not None else list(DEFAULT_INTERVALS_MS)
    )
    if not width_list or not interval_list:
        raise ValueError("sweep grids must be nonempty")
    cells = []
    for w in width_list:
        for iv in interval_list:
            cfg = TraceModelConfig(width=w, refresh_interval_ms=iv, cores=cores)
            cells.append(SweepCell(w, iv, apply_model(trace, cfg, params)))
    return SweepGrid(cells)
