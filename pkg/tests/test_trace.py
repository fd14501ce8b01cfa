"""Trace ingestion, the replay model, synthesis, and sweeps.

The replay checks here are worked by hand against the model's stated
mechanics: frames land per core at the init rate until each pool holds
`width`, refresh passes run every interval and re-stock one frame per
consumed record at the background rate (budget-capped, rotating the
starting core), a stocked fault costs hit_ns and pulls later same-core
faults earlier by (latency - hit_ns), an empty-pool fault pushes them
later by miss_penalty_ns.
"""
import json
import math

import pytest

from mfoesim.params import ModelParameters
from mfoesim.trace import (
    DEFAULT_INTERVALS_MS,
    DEFAULT_WIDTHS,
    OUTCOME_HIT,
    OUTCOME_MISS,
    TIMELINE_HEADER,
    TRACE_HEADER,
    FaultTrace,
    TraceFormatError,
    TraceModelConfig,
    WORKLOAD_PROFILES,
    apply_model,
    ingest,
    model_constants,
    sweep,
    synthesize,
    synthesize_profile,
    write_trace,
)

GHZ1 = ModelParameters(clock_hz=1_000_000_000)  # 1 cycle == 1 ns


# trace container


def test_from_records_round_trip():
    trace = FaultTrace.from_records([(100, 0, 50), (120, 1, 10)], source="t")
    assert len(trace) == 2
    assert trace.record(0).timestamp_ns == 100
    assert [r.core for r in trace.records()] == [0, 1]
    assert trace.core_count == 2
    assert trace.source == "t"


def test_validate_rejects_malformed_traces():
    with pytest.raises(ValueError, match="mismatched"):
        FaultTrace([1, 2], [0], [5, 5])
    with pytest.raises(ValueError, match="negative core"):
        FaultTrace([1], [-1], [5])
    with pytest.raises(ValueError, match="latency"):
        FaultTrace([1], [0], [0])
    with pytest.raises(ValueError, match="regresses"):
        FaultTrace([100, 50], [0, 0], [5, 5])
    # regression check is per core; interleaved cores may go backwards
    FaultTrace([100, 50], [0, 1], [5, 5])


def test_runtime_brackets_first_start_to_last_end():
    trace = FaultTrace([100, 120], [0, 0], [50, 10])
    assert trace.total_runtime_ns == 150 - 100
    assert trace.overhead_fraction() == pytest.approx(60 / 50)
    empty = FaultTrace()
    assert empty.total_runtime_ns == 0
    assert empty.core_count == 0
    assert empty.overhead_fraction() == 0.0


# file I/O


def test_ingest_round_trip(tmp_path):
    trace = synthesize(50_000, 0.01, cores=2, seed=3)
    path = tmp_path / "t.csv"
    write_trace(trace, str(path))
    back = ingest(str(path))
    assert list(back.timestamps_ns) == list(trace.timestamps_ns)
    assert list(back.core_ids) == list(trace.core_ids)
    assert list(back.latencies_ns) == list(trace.latencies_ns)


def test_ingest_tolerates_comments_and_blanks(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text(
        "# captured on host xyz\n\n"
        f"{TRACE_HEADER}\n"
        "1000,0,500\n"
        "# mid-file note\n"
        "2000,0,500\n"
    )
    trace = ingest(str(path))
    assert len(trace) == 2


def test_ingest_empty_file_gives_empty_trace(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("")
    trace = ingest(str(path))
    assert len(trace) == 0
    assert apply_model(trace).speedup == 1.0
    commented = tmp_path / "c.csv"
    commented.write_text("# nothing here\n")
    assert len(ingest(str(commented))) == 0


@pytest.mark.parametrize(
    "body,line_no,fragment",
    [
        ("time,cpu,lat\n", 1, "expected header"),
        (f"{TRACE_HEADER}\n1000,0\n", 2, "3 fields"),
        (f"{TRACE_HEADER}\n1000,zero,5\n", 2, "non-integer"),
        (f"{TRACE_HEADER}\n1000,-1,5\n", 2, "negative core"),
        (f"{TRACE_HEADER}\n1000,0,0\n", 2, "latency"),
        (f"{TRACE_HEADER}\n# pad\n2000,0,5\n1000,0,5\n", 4, "regresses"),
    ],
)
def test_ingest_reports_offending_line(tmp_path, body, line_no, fragment):
    path = tmp_path / "bad.csv"
    path.write_text(body)
    with pytest.raises(TraceFormatError, match=fragment) as exc:
        ingest(str(path))
    assert exc.value.line_no == line_no
    assert exc.value.path == str(path)


# replay model


def test_model_constants_at_defaults():
    consts = model_constants(TraceModelConfig(), ModelParameters())
    assert consts == {
        "hit_ns": 26,
        "miss_penalty_ns": 5,
        "init_page_ns": 915,
        "record_ns": 1724,
        "interval_ns": 2_000_000,
        "budget_per_tick": 1160,
    }


def test_stocked_run_saves_full_latency_delta():
    # Three same-core faults at 1 GHz, pools filled long before the first.
    # Each hit saves 2552 - 78 ns and drags the next fault earlier by the
    # same amount: adjusted starts 1000000, 1197526, 1395052.
    trace = FaultTrace.from_records(
        [(1_000_000, 0, 2552), (1_200_000, 0, 2552), (1_400_000, 0, 2552)]
    )
    report = apply_model(trace, TraceModelConfig(width=256), GHZ1)
    assert report.hits == 3 and report.misses == 0
    assert report.hit_rate == 1.0
    assert report.saved_ns == 3 * (2552 - 78) == 7422
    assert report.penalty_ns == 0
    assert report.baseline_runtime_ns == 402_552
    assert report.modeled_runtime_ns == 402_552 - 7422
    assert report.speedup == pytest.approx(402_552 / 395_130)
    assert list(report.timeline.adjusted_ns) == [1_000_000, 1_197_526, 1_395_052]
    assert list(report.timeline.modeled_latency_ns) == [78, 78, 78]
    assert list(report.timeline.outcomes) == [OUTCOME_HIT] * 3
    assert report.residual_overhead_fraction == pytest.approx(3 * 78 / 395_130)


def test_faults_before_any_frame_lands_all_miss():
    # First frame lands at 915 ns; these five are all earlier, so each
    # pays its own latency plus the 14 ns probe and pushes the rest out.
    trace = FaultTrace.from_records([(i, 0, 100) for i in range(5)])
    report = apply_model(trace, TraceModelConfig(width=8), GHZ1)
    assert report.hits == 0
    assert report.hit_rate == 0.0
    assert report.penalty_ns == 5 * 14
    assert report.baseline_runtime_ns == 104
    assert report.modeled_runtime_ns == 104 + 70
    assert report.speedup == pytest.approx(104 / 174)
    assert list(report.timeline.adjusted_ns) == [0, 15, 30, 45, 60]
    assert list(report.timeline.modeled_latency_ns) == [114] * 5


def test_refresh_restocks_consumed_frames():
    # Width 1: every hit empties the pool; each later fault needs the
    # periodic pass to have landed a replacement (first pass at
    # 915 + 2 ms, then every 2 ms, one record 1724 ns after the pass).
    trace = FaultTrace.from_records(
        [(5_000_000, 0, 851), (8_000_000, 0, 851), (11_000_000, 0, 851)]
    )
    report = apply_model(trace, TraceModelConfig(width=1))
    assert report.hits == 3
    assert report.saved_ns == 3 * (851 - 26)
    assert report.modeled_runtime_ns == 6_000_851 - 2475


def test_missed_fault_waits_for_next_refresh():
    trace = FaultTrace.from_records(
        [(5_000_000, 0, 851), (5_500_000, 0, 851), (8_000_000, 0, 851)]
    )
    report = apply_model(trace, TraceModelConfig(width=1))
    assert report.hits == 2 and report.misses == 1
    assert list(report.timeline.outcomes) == [OUTCOME_HIT, OUTCOME_MISS, OUTCOME_HIT]
    assert report.penalty_ns == 5
    # the miss keeps its own start (shifted only by the earlier hit)
    assert report.timeline.adjusted_ns[1] == 5_500_000 - 825


def test_refresh_budget_and_rotation_across_cores():
    # Two cores, width 1, hit-cost latencies so shifts stay zero until a
    # miss. Background rate 500/s makes each re-stock take 2 ms and floors
    # the per-pass budget to one record. Worked timeline: pools land at
    # 915/1830; both cores hit at ~2000. Pass 1 (3001830) serves core 0,
    # landing 5001830: core 0 hits again at 5.1 ms, core 1 misses. Pass 2
    # (6001830) starts at core 1, landing 8001830: core 1 hits at ~8.1 ms
    # while core 0 misses. A non-rotating scan would serve core 0 both
    # times and flip the last two outcomes.
    params = ModelParameters(background_throughput_pages_per_s=500)
    records = [
        (2_000, 0, 26),
        (2_001, 1, 26),
        (5_100_000, 0, 26),
        (5_100_001, 1, 26),
        (8_100_000, 1, 26),
        (8_100_001, 0, 26),
    ]
    trace = FaultTrace.from_records(records)
    config = TraceModelConfig(width=1, refresh_interval_ms=3.0)
    report = apply_model(trace, config, params)
    assert model_constants(config, params)["budget_per_tick"] == 1
    assert model_constants(config, params)["record_ns"] == 2_000_000
    assert report.hits == 4 and report.misses == 2
    assert list(report.timeline.outcomes) == [
        OUTCOME_HIT, OUTCOME_HIT, OUTCOME_HIT, OUTCOME_MISS, OUTCOME_MISS, OUTCOME_HIT,
    ]
    # core 1's second miss pushes only core 1's later faults
    assert list(report.timeline.adjusted_ns)[4:] == [8_100_001, 8_100_005]
    assert list(report.timeline.core_ids) == [0, 1, 0, 1, 0, 1]


def test_core_count_inferred_and_checked():
    trace = FaultTrace.from_records([(1000, 0, 10), (2000, 2, 10)])
    report = apply_model(trace, TraceModelConfig(width=4))
    assert report.config["cores"] == 3
    with pytest.raises(ValueError, match="cores"):
        apply_model(trace, TraceModelConfig(width=4, cores=2))


def test_config_validation():
    with pytest.raises(ValueError, match="width"):
        apply_model(FaultTrace(), TraceModelConfig(width=0))
    with pytest.raises(ValueError, match="interval"):
        apply_model(FaultTrace(), TraceModelConfig(refresh_interval_ms=0))
    with pytest.raises(ValueError, match="cores"):
        apply_model(FaultTrace(), TraceModelConfig(cores=0))


def test_per_core_order_is_preserved():
    # Gaps exceed every latency, so hits compress but never reorder.
    import random

    rng = random.Random(11)
    records = []
    clocks = [0, 0]
    for _ in range(300):
        core = rng.randrange(2)
        lat = rng.randrange(200, 3000)
        clocks[core] += lat + rng.randrange(3000, 20_000)
        records.append((clocks[core], core, lat))
    records.sort(key=lambda r: r[0])
    trace = FaultTrace.from_records(records)
    report = apply_model(trace, TraceModelConfig(width=64))
    per_core_adj = {0: [], 1: []}
    for i in range(len(report.timeline)):
        per_core_adj[report.timeline.core_ids[i]].append(report.timeline.adjusted_ns[i])
    for adj in per_core_adj.values():
        assert adj == sorted(adj)
    assert report.hits + report.misses == 300


def test_degenerate_overlap_reports_infinite_speedup():
    # Both faults overlap almost entirely; removing their latencies saves
    # more than the whole bracket, which the report pins at infinity.
    trace = FaultTrace.from_records(
        [(1_000_000, 0, 5_000_000), (1_000_010, 0, 5_000_000)]
    )
    report = apply_model(trace, TraceModelConfig(width=256))
    assert report.modeled_runtime_ns <= 0
    assert report.speedup == math.inf
    assert report.residual_overhead_fraction == 0.0


def test_model_report_json_schema():
    trace = FaultTrace.from_records([(1_000_000, 0, 851)])
    doc = json.loads(apply_model(trace).to_json())
    assert doc["schema"] == "mfoesim.modelreport/1"
    assert doc["faults"] == 1
    assert "timeline" not in doc
    assert doc["config"]["width"] == 256
    assert doc["config"]["hit_ns"] == 26


def test_timeline_csv_layout():
    trace = FaultTrace.from_records([(100, 0, 50)])
    report = apply_model(trace, TraceModelConfig(width=4), GHZ1)
    rows = list(report.timeline.csv_rows())
    assert rows[0] == TIMELINE_HEADER
    assert rows[1] == "100,100,0,miss,64"


# synthesis


def test_uniform_rate_is_exact():
    trace = synthesize(100_000, 1.0, dist="uniform")
    assert len(trace) == 100_000
    assert trace.timestamps_ns[0] == 0
    assert trace.timestamps_ns[1] == 10_000
    assert trace.core_ids[0] == 0


def test_poisson_count_within_three_sigma():
    trace = synthesize(100_000, 1.0, dist="poisson", seed=5)
    assert abs(len(trace) - 100_000) <= 3 * math.sqrt(100_000)


def test_synthesis_is_seed_deterministic():
    a = synthesize(50_000, 0.1, dist="poisson", cores=2, seed=9)
    b = synthesize(50_000, 0.1, dist="poisson", cores=2, seed=9)
    assert list(a.timestamps_ns) == list(b.timestamps_ns)
    assert list(a.latencies_ns) == list(b.latencies_ns)
    c = synthesize(50_000, 0.1, dist="poisson", cores=2, seed=10)
    assert list(a.timestamps_ns) != list(c.timestamps_ns)


def test_multi_core_synthesis_interleaves_sorted():
    trace = synthesize(10_000, 0.1, cores=4, seed=1)
    assert trace.core_count == 4
    times = list(trace.timestamps_ns)
    assert times == sorted(times)
    per_core = [0] * 4
    for c in trace.core_ids:
        per_core[c] += 1
    assert per_core == [1000] * 4
    trace.validate()


def test_constant_latency_when_p95_collapses():
    trace = synthesize(10_000, 0.01, latency_mean_ns=500, latency_p95_ns=500)
    assert set(trace.latencies_ns) == {500}


def test_default_latency_statistics():
    trace = synthesize(100_000, 1.0, dist="uniform", seed=2)
    mean = sum(trace.latencies_ns) / len(trace)
    assert abs(mean - 851) / 851 < 0.02


def test_synthesize_argument_validation():
    with pytest.raises(ValueError, match="rate"):
        synthesize(0, 1.0)
    with pytest.raises(ValueError, match="duration"):
        synthesize(1000, 0)
    with pytest.raises(ValueError, match="core"):
        synthesize(1000, 1.0, cores=0)
    with pytest.raises(ValueError, match="distribution"):
        synthesize(1000, 1.0, dist="pareto")


def test_profile_table_is_complete():
    assert set(WORKLOAD_PROFILES) == {
        "gcc", "faas", "dedup", "memcached", "radix", "fft",
        "xsbench", "gap-bc", "integer-sort",
    }
    gcc = WORKLOAD_PROFILES["gcc"]
    assert gcc.faults_per_s == 365_310
    assert gcc.latency_mean_ns() == round(0.2909e9 / 365_310)


def test_memcached_profile_reproduces_overhead():
    trace = synthesize_profile("memcached", 1.0, seed=4)
    target = WORKLOAD_PROFILES["memcached"].overhead_fraction
    assert abs(trace.overhead_fraction() - target) / target < 0.05
    assert trace.source == "memcached"


def test_unknown_profile_lists_known_names():
    with pytest.raises(ValueError, match="memcached"):
        synthesize_profile("doom", 1.0)


# sweeps


def test_sweep_covers_default_grid_row_major():
    trace = synthesize(20_000, 0.05, seed=6)
    grid = sweep(trace)
    assert [(c.width, c.interval_ms) for c in grid.cells] == [
        (w, iv) for w in DEFAULT_WIDTHS for iv in DEFAULT_INTERVALS_MS
    ]
    rows = list(grid.csv_rows())
    assert rows[0] == "width,interval_ms,hit_rate,overhead_pct,speedup"
    assert len(rows) == 21
    doc = grid.to_json_dict()
    assert doc["schema"] == "mfoesim.sweepgrid/1"
    assert len(doc["cells"]) == 20
    assert doc["cells"][0]["width"] == 128


def test_single_cell_sweep_matches_direct_replay():
    trace = synthesize(20_000, 0.05, seed=6)
    grid = sweep(trace, widths=[256], intervals_ms=[2.0])
    assert len(grid.cells) == 1
    direct = apply_model(trace, TraceModelConfig(width=256, refresh_interval_ms=2.0))
    cell = grid.cell(256, 2.0)
    assert cell.report.hit_rate == direct.hit_rate
    assert cell.report.speedup == direct.speedup
    with pytest.raises(KeyError):
        grid.cell(512, 2.0)


def test_sweep_rejects_empty_grids():
    trace = synthesize(1000, 0.01)
    with pytest.raises(ValueError, match="nonempty"):
        sweep(trace, widths=[])
