from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from isp_metagenomics import ssd_sim as sim

SSD_C = sim.preset("ssd-c")
SSD_P = sim.preset("ssd-p")


# ---------------------------------------------------------------- config


def test_presets():
    assert (SSD_C.channels, SSD_C.dies_per_channel, SSD_C.planes_per_die) == (8, 8, 4)
    assert (SSD_P.channels, SSD_P.dies_per_channel, SSD_P.planes_per_die) == (16, 8, 2)
    for cfg in (SSD_C, SSD_P):
        assert (cfg.t_r_us, cfg.t_prog_us, cfg.channel_rate) == (52.5, 700.0, 1.2e9)
        assert cfg.wordlines_per_block == 196 and cfg.page_size == 16 * sim.KIB
    assert SSD_C.interface_bw == 600e6 and SSD_P.interface_bw == 8e9
    assert SSD_P.internal_bw == pytest.approx(19.2e9)


def test_preset_lookup_is_case_insensitive():
    assert sim.preset("SSD-P") == SSD_P
    with pytest.raises(sim.BadConfig):
        sim.preset("ssd-x")


@pytest.mark.parametrize("field", ["channels", "page_size", "t_r_us", "channel_rate"])
@pytest.mark.parametrize("value", [0, -1])
def test_non_positive_fields_rejected(field, value):
    with pytest.raises(sim.BadConfig):
        replace(SSD_C, **{field: value})


def test_parse_config(tmp_path):
    text = "# tuned part\npreset = ssd-p\nchannels = 32   # wider\ninterface_bw = 4e9\n\n"
    cfg = sim.parse_config(text)
    assert cfg == replace(SSD_P, channels=32, interface_bw=4e9)
    path = tmp_path / "ssd.cfg"
    path.write_text(text)
    assert sim.load_config(path) == cfg
    assert sim.parse_config("") == SSD_C


@pytest.mark.parametrize("text", ["channels 8", "colour = red", "channels = eight", "t_r_us = -3"])
def test_parse_config_errors(text):
    with pytest.raises(sim.BadConfig):
        sim.parse_config(text)


# ---------------------------------------------------------------- FTL


def test_one_block_database():
    m = sim.place_database(1, SSD_C)
    assert len(m.blocks) == 1 and m.channel_of(0) == 0
    assert sim.metadata_size(m) == 24
    assert sim.l2p_metadata_size(m) == 20


def test_one_block_per_channel_at_equal_offsets():
    m = sim.place_database(SSD_C.channels * SSD_C.block_bytes, SSD_C)
    assert len(m.blocks) == SSD_C.channels
    assert [m.channel_of(i) for i in range(len(m.blocks))] == list(range(SSD_C.channels))
    ppb = SSD_C.pages_per_block
    for lpn in range(0, SSD_C.channels * ppb, 97):
        stripe_start = lpn - lpn % SSD_C.channels
        offsets = {m.page_location(p, ppb)[1] for p in range(stripe_start, stripe_start + SSD_C.channels)}
        assert len(offsets) == 1


def test_block_ids_are_distinct_physical_blocks():
    m = sim.place_database(5000 * SSD_C.block_bytes, SSD_C)
    assert len(set(m.blocks)) == len(m.blocks)
    assert all(0 <= b < SSD_C.total_blocks for b in m.blocks)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 3000 * 12 * sim.MIB), st.sampled_from([4, 8, 16]))
def test_random_sizes_balance_channels(size, channels):
    cfg = replace(SSD_C, channels=channels)
    m = sim.place_database(size, cfg, block_bytes=12 * sim.MIB)
    assert len(m.blocks) == -(-size // (12 * sim.MIB))
    per = [0] * channels
    for i in range(len(m.blocks)):
        per[m.channel_of(i)] += 1
    assert max(per) - min(per) <= 1
    assert len(m.read_counts) == len(m.blocks)


def test_ftl_errors():
    with pytest.raises(sim.CapacityExceeded):
        sim.place_database(SSD_C.capacity + 1, SSD_C)
    with pytest.raises(sim.SimError):
        sim.place_database(-1, SSD_C)
    assert sim.place_database(0, SSD_C).blocks == []


def test_four_tib_metadata_is_closed_form():
    m = sim.place_database(4 * sim.TIB, SSD_C, block_bytes=12 * sim.MIB)
    n = -(-4 * sim.TIB // (12 * sim.MIB))
    assert len(m.blocks) == n
    assert sim.l2p_metadata_size(m) == 4 * n + 16
    assert sim.metadata_size(m) == 8 * n + 16
    assert sim.metadata_size(m) / sim.MIB < 2.7


# ---------------------------------------------------------------- flash reads


@pytest.mark.parametrize("cfg", [SSD_C, SSD_P, replace(SSD_C, dies_per_channel=1, planes_per_die=1)])
def test_one_page_read(cfg):
    t = sim.sim_sequential_read(cfg.page_size, cfg)
    assert t == pytest.approx(52.5 + 16384 / 1.2e9 * 1e6)
    assert t == pytest.approx(66.15, abs=0.01)


def test_empty_read():
    assert sim.sim_sequential_read(0, SSD_C) == 0.0
    assert sim.isp_stream_time(0, SSD_C) == 0.0


@pytest.mark.parametrize("cfg", [SSD_C, SSD_P])
def test_doubling_channels_halves_time(cfg):
    size = 4 * sim.GIB
    t1 = sim.sim_sequential_read(size, cfg)
    t2 = sim.sim_sequential_read(size, replace(cfg, channels=2 * cfg.channels))
    assert t1 / t2 == pytest.approx(2.0, rel=0.01)


def test_ssd_p_streaming_ceiling():
    size = 8 * sim.GIB
    rate = size / sim.sim_sequential_read(size, SSD_P) * 1e6
    assert rate <= 19.2e9
    assert rate == pytest.approx(19.2e9, rel=0.01)
    assert size / sim.isp_stream_time(size, SSD_P) * 1e6 == pytest.approx(rate)


def test_die_supply_caps_rate():
    # one die, one plane: every page waits a full tR, so supply is far below the channel
    cfg = replace(SSD_C, channels=1, dies_per_channel=1, planes_per_die=1)
    t = sim.sim_sequential_read(100 * cfg.page_size, cfg)
    assert t == pytest.approx(100 * (cfg.t_r_us + cfg.page_transfer_us))


def test_dram_budget_throttles():
    starved = replace(SSD_P, internal_dram_bw=1.2e9)
    size = 2 * sim.GIB
    rate = size / sim.isp_stream_time(size, starved) * 1e6
    assert rate == pytest.approx(1.2e9 / sim.DRAM_DEMAND_RATIO)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 600), st.integers(1, 6), st.integers(1, 4))
def test_resources_are_exclusive(pages, dies, planes):
    cfg = replace(SSD_C, dies_per_channel=dies, planes_per_die=planes)
    trace = sim.ReadTrace()
    end = sim._channel_read(pages, cfg, trace)
    # the channel carries one transfer at a time
    xfers = sorted((s, e) for _, s, e in trace.transfers)
    assert all(a[1] <= b[0] + 1e-9 for a, b in zip(xfers, xfers[1:]))
    assert sum(e - s for s, e in xfers) == pytest.approx(pages * cfg.page_transfer_us)
    # each die runs one array operation at a time, and never reads into full registers
    for d in range(dies):
        ops = sorted((s, e) for dd, s, e in trace.array_ops if dd == d)
        assert all(a[1] <= b[0] + 1e-9 for a, b in zip(ops, ops[1:]))
    # throughput ceiling: neither the channel nor the dies can be beaten
    assert end >= pages * cfg.page_transfer_us
    per_die_ops = -(-pages // planes) / dies
    assert end >= cfg.t_r_us * max(1.0, per_die_ops) - 1e-9
    assert end == max(e for _, _, e in trace.transfers)


# ---------------------------------------------------------------- pipeline


RATES = {"sort": 1e9, "interface": 1e9, "isp": 1e9}


def test_one_bucket_gains_nothing():
    ser = sim.sim_pipeline([10 * sim.MIB], RATES, False)
    ovl = sim.sim_pipeline([10 * sim.MIB], RATES, True)
    # a single bucket only overlaps inside its own batches; with no sort to hide, the totals agree
    one_batch = sim.sim_pipeline([sim.MIB], RATES, True)
    assert one_batch.total == pytest.approx(sim.sim_pipeline([sim.MIB], RATES, False).total)
    assert ovl.total <= ser.total


def test_analytic_pipeline_formula():
    n, size = 64, 10**6
    rates = {"sort": 1e6, "interface": 1e12, "isp": 1e6}  # t = 1 s per stage
    ovl = sim.sim_pipeline([size] * n, rates, True)
    ser = sim.sim_pipeline([size] * n, rates, False)
    t = 1e6
    assert ovl.total == pytest.approx((n + 1) * t, rel=0.01)
    assert ser.total == pytest.approx(2 * n * t, rel=0.01)


def test_rates_must_be_positive():
    with pytest.raises(sim.SimError):
        sim.sim_pipeline([1], {"sort": 1, "interface": 0, "isp": 1}, True)
    with pytest.raises(sim.SimError):
        sim.sim_pipeline([1], {"sort": 1, "isp": 1}, False)


def _check_timeline(tl, n):
    for i in range(n):
        ev = tl.by_bucket(i)
        assert ev["sort"].end <= ev["transfer"].start + 1e-9
        assert ev["transfer"].start <= ev["intersect"].start
        assert ev["transfer"].end <= ev["intersect"].end
    for stage in ("sort", "transfer", "intersect"):
        spans = sorted((e.start, e.end) for e in tl.events if e.stage == stage)
        assert all(a[1] <= b[0] + 1e-6 for a, b in zip(spans, spans[1:]))
        assert 0.0 <= tl.utilization(stage) <= 1.0
    retrieve = [e for e in tl.events if e.stage == "retrieve"]
    if retrieve:
        assert retrieve[0].start >= max(e.end for e in tl.events if e.stage == "intersect") - 1e-9


workloads = st.tuples(
    st.lists(st.integers(0, 8 * sim.MIB), min_size=1, max_size=24),
    st.floats(1e7, 1e10),
    st.floats(1e7, 1e10),
    st.floats(1e7, 1e10),
    st.integers(0, 4 * sim.MIB),
)


@settings(max_examples=300, deadline=None)
@given(workloads)
def test_overlap_dominates_and_orders_stages(wl):
    buckets, sort, iface, isp, retrieve = wl
    rates = {"sort": sort, "interface": iface, "isp": isp}
    ovl = sim.sim_pipeline(buckets, rates, True, retrieve)
    ser = sim.sim_pipeline(buckets, rates, False, retrieve)
    assert ovl.total <= ser.total + 1e-6
    _check_timeline(ovl, len(buckets))
    _check_timeline(ser, len(buckets))


def test_commands_bracket_the_run():
    tl = sim.sim_pipeline([sim.MIB] * 3, RATES, True)
    kinds = [c[0] for c in tl.commands]
    assert kinds[0] == "init" and kinds[-1] == "write" and kinds.count("step") == 3
    assert tl.commands[0][2] - tl.commands[0][1] == sim.COMMAND_LATENCY_US


# ---------------------------------------------------------------- multi-sample


def test_multi_sample_formula():
    db = 8 * sim.GIB
    one = sim.sim_multi_sample(1, 1, db, SSD_C)
    assert one.db_bytes_read == one.baseline_db_bytes_read == db
    assert one.speedup == pytest.approx(1.0)
    r = sim.sim_multi_sample(16, 16, db, SSD_C)
    assert (r.passes, r.db_bytes_read, r.baseline_db_bytes_read) == (1, db, 16 * db)
    r = sim.sim_multi_sample(10, 4, db, SSD_C)
    assert (r.passes, r.db_bytes_read) == (3, 3 * db)


def test_multi_sample_speedup_monotone():
    speedups = [sim.sim_multi_sample(s, 16, 8 * sim.GIB, SSD_C).speedup for s in range(1, 17)]
    assert speedups == sorted(speedups)
    assert speedups[-1] > speedups[0]


def test_multi_sample_errors():
    with pytest.raises(sim.SimError):
        sim.sim_multi_sample(0, 1, 1, SSD_C)


# ---------------------------------------------------------------- experiments


def test_channels_sweep_non_decreasing():
    res = sim.run_experiment("channels", channels=(4, 8, 16))
    speedups = [s for _, s in res.summary().values()]
    assert speedups == sorted(speedups) and speedups[0] == 1.0


def test_db_size_sweep_non_decreasing():
    speedups = [s for _, s in sim.run_experiment("db_size").summary().values()]
    assert all(b >= a - 1e-9 for a, b in zip(speedups, speedups[1:]))


def test_ssd_count_non_decreasing():
    speedups = [s for _, s in sim.run_experiment("ssd_count").summary().values()]
    assert all(b >= a for a, b in zip(speedups, speedups[1:]))


def test_host_dram_bucketing_beats_swapping():
    summary = sim.run_experiment("host_dram").summary()
    assert summary["0.25x"][1] > 1.0 and summary["0.5x"][1] > 1.0
    assert summary["2.0x"][1] == pytest.approx(1.0)


def test_overlap_scenario_rows():
    res = sim.run_experiment("overlap")
    summary = res.summary()
    assert list(summary) == ["overlapped", "serialized"]
    assert summary["overlapped"][0] <= summary["serialized"][0]
    assert res.summary_csv().splitlines()[0] == "scenario,parameter,total_us,speedup_vs_baseline"
    assert res.timeline_csv().splitlines()[0] == "scenario,parameter,stage,start_us,end_us"


def test_unknown_scenario():
    with pytest.raises(sim.UnknownScenario):
        sim.run_experiment("warp_drive")


@pytest.mark.parametrize("scenario", sorted(sim.SCENARIOS))
def test_experiments_are_deterministic(scenario):
    a = sim.run_experiment(scenario)
    b = sim.run_experiment(scenario)
    assert a.timeline_csv() == b.timeline_csv()
    assert a.summary_csv() == b.summary_csv()


def test_swap_penalty_zero_when_it_fits():
    assert sim.swap_penalty_us(SSD_C, 100, 200) == 0.0
    assert sim.spill_cost_us(SSD_C, [10, 10], 100) == 0.0
    assert sim.swap_penalty_us(SSD_C, 400, 100) > sim.swap_penalty_us(SSD_C, 200, 100) > 0
