"""Deterministic discrete-event model of the SSD and the host/SSD pipeline.

All times are microseconds (floats), all sizes bytes, all rates bytes/s.
Nothing here is random: identical inputs give identical timelines.
"""

from __future__ import annotations

import csv
import heapq
import io
import math
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

from .query_prep import plan_residency

KIB = 1 << 10
MIB = 1 << 20
GIB = 1 << 30
TIB = 1 << 40

COMMAND_LATENCY_US = 10.0
# Internal-DRAM traffic (query fetch + read-out + intersection write + FTL
# metadata) per byte of database streamed: 2.4 GB/s at 19.2 GB/s of flash.
DRAM_DEMAND_RATIO = 2.4 / 19.2
BATCH_BYTES = 1 * MIB
KMER_WORD_BYTES = 15  # one 120-bit k-mer per accelerator cycle

STAGES = ("sort", "transfer", "intersect", "retrieve")


class SimError(ValueError):
    pass


class CapacityExceeded(SimError):
    pass


class UnknownScenario(SimError):
    pass


class BadConfig(SimError):
    pass


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class SsdConfig:
    channels: int = 8
    dies_per_channel: int = 8
    planes_per_die: int = 4
    blocks_per_plane: int = 2048
    wordlines_per_block: int = 196
    bits_per_cell: int = 3
    page_size: int = 16 * KIB
    t_r_us: float = 52.5
    t_prog_us: float = 700.0
    channel_rate: float = 1.2e9
    interface_bw: float = 600e6
    internal_dram_bw: float = 12.8e9
    isp_clock_hz: float = 300e6

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise BadConfig(f"{f.name} must be positive")

    @property
    def pages_per_block(self) -> int:
        # one page per bit per wordline (TLC: three pages per wordline)
        return self.wordlines_per_block * self.bits_per_cell

    @property
    def block_bytes(self) -> int:
        return self.pages_per_block * self.page_size

    @property
    def total_blocks(self) -> int:
        return self.channels * self.dies_per_channel * self.planes_per_die * self.blocks_per_plane

    @property
    def capacity(self) -> int:
        return self.total_blocks * self.block_bytes

    @property
    def page_transfer_us(self) -> float:
        return self.page_size / self.channel_rate * 1e6

    @property
    def internal_bw(self) -> float:
        return self.channels * self.channel_rate

    def as_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "ssd-c": SsdConfig(),
    "ssd-p": SsdConfig(channels=16, dies_per_channel=8, planes_per_die=2, interface_bw=8e9),
}


def preset(name: str) -> SsdConfig:
    try:
        return PRESETS[name.lower()]
    except KeyError:
        raise BadConfig(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def parse_config(text: str) -> SsdConfig:
    """``key = value`` lines; ``#`` comments; optional ``preset`` key first."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise BadConfig(f"line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        values[key] = val
    base = preset(values.pop("preset", "ssd-c"))
    types = {f.name: f.type for f in fields(SsdConfig)}
    updates = {}
    for key, val in values.items():
        if key not in types:
            raise BadConfig(f"unknown config key {key!r}")
        try:
            updates[key] = int(val) if types[key] in (int, "int") else float(val)
        except ValueError:
            raise BadConfig(f"{key}: cannot parse {val!r}") from None
    return replace(base, **updates)


def load_config(path: str | Path) -> SsdConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# FTL placement


@dataclass
class FtlMapping:
    start_lpa: int
    start_ppa: int
    size: int
    block_bytes: int
    channels: int
    blocks: list[int]
    read_counts: list[int] = field(default_factory=list)

    def channel_of(self, i: int) -> int:
        return i % self.channels

    def page_location(self, lpn: int, pages_per_block: int) -> tuple[int, int]:
        """(block list index, page offset) of logical page ``lpn``.

        Pages are striped across the blocks of one channel-wide stripe, so the
        active blocks of every channel sit at the same page offset.
        """
        stripe, r = divmod(lpn, self.channels * pages_per_block)
        offset, ch = divmod(r, self.channels)
        return stripe * self.channels + ch, offset


def physical_block_id(cfg: SsdConfig, channel: int, die: int, plane: int, block: int) -> int:
    return ((channel * cfg.dies_per_channel + die) * cfg.planes_per_die + plane) * cfg.blocks_per_plane + block


def place_database(size: int, cfg: SsdConfig, block_bytes: int | None = None) -> FtlMapping:
    """Sequential channel-round-robin placement of one database."""
    bb = block_bytes or cfg.block_bytes
    if size < 0:
        raise SimError("size must be non-negative")
    if size > cfg.total_blocks * bb:
        raise CapacityExceeded(f"{size} B exceeds capacity {cfg.total_blocks * bb} B")
    n = -(-size // bb)
    C, D, P = cfg.channels, cfg.dies_per_channel, cfg.planes_per_die
    blocks = []
    for i in range(n):
        j, ch = divmod(i, C)
        die = j % D
        plane = (j // D) % P
        blocks.append(physical_block_id(cfg, ch, die, plane, j // (D * P)))
    return FtlMapping(0, blocks[0] if blocks else 0, size, bb, C, blocks, [0] * n)


L2P_FIXED_BYTES = 16  # start LPA/PPA mapping + database size
BLOCK_ENTRY_BYTES = 4
READ_COUNTER_BYTES = 4


def l2p_metadata_size(m: FtlMapping) -> int:
    return BLOCK_ENTRY_BYTES * len(m.blocks) + L2P_FIXED_BYTES


def metadata_size(m: FtlMapping) -> int:
    """Block list + fixed mapping header + per-block read counters."""
    return l2p_metadata_size(m) + READ_COUNTER_BYTES * len(m.blocks)


# --------------------------------------------------------------------------
# flash reads


@dataclass
class ReadTrace:
    """Busy intervals per resource, for exclusivity checks."""

    array_ops: list[tuple[int, float, float]] = field(default_factory=list)  # (die, start, end)
    transfers: list[tuple[int, float, float]] = field(default_factory=list)  # (die, start, end)


def _channel_read(pages: int, cfg: SsdConfig, trace: ReadTrace | None = None) -> float:
    """Event-driven read of ``pages`` pages spread over one channel's dies.

    Each die issues multiplane reads of up to ``planes_per_die`` pages; after
    tR its page registers wait for the channel, which serves dies first come
    first served (ties in die order).  A die reads again only once its
    registers are drained.
    """
    if pages <= 0:
        return 0.0
    D, P = cfg.dies_per_channel, cfg.planes_per_die
    xfer, t_r = cfg.page_transfer_us, cfg.t_r_us
    # page i lives on die (i // P) % D: consecutive pages fill a die's planes
    ops: list[list[int]] = [[] for _ in range(D)]
    full, rest = divmod(pages, P)
    for g in range(full):
        ops[g % D].append(P)
    if rest:
        ops[full % D].append(rest)
    heap = []
    nxt = [0] * D
    for d in range(D):
        if ops[d]:
            heapq.heappush(heap, (t_r, d))
            if trace is not None:
                trace.array_ops.append((d, 0.0, t_r))
    channel_free = 0.0
    while heap:
        ready, d = heapq.heappop(heap)
        n = ops[d][nxt[d]]
        nxt[d] += 1
        start = max(channel_free, ready)
        channel_free = start + n * xfer
        if trace is not None:
            trace.transfers.append((d, start, channel_free))
        if nxt[d] < len(ops[d]):
            heapq.heappush(heap, (channel_free + t_r, d))
            if trace is not None:
                trace.array_ops.append((d, channel_free, channel_free + t_r))
    return channel_free


@lru_cache(maxsize=256)
def _channel_read_cached(pages: int, cfg: SsdConfig) -> float:
    return _channel_read(pages, cfg)


def channel_pages(nbytes: int, cfg: SsdConfig) -> list[int]:
    pages = -(-nbytes // cfg.page_size)
    base, extra = divmod(pages, cfg.channels)
    return [base + (1 if c < extra else 0) for c in range(cfg.channels)]


def sim_sequential_read(nbytes: int, cfg: SsdConfig) -> float:
    """Completion time (µs) of a striped sequential read of ``nbytes``.

    Channels run independently; the result is the slowest channel.  Channels
    with equal page counts behave identically, so each distinct count is
    simulated once.
    """
    counts = channel_pages(nbytes, cfg)
    return max((_channel_read_cached(n, cfg) for n in set(counts)), default=0.0)


def isp_stream_time(db_bytes: int, cfg: SsdConfig) -> float:
    """Time (µs) for the in-storage step to stream ``db_bytes`` of database.

    Flash supply is simulated; the accelerator (one k-mer per cycle per
    channel) and the internal-DRAM budget can only slow it down.  A DRAM
    demand above ``internal_dram_bw`` throttles the rate proportionally.
    """
    if db_bytes <= 0:
        return 0.0
    t = sim_sequential_read(db_bytes, cfg)
    rate = db_bytes / t * 1e6
    rate = min(rate, cfg.channels * cfg.isp_clock_hz * KMER_WORD_BYTES)
    demand = rate * DRAM_DEMAND_RATIO
    if demand > cfg.internal_dram_bw:
        rate *= cfg.internal_dram_bw / demand
    return db_bytes / rate * 1e6


def sequential_write_bw(cfg: SsdConfig) -> float:
    """Host-to-flash sequential write rate (programs overlap across all planes)."""
    program = cfg.total_blocks // cfg.blocks_per_plane * cfg.page_size / (cfg.t_prog_us * 1e-6)
    return min(cfg.interface_bw, cfg.internal_bw, program)


# --------------------------------------------------------------------------
# host/SSD pipeline


@dataclass(frozen=True)
class Event:
    stage: str
    bucket: int
    start: float
    end: float


@dataclass
class PipelineTimeline:
    events: list[Event] = field(default_factory=list)
    commands: list[tuple[str, float, float]] = field(default_factory=list)

    @property
    def total(self) -> float:
        ends = [e.end for e in self.events] + [c[2] for c in self.commands]
        return max(ends, default=0.0)

    def busy(self, stage: str) -> float:
        return sum(e.end - e.start for e in self.events if e.stage == stage)

    def utilization(self, stage: str) -> float:
        return self.busy(stage) / self.total if self.total else 0.0

    def by_bucket(self, bucket: int) -> dict[str, Event]:
        return {e.stage: e for e in self.events if e.bucket == bucket}


def _batches(nbytes: int, batch: int) -> list[int]:
    if nbytes <= 0:
        return [0]
    full, rest = divmod(nbytes, batch)
    return [batch] * full + ([rest] if rest else [])


def sim_pipeline(
    buckets: Sequence[int],
    rates: dict[str, float],
    overlap: bool,
    retrieve_bytes: int = 0,
    batch_bytes: int = BATCH_BYTES,
) -> PipelineTimeline:
    """Schedule sort (host), transfer (interface) and intersect (ISP) per bucket.

    ``rates`` holds ``sort``, ``interface`` and ``isp`` in bytes of query data
    per second (``isp`` folds in the database streaming that bucket needs) and
    optionally ``retrieve``.  Serialized mode runs every stage of every bucket
    back to back.  Overlapped mode sorts bucket i+1 while bucket i is in
    flight and moves each bucket in batches through two device buffers, so a
    batch transfer overlaps the intersection of the previous batch.
    """
    for key in ("sort", "interface", "isp"):
        if not rates.get(key, 0) > 0:
            raise SimError(f"rate {key!r} must be positive")
    us = lambda n, r: n / r * 1e6  # noqa: E731
    tl = PipelineTimeline()
    t0 = COMMAND_LATENCY_US
    tl.commands.append(("init", 0.0, t0))
    if not overlap:
        t = t0
        for i, size in enumerate(buckets):
            for stage, rate in (("sort", rates["sort"]), ("transfer", rates["interface"]), ("intersect", rates["isp"])):
                end = t + us(size, rate)
                tl.events.append(Event(stage, i, t, end))
                t = end
            tl.commands.append(("step", t, t + COMMAND_LATENCY_US))
            t += COMMAND_LATENCY_US
        isp_free = t
    else:
        sort_free = t0
        link_free = t0
        isp_free = t0
        prev_transfer_start = t0
        for i, size in enumerate(buckets):
            # one-bucket lookahead: the host holds at most one sorted bucket
            # that has not started moving
            s_start = max(sort_free, prev_transfer_start if i > 0 else t0)
            s_end = s_start + us(size, rates["sort"])
            sort_free = s_end
            tl.events.append(Event("sort", i, s_start, s_end))
            step_at = max(s_end, link_free)
            tl.commands.append(("step", step_at, step_at + COMMAND_LATENCY_US))
            ready = step_at + COMMAND_LATENCY_US
            x_ends: list[float] = []
            i_ends: list[float] = []
            x_first = i_first = None
            for j, b in enumerate(_batches(size, batch_bytes)):
                # batch j reuses the buffer freed by batch j-2
                slot_free = i_ends[j - 2] if j >= 2 else 0.0
                xs = max(ready, link_free, slot_free)
                xe = xs + us(b, rates["interface"])
                link_free = xe
                x_ends.append(xe)
                is_ = max(xe, isp_free)
                ie = is_ + us(b, rates["isp"])
                isp_free = ie
                i_ends.append(ie)
                x_first = xs if x_first is None else x_first
                i_first = is_ if i_first is None else i_first
            prev_transfer_start = x_first
            tl.events.append(Event("transfer", i, x_first, x_ends[-1]))
            tl.events.append(Event("intersect", i, i_first, i_ends[-1]))
    if retrieve_bytes > 0 or buckets:
        r_rate = rates.get("retrieve", rates["isp"])
        end = isp_free + us(retrieve_bytes, r_rate)
        tl.events.append(Event("retrieve", -1, isp_free, end))
        isp_free = end
    tl.commands.append(("write", isp_free, isp_free + COMMAND_LATENCY_US))
    return tl


# --------------------------------------------------------------------------
# multi-sample


@dataclass
class MultiSampleResult:
    samples: int
    passes: int
    db_bytes_read: int
    total_us: float
    baseline_db_bytes_read: int
    baseline_total_us: float
    timeline: PipelineTimeline

    @property
    def speedup(self) -> float:
        return self.baseline_total_us / self.total_us


def sim_multi_sample(
    samples: int,
    buffer_capacity: int,
    db_bytes: int,
    cfg: SsdConfig,
    sample_bytes: int = 256 * MIB,
    sort_rate: float = 1e9,
) -> MultiSampleResult:
    """Buffer the prepared k-mers of up to ``buffer_capacity`` samples, then
    stream the database once for all of them; the baseline streams it once
    per sample."""
    if samples < 1 or buffer_capacity < 1:
        raise SimError("samples and buffer capacity must be at least 1")
    q = sample_bytes / sort_rate * 1e6
    d = isp_stream_time(db_bytes, cfg)
    passes = -(-samples // buffer_capacity)
    tl = PipelineTimeline()
    t = 0.0
    done = 0
    for p in range(passes):
        n = min(buffer_capacity, samples - done)
        for s in range(done, done + n):
            tl.events.append(Event("sort", s, t, t + q))
            t += q
        tl.events.append(Event("intersect", p, t, t + d))
        t += d
        done += n
    return MultiSampleResult(
        samples=samples,
        passes=passes,
        db_bytes_read=db_bytes * passes,
        total_us=t,
        baseline_db_bytes_read=db_bytes * samples,
        baseline_total_us=samples * (q + d),
        timeline=tl,
    )


# --------------------------------------------------------------------------
# experiments


@dataclass(frozen=True)
class Workload:
    query_bytes: int = 1 * GIB
    db_bytes: int = 8 * GIB
    n_buckets: int = 64
    sort_rate: float = 1.0e9
    retrieve_bytes: int = 16 * MIB
    sample_bytes: int = 256 * MIB


@dataclass
class ExperimentResult:
    scenario: str
    timeline_rows: list[tuple[str, str, str, float, float]] = field(default_factory=list)
    summary_rows: list[tuple[str, str, float, float]] = field(default_factory=list)

    def timeline_csv(self) -> str:
        return _csv(("scenario", "parameter", "stage", "start_us", "end_us"), self.timeline_rows)

    def summary_csv(self) -> str:
        return _csv(("scenario", "parameter", "total_us", "speedup_vs_baseline"), self.summary_rows)

    def summary(self) -> dict[str, tuple[float, float]]:
        return {p: (t, s) for _, p, t, s in self.summary_rows}


def _csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([f"{v:.3f}" if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def _equal_buckets(total: int, n: int) -> list[int]:
    base, extra = divmod(total, n)
    return [base + (1 if i < extra else 0) for i in range(n)]


def _rates(cfg: SsdConfig, wl: Workload, db_bytes: int | None = None) -> dict[str, float]:
    d = isp_stream_time(db_bytes if db_bytes is not None else wl.db_bytes, cfg)
    return {"sort": wl.sort_rate, "interface": cfg.interface_bw, "isp": wl.query_bytes / d * 1e6}


def megis_time(cfg: SsdConfig, wl: Workload, db_bytes: int | None = None) -> PipelineTimeline:
    return sim_pipeline(
        _equal_buckets(wl.query_bytes, wl.n_buckets), _rates(cfg, wl, db_bytes), True, wl.retrieve_bytes
    )


def host_baseline_us(cfg: SsdConfig, wl: Workload, db_bytes: int) -> float:
    """Host-side streaming analysis that prepares the queries while it pulls
    the whole database through the external interface."""
    flash = db_bytes / sim_sequential_read(db_bytes, cfg) * 1e6 if db_bytes else cfg.interface_bw
    return max(wl.query_bytes / wl.sort_rate * 1e6, db_bytes / min(cfg.interface_bw, flash) * 1e6)


def _add_timeline(res: ExperimentResult, param: str, tl: PipelineTimeline) -> None:
    for e in tl.events:
        res.timeline_rows.append((res.scenario, param, e.stage, e.start, e.end))


def _scenario_overlap(cfg, wl, params):
    res = ExperimentResult("overlap")
    buckets = _equal_buckets(wl.query_bytes, wl.n_buckets)
    rates = _rates(cfg, wl)
    ser = sim_pipeline(buckets, rates, False, wl.retrieve_bytes)
    ovl = sim_pipeline(buckets, rates, True, wl.retrieve_bytes)
    _add_timeline(res, "overlapped", ovl)
    _add_timeline(res, "serialized", ser)
    res.summary_rows.append(("overlap", "overlapped", ovl.total, ser.total / ovl.total))
    res.summary_rows.append(("overlap", "serialized", ser.total, 1.0))
    return res


def _scenario_db_size(cfg, wl, params):
    res = ExperimentResult("db_size")
    for mult in params.get("multipliers", (1, 2, 3)):
        db = int(wl.db_bytes * mult)
        tl = megis_time(cfg, wl, db)
        _add_timeline(res, f"{mult}x", tl)
        res.summary_rows.append(("db_size", f"{mult}x", tl.total, host_baseline_us(cfg, wl, db) / tl.total))
    return res


def _scenario_channels(cfg, wl, params):
    res = ExperimentResult("channels")
    sweep = list(params.get("channels", (4, 8, 16)))
    base = None
    for ch in sweep:
        t = isp_stream_time(wl.db_bytes, replace(cfg, channels=ch))
        base = base or t
        res.timeline_rows.append(("channels", str(ch), "intersect", 0.0, t))
        res.summary_rows.append(("channels", str(ch), t, base / t))
    return res


def _scenario_ssd_count(cfg, wl, params):
    """The database is split disjointly over D devices that stream in parallel."""
    res = ExperimentResult("ssd_count")
    base = None
    for n in params.get("ssd_counts", (1, 2, 4)):
        share = -(-wl.db_bytes // n)
        tl = megis_time(cfg, wl, share)
        base = base or tl.total
        _add_timeline(res, str(n), tl)
        res.summary_rows.append(("ssd_count", str(n), tl.total, base / tl.total))
    return res


def swap_penalty_us(cfg: SsdConfig, extracted: int, budget: int) -> float:
    """Page swapping of an unbucketed k-mer set larger than host memory.

    Every pass of an out-of-core sort evicts the overflow and faults it back
    in; the number of passes grows with log2(extracted / budget).
    """
    overflow = max(0, extracted - budget)
    if overflow == 0:
        return 0.0
    passes = math.ceil(math.log2(extracted / budget)) + 1
    read_bw = min(cfg.interface_bw, cfg.internal_bw)
    return passes * overflow * (1 / sequential_write_bw(cfg) + 1 / read_bw) * 1e6


def spill_cost_us(cfg: SsdConfig, bucket_sizes: Sequence[int], budget: int) -> float:
    """Bucketed plan: spilled buckets are written once sequentially and read once."""
    plan = plan_residency(bucket_sizes, budget)
    spilled = sum(bucket_sizes[i] for i in plan.spilled)
    read_bw = min(cfg.interface_bw, cfg.internal_bw)
    return spilled * (1 / sequential_write_bw(cfg) + 1 / read_bw) * 1e6


def _scenario_host_dram(cfg, wl, params):
    res = ExperimentResult("host_dram")
    buckets = _equal_buckets(wl.query_bytes, wl.n_buckets)
    for frac in params.get("fractions", (0.25, 0.5, 1.0, 2.0)):
        budget = int(wl.query_bytes * frac)
        tl = megis_time(cfg, wl)
        spill = spill_cost_us(cfg, buckets, budget)
        total = tl.total + spill
        baseline = tl.total + swap_penalty_us(cfg, wl.query_bytes, budget)
        param = f"{frac}x"
        _add_timeline(res, param, tl)
        if spill:
            res.timeline_rows.append(("host_dram", param, "spill", tl.total, total))
        res.summary_rows.append(("host_dram", param, total, baseline / total))
    return res


def _scenario_multi_sample(cfg, wl, params):
    res = ExperimentResult("multi_sample")
    max_s = int(params.get("max_samples", 16))
    cap = int(params.get("buffer_capacity", max_s))
    for s in range(1, max_s + 1):
        r = sim_multi_sample(s, cap, wl.db_bytes, cfg, wl.sample_bytes, wl.sort_rate)
        _add_timeline(res, str(s), r.timeline)
        res.summary_rows.append(("multi_sample", str(s), r.total_us, r.speedup))
    return res


SCENARIOS = {
    "overlap": _scenario_overlap,
    "db_size": _scenario_db_size,
    "channels": _scenario_channels,
    "ssd_count": _scenario_ssd_count,
    "host_dram": _scenario_host_dram,
    "multi_sample": _scenario_multi_sample,
}


def run_experiment(scenario: str, cfg: SsdConfig | None = None, workload: Workload | None = None, **params) -> ExperimentResult:
    try:
        fn = SCENARIOS[scenario]
    except KeyError:
        raise UnknownScenario(f"unknown scenario {scenario!r}; choose from {sorted(SCENARIOS)}") from None
    return fn(cfg or preset("ssd-c"), workload or Workload(), params)
