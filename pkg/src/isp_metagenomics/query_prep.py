"""Query preparation: k-mer extraction, bucketing, sorting and exclusion.

Query k-mers are split into lexicographic buckets so that each bucket can be
sorted, shipped and intersected while the next one is still being sorted.
Buckets that do not fit the host DRAM budget are spilled to append-only
files of little-endian 128-bit records and read back for sorting.
"""

from __future__ import annotations

import bisect
import heapq
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import encoding as enc

RECORD_BYTES = 16
DEFAULT_BUCKETS = 512
PRELIM_FACTOR = 8
CALIBRATION_SAMPLE = 1_000_000
SPILL_BUFFER_BYTES = 1 << 20

QUERY_MAGIC = b"MGQS"
QUERY_VERSION = 1
_QHEADER = struct.Struct("<4sHHQI")  # magic, version, k, total distinct, bucket count


class QueryPrepError(ValueError):
    pass


class EmptySample(QueryPrepError):
    pass


class BadRange(QueryPrepError):
    pass


class BudgetTooSmall(QueryPrepError):
    pass


# --------------------------------------------------------------------------
# read ingestion


def read_sequences(path: str | os.PathLike) -> Iterator[str]:
    """Yield sequences from a plain-text FASTA or FASTQ file.

    The format is sniffed from the first non-blank character.  FASTQ quality
    lines are skipped.
    """
    with open(path, "rt", encoding="ascii") as fh:
        first = ""
        for line in fh:
            if line.strip():
                first = line
                break
        if not first:
            return
        if first.startswith("@"):
            yield from _fastq_body(first, fh)
        elif first.startswith(">"):
            yield from _fasta_body(fh)
        else:
            raise QueryPrepError(f"{path}: not FASTA or FASTQ")


def _fasta_body(fh) -> Iterator[str]:
    buf: list[str] = []
    for line in fh:
        if line.startswith(">"):
            yield "".join(buf)
            buf = []
        else:
            buf.append(line.strip())
    yield "".join(buf)


def _fastq_body(header: str, fh) -> Iterator[str]:
    while header:
        seq = fh.readline().strip()
        plus = fh.readline()
        fh.readline()
        if not plus.startswith("+"):
            raise QueryPrepError("malformed FASTQ record")
        yield seq
        header = fh.readline()
        while header and not header.strip():
            header = fh.readline()


# --------------------------------------------------------------------------
# extraction


def extract_words(reads: Iterable[str], k: int, canonical: bool = False):
    """All ambiguity-free k-mers of ``reads`` as numpy ``(hi, lo)`` arrays.

    Reads are joined with an ``N`` separator so no window spans two reads.
    """
    if k < 1:
        raise QueryPrepError("k must be >= 1")
    joined = "N".join(reads)
    codes = enc.sequence_codes(joined)
    hi, lo, _ = enc.window_words(codes, k)
    if canonical:
        hi, lo = enc.canonical_words(hi, lo, k)
    return hi, lo


def extract_kmers(reads: Iterable[str], k: int, canonical: bool = False) -> Iterator[enc.PackedKmer]:
    hi, lo = extract_words(reads, k, canonical)
    for bits in enc.words_to_ints(hi, lo):
        yield enc.PackedKmer(bits, k)


# --------------------------------------------------------------------------
# buckets


@dataclass(frozen=True)
class BucketSpec:
    """Lexicographic bucket ranges; ``boundaries[i]`` is bucket ``i``'s inclusive lower bound."""

    k: int
    boundaries: tuple[int, ...]

    def __post_init__(self) -> None:
        b = self.boundaries
        if not b or b[0] != 0:
            raise QueryPrepError("first boundary must be the minimum k-mer")
        if any(x >= y for x, y in zip(b, b[1:])):
            raise QueryPrepError("boundaries must be strictly increasing")

    @property
    def count(self) -> int:
        return len(self.boundaries)

    def upper(self, i: int) -> int | None:
        """Exclusive upper bound of bucket ``i`` (``None`` for the last)."""
        return self.boundaries[i + 1] if i + 1 < self.count else None


def _preliminary_boundaries(k: int, n: int) -> list[int]:
    space = 4**k
    shift = enc.WORD_BITS - 2 * k
    seen: list[int] = []
    for i in range(n):
        v = -(-i * space // n)  # ceil: smallest k-mer at or above the equal-range cut
        if v < space and (not seen or v > seen[-1]):
            seen.append(v)
    return [v << shift for v in seen]


def calibrate_buckets(sample: Iterable[int], k: int, target: int = DEFAULT_BUCKETS) -> BucketSpec:
    """Equal-range preliminary buckets merged down to ``target``.

    ``PRELIM_FACTOR * target`` equal ranges are filled from the sample; the
    adjacent pair with the smallest combined mass is merged until ``target``
    buckets remain (ties resolved towards the lower index).  If the k-mer
    space has fewer than ``target`` distinct ranges every range is kept.
    """
    if target < 1:
        raise QueryPrepError("target bucket count must be >= 1")
    values = [v.bits if isinstance(v, enc.PackedKmer) else v for v in sample]
    if not values:
        raise EmptySample("cannot calibrate buckets from an empty sample")
    prelim = _preliminary_boundaries(k, PRELIM_FACTOR * target)
    mass = [0] * len(prelim)
    for v in values[:CALIBRATION_SAMPLE]:
        mass[bisect.bisect_right(prelim, v) - 1] += 1
    return BucketSpec(k, tuple(_merge_to_target(prelim, mass, target)))


def calibrate_words(hi: np.ndarray, lo: np.ndarray, k: int, target: int = DEFAULT_BUCKETS) -> BucketSpec:
    """Vectorised :func:`calibrate_buckets` over the first sample prefix."""
    if hi.size == 0:
        raise EmptySample("cannot calibrate buckets from an empty sample")
    hi, lo = hi[:CALIBRATION_SAMPLE], lo[:CALIBRATION_SAMPLE]
    prelim = _preliminary_boundaries(k, PRELIM_FACTOR * target)
    idx = _bucket_index_words(hi, lo, prelim)
    mass = np.bincount(idx, minlength=len(prelim)).tolist()
    return BucketSpec(k, tuple(_merge_to_target(prelim, mass, target)))


def _merge_to_target(bounds: list[int], mass: list[int], target: int) -> list[int]:
    n = len(bounds)
    if n <= target:
        return list(bounds)
    # doubly linked list of live buckets + lazy heap of adjacent pairs
    nxt = list(range(1, n)) + [-1]
    prv = [-1] + list(range(n - 1))
    alive = [True] * n
    m = list(mass)
    version = [0] * n
    heap = [(m[i] + m[i + 1], i, 0, 0) for i in range(n - 1)]
    heapq.heapify(heap)
    live = n
    while live > target:
        s, i, vi, vj = heapq.heappop(heap)
        j = nxt[i] if alive[i] else -1
        if not alive[i] or j < 0 or version[i] != vi or version[j] != vj:
            continue
        # merge j into i
        m[i] += m[j]
        alive[j] = False
        nxt[i] = nxt[j]
        if nxt[j] >= 0:
            prv[nxt[j]] = i
        version[i] += 1
        live -= 1
        if prv[i] >= 0:
            p = prv[i]
            heapq.heappush(heap, (m[p] + m[i], p, version[p], version[i]))
        if nxt[i] >= 0:
            q = nxt[i]
            heapq.heappush(heap, (m[i] + m[q], i, version[i], version[q]))
    return [bounds[i] for i in range(n) if alive[i]]


def assign_bucket(km: int | enc.PackedKmer, spec: BucketSpec) -> int:
    bits = km.bits if isinstance(km, enc.PackedKmer) else km
    return bisect.bisect_right(spec.boundaries, bits) - 1


def _bucket_index_words(hi: np.ndarray, lo: np.ndarray, bounds: Sequence[int]) -> np.ndarray:
    bhi = np.array([b >> 64 for b in bounds], dtype=np.uint64)
    blo = np.array([b & 0xFFFF_FFFF_FFFF_FFFF for b in bounds], dtype=np.uint64)
    if not blo.any():
        # boundaries aligned to the high word: compare on hi alone
        return np.searchsorted(bhi, hi, side="right") - 1
    # general case: locate by hi, then step back where lo falls below the bound
    idx = np.searchsorted(bhi, hi, side="right") - 1
    while True:
        back = (idx > 0) & (bhi[idx] == hi) & (lo < blo[idx])
        if not back.any():
            return idx
        idx = idx - back


def assign_buckets_words(hi: np.ndarray, lo: np.ndarray, spec: BucketSpec) -> np.ndarray:
    return _bucket_index_words(hi, lo, spec.boundaries)


# --------------------------------------------------------------------------
# sort / count / exclude


@dataclass
class KmerBucket:
    index: int
    kmers: list[int] = field(default_factory=list)
    pinned: bool = True


def sort_and_count(bucket: KmerBucket | Sequence[int]) -> list[tuple[int, int]]:
    kmers = bucket.kmers if isinstance(bucket, KmerBucket) else bucket
    out: list[tuple[int, int]] = []
    for v in sorted(kmers):
        if out and out[-1][0] == v:
            out[-1] = (v, out[-1][1] + 1)
        else:
            out.append((v, 1))
    return out


def exclude_by_frequency(counted: Sequence[tuple[int, int]], min_c: int = 1, max_c: float = math.inf):
    if not 1 <= min_c <= max_c:
        raise BadRange(f"need 1 <= min_count <= max_count, got {min_c}..{max_c}")
    return [(v, c) for v, c in counted if min_c <= c <= max_c]


# --------------------------------------------------------------------------
# residency


@dataclass(frozen=True)
class ResidencyPlan:
    pinned: tuple[bool, ...]
    spill_buffer_bytes: int

    @property
    def pinned_count(self) -> int:
        return sum(self.pinned)

    @property
    def spilled(self) -> list[int]:
        return [i for i, p in enumerate(self.pinned) if not p]


def residency_cost(sizes: Sequence[int], n_pinned: int, spill_buffer: int) -> int:
    return sum(sizes[:n_pinned]) + spill_buffer * (len(sizes) - n_pinned)


def plan_residency(sizes: Sequence[int], host_budget: int, spill_buffer: int = SPILL_BUFFER_BYTES) -> ResidencyPlan:
    """Pin the longest bucket prefix that fits the budget.

    Every spilled bucket reserves ``spill_buffer`` bytes of host memory for
    its sequential-write buffer.
    """
    if sizes and host_budget < max(sizes):
        raise BudgetTooSmall(f"budget {host_budget} B is below the largest bucket ({max(sizes)} B)")
    best = None
    for j in range(len(sizes), -1, -1):
        if residency_cost(sizes, j, spill_buffer) <= host_budget:
            best = j
            break
    if best is None:
        raise BudgetTooSmall(f"budget {host_budget} B cannot hold the spill buffers")
    return ResidencyPlan(tuple(i < best for i in range(len(sizes))), spill_buffer)


# --------------------------------------------------------------------------
# spill files


def append_records(path: str | os.PathLike, hi: np.ndarray, lo: np.ndarray) -> None:
    rec = np.empty(hi.size, dtype=[("lo", "<u8"), ("hi", "<u8")])
    rec["lo"] = lo
    rec["hi"] = hi
    with open(path, "ab") as fh:
        fh.write(rec.tobytes())


def read_records(path: str | os.PathLike):
    rec = np.fromfile(path, dtype=[("lo", "<u8"), ("hi", "<u8")])
    return rec["hi"].astype(np.uint64), rec["lo"].astype(np.uint64)


# --------------------------------------------------------------------------
# prepared query set


@dataclass
class QueryKmerSet:
    k: int
    spec: BucketSpec
    buckets: list[list[tuple[int, int]]]
    extracted: int = 0
    spilled_buckets: tuple[int, ...] = ()

    @property
    def total_distinct(self) -> int:
        return sum(len(b) for b in self.buckets)

    def kmers(self) -> Iterator[int]:
        for b in self.buckets:
            for v, _ in b:
                yield v

    def bucket_kmers(self, i: int) -> list[int]:
        return [v for v, _ in self.buckets[i]]

    def bucket_sizes(self) -> list[int]:
        return [RECORD_BYTES * len(b) for b in self.buckets]

    def to_bytes(self) -> bytes:
        parts = [_QHEADER.pack(QUERY_MAGIC, QUERY_VERSION, self.k, self.total_distinct, self.spec.count)]
        for lower, b in zip(self.spec.boundaries, self.buckets):
            parts.append(struct.pack("<QQQ", lower & 0xFFFF_FFFF_FFFF_FFFF, lower >> 64, len(b)))
        for b in self.buckets:
            for v, c in b:
                parts.append(v.to_bytes(16, "little"))
                parts.append(struct.pack("<I", min(c, 0xFFFF_FFFF)))
        return b"".join(parts)

    def write(self, path: str | os.PathLike) -> None:
        Path(path).write_bytes(self.to_bytes())


def prepare_queries(
    reads: Iterable[str],
    k: int,
    n_buckets: int = DEFAULT_BUCKETS,
    min_count: int = 1,
    max_count: float = math.inf,
    dram_budget: int | None = None,
    spill_dir: str | os.PathLike | None = None,
    canonical: bool = False,
) -> QueryKmerSet:
    """Extract, bucket, sort, count and filter the k-mers of a read set."""
    if not 1 <= min_count <= max_count:
        raise BadRange(f"need 1 <= min_count <= max_count, got {min_count}..{max_count}")
    hi, lo = extract_words(reads, k, canonical)
    if hi.size == 0:
        spec = BucketSpec(k, (0,))
        return QueryKmerSet(k, spec, [[]], 0)
    spec = calibrate_words(hi, lo, k, n_buckets)
    idx = assign_buckets_words(hi, lo, spec)
    order = np.argsort(idx, kind="stable")
    hi, lo, idx = hi[order], lo[order], idx[order]
    cuts = np.searchsorted(idx, np.arange(spec.count + 1))
    sizes = [RECORD_BYTES * int(cuts[i + 1] - cuts[i]) for i in range(spec.count)]

    plan = plan_residency(sizes, dram_budget) if dram_budget is not None else None
    spilled = set(plan.spilled) if plan else set()
    tmp = None
    if spilled:
        if spill_dir is None:
            tmp = tempfile.TemporaryDirectory(prefix="kmer-spill-")
            spill_dir = tmp.name
        for i in sorted(spilled):
            # buffered sequential appends, one flush per filled buffer
            path = Path(spill_dir) / f"bucket_{i:05d}.bin"
            path.unlink(missing_ok=True)
            step = max(1, plan.spill_buffer_bytes // RECORD_BYTES)
            for s in range(int(cuts[i]), int(cuts[i + 1]), step):
                e = min(s + step, int(cuts[i + 1]))
                append_records(path, hi[s:e], lo[s:e])

    buckets: list[list[tuple[int, int]]] = []
    try:
        for i in range(spec.count):
            if i in spilled:
                bhi, blo = read_records(Path(spill_dir) / f"bucket_{i:05d}.bin")
            else:
                bhi, blo = hi[cuts[i]:cuts[i + 1]], lo[cuts[i]:cuts[i + 1]]
            uhi, ulo, counts = enc.unique_words(bhi, blo, return_counts=True)
            keep = (counts >= min_count) & (counts <= max_count)
            vals = enc.words_to_ints(uhi[keep], ulo[keep])
            buckets.append(list(zip(vals, counts[keep].tolist())))
    finally:
        if tmp is not None:
            tmp.cleanup()
    return QueryKmerSet(k, spec, buckets, int(hi.size), tuple(sorted(spilled)))
