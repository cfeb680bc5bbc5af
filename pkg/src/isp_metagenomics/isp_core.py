"""Streaming kernels: sorted intersection, KSS taxID retrieval, presence calls.

Hit accounting (shared by every retrieval path):

* longest level: each intersecting k-mer found in the table charges one hit
  to each of its taxIDs;
* shorter level ``k``: each distinct ``k``-prefix of the intersection that is
  a table key charges one hit to every taxID on that key that did not already
  match, at some longer level, through an intersecting k-mer with the same
  prefix.  A slot is charged once however many k-mers share it.
"""

from __future__ import annotations

import operator
from collections import defaultdict
from dataclasses import dataclass, field
from itertools import chain
from typing import Callable, Iterable, Iterator, Sequence

from . import encoding as enc
from .refdb import KssTables, SketchTables
from .tst import TernaryTree

BATCH_BYTES = 1 << 20
RECORD_BYTES = 16
DEFAULT_TAU = 0.2
DEFAULT_INTERSECTION_BUDGET = 1 << 30


class IspError(ValueError):
    pass


class UnsortedInput(IspError):
    pass


class BadThreshold(IspError):
    pass


# --------------------------------------------------------------------------
# intersection


@dataclass
class IntersectionSet:
    kmers: list[int] = field(default_factory=list)
    provenance: list[tuple[int, int]] = field(default_factory=list)  # (bucket, matches)
    comparisons: int = 0

    def __len__(self) -> int:
        return len(self.kmers)

    def __iter__(self) -> Iterator[int]:
        return iter(self.kmers)


def _ordered(values: Iterable[int], name: str, last: int | None = None) -> Iterator[int]:
    """Iterator over ``values`` that rejects any non-increasing step.

    Lists are checked up front at C speed; other iterables are checked as
    they stream.
    """
    if isinstance(values, (list, tuple)):
        if values and (
            (last is not None and values[0] <= last) or not all(map(operator.lt, values, values[1:]))
        ):
            raise UnsortedInput(f"{name} stream is not strictly increasing")
        return iter(values)
    return _checked(values, name, last)


def _checked(values: Iterable[int], name: str, last: int | None) -> Iterator[int]:
    for v in values:
        if last is not None and v <= last:
            raise UnsortedInput(f"{name} stream is not strictly increasing")
        last = v
        yield v


def stream_intersect(query: Iterable[int], db: Iterable[int]) -> IntersectionSet:
    """Two-pointer merge-join of two strictly increasing streams."""
    out = IntersectionSet()
    q_it, d_it = _ordered(query, "query"), _ordered(db, "database")
    out.comparisons = _merge(q_it, d_it, next(q_it, None), next(d_it, None), out.kmers)[0]
    return out


def _merge(q_it, d_it, q, d, sink: list):
    """Core loop; returns ``(comparisons, pending db value)``.

    The loop ends when either stream runs dry, leaving the db cursor on the
    first value not yet consumed.
    """
    comparisons = 0
    append = sink.append
    while q is not None and d is not None:
        comparisons += 1
        if q == d:
            append(q)
            q, d = next(q_it, None), next(d_it, None)
        elif q > d:
            d = next(d_it, None)
        else:
            q = next(q_it, None)
    return comparisons, d


def iter_batches(records: Sequence[int], batch_bytes: int = BATCH_BYTES) -> Iterator[list[int]]:
    """Consecutive record runs of at most ``batch_bytes`` (never splitting a record)."""
    per = max(1, batch_bytes // RECORD_BYTES)
    for i in range(0, len(records), per):
        yield list(records[i:i + per])


def intersect_buckets(buckets: Sequence[Sequence[int]], db: Iterable[int], batch_bytes: int = BATCH_BYTES) -> IntersectionSet:
    """Intersect bucketed query k-mers against one database stream.

    Buckets arrive in index order and are fed in batches; the database cursor
    only ever moves forward, so the database is read once across all buckets.
    """
    out = IntersectionSet()
    d_it = _ordered(db, "database")
    d = next(d_it, None)
    last = None
    for bi, bucket in enumerate(buckets):
        bucket = list(bucket)
        q_it = chain.from_iterable(iter_batches(_ordered_list(bucket, last), batch_bytes))
        before = len(out.kmers)
        n, d = _merge(q_it, d_it, next(q_it, None), d, out.kmers)
        out.comparisons += n
        if bucket:
            last = bucket[-1]
        out.provenance.append((bi, len(out.kmers) - before))
    return out


def _ordered_list(values: list[int], last: int | None) -> list[int]:
    _ordered(values, "query", last)
    return values


# --------------------------------------------------------------------------
# taxID retrieval


@dataclass
class TaxHitTable:
    levels: tuple[int, ...]
    hits: dict[int, dict[int, int]] = field(default_factory=dict)

    def add(self, taxid: int, k: int, n: int = 1) -> None:
        self.hits.setdefault(taxid, {}).setdefault(k, 0)
        self.hits[taxid][k] += n

    def as_dict(self) -> dict[int, dict[int, int]]:
        return {t: dict(sorted(v.items(), reverse=True)) for t, v in sorted(self.hits.items())}

    def __eq__(self, other) -> bool:
        return isinstance(other, TaxHitTable) and self.as_dict() == other.as_dict()

    def weighted(self, taxid: int) -> float:
        k_max = self.levels[0]
        return sum(n * k / k_max for k, n in self.hits.get(taxid, {}).items())


class KssRetriever:
    """One forward pass over the KSS tables driven by the sorted intersection.

    Per shorter level an index generator watches consecutive longest-table
    entries; a prefix change closes the current slot and moves that level's
    cursor to the next one.  Closing a slot charges its hits and hands its
    full taxID set to the enclosing slot of the next shorter level.
    """

    def __init__(self, kss: KssTables):
        self.kss = kss
        self.levels = kss.levels
        self.masks = [enc.prefix_mask(k) for k in self.levels]
        self.table = TaxHitTable(self.levels)
        self.cursor_trace: list[list[int]] = [[] for _ in self.levels]

    def run(self, inter: Iterable[int]) -> TaxHitTable:
        kss, levels, masks = self.kss, self.levels, self.masks
        L = len(levels)
        inter_list = list(_ordered(list(inter), "intersection"))
        # distinct intersection prefixes per shorter level, consumed in order
        prefix_lists = [None] + [_distinct([q & masks[j] for q in inter_list]) for j in range(1, L)]
        pcur = [0] * L
        qcur = 0
        n_q = len(inter_list)

        slot_idx = [-1] * L
        cur_prefix = [None] * L
        full_acc: list[set[int]] = [set() for _ in range(L)]
        matched_acc: list[set[int]] = [set() for _ in range(L)]
        matched = [False] * L

        def close(j: int) -> None:
            full = full_acc[j] | set(kss.slots[levels[j]][slot_idx[j]])
            if matched[j]:
                for t in full - matched_acc[j]:
                    self.table.add(t, levels[j])
            if j + 1 < L:
                full_acc[j + 1] |= full
                if matched[j]:
                    matched_acc[j + 1] |= full
            full_acc[j] = set()
            matched_acc[j] = set()

        def open_(j: int, p: int) -> None:
            slot_idx[j] += 1
            cur_prefix[j] = p
            self.cursor_trace[j].append(slot_idx[j])
            plist = prefix_lists[j]
            c = pcur[j]
            while c < len(plist) and plist[c] < p:
                c += 1
            pcur[j] = c
            matched[j] = c < len(plist) and plist[c] == p

        for x, ids in zip(kss.kmers, kss.taxids):
            # deepest shorter level whose prefix changed; every longer one changed too
            changed = 0
            for j in range(1, L):
                if cur_prefix[j] != (x & masks[j]):
                    changed = j
            if changed:
                if cur_prefix[1] is not None:
                    for j in range(1, changed + 1):
                        close(j)
                for j in range(1, changed + 1):
                    open_(j, x & masks[j])
            while qcur < n_q and inter_list[qcur] < x:
                qcur += 1
            hit = qcur < n_q and inter_list[qcur] == x
            if hit:
                for t in ids:
                    self.table.add(t, levels[0])
            if L > 1:
                full_acc[1] |= set(ids)
                if hit:
                    matched_acc[1] |= set(ids)
        if kss.kmers:
            for j in range(1, L):
                close(j)
        return self.table


def _distinct(sorted_vals: list[int]) -> list[int]:
    return list(dict.fromkeys(sorted_vals))


def retrieve_taxids(inter: Iterable[int], kss: KssTables) -> TaxHitTable:
    return KssRetriever(kss).run(inter)


def hits_from_lookups(
    inter: Iterable[int],
    levels: tuple[int, ...],
    lookup: Callable[[int], dict[int, tuple[int, ...]]],
) -> TaxHitTable:
    """Reference accounting from per-k-mer lookups (``{level: taxIDs}``)."""
    table = TaxHitTable(levels)
    found = [(q, lookup(q)) for q in inter]
    for q, hits in found:
        for t in hits.get(levels[0], ()):
            table.add(t, levels[0])
    for i, k in enumerate(levels[1:], start=1):
        mask = enc.prefix_mask(k)
        slot_ids: dict[int, tuple[int, ...]] = {}
        attributed: dict[int, set[int]] = defaultdict(set)
        for q, hits in found:
            p = q & mask
            if k in hits:
                slot_ids[p] = hits[k]
            for longer in levels[:i]:
                attributed[p].update(hits.get(longer, ()))
        for p in sorted(slot_ids):
            for t in slot_ids[p]:
                if t not in attributed[p]:
                    table.add(t, k)
    return table


def retrieve_taxids_flat(inter: Iterable[int], flat: SketchTables) -> TaxHitTable:
    """Oracle: independent binary searches into every flat table."""
    def lookup(q: int):
        out = {}
        for k in flat.levels:
            ids = flat.lookup(k, q & enc.prefix_mask(k))
            if ids:
                out[k] = ids
        return out

    return hits_from_lookups(list(inter), flat.levels, lookup)


def retrieve_taxids_tree(inter: Iterable[int], tree: TernaryTree) -> TaxHitTable:
    """Oracle: one tree walk per intersecting k-mer."""
    return hits_from_lookups(list(inter), tree.levels, lambda q: tree.lookup(q)[0])


# --------------------------------------------------------------------------
# presence


def containment(hits: TaxHitTable, sketch_sizes: dict[int, int]) -> dict[int, float]:
    return {t: hits.weighted(t) / sketch_sizes[t] for t in sorted(sketch_sizes) if sketch_sizes[t] > 0}


def call_presence(hits: TaxHitTable, sketch_sizes: dict[int, int], tau: float = DEFAULT_TAU) -> set[int]:
    """TaxIDs whose level-weighted containment reaches ``tau``."""
    if not 0 < tau <= 1:
        raise BadThreshold(f"tau must be in (0, 1], got {tau}")
    return {t for t, c in containment(hits, sketch_sizes).items() if c >= tau}


def find_candidates(
    query_buckets: Sequence[Sequence[int]],
    db: Iterable[int],
    kss: KssTables,
    budget_bytes: int = DEFAULT_INTERSECTION_BUDGET,
) -> tuple[TaxHitTable, IntersectionSet]:
    """Intersection followed by retrieval, flushing early when the buffer fills.

    A flush only happens where the next intersecting k-mer starts a new
    shortest-level prefix, so partial retrieval rounds never split a slot.
    """
    inter = intersect_buckets(query_buckets, db)
    limit = max(1, budget_bytes // RECORD_BYTES)
    shortest = enc.prefix_mask(kss.levels[-1])
    if len(inter.kmers) <= limit:
        return retrieve_taxids(inter.kmers, kss), inter
    total = TaxHitTable(kss.levels)
    chunk: list[int] = []
    for v in inter.kmers:
        if len(chunk) >= limit and (v & shortest) != (chunk[-1] & shortest):
            _merge_tables(total, retrieve_taxids(chunk, kss))
            chunk = []
        chunk.append(v)
    if chunk:
        _merge_tables(total, retrieve_taxids(chunk, kss))
    return total, inter


def _merge_tables(into: TaxHitTable, part: TaxHitTable) -> None:
    for t, by_k in part.hits.items():
        for k, n in by_k.items():
            into.add(t, k, n)
