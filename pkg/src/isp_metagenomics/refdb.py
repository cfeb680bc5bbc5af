"""Reference database builders.

* :class:`SortedKmerDatabase` - every distinct reference k-mer, sorted.
* :class:`SketchTables` - per-level flat tables of bottom-s sketch k-mers and
  the taxIDs they belong to.
* :class:`KssTables` - the streaming layout: the longest level is kept as a
  sorted (k-mer, taxIDs) table, every shorter level only keeps one taxID slot
  per distinct prefix of that table holding the taxIDs no longer entry under
  the prefix already carries.

Sketch levels are prefix-closed: if a taxID owns a k-mer at one level it also
owns that k-mer's prefix at every shorter level.  Shorter-level sketch k-mers
that are not a prefix of any longest-level entry pull in their lowest-hash
extension from the same genome, so every shorter-level key is reachable from
the longest table by prefix.
"""

from __future__ import annotations

import bisect
import os
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import encoding as enc

DB_MAGIC = b"MGIS"
FLAT_MAGIC = b"MGSF"
KSS_MAGIC = b"MGSK"
FORMAT_VERSION = 1
MAX_TAXIDS_PER_ENTRY = 0xFFFF

DEFAULT_K = 60
DEFAULT_LEVELS = (60, 50, 40, 30)
DEFAULT_SKETCH_SIZE = 1000
DEFAULT_SEED = 0x5EED_2024

_DB_HEADER = struct.Struct("<4sHHQ")
_SK_HEADER = struct.Struct("<4sHHH")
_SECTION = struct.Struct("<HQQ")
_REC = np.dtype([("lo", "<u8"), ("hi", "<u8")])
_M64 = 0xFFFF_FFFF_FFFF_FFFF


class RefDbError(ValueError):
    pass


class EmptyInput(RefDbError):
    pass


class InconsistentLevels(RefDbError):
    pass


class TaxidOverflow(RefDbError):
    pass


# --------------------------------------------------------------------------
# hashing


def _mix64(x):
    x ^= x >> np.uint64(30)
    x *= np.uint64(0xBF58476D1CE4E5B9)
    x ^= x >> np.uint64(27)
    x *= np.uint64(0x94D049BB133111EB)
    x ^= x >> np.uint64(31)
    return x


def hash_words(hi: np.ndarray, lo: np.ndarray, k: int, seed: int = DEFAULT_SEED) -> np.ndarray:
    """Seeded 64-bit multiply-xor hash of packed k-mers."""
    salt = np.uint64((seed ^ (k * 0x9E3779B97F4A7C15)) & _M64)
    with np.errstate(over="ignore"):
        h = _mix64(hi.astype(np.uint64) ^ salt)
        return _mix64(h ^ lo.astype(np.uint64))


def hash_kmer(bits: int, k: int, seed: int = DEFAULT_SEED) -> int:
    h = hash_words(np.array([bits >> 64], dtype=np.uint64), np.array([bits & _M64], dtype=np.uint64), k, seed)
    return int(h[0])


# --------------------------------------------------------------------------
# sorted k-mer database


@dataclass
class SortedKmerDatabase:
    k: int
    hi: np.ndarray
    lo: np.ndarray
    stripes: list = field(default_factory=list)  # filled by the SSD placement model
    _values: list[int] | None = field(default=None, repr=False)

    @property
    def count(self) -> int:
        return int(self.hi.size)

    @property
    def values(self) -> list[int]:
        if self._values is None:
            self._values = enc.words_to_ints(self.hi, self.lo)
        return self._values

    def __len__(self) -> int:
        return self.count

    @property
    def nbytes(self) -> int:
        return _DB_HEADER.size + 16 * self.count

    def verify(self) -> bool:
        """Single pass: strictly increasing, hence unique."""
        if self.count < 2:
            return True
        hi, lo = self.hi, self.lo
        return bool(np.all((hi[1:] > hi[:-1]) | ((hi[1:] == hi[:-1]) & (lo[1:] > lo[:-1]))))

    def to_bytes(self) -> bytes:
        rec = np.empty(self.count, dtype=_REC)
        rec["lo"], rec["hi"] = self.lo, self.hi
        return _DB_HEADER.pack(DB_MAGIC, FORMAT_VERSION, self.k, self.count) + rec.tobytes()

    def write(self, path: str | os.PathLike) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def read(cls, path: str | os.PathLike) -> "SortedKmerDatabase":
        raw = Path(path).read_bytes()
        magic, version, k, count = _DB_HEADER.unpack_from(raw)
        if magic != DB_MAGIC or version != FORMAT_VERSION:
            raise RefDbError(f"{path}: not a k-mer database file")
        rec = np.frombuffer(raw, dtype=_REC, offset=_DB_HEADER.size)
        if rec.size != count:
            raise RefDbError(f"{path}: header says {count} records, found {rec.size}")
        return cls(k, rec["hi"].astype(np.uint64), rec["lo"].astype(np.uint64))

    @classmethod
    def from_values(cls, k: int, values: Iterable[int]) -> "SortedKmerDatabase":
        vals = sorted(set(values))
        hi, lo = enc.ints_to_words(vals)
        return cls(k, hi, lo, _values=vals)


def genome_words(seq: str, k: int):
    """Distinct sorted k-mers of one sequence as ``(hi, lo)``."""
    hi, lo, _ = enc.window_words(enc.sequence_codes(seq), k)
    return enc.unique_words(hi, lo)


def build_kmer_db(genomes: Sequence[tuple[int, str]], k: int = DEFAULT_K) -> SortedKmerDatabase:
    if not genomes:
        raise EmptyInput("no genomes given")
    if not 1 <= k <= enc.MAX_K:
        raise RefDbError(f"k must be in [1, {enc.MAX_K}]")
    parts = [genome_words(seq, k) for _, seq in genomes]
    hi = np.concatenate([p[0] for p in parts])
    lo = np.concatenate([p[1] for p in parts])
    hi, lo = enc.unique_words(hi, lo)
    return SortedKmerDatabase(k, hi, lo)


# --------------------------------------------------------------------------
# sketch tables


Table = list[tuple[int, tuple[int, ...]]]


@dataclass
class SketchTables:
    """Flat per-level tables, each sorted by k-mer (high-aligned words)."""

    levels: tuple[int, ...]
    tables: dict[int, Table]

    @property
    def k_max(self) -> int:
        return self.levels[0]

    def lookup(self, k: int, bits: int) -> tuple[int, ...]:
        table = self.tables[k]
        i = bisect.bisect_left(table, (bits,))
        if i < len(table) and table[i][0] == bits:
            return table[i][1]
        return ()

    def as_dicts(self) -> dict[int, dict[int, tuple[int, ...]]]:
        return {k: dict(t) for k, t in self.tables.items()}

    def sketch_sizes(self) -> dict[int, int]:
        """Longest-level sketch size per taxID."""
        sizes: dict[int, int] = defaultdict(int)
        for _, taxids in self.tables[self.k_max]:
            for t in taxids:
                sizes[t] += 1
        return dict(sizes)


def _check_levels(levels: Sequence[int]) -> tuple[int, ...]:
    levels = tuple(levels)
    if not levels or any(a <= b for a, b in zip(levels, levels[1:])):
        raise RefDbError("k levels must be strictly decreasing")
    if levels[-1] < 1 or levels[0] > enc.MAX_K:
        raise RefDbError(f"k levels must lie in [1, {enc.MAX_K}]")
    return levels


def tables_from_sets(levels: Sequence[int], per_taxid: dict[int, dict[int, set[int]]]) -> SketchTables:
    """Merge per-taxID level sets into flat tables, closing them under prefix."""
    levels = _check_levels(levels)
    merged: dict[int, dict[int, set[int]]] = {k: defaultdict(set) for k in levels}
    for taxid, by_level in per_taxid.items():
        if taxid <= 0:
            raise RefDbError("taxIDs must be positive")
        longer: set[int] = set()
        for k in levels:
            mask = enc.prefix_mask(k)
            cur = set(by_level.get(k, ())) | {x & mask for x in longer}
            for x in cur:
                merged[k][x].add(taxid)
            longer = cur
    tables: dict[int, Table] = {}
    for k in levels:
        rows = []
        for x in sorted(merged[k]):
            ids = tuple(sorted(merged[k][x]))
            if len(ids) > MAX_TAXIDS_PER_ENTRY:
                raise TaxidOverflow(f"{len(ids)} taxIDs on one k={k} entry")
            rows.append((x, ids))
        tables[k] = rows
    return SketchTables(levels, tables)


def build_sketches(
    genomes: Sequence[tuple[int, str]],
    s: int = DEFAULT_SKETCH_SIZE,
    k_levels: Sequence[int] = DEFAULT_LEVELS,
    seed: int = DEFAULT_SEED,
) -> SketchTables:
    """Bottom-``s`` MinHash sketches per taxID and level.

    Candidates at a shorter level ``k`` are the ``k``-prefixes of the genome's
    longest-level k-mers.  The same sequence listed under two taxIDs yields
    entries carrying both.
    """
    levels = _check_levels(k_levels)
    k_max = levels[0]
    by_taxid: dict[int, list[str]] = defaultdict(list)
    for taxid, seq in genomes:
        by_taxid[taxid].append(seq)

    raw: dict[int, dict[int, set[int]]] = {}
    pools: dict[int, tuple[list[int], np.ndarray]] = {}
    for taxid in sorted(by_taxid):
        parts = [genome_words(seq, k_max) for seq in by_taxid[taxid]]
        hi = np.concatenate([p[0] for p in parts]) if parts else np.empty(0, np.uint64)
        lo = np.concatenate([p[1] for p in parts]) if parts else np.empty(0, np.uint64)
        hi, lo = enc.unique_words(hi, lo)
        pools[taxid] = (enc.words_to_ints(hi, lo), hash_words(hi, lo, k_max, seed))
        raw[taxid] = {}
        for k in levels:
            phi, plo = enc.unique_words(*enc.mask_words(hi, lo, k)) if k != k_max else (hi, lo)
            h = hash_words(phi, plo, k, seed)
            take = _bottom(h, s)
            raw[taxid][k] = set(enc.words_to_ints(phi[take], plo[take]))

    # force-include extensions of shorter-level picks with no longest-level
    # extension in the same taxID's sketch
    for k in levels[1:]:
        span = 1 << (enc.WORD_BITS - 2 * k)
        mask = enc.prefix_mask(k)
        for taxid in sorted(raw):
            values, hashes = pools[taxid]
            covered = {x & mask for x in raw[taxid][k_max]}
            for p in sorted(raw[taxid][k] - covered):
                a = bisect.bisect_left(values, p)
                b = bisect.bisect_left(values, p + span)
                ext = values[a + int(np.argmin(hashes[a:b]))]
                raw[taxid][k_max].add(ext)
    return tables_from_sets(levels, raw)


def _bottom(h: np.ndarray, s: int) -> np.ndarray:
    """Indices of the ``s`` smallest hashes, ties broken by position."""
    if h.size <= s:
        return np.arange(h.size)
    return np.sort(np.argsort(h, kind="stable")[:s])


# --------------------------------------------------------------------------
# KSS layout


@dataclass
class KssTables:
    levels: tuple[int, ...]
    kmers: list[int]
    taxids: list[tuple[int, ...]]
    slots: dict[int, list[tuple[int, ...]]]

    @property
    def k_max(self) -> int:
        return self.levels[0]

    def slot_prefixes(self, k: int) -> list[int]:
        """Distinct ``k``-prefixes of the longest table, in slot order."""
        mask = enc.prefix_mask(k)
        out: list[int] = []
        for x in self.kmers:
            p = x & mask
            if not out or out[-1] != p:
                out.append(p)
        return out

    def sketch_sizes(self) -> dict[int, int]:
        sizes: dict[int, int] = defaultdict(int)
        for ids in self.taxids:
            for t in ids:
                sizes[t] += 1
        return dict(sizes)

    def reconstruct(self) -> SketchTables:
        """Full per-level taxID sets: each slot united with everything stored under its prefix."""
        tables: dict[int, Table] = {self.k_max: list(zip(self.kmers, self.taxids))}
        below: dict[int, set[int]] = {x: set(ids) for x, ids in zip(self.kmers, self.taxids)}
        for k in self.levels[1:]:
            mask = enc.prefix_mask(k)
            grouped: dict[int, set[int]] = defaultdict(set)
            for x, ids in below.items():
                grouped[x & mask] |= ids
            prefixes = self.slot_prefixes(k)
            for p, slot in zip(prefixes, self.slots[k]):
                grouped[p] |= set(slot)
            tables[k] = [(p, tuple(sorted(grouped[p]))) for p in prefixes]
            below = grouped
        return SketchTables(self.levels, tables)


def build_kss(flat: SketchTables) -> KssTables:
    levels = flat.levels
    top = flat.tables[flat.k_max]
    kmers = [x for x, _ in top]
    taxids = [ids for _, ids in top]
    slots: dict[int, list[tuple[int, ...]]] = {}
    # taxIDs carried by longer entries, grouped under the running prefix
    below: dict[int, set[int]] = {x: set(ids) for x, ids in top}
    for k in levels[1:]:
        mask = enc.prefix_mask(k)
        grouped: dict[int, set[int]] = defaultdict(set)
        for x, ids in below.items():
            grouped[x & mask] |= ids
        table = dict(flat.tables[k])
        for p in table:
            if p not in grouped:
                raise InconsistentLevels(
                    f"k={k} sketch k-mer {enc.unpack_bits(p, k)} is not a prefix of any k={flat.k_max} entry"
                )
        level_slots = []
        for p in sorted(grouped):
            full = set(table.get(p, ()))
            if not grouped[p] <= full:
                raise InconsistentLevels(f"k={k} table is not closed under prefix at {enc.unpack_bits(p, k)}")
            level_slots.append(tuple(sorted(full - grouped[p])))
            grouped[p] = full
        slots[k] = level_slots
        below = grouped
    return KssTables(levels, kmers, taxids, slots)


# --------------------------------------------------------------------------
# serialisation


_ONE_ID = struct.Struct("<HI")


def _taxid_list(ids: Sequence[int]) -> bytes:
    if len(ids) == 1:
        return _ONE_ID.pack(1, ids[0])
    if len(ids) > MAX_TAXIDS_PER_ENTRY:
        raise TaxidOverflow(f"{len(ids)} taxIDs on one entry")
    return struct.pack(f"<H{len(ids)}I", len(ids), *ids)


def _sections(magic: bytes, k_max: int, bodies: list[tuple[int, int, bytes]]) -> bytes:
    head = _SK_HEADER.size + _SECTION.size * len(bodies)
    table, offset = [], head
    for k, count, body in bodies:
        table.append(_SECTION.pack(k, count, offset))
        offset += len(body)
    return b"".join([_SK_HEADER.pack(magic, FORMAT_VERSION, k_max, len(bodies)), *table, *(b for _, _, b in bodies)])


def flat_to_bytes(flat: SketchTables) -> bytes:
    bodies = []
    for k in flat.levels:
        rows = flat.tables[k]
        body = b"".join(x.to_bytes(16, "little") + _taxid_list(ids) for x, ids in rows)
        bodies.append((k, len(rows), body))
    return _sections(FLAT_MAGIC, flat.k_max, bodies)


def kss_to_bytes(kss: KssTables) -> bytes:
    top = b"".join(x.to_bytes(16, "little") + _taxid_list(ids) for x, ids in zip(kss.kmers, kss.taxids))
    bodies = [(kss.k_max, len(kss.kmers), top)]
    for k in kss.levels[1:]:
        bodies.append((k, len(kss.slots[k]), b"".join(_taxid_list(ids) for ids in kss.slots[k])))
    return _sections(KSS_MAGIC, kss.k_max, bodies)


def _read_sections(raw: bytes, magic: bytes, what: str):
    m, version, k_max, n = _SK_HEADER.unpack_from(raw)
    if m != magic or version != FORMAT_VERSION:
        raise RefDbError(f"not a {what} file")
    return k_max, [_SECTION.unpack_from(raw, _SK_HEADER.size + i * _SECTION.size) for i in range(n)]


def _read_rows(raw: bytes, offset: int, count: int, keyed: bool):
    rows = []
    for _ in range(count):
        key = None
        if keyed:
            key = int.from_bytes(raw[offset:offset + 16], "little")
            offset += 16
        (n,) = struct.unpack_from("<H", raw, offset)
        ids = struct.unpack_from(f"<{n}I", raw, offset + 2)
        offset += 2 + 4 * n
        rows.append((key, tuple(ids)) if keyed else tuple(ids))
    return rows


def flat_from_bytes(raw: bytes) -> SketchTables:
    _, sections = _read_sections(raw, FLAT_MAGIC, "flat sketch")
    levels = tuple(k for k, _, _ in sections)
    return SketchTables(levels, {k: _read_rows(raw, off, n, True) for k, n, off in sections})


def kss_from_bytes(raw: bytes) -> KssTables:
    _, sections = _read_sections(raw, KSS_MAGIC, "KSS")
    levels = tuple(k for k, _, _ in sections)
    (k0, n0, off0), rest = sections[0], sections[1:]
    top = _read_rows(raw, off0, n0, True)
    slots = {k: _read_rows(raw, off, n, False) for k, n, off in rest}
    return KssTables(levels, [x for x, _ in top], [ids for _, ids in top], slots)


def structure_sizes(flat: SketchTables, tree, kss: KssTables) -> dict[str, int]:
    """Exact serialized byte counts of the three sketch layouts."""
    return {"flat": len(flat_to_bytes(flat)), "tree": len(tree.to_bytes()), "kss": len(kss_to_bytes(kss))}


def write_bytes(path: str | os.PathLike, data: bytes) -> None:
    Path(path).write_bytes(data)
