"""Unified reference index and read-vote abundance estimation.

Per-species indexes (k-mer -> sorted locations) are merged into a single
index whose locations are shifted by the cumulative length of the genomes
before them, so every global location maps back to exactly one
``(taxid, local location)``.

Indexes are array-backed: parallel ``hi``/``lo`` k-mer words and a location
per row, rows sorted by k-mer then location.  ``entries`` gives the grouped
``(kmer, locations)`` view.
"""

from __future__ import annotations

import csv
import io
import os
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import encoding as enc

INDEX_MAGIC = b"MGIX"
UNIFIED_MAGIC = b"MGIU"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHHQ")
_SPECIES = struct.Struct("<IQ")  # taxid, genome length
_M32 = np.uint64(0xFFFF_FFFF)

UNCLASSIFIED = 0


class AbundanceError(ValueError):
    pass


def _runs(hi: np.ndarray, lo: np.ndarray) -> np.ndarray:
    """Start row of each run of equal k-mers (rows already sorted)."""
    if hi.size == 0:
        return np.empty(0, dtype=np.int64)
    new = np.empty(hi.size, dtype=bool)
    new[0] = True
    new[1:] = (hi[1:] != hi[:-1]) | (lo[1:] != lo[:-1])
    return np.flatnonzero(new)


def _grouped(hi, lo, locs) -> list[tuple[int, tuple[int, ...]]]:
    starts = _runs(hi, lo)
    keys = enc.words_to_ints(hi[starts], lo[starts])
    bounds = [*starts.tolist(), hi.size]
    flat = locs.tolist()
    return [(x, tuple(flat[a:b])) for x, a, b in zip(keys, bounds, bounds[1:])]


@dataclass
class SpeciesIndex:
    taxid: int
    genome_length: int
    k: int
    hi: np.ndarray
    lo: np.ndarray
    locs: np.ndarray

    @property
    def entries(self) -> list[tuple[int, tuple[int, ...]]]:
        return _grouped(self.hi, self.lo, self.locs)

    @classmethod
    def from_entries(cls, taxid: int, genome_length: int, k: int, entries) -> "SpeciesIndex":
        keys = [x for x, locs in entries for _ in locs]
        hi, lo = enc.ints_to_words(keys)
        locs = np.array([l for _, ls in entries for l in ls], dtype=np.int64)
        return cls(taxid, genome_length, k, hi, lo, locs)

    def validate(self) -> None:
        keys = [x for x, _ in self.entries]
        if any(a >= b for a, b in zip(keys, keys[1:])):
            raise AbundanceError(f"taxid {self.taxid}: entries not sorted/unique")
        for _, locs in self.entries:
            if list(locs) != sorted(locs) or (locs and locs[-1] >= self.genome_length):
                raise AbundanceError(f"taxid {self.taxid}: bad location list")

    def to_bytes(self) -> bytes:
        return _index_bytes(INDEX_MAGIC, self.k, [(self.taxid, self.genome_length)], self.hi, self.lo, self.locs)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "SpeciesIndex":
        k, species, hi, lo, locs = _index_from_bytes(raw, INDEX_MAGIC)
        (taxid, length), = species
        return cls(taxid, length, k, hi, lo, locs)


def build_species_index(taxid: int, seq: str, k: int) -> SpeciesIndex:
    hi, lo, starts = enc.window_words(enc.sequence_codes(seq), k)
    order = enc.sort_order(hi, lo)  # stable: starts stay ascending within a k-mer
    return SpeciesIndex(taxid, len(seq), k, hi[order], lo[order], starts[order].astype(np.int64))


@dataclass
class UnifiedIndex:
    k: int
    taxids: list[int]
    offsets: list[int]
    lengths: list[int]
    hi: np.ndarray
    lo: np.ndarray
    locs: np.ndarray  # global locations
    _owners: dict | None = field(default=None, repr=False)
    _csr: tuple | None = field(default=None, repr=False)

    @property
    def entries(self) -> list[tuple[int, tuple[int, ...]]]:
        return _grouped(self.hi, self.lo, self.locs)

    def locate(self, global_loc: int) -> tuple[int, int]:
        """Inverse of the offset shift: ``(taxid, local location)``."""
        i = int(np.searchsorted(self.offsets, global_loc, side="right")) - 1
        if i < 0 or global_loc - self.offsets[i] >= self.lengths[i]:
            raise AbundanceError(f"location {global_loc} outside every genome")
        return self.taxids[i], global_loc - self.offsets[i]

    def owner_table(self) -> dict[int, tuple[int, ...]]:
        """k-mer -> sorted taxIDs owning at least one of its locations."""
        if self._owners is None:
            rank = np.searchsorted(np.asarray(self.offsets, dtype=np.int64), self.locs, side="right") - 1
            tax = np.asarray(self.taxids, dtype=np.int64)[rank]
            starts = _runs(self.hi, self.lo)
            keys = enc.words_to_ints(self.hi[starts], self.lo[starts])
            bounds = [*starts.tolist(), self.hi.size]
            t = tax.tolist()
            table = {}
            for x, a, b in zip(keys, bounds, bounds[1:]):
                table[x] = (t[a],) if b - a == 1 else tuple(sorted(set(t[a:b])))
            self._owners = table
        return self._owners

    def owner_csr(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Distinct k-mer words ``(hi, lo)`` (sorted), row pointers, owner ranks.

        Owners of key ``j`` are ``owner[ptr[j]:ptr[j+1]]`` (indexes into
        ``taxids``, ascending).
        """
        if self._csr is None:
            n_sp = max(1, len(self.taxids))
            rank = np.searchsorted(np.asarray(self.offsets, dtype=np.int64), self.locs, side="right") - 1
            starts = _runs(self.hi, self.lo)
            run = np.zeros(self.hi.size, dtype=np.int64)
            run[starts[1:]] = 1
            run = np.cumsum(run)
            pair = np.unique(run * n_sp + rank)
            key_of = pair // n_sp
            ptr = np.searchsorted(key_of, np.arange(starts.size + 1))
            self._csr = (self.hi[starts], self.lo[starts], ptr, pair % n_sp)
        return self._csr

    def owners(self, kmer: int) -> set[int]:
        return set(self.owner_table().get(kmer, ()))

    def to_bytes(self) -> bytes:
        return _index_bytes(UNIFIED_MAGIC, self.k, list(zip(self.taxids, self.lengths)), self.hi, self.lo, self.locs)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "UnifiedIndex":
        k, species, hi, lo, locs = _index_from_bytes(raw, UNIFIED_MAGIC)
        lengths = [n for _, n in species]
        return cls(k, [t for t, _ in species], _offsets(lengths), lengths, hi, lo, locs)


def _offsets(lengths: Sequence[int]) -> list[int]:
    out, acc = [], 0
    for n in lengths:
        out.append(acc)
        acc += n
    return out


def merge_indexes(indexes: Sequence[SpeciesIndex]) -> UnifiedIndex:
    """Merge in ascending taxID order; shared k-mers concatenate their shifted locations.

    Locations are shifted before the merge, and shifted locations grow with
    taxID rank, so one stable sort by (k-mer, location) yields the same rows
    as a k-way merge of the per-species streams.
    """
    ordered = sorted(indexes, key=lambda ix: ix.taxid)
    taxids = [ix.taxid for ix in ordered]
    if len(set(taxids)) != len(taxids):
        raise AbundanceError("duplicate taxID among indexes")
    ks = {ix.k for ix in ordered}
    if len(ks) > 1:
        raise AbundanceError("indexes built with different k")
    lengths = [ix.genome_length for ix in ordered]
    offsets = _offsets(lengths)
    if not ordered:
        e = np.empty(0, dtype=np.uint64)
        return UnifiedIndex(0, [], [], [], e, e.copy(), np.empty(0, dtype=np.int64))
    hi = np.concatenate([ix.hi for ix in ordered])
    lo = np.concatenate([ix.lo for ix in ordered])
    locs = np.concatenate([ix.locs.astype(np.int64) + off for ix, off in zip(ordered, offsets)])
    order = enc.sort_order(hi, lo)  # stable: shifted locations stay ascending
    return UnifiedIndex(ks.pop(), taxids, offsets, lengths, hi[order], lo[order], locs[order])


def _index_bytes(magic: bytes, k: int, species: list[tuple[int, int]], hi, lo, locs) -> bytes:
    """Header, species table, then per k-mer: 16-byte key, u32 count, u32 locations."""
    starts = _runs(hi, lo)
    counts = np.diff(np.append(starts, hi.size)).astype(np.int64)
    rec_len = 5 + counts
    rec_off = np.concatenate(([0], np.cumsum(rec_len)[:-1])).astype(np.int64)
    body = np.zeros(int(rec_len.sum()), dtype="<u4")
    khi, klo = hi[starts], lo[starts]
    body[rec_off] = klo & _M32
    body[rec_off + 1] = klo >> np.uint64(32)
    body[rec_off + 2] = khi & _M32
    body[rec_off + 3] = khi >> np.uint64(32)
    body[rec_off + 4] = counts
    within = np.arange(locs.size) - np.repeat(starts, counts)
    body[np.repeat(rec_off + 5, counts) + within] = locs
    head = [_HEADER.pack(magic, FORMAT_VERSION, k, starts.size), struct.pack("<I", len(species))]
    head += [_SPECIES.pack(t, n) for t, n in species]
    return b"".join(head) + body.tobytes()


def _index_from_bytes(raw: bytes, magic: bytes):
    m, version, k, count = _HEADER.unpack_from(raw)
    if m != magic or version != FORMAT_VERSION:
        raise AbundanceError("not an index file")
    pos = _HEADER.size
    (n_species,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    species = [_SPECIES.unpack_from(raw, pos + i * _SPECIES.size) for i in range(n_species)]
    pos += n_species * _SPECIES.size
    body = np.frombuffer(raw, dtype="<u4", offset=pos)
    words = body.tolist()
    rec_off = np.empty(count, dtype=np.int64)
    i = 0
    for j in range(count):
        rec_off[j] = i
        i += 5 + words[i + 4]
    if i != body.size:
        raise AbundanceError("index body length does not match its records")
    counts = body[rec_off + 4].astype(np.int64)
    w = body.astype(np.uint64)
    klo = w[rec_off] | (w[rec_off + 1] << np.uint64(32))
    khi = w[rec_off + 2] | (w[rec_off + 3] << np.uint64(32))
    starts = np.concatenate(([0], np.cumsum(counts)[:-1])).astype(np.int64)
    within = np.arange(int(counts.sum())) - np.repeat(starts, counts)
    locs = body[np.repeat(rec_off + 5, counts) + within].astype(np.int64)
    return k, species, np.repeat(khi, counts), np.repeat(klo, counts), locs


# --------------------------------------------------------------------------
# abundance


@dataclass
class AbundanceProfile:
    abundances: dict[int, float]
    unclassified: float
    reads: int = 0

    def total(self) -> float:
        return sum(self.abundances.values()) + self.unclassified

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["taxid", "abundance"])
        for t in sorted(self.abundances):
            w.writerow([t, f"{self.abundances[t]:.9f}"])
        w.writerow([UNCLASSIFIED, f"{self.unclassified:.9f}"])
        return buf.getvalue()


def _winner(votes: dict[int, int]) -> int:
    """Max-vote taxID; ties and no votes give 0 (unclassified)."""
    if not votes:
        return UNCLASSIFIED
    best = max(votes.values())
    top = [t for t, n in votes.items() if n == best]
    return top[0] if len(top) == 1 else UNCLASSIFIED


def assign_read(read: str, unified: UnifiedIndex, candidates: set[int]) -> int:
    """Max-vote taxID for one read (see :func:`assign_reads`)."""
    votes: dict[int, int] = defaultdict(int)
    hi, lo, _ = enc.window_words(enc.sequence_codes(read), unified.k)
    for x in enc.words_to_ints(hi, lo):
        for t in unified.owners(x) & candidates:
            votes[t] += 1
    return _winner(votes)


def find_words(khi: np.ndarray, klo: np.ndarray, qhi: np.ndarray, qlo: np.ndarray):
    """Row of each query word in the sorted distinct keys, and a found mask.

    Searches on the high word and re-searches the low word only where
    several keys share it.
    """
    order = np.argsort(qhi)  # sorted probes keep the search cache-friendly
    left = np.empty(qhi.size, dtype=np.int64)
    right = np.empty(qhi.size, dtype=np.int64)
    left[order] = np.searchsorted(khi, qhi[order], side="left")
    right[order] = np.searchsorted(khi, qhi[order], side="right")
    idx = left.copy()
    multi = np.flatnonzero(right - left > 1)
    for j in multi.tolist():
        a, b = int(left[j]), int(right[j])
        idx[j] = a + int(np.searchsorted(klo[a:b], qlo[j]))
    found = idx < right
    found[found] = klo[idx[found]] == qlo[found]
    return idx, found


def assign_reads(reads: Sequence[str], unified: UnifiedIndex, candidates: set[int]) -> list[int]:
    """Assign every read to its max-vote candidate taxID; ties and no votes give 0.

    Each read k-mer adds one vote to every candidate owning one of its
    locations.  All reads are processed in one vectorised join against the
    unified index, so the totals do not depend on read order.
    """
    if not reads:
        return []
    khi, klo, ptr, owner = unified.owner_csr()
    n_sp = max(1, len(unified.taxids))
    is_cand = np.array([t in candidates for t in unified.taxids] or [False], dtype=bool)

    lengths = np.fromiter((len(r) for r in reads), dtype=np.int64, count=len(reads))
    read_start = np.concatenate(([0], np.cumsum(lengths + 1)[:-1]))
    hi, lo, starts = enc.window_words(enc.sequence_codes("N".join(reads)), unified.k)
    read_of = np.searchsorted(read_start, starts, side="right") - 1
    idx, ok = find_words(khi, klo, hi, lo)
    r, i = read_of[ok], idx[ok]
    cnt = ptr[i + 1] - ptr[i]
    rows = np.repeat(ptr[i], cnt) + (np.arange(int(cnt.sum())) - np.repeat(np.cumsum(cnt) - cnt, cnt))
    rr, tr = np.repeat(r, cnt), owner[rows]
    keep = is_cand[tr]
    pair, votes = np.unique(rr[keep] * n_sp + tr[keep], return_counts=True)
    pr, pt = pair // n_sp, pair % n_sp
    order = np.lexsort((-votes, pr))
    pr, pt, votes = pr[order], pt[order], votes[order]
    out = [UNCLASSIFIED] * len(reads)
    if pr.size == 0:
        return out
    first = np.flatnonzero(np.concatenate(([True], pr[1:] != pr[:-1])))
    nxt = first + 1
    has_second = nxt < pr.size
    has_second[has_second] = pr[nxt[has_second]] == pr[first[has_second]]
    tie = np.zeros(first.size, dtype=bool)
    tie[has_second] = votes[nxt[has_second]] == votes[first[has_second]]
    taxids = unified.taxids
    for read, t in zip(pr[first[~tie]].tolist(), pt[first[~tie]].tolist()):
        out[read] = taxids[t]
    return out


def estimate_abundance(reads: Iterable[str], unified: UnifiedIndex, candidates: Iterable[int]) -> AbundanceProfile:
    cand = set(candidates)
    if not cand <= set(unified.taxids):
        raise AbundanceError("candidates must be a subset of the unified index taxIDs")
    reads = list(reads)
    if not reads:
        return AbundanceProfile({}, 1.0, 0)
    counts: dict[int, int] = defaultdict(int)
    for t in assign_reads(reads, unified, cand):
        counts[t] += 1
    n = len(reads)
    ab = {t: counts[t] / n for t in sorted(cand)}
    return AbundanceProfile(ab, counts[UNCLASSIFIED] / n, n)


def write_profile(path: str | os.PathLike, profile: AbundanceProfile) -> None:
    Path(path).write_text(profile.to_csv(), encoding="utf-8")
