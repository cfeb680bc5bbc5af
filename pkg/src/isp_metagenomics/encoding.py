"""2-bit k-mer codec.

K-mers are packed most-significant-base-first into a fixed 128-bit word with
the unused low bits left at zero.  With the alphabetical code assignment
(A=0, C=1, G=2, T=3) integer order of two words with equal ``k`` is the
lexicographic order of the base strings, and the length-``j`` prefix of a word
is just the word with its low bits masked off.

Bulk paths work on numpy ``(hi, lo)`` uint64 pairs or on plain Python ints
holding the whole 128-bit word; the single-value API uses :class:`PackedKmer`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

WORD_BITS = 128
MAX_K = 60

BASES = "ACGT"
_CODE = {"A": 0, "C": 1, "G": 2, "T": 3}
_COMPLEMENT = str.maketrans("ACGT", "TGCA")

# byte -> code; 4 marks anything that is not an upper/lower-case ACGT
_LUT = np.full(256, 4, dtype=np.uint8)
for _b, _c in _CODE.items():
    _LUT[ord(_b)] = _c
    _LUT[ord(_b.lower())] = _c


class EncodingError(ValueError):
    pass


class AmbiguousBase(EncodingError):
    """Raised for N or any other non-ACGT character."""


class LengthMismatch(EncodingError):
    pass


class PrefixTooLong(EncodingError):
    pass


def _check_k(k: int) -> None:
    if not 1 <= k <= MAX_K:
        raise LengthMismatch(f"k must be in [1, {MAX_K}], got {k}")


def encode_base(b: str) -> int:
    try:
        return _CODE[b.upper()]
    except (KeyError, AttributeError):
        raise AmbiguousBase(f"not an unambiguous base: {b!r}") from None


def prefix_mask(k: int) -> int:
    """Mask keeping the top ``2*k`` bits of a word."""
    return ((1 << (2 * k)) - 1) << (WORD_BITS - 2 * k)


def prefix_bits(bits: int, k: int) -> int:
    return bits & prefix_mask(k)


def pack_bits(s: str, k: int | None = None) -> int:
    """Pack a base string into a high-aligned 128-bit integer."""
    if k is None:
        k = len(s)
    if len(s) != k:
        raise LengthMismatch(f"string of length {len(s)} does not match k={k}")
    _check_k(k)
    v = 0
    for ch in s:
        v = (v << 2) | encode_base(ch)
    return v << (WORD_BITS - 2 * k)


def unpack_bits(bits: int, k: int) -> str:
    _check_k(k)
    v = bits >> (WORD_BITS - 2 * k)
    out = []
    for _ in range(k):
        out.append(BASES[v & 3])
        v >>= 2
    return "".join(reversed(out))


@dataclass(frozen=True, order=True)
class PackedKmer:
    """One packed k-mer.  Ordering is only meaningful between equal ``k``."""

    bits: int
    k: int

    def __post_init__(self) -> None:
        _check_k(self.k)
        if self.bits < 0 or self.bits & ~prefix_mask(self.k):
            raise ValueError("unused low bits must be zero")

    def __str__(self) -> str:
        return unpack_bits(self.bits, self.k)

    @property
    def hi(self) -> int:
        return self.bits >> 64

    @property
    def lo(self) -> int:
        return self.bits & 0xFFFF_FFFF_FFFF_FFFF


def pack_kmer(s: str, k: int | None = None) -> PackedKmer:
    k = len(s) if k is None else k
    return PackedKmer(pack_bits(s, k), k)


def unpack_kmer(km: PackedKmer) -> str:
    return unpack_bits(km.bits, km.k)


def prefix(km: PackedKmer, k2: int) -> PackedKmer:
    if k2 > km.k:
        raise PrefixTooLong(f"prefix length {k2} exceeds k={km.k}")
    return PackedKmer(prefix_bits(km.bits, k2), k2)


def compare(a: PackedKmer, b: PackedKmer) -> int:
    if a.k != b.k:
        raise LengthMismatch("cannot compare k-mers of different length")
    return (a.bits > b.bits) - (a.bits < b.bits)


def reverse_complement(s: str) -> str:
    return s.translate(_COMPLEMENT)[::-1]


def canonical_bits(bits: int, k: int) -> int:
    """Smaller of a packed k-mer and its reverse complement."""
    v = bits >> (WORD_BITS - 2 * k)
    rc = 0
    for _ in range(k):
        rc = (rc << 2) | (3 - (v & 3))
        v >>= 2
    return min(bits, rc << (WORD_BITS - 2 * k))


# --------------------------------------------------------------------------
# bulk helpers


def sequence_codes(seq: str | bytes) -> np.ndarray:
    """Per-base codes; 4 marks an ambiguous position."""
    raw = seq.encode("ascii") if isinstance(seq, str) else seq
    return _LUT[np.frombuffer(raw, dtype=np.uint8)]


def valid_window_starts(codes: np.ndarray, k: int) -> np.ndarray:
    """Start offsets of every length-``k`` window free of ambiguous bases."""
    n = codes.size - k + 1
    if n <= 0:
        return np.empty(0, dtype=np.int64)
    bad = np.concatenate(([0], np.cumsum(codes == 4, dtype=np.int64)))
    return np.flatnonzero(bad[k:] - bad[:n] == 0)


def _packed_spans(c: np.ndarray, length: int) -> np.ndarray:
    """``out[p]`` = bases ``p .. p+length-1`` packed high-aligned in 64 bits.

    Built by doubling: spans of 1, 2, 4, ... bases are combined from shifted
    copies of the previous power, then the powers in ``length`` are joined.
    Positions past the end read as base code 0.
    """
    n = c.size
    pad = np.zeros(n + 64, dtype=np.uint64)
    pad[:n] = c & np.uint64(3)

    def shifted(a: np.ndarray, by: int) -> np.ndarray:
        out = np.zeros_like(a)
        out[: a.size - by] = a[by:]
        return out

    powers = {1: pad << np.uint64(62)}
    m = 1
    while 2 * m <= length:
        powers[2 * m] = powers[m] | (shifted(powers[m], m) >> np.uint64(2 * m))
        m *= 2
    out = np.zeros_like(pad)
    off = 0
    for m in sorted(powers, reverse=True):
        if length - off >= m:
            part = shifted(powers[m], off) if off else powers[m]
            out |= part >> np.uint64(2 * off)
            off += m
    return out[:n]


def window_words(codes: np.ndarray, k: int, starts: np.ndarray | None = None):
    """Packed ``(hi, lo)`` words for windows of ``codes``.

    ``starts`` selects the window offsets; by default every ambiguity-free
    window is returned.  Returns ``(hi, lo, starts)``.
    """
    _check_k(k)
    if starts is None:
        starts = valid_window_starts(codes, k)
    if starts.size == 0:
        return np.empty(0, np.uint64), np.empty(0, np.uint64), starts
    c = codes.astype(np.uint64)
    hi = _packed_spans(c, min(k, 32))[starts]
    if k > 32:
        lo = _packed_spans(c, k - 32)[np.minimum(starts + 32, c.size - 1)]
    else:
        lo = np.zeros(starts.size, dtype=np.uint64)
    return hi, lo, starts


def canonical_words(hi: np.ndarray, lo: np.ndarray, k: int):
    """Vectorised canonical form (min of word and its reverse complement)."""
    rhi = np.zeros_like(hi)
    rlo = np.zeros_like(lo)
    for j in range(k):
        # base j of the forward word
        if j < 32:
            code = (hi >> np.uint64(62 - 2 * j)) & np.uint64(3)
        else:
            code = (lo >> np.uint64(62 - 2 * (j - 32))) & np.uint64(3)
        comp = np.uint64(3) - code
        # complement of base j lands at position k-1-j of the reverse complement
        t = k - 1 - j
        if t < 32:
            rhi |= comp << np.uint64(62 - 2 * t)
        else:
            rlo |= comp << np.uint64(62 - 2 * (t - 32))
    take_rc = (rhi < hi) | ((rhi == hi) & (rlo < lo))
    return np.where(take_rc, rhi, hi), np.where(take_rc, rlo, lo)


def mask_words(hi: np.ndarray, lo: np.ndarray, k: int):
    """Vectorised :func:`prefix_bits`."""
    m = prefix_mask(k)
    return hi & np.uint64(m >> 64), lo & np.uint64(m & 0xFFFF_FFFF_FFFF_FFFF)


def words_to_ints(hi: np.ndarray, lo: np.ndarray) -> list[int]:
    return [(h << 64) | l for h, l in zip(hi.tolist(), lo.tolist())]


def ints_to_words(values: Sequence[int]):
    hi = np.fromiter((v >> 64 for v in values), dtype=np.uint64, count=len(values))
    lo = np.fromiter(
        (v & 0xFFFF_FFFF_FFFF_FFFF for v in values), dtype=np.uint64, count=len(values)
    )
    return hi, lo


def sort_order(hi: np.ndarray, lo: np.ndarray) -> np.ndarray:
    """Stable argsort of ``(hi, lo)`` pairs.

    Sorts on the high word first and only re-sorts runs that tie on it,
    which are rare for long k-mers.
    """
    order = np.argsort(hi, kind="stable")
    if hi.size < 2:
        return order
    hs = hi[order]
    tie = hs[1:] == hs[:-1]
    if tie.any():
        member = np.zeros(hi.size, dtype=bool)
        member[1:] |= tie
        member[:-1] |= tie
        pos = np.flatnonzero(member)
        sub = order[pos]
        order[pos] = sub[np.lexsort((lo[sub], hi[sub]))]
    return order


def sort_words(hi: np.ndarray, lo: np.ndarray):
    order = sort_order(hi, lo)
    return hi[order], lo[order]


def unique_words(hi: np.ndarray, lo: np.ndarray, return_counts: bool = False):
    """Sort and deduplicate ``(hi, lo)`` pairs."""
    hi, lo = sort_words(hi, lo)
    if hi.size == 0:
        return (hi, lo, np.empty(0, dtype=np.int64)) if return_counts else (hi, lo)
    new = np.empty(hi.size, dtype=bool)
    new[0] = True
    new[1:] = (hi[1:] != hi[:-1]) | (lo[1:] != lo[:-1])
    idx = np.flatnonzero(new)
    if return_counts:
        counts = np.diff(np.append(idx, hi.size))
        return hi[idx], lo[idx], counts
    return hi[idx], lo[idx]


def kmer_ints(seqs: Iterable[str], k: int) -> list[int]:
    """Packed ints of every ambiguity-free window, in read order."""
    out: list[int] = []
    for s in seqs:
        hi, lo, _ = window_words(sequence_codes(s), k)
        out.extend(words_to_ints(hi, lo))
    return out
