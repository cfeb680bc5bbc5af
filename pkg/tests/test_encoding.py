import itertools
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from isp_metagenomics import encoding as enc

dna = st.text(alphabet="ACGT", min_size=1, max_size=enc.MAX_K)


def test_encode_base_codes():
    assert [enc.encode_base(b) for b in "ACGT"] == [0, 1, 2, 3]
    assert enc.encode_base("t") == 3


@pytest.mark.parametrize("bad", ["N", "R", "-", ""])
def test_encode_base_rejects_ambiguous(bad):
    with pytest.raises(enc.AmbiguousBase):
        enc.encode_base(bad)


def test_pack_examples_are_high_aligned():
    assert enc.pack_bits("ACG") == 0b000110 << (128 - 6)
    assert enc.pack_bits("AAA") == 0
    assert enc.pack_kmer("ACG").k == 3


def test_pack_errors():
    with pytest.raises(enc.LengthMismatch):
        enc.pack_bits("ACG", 4)
    with pytest.raises(enc.AmbiguousBase):
        enc.pack_bits("ANG")
    with pytest.raises(enc.LengthMismatch):
        enc.pack_bits("A" * 61)


def test_unused_bits_must_be_zero():
    with pytest.raises(ValueError):
        enc.PackedKmer(1, 3)


def test_compare_random_20mers_against_string_order():
    rng = random.Random(11)
    for _ in range(1000):
        x = "".join(rng.choice("ACGT") for _ in range(20))
        y = "".join(rng.choice("ACGT") for _ in range(20))
        assert enc.compare(enc.pack_kmer(x), enc.pack_kmer(y)) == (x > y) - (x < y)


def test_compare_rejects_mixed_lengths():
    with pytest.raises(enc.LengthMismatch):
        enc.compare(enc.pack_kmer("AC"), enc.pack_kmer("ACG"))


def test_prefix_of_aatcc():
    assert enc.prefix(enc.pack_kmer("AATCC"), 4) == enc.pack_kmer("AATC")
    x = enc.pack_kmer("GATTACA")
    assert enc.prefix(x, x.k) == x
    with pytest.raises(enc.PrefixTooLong):
        enc.prefix(x, 8)


def test_prefix_matches_string_slice_for_random_30mers():
    rng = random.Random(5)
    for _ in range(200):
        s = "".join(rng.choice("ACGT") for _ in range(30))
        km = enc.pack_kmer(s)
        for k2 in range(1, 31):
            assert enc.prefix(km, k2) == enc.pack_kmer(s[:k2])


@pytest.mark.parametrize("k", range(1, 9))
def test_roundtrip_exhaustive_small_k(k):
    seen = set()
    for tup in itertools.product("ACGT", repeat=k):
        s = "".join(tup)
        bits = enc.pack_bits(s)
        assert enc.unpack_bits(bits, k) == s
        seen.add(bits)
    assert len(seen) == 4**k


@settings(max_examples=300)
@given(dna)
def test_roundtrip(s):
    assert enc.unpack_kmer(enc.pack_kmer(s)) == s


@settings(max_examples=10_000, deadline=None)
@given(st.integers(1, enc.MAX_K).flatmap(lambda k: st.tuples(*(st.text("ACGT", min_size=k, max_size=k),) * 2)))
def test_order_isomorphism(pair):
    x, y = pair
    assert (x < y) == (enc.pack_bits(x) < enc.pack_bits(y))


@given(st.integers(2, 40).flatmap(lambda k: st.tuples(
    st.text("ACGT", min_size=k, max_size=k), st.text("ACGT", min_size=k, max_size=k), st.integers(1, k))))
def test_prefix_monotone(case):
    x, y, k2 = case
    if x > y:
        x, y = y, x
    assert enc.prefix_bits(enc.pack_bits(x), k2) <= enc.prefix_bits(enc.pack_bits(y), k2)


def test_reverse_complement_and_canonical():
    assert enc.reverse_complement("AACG") == "CGTT"
    bits = enc.pack_bits("TTTG")
    assert enc.canonical_bits(bits, 4) == enc.pack_bits("CAAA")
    assert enc.canonical_bits(enc.pack_bits("AAAA"), 4) == enc.pack_bits("AAAA")


@pytest.mark.parametrize("k", [1, 2, 5, 31, 32, 33, 47, 60])
def test_window_words_match_scalar_packing(k):
    rng = random.Random(k)
    seq = "".join(rng.choice("ACGTACGTACGTN") for _ in range(400))
    hi, lo, starts = enc.window_words(enc.sequence_codes(seq), k)
    got = enc.words_to_ints(hi, lo)
    want = [(i, enc.pack_bits(seq[i:i + k])) for i in range(len(seq) - k + 1) if "N" not in seq[i:i + k]]
    assert starts.tolist() == [i for i, _ in want]
    assert got == [v for _, v in want]


@pytest.mark.parametrize("k", [7, 60])
def test_canonical_words_match_scalar(k):
    rng = random.Random(3)
    seq = "".join(rng.choice("ACGT") for _ in range(200))
    hi, lo, _ = enc.window_words(enc.sequence_codes(seq), k)
    chi, clo = enc.canonical_words(hi, lo, k)
    assert enc.words_to_ints(chi, clo) == [enc.canonical_bits(v, k) for v in enc.words_to_ints(hi, lo)]


def test_mask_words_equals_prefix_mask():
    rng = random.Random(9)
    vals = [enc.pack_bits("".join(rng.choice("ACGT") for _ in range(60))) for _ in range(100)]
    hi, lo = enc.ints_to_words(vals)
    for k in (1, 30, 32, 33, 59):
        mh, ml = enc.mask_words(hi, lo, k)
        assert enc.words_to_ints(mh, ml) == [v & enc.prefix_mask(k) for v in vals]


@settings(max_examples=200)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), max_size=60))
def test_sort_order_is_stable_lexicographic(pairs):
    hi = np.array([p[0] for p in pairs], dtype=np.uint64)
    lo = np.array([p[1] for p in pairs], dtype=np.uint64)
    order = enc.sort_order(hi, lo).tolist()
    assert order == sorted(range(len(pairs)), key=lambda i: (pairs[i], i))


def test_unique_words_counts():
    vals = [5, 1, 5, 3, 1, 5]
    hi, lo = enc.ints_to_words(vals)
    uh, ul, counts = enc.unique_words(hi, lo, return_counts=True)
    assert enc.words_to_ints(uh, ul) == [1, 3, 5]
    assert counts.tolist() == [2, 1, 3]
