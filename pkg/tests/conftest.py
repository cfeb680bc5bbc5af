"""Shared generators for the test suite."""

from __future__ import annotations

import random

import pytest

from isp_metagenomics import encoding as enc
from isp_metagenomics.refdb import SketchTables, tables_from_sets


def random_levels(rng: random.Random, k_max: int = 16, max_levels: int = 4) -> tuple[int, ...]:
    n = rng.randint(1, min(max_levels, k_max))
    rest = rng.sample(range(1, k_max), n - 1)
    return (k_max, *sorted(rest, reverse=True))


def random_sketch_tables(
    rng: random.Random,
    levels: tuple[int, ...],
    n_taxa: int = 6,
    n_keys: int = 40,
    alphabet: str = "ACGT",
) -> SketchTables:
    """Random prefix-closed sketch tables.

    A narrow alphabet makes shared prefixes likely.  Shorter levels may add
    taxIDs to prefixes of keys other taxa own, which is what produces
    non-empty KSS slots.
    """
    k_max = levels[0]
    pool = sorted({enc.pack_bits("".join(rng.choice(alphabet) for _ in range(k_max))) for _ in range(n_keys)})
    taxids = rng.sample(range(1, 1000), n_taxa)
    per_taxid = {t: {k_max: set(rng.sample(pool, rng.randint(1, max(1, len(pool) // 3))))} for t in taxids}
    owned = sorted(set().union(*(by_level[k_max] for by_level in per_taxid.values())))
    for t in taxids:
        for k in levels[1:]:
            extra = rng.sample(owned, min(len(owned), rng.randint(0, 3)))
            per_taxid[t][k] = {x & enc.prefix_mask(k) for x in extra}
    return tables_from_sets(levels, per_taxid)


def random_queries(rng: random.Random, flat: SketchTables, n: int, alphabet: str = "ACGT") -> list[int]:
    """Sorted distinct k_max-mers: half sketch keys, half random strings."""
    keys = [x for x, _ in flat.tables[flat.k_max]]
    k = flat.k_max
    n = min(n, len(alphabet) ** k)
    picked = set(rng.sample(keys, min(len(keys), n // 2)))
    while len(picked) < n:
        picked.add(enc.pack_bits("".join(rng.choice(alphabet) for _ in range(k))))
    return sorted(picked)


@pytest.fixture
def toy_flat() -> SketchTables:
    """Two-level toy: AATCC -> {2}; its 4-prefix AATC -> {2, 7}."""
    return tables_from_sets(
        (5, 4),
        {2: {5: {enc.pack_bits("AATCC")}}, 7: {4: {enc.pack_bits("AATC")}}},
    )
