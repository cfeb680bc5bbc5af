"""Synthetic genomes, communities and error-free reads with known ground truth."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

BASES = np.frombuffer(b"ACGT", dtype=np.uint8)


def random_genome(rng: np.random.Generator, length: int) -> str:
    return BASES[rng.integers(0, 4, length)].tobytes().decode("ascii")


def sample_reads(rng: np.random.Generator, genome: str, n: int, read_len: int = 150) -> list[str]:
    """``n`` forward-strand reads at uniform start positions."""
    if len(genome) < read_len:
        raise ValueError("genome shorter than the read length")
    starts = rng.integers(0, len(genome) - read_len + 1, n)
    return [genome[s:s + read_len] for s in starts.tolist()]


@dataclass
class Community:
    genomes: dict[int, str]      # every reference in the database
    present: set[int]            # taxIDs the reads were drawn from
    reads: list[str]
    truth: dict[int, float]      # read fraction per present taxID


def make_community(
    seed: int,
    n_present: tuple[int, int] = (5, 20),
    length: tuple[int, int] = (10_000, 100_000),
    n_decoys: int = 3,
    coverage: tuple[float, float] = (1.0, 3.0),
    read_len: int = 150,
) -> Community:
    rng = np.random.default_rng(seed)
    n = int(rng.integers(n_present[0], n_present[1] + 1))
    taxids = sorted(rng.choice(np.arange(1, 10_000), n + n_decoys, replace=False).tolist())
    genomes = {t: random_genome(rng, int(rng.integers(length[0], length[1] + 1))) for t in taxids}
    present = set(rng.choice(taxids, n, replace=False).tolist())
    reads: list[str] = []
    counts = {}
    for t in sorted(present):
        cov = float(rng.uniform(*coverage))
        k = max(1, int(round(cov * len(genomes[t]) / read_len)))
        reads.extend(sample_reads(rng, genomes[t], k, read_len))
        counts[t] = k
    order = rng.permutation(len(reads))
    reads = [reads[i] for i in order]
    total = sum(counts.values())
    return Community(genomes, present, reads, {t: c / total for t, c in counts.items()})


def write_fasta(path: str | Path, records: list[tuple[str, str]], width: int = 80) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for name, seq in records:
            fh.write(f">{name}\n")
            for i in range(0, len(seq), width):
                fh.write(seq[i:i + width] + "\n")


def write_genome_dir(directory: str | Path, genomes: dict[int, str]) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for t, seq in sorted(genomes.items()):
        write_fasta(d / f"{t}.fasta", [(f"taxid_{t}", seq)])


def write_reads(path: str | Path, reads: list[str]) -> None:
    write_fasta(path, [(f"r{i}", r) for i, r in enumerate(reads)], width=len(reads[0]) if reads else 80)
