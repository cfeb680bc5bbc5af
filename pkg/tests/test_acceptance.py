"""Exit-criteria checks.

Each ``criterion_N`` runs one check end to end and returns ``(ok, detail,
artifacts)``, where ``artifacts`` maps a name to the bytes the check
produced.  The tests print one ``PASS``/``FAIL`` line per criterion; the
determinism check reruns the others and compares artifact hashes.
"""

from __future__ import annotations

import csv
import hashlib
import json
import random
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from isp_metagenomics import cli, refdb, ssd_sim as sim, synth
from isp_metagenomics import isp_core as core
from isp_metagenomics.tst import build_tree

from conftest import random_levels, random_queries, random_sketch_tables

pytestmark = pytest.mark.acceptance

SEED = 2024
_first_run: dict[int, dict[str, str]] = {}


def _digest(artifacts: dict[str, bytes]) -> dict[str, str]:
    return {name: hashlib.sha256(data).hexdigest() for name, data in sorted(artifacts.items())}


def _json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True).encode()


# ---------------------------------------------------------------- criteria


def criterion_1(workdir: Path):
    """FTL arithmetic for a 4 TiB database in 12 MiB blocks."""
    t0 = time.perf_counter()
    m = sim.place_database(4 * sim.TIB, sim.preset("ssd-c"), block_bytes=12 * sim.MIB)
    blocks, l2p, total = len(m.blocks), sim.l2p_metadata_size(m), sim.metadata_size(m)
    elapsed = time.perf_counter() - t0
    # quoted sizes: 4 B per block plus 16 B for the L2P part, another 4 B per block of counters
    want_l2p, want_total = 4 * 349_525 + 16, 8 * 349_525 + 16
    ok = blocks == 349_525 and abs(l2p - want_l2p) <= 64 and abs(total - want_total) <= 64 and elapsed < 1
    detail = f"blocks={blocks} (want 349525) l2p={l2p} total={total} {elapsed:.2f}s"
    return ok, detail, {"ftl.json": _json({"blocks": blocks, "l2p": l2p, "total": total, "ids": m.blocks[:64]})}


def criterion_2(workdir: Path):
    """KSS retrieval equals the tree and flat-table oracles on 500 random databases."""
    t0 = time.perf_counter()
    rng = random.Random(SEED)
    mismatches, log = 0, []
    for _ in range(500):
        levels = random_levels(rng, k_max=rng.randint(1, 16), max_levels=4)
        alphabet = rng.choice(["AC", "ACG", "ACGT"])
        flat = random_sketch_tables(rng, levels, n_taxa=rng.randint(1, 8), alphabet=alphabet)
        inter = random_queries(rng, flat, rng.randint(0, 40), alphabet=alphabet)
        got = core.retrieve_taxids(inter, refdb.build_kss(flat))
        if not got == core.retrieve_taxids_tree(inter, build_tree(flat)) == core.retrieve_taxids_flat(inter, flat):
            mismatches += 1
        log.append(got.as_dict())
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 60
    return ok, f"500 databases, {mismatches} mismatches, {elapsed:.1f}s", {"hits.json": _json(repr(log))}


def _csv_rows(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _outputs(run: Path, base: Path) -> dict[str, bytes]:
    out = {}
    for p in sorted(run.rglob("*")):
        if p.is_file():
            data = p.read_bytes()
            if p.name == cli.MANIFEST:
                m = json.loads(data)
                m.pop("duration_s")
                data = _json(m)
            out[p.relative_to(base).as_posix()] = data
    return out


def criterion_3(workdir: Path):
    """Ground-truth recovery on 20 synthetic communities through the CLI."""
    t0 = time.perf_counter()
    failures, worst_l1, artifacts = [], 0.0, {}
    for seed in range(20):
        d = workdir / f"community_{seed:02d}"
        c = synth.make_community(SEED + seed)
        synth.write_genome_dir(d / "genomes", c.genomes)
        synth.write_reads(d / "reads.fa", c.reads)
        if cli.main(["build-db", str(d / "genomes"), "--out", str(d / "db")]) != 0:
            failures.append(f"{seed}:build")
            continue
        if cli.main(["analyze", str(d / "reads.fa"), "--db", str(d / "db"), "--tau", "0.2", "--out", str(d / "out")]) != 0:
            failures.append(f"{seed}:analyze")
            continue
        present = {int(r["taxid"]) for r in _csv_rows(d / "out" / "presence.csv") if r["present"] == "1"}
        abundance = {int(r["taxid"]): float(r["abundance"]) for r in _csv_rows(d / "out" / "abundance.csv")}
        abundance.pop(0, None)
        l1 = sum(abs(abundance.get(t, 0.0) - c.truth.get(t, 0.0)) for t in set(abundance) | set(c.truth))
        worst_l1 = max(worst_l1, l1)
        if present != c.present or l1 > 0.05:
            failures.append(f"{seed}:presence={present == c.present},l1={l1:.4f}")
        artifacts.update(_outputs(d / "db", workdir))
        artifacts.update(_outputs(d / "out", workdir))
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 300
    detail = f"20 communities, failures={failures or 'none'}, worst L1={worst_l1:.4f}, {elapsed:.0f}s"
    return ok, detail, artifacts


def criterion_4(workdir: Path):
    """Merge-join intersection on 1e5-element inputs."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(SEED)
    a = np.unique(rng.integers(0, 1 << 40, 100_000, dtype=np.int64))
    b = np.unique(np.concatenate([rng.integers(0, 1 << 40, 100_000, dtype=np.int64), a[::5]]))
    a, b = a.tolist(), b.tolist()
    out = core.stream_intersect(a, b)
    want = sorted(set(a) & set(b))
    elapsed = time.perf_counter() - t0
    ok = out.kmers == want and out.comparisons <= len(a) + len(b) and elapsed < 10
    detail = f"|A|={len(a)} |B|={len(b)} matches={len(out.kmers)} comparisons={out.comparisons} {elapsed:.2f}s"
    return ok, detail, {"intersection.json": _json([out.kmers, out.comparisons])}


def criterion_5(workdir: Path):
    """Overlap benefit at 64 buckets, and dominance on 1000 random workloads."""
    t0 = time.perf_counter()
    res = sim.run_experiment("overlap", sim.preset("ssd-c"), sim.Workload(n_buckets=64))
    ovl, ser = res.summary()["overlapped"][0], res.summary()["serialized"][0]
    reduction = 1 - ovl / ser
    rng = np.random.default_rng(SEED)
    violations, rows = 0, []
    for _ in range(1000):
        buckets = rng.integers(0, 4 * sim.MIB, int(rng.integers(1, 33))).tolist()
        rates = {s: float(10 ** rng.uniform(7, 10)) for s in ("sort", "interface", "isp")}
        retrieve = int(rng.integers(0, sim.MIB))
        o = sim.sim_pipeline(buckets, rates, True, retrieve).total
        s = sim.sim_pipeline(buckets, rates, False, retrieve).total
        violations += o > s + 1e-6
        rows.append((o, s))
    elapsed = time.perf_counter() - t0
    ok = reduction >= 0.20 and violations == 0 and elapsed < 30
    detail = f"64 buckets: overlapped {reduction:.1%} lower; 1000 workloads, {violations} violations, {elapsed:.1f}s"
    return ok, detail, {"summary.csv": res.summary_csv().encode(), "random.json": _json(rows)}


def criterion_6(workdir: Path):
    """In-storage streaming throughput against channel count."""
    t0 = time.perf_counter()
    cfg, size = sim.preset("ssd-c"), 8 * sim.GIB
    thr = {}
    for ch in (4, 8, 16, 32):
        c = replace(cfg, channels=ch)
        thr[ch] = size / sim.isp_stream_time(size, c) * 1e6
    worst = 0.0
    for ch, rate in thr.items():
        ideal = min(thr[4] * ch / 4, ch * cfg.channel_rate)
        worst = max(worst, abs(rate / ideal - 1))
    capped = all(rate <= ch * cfg.channel_rate * (1 + 1e-9) for ch, rate in thr.items())
    elapsed = time.perf_counter() - t0
    ok = worst <= 0.05 and capped and elapsed < 10
    rates = ", ".join(f"{ch}ch={r / 1e9:.2f}GB/s" for ch, r in thr.items())
    return ok, f"{rates}; worst deviation {worst:.2%}", {"throughput.json": _json(thr)}


def criterion_7(workdir: Path):
    """Multi-sample analysis reads the database once and speeds up monotonically."""
    t0 = time.perf_counter()
    cfg, db = sim.preset("ssd-c"), 8 * sim.GIB
    results = [sim.sim_multi_sample(s, 16, db, cfg) for s in range(1, 17)]
    once = all(r.db_bytes_read == db for r in results)
    baseline = all(r.baseline_db_bytes_read == db * r.samples for r in results)
    speedups = [r.speedup for r in results]
    monotone = all(b >= a for a, b in zip(speedups, speedups[1:]))
    elapsed = time.perf_counter() - t0
    ok = once and baseline and monotone and elapsed < 10
    detail = f"one pass for S=1..16: {once}; speedup {speedups[0]:.2f} -> {speedups[-1]:.2f}, monotone: {monotone}"
    rows = [(r.samples, r.db_bytes_read, r.baseline_db_bytes_read, r.total_us) for r in results]
    return ok, detail, {"multi.json": _json(rows)}


def criterion_8(workdir: Path):
    """Serialized sizes of the three sketch layouts on a 1e5-entry sketch set."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(SEED)
    genomes = [(t, synth.random_genome(rng, 12_000)) for t in range(1, 31)]
    flat = refdb.build_sketches(genomes, s=1000, k_levels=(60, 50, 40, 30))
    tree, kss = build_tree(flat), refdb.build_kss(flat)
    entries = len(flat.tables[flat.k_max])
    sizes = refdb.structure_sizes(flat, tree, kss)
    elapsed = time.perf_counter() - t0
    ok = entries >= 100_000 and sizes["flat"] > sizes["kss"] > sizes["tree"] and elapsed < 30
    detail = f"{entries} entries: flat={sizes['flat']} kss={sizes['kss']} tree={sizes['tree']} {elapsed:.1f}s"
    artifacts = {
        "flat.bin": refdb.flat_to_bytes(flat),
        "kss.bin": refdb.kss_to_bytes(kss),
        "tree.bin": tree.to_bytes(),
    }
    return ok, detail, artifacts


CRITERIA = {n: globals()[f"criterion_{n}"] for n in range(1, 9)}


# ---------------------------------------------------------------- tests


def _report(capsys, n: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}", flush=True)


@pytest.mark.parametrize("n", sorted(CRITERIA))
def test_criterion(n, tmp_path, capsys):
    ok, detail, artifacts = CRITERIA[n](tmp_path)
    _first_run[n] = _digest(artifacts)
    _report(capsys, n, ok, detail)
    assert ok, detail


def test_criterion_9_determinism(tmp_path, capsys):
    differing = []
    for n, run in sorted(CRITERIA.items()):
        if n not in _first_run:
            _first_run[n] = _digest(run(tmp_path / f"first_{n}")[2])
        again = _digest(run(tmp_path / f"again_{n}")[2])
        if again != _first_run[n]:
            differing.append(n)
    ok = not differing
    _report(capsys, 9, ok, f"reran criteria 1-8, differing outputs: {differing or 'none'}")
    assert ok
