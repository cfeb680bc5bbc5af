"""Command-line entry point: ``ispmg build-db | analyze | simulate | report``.

Exit codes: 0 success, 1 data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import __version__
from . import abundance as ab
from . import isp_core, query_prep, refdb, ssd_sim
from .tst import build_tree

EXIT_OK, EXIT_DATA, EXIT_USAGE = 0, 1, 2

DB_FILES = {
    "kmers": "kmers.mgdb",
    "flat": "sketch_flat.bin",
    "tree": "sketch_tree.bin",
    "kss": "sketch_kss.bin",
}
SPECIES_DIR = "species"
MANIFEST = "manifest.json"


class DataError(Exception):
    """Bad input data; maps to exit code 1."""


class KMismatch(DataError):
    pass


class MissingManifest(DataError):
    pass


# --------------------------------------------------------------------------
# manifest


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(command: str, params: dict, input_digests: dict[str, str]) -> str:
    blob = json.dumps({"command": command, "parameters": params, "inputs": input_digests}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def write_manifest(out: Path, command: str, params: dict, inputs: dict[str, str], outputs: list[Path], started: float) -> dict:
    manifest = {
        "command": command,
        "parameters": params,
        "inputs": inputs,
        "outputs": {p.relative_to(out).as_posix(): sha256_file(p) for p in sorted(outputs)},
        "tool_version": __version__,
        "config_hash": config_hash(command, params, inputs),
        "duration_s": round(time.perf_counter() - started, 6),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def _write_outputs(out: Path, files: dict[str, bytes]) -> list[Path]:
    """Write everything at the end so a failed run leaves no partial files."""
    written = []
    for name, data in sorted(files.items()):
        p = out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(data)
        written.append(p)
    return written


def _csv_bytes(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue().encode("utf-8")


# --------------------------------------------------------------------------
# build-db


def default_levels(k: int) -> tuple[int, ...]:
    return (k,) + tuple(x for x in refdb.DEFAULT_LEVELS[1:] if x < k)


def load_genomes(genome_dir: Path) -> list[tuple[int, str]]:
    if not genome_dir.is_dir():
        raise DataError(f"{genome_dir}: not a directory")
    files = sorted(genome_dir.glob("*.fasta"))
    if not files:
        raise DataError(f"{genome_dir}: no <taxid>.fasta files")
    genomes = []
    for f in files:
        try:
            taxid = int(f.stem)
        except ValueError:
            raise DataError(f"{f}: file name is not a taxID") from None
        try:
            seqs = list(query_prep.read_sequences(f))
        except (ValueError, UnicodeDecodeError) as e:
            raise DataError(f"{f}: {e}") from None
        seq = "N".join(s.upper() for s in seqs if s)
        if not seq:
            raise DataError(f"{f}: empty genome")
        genomes.append((taxid, seq))
    return sorted(genomes)


def cmd_build_db(args) -> int:
    started = time.perf_counter()
    genome_dir = Path(args.genome_dir)
    genomes = load_genomes(genome_dir)
    k = args.k
    levels = tuple(args.levels) if args.levels else default_levels(k)
    if levels[0] != k:
        raise DataError(f"first level must equal k={k}")
    db = refdb.build_kmer_db(genomes, k)
    flat = refdb.build_sketches(genomes, args.sketch_size, levels, args.seed)
    kss = refdb.build_kss(flat)
    tree = build_tree(flat)
    files = {
        DB_FILES["kmers"]: db.to_bytes(),
        DB_FILES["flat"]: refdb.flat_to_bytes(flat),
        DB_FILES["kss"]: refdb.kss_to_bytes(kss),
        DB_FILES["tree"]: tree.to_bytes(),
    }
    for taxid, seq in genomes:
        files[f"{SPECIES_DIR}/{taxid}.idx"] = ab.build_species_index(taxid, seq, k).to_bytes()
    out = Path(args.out)
    written = _write_outputs(out, files)
    params = {"k": k, "levels": list(levels), "sketch_size": args.sketch_size, "seed": args.seed}
    inputs = {f.name: sha256_file(f) for f in sorted(genome_dir.glob("*.fasta"))}
    write_manifest(out, "build-db", params, inputs, written, started)
    print(f"built {len(genomes)} genomes, {db.count} k-mers, levels {levels} -> {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# analyze


def cmd_analyze(args) -> int:
    started = time.perf_counter()
    db_dir = Path(args.db)
    reads_path = Path(args.reads)
    try:
        db = refdb.SortedKmerDatabase.read(db_dir / DB_FILES["kmers"])
        kss = refdb.kss_from_bytes((db_dir / DB_FILES["kss"]).read_bytes())
    except FileNotFoundError as e:
        raise DataError(f"{db_dir}: incomplete database ({e.filename})") from None
    if args.k is not None and args.k != db.k:
        raise KMismatch(f"reads use k={args.k} but the database was built with k={db.k}")
    reads = [r.upper() for r in query_prep.read_sequences(reads_path)]
    max_count = math.inf if args.max_count is None else args.max_count
    prepared = query_prep.prepare_queries(
        reads, db.k, args.buckets, args.min_count, max_count, args.dram_budget
    )
    buckets = [prepared.bucket_kmers(i) for i in range(prepared.spec.count)]
    hits, inter = isp_core.find_candidates(buckets, db.values, kss)
    sizes = kss.sketch_sizes()
    present = isp_core.call_presence(hits, sizes, args.tau)
    contain = isp_core.containment(hits, sizes)

    presence_rows = [
        (t, f"{hits.weighted(t):.6f}", f"{contain[t]:.6f}", int(t in present))
        for t in sorted(hits.hits)
    ]
    if reads and present:
        indexes = [ab.SpeciesIndex.from_bytes((db_dir / SPECIES_DIR / f"{t}.idx").read_bytes()) for t in sorted(present)]
        profile = ab.estimate_abundance(reads, ab.merge_indexes(indexes), present)
        abundance_csv = profile.to_csv().encode("utf-8")
    elif reads:
        abundance_csv = ab.AbundanceProfile({}, 1.0, len(reads)).to_csv().encode("utf-8")
    else:
        abundance_csv = _csv_bytes(("taxid", "abundance"), [])
    out = Path(args.out)
    written = _write_outputs(out, {
        "presence.csv": _csv_bytes(("taxid", "weighted_hits", "containment", "present"), presence_rows),
        "abundance.csv": abundance_csv,
    })
    params = {
        "k": db.k, "tau": args.tau, "buckets": args.buckets, "min_count": args.min_count,
        "max_count": args.max_count, "dram_budget": args.dram_budget,
    }
    inputs = {reads_path.name: sha256_file(reads_path)}
    inputs.update({f"db/{n}": sha256_file(db_dir / n) for n in (DB_FILES["kmers"], DB_FILES["kss"])})
    write_manifest(out, "analyze", params, inputs, written, started)
    print(f"{len(reads)} reads, {len(inter)} intersecting k-mers, {len(present)} taxa present -> {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# simulate


def resolve_config(value: str | None) -> ssd_sim.SsdConfig:
    if value is None:
        return ssd_sim.preset("ssd-c")
    if value.lower() in ssd_sim.PRESETS:
        return ssd_sim.preset(value)
    return ssd_sim.load_config(value)


def cmd_simulate(args) -> int:
    started = time.perf_counter()
    cfg = resolve_config(args.config)
    wl = ssd_sim.Workload(
        query_bytes=int(args.query_gib * ssd_sim.GIB),
        db_bytes=int(args.db_gib * ssd_sim.GIB),
        n_buckets=args.buckets,
        sort_rate=args.sort_rate,
    )
    params: dict = {}
    if args.channels:
        params["channels"] = args.channels
    if args.scenario == "multi_sample":
        params["max_samples"] = args.samples
    res = ssd_sim.run_experiment(args.scenario, cfg, wl, **params)
    out = Path(args.out)
    written = _write_outputs(out, {
        "timeline.csv": res.timeline_csv().encode("utf-8"),
        "summary.csv": res.summary_csv().encode("utf-8"),
    })
    all_params = {
        "scenario": args.scenario, "config": cfg.as_dict(), "workload": asdict(wl), "sweep": params,
    }
    write_manifest(out, "simulate", all_params, {}, written, started)
    sys.stdout.write(res.summary_csv())
    return EXIT_OK


# --------------------------------------------------------------------------
# report

REPORT_COLUMNS = ("run", "command", "scenario", "config_hash", "results", "headline")


def _report_row(run: Path) -> dict:
    mpath = run / MANIFEST
    if not mpath.is_file():
        raise MissingManifest(f"{run}: no {MANIFEST}")
    m = json.loads(mpath.read_text(encoding="utf-8"))
    command = m["command"]
    scenario, results, headline = "", 0, ""
    if command == "simulate":
        scenario = m["parameters"]["scenario"]
        with open(run / "summary.csv", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        results = len(rows)
        headline = max((float(r["speedup_vs_baseline"]) for r in rows), default=0.0)
        headline = f"max_speedup={headline:.3f}"
    elif command == "analyze":
        with open(run / "presence.csv", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        results = len(rows)
        headline = f"present={sum(int(r['present']) for r in rows)}"
    elif command == "build-db":
        results = sum(1 for k in m["outputs"] if k.startswith(SPECIES_DIR + "/"))
        headline = f"genomes={results}"
    return {
        "run": run.as_posix(), "command": command, "scenario": scenario,
        "config_hash": m["config_hash"], "results": results, "headline": headline,
    }


def cmd_report(args) -> int:
    started = time.perf_counter()
    runs = [Path(r) for r in args.runs]
    rows = [_report_row(r) for r in runs]
    out = Path(args.out)
    written = _write_outputs(out, {
        "report.csv": _csv_bytes(REPORT_COLUMNS, [[r[c] for c in REPORT_COLUMNS] for r in rows]),
        "report.json": (json.dumps(rows, indent=2, sort_keys=True) + "\n").encode("utf-8"),
    })
    inputs = {r.as_posix(): sha256_file(r / MANIFEST) for r in runs}
    write_manifest(out, "report", {"runs": [r.as_posix() for r in runs]}, inputs, written, started)
    print(f"{len(rows)} runs -> {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, default=refdb.DEFAULT_SEED, help="hash/shuffle seed")
    common.add_argument("--threads", type=_positive_int, default=1, help="worker cap (runs are single-threaded)")

    p = argparse.ArgumentParser(prog="ispmg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build-db", parents=[common], help="build the k-mer database and sketches")
    b.add_argument("genome_dir", help="directory of <taxid>.fasta files")
    b.add_argument("--k", type=int, default=refdb.DEFAULT_K)
    b.add_argument("--levels", type=lambda s: [int(x) for x in s.split(",")], help="comma-separated, decreasing")
    b.add_argument("--sketch-size", type=_positive_int, default=refdb.DEFAULT_SKETCH_SIZE)
    b.set_defaults(func=cmd_build_db)

    a = sub.add_parser("analyze", parents=[common], help="presence/absence and abundance for one sample")
    a.add_argument("reads", help="FASTA/FASTQ reads")
    a.add_argument("--db", required=True, help="directory written by build-db")
    a.add_argument("--k", type=int, default=None, help="expected k (checked against the database)")
    a.add_argument("--tau", type=float, default=isp_core.DEFAULT_TAU)
    a.add_argument("--buckets", type=_positive_int, default=query_prep.DEFAULT_BUCKETS)
    a.add_argument("--min-count", type=_positive_int, default=1)
    a.add_argument("--max-count", type=_positive_int, default=None)
    a.add_argument("--dram-budget", type=_positive_int, default=None, help="host bytes for k-mer buckets")
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("simulate", parents=[common], help="run a simulator sweep")
    s.add_argument("scenario", choices=sorted(ssd_sim.SCENARIOS))
    s.add_argument("--config", help="ssd-c, ssd-p, or a key = value config file")
    s.add_argument("--buckets", type=_positive_int, default=query_prep.DEFAULT_BUCKETS)
    s.add_argument("--query-gib", type=float, default=1.0)
    s.add_argument("--db-gib", type=float, default=8.0)
    s.add_argument("--sort-rate", type=float, default=1.0e9, help="host sort rate, bytes/s")
    s.add_argument("--channels", type=lambda v: [int(x) for x in v.split(",")], help="channel sweep, e.g. 4,8,16")
    s.add_argument("--samples", type=_positive_int, default=16, help="largest sample count for multi_sample")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("report", parents=[common], help="consolidate run directories")
    r.add_argument("runs", nargs="*", help="run directories containing manifest.json")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "tau", None) is not None and not 0 < args.tau <= 1:
        parser.error("--tau must be in (0, 1]")
    try:
        return args.func(args)
    except ssd_sim.UnknownScenario as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
