"""Benchmark leakage check over generated instructions.

Hashes every normalized benchmark prompt, then tests each dataset
instruction's normalized hash for membership. Matching is exact on the
normalized text: whitespace runs and letter case cannot hide a copy,
but paraphrases are out of scope on purpose. Contamination produces a
report and a distinct exit status; records are only dropped when the
caller explicitly asks.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from .jsonl import JsonlReader, dumps, write_jsonl
from .model import Quadruplet, canonical_id

EXIT_CONTAMINATED = 4


@dataclass(frozen=True)
class BenchmarkSet:
    name: str
    problem_hashes: frozenset[str]
    skipped_rows: int = 0

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("benchmark name must be non-empty")
        if not self.problem_hashes:
            raise ValueError(f"empty benchmark: {self.name}")

    def __len__(self) -> int:
        return len(self.problem_hashes)


def load_benchmark(path: str, name: Optional[str] = None) -> BenchmarkSet:
    """Read a JSONL file of {id, prompt} rows into a hash set.

    Malformed rows are skipped and counted; duplicate prompts collapse.
    """
    label = name or os.path.splitext(os.path.basename(path))[0]
    hashes = set()
    reader = JsonlReader(path)
    skipped = 0
    for row in reader:
        prompt = row.get("prompt")
        if not isinstance(prompt, str) or not prompt.strip():
            skipped += 1
            continue
        hashes.add(canonical_id(prompt))
    skipped += reader.malformed
    return BenchmarkSet(
        name=label, problem_hashes=frozenset(hashes), skipped_rows=skipped
    )


@dataclass(frozen=True)
class OverlapReport:
    scanned: int
    benchmarks: tuple[tuple[str, int], ...]  # (name, problem count)
    hits: tuple[tuple[str, str], ...]  # (dataset id, benchmark name), sorted

    @property
    def clean(self) -> bool:
        return not self.hits

    @property
    def exit_code(self) -> int:
        return 0 if self.clean else EXIT_CONTAMINATED

    def to_dict(self) -> dict:
        return {
            "scanned": self.scanned,
            "benchmarks": [
                {"name": name, "problems": count} for name, count in self.benchmarks
            ],
            "hits": [
                {"dataset_id": did, "benchmark": bench} for did, bench in self.hits
            ],
            "clean": self.clean,
        }


def check_overlap(
    quadruplets: Iterable[Quadruplet], benchmarks: Sequence[BenchmarkSet]
) -> OverlapReport:
    """Membership-test every instruction hash against every benchmark.

    The hit set is sorted, so permuting the input stream cannot change
    the report.
    """
    names = [b.name for b in benchmarks]
    if len(names) != len(set(names)):
        raise ValueError("benchmark names must be unique per run")
    hits = []
    scanned = 0
    for quad in quadruplets:
        scanned += 1
        digest = canonical_id(quad.instruction.text)
        for bench in benchmarks:
            if digest in bench.problem_hashes:
                hits.append((quad.instruction.id, bench.name))
    return OverlapReport(
        scanned=scanned,
        benchmarks=tuple((b.name, len(b)) for b in benchmarks),
        hits=tuple(sorted(hits)),
    )


def run_decontam(
    in_path: str,
    benchmark_paths: Sequence[str],
    report_path: Optional[str] = None,
    drop_hits: bool = False,
    out_path: Optional[str] = None,
) -> OverlapReport:
    """File-level pass: load benchmarks, scan the dataset, write the report.

    With drop_hits, a filtered copy goes to out_path (required then);
    without it the dataset is left untouched and contamination is only
    reported.
    """
    if not benchmark_paths:
        raise ValueError("at least one benchmark file is required")
    if drop_hits and not out_path:
        raise ValueError("drop_hits requires an output path")
    benchmarks = [load_benchmark(p) for p in benchmark_paths]
    quads = [Quadruplet.from_dict(rec) for rec in JsonlReader(in_path)]
    report = check_overlap(quads, benchmarks)
    if report_path:
        with open(report_path, "w", encoding="utf-8") as fh:
            fh.write(dumps(report.to_dict()) + "\n")
    if drop_hits and out_path:
        contaminated = {did for did, _bench in report.hits}
        write_jsonl(
            out_path,
            (q.to_dict() for q in quads if q.instruction.id not in contaminated),
        )
    return report
