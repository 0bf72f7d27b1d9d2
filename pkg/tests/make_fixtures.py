"""Regenerates the bundled pipeline fixtures under tests/fixtures/.

Run manually after changing prompt grammars or record schemas:

    python tests/make_fixtures.py

The script replays the full pipeline against a scratch directory to
prove the recording is self-consistent (every scripted reply consumed,
dedup verifier count exact) before writing the final files.
"""

import json
import os
import shutil
import sys
import tempfile

sys.path.insert(0, os.path.dirname(__file__))

from mock_scripts import evolve_instruction, pipeline_script, structure_instruction  # noqa: E402

from taskmill.jsonl import write_jsonl  # noqa: E402
from taskmill.model import SeedTask  # noqa: E402

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")

N_SEEDS = 20
N_OFFSPRING = 12
PERMUTE_AT = (4, 8)

SEED_SPECS = [
    ("Balanced brackets", "Check whether a string of brackets is balanced.",
     ("Only ()[]{} appear.",), (("([])", "true"), ("([)]", "false"))),
    ("Run-length encoding", "Encode a string as character-count pairs.",
     (), (("aaabcc", "a3b1c2"),)),
    ("Digit sum", "Sum the decimal digits of a non-negative integer.",
     ("Input fits in 64 bits.",), (("1234", "10"),)),
    ("Merge intervals", "Merge overlapping integer intervals into a minimal set.",
     ("Intervals are inclusive.", "Input may be unsorted."),
     (("[[1,3],[2,6]]", "[[1,6]]"),)),
    ("Caesar cipher", "Shift each letter by a fixed offset, preserving case.",
     ("Non-letters pass through unchanged.",), (("abc, 1", "bcd"),)),
    ("Matrix transpose", "Transpose a rectangular matrix given as nested lists.",
     (), (("[[1,2],[3,4]]", "[[1,3],[2,4]]"),)),
    ("Second largest", "Find the second largest distinct value in a list.",
     ("At least two distinct values exist.",), (("[5,1,5,3]", "3"),)),
    ("Word frequencies", "Count word occurrences, case-insensitive, in prose.",
     ("Words split on whitespace.",), (("A a b", "a:2 b:1"),)),
    ("Binary gap", "Longest run of zeros between ones in a binary expansion.",
     (), (("9", "2"),)),
    ("Roman numerals", "Convert an integer between 1 and 3999 to Roman numerals.",
     ("Use standard subtractive forms.",), (("944", "CMXLIV"),)),
    ("Flatten nesting", "Flatten arbitrarily nested lists into one flat list.",
     ("Preserve element order.",), (("[1,[2,[3]]]", "[1,2,3]"),)),
    ("ISBN check", "Validate an ISBN-10 string including its check digit.",
     ("Hyphens may appear anywhere.",), (("0-306-40615-2", "true"),)),
    ("Collatz length", "Count the Collatz steps needed to reach one.",
     ("Input is at least one.",), (("6", "8"),)),
    ("Anagram groups", "Group words that are anagrams of each other.",
     (), (("eat tea tan", "[[eat,tea],[tan]]"),)),
    ("Moving average", "Compute the k-window moving average of a number list.",
     ("Window never exceeds the list length.",), (("[1,2,3,4], 2", "[1.5,2.5,3.5]"),)),
    ("Leap years", "Decide whether a given year is a leap year.",
     ("Gregorian rules.",), (("1900", "false"), ("2000", "true"))),
    ("Pascal row", "Return the n-th row of Pascal's triangle.",
     ("Rows are zero-indexed.",), (("3", "[1,3,3,1]"),)),
    ("String rotation", "Decide if one string is a rotation of another.",
     (), (("abcde, cdeab", "true"),)),
    ("Stack with min", "Design a stack supporting push, pop, and minimum in O(1).",
     ("All operations constant time.",), (("push 3, push 1, min", "1"),)),
    ("Luhn check", "Validate a card number with the Luhn checksum.",
     ("Input is a digit string.",), (("79927398713", "true"),)),
]


def build_seeds() -> list[dict]:
    records = []
    for title, description, constraints, examples in SEED_SPECS:
        task = SeedTask.create(
            title=title,
            description=description,
            constraints=constraints,
            examples=examples,
        )
        records.append(task.to_dict())
    return records


def build_benchmarks() -> tuple[list[dict], list[dict]]:
    clean = [
        {"prompt": "Sort a linked list in O(n log n) without extra arrays."},
        {"prompt": "Compute the edit distance between two strings."},
        {"prompt": "Detect a cycle in a directed graph via DFS."},
        {"prompt": "Implement a trie supporting prefix counting."},
        {"prompt": "Find the median of two sorted arrays in log time."},
    ]
    # one verbatim evolved instruction, one whitespace-mangled structured one
    hot = [
        {"prompt": evolve_instruction(3)},
        {"prompt": "  " + structure_instruction(2).replace(" ", "  ") + "\n"},
        {"prompt": "Reverse the bits of a 32-bit unsigned integer."},
    ]
    return clean, hot


def golden_config(fixtures_dir: str, run_dir: str, script: str) -> dict:
    return {
        "run_dir": run_dir,
        "seeds": os.path.join(fixtures_dir, "seeds.jsonl"),
        "rng_seed": 7,
        "checkpoint_interval": 1,
        "benchmarks": [os.path.join(fixtures_dir, "benchmark_clean.jsonl")],
        "gateway": {"mode": "mock", "mock_script_path": script},
        "evolution": {"target_accepted": N_OFFSPRING, "refresh_interval": 5},
        "sandbox": {"wall_timeout_ms": 10_000},
    }


def rehearse(fixtures_dir: str, verifier: list[str]) -> dict:
    """Run the full pipeline against a scratch dir; return the dedup report."""
    from taskmill.pipeline import config_from_dict, run

    scratch = tempfile.mkdtemp(prefix="fixture-rehearsal-")
    script_path = os.path.join(scratch, "script.json")
    script = pipeline_script(
        N_SEEDS, N_OFFSPRING, permute_at=PERMUTE_AT, verifier=verifier
    )
    with open(script_path, "w", encoding="utf-8") as fh:
        json.dump(script, fh)
    run_dir = os.path.join(scratch, "run")
    cfg = config_from_dict(
        golden_config(fixtures_dir, run_dir, script_path), base_dir=scratch
    )
    summary = run(cfg)
    assert summary.exit_code == 0, summary.to_dict()
    with open(os.path.join(run_dir, "dedup_report.json"), "r", encoding="utf-8") as fh:
        report = json.load(fh)
    with open(os.path.join(run_dir, "quadruplets.jsonl"), "rb") as fh:
        payload = fh.read()
    shutil.rmtree(scratch)
    report["export_records"] = payload.count(b"\n")
    return report


def main() -> None:
    os.makedirs(FIXTURES, exist_ok=True)
    write_jsonl(os.path.join(FIXTURES, "seeds.jsonl"), build_seeds())
    clean, hot = build_benchmarks()
    write_jsonl(os.path.join(FIXTURES, "benchmark_clean.jsonl"), clean)
    write_jsonl(os.path.join(FIXTURES, "benchmark_hot.jsonl"), hot)

    verifier = ["DUPLICATE"]
    report = rehearse(FIXTURES, verifier)
    extra = report["flagged"] - 1
    if extra > 0:
        # planted pair sits at cosine 1.0, always verified first
        verifier = ["DUPLICATE"] + ["DISTINCT"] * extra
        report = rehearse(FIXTURES, verifier)

    assert report["verified_duplicate"] == 1, report
    assert report["dropped"] == 1, report
    expected = N_SEEDS + N_OFFSPRING - 1
    assert report["export_records"] == expected, report

    script = pipeline_script(
        N_SEEDS, N_OFFSPRING, permute_at=PERMUTE_AT, verifier=verifier
    )
    with open(os.path.join(FIXTURES, "pipeline_script.json"), "w", encoding="utf-8") as fh:
        json.dump(script, fh, indent=1)
        fh.write("\n")
    print(f"fixtures written: flagged={report['flagged']} export={report['export_records']}")


if __name__ == "__main__":
    main()
