"""Shared domain types, canonical identifiers, and the JSONL record schemas.

Every pipeline stage reads and writes these types. All of them are frozen
dataclasses: immutable after construction and safe to hand between worker
threads. Serialization is one JSON object per line (see `taskmill.jsonl`),
field names in lower_snake_case, enum values as lower_snake_case strings,
unset optional fields omitted.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from typing import Any, Optional

_WHITESPACE_RUN = re.compile(r"\s+")


class SchemaError(ValueError):
    """A record failed validation while being parsed or constructed."""


def normalize(text: str) -> str:
    """Lowercase, collapse whitespace runs to single spaces, trim the ends.

    Idempotent. No Unicode folding is applied: two visually distinct
    problems are never merged by accident.
    """
    return _WHITESPACE_RUN.sub(" ", text.lower()).strip()


def canonical_id(text: str) -> str:
    """Content-hash identifier: SHA-256 hex digest of the normalized text.

    Deterministic across runs and machines, which lets the same value double
    as the benchmark-decontamination key.
    """
    return hashlib.sha256(normalize(text).encode("utf-8")).hexdigest()


def utc_now() -> datetime:
    """Current UTC time truncated to whole seconds (reproducible ordering)."""
    return datetime.now(timezone.utc).replace(microsecond=0)


# --- enums ------------------------------------------------------------------


class Source(str, Enum):
    CURATED = "curated"
    CONTEST = "contest"
    MINED = "mined"
    EVOLVED = "evolved"


class Difficulty(str, Enum):
    EASY = "easy"
    MEDIUM = "medium"
    HARD = "hard"


class Operator(str, Enum):
    SEED = "seed"
    CROSSOVER = "crossover"
    MUTATION = "mutation"


class VerdictStatus(str, Enum):
    PASS = "pass"
    TEST_FAILURE = "test_failure"
    RUNTIME_ERROR = "runtime_error"
    TIMEOUT = "timeout"
    MEMORY_EXCEEDED = "memory_exceeded"
    SANDBOX_VIOLATION = "sandbox_violation"
    HARNESS_ERROR = "harness_error"


def _parse_enum(enum_cls: type, value: Any, where: str) -> Any:
    try:
        return enum_cls(value)
    except ValueError:
        raise SchemaError(f"{where}: unknown variant {value!r}") from None


def _require(data: dict, key: str, where: str) -> Any:
    if key not in data:
        raise SchemaError(f"{where}: missing field {key!r}")
    return data[key]


# --- types ------------------------------------------------------------------


@dataclass(frozen=True)
class SeedTask:
    """A curated problem: title, description, constraints, and worked examples."""

    id: str
    title: str
    description: str
    constraints: tuple[str, ...] = ()
    examples: tuple[tuple[str, str], ...] = ()
    source: Source = Source.CURATED
    difficulty: Optional[Difficulty] = None

    def __post_init__(self) -> None:
        if not self.description.strip():
            raise SchemaError("SeedTask: description must be non-empty")
        expected = canonical_id(self.title + "\n" + self.description)
        if self.id != expected:
            raise SchemaError("SeedTask: id does not match hash of (title, description)")
        if not self.examples and self.source is not Source.MINED:
            raise SchemaError("SeedTask: examples may be empty only for mined tasks")

    @classmethod
    def create(
        cls,
        title: str,
        description: str,
        constraints: tuple[str, ...] = (),
        examples: tuple[tuple[str, str], ...] = (),
        source: Source = Source.CURATED,
        difficulty: Optional[Difficulty] = None,
    ) -> "SeedTask":
        return cls(
            id=canonical_id(title + "\n" + description),
            title=title,
            description=description,
            constraints=tuple(constraints),
            examples=tuple((i, o) for i, o in examples),
            source=source,
            difficulty=difficulty,
        )

    def to_dict(self) -> dict:
        out: dict[str, Any] = {
            "id": self.id,
            "title": self.title,
            "description": self.description,
            "constraints": list(self.constraints),
            "examples": [[i, o] for i, o in self.examples],
            "source": self.source.value,
        }
        if self.difficulty is not None:
            out["difficulty"] = self.difficulty.value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SeedTask":
        where = "SeedTask"
        examples = _require(data, "examples", where)
        return cls(
            id=_require(data, "id", where),
            title=_require(data, "title", where),
            description=_require(data, "description", where),
            constraints=tuple(_require(data, "constraints", where)),
            examples=tuple((pair[0], pair[1]) for pair in examples),
            source=_parse_enum(Source, _require(data, "source", where), where),
            difficulty=(
                _parse_enum(Difficulty, data["difficulty"], where)
                if "difficulty" in data
                else None
            ),
        )


@dataclass(frozen=True)
class RawDocument:
    """One mined corpus entry awaiting relevance scoring."""

    id: str
    text: str
    origin: str
    relevance_score: Optional[float] = None

    def __post_init__(self) -> None:
        if self.id != canonical_id(self.text):
            raise SchemaError("RawDocument: id does not match hash of text")
        if self.relevance_score is not None and not 0.0 <= self.relevance_score <= 1.0:
            raise SchemaError("RawDocument: relevance_score outside [0, 1]")

    @classmethod
    def create(cls, text: str, origin: str, relevance_score: Optional[float] = None) -> "RawDocument":
        return cls(id=canonical_id(text), text=text, origin=origin, relevance_score=relevance_score)

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"id": self.id, "text": self.text, "origin": self.origin}
        if self.relevance_score is not None:
            out["relevance_score"] = self.relevance_score
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RawDocument":
        where = "RawDocument"
        return cls(
            id=_require(data, "id", where),
            text=_require(data, "text", where),
            origin=_require(data, "origin", where),
            relevance_score=data.get("relevance_score"),
        )


@dataclass(frozen=True)
class Instruction:
    """A self-contained task statement with its ancestry."""

    id: str
    text: str
    lineage: tuple[str, ...] = ()
    operator: Operator = Operator.SEED
    generation: int = 0

    def __post_init__(self) -> None:
        if self.id != canonical_id(self.text):
            raise SchemaError("Instruction: id does not match hash of text")
        if self.generation < 0:
            raise SchemaError("Instruction: generation must be non-negative")
        if self.operator is Operator.CROSSOVER and len(self.lineage) < 2:
            raise SchemaError("Instruction: crossover requires at least 2 parents")
        if self.operator is Operator.MUTATION and len(self.lineage) != 1:
            raise SchemaError("Instruction: mutation requires exactly 1 parent")
        if self.operator is Operator.SEED and (self.lineage or self.generation != 0):
            raise SchemaError("Instruction: seed requires empty lineage and generation 0")

    @classmethod
    def create(
        cls,
        text: str,
        lineage: tuple[str, ...] = (),
        operator: Operator = Operator.SEED,
        generation: int = 0,
    ) -> "Instruction":
        return cls(
            id=canonical_id(text),
            text=text,
            lineage=tuple(lineage),
            operator=operator,
            generation=generation,
        )

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "text": self.text,
            "lineage": list(self.lineage),
            "operator": self.operator.value,
            "generation": self.generation,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Instruction":
        where = "Instruction"
        return cls(
            id=_require(data, "id", where),
            text=_require(data, "text", where),
            lineage=tuple(_require(data, "lineage", where)),
            operator=_parse_enum(Operator, _require(data, "operator", where), where),
            generation=_require(data, "generation", where),
        )


@dataclass(frozen=True)
class ReasoningTrace:
    """An ordered list of derivation steps plus the joined trace text.

    `raw` is canonical: it always equals the steps joined with `delimiter`,
    so the pair round-trips exactly. Build from free-form model output with
    `from_raw`, which drops blank lines and strips each step.
    """

    steps: tuple[str, ...]
    raw: str
    delimiter: str = "\n"

    def __post_init__(self) -> None:
        if not self.steps:
            raise SchemaError("ReasoningTrace: at least one step required")
        if any(not s.strip() for s in self.steps):
            raise SchemaError("ReasoningTrace: steps must be non-empty")
        if self.delimiter.join(self.steps) != self.raw:
            raise SchemaError("ReasoningTrace: steps do not reconstruct raw")

    @classmethod
    def from_raw(cls, text: str, delimiter: str = "\n") -> "ReasoningTrace":
        steps = tuple(line.strip() for line in text.splitlines() if line.strip())
        if not steps:
            raise SchemaError("ReasoningTrace: no non-empty steps in text")
        return cls(steps=steps, raw=delimiter.join(steps), delimiter=delimiter)

    def to_dict(self) -> dict:
        return {"steps": list(self.steps), "raw": self.raw, "delimiter": self.delimiter}

    @classmethod
    def from_dict(cls, data: dict) -> "ReasoningTrace":
        where = "ReasoningTrace"
        return cls(
            steps=tuple(_require(data, "steps", where)),
            raw=_require(data, "raw", where),
            delimiter=_require(data, "delimiter", where),
        )


@dataclass(frozen=True)
class CandidatePair:
    """One of the three generated solution/test source pairs."""

    index: int
    solution_source: str
    test_source: str

    def __post_init__(self) -> None:
        if self.index not in (0, 1, 2):
            raise SchemaError("CandidatePair: index must be 0, 1, or 2")

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "solution_source": self.solution_source,
            "test_source": self.test_source,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CandidatePair":
        where = "CandidatePair"
        return cls(
            index=_require(data, "index", where),
            solution_source=_require(data, "solution_source", where),
            test_source=_require(data, "test_source", where),
        )


def check_candidate_triple(candidates: tuple[CandidatePair, ...]) -> None:
    """Enforce the exactly-three, contiguous-index contract for a triple."""
    if len(candidates) != 3:
        raise SchemaError(f"expected 3 candidates, found {len(candidates)}")
    if [c.index for c in candidates] != [0, 1, 2]:
        raise SchemaError("candidate indices must be contiguous from 0")


@dataclass(frozen=True)
class ExecutionVerdict:
    """Outcome of one sandboxed run with resource telemetry.

    `status=None` marks a run that was never performed (a later candidate
    skipped after an earlier pass); it serializes with the status omitted.
    """

    status: Optional[VerdictStatus]
    duration_ms: int = 0
    peak_memory_bytes: Optional[int] = None
    stdout_excerpt: str = ""
    stderr_excerpt: str = ""
    tests_run: int = 0
    tests_passed: int = 0

    def __post_init__(self) -> None:
        if self.tests_run < 0 or self.tests_passed < 0:
            raise SchemaError("ExecutionVerdict: negative test counts")
        if self.tests_passed > self.tests_run:
            raise SchemaError("ExecutionVerdict: tests_passed exceeds tests_run")
        if self.duration_ms < 0:
            raise SchemaError("ExecutionVerdict: negative duration")
        all_passed = self.tests_run >= 1 and self.tests_passed == self.tests_run
        if (self.status is VerdictStatus.PASS) != all_passed:
            raise SchemaError("ExecutionVerdict: status=pass iff all of >=1 tests passed")

    @classmethod
    def skipped(cls) -> "ExecutionVerdict":
        return cls(status=None)

    def to_dict(self) -> dict:
        out: dict[str, Any] = {}
        if self.status is not None:
            out["status"] = self.status.value
        out.update(
            duration_ms=self.duration_ms,
            stdout_excerpt=self.stdout_excerpt,
            stderr_excerpt=self.stderr_excerpt,
            tests_run=self.tests_run,
            tests_passed=self.tests_passed,
        )
        if self.peak_memory_bytes is not None:
            out["peak_memory_bytes"] = self.peak_memory_bytes
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExecutionVerdict":
        where = "ExecutionVerdict"
        return cls(
            status=(
                _parse_enum(VerdictStatus, data["status"], where)
                if "status" in data
                else None
            ),
            duration_ms=_require(data, "duration_ms", where),
            peak_memory_bytes=data.get("peak_memory_bytes"),
            stdout_excerpt=_require(data, "stdout_excerpt", where),
            stderr_excerpt=_require(data, "stderr_excerpt", where),
            tests_run=_require(data, "tests_run", where),
            tests_passed=_require(data, "tests_passed", where),
        )


@dataclass(frozen=True)
class Quadruplet:
    """The pipeline's unit of output: instruction, reasoning, solution, tests."""

    instruction: Instruction
    reasoning: ReasoningTrace
    solution_source: str
    test_source: str
    selected_candidate: int
    verdict: ExecutionVerdict
    judge_passed: bool
    created_at: datetime

    def __post_init__(self) -> None:
        if self.verdict.status is not VerdictStatus.PASS:
            raise SchemaError("Quadruplet: verdict status must be pass")
        if self.selected_candidate not in (0, 1, 2):
            raise SchemaError("Quadruplet: selected_candidate must be 0, 1, or 2")
        if self.created_at.tzinfo is None or self.created_at.microsecond != 0:
            raise SchemaError("Quadruplet: created_at must be tz-aware with second precision")

    def to_dict(self) -> dict:
        return {
            "instruction": self.instruction.to_dict(),
            "reasoning": self.reasoning.to_dict(),
            "solution_source": self.solution_source,
            "test_source": self.test_source,
            "selected_candidate": self.selected_candidate,
            "verdict": self.verdict.to_dict(),
            "judge_passed": self.judge_passed,
            "created_at": self.created_at.astimezone(timezone.utc).strftime(
                "%Y-%m-%dT%H:%M:%SZ"
            ),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Quadruplet":
        where = "Quadruplet"
        created = datetime.strptime(
            _require(data, "created_at", where), "%Y-%m-%dT%H:%M:%SZ"
        ).replace(tzinfo=timezone.utc)
        return cls(
            instruction=Instruction.from_dict(_require(data, "instruction", where)),
            reasoning=ReasoningTrace.from_dict(_require(data, "reasoning", where)),
            solution_source=_require(data, "solution_source", where),
            test_source=_require(data, "test_source", where),
            selected_candidate=_require(data, "selected_candidate", where),
            verdict=ExecutionVerdict.from_dict(_require(data, "verdict", where)),
            judge_passed=_require(data, "judge_passed", where),
            created_at=created,
        )


@dataclass(frozen=True)
class DupCluster:
    """A union-find equivalence class of functionally identical instructions."""

    member_ids: frozenset[str]
    representative_id: str

    def __post_init__(self) -> None:
        if len(self.member_ids) < 2:
            raise SchemaError("DupCluster: at least 2 members required")
        if self.representative_id not in self.member_ids:
            raise SchemaError("DupCluster: representative must be a member")

    def to_dict(self) -> dict:
        return {
            "member_ids": sorted(self.member_ids),
            "representative_id": self.representative_id,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DupCluster":
        where = "DupCluster"
        return cls(
            member_ids=frozenset(_require(data, "member_ids", where)),
            representative_id=_require(data, "representative_id", where),
        )
