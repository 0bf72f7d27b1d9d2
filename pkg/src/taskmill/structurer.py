"""Turns seed tasks and mined documents into quadruplet material.

One coder-role transcript per input produces the instruction, the reasoning
trace, and three candidate solution/test pairs. A reply that violates the
output grammar earns exactly one corrective re-prompt; after that the input
is rejected with a reason from a closed enum, counted, and skipped.
"""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Optional, Union

from .gateway import (
    Gateway,
    ParseError,
    Role,
    load_prompt,
    parse_structured,
    prompt_checksums,
    render_prompt,
)
from .jsonl import write_jsonl
from .model import (
    CandidatePair,
    Instruction,
    Operator,
    RawDocument,
    ReasoningTrace,
    SeedTask,
)

log = logging.getLogger("taskmill.structurer")

MAX_INSTRUCTION_CHARS = 8192
MAX_ATTEMPTS = 2

_TAG = re.compile(r"<[^>]+>")
_BLANK_RUN = re.compile(r"\n\s*\n(\s*\n)+")


class RejectionReason(str, Enum):
    UNPARSEABLE = "unparseable"
    OVER_LENGTH = "over_length"
    EMPTY_CANDIDATES = "empty_candidates"


class OverLength(ValueError):
    pass


@dataclass(frozen=True)
class StructuringJob:
    input: Union[SeedTask, RawDocument]
    attempt: int
    prompt_checksum: str

    def __post_init__(self) -> None:
        if not 0 <= self.attempt <= MAX_ATTEMPTS:
            raise ValueError("StructuringJob: attempt out of range")


@dataclass(frozen=True)
class StructureOutcome:
    input_id: str
    prompt_checksum: str
    rejection: Optional[RejectionReason] = None
    instruction: Optional[Instruction] = None
    reasoning: Optional[ReasoningTrace] = None
    candidates: tuple[CandidatePair, ...] = ()

    @property
    def ok(self) -> bool:
        return self.rejection is None


def sanitize_instruction(text: str, max_chars: int = MAX_INSTRUCTION_CHARS) -> str:
    """Strip markup remnants and collapse blank-line runs. Over-length text
    is a rejection signal (OverLength), never a silent truncation."""
    cleaned = _TAG.sub("", text)
    cleaned = _BLANK_RUN.sub("\n\n", cleaned).strip()
    if len(cleaned) > max_chars:
        raise OverLength(f"instruction is {len(cleaned)} chars, max {max_chars}")
    return cleaned


def render_input(source: Union[SeedTask, RawDocument]) -> str:
    if isinstance(source, RawDocument):
        return source.text
    parts = [source.title, "", source.description]
    if source.constraints:
        parts.append("")
        parts.append("Constraints:")
        parts.extend(f"- {c}" for c in source.constraints)
    if source.examples:
        parts.append("")
        parts.append("Examples:")
        parts.extend(f"- input: {i} -> output: {o}" for i, o in source.examples)
    return "\n".join(parts)


def new_job(source: Union[SeedTask, RawDocument]) -> StructuringJob:
    return StructuringJob(
        input=source,
        attempt=0,
        prompt_checksum=prompt_checksums()["structure"],
    )


def _classify(error: ParseError) -> RejectionReason:
    # the parser names the violated rule; empty blocks are their own reason
    if str(error).startswith(("empty SOLUTION", "empty TESTS")):
        return RejectionReason.EMPTY_CANDIDATES
    return RejectionReason.UNPARSEABLE


def structure(job: StructuringJob, gateway: Gateway) -> StructureOutcome:
    """Run one input through the coder role. On grammar violations, re-prompt
    once with a note naming the violated rule, then give up."""
    input_text = render_input(job.input)
    user_prompt = render_prompt("structure", document_text=input_text)
    messages: list[tuple[str, str]] = [
        ("system", load_prompt("system_coder")),
        ("user", user_prompt),
    ]

    parsed = None
    last_error: Optional[ParseError] = None
    for _ in range(MAX_ATTEMPTS):
        response = gateway.chat(Role.CODER, messages)
        try:
            parsed = parse_structured(response.content)
            break
        except ParseError as exc:
            last_error = exc
            log.info("input %s: parse failure: %s", job.input.id, exc)
            messages = messages + [
                ("assistant", response.content),
                (
                    "system",
                    f"The previous reply violated the required format: {exc}. "
                    "Answer again following the format exactly.",
                ),
            ]

    if parsed is None:
        assert last_error is not None
        return StructureOutcome(
            input_id=job.input.id,
            prompt_checksum=job.prompt_checksum,
            rejection=_classify(last_error),
        )

    try:
        clean_text = sanitize_instruction(parsed.instruction_text)
    except OverLength as exc:
        log.info("input %s: %s", job.input.id, exc)
        return StructureOutcome(
            input_id=job.input.id,
            prompt_checksum=job.prompt_checksum,
            rejection=RejectionReason.OVER_LENGTH,
        )

    return StructureOutcome(
        input_id=job.input.id,
        prompt_checksum=job.prompt_checksum,
        instruction=Instruction.create(
            text=clean_text, operator=Operator.SEED, lineage=(), generation=0
        ),
        reasoning=ReasoningTrace.from_raw(parsed.reasoning_text),
        candidates=parsed.candidates,
    )


def outcome_to_record(outcome: StructureOutcome) -> dict:
    assert outcome.ok
    return {
        "instruction": outcome.instruction.to_dict(),
        "reasoning": outcome.reasoning.to_dict(),
        "candidates": [c.to_dict() for c in outcome.candidates],
        "input_id": outcome.input_id,
        "prompt_checksum": outcome.prompt_checksum,
    }


@dataclass
class StructureStats:
    structured: int = 0
    rejected: Counter = None  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.rejected is None:
            self.rejected = Counter()


def structure_stream(
    sources: Iterable[Union[SeedTask, RawDocument]],
    gateway: Gateway,
    out_path: str,
) -> StructureStats:
    """Structure every input, writing accepted records to structured.jsonl.
    Rejections are tallied by reason and never abort the stream."""
    stats = StructureStats()
    records = []
    for source in sources:
        outcome = structure(new_job(source), gateway)
        if outcome.ok:
            records.append(outcome_to_record(outcome))
            stats.structured += 1
        else:
            stats.rejected[outcome.rejection.value] += 1
    write_jsonl(out_path, records)
    return stats
