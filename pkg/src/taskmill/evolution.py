"""Crossover/mutation loop over the instruction pool.

The instructor role writes offspring (instruction, reasoning, and which
few-shot parents it merged), the coder writes three candidate solution/test
pairs, the sandbox picks the first passing candidate, and the judge gates
final acceptance. Accepted quadruplets re-enter the sampling population at
every pool refresh.

Determinism contract: with a fixed rng seed, a scripted gateway, and
normalize_telemetry on, the emitted record stream is byte-reproducible.
All randomness flows through one `random.Random`; sampling order is the
pool's stable insertion order.
"""

from __future__ import annotations

import random
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from typing import Callable, Optional

from .gateway import (
    Gateway,
    JUDGE_CHECKS,
    ParseError,
    Role,
    ScriptExhausted,
    load_prompt,
    parse_candidates,
    parse_judge_reply,
    parse_offspring,
    render_prompt,
)
from .model import (
    CandidatePair,
    ExecutionVerdict,
    Instruction,
    Operator,
    Quadruplet,
    ReasoningTrace,
    normalize,
)
from .sandbox import SandboxPolicy, validate_candidates

CROSSOVER_PARENTS = 5
CROSSOVER_MIN_MERGED = 2


class MutationKind(str, Enum):
    TIGHTEN_CONSTRAINTS = "tighten_constraints"
    DEEPEN_REASONING = "deepen_reasoning"
    EXPAND_SCOPE = "expand_scope"


class RejectReason(str, Enum):
    UNPARSEABLE = "unparseable"
    LINEAGE = "lineage"
    NOOP = "noop"
    OVER_LENGTH = "over_length"
    DUPLICATE = "duplicate"
    NO_PASSING_CANDIDATE = "no_passing_candidate"
    JUDGE_FAILED = "judge_failed"


@dataclass(frozen=True)
class JudgeVerdict:
    passed: bool
    failed_checks: tuple[str, ...]
    raw_reply: str

    def __post_init__(self) -> None:
        if self.passed != (len(self.failed_checks) == 0):
            raise ValueError("JudgeVerdict: passed iff failed_checks empty")
        unknown = set(self.failed_checks) - set(JUDGE_CHECKS)
        if unknown:
            raise ValueError(f"JudgeVerdict: unknown checks {unknown}")


@dataclass
class EvolutionConfig:
    target_accepted: int = 0
    refresh_interval: int = 1000  # production runs scale this up heavily
    operator_mix: float = 0.5  # probability of crossover vs mutation
    mutation_kinds: tuple[MutationKind, ...] = (
        MutationKind.TIGHTEN_CONSTRAINTS,
        MutationKind.DEEPEN_REASONING,
        MutationKind.EXPAND_SCOPE,
    )
    crossover_parents: int = CROSSOVER_PARENTS
    crossover_min_merged: int = CROSSOVER_MIN_MERGED
    rng_seed: int = 0
    normalize_telemetry: bool = True
    run_timestamp: str = "1970-01-01T00:00:00Z"

    def __post_init__(self) -> None:
        if self.target_accepted < 0:
            raise ValueError("target_accepted must be >= 0")
        if self.refresh_interval < 1:
            raise ValueError("refresh_interval must be >= 1")
        if not 0.0 <= self.operator_mix <= 1.0:
            raise ValueError("operator_mix must be in [0, 1]")
        if self.crossover_parents != CROSSOVER_PARENTS:
            raise ValueError(f"crossover_parents is pinned to {CROSSOVER_PARENTS}")
        if self.crossover_min_merged != CROSSOVER_MIN_MERGED:
            raise ValueError(f"crossover_min_merged is pinned to {CROSSOVER_MIN_MERGED}")
        if not self.mutation_kinds:
            raise ValueError("mutation_kinds must be non-empty")
        self.mutation_kinds = tuple(MutationKind(k) for k in self.mutation_kinds)

    @classmethod
    def from_dict(cls, data: dict) -> "EvolutionConfig":
        return cls(**{k: tuple(v) if k == "mutation_kinds" else v for k, v in data.items()})

    def clock(self) -> Callable[[], datetime]:
        fixed = datetime.strptime(self.run_timestamp, "%Y-%m-%dT%H:%M:%SZ").replace(
            tzinfo=timezone.utc
        )
        return lambda: fixed


class PopulationPool:
    """Seeds plus accepted members, with a separate sampling population.

    Accepted members join `members` immediately but only enter the sampling
    set at the next refresh, which mixes the full accepted set back with the
    seeds. Ids are unique across seeds and members.
    """

    def __init__(self, seeds: list[Instruction]):
        self.seed_members: list[Instruction] = []
        self.members: list[Instruction] = []
        self._ids: set[str] = set()
        for seed in seeds:
            if seed.id in self._ids:
                continue
            self.seed_members.append(seed)
            self._ids.add(seed.id)
        if not self.seed_members:
            raise ValueError("PopulationPool: at least one seed required")
        self.active: list[Instruction] = list(self.seed_members)
        self.accepted_since_refresh = 0
        self.refresh_count = 0

    def has(self, instruction_id: str) -> bool:
        return instruction_id in self._ids

    def add_accepted(self, instruction: Instruction) -> None:
        if instruction.id in self._ids:
            raise ValueError(f"pool already contains id {instruction.id}")
        self.members.append(instruction)
        self._ids.add(instruction.id)
        self.accepted_since_refresh += 1

    def refresh(self) -> None:
        """Sampling population becomes seeds + every accepted member."""
        self.active = list(self.seed_members) + list(self.members)
        self.accepted_since_refresh = 0
        self.refresh_count += 1

    @classmethod
    def rebuild(
        cls,
        seeds: list[Instruction],
        accepted: list[Instruction],
        refresh_interval: int,
    ) -> "PopulationPool":
        """Reconstruct pool state from a prior run's accepted stream, as if
        the acceptances had happened live (used on resume)."""
        pool = cls(seeds)
        for instruction in accepted:
            pool.add_accepted(instruction)
            if pool.accepted_since_refresh == refresh_interval:
                pool.refresh()
        return pool


@dataclass(frozen=True)
class Offspring:
    instruction: Optional[Instruction] = None
    reasoning: Optional[ReasoningTrace] = None
    reject_reason: Optional[RejectReason] = None

    @property
    def ok(self) -> bool:
        return self.reject_reason is None


def _sanitized_or_none(text: str) -> Optional[str]:
    from .structurer import OverLength, sanitize_instruction

    try:
        return sanitize_instruction(text)
    except OverLength:
        return None


def crossover(pool: PopulationPool, rng: random.Random, gateway: Gateway) -> Offspring:
    """Merge elements of >= 2 of 5 sampled parents into one new instruction."""
    if len(pool.active) < CROSSOVER_PARENTS:
        raise ValueError(
            f"crossover needs {CROSSOVER_PARENTS} pool members, have {len(pool.active)}"
        )
    idxs = rng.sample(range(len(pool.active)), CROSSOVER_PARENTS)
    parents = [pool.active[i] for i in idxs]
    parent_block = "\n\n".join(
        f"{k}. {p.text}" for k, p in enumerate(parents, start=1)
    )
    prompt = render_prompt("crossover", parent_block=parent_block)
    response = gateway.chat(
        Role.INSTRUCTOR, [("system", load_prompt("system_instructor")), ("user", prompt)]
    )
    try:
        parsed = parse_offspring(response.content, max_parent_index=CROSSOVER_PARENTS)
    except ParseError:
        return Offspring(reject_reason=RejectReason.UNPARSEABLE)

    merged_ids = []
    for index in parsed.parent_indices:
        pid = parents[index - 1].id
        if pid not in merged_ids:
            merged_ids.append(pid)
    if len(merged_ids) < CROSSOVER_MIN_MERGED:
        return Offspring(reject_reason=RejectReason.LINEAGE)

    text = _sanitized_or_none(parsed.instruction_text)
    if text is None:
        return Offspring(reject_reason=RejectReason.OVER_LENGTH)
    if any(normalize(text) == normalize(p.text) for p in parents):
        return Offspring(reject_reason=RejectReason.NOOP)

    merged_parents = [p for p in parents if p.id in merged_ids]
    generation = 1 + max(p.generation for p in merged_parents)
    instruction = Instruction.create(
        text=text,
        lineage=tuple(merged_ids),
        operator=Operator.CROSSOVER,
        generation=generation,
    )
    return Offspring(
        instruction=instruction,
        reasoning=ReasoningTrace.from_raw(parsed.reasoning_text),
    )


def mutate(pool: PopulationPool, rng: random.Random, gateway: Gateway,
           kinds: tuple[MutationKind, ...]) -> Offspring:
    """Perturb one sampled instruction; reasoning is regenerated, not copied."""
    if not pool.active:
        raise ValueError("mutate needs a non-empty pool")
    parent = pool.active[rng.randrange(len(pool.active))]
    kind = kinds[rng.randrange(len(kinds))]
    prompt = render_prompt(f"mutation_{kind.value}", parent_text=parent.text)
    response = gateway.chat(
        Role.INSTRUCTOR, [("system", load_prompt("system_instructor")), ("user", prompt)]
    )
    try:
        parsed = parse_offspring(response.content)
    except ParseError:
        return Offspring(reject_reason=RejectReason.UNPARSEABLE)

    text = _sanitized_or_none(parsed.instruction_text)
    if text is None:
        return Offspring(reject_reason=RejectReason.OVER_LENGTH)
    if normalize(text) == normalize(parent.text):
        return Offspring(reject_reason=RejectReason.NOOP)

    instruction = Instruction.create(
        text=text,
        lineage=(parent.id,),
        operator=Operator.MUTATION,
        generation=parent.generation + 1,
    )
    return Offspring(
        instruction=instruction,
        reasoning=ReasoningTrace.from_raw(parsed.reasoning_text),
    )


def coder_candidates(
    instruction: Instruction, gateway: Gateway
) -> tuple[CandidatePair, ...]:
    prompt = render_prompt("candidates", instruction_text=instruction.text)
    response = gateway.chat(
        Role.CODER, [("system", load_prompt("system_coder")), ("user", prompt)]
    )
    return parse_candidates(response.content)


def judge(
    instruction: Instruction,
    reasoning: ReasoningTrace,
    solution_source: str,
    test_source: str,
    gateway: Gateway,
) -> JudgeVerdict:
    """One judge-role call at temperature 0; unreadable replies fail closed."""
    prompt = render_prompt(
        "judge",
        instruction_text=instruction.text,
        reasoning_text=reasoning.raw,
        solution_source=solution_source,
        test_source=test_source,
    )
    response = gateway.chat(
        Role.JUDGE,
        [("system", load_prompt("system_judge")), ("user", prompt)],
        temperature=0.0,
    )
    result = parse_judge_reply(response.content)
    return JudgeVerdict(
        passed=result.passed,
        failed_checks=result.failed_checks,
        raw_reply=response.content,
    )


def normalize_verdict(verdict: ExecutionVerdict) -> ExecutionVerdict:
    """Strip wall-clock telemetry so records are run-to-run reproducible."""
    return ExecutionVerdict(
        status=verdict.status,
        duration_ms=0,
        peak_memory_bytes=None,
        stdout_excerpt=verdict.stdout_excerpt,
        stderr_excerpt=verdict.stderr_excerpt,
        tests_run=verdict.tests_run,
        tests_passed=verdict.tests_passed,
    )


@dataclass
class EvolveStats:
    generated: int = 0
    accepted: int = 0
    refreshes: int = 0
    halted: str = ""
    rejected: Counter = field(default_factory=Counter)

    def to_dict(self) -> dict:
        return {
            "generated": self.generated,
            "accepted": self.accepted,
            "refreshes": self.refreshes,
            "halted": self.halted,
            "rejected_by_reason": dict(sorted(self.rejected.items())),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EvolveStats":
        return cls(
            generated=int(data.get("generated", 0)),
            accepted=int(data.get("accepted", 0)),
            refreshes=int(data.get("refreshes", 0)),
            halted=str(data.get("halted", "")),
            rejected=Counter(data.get("rejected_by_reason", {})),
        )


def export_rng_state(rng: random.Random) -> list:
    version, internal, gauss = rng.getstate()
    return [version, list(internal), gauss]


def restore_rng_state(data: list) -> random.Random:
    rng = random.Random()
    rng.setstate((data[0], tuple(data[1]), data[2]))
    return rng


def evolve(
    pool: PopulationPool,
    config: EvolutionConfig,
    gateway: Gateway,
    policy: SandboxPolicy,
    emit: Callable[[Quadruplet], None],
    rng: Optional[random.Random] = None,
    stats: Optional[EvolveStats] = None,
    checkpoint: Optional[Callable[[random.Random], None]] = None,
) -> EvolveStats:
    """Run the loop until target_accepted total members or script exhaustion.

    `emit` receives each accepted quadruplet in acceptance order; when a
    `checkpoint` callback is given it runs after every acceptance with the
    live rng (so a host can persist rng state and its own bookkeeping).
    """
    rng = rng if rng is not None else random.Random(config.rng_seed)
    stats = stats if stats is not None else EvolveStats()
    clock = config.clock()

    while len(pool.members) < config.target_accepted:
        try:
            use_crossover = (
                rng.random() < config.operator_mix
                and len(pool.active) >= CROSSOVER_PARENTS
            )
            if use_crossover:
                offspring = crossover(pool, rng, gateway)
            else:
                offspring = mutate(pool, rng, gateway, config.mutation_kinds)
            stats.generated += 1
            if not offspring.ok:
                stats.rejected[offspring.reject_reason.value] += 1
                continue
            assert offspring.instruction is not None

            if pool.has(offspring.instruction.id):
                stats.rejected[RejectReason.DUPLICATE.value] += 1
                continue

            try:
                candidates = coder_candidates(offspring.instruction, gateway)
            except ParseError:
                stats.rejected[RejectReason.UNPARSEABLE.value] += 1
                continue

            selection = validate_candidates(candidates, policy)
            if selection.selected_index is None:
                stats.rejected[RejectReason.NO_PASSING_CANDIDATE.value] += 1
                continue
            verdict = selection.verdicts[selection.selected_index]
            if config.normalize_telemetry:
                verdict = normalize_verdict(verdict)
            chosen = candidates[selection.selected_index]

            judge_verdict = judge(
                offspring.instruction,
                offspring.reasoning,
                chosen.solution_source,
                chosen.test_source,
                gateway,
            )
            if not judge_verdict.passed:
                stats.rejected[RejectReason.JUDGE_FAILED.value] += 1
                continue
        except ScriptExhausted:
            stats.halted = "script_exhausted"
            return stats

        quadruplet = Quadruplet(
            instruction=offspring.instruction,
            reasoning=offspring.reasoning,
            solution_source=chosen.solution_source,
            test_source=chosen.test_source,
            selected_candidate=selection.selected_index,
            verdict=verdict,
            judge_passed=True,
            created_at=clock(),
        )
        emit(quadruplet)
        pool.add_accepted(offspring.instruction)
        stats.accepted += 1
        if pool.accepted_since_refresh == config.refresh_interval:
            pool.refresh()
            stats.refreshes += 1
        if checkpoint is not None:
            checkpoint(rng)

    stats.halted = "target_reached"
    return stats
