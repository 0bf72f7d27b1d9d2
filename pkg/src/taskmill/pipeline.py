"""End-to-end orchestration: filter, structure, validate, evolve, dedup,
decontam, export.

One stage runs at a time, each reading its predecessor's JSONL and
writing its own file in the run directory. A checkpoint is written at
every stage boundary and every N records inside the record-oriented
stages, carrying byte offsets, rng state, and mock-gateway cursors, so
a killed run resumes at the failed record and reproduces the exact
bytes an uninterrupted run would have written.
"""

from __future__ import annotations

import json
import logging
import os
import random
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import __version__
from .classifier import DEFAULT_THRESHOLD as RELEVANCE_THRESHOLD
from .classifier import RelevanceModel, filter_corpus
from .decontam import EXIT_CONTAMINATED, run_decontam
from .dedup import DedupConfig, run_dedup
from .evolution import (
    EvolutionConfig,
    EvolveStats,
    PopulationPool,
    evolve,
    export_rng_state,
    judge,
    normalize_verdict,
    restore_rng_state,
)
from .gateway import Gateway, GatewayConfig, MockBackend, prompt_checksums
from .jsonl import JsonlReader, JsonlWriter, dumps, truncate_to, write_jsonl
from .model import (
    CandidatePair,
    Instruction,
    Quadruplet,
    RawDocument,
    ReasoningTrace,
    SchemaError,
    SeedTask,
    canonical_id,
)
from .sandbox import SandboxPolicy, validate_candidates
from .structurer import new_job, outcome_to_record, structure

log = logging.getLogger(__name__)

STAGE_ORDER = (
    "filter",
    "structure",
    "validate",
    "evolve",
    "dedup",
    "decontam",
    "export",
)
DONE_STAGE = "done"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3

DEFAULT_CHECKPOINT_INTERVAL = 100

# files inside the run directory
F_CONFIG = "config.json"
F_CHECKPOINT = "checkpoint.json"
F_FILTERED = "filtered.jsonl"
F_STRUCTURED = "structured.jsonl"
F_VALIDATED = "validated.jsonl"
F_EVOLVED = "evolved.jsonl"
F_ALL = "all_quadruplets.jsonl"
F_DEDUPED = "deduped.jsonl"
F_CLUSTERS = "clusters.jsonl"
F_DEDUP_REPORT = "dedup_report.json"
F_DECONTAMINATED = "decontaminated.jsonl"
F_OVERLAP_REPORT = "overlap_report.json"
F_EXPORT = "quadruplets.jsonl"
F_METADATA = "metadata.json"
F_SUMMARY = "run_summary.json"
F_FILTER_STATS = "filter_stats.json"
F_STRUCTURE_STATS = "structure_stats.json"
F_VALIDATE_STATS = "validate_stats.json"
F_EVOLVE_STATS = "run_stats.json"

# incrementally written files, truncated to checkpointed offsets on resume
_INCREMENTAL = (F_STRUCTURED, F_VALIDATED, F_EVOLVED)


class ConfigError(ValueError):
    pass


class StageFailure(RuntimeError):
    pass


def _resolve(base_dir: str, path: Optional[str]) -> Optional[str]:
    if path is None:
        return None
    return path if os.path.isabs(path) else os.path.normpath(os.path.join(base_dir, path))


_KNOWN_KEYS = {
    "run_dir",
    "rng_seed",
    "checkpoint_interval",
    "stages",
    "seeds",
    "documents",
    "classifier_model",
    "classifier_threshold",
    "benchmarks",
    "drop_hits",
    "gateway",
    "sandbox",
    "evolution",
    "dedup",
}


@dataclass
class PipelineConfig:
    run_dir: str
    seeds_path: str
    rng_seed: int = 0
    checkpoint_interval: int = DEFAULT_CHECKPOINT_INTERVAL
    stages: dict = field(default_factory=dict)
    documents_path: Optional[str] = None
    classifier_model_path: Optional[str] = None
    classifier_threshold: float = RELEVANCE_THRESHOLD
    benchmark_paths: tuple = ()
    drop_hits: bool = False
    gateway: GatewayConfig = field(default_factory=GatewayConfig)
    sandbox: SandboxPolicy = field(default_factory=SandboxPolicy)
    evolution: EvolutionConfig = field(default_factory=lambda: EvolutionConfig())
    dedup: DedupConfig = field(default_factory=DedupConfig)
    raw: dict = field(default_factory=dict, repr=False)

    def enabled(self, stage: str) -> bool:
        return bool(self.stages.get(stage, True))

    @property
    def checksum(self) -> str:
        return canonical_id(json.dumps(self.raw, sort_keys=True, separators=(",", ":")))


def _apply_override(raw: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    dotted, text = assignment.split("=", 1)
    keys = [k for k in dotted.split(".") if k]
    if not keys:
        raise ConfigError(f"--set has an empty key: {assignment!r}")
    try:
        value = json.loads(text)
    except ValueError:
        value = text
    node = raw
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set path {dotted!r} crosses a non-object value")
    node[keys[-1]] = value


def load_config(path: str, overrides: tuple[str, ...] = ()) -> PipelineConfig:
    """Read the JSON config, apply --set overrides, resolve relative paths
    against the config file's directory, and validate."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    for assignment in overrides:
        _apply_override(raw, assignment)
    return config_from_dict(raw, base_dir=os.path.dirname(os.path.abspath(path)))


def config_from_dict(raw: dict, base_dir: str) -> PipelineConfig:
    unknown = set(raw) - _KNOWN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    stages = dict(raw.get("stages", {}))
    bad_stages = set(stages) - set(STAGE_ORDER)
    if bad_stages:
        raise ConfigError(f"unknown stages: {sorted(bad_stages)}")

    run_dir = raw.get("run_dir")
    seeds = raw.get("seeds")
    if not run_dir or not seeds:
        raise ConfigError("config requires run_dir and seeds")

    documents = _resolve(base_dir, raw.get("documents"))
    model_path = _resolve(base_dir, raw.get("classifier_model"))
    seeds = _resolve(base_dir, seeds)
    run_dir = _resolve(base_dir, run_dir)
    benchmarks = tuple(_resolve(base_dir, b) for b in raw.get("benchmarks", []))

    if not os.path.isfile(seeds):
        raise ConfigError(f"seeds file not found: {seeds}")
    for p, label in ((documents, "documents"), (model_path, "classifier_model")):
        if p is not None and not os.path.isfile(p):
            raise ConfigError(f"{label} file not found: {p}")
    for b in benchmarks:
        if not os.path.isfile(b):
            raise ConfigError(f"benchmark file not found: {b}")

    # stage defaults follow the inputs actually provided
    stages.setdefault("filter", documents is not None)
    stages.setdefault("decontam", bool(benchmarks))
    if stages["filter"] and documents is None:
        raise ConfigError("filter stage enabled but no documents file given")
    if stages["filter"] and model_path is None:
        raise ConfigError("filter stage enabled but no classifier_model given")
    if stages["decontam"] and not benchmarks:
        raise ConfigError("decontam stage enabled but no benchmark files given")

    gw_raw = dict(raw.get("gateway", {}))
    if "mock_script_path" in gw_raw:
        gw_raw["mock_script_path"] = _resolve(base_dir, gw_raw["mock_script_path"])
    gateway = GatewayConfig.from_dict(gw_raw)
    if gateway.mode == "mock" and not gateway.mock_script_path:
        raise ConfigError("gateway mode 'mock' requires gateway.mock_script_path")
    if gateway.mock_script_path and not os.path.isfile(gateway.mock_script_path):
        raise ConfigError(f"mock script not found: {gateway.mock_script_path}")

    interval = int(raw.get("checkpoint_interval", DEFAULT_CHECKPOINT_INTERVAL))
    if interval < 1:
        raise ConfigError("checkpoint_interval must be >= 1")

    try:
        cfg = PipelineConfig(
            run_dir=run_dir,
            seeds_path=seeds,
            rng_seed=int(raw.get("rng_seed", 0)),
            checkpoint_interval=interval,
            stages=stages,
            documents_path=documents,
            classifier_model_path=model_path,
            classifier_threshold=float(
                raw.get("classifier_threshold", RELEVANCE_THRESHOLD)
            ),
            benchmark_paths=benchmarks,
            drop_hits=bool(raw.get("drop_hits", False)),
            gateway=gateway,
            sandbox=SandboxPolicy.from_dict(raw.get("sandbox", {})),
            evolution=EvolutionConfig.from_dict(raw.get("evolution", {})),
            dedup=DedupConfig.from_dict(raw.get("dedup", {})),
            raw=raw,
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


# --- checkpointing ------------------------------------------------------------


@dataclass
class Checkpoint:
    stage: str
    records_done: int
    output_offsets: dict
    config_checksum: str
    stage_state: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "records_done": self.records_done,
            "output_offsets": dict(self.output_offsets),
            "config_checksum": self.config_checksum,
            "stage_state": self.stage_state,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Checkpoint":
        return cls(
            stage=data["stage"],
            records_done=int(data["records_done"]),
            output_offsets=dict(data["output_offsets"]),
            config_checksum=data["config_checksum"],
            stage_state=dict(data.get("stage_state", {})),
        )


def _write_json(path: str, payload: dict) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(dumps(payload) + "\n")
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


# --- run summary ---------------------------------------------------------------


@dataclass
class RunSummary:
    config_checksum: str
    stages: dict = field(default_factory=dict)
    exit_code: int = EXIT_OK
    finished: bool = False

    def to_dict(self) -> dict:
        return {
            "config_checksum": self.config_checksum,
            "stages": self.stages,
            "exit_code": self.exit_code,
            "finished": self.finished,
        }


def format_summary(stages: dict, header: str = "stage") -> str:
    lines = [f"{header:<12} counters"]
    for name in STAGE_ORDER:
        info = stages.get(name)
        if info is None:
            continue
        counters = ", ".join(f"{k}={v}" for k, v in info.items())
        lines.append(f"{name:<12} {counters}")
    return "\n".join(lines)


# --- the runner -----------------------------------------------------------------


class PipelineRun:
    """Executes the stage sequence against one run directory."""

    def __init__(self, config: PipelineConfig, resume: bool = False):
        self.cfg = config
        self.run_dir = config.run_dir
        self.resume = resume
        self.rng = random.Random(config.rng_seed)
        self.gateway = Gateway(config.gateway)
        self.summary = RunSummary(config_checksum=config.checksum)
        self.state = Checkpoint(
            stage=STAGE_ORDER[0],
            records_done=0,
            output_offsets={},
            config_checksum=config.checksum,
        )

    # -- helpers ------------------------------------------------------------

    def path(self, name: str) -> str:
        return os.path.join(self.run_dir, name)

    def _gateway_cursors(self) -> Optional[dict]:
        backend = self.gateway.backend
        return backend.cursors if isinstance(backend, MockBackend) else None

    def _base_state(self) -> dict:
        state: dict = {"rng": export_rng_state(self.rng)}
        cursors = self._gateway_cursors()
        if cursors is not None:
            state["cursors"] = cursors
        return state

    def _save_checkpoint(
        self, stage: str, records_done: int, extra_state: Optional[dict] = None
    ) -> None:
        state = self._base_state()
        state["summary"] = dict(self.summary.stages)
        if extra_state:
            state.update(extra_state)
        self.state = Checkpoint(
            stage=stage,
            records_done=records_done,
            output_offsets=dict(self.state.output_offsets),
            config_checksum=self.cfg.checksum,
            stage_state=state,
        )
        _write_json(self.path(F_CHECKPOINT), self.state.to_dict())

    def _restore(self) -> None:
        """Load the checkpoint, check the config seal, rewind torn output."""
        ckpt_path = self.path(F_CHECKPOINT)
        if not os.path.isfile(ckpt_path):
            raise ConfigError(f"no checkpoint to resume from in {self.run_dir}")
        with open(ckpt_path, "r", encoding="utf-8") as fh:
            self.state = Checkpoint.from_dict(json.load(fh))
        if self.state.config_checksum != self.cfg.checksum:
            raise ConfigError(
                "config has changed since the checkpoint was written; "
                "refusing to resume (delete the run dir or restore the config)"
            )
        if "rng" in self.state.stage_state:
            self.rng = restore_rng_state(self.state.stage_state["rng"])
        cursors = self.state.stage_state.get("cursors")
        if cursors is not None and isinstance(self.gateway.backend, MockBackend):
            self.gateway.backend.set_cursors(cursors)
        for name in _INCREMENTAL:
            offset = self.state.output_offsets.get(name)
            full = self.path(name)
            if offset is not None and os.path.isfile(full):
                truncate_to(full, offset)
            elif offset is None and os.path.isfile(full):
                os.remove(full)  # stage never checkpointed: rebuild from scratch

    def _record_offset(self, name: str, offset: int) -> None:
        self.state.output_offsets[name] = offset

    # -- stages --------------------------------------------------------------

    def _stage_filter(self) -> dict:
        model = RelevanceModel.load(self.cfg.classifier_model_path)
        stats = filter_corpus(
            model,
            self.cfg.documents_path,
            self.path(F_FILTERED),
            threshold=self.cfg.classifier_threshold,
        )
        counters = {
            "read": stats.read,
            "kept": stats.kept,
            "dropped": stats.dropped,
            "malformed": stats.malformed,
        }
        _write_json(self.path(F_FILTER_STATS), counters)
        return counters

    def _structure_inputs(self) -> list:
        sources = []
        reader = JsonlReader(self.cfg.seeds_path)
        for rec in reader:
            sources.append(SeedTask.from_dict(rec))
        if reader.malformed:
            raise StageFailure(
                f"seeds file has {reader.malformed} malformed lines: "
                f"{self.cfg.seeds_path}"
            )
        docs_path = None
        if self.cfg.enabled("filter"):
            docs_path = self.path(F_FILTERED)
        elif self.cfg.documents_path:
            docs_path = self.cfg.documents_path  # filter disabled: pass-through
        if docs_path and os.path.isfile(docs_path):
            doc_reader = JsonlReader(docs_path)
            for rec in doc_reader:
                try:
                    sources.append(RawDocument.from_dict(rec))
                except SchemaError:
                    continue
        return sources

    def _stage_structure(self) -> dict:
        sources = self._structure_inputs()
        start = self.state.records_done if self.state.stage == "structure" else 0
        stats = dict(self.state.stage_state.get("stats", {})) if start else {}
        structured = stats.get("structured", 0)
        rejected = dict(stats.get("rejected_by_reason", {}))
        writer = JsonlWriter(self.path(F_STRUCTURED), append=start > 0)
        with writer:
            for idx in range(start, len(sources)):
                outcome = structure(new_job(sources[idx]), self.gateway)
                if outcome.ok:
                    offset = writer.write(outcome_to_record(outcome))
                    structured += 1
                else:
                    offset = writer.offset
                    reason = outcome.rejection.value
                    rejected[reason] = rejected.get(reason, 0) + 1
                done = idx + 1
                if done % self.cfg.checkpoint_interval == 0 and done < len(sources):
                    writer.sync()
                    self._record_offset(F_STRUCTURED, offset)
                    self._save_checkpoint(
                        "structure",
                        done,
                        {
                            "stats": {
                                "structured": structured,
                                "rejected_by_reason": rejected,
                            }
                        },
                    )
            writer.sync()
            self._record_offset(F_STRUCTURED, writer.offset)
        counters = {
            "inputs": len(sources),
            "structured": structured,
            "rejected_by_reason": dict(sorted(rejected.items())),
        }
        _write_json(self.path(F_STRUCTURE_STATS), counters)
        return counters

    def _stage_validate(self) -> dict:
        records = list(JsonlReader(self.path(F_STRUCTURED)))
        start = self.state.records_done if self.state.stage == "validate" else 0
        stats = dict(self.state.stage_state.get("stats", {})) if start else {}
        validated = stats.get("validated", 0)
        rejected = dict(stats.get("rejected_by_reason", {}))
        clock = self.cfg.evolution.clock()
        writer = JsonlWriter(self.path(F_VALIDATED), append=start > 0)
        with writer:
            for idx in range(start, len(records)):
                rec = records[idx]
                instruction = Instruction.from_dict(rec["instruction"])
                reasoning = ReasoningTrace.from_dict(rec["reasoning"])
                candidates = tuple(
                    CandidatePair.from_dict(c) for c in rec["candidates"]
                )
                selection = validate_candidates(candidates, self.cfg.sandbox)
                offset = writer.offset
                if selection.selected_index is None:
                    rejected["no_passing_candidate"] = (
                        rejected.get("no_passing_candidate", 0) + 1
                    )
                else:
                    chosen = candidates[selection.selected_index]
                    verdict = selection.verdicts[selection.selected_index]
                    if self.cfg.evolution.normalize_telemetry:
                        verdict = normalize_verdict(verdict)
                    judge_verdict = judge(
                        instruction,
                        reasoning,
                        chosen.solution_source,
                        chosen.test_source,
                        self.gateway,
                    )
                    if not judge_verdict.passed:
                        rejected["judge_failed"] = rejected.get("judge_failed", 0) + 1
                    else:
                        quad = Quadruplet(
                            instruction=instruction,
                            reasoning=reasoning,
                            solution_source=chosen.solution_source,
                            test_source=chosen.test_source,
                            selected_candidate=selection.selected_index,
                            verdict=verdict,
                            judge_passed=True,
                            created_at=clock(),
                        )
                        offset = writer.write(quad.to_dict())
                        validated += 1
                done = idx + 1
                if done % self.cfg.checkpoint_interval == 0 and done < len(records):
                    writer.sync()
                    self._record_offset(F_VALIDATED, offset)
                    self._save_checkpoint(
                        "validate",
                        done,
                        {
                            "stats": {
                                "validated": validated,
                                "rejected_by_reason": rejected,
                            }
                        },
                    )
            writer.sync()
            self._record_offset(F_VALIDATED, writer.offset)
        counters = {
            "inputs": len(records),
            "validated": validated,
            "rejected_by_reason": dict(sorted(rejected.items())),
        }
        _write_json(self.path(F_VALIDATE_STATS), counters)
        return counters

    def _stage_evolve(self) -> dict:
        seeds = [
            Instruction.from_dict(rec["instruction"])
            for rec in JsonlReader(self.path(F_VALIDATED))
        ]
        if not seeds:
            raise StageFailure(
                "evolve stage needs at least one validated quadruplet; "
                "none survived validation"
            )
        accepted = []
        evolved_path = self.path(F_EVOLVED)
        if self.state.stage == "evolve" and os.path.isfile(evolved_path):
            accepted = [
                Instruction.from_dict(rec["instruction"])
                for rec in JsonlReader(evolved_path)
            ]
        pool = PopulationPool.rebuild(
            seeds, accepted, self.cfg.evolution.refresh_interval
        )
        stats = EvolveStats.from_dict(self.state.stage_state.get("stats", {}))
        writer = JsonlWriter(evolved_path, append=bool(accepted))

        def on_accept(rng: random.Random) -> None:
            if stats.accepted % self.cfg.checkpoint_interval == 0:
                writer.sync()
                self._record_offset(F_EVOLVED, writer.offset)
                self._save_checkpoint("evolve", stats.accepted, {"stats": stats.to_dict()})

        with writer:
            final = evolve(
                pool,
                self.cfg.evolution,
                self.gateway,
                self.cfg.sandbox,
                emit=lambda quad: writer.write(quad.to_dict()),
                rng=self.rng,
                stats=stats,
                checkpoint=on_accept,
            )
            writer.sync()
            self._record_offset(F_EVOLVED, writer.offset)
        counters = final.to_dict()
        _write_json(self.path(F_EVOLVE_STATS), counters)
        if final.halted != "target_reached":
            # an orchestrated run must hit its target; a shorter gateway
            # recording is an operator problem, fixable by extending the
            # script file and resuming from the last acceptance
            raise StageFailure(
                f"evolve halted early ({final.halted}) at "
                f"{final.accepted}/{self.cfg.evolution.target_accepted} accepted"
            )

        combined = list(JsonlReader(self.path(F_VALIDATED)))
        combined.extend(JsonlReader(evolved_path))
        write_jsonl(self.path(F_ALL), combined)
        return counters

    def _dataset_before(self, stage: str) -> str:
        """Path of the newest dataset artifact feeding the given stage."""
        current = self.path(F_VALIDATED)
        if self.cfg.enabled("evolve") and stage_index(stage) > stage_index("evolve"):
            current = self.path(F_ALL)
        if self.cfg.enabled("dedup") and stage_index(stage) > stage_index("dedup"):
            current = self.path(F_DEDUPED)
        if (
            self.cfg.enabled("decontam")
            and self.cfg.drop_hits
            and stage_index(stage) > stage_index("decontam")
        ):
            current = self.path(F_DECONTAMINATED)
        return current

    def _stage_dedup(self) -> dict:
        report = run_dedup(
            self._dataset_before("dedup"),
            self.path(F_DEDUPED),
            self.gateway,
            self.cfg.dedup,
            clusters_path=self.path(F_CLUSTERS),
            report_path=self.path(F_DEDUP_REPORT),
        )
        return report.to_dict()

    def _stage_decontam(self) -> dict:
        report = run_decontam(
            self._dataset_before("decontam"),
            list(self.cfg.benchmark_paths),
            report_path=self.path(F_OVERLAP_REPORT),
            drop_hits=self.cfg.drop_hits,
            out_path=self.path(F_DECONTAMINATED) if self.cfg.drop_hits else None,
        )
        if not report.clean:
            self.summary.exit_code = EXIT_CONTAMINATED
        return {
            "scanned": report.scanned,
            "hits": len(report.hits),
            "clean": report.clean,
        }

    def _stage_export(self) -> dict:
        final_source = self._dataset_before("export")
        records = list(JsonlReader(final_source))
        write_jsonl(self.path(F_EXPORT), records)
        _write_json(
            self.path(F_METADATA),
            {
                "version": __version__,
                "config_checksum": self.cfg.checksum,
                "gateway_mode": self.cfg.gateway.mode,
                "run_timestamp": self.cfg.evolution.run_timestamp,
                "prompt_checksums": prompt_checksums(),
            },
        )
        return {"records": len(records)}

    # -- driver ---------------------------------------------------------------

    def execute(self) -> RunSummary:
        os.makedirs(self.run_dir, exist_ok=True)
        if self.resume:
            self._restore()
            self.summary.stages = dict(self.state.stage_state.get("summary", {}))
        else:
            _write_json(self.path(F_CONFIG), self.cfg.raw)
            self._save_checkpoint(STAGE_ORDER[0], 0)

        handlers: dict[str, Callable[[], dict]] = {
            "filter": self._stage_filter,
            "structure": self._stage_structure,
            "validate": self._stage_validate,
            "evolve": self._stage_evolve,
            "dedup": self._stage_dedup,
            "decontam": self._stage_decontam,
            "export": self._stage_export,
        }

        start_at = stage_index(self.state.stage)
        for stage in STAGE_ORDER[start_at:]:
            if not self.cfg.enabled(stage):
                self.summary.stages[stage] = {"skipped": True}
                self._advance_past(stage)
                continue
            log.info("stage %s starting", stage)
            try:
                counters = handlers[stage]()
            except (StageFailure, ConfigError):
                raise
            except Exception as exc:
                # the last checkpoint already names this stage and the rng /
                # cursor state as of its records_done; writing a fresh one here
                # would pair old offsets with post-failure entropy
                raise StageFailure(
                    f"stage {stage} failed: {exc}; resume with "
                    f"`pipeline resume --dir {self.run_dir}`"
                ) from exc
            self.summary.stages[stage] = counters
            self._advance_past(stage)

        self.summary.finished = True
        _write_json(self.path(F_SUMMARY), self.summary.to_dict())
        self._save_checkpoint(DONE_STAGE, 0, {"summary": self.summary.stages})
        return self.summary

    def _advance_past(self, stage: str) -> None:
        idx = stage_index(stage)
        next_stage = STAGE_ORDER[idx + 1] if idx + 1 < len(STAGE_ORDER) else DONE_STAGE
        self._save_checkpoint(next_stage, 0, {"summary": self.summary.stages})


def stage_index(stage: str) -> int:
    if stage == DONE_STAGE:
        return len(STAGE_ORDER)
    return STAGE_ORDER.index(stage)


def run(config: PipelineConfig) -> RunSummary:
    """Fresh run. Refuses a directory that already holds a checkpoint."""
    ckpt = os.path.join(config.run_dir, F_CHECKPOINT)
    if os.path.isfile(ckpt):
        raise ConfigError(
            f"{config.run_dir} already contains a run; use resume or a fresh directory"
        )
    return PipelineRun(config, resume=False).execute()


def resume(run_dir: str) -> RunSummary:
    """Continue a killed or failed run from its checkpoint."""
    cfg_path = os.path.join(run_dir, F_CONFIG)
    if not os.path.isfile(cfg_path):
        raise ConfigError(f"no stored config in {run_dir}")
    config = load_config(cfg_path)
    config.run_dir = run_dir if os.path.isabs(run_dir) else os.path.abspath(run_dir)
    return PipelineRun(config, resume=True).execute()


# --- stats ----------------------------------------------------------------------


_LEDGERS = {
    "filter": F_FILTER_STATS,
    "structure": F_STRUCTURE_STATS,
    "validate": F_VALIDATE_STATS,
    "evolve": F_EVOLVE_STATS,
    "dedup": F_DEDUP_REPORT,
    "decontam": F_OVERLAP_REPORT,
}

_ZERO_COUNTERS: dict = {
    "filter": {"read": 0, "kept": 0, "dropped": 0, "malformed": 0},
    "structure": {"inputs": 0, "structured": 0, "rejected_by_reason": {}},
    "validate": {"inputs": 0, "validated": 0, "rejected_by_reason": {}},
    "evolve": {
        "generated": 0,
        "accepted": 0,
        "refreshes": 0,
        "halted": "",
        "rejected_by_reason": {},
    },
    "dedup": {
        "flagged": 0,
        "verified_duplicate": 0,
        "verified_distinct": 0,
        "deferred": 0,
        "retained": 0,
        "dropped": 0,
    },
    "decontam": {"scanned": 0, "hits": 0, "clean": True},
}


def stats(run_dir: str) -> tuple[dict, list]:
    """Recompute the per-stage counter table from the on-disk ledgers.

    Missing ledgers produce zeros plus a warning instead of an error, so
    a partial or fresh run directory still yields a usable summary.
    """
    if not os.path.isdir(run_dir):
        raise ConfigError(f"run directory not found: {run_dir}")
    table: dict = {}
    warnings: list = []
    for stage, ledger in _LEDGERS.items():
        path = os.path.join(run_dir, ledger)
        if not os.path.isfile(path):
            warnings.append(f"missing ledger for {stage}: {ledger}")
            table[stage] = dict(_ZERO_COUNTERS[stage])
            continue
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        if stage == "decontam":
            data = {
                "scanned": data.get("scanned", 0),
                "hits": len(data.get("hits", [])),
                "clean": data.get("clean", True),
            }
        table[stage] = data
    export_path = os.path.join(run_dir, F_EXPORT)
    if os.path.isfile(export_path):
        count = sum(1 for _ in JsonlReader(export_path))
        table["export"] = {"records": count}
    else:
        warnings.append(f"missing final dataset: {F_EXPORT}")
        table["export"] = {"records": 0}
    evolve_counters = table.get("evolve") or {}
    generated = evolve_counters.get("generated", 0)
    if generated:
        rate = evolve_counters.get("accepted", 0) / generated
        table["evolve"]["acceptance_rate"] = round(rate, 4)
    return table, warnings
