"""Command-line entry points.

Verbs: classifier train/filter, sandbox exec, evolve, dedup run,
decontam, pipeline run/resume/stats. Exit codes: 0 success, 2 config
error, 3 stage failure, 4 contamination detected.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import random
import sys
from typing import Optional

from . import __version__
from .classifier import (
    DEFAULT_THRESHOLD,
    RelevanceModel,
    TrainConfig,
    filter_corpus,
    train,
)
from .decontam import run_decontam
from .dedup import DedupConfig, IndexMode, run_dedup
from .evolution import EvolutionConfig, PopulationPool, evolve
from .gateway import Gateway, GatewayConfig, MockBackend, ScriptExhausted
from .jsonl import JsonlReader, JsonlWriter, dumps
from .model import CandidatePair, Instruction, SchemaError, VerdictStatus
from .pipeline import (
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_STAGE,
    ConfigError,
    StageFailure,
    format_summary,
    load_config,
    resume,
    run,
    stats,
)
from .sandbox import SandboxPolicy, run_one

log = logging.getLogger(__name__)


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _read_texts(path: str, fmt: str) -> list[str]:
    """Training texts, one per line, or jsonl records with a text field."""
    texts: list[str] = []
    if fmt == "jsonl":
        for rec in JsonlReader(path):
            value = rec.get("text")
            if isinstance(value, str) and value.strip():
                texts.append(value)
        return texts
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.strip():
                texts.append(line)
    return texts


# --- classifier -----------------------------------------------------------------


def cmd_classifier_train(args: argparse.Namespace) -> int:
    positives = _read_texts(args.pos, args.format)
    negatives = _read_texts(args.neg, args.format)
    if not positives or not negatives:
        return _fail("both --pos and --neg must contain at least one text", EXIT_CONFIG)
    try:
        config = TrainConfig(
            epochs=args.epochs,
            learning_rate=args.learning_rate,
            seed=args.seed,
            bucket_count=args.buckets,
        )
    except ValueError as exc:
        return _fail(str(exc), EXIT_CONFIG)
    model = train(positives, negatives, config)
    model.save(args.out)
    print(f"trained on {len(positives)} positive / {len(negatives)} negative texts")
    print(f"model written to {args.out}")
    return EXIT_OK


def cmd_classifier_filter(args: argparse.Namespace) -> int:
    try:
        model = RelevanceModel.load(args.model)
    except (OSError, ValueError, SchemaError) as exc:
        return _fail(f"cannot load model: {exc}", EXIT_CONFIG)
    result = filter_corpus(model, getattr(args, "in"), args.out, threshold=args.threshold)
    print(
        f"read={result.read} kept={result.kept} "
        f"dropped={result.dropped} malformed={result.malformed}"
    )
    return EXIT_OK


# --- sandbox ---------------------------------------------------------------------


def cmd_sandbox_exec(args: argparse.Namespace) -> int:
    try:
        with open(args.solution, "r", encoding="utf-8") as fh:
            solution = fh.read()
        with open(args.tests, "r", encoding="utf-8") as fh:
            tests = fh.read()
    except OSError as exc:
        return _fail(str(exc), EXIT_CONFIG)
    policy = SandboxPolicy()
    if args.policy:
        try:
            with open(args.policy, "r", encoding="utf-8") as fh:
                policy = SandboxPolicy.from_dict(json.load(fh))
        except (OSError, ValueError) as exc:
            return _fail(f"bad policy file: {exc}", EXIT_CONFIG)
    verdict = run_one(CandidatePair(0, solution, tests), policy)
    print(dumps(verdict.to_dict()))
    return EXIT_OK if verdict.status is VerdictStatus.PASS else EXIT_STAGE


# --- evolve -----------------------------------------------------------------------


def cmd_evolve(args: argparse.Namespace) -> int:
    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, ValueError) as exc:
        return _fail(f"cannot read config: {exc}", EXIT_CONFIG)
    if not isinstance(raw, dict):
        return _fail("config root must be a JSON object", EXIT_CONFIG)
    known = {"evolution", "gateway", "sandbox"}
    unknown = set(raw) - known
    if unknown:
        return _fail(f"unknown config keys: {sorted(unknown)}", EXIT_CONFIG)

    evo_raw = dict(raw.get("evolution", {}))
    if args.target is not None:
        evo_raw["target_accepted"] = args.target
    if args.seed is not None:
        evo_raw["rng_seed"] = args.seed
    try:
        evo = EvolutionConfig.from_dict(evo_raw)
        gateway_cfg = GatewayConfig.from_dict(raw.get("gateway", {}))
        policy = SandboxPolicy.from_dict(raw.get("sandbox", {}))
        gateway = Gateway(gateway_cfg)
    except (ValueError, TypeError) as exc:
        return _fail(str(exc), EXIT_CONFIG)

    reader = JsonlReader(args.pool)
    seeds = [Instruction.from_dict(rec["instruction"]) for rec in reader]
    if reader.malformed or not seeds:
        return _fail(
            f"pool file must hold quadruplet records "
            f"({len(seeds)} parsed, {reader.malformed} malformed)",
            EXIT_CONFIG,
        )

    pool = PopulationPool(seeds)
    rng = random.Random(evo.rng_seed)
    with JsonlWriter(args.out, append=False) as writer:
        result = evolve(
            pool, evo, gateway, policy, emit=lambda q: writer.write(q.to_dict()), rng=rng
        )
    with open(args.stats, "w", encoding="utf-8") as fh:
        fh.write(dumps(result.to_dict()) + "\n")
    print(
        f"accepted={result.accepted} generated={result.generated} "
        f"refreshes={result.refreshes} halted={result.halted}"
    )
    if result.halted != "target_reached":
        return _fail(f"run halted early: {result.halted}", EXIT_STAGE)
    return EXIT_OK


# --- dedup -------------------------------------------------------------------------


def _dedup_gateway(script_path: Optional[str]) -> Gateway:
    if script_path:
        return Gateway(
            GatewayConfig.from_dict({"mode": "mock", "mock_script_path": script_path})
        )
    # no gateway given: any pair that needs LLM verification fails loudly
    # instead of being silently assumed duplicate or distinct
    return Gateway(GatewayConfig(), backend=MockBackend({}))


def cmd_dedup_run(args: argparse.Namespace) -> int:
    mode = None
    if args.exact:
        mode = IndexMode.EXACT
    elif args.approx:
        mode = IndexMode.APPROX
    try:
        config = DedupConfig(threshold=args.threshold, mode=mode)
    except ValueError as exc:
        return _fail(str(exc), EXIT_CONFIG)
    gateway = _dedup_gateway(args.gateway_script)
    try:
        report = run_dedup(
            getattr(args, "in"),
            args.out,
            gateway,
            config,
            clusters_path=args.clusters,
            report_path=args.report,
            progress=lambda msg: print(msg, file=sys.stderr),
        )
    except ScriptExhausted:
        return _fail(
            "flagged pairs need LLM verification; pass --gateway-script "
            "with enough judge replies",
            EXIT_STAGE,
        )
    except (OSError, SchemaError, ValueError) as exc:
        return _fail(str(exc), EXIT_STAGE)
    print(dumps(report.to_dict()))
    return EXIT_OK


# --- decontam ------------------------------------------------------------------------


def cmd_decontam(args: argparse.Namespace) -> int:
    if args.drop_hits and not args.out:
        return _fail("--drop-hits requires --out", EXIT_CONFIG)
    try:
        report = run_decontam(
            getattr(args, "in"),
            args.benchmark,
            report_path=args.report,
            drop_hits=args.drop_hits,
            out_path=args.out,
        )
    except (OSError, ValueError, SchemaError) as exc:
        return _fail(str(exc), EXIT_CONFIG)
    for ds_id, bench in report.hits:
        print(f"hit: {ds_id} appears in {bench}")
    print(f"scanned={report.scanned} hits={len(report.hits)} clean={report.clean}")
    return report.exit_code


# --- pipeline ---------------------------------------------------------------------------


def cmd_pipeline_run(args: argparse.Namespace) -> int:
    try:
        config = load_config(args.config, overrides=tuple(args.set or ()))
    except ConfigError as exc:
        return _fail(str(exc), EXIT_CONFIG)
    ckpt = os.path.join(config.run_dir, "checkpoint.json")
    if args.force and os.path.isfile(ckpt):
        os.remove(ckpt)
    try:
        summary = run(config)
    except ConfigError as exc:
        return _fail(str(exc), EXIT_CONFIG)
    except StageFailure as exc:
        return _fail(str(exc), EXIT_STAGE)
    print(format_summary(summary.stages))
    return summary.exit_code


def cmd_pipeline_resume(args: argparse.Namespace) -> int:
    try:
        summary = resume(args.dir)
    except ConfigError as exc:
        return _fail(str(exc), EXIT_CONFIG)
    except StageFailure as exc:
        return _fail(str(exc), EXIT_STAGE)
    print(format_summary(summary.stages))
    return summary.exit_code


def cmd_pipeline_stats(args: argparse.Namespace) -> int:
    try:
        table, warnings = stats(args.dir)
    except ConfigError as exc:
        return _fail(str(exc), EXIT_CONFIG)
    for note in warnings:
        print(f"warning: {note}", file=sys.stderr)
    print(format_summary(table))
    return EXIT_OK


# --- parser ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="taskmill",
        description="Instruction-reasoning-solution-test dataset construction.",
    )
    parser.add_argument("--version", action="version", version=f"taskmill {__version__}")
    parser.add_argument(
        "-v", "--verbose", action="store_true", help="log progress to stderr"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    clf = sub.add_parser("classifier", help="relevance classifier")
    clf_sub = clf.add_subparsers(dest="verb", required=True)
    ct = clf_sub.add_parser("train", help="fit a model from labeled text files")
    ct.add_argument("--pos", required=True, help="file of coding-relevant texts")
    ct.add_argument("--neg", required=True, help="file of irrelevant texts")
    ct.add_argument("--out", required=True, help="model output path")
    ct.add_argument("--format", choices=("lines", "jsonl"), default="lines")
    ct.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    ct.add_argument("--learning-rate", type=float, default=TrainConfig.learning_rate)
    ct.add_argument("--seed", type=int, default=TrainConfig.seed)
    ct.add_argument("--buckets", type=int, default=TrainConfig.bucket_count)
    ct.set_defaults(func=cmd_classifier_train)
    cf = clf_sub.add_parser("filter", help="keep documents scoring at or above threshold")
    cf.add_argument("--model", required=True)
    cf.add_argument("--in", required=True)
    cf.add_argument("--out", required=True)
    cf.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    cf.set_defaults(func=cmd_classifier_filter)

    sb = sub.add_parser("sandbox", help="isolated candidate execution")
    sb_sub = sb.add_subparsers(dest="verb", required=True)
    se = sb_sub.add_parser("exec", help="run one solution against its tests")
    se.add_argument("--solution", required=True)
    se.add_argument("--tests", required=True)
    se.add_argument("--policy", help="JSON file of resource limits")
    se.set_defaults(func=cmd_sandbox_exec)

    ev = sub.add_parser("evolve", help="expand a validated pool")
    ev.add_argument("--pool", required=True, help="validated quadruplets jsonl")
    ev.add_argument("--config", required=True, help="JSON with evolution/gateway/sandbox")
    ev.add_argument("--target", type=int, help="override evolution.target_accepted")
    ev.add_argument("--seed", type=int, help="override evolution.rng_seed")
    ev.add_argument("--out", default="quadruplets.jsonl")
    ev.add_argument("--stats", default="run_stats.json")
    ev.set_defaults(func=cmd_evolve)

    dd = sub.add_parser("dedup", help="near-duplicate removal")
    dd_sub = dd.add_subparsers(dest="verb", required=True)
    dr = dd_sub.add_parser("run", help="flag, verify, cluster, and drop duplicates")
    dr.add_argument("--in", required=True)
    dr.add_argument("--out", required=True)
    dr.add_argument("--threshold", type=float, default=DedupConfig.threshold)
    mode = dr.add_mutually_exclusive_group()
    mode.add_argument("--exact", action="store_true", help="force exhaustive scan")
    mode.add_argument("--approx", action="store_true", help="force graph index")
    dr.add_argument("--clusters", help="clusters.jsonl output path")
    dr.add_argument("--report", help="dedup_report.json output path")
    dr.add_argument("--gateway-script", help="mock gateway script for verification")
    dr.set_defaults(func=cmd_dedup_run)

    dc = sub.add_parser("decontam", help="benchmark overlap check")
    dc.add_argument("--in", required=True)
    dc.add_argument(
        "--benchmark", action="append", required=True, help="repeatable benchmark jsonl"
    )
    dc.add_argument("--drop-hits", action="store_true")
    dc.add_argument("--out", help="filtered copy (required with --drop-hits)")
    dc.add_argument("--report", help="overlap_report.json output path")
    dc.set_defaults(func=cmd_decontam)

    pl = sub.add_parser("pipeline", help="run every stage end to end")
    pl_sub = pl.add_subparsers(dest="verb", required=True)
    pr = pl_sub.add_parser("run", help="fresh run from a config file")
    pr.add_argument("--config", required=True)
    pr.add_argument(
        "--set", action="append", metavar="KEY=VALUE", help="dotted config override"
    )
    pr.add_argument(
        "--force", action="store_true", help="discard an existing checkpoint first"
    )
    pr.set_defaults(func=cmd_pipeline_run)
    ps = pl_sub.add_parser("resume", help="continue from the checkpoint")
    ps.add_argument("--dir", required=True)
    ps.set_defaults(func=cmd_pipeline_resume)
    pt = pl_sub.add_parser("stats", help="counter table from the run ledgers")
    pt.add_argument("--dir", required=True)
    pt.set_defaults(func=cmd_pipeline_stats)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
