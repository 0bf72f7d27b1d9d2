"""End-to-end orchestration tests against the bundled fixture recording."""

import json
import os

import pytest

from mock_scripts import (
    evolve_instruction,
    pipeline_script,
    structure_instruction,
)
from taskmill.classifier import TrainConfig, train
from taskmill.jsonl import JsonlReader, write_jsonl
from taskmill.model import RawDocument, canonical_id
from taskmill.pipeline import (
    Checkpoint,
    ConfigError,
    PipelineConfig,
    StageFailure,
    config_from_dict,
    load_config,
    resume,
    run,
    stats,
)

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")
SEEDS = os.path.join(FIXTURES, "seeds.jsonl")
SCRIPT = os.path.join(FIXTURES, "pipeline_script.json")
BENCH_CLEAN = os.path.join(FIXTURES, "benchmark_clean.jsonl")
BENCH_HOT = os.path.join(FIXTURES, "benchmark_hot.jsonl")

N_SEEDS = 20
N_OFFSPRING = 12
EXPORTED = N_SEEDS + N_OFFSPRING - 1  # one planted duplicate dropped


def golden_raw(run_dir, script=SCRIPT, **overrides):
    raw = {
        "run_dir": str(run_dir),
        "seeds": SEEDS,
        "rng_seed": 7,
        "checkpoint_interval": 1,
        "benchmarks": [BENCH_CLEAN],
        "gateway": {"mode": "mock", "mock_script_path": str(script)},
        "evolution": {"target_accepted": N_OFFSPRING, "refresh_interval": 5},
    }
    raw.update(overrides)
    return raw


def make_config(run_dir, script=SCRIPT, **overrides):
    return config_from_dict(golden_raw(run_dir, script, **overrides), base_dir="/")


def read_bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


# --- config loading ----------------------------------------------------------


class TestConfig:
    def test_relative_paths_resolve_against_config_dir(self, tmp_path):
        cfg_dir = tmp_path / "conf"
        cfg_dir.mkdir()
        seeds = cfg_dir / "seeds.jsonl"
        seeds.write_bytes(read_bytes(SEEDS))
        cfg_path = cfg_dir / "cfg.json"
        cfg_path.write_text(
            json.dumps(
                {
                    "run_dir": "run",
                    "seeds": "seeds.jsonl",
                    "gateway": {"mode": "mock", "mock_script_path": str(SCRIPT)},
                }
            )
        )
        cfg = load_config(str(cfg_path))
        assert cfg.seeds_path == str(seeds)
        assert cfg.run_dir == str(cfg_dir / "run")

    def test_unknown_key_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="unknown config keys"):
            make_config(tmp_path, banana=1)

    def test_unknown_stage_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="unknown stages"):
            make_config(tmp_path, stages={"polish": True})

    def test_missing_seeds_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="seeds file not found"):
            make_config(tmp_path, seeds=str(tmp_path / "absent.jsonl"))

    def test_filter_needs_documents(self, tmp_path):
        with pytest.raises(ConfigError, match="no documents"):
            make_config(tmp_path, stages={"filter": True})

    def test_filter_needs_model(self, tmp_path):
        docs = tmp_path / "docs.jsonl"
        docs.write_text("")
        with pytest.raises(ConfigError, match="no classifier_model"):
            make_config(tmp_path, documents=str(docs))

    def test_decontam_needs_benchmarks(self, tmp_path):
        with pytest.raises(ConfigError, match="no benchmark files"):
            make_config(tmp_path, benchmarks=[], stages={"decontam": True})

    def test_mock_gateway_needs_script(self, tmp_path):
        with pytest.raises(ConfigError, match="mock_script_path"):
            make_config(tmp_path, gateway={"mode": "mock"})

    def test_checkpoint_interval_positive(self, tmp_path):
        with pytest.raises(ConfigError, match="checkpoint_interval"):
            make_config(tmp_path, checkpoint_interval=0)

    def test_set_overrides(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(golden_raw(tmp_path / "run")))
        cfg = load_config(
            str(cfg_path),
            overrides=(
                "rng_seed=13",
                "evolution.target_accepted=3",
                "gateway.mode=mock",
            ),
        )
        assert cfg.rng_seed == 13
        assert cfg.evolution.target_accepted == 3

    def test_set_raw_string_fallback(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(golden_raw(tmp_path / "run")))
        cfg = load_config(str(cfg_path), overrides=("gateway.mock_script_path=" + SCRIPT,))
        assert cfg.gateway.mock_script_path == SCRIPT

    def test_set_without_equals_rejected(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(golden_raw(tmp_path / "run")))
        with pytest.raises(ConfigError, match="key=value"):
            load_config(str(cfg_path), overrides=("rng_seed",))

    def test_checksum_tracks_raw_config(self, tmp_path):
        a = make_config(tmp_path / "a")
        b = make_config(tmp_path / "a")
        c = make_config(tmp_path / "a", rng_seed=8)
        assert a.checksum == b.checksum
        assert a.checksum != c.checksum

    def test_checkpoint_roundtrip(self):
        ckpt = Checkpoint(
            stage="evolve",
            records_done=4,
            output_offsets={"evolved.jsonl": 123},
            config_checksum="abc",
            stage_state={"rng": [3, [1, 2], None]},
        )
        again = Checkpoint.from_dict(json.loads(json.dumps(ckpt.to_dict())))
        assert again == ckpt


# --- the golden run -----------------------------------------------------------


@pytest.fixture(scope="module")
def golden(tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("golden")
    summary = run(make_config(run_dir))
    return run_dir, summary


def load_export(run_dir):
    return list(JsonlReader(os.path.join(str(run_dir), "quadruplets.jsonl")))


class TestGoldenRun:
    def test_summary_and_artifacts(self, golden):
        run_dir, summary = golden
        assert summary.exit_code == 0
        assert summary.finished
        for name in (
            "structured.jsonl",
            "validated.jsonl",
            "evolved.jsonl",
            "all_quadruplets.jsonl",
            "deduped.jsonl",
            "clusters.jsonl",
            "dedup_report.json",
            "overlap_report.json",
            "quadruplets.jsonl",
            "metadata.json",
            "run_summary.json",
            "checkpoint.json",
        ):
            assert os.path.isfile(os.path.join(str(run_dir), name)), name

    def test_stage_counters(self, golden):
        _, summary = golden
        assert summary.stages["filter"] == {"skipped": True}
        assert summary.stages["structure"]["structured"] == N_SEEDS
        assert summary.stages["validate"]["validated"] == N_SEEDS
        evolve = summary.stages["evolve"]
        assert evolve["accepted"] == N_OFFSPRING
        assert evolve["generated"] == N_OFFSPRING
        assert evolve["refreshes"] == 2
        assert evolve["halted"] == "target_reached"
        dedup = summary.stages["dedup"]
        assert dedup["flagged"] == 1
        assert dedup["verified_duplicate"] == 1
        assert dedup["dropped"] == 1
        assert dedup["retained"] == EXPORTED
        assert summary.stages["decontam"] == {
            "scanned": EXPORTED,
            "hits": 0,
            "clean": True,
        }
        assert summary.stages["export"] == {"records": EXPORTED}

    def test_export_contents(self, golden):
        run_dir, _ = golden
        records = load_export(run_dir)
        assert len(records) == EXPORTED
        ids = [r["instruction"]["id"] for r in records]
        assert len(set(ids)) == EXPORTED
        operators = [r["instruction"]["operator"] for r in records]
        assert operators[:N_SEEDS] == ["seed"] * N_SEEDS
        assert set(operators[N_SEEDS:]) <= {"crossover", "mutation"}
        texts = {r["instruction"]["text"] for r in records}
        assert evolve_instruction(4) in texts
        assert evolve_instruction(4, permuted=True) not in texts

    def test_lineage_is_acyclic_and_closed(self, golden):
        run_dir, _ = golden
        records = load_export(run_dir)
        parents = {
            r["instruction"]["id"]: tuple(r["instruction"]["lineage"])
            for r in records
        }
        state = {}

        def visit(node):
            if state.get(node) == "done":
                return
            assert state.get(node) != "open", "lineage cycle"
            state[node] = "open"
            for parent in parents.get(node, ()):
                assert parent in parents, "lineage points outside the dataset"
                visit(parent)
            state[node] = "done"

        for node in parents:
            visit(node)

    def test_quadruplets_are_schema_valid(self, golden):
        from taskmill.model import Quadruplet

        run_dir, _ = golden
        for record in load_export(run_dir):
            quad = Quadruplet.from_dict(record)
            assert quad.judge_passed
            assert quad.verdict.duration_ms == 0  # telemetry normalized

    def test_metadata_seals_the_config(self, golden):
        run_dir, _ = golden
        with open(os.path.join(str(run_dir), "metadata.json")) as fh:
            meta = json.load(fh)
        assert meta["config_checksum"] == make_config(run_dir).checksum
        assert meta["run_timestamp"] == "1970-01-01T00:00:00Z"
        assert meta["gateway_mode"] == "mock"

    def test_byte_identical_rerun(self, golden, tmp_path):
        run_dir, _ = golden
        again = tmp_path / "again"
        summary = run(make_config(again))
        assert summary.exit_code == 0
        for name in ("quadruplets.jsonl", "evolved.jsonl", "all_quadruplets.jsonl"):
            assert read_bytes(os.path.join(str(run_dir), name)) == read_bytes(
                os.path.join(str(again), name)
            ), name

    def test_stats_recomputes_from_ledgers(self, golden):
        run_dir, summary = golden
        table, warnings = stats(str(run_dir))
        assert warnings == ["missing ledger for filter: filter_stats.json"]
        assert table["evolve"]["accepted"] == N_OFFSPRING
        assert table["evolve"]["acceptance_rate"] == 1.0
        assert table["dedup"]["dropped"] == 1
        assert table["decontam"] == summary.stages["decontam"]
        assert table["export"] == {"records": EXPORTED}

    def test_stats_on_fresh_dir_is_zeros(self, tmp_path):
        table, warnings = stats(str(tmp_path))
        assert len(warnings) == 7
        assert table["filter"] == {"read": 0, "kept": 0, "dropped": 0, "malformed": 0}
        assert table["evolve"]["accepted"] == 0
        assert table["export"] == {"records": 0}

    def test_stats_missing_dir_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            stats(str(tmp_path / "nope"))

    def test_run_refuses_existing_checkpoint(self, golden):
        run_dir, _ = golden
        with pytest.raises(ConfigError, match="already contains a run"):
            run(make_config(run_dir))


# --- kill and resume -----------------------------------------------------------


def truncated_script(out_path, keep_offspring):
    """The bundled recording cut short mid-evolve: instructor/coder replies
    for only the first keep_offspring attempts, and no verifier tail."""
    with open(SCRIPT) as fh:
        full = json.load(fh)
    cut = {
        "instructor": full["instructor"][:keep_offspring],
        "coder": full["coder"][: N_SEEDS + keep_offspring],
        "judge": full["judge"][: N_SEEDS + keep_offspring],
    }
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(cut, fh)


class TestKillAndResume:
    def test_mid_evolve_resume_is_byte_identical(self, golden, tmp_path):
        reference_dir, _ = golden
        script = tmp_path / "script.json"
        truncated_script(str(script), keep_offspring=5)
        run_dir = tmp_path / "run"
        with pytest.raises(StageFailure, match="evolve"):
            run(make_config(run_dir, script=script))

        ckpt_path = run_dir / "checkpoint.json"
        assert ckpt_path.is_file()
        ckpt = json.loads(ckpt_path.read_text())
        assert ckpt["stage"] == "evolve"
        assert ckpt["records_done"] == 5

        # operator extends the recording in place and resumes
        script.write_bytes(read_bytes(SCRIPT))
        summary = resume(str(run_dir))
        assert summary.exit_code == 0
        for name in ("evolved.jsonl", "quadruplets.jsonl"):
            assert read_bytes(str(run_dir / name)) == read_bytes(
                os.path.join(str(reference_dir), name)
            ), name

    def test_mid_structure_resume_is_byte_identical(self, golden, tmp_path):
        reference_dir, _ = golden
        script = tmp_path / "script.json"
        with open(SCRIPT) as fh:
            full = json.load(fh)
        cut = dict(full, coder=full["coder"][:7])
        script.write_text(json.dumps(cut))
        run_dir = tmp_path / "run"
        with pytest.raises(StageFailure, match="structure"):
            run(make_config(run_dir, script=script))
        ckpt = json.loads((run_dir / "checkpoint.json").read_text())
        assert ckpt["stage"] == "structure"
        assert ckpt["records_done"] == 7

        script.write_bytes(read_bytes(SCRIPT))
        summary = resume(str(run_dir))
        assert summary.exit_code == 0
        for name in ("structured.jsonl", "quadruplets.jsonl"):
            assert read_bytes(str(run_dir / name)) == read_bytes(
                os.path.join(str(reference_dir), name)
            ), name

    def test_resume_refuses_changed_config(self, tmp_path):
        script = tmp_path / "script.json"
        truncated_script(str(script), keep_offspring=3)
        run_dir = tmp_path / "run"
        with pytest.raises(StageFailure):
            run(make_config(run_dir, script=script))
        cfg_path = run_dir / "config.json"
        stored = json.loads(cfg_path.read_text())
        stored["rng_seed"] = 99
        cfg_path.write_text(json.dumps(stored))
        with pytest.raises(ConfigError, match="config has changed"):
            resume(str(run_dir))

    def test_resume_needs_checkpoint_and_config(self, tmp_path):
        with pytest.raises(ConfigError, match="no stored config"):
            resume(str(tmp_path))
        (tmp_path / "config.json").write_text(json.dumps(golden_raw(tmp_path)))
        with pytest.raises(ConfigError, match="no checkpoint"):
            resume(str(tmp_path))


# --- stage toggles ---------------------------------------------------------------


class TestStageToggles:
    def test_dedup_and_decontam_disabled_pass_through(self, tmp_path):
        run_dir = tmp_path / "run"
        summary = run(
            make_config(
                run_dir,
                stages={"dedup": False, "decontam": False},
                benchmarks=[],
            )
        )
        assert summary.exit_code == 0
        assert summary.stages["dedup"] == {"skipped": True}
        assert summary.stages["decontam"] == {"skipped": True}
        records = load_export(run_dir)
        assert len(records) == N_SEEDS + N_OFFSPRING  # duplicate kept
        assert not (run_dir / "clusters.jsonl").exists()
        assert read_bytes(str(run_dir / "quadruplets.jsonl")) == read_bytes(
            str(run_dir / "all_quadruplets.jsonl")
        )

    def test_evolve_disabled_exports_validated_only(self, tmp_path):
        script = tmp_path / "script.json"
        # structure + validate replies only; no offspring, nothing flagged
        script.write_text(json.dumps(pipeline_script(N_SEEDS, 0)))
        run_dir = tmp_path / "run"
        summary = run(
            make_config(
                run_dir,
                script=script,
                stages={"evolve": False},
                evolution={},
            )
        )
        assert summary.exit_code == 0
        assert summary.stages["evolve"] == {"skipped": True}
        records = load_export(run_dir)
        assert len(records) == N_SEEDS
        assert {r["instruction"]["operator"] for r in records} == {"seed"}

    def test_filter_stage_screens_documents(self, tmp_path):
        pos = [
            "algorithm sort graph algorithm queue index",
            "hash algorithm tree algorithm stack search",
        ]
        neg = [
            "recipe flour oven recipe butter bake",
            "recipe sugar bowl recipe whisk cream",
        ]
        model = train(pos, neg, TrainConfig(epochs=30, learning_rate=0.5))
        model_path = tmp_path / "model.json"
        model.save(str(model_path))
        docs = [RawDocument.create(t, origin="mined").to_dict() for t in pos + neg]
        docs_path = tmp_path / "docs.jsonl"
        write_jsonl(str(docs_path), docs)

        n_inputs = 2 + len(pos)  # two seeds plus the two relevant docs
        script = tmp_path / "script.json"
        script.write_text(json.dumps(pipeline_script(n_inputs, 0)))
        seeds = tmp_path / "seeds.jsonl"
        seeds.write_text(
            "".join(
                json.dumps(rec) + "\n"
                for rec in list(JsonlReader(SEEDS))[:2]
            )
        )
        run_dir = tmp_path / "run"
        summary = run(
            make_config(
                run_dir,
                script=script,
                seeds=str(seeds),
                documents=str(docs_path),
                classifier_model=str(model_path),
                classifier_threshold=0.9,
                stages={"evolve": False, "dedup": False},
                benchmarks=[],
                evolution={},
            )
        )
        assert summary.exit_code == 0
        assert summary.stages["filter"] == {
            "read": 4,
            "kept": 2,
            "dropped": 2,
            "malformed": 0,
        }
        assert summary.stages["structure"]["inputs"] == n_inputs
        assert len(load_export(run_dir)) == n_inputs


# --- contamination ---------------------------------------------------------------


class TestContamination:
    def test_hot_benchmark_reports_and_exits_4(self, tmp_path):
        run_dir = tmp_path / "run"
        summary = run(make_config(run_dir, benchmarks=[BENCH_HOT]))
        assert summary.exit_code == 4
        assert summary.stages["decontam"]["hits"] == 2
        assert summary.finished
        # reporting only: the dataset itself is left intact
        assert len(load_export(run_dir)) == EXPORTED
        with open(run_dir / "overlap_report.json") as fh:
            report = json.load(fh)
        hit_ids = {h["dataset_id"] for h in report["hits"]}
        assert canonical_id(evolve_instruction(3)) in hit_ids
        assert canonical_id(structure_instruction(2)) in hit_ids

    def test_drop_hits_filters_the_export(self, tmp_path):
        run_dir = tmp_path / "run"
        summary = run(
            make_config(run_dir, benchmarks=[BENCH_HOT], drop_hits=True)
        )
        assert summary.exit_code == 4  # still reported loudly
        records = load_export(run_dir)
        assert len(records) == EXPORTED - 2
        texts = {r["instruction"]["text"] for r in records}
        assert evolve_instruction(3) not in texts
        assert (run_dir / "decontaminated.jsonl").is_file()


# --- failure reporting -------------------------------------------------------------


class TestFailures:
    def test_malformed_seed_file_fails_structure_stage(self, tmp_path):
        seeds = tmp_path / "seeds.jsonl"
        seeds.write_text('{"id": "x"}\nnot json\n')
        with pytest.raises(StageFailure):
            run(make_config(tmp_path / "run", seeds=str(seeds)))

    def test_no_summary_written_on_failure(self, tmp_path):
        script = tmp_path / "script.json"
        truncated_script(str(script), keep_offspring=2)
        run_dir = tmp_path / "run"
        with pytest.raises(StageFailure):
            run(make_config(run_dir, script=script))
        assert not (run_dir / "run_summary.json").exists()
        assert (run_dir / "checkpoint.json").is_file()
        # partial evolve ledger still reflects honest progress
        with open(run_dir / "run_stats.json") as fh:
            ledger = json.load(fh)
        assert ledger["accepted"] == 2
        assert ledger["halted"] == "script_exhausted"

    def test_direct_config_requires_gateway_consistency(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            make_config(
                tmp_path, gateway={"mode": "mock", "mock_script_path": "/nope.json"}
            )

    def test_pipelineconfig_enabled_defaults_true(self, tmp_path):
        cfg = make_config(tmp_path)
        assert cfg.enabled("structure")
        assert not cfg.enabled("filter")  # no documents supplied
        assert cfg.enabled("decontam")  # benchmarks supplied

    def test_config_dataclass_direct_use(self):
        cfg = PipelineConfig(run_dir="/tmp/x", seeds_path="/tmp/seeds")
        assert cfg.checkpoint_interval == 100
        assert cfg.enabled("evolve")
