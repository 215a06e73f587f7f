"""Task generation, the end-to-end pipeline, records, reports, and the CLI."""

import json

import numpy as np
import pytest

from chunkkv import (
    ConfigurationError,
    RecordWriter,
    RunRecord,
    SelectionConfig,
    SyntheticTask,
    generate_task,
    replay_record,
    report_similarity,
    run_pipeline,
    toy_config,
)
from chunkkv.cli import main
from chunkkv.harness import read_records


@pytest.fixture(scope="module")
def small_task():
    return SyntheticTask(kind="needle", total_length=64, fixed_size=16, prompt_length=8)


class TestGenerateTask:
    def test_deterministic(self, small_task):
        a = generate_task(small_task, 3)
        b = generate_task(small_task, 3)
        np.testing.assert_array_equal(a.prompt_token_ids, b.prompt_token_ids)
        assert a.needle_index == b.needle_index
        for ca, cb in zip(a.chunks, b.chunks):
            np.testing.assert_array_equal(ca.token_ids, cb.token_ids)

    def test_depth_zero_first_position(self):
        task = SyntheticTask(kind="needle", total_length=64, fixed_size=16, needle_depth=0.0)
        g = generate_task(task, 1)
        assert g.needle_index == 0

    def test_fixed_size_chunk_arithmetic(self):
        task = SyntheticTask(kind="needle", total_length=20, fixed_size=8)
        g = generate_task(task, 0)
        assert [c.local_length for c in g.chunks] == [8, 8, 4]

    def test_boundary_chunking(self):
        task = SyntheticTask(
            kind="needle", total_length=20, fixed_size=None, boundaries=(5, 12)
        )
        g = generate_task(task, 0)
        assert [c.local_length for c in g.chunks] == [5, 7, 8]

    def test_depth_beyond_length_rejected(self):
        task = SyntheticTask(kind="needle", total_length=16, fixed_size=8, needle_depth=1.0)
        with pytest.raises(ConfigurationError):
            generate_task(task, 0)

    def test_bad_boundaries_rejected(self):
        task = SyntheticTask(kind="needle", total_length=16, fixed_size=None, boundaries=(0, 5))
        with pytest.raises(ConfigurationError):
            generate_task(task, 0)

    def test_uniform_noise_has_no_needle(self):
        task = SyntheticTask(kind="uniform_noise", total_length=32, fixed_size=8)
        g = generate_task(task, 0)
        assert g.needle_index is None
        assert g.needle_token is None

    def test_needle_token_planted_in_context_and_prompt(self, small_task):
        g = generate_task(small_task, 5)
        context = np.concatenate([c.token_ids for c in g.chunks])
        assert context[g.needle_index] == g.needle_token
        assert g.prompt_token_ids[0] == g.needle_token
        # exactly one occurrence in the context
        assert int((context == g.needle_token).sum()) == 1

    def test_noise_band_disjoint_from_reserved(self, small_task):
        g = generate_task(small_task, 5)
        context = np.concatenate([c.token_ids for c in g.chunks])
        mask = np.ones(64, dtype=bool)
        mask[g.needle_index] = False
        assert context[mask].max() < small_task.vocab_size - 64

    def test_task_validation(self):
        with pytest.raises(ConfigurationError):
            SyntheticTask(kind="maze")
        with pytest.raises(ConfigurationError):
            SyntheticTask(fixed_size=None, boundaries=None)
        with pytest.raises(ConfigurationError):
            SyntheticTask(fixed_size=8, boundaries=(4,))
        with pytest.raises(ConfigurationError):
            SyntheticTask(depth_range=(0.9, 0.2))
        with pytest.raises(ConfigurationError):
            SyntheticTask(prompt_length=4, prompt_needle_copies=5)


class TestPipeline:
    def test_full_budget_metrics(self, small_task):
        cfg = toy_config()
        rec = run_pipeline(
            cfg, 7, small_task, 0, SelectionConfig(ratio=1.0, geometry="global")
        )
        assert rec.metrics["cache_max_abs"] <= 1e-4
        assert rec.metrics["logit_fidelity"] <= 1e-3
        assert rec.metrics["selected_count"] == 64

    def test_zero_budget_equals_no_recompute_baseline(self, small_task):
        cfg = toy_config()
        rec = run_pipeline(cfg, 7, small_task, 0, SelectionConfig(ratio=0.0, geometry="global"))
        assert rec.metrics["selected_count"] == 0
        assert rec.metrics["rope_mom"] is None
        # the no-recompute fidelity, computed independently
        from chunkkv import assemble, cache_fidelity, full_prefill, prefill_chunk
        from chunkkv.harness import build_pipeline_weights

        w = build_pipeline_weights(cfg, 7, small_task, SelectionConfig(ratio=0.0), 1.0, 2.0, 2.0, "f64")
        g = generate_task(small_task, 0)
        cache = assemble([prefill_chunk(w, c) for c in g.chunks])
        ref = full_prefill(w, np.concatenate([c.token_ids for c in g.chunks]))
        fid = cache_fidelity(cache, ref, cfg.rope_base)
        assert rec.metrics["cache_fidelity"] == pytest.approx(fid.frobenius, rel=1e-12)

    def test_record_json_round_trip(self, small_task):
        cfg = toy_config()
        rec = run_pipeline(cfg, 7, small_task, 1, SelectionConfig(ratio=0.2))
        again = RunRecord.from_json(rec.to_json())
        assert again.metrics == rec.metrics
        assert again.model == rec.model

    def test_replay_reproduces_deterministic_metrics(self, small_task):
        cfg = toy_config()
        for reorder in (False, True):
            rec = run_pipeline(
                cfg, 7, small_task, 2, SelectionConfig(ratio=0.2), reorder=reorder
            )
            fresh = replay_record(rec)
            assert fresh.deterministic_metrics() == rec.deterministic_metrics()

    def test_reorder_off_matches_manual_path(self, small_task):
        # with reordering disabled the pipeline output is bit-identical to the
        # plain select + recompute path, so two runs of the same config agree
        cfg = toy_config()
        a = run_pipeline(cfg, 7, small_task, 3, SelectionConfig(ratio=0.2, geometry="global"))
        b = run_pipeline(cfg, 7, small_task, 3, SelectionConfig(ratio=0.2, geometry="global"))
        assert a.deterministic_metrics() == b.deterministic_metrics()
        assert a.hashes["selected"] == b.hashes["selected"]

    def test_writer_appends_records(self, small_task, tmp_path):
        cfg = toy_config()
        path = tmp_path / "runs.jsonl"
        writer = RecordWriter(path)
        run_pipeline(cfg, 7, small_task, 0, SelectionConfig(ratio=0.2), writer=writer)
        run_pipeline(cfg, 7, small_task, 1, SelectionConfig(ratio=0.2), writer=writer)
        records = read_records(path)
        assert len(records) == 2
        assert records[0].task["seed"] == 0
        assert records[1].task["seed"] == 1


class TestReportSimilarity:
    def test_single_record_single_row(self, small_task):
        cfg = toy_config()
        rec = run_pipeline(cfg, 7, small_task, 0, SelectionConfig(ratio=0.2))
        rows = report_similarity([rec])
        assert len(rows) == 1
        assert rows[0]["strategy"] == "attention-norm"
        assert rows[0]["mom"] == pytest.approx(rec.metrics["rope_mom"])

    def test_identical_selections_identical_stats(self, small_task):
        cfg = toy_config()
        a = run_pipeline(cfg, 7, small_task, 0, SelectionConfig(ratio=0.2, strategy="epic"))
        b = run_pipeline(cfg, 7, small_task, 0, SelectionConfig(ratio=0.2, strategy="random", seed=0))
        rows = report_similarity([a, b])
        by = {r["strategy"]: r for r in rows}
        # not necessarily equal selections; but identical selections (same strategy twice) are
        c = run_pipeline(cfg, 7, small_task, 0, SelectionConfig(ratio=0.2, strategy="epic"))
        rows2 = report_similarity([a, c])
        assert rows2[0]["mom"] == pytest.approx(a.metrics["rope_mom"])
        assert len(by) == 2

    def test_mixed_models_rejected(self, small_task):
        cfg = toy_config()
        a = run_pipeline(cfg, 7, small_task, 0, SelectionConfig(ratio=0.2))
        b = run_pipeline(cfg, 8, small_task, 0, SelectionConfig(ratio=0.2))
        with pytest.raises(ConfigurationError):
            report_similarity([a, b])

    def test_empty_rejected(self):
        with pytest.raises(ConfigurationError):
            report_similarity([])


class TestCli:
    def test_run_emits_valid_record(self, capsys):
        code = main(["run", "--length", "32", "--chunk-size", "8", "--ratio", "0.25", "--task-seed", "1"])
        assert code == 0
        out = capsys.readouterr().out
        record = json.loads(out)
        assert record["metrics"]["selected_count"] == 8

    def test_simulate_sp_output_format(self, capsys):
        code = main(["simulate-sp", "--seqlen", "8192"])
        assert code == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 3
        for line in lines:
            name, fields = line.split(" ", 1)
            parts = dict(f.split("=") for f in fields.split(" "))
            assert set(parts) == {"ttft_s", "speedup", "comm_bytes"}

    def test_exit_code_2_on_bad_configuration(self, capsys):
        code = main(["run", "--length", "32", "--chunk-size", "8", "--ratio", "1.5"])
        assert code == 2
        assert "configuration error" in capsys.readouterr().err

    def test_exit_code_3_on_corrupt_cache(self, tmp_path, capsys):
        target = tmp_path / "broken.ifkc"
        target.write_bytes(b"IFKC" + b"\x00" * 32)
        code = main(["cache", "inspect", str(target)])
        assert code == 3

    def test_prefill_and_inspect_round_trip(self, tmp_path, capsys):
        out = tmp_path / "caches"
        code = main(
            ["prefill", "--length", "32", "--chunk-size", "16", "--out", str(out), "--workers", "2"]
        )
        assert code == 0
        files = sorted(out.glob("*.ifkc"))
        assert len(files) == 2
        code = main(["cache", "inspect", str(files[0])])
        assert code == 0
        assert "PREFILLED_LOCAL" in capsys.readouterr().out

    def test_replay_verifies(self, tmp_path, capsys):
        records = tmp_path / "r.jsonl"
        code = main(
            ["run", "--length", "32", "--chunk-size", "8", "--ratio", "0.25",
             "--records", str(records)]
        )
        assert code == 0
        code = main(["run", "--replay", str(records)])
        assert code == 0
        assert "ok" in capsys.readouterr().out

    def test_config_file_merging(self, tmp_path, capsys):
        cfg_file = tmp_path / "cfg.json"
        cfg_file.write_text(json.dumps({"task": {"total_length": 32, "fixed_size": 8}}))
        code = main(["needle", "--config", str(cfg_file)])
        assert code == 0
        assert "[8, 8, 8, 8]" in capsys.readouterr().out

    def test_missing_config_file(self, capsys):
        code = main(["needle", "--config", "/nonexistent/cfg.json"])
        assert code == 2
