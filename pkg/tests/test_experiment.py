import json

import numpy as np
import pytest

from fewshot_synergy.experiment import (
    CellResult,
    ExperimentPlan,
    ResultTable,
    emit_report,
    run_experiment,
)
from fewshot_synergy.ingest import label_examples, parse_records, summarize
from fewshot_synergy.stub_server import StubServerThread
from fewshot_synergy.synthetic import pair_rule_records, write_records_csv


@pytest.fixture(scope="module")
def screen_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "screen.csv"
    write_records_csv(pair_rule_records(seed=0, rows_per_common=150, rows_rare=80), path)
    return path


def fast_plan(screen_csv, out_dir, **overrides):
    config = dict(
        data_path=str(screen_csv), out_dir=str(out_dir), rare_threshold=100,
        ladder=(2, 4), methods=("gbdt",), seeds=(0,),
        lm={"epochs": 1}, lm_finetune={"epochs": 2}, tabattn={"epochs": 3})
    config.update(overrides)
    return ExperimentPlan(config.pop("data_path"), config.pop("out_dir"), **config)


class TestPlanConfig:
    def test_json_round_trip(self, screen_csv, tmp_path):
        plan = fast_plan(screen_csv, tmp_path / "run", methods=("gbdt", "lm_scratch"))
        restored = ExperimentPlan.from_json(plan.to_json())
        assert restored == plan

    def test_unknown_method_rejected(self, screen_csv, tmp_path):
        with pytest.raises(ValueError):
            fast_plan(screen_csv, tmp_path, methods=("nonsense",))

    def test_remote_requires_endpoint(self, screen_csv, tmp_path):
        with pytest.raises(ValueError):
            fast_plan(screen_csv, tmp_path, methods=("remote",))

    def test_example_config_loads(self):
        plan = ExperimentPlan.load("configs/plan_example.json")
        assert plan.methods == ("gbdt", "tabattn", "lm_scratch", "lm_pretrained")


class TestRunAll:
    def test_single_method_single_k_cell_count(self, screen_csv, tmp_path):
        plan = fast_plan(screen_csv, tmp_path / "run", ladder=(2,))
        table, runner = run_experiment(plan)
        # one tissue x one method x (k=0 implicit + k=2) x one seed
        assert len(table.cells) == 2
        assert runner.stats["cells_run"] == 2

    def test_skip_accounting(self, screen_csv, tmp_path):
        plan = fast_plan(screen_csv, tmp_path / "run", ladder=(2, 4, 8, 16, 32, 64, 128))
        table, runner = run_experiment(plan)
        planned = len(runner.cell_keys())
        assert planned == len(table.cells)
        stats = runner.stats
        assert planned == stats["cells_run"] + stats["cells_skipped"] + stats["cells_failed"]
        # the rare tissue has 64 train rows: 64 and 128 are infeasible
        skipped = [c for c in table.cells.values() if c.skipped]
        assert {c.k for c in skipped} == {128}

    def test_test_set_constant_across_methods_and_k(self, screen_csv, tmp_path):
        plan = fast_plan(screen_csv, tmp_path / "run", methods=("gbdt", "lm_scratch"))
        table, runner = run_experiment(plan)
        evaluation = runner.evaluations[("tendon", 0)]
        test_ids = {ex.record.row_id for ex in evaluation.plan.test_set}
        for cell in table.cells.values():
            if not cell.skipped:
                assert cell.n_test == len(test_ids)

    def test_resume_runs_nothing(self, screen_csv, tmp_path):
        plan = fast_plan(screen_csv, tmp_path / "run")
        run_experiment(plan)
        table, runner = run_experiment(plan, resume=True)
        assert runner.stats["cells_run"] == 0
        assert runner.stats["models_trained"] == 0
        assert runner.stats["cells_resumed"] == len(runner.cell_keys())
        assert len(table.cells) == len(runner.cell_keys())

    def test_partial_resume_loads_pretrained_checkpoint(self, screen_csv, tmp_path):
        plan = fast_plan(screen_csv, tmp_path / "run", methods=("lm_pretrained",), ladder=(2,))
        _, runner = run_experiment(plan)
        assert runner.stats["models_trained"] >= 1
        manifest_lines = runner.manifest_path.read_text().splitlines()
        kept = [line for line in manifest_lines
                if not (json.loads(line).get("type") == "cell" and json.loads(line)["k"] == 0)]
        runner.manifest_path.write_text("\n".join(kept) + "\n")
        _, resumed = run_experiment(plan, resume=True)
        # the k=0 cell reruns against the checkpoint; nothing retrains
        assert resumed.stats["cells_run"] == 1
        assert resumed.stats["models_trained"] == 0

    def test_resume_after_interrupt_fills_only_missing(self, screen_csv, tmp_path):
        plan = fast_plan(screen_csv, tmp_path / "run")
        _, runner = run_experiment(plan)
        manifest_lines = runner.manifest_path.read_text().splitlines()
        # drop the last cell record to simulate an interrupted run
        dropped = next(i for i in range(len(manifest_lines) - 1, -1, -1)
                       if json.loads(manifest_lines[i]).get("type") == "cell")
        runner.manifest_path.write_text("\n".join(
            line for i, line in enumerate(manifest_lines) if i != dropped) + "\n")
        table, resumed = run_experiment(plan, resume=True)
        assert resumed.stats["cells_run"] + resumed.stats["cells_skipped"] == 1
        assert len(table.cells) == len(resumed.cell_keys())

    def test_replay_determinism(self, screen_csv, tmp_path):
        plan_a = fast_plan(screen_csv, tmp_path / "a", methods=("gbdt", "lm_scratch"))
        plan_b = fast_plan(screen_csv, tmp_path / "b", methods=("gbdt", "lm_scratch"))
        table_a, _ = run_experiment(plan_a)
        table_b, _ = run_experiment(plan_b)
        for key, cell in table_a.cells.items():
            other = table_b.cells[key]
            assert cell.auprc == other.auprc and cell.auroc == other.auroc

    def test_zero_shot_only_fallback(self, tmp_path):
        # one positive row in the rare tissue: stratified split infeasible
        records = pair_rule_records(seed=1, rows_per_common=150, rows_rare=40)
        rare = [r for r in records if r.tissue == "tendon"]
        keep_positive = [r for r in rare if r.loewe > 5][:1]
        negatives = [r for r in rare if r.loewe <= 5]
        pruned = [r for r in records if r.tissue != "tendon"] + keep_positive + negatives
        path = tmp_path / "screen.csv"
        write_records_csv(pruned, path)
        plan = fast_plan(path, tmp_path / "run", ladder=(2, 4))
        table, runner = run_experiment(plan)
        evaluation = runner.evaluations[("tendon", 0)]
        assert evaluation.zero_shot_only
        assert len(evaluation.plan.test_set) == len(keep_positive) + len(negatives)
        zero_cell = table.cells[("tendon", "gbdt", 0, 0)]
        assert not zero_cell.skipped and zero_cell.auprc is not None
        for k in (2, 4):
            cell = table.cells[("tendon", "gbdt", k, 0)]
            assert cell.skipped and "insufficient positives" in cell.skip_reason

    def test_shot_sharing_and_resampling(self, screen_csv, tmp_path):
        shared = fast_plan(screen_csv, tmp_path / "shared", methods=("gbdt", "lm_scratch"))
        _, runner = run_experiment(shared)
        assert (runner.shots_for("tendon", 0, "gbdt", 4)
                == runner.shots_for("tendon", 0, "lm_scratch", 4))

        resampled = fast_plan(screen_csv, tmp_path / "resampled",
                              methods=("gbdt", "lm_scratch"), resample_shots_per_method=True)
        _, runner = run_experiment(resampled)
        gbdt_ids = {ex.record.row_id for ex in runner.shots_for("tendon", 0, "gbdt", 4)}
        lm_ids = {ex.record.row_id for ex in runner.shots_for("tendon", 0, "lm_scratch", 4)}
        assert gbdt_ids != lm_ids
        test_ids = {ex.record.row_id for ex in runner.evaluations[("tendon", 0)].plan.test_set}
        assert gbdt_ids.isdisjoint(test_ids) and lm_ids.isdisjoint(test_ids)

    def test_worker_pool_matches_sequential(self, screen_csv, tmp_path):
        sequential = fast_plan(screen_csv, tmp_path / "seq")
        pooled = fast_plan(screen_csv, tmp_path / "pool", jobs=3)
        table_seq, _ = run_experiment(sequential)
        table_pool, _ = run_experiment(pooled)
        assert table_seq.cells.keys() == table_pool.cells.keys()
        for key, cell in table_seq.cells.items():
            assert table_pool.cells[key].auprc == cell.auprc

    def test_single_label_test_set_skips_with_reason(self, tmp_path):
        records = [r for r in pair_rule_records(seed=1, rows_per_common=150, rows_rare=40)
                   if r.tissue != "tendon" or r.loewe <= 5]  # all-negative rare tissue
        path = tmp_path / "screen.csv"
        write_records_csv(records, path)
        plan = fast_plan(path, tmp_path / "run", ladder=(2,))
        table, _ = run_experiment(plan)
        zero_cell = table.cells[("tendon", "gbdt", 0, 0)]
        assert zero_cell.skipped and "metric undefined" in zero_cell.skip_reason

    def test_manifest_is_replayable_journal(self, screen_csv, tmp_path):
        plan = fast_plan(screen_csv, tmp_path / "run")
        table, runner = run_experiment(plan)
        lines = [json.loads(line) for line in runner.manifest_path.read_text().splitlines()]
        types = {line["type"] for line in lines}
        assert {"run_header", "tokenizer", "plan", "cell"} <= types
        rebuilt = ResultTable.from_manifest(runner.manifest_path)
        assert rebuilt.cells.keys() == table.cells.keys()

    def test_remote_method_through_stub(self, screen_csv, tmp_path):
        with StubServerThread() as stub:
            plan = fast_plan(screen_csv, tmp_path / "run", methods=("remote",),
                             ladder=(2,), remote_endpoint=stub.endpoint)
            table, runner = run_experiment(plan)
        cells = {k: c for k, c in table.cells.items() if not c.skipped}
        assert len(cells) == 2
        for cell in cells.values():
            assert cell.auprc is not None and 0.0 <= cell.auprc <= 1.0
            assert cell.error == ""
        assert ("zero-shot-base-model" in table.cells[("tendon", "remote", 0, 0)].flags)


class TestReport:
    def build_table(self):
        table = ResultTable()
        rng = np.random.default_rng(0)
        for method in ("gbdt", "lm_scratch"):
            for k in (0, 2, 4):
                if method == "lm_scratch" and k == 4:
                    table.add(CellResult("tendon", method, k, 0, skipped=True,
                                         skip_reason="train pool too small for k=4"))
                    continue
                flags = ("zero-shot-random-head-uninformative",) if (method, k) == ("lm_scratch", 0) else ()
                table.add(CellResult("tendon", method, k, 0,
                                     auprc=round(float(rng.uniform(0.2, 0.9)), 6),
                                     auroc=round(float(rng.uniform(0.4, 0.99)), 6),
                                     n_test=16, flags=flags))
        return table

    def test_markdown_structure(self, screen_csv):
        summary = summarize(label_examples(parse_records(screen_csv).records))
        text = emit_report(self.build_table(), summary, ladder=(2, 4), fmt="markdown")
        assert "## tendon (n0=61, n1=19)" in text
        assert "### AUPRC" in text and "### AUROC" in text
        assert "| method | k=0 | k=2 | k=4 |" in text
        assert "Cell values are means over seeds" in text
        assert "- flags (lm_scratch, k=0): zero-shot-random-head-uninformative" in text
        skipped_row = [line for line in text.splitlines() if line.startswith("| lm_scratch")][0]
        assert skipped_row.endswith("| - |")

    def test_bold_max_flag(self):
        text = emit_report(self.build_table(), None, ladder=(2, 4), fmt="markdown", bold_max=True)
        assert "**" in text

    def test_csv_round_trip(self):
        table = self.build_table()
        text = emit_report(table, None, ladder=(2, 4), fmt="csv")
        restored = ResultTable.from_csv_text(text)
        assert restored.cells == table.cells
        assert emit_report(restored, None, ladder=(2, 4), fmt="csv") == text

    def test_empty_table_rejected(self):
        with pytest.raises(ValueError):
            emit_report(ResultTable(), None)

    def test_unknown_format_rejected(self):
        with pytest.raises(ValueError):
            emit_report(self.build_table(), None, fmt="pdf")
