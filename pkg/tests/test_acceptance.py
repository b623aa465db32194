"""Acceptance suite: one test per criterion, each printing a pass line.

Everything here runs offline. Criteria cover metric-oracle equivalence,
gradient correctness, attention causality and padding invariance, the
k-shot protocol, partition fidelity on the tissue-count mirror, the
common-to-rare transfer mechanism, baseline sanity, report geometry, and
the stub-backed remote path.
"""

import json
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

from fewshot_synergy import autodiff as ad
from fewshot_synergy.baselines import GradientBoostedTreesClassifier, TabularAttentionClassifier
from fewshot_synergy.errors import (
    LadderTruncatedWarning,
    RateLimitExceededError,
    RemoteTimeoutError,
    SplitInfeasibleError,
)
from fewshot_synergy.experiment import ExperimentPlan, run_experiment
from fewshot_synergy.ingest import label_examples, parse_records, partition_by_tissue, summarize
from fewshot_synergy.lm import TransformerSequenceClassifier, pretrain_on_common
from fewshot_synergy.metrics import auprc, auroc
from fewshot_synergy.remote import FineTuneClient, FineTuneRequest
from fewshot_synergy.sampler import SplitSpec, build_kshot_plan, plan_manifest_text, stratified_split
from fewshot_synergy.stub_server import StubServerThread, StubState
from fewshot_synergy.synthetic import (
    RARE_TISSUE_COUNTS,
    pair_rule_examples,
    pair_rule_records,
    tissue_mirror_records,
    write_records_csv,
)
from fewshot_synergy.textualize import (
    build_vocabulary,
    longest_prompt_length,
    serialize_examples,
    stack_examples,
    tokenize_examples,
)

from conftest import auprc_curve_enumeration, auroc_pair_counting, central_difference, random_scored_set
from mirror_fixture import build_mirror_table, prepare_mirror_runner
from test_sampler import check_plan_invariants

GOLDEN_REPORT = Path(__file__).parent / "golden" / "mirror_report.md"


def report_pass(number: int, text: str) -> None:
    print(f"criterion {number}: PASS - {text}")


def test_criterion_01_metric_oracle_equivalence():
    rng = np.random.default_rng(2024)
    started = time.monotonic()
    worst_auroc = worst_auprc = 0.0
    for _ in range(500):
        scores, labels = random_scored_set(rng, n_max=50, tie_share=0.6)
        worst_auroc = max(worst_auroc, abs(auroc(scores, labels) - auroc_pair_counting(scores, labels)))
        worst_auprc = max(worst_auprc, abs(auprc(scores, labels) - auprc_curve_enumeration(scores, labels)))
    elapsed = time.monotonic() - started
    assert worst_auroc <= 1e-12, worst_auroc
    assert worst_auprc <= 1e-12, worst_auprc
    assert elapsed < 5.0, f"metric oracle sweep took {elapsed:.1f}s"
    report_pass(1, f"500 sets, worst deviations {worst_auroc:.2e} / {worst_auprc:.2e} in {elapsed:.1f}s")


def test_criterion_02_trivial_metric_anchors():
    assert auroc([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    assert auprc([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    assert auroc([0.4] * 12, [1, 0] * 6) == 0.5
    for n_pos, n_neg in [(1, 9), (3, 7), (5, 5)]:
        labels = [1] * n_pos + [0] * n_neg
        assert auprc([0.7] * (n_pos + n_neg), labels) == n_pos / (n_pos + n_neg)
    report_pass(2, "constant and perfect-ranking anchors exact")


def test_criterion_03_gradient_correctness():
    started = time.monotonic()
    worst = 0.0
    sampled = 0
    for seed in (0, 1, 2):
        rng = np.random.default_rng(seed)
        clf = TransformerSequenceClassifier(
            n_layers=2, n_heads=2, d_model=16, d_ff=32, context_length=12,
            vocab_size=24, seed=seed).initialize()
        ids = rng.integers(1, 24, size=(4, 12))
        labels = rng.integers(0, 2, size=4)
        loss = ad.cross_entropy(clf._forward(ids), labels)
        ad.backward(loss)

        def forward_value():
            with ad.no_grad():
                logits = clf._forward(ids).data
            shifted = logits - logits.max(axis=1, keepdims=True)
            log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
            return float(-log_probs[np.arange(4), labels].mean())

        params = clf.parameter_list()
        for _ in range(70):
            tensor = params[int(rng.integers(len(params)))]
            index = tuple(int(rng.integers(s)) for s in tensor.data.shape)
            numeric = central_difference(forward_value, tensor.data, index, h=1e-5)
            analytic = 0.0 if tensor.grad is None else tensor.grad[index]
            worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6))
            sampled += 1
    elapsed = time.monotonic() - started
    assert sampled >= 200
    assert worst < 1e-4, f"worst relative gradient error {worst}"
    assert elapsed < 30.0, f"gradient check took {elapsed:.1f}s"
    report_pass(3, f"{sampled} parameters, worst relative error {worst:.2e} in {elapsed:.1f}s")


def test_criterion_04_causality_and_padding():
    clf = TransformerSequenceClassifier(n_layers=3, n_heads=2, d_model=16, d_ff=32,
                                        context_length=24, vocab_size=32, seed=4).initialize()
    rng = np.random.default_rng(4)
    ids = rng.integers(1, 32, size=(2, 20))
    changed = ids.copy()
    changed[:, 12] = (changed[:, 12] % 31) + 1
    for before, after in zip(clf.forward_hidden_states(ids), clf.forward_hidden_states(changed)):
        assert np.array_equal(before[:, :12, :], after[:, :12, :])

    prompt = rng.integers(1, 32, size=10)
    base = clf.forward_logits(prompt[None, :])
    worst = 0.0
    for pad in range(0, 9):
        padded = np.concatenate([np.zeros(pad, dtype=np.int64), prompt])
        worst = max(worst, float(np.abs(clf.forward_logits(padded[None, :]) - base).max()))
    assert worst < 1e-9, worst
    report_pass(4, f"future-token states bit-identical; padding drift {worst:.1e} over pads 0..8")


def test_criterion_05_kshot_protocol():
    from test_sampler import make_pool

    started = time.monotonic()
    rng = np.random.default_rng(99)
    checked = 0
    while checked < 1000:
        n_pos = int(rng.integers(2, 50))
        n_neg = int(rng.integers(2, 160))
        seed = int(rng.integers(0, 2 ** 31))
        pool = make_pool(n_neg, n_pos)
        try:
            train, test = stratified_split(pool, SplitSpec(0.2, seed=seed))
        except SplitInfeasibleError:
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", LadderTruncatedWarning)
            plan = build_kshot_plan(train, test, (2, 4, 8, 16, 32, 64, 128), seed=seed)
            replay = build_kshot_plan(train, test, (2, 4, 8, 16, 32, 64, 128), seed=seed)
        check_plan_invariants(plan)
        assert plan_manifest_text(plan) == plan_manifest_text(replay)
        checked += 1
    elapsed = time.monotonic() - started
    assert elapsed < 10.0, f"protocol sweep took {elapsed:.1f}s"
    report_pass(5, f"1000 random datasets: nesting, sizes, label floors, disjointness, replay ({elapsed:.1f}s)")


def test_criterion_06_label_partition_fidelity(tmp_path):
    examples = label_examples(parse_records(_mirror_csv(tmp_path)).records)
    summary = summarize(examples)
    for tissue, (n0, n1) in RARE_TISSUE_COUNTS.items():
        counts = summary.per_tissue[tissue]
        assert (counts.n0, counts.n1) == (n0, n1), tissue
    partition = partition_by_tissue(examples, rare_threshold=4000)
    assert set(partition.rare) == set(RARE_TISSUE_COUNTS)
    assert len(partition.common) >= 4000

    runner = prepare_mirror_runner(tmp_path)
    evaluation = runner.evaluations[("pancreas", 0)]
    assert evaluation.zero_shot_only
    for k in (2, 4, 8, 16, 32, 64, 128):
        assert "insufficient positives" in runner.skip_reason("pancreas", k, 0)
    assert runner.skip_reason("pancreas", 0, 0) is None
    report_pass(6, "seven mirrored tissue counts exact; all rare; pancreas restricted to k=0")


def _mirror_csv(tmp_path):
    path = tmp_path / "mirror.csv"
    write_records_csv(tissue_mirror_records(seed=0), path)
    return path


@pytest.fixture(scope="module")
def transfer_setup():
    """Common-to-rare transfer task with a pair rule shared across tissues."""
    examples = pair_rule_examples(seed=0)
    partition = partition_by_tissue(examples, rare_threshold=450)
    train, test = stratified_split(partition.rare["tendon"], SplitSpec(0.2, seed=0))
    plan = build_kshot_plan(train, test, (2, 4, 8, 16, 32), seed=0, tissue="tendon")
    serialized_common = serialize_examples(partition.common)
    serialized_train = serialize_examples(train)
    serialized_test = serialize_examples(test)
    tokenizer = build_vocabulary(
        [s.prompt for s in serialized_common + serialized_train], max_size=512)
    length = longest_prompt_length(
        [s.prompt for s in serialized_common + serialized_train + serialized_test], tokenizer)
    X_common, y_common = stack_examples(tokenize_examples(serialized_common, tokenizer, length))
    X_test, y_test = stack_examples(tokenize_examples(serialized_test, tokenizer, length))
    shots = plan.shots[32]
    X_shots, y_shots = stack_examples(
        tokenize_examples(serialize_examples(shots), tokenizer, length))
    config = dict(n_layers=2, n_heads=2, d_model=32, d_ff=64, context_length=length,
                  vocab_size=tokenizer.vocab_size, epochs=4, learning_rate=3e-3,
                  weight_decay=0.01, batch_size=32)
    return config, (X_common, y_common), (X_shots, y_shots), (X_test, y_test)


def test_criterion_07_learnability(transfer_setup):
    started = time.monotonic()
    config, (X_common, y_common), (X_shots, y_shots), (X_test, y_test) = transfer_setup

    pretrained = TransformerSequenceClassifier(**config, seed=0)
    pretrain_on_common(pretrained, X_common, y_common, seed=0)
    pretrained_auroc = auroc(pretrained.predict_proba(X_test)[:, 1], y_test)
    assert pretrained_auroc >= 0.9, pretrained_auroc

    deltas = []
    scratch_zero_shots = []
    for seed in (0, 1, 2):
        scratch = TransformerSequenceClassifier(**config, seed=seed).initialize()
        zero_shot = auroc(scratch.predict_proba(X_test)[:, 1], y_test)
        scratch_zero_shots.append(zero_shot)
        assert zero_shot <= 0.6, zero_shot
        scratch.finetune(X_shots, y_shots, epochs=80, learning_rate=3e-3, seed=seed)
        deltas.append(auroc(scratch.predict_proba(X_test)[:, 1], y_test) - zero_shot)
    mean_delta = float(np.mean(deltas))
    assert mean_delta >= 0.15, deltas
    elapsed = time.monotonic() - started
    assert elapsed < 300.0, f"learnability check took {elapsed:.1f}s"
    report_pass(7, f"pretrained zero-shot {pretrained_auroc:.3f} vs scratch "
                   f"{max(scratch_zero_shots):.3f}; k=32 mean gain {mean_delta:+.3f} ({elapsed:.0f}s)")


def test_criterion_08_baseline_sanity():
    rng = np.random.default_rng(8)
    f1 = rng.integers(0, 2, size=100)
    f2 = rng.integers(0, 2, size=100)
    y = (f1 ^ f2).astype(np.int64)
    X = np.column_stack([f1, f2]).astype(np.float64)
    gbdt = GradientBoostedTreesClassifier(n_trees=50, max_depth=2,
                                          categorical_features=(0, 1)).fit(X, y)
    assert (gbdt.predict(X) == y).mean() == 1.0

    d1 = rng.integers(1, 9, size=300)
    d2 = rng.integers(1, 9, size=300)
    rows = np.column_stack([d1, d2, rng.integers(1, 5, 300),
                            rng.uniform(0, 1, 300), rng.uniform(0, 30, 300)]).astype(float)
    labels = ((d1 <= 4) & (d2 <= 4)).astype(np.int64)
    for seed in (0, 1, 2):
        clf = TabularAttentionClassifier(epochs=6, learning_rate=1e-3, seed=seed,
                                         drug_vocab_size=9, cell_vocab_size=5).fit(rows, labels)
        assert clf.validation_losses_[clf.best_epoch_] == min(clf.validation_losses_)
    report_pass(8, "indicator-XOR training accuracy 1.0; best-validation selection holds")


def test_criterion_09_report_geometry(tmp_path):
    from fewshot_synergy.experiment import emit_report
    from fewshot_synergy.sampler import DEFAULT_LADDER

    runner = prepare_mirror_runner(tmp_path)
    table = build_mirror_table(runner)
    rendered = emit_report(table, runner.summary, DEFAULT_LADDER, fmt="markdown")
    assert rendered == GOLDEN_REPORT.read_text(encoding="utf-8")

    lines = rendered.splitlines()
    assert sum(1 for line in lines if line.startswith("## ")) == 7
    pancreas_rows = _method_rows(lines, "## pancreas (n0=38, n1=1)")
    for row in pancreas_rows:
        cells = [c.strip() for c in row.split("|")[2:-1]]
        assert cells[1:] == ["-"] * 7 and cells[0] != "-"
    endometrium_rows = _method_rows(lines, "## endometrium (n0=36, n1=32)")
    for row in endometrium_rows:
        cells = [c.strip() for c in row.split("|")[2:-1]]
        assert cells[-2:] == ["-", "-"] and "-" not in cells[:6]
    report_pass(9, "golden file matches; pancreas k=0 only; endometrium through k=32")


def _method_rows(lines, header):
    start = lines.index(header)
    rows = []
    for line in lines[start:]:
        if line.startswith("## ") and line != header:
            break
        if line.startswith("| ") and not line.startswith("| method") and not line.startswith("| ---"):
            rows.append(line)
    return rows


def test_criterion_10_remote_path(tmp_path, monkeypatch):
    sentinel = "sk-acceptance-credential-000"
    monkeypatch.setenv("SYNERGY_API_KEY", sentinel)

    csv_path = tmp_path / "screen.csv"
    write_records_csv(pair_rule_records(seed=0, rows_per_common=80, rows_rare=40), csv_path)
    with StubServerThread(StubState(seed=5, require_auth=True)) as stub:
        plan = ExperimentPlan(
            data_path=str(csv_path), out_dir=str(tmp_path / "run"),
            rare_threshold=60, ladder=(2, 4), methods=("remote",), seeds=(0,),
            remote_endpoint=stub.endpoint)
        table, runner = run_experiment(plan)
    completed = [c for c in table.cells.values() if not c.skipped]
    assert len(completed) == 3  # k = 0, 2, 4
    for cell in completed:
        assert cell.error == ""
        assert cell.auprc is not None and 0.0 <= cell.auprc <= 1.0
        assert cell.auroc is not None and 0.0 <= cell.auroc <= 1.0

    # retry and timeout behaviors
    examples = serialize_examples(pair_rule_examples(seed=2, rows_per_common=8, rows_rare=0))
    with StubServerThread(StubState(rate_limit_first=2)) as stub:
        client = FineTuneClient(stub.endpoint, poll_interval=0.01, backoff=0.005)
        job = client.submit_and_await(FineTuneRequest(examples))
        assert job.state == "succeeded"
    with StubServerThread(StubState(rate_limit_first=50)) as stub:
        client = FineTuneClient(stub.endpoint, poll_interval=0.01, backoff=0.001, max_retries=2)
        with pytest.raises(RateLimitExceededError):
            client.submit_and_await(FineTuneRequest(examples))
    with StubServerThread() as stub:
        client = FineTuneClient(stub.endpoint, poll_interval=0.01)
        with pytest.raises(RemoteTimeoutError):
            client.submit_and_await(FineTuneRequest(examples), timeout=0)

    # credential scrubbing across every artifact the run produced
    for artifact in sorted((tmp_path / "run").rglob("*")):
        if artifact.is_file():
            assert sentinel not in artifact.read_text(errors="replace"), artifact
    assert sentinel not in json.dumps(runner.stats)
    report_pass(10, "stub-backed fine-tune loop filled a result row; retry/timeout/scrubbing verified")
