"""Orchestrate the full study: ingest, plan, pretrain, run cells, report.

A run directory holds everything needed to replay or resume: the effective
plan, the tokenizer, pretrained checkpoints with checksums, per-tissue shot
manifests, and an append-only line-delimited manifest with one record per
(tissue, method, k, seed) cell. ``run_all`` never aborts on a single cell;
failures are recorded with their reason and the run continues.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import threading
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import (
    CategoryVocabularies,
    GradientBoostedTreesClassifier,
    TabularAttentionClassifier,
    encode_rows,
)
from .errors import LadderTruncatedWarning, MetricUndefinedError, SplitInfeasibleError
from .ingest import (
    ColumnMapping,
    DatasetSummary,
    LabeledExample,
    label_examples,
    parse_records,
    partition_by_tissue,
    summarize,
    write_rejections,
    write_summary,
)
from .lm import TransformerSequenceClassifier, pretrain_on_common
from .metrics import auprc, auroc
from .remote import FineTuneClient, FineTuneRequest
from .sampler import (
    DEFAULT_LADDER,
    GENERATOR_NAME,
    KShotPlan,
    SplitSpec,
    build_kshot_plan,
    stratified_split,
    write_plan_manifest,
)
from .textualize import (
    PromptTemplate,
    build_vocabulary,
    longest_prompt_length,
    serialize_examples,
    stack_examples,
    tokenize_examples,
)

METHODS = ("gbdt", "tabattn", "lm_scratch", "lm_pretrained", "remote")

# Desk-scale training profiles; architecture stays at the library defaults
# unless the plan overrides it.
DESK_GBDT = {"n_trees": 200, "max_depth": 6}
DESK_LM = {"n_layers": 2, "n_heads": 2, "d_model": 32, "d_ff": 64,
           "epochs": 4, "learning_rate": 3e-3, "weight_decay": 0.01, "batch_size": 32}
DESK_LM_FINETUNE = {"epochs": 80, "learning_rate": 3e-3}
DESK_TABATTN = {"embed_dim": 32, "n_layers": 2, "n_heads": 2, "d_ff": 64,
                "epochs": 30, "learning_rate": 1e-3}
ZERO_SHOT_RANDOM_HEAD_FLAG = "zero-shot-random-head-uninformative"


@dataclass
class ExperimentPlan:
    """Everything a run needs; serializable to the documented json format."""

    data_path: str
    out_dir: str
    mapping: ColumnMapping = field(default_factory=ColumnMapping)
    delimiter: str = ","
    label_threshold: float = 5.0
    rare_threshold: int = 4000
    test_fraction: float = 0.2
    ladder: tuple[int, ...] = DEFAULT_LADDER
    methods: tuple[str, ...] = ("gbdt", "tabattn", "lm_scratch", "lm_pretrained")
    seeds: tuple[int, ...] = (0, 1, 2)
    template: PromptTemplate = field(default_factory=PromptTemplate)
    precision: int = 3
    vocab_size: int = 4096
    context_length: int | None = None  # None: sized from the tokenized corpus
    lm: dict = field(default_factory=dict)
    lm_finetune: dict = field(default_factory=dict)
    tabattn: dict = field(default_factory=dict)
    tabattn_finetune_epochs: int = 1
    gbdt: dict = field(default_factory=dict)
    gbdt_frozen: bool = False
    resample_shots_per_method: bool = False
    remote_endpoint: str = ""
    remote_base_model: str = "base-small"
    jobs: int = 1

    def __post_init__(self):
        self.ladder = tuple(int(k) for k in self.ladder)
        self.methods = tuple(self.methods)
        self.seeds = tuple(int(s) for s in self.seeds)
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ValueError(f"unknown methods {unknown}; choose from {METHODS}")
        if not self.methods or not self.seeds:
            raise ValueError("plan needs at least one method and one seed")
        if "remote" in self.methods and not self.remote_endpoint:
            raise ValueError("method 'remote' requires remote_endpoint")

    def lm_config(self) -> dict:
        return {**DESK_LM, **self.lm}

    def lm_finetune_config(self) -> dict:
        return {**DESK_LM_FINETUNE, **self.lm_finetune}

    def tabattn_config(self) -> dict:
        return {**DESK_TABATTN, **self.tabattn}

    def gbdt_config(self) -> dict:
        return {**DESK_GBDT, **self.gbdt}

    def to_json(self) -> str:
        payload = asdict(self)
        payload["mapping"] = self.mapping.columns()
        payload["template"] = {"instruction": self.template.instruction,
                               "answer_words": list(self.template.answer_words)}
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentPlan":
        payload = json.loads(text)
        if "mapping" in payload:
            payload["mapping"] = ColumnMapping(**payload["mapping"])
        if "template" in payload:
            t = payload["template"]
            payload["template"] = PromptTemplate(t["instruction"], tuple(t["answer_words"]))
        return cls(**payload)

    @classmethod
    def load(cls, path) -> "ExperimentPlan":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())


@dataclass
class CellResult:
    tissue: str
    method: str
    k: int
    seed: int
    auprc: float | None = None
    auroc: float | None = None
    n_test: int = 0
    runtime: float = 0.0
    skipped: bool = False
    skip_reason: str = ""
    flags: tuple[str, ...] = ()
    error: str = ""

    @property
    def key(self) -> tuple:
        return (self.tissue, self.method, self.k, self.seed)

    def to_record(self) -> dict:
        payload = asdict(self)
        payload["flags"] = list(self.flags)
        payload["type"] = "cell"
        return payload

    @classmethod
    def from_record(cls, record: dict) -> "CellResult":
        record = {k: v for k, v in record.items() if k != "type"}
        record["flags"] = tuple(record.get("flags", ()))
        return cls(**record)


class ResultTable:
    """(tissue, method, k, seed) -> CellResult, aggregated by mean over seeds."""

    def __init__(self):
        self.cells: dict[tuple, CellResult] = {}

    def add(self, cell: CellResult) -> None:
        self.cells[cell.key] = cell

    def __len__(self) -> int:
        return len(self.cells)

    def aggregate(self) -> dict[tuple, dict]:
        groups: dict[tuple, list[CellResult]] = {}
        for cell in self.cells.values():
            if cell.skipped or cell.error or cell.auprc is None:
                continue
            groups.setdefault((cell.tissue, cell.method, cell.k), []).append(cell)
        out = {}
        for key, cells in groups.items():
            out[key] = {
                "auprc": float(np.mean([c.auprc for c in cells])),
                "auroc": float(np.mean([c.auroc for c in cells])),
                "n_test": cells[0].n_test,
                "n_seeds": len(cells),
                "flags": sorted({f for c in cells for f in c.flags}),
            }
        return out

    def tissues(self) -> list[str]:
        return sorted({c.tissue for c in self.cells.values()})

    def methods(self) -> list[str]:
        present = {c.method for c in self.cells.values()}
        return [m for m in METHODS if m in present]

    @classmethod
    def from_manifest(cls, path) -> "ResultTable":
        table = cls()
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                record = json.loads(line)
                if record.get("type") == "cell":
                    table.add(CellResult.from_record(record))
        return table

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["tissue", "method", "k", "seed", "auprc", "auroc",
                         "n_test", "runtime", "skipped", "skip_reason", "flags", "error"])
        for key in sorted(self.cells):
            c = self.cells[key]
            writer.writerow([c.tissue, c.method, c.k, c.seed,
                             "" if c.auprc is None else repr(c.auprc),
                             "" if c.auroc is None else repr(c.auroc),
                             c.n_test, repr(c.runtime), int(c.skipped), c.skip_reason,
                             "|".join(c.flags), c.error])
        return buf.getvalue()

    @classmethod
    def from_csv_text(cls, text: str) -> "ResultTable":
        table = cls()
        for row in csv.DictReader(io.StringIO(text)):
            table.add(CellResult(
                tissue=row["tissue"], method=row["method"], k=int(row["k"]), seed=int(row["seed"]),
                auprc=float(row["auprc"]) if row["auprc"] else None,
                auroc=float(row["auroc"]) if row["auroc"] else None,
                n_test=int(row["n_test"]), runtime=float(row["runtime"]),
                skipped=bool(int(row["skipped"])), skip_reason=row["skip_reason"],
                flags=tuple(f for f in row["flags"].split("|") if f), error=row["error"]))
        return table


def emit_report(table: ResultTable, summary: DatasetSummary | None = None,
                ladder: tuple[int, ...] = DEFAULT_LADDER, fmt: str = "markdown",
                bold_max: bool = False) -> str:
    """Render the result table: one block per tissue, methods x shot counts.

    Markdown aggregates seeds (mean) with "-" for infeasible cells and one
    AUPRC and one AUROC section per tissue; csv emits the full per-seed table
    and round-trips through :meth:`ResultTable.from_csv_text`.
    """
    if not table.cells:
        raise ValueError("cannot report an empty result table")
    if fmt == "csv":
        return table.to_csv_text()
    if fmt != "markdown":
        raise ValueError(f"unknown report format {fmt!r}")
    aggregated = table.aggregate()
    ks = [0] + [k for k in ladder]
    lines = ["# k-shot results", "",
             "Cell values are means over seeds. AUPRC is non-interpolated average "
             "precision; AUROC is the midrank Mann-Whitney statistic; both treat "
             "tied scores explicitly.", ""]
    for tissue in table.tissues():
        header = tissue
        if summary is not None and tissue in summary.per_tissue:
            counts = summary.per_tissue[tissue]
            header += f" (n0={counts.n0}, n1={counts.n1})"
        lines.append(f"## {header}")
        for metric in ("auprc", "auroc"):
            lines.append("")
            lines.append(f"### {metric.upper()}")
            lines.append("| method | " + " | ".join(f"k={k}" for k in ks) + " |")
            lines.append("|" + " --- |" * (len(ks) + 1))
            column_max = {}
            if bold_max:
                for k in ks:
                    values = [aggregated[(tissue, m, k)][metric]
                              for m in table.methods() if (tissue, m, k) in aggregated]
                    column_max[k] = max(values) if values else None
            for method in table.methods():
                row = [method]
                for k in ks:
                    entry = aggregated.get((tissue, method, k))
                    if entry is None:
                        row.append("-")
                        continue
                    text = f"{entry[metric]:.3f}"
                    if bold_max and entry[metric] == column_max.get(k):
                        text = f"**{text}**"
                    row.append(text)
                lines.append("| " + " | ".join(row) + " |")
        flagged = [(method, k, entry["flags"]) for (t, method, k), entry in sorted(aggregated.items())
                   if t == tissue and entry["flags"]]
        if flagged:
            lines.append("")
            for method, k, flags in flagged:
                lines.append(f"- flags ({method}, k={k}): {', '.join(flags)}")
        lines.append("")
    return "\n".join(lines)


def emit_plot_data(table: ResultTable) -> dict[str, str]:
    """Per-tissue csv blocks of metric-vs-k (columns method,k,auprc,auroc),
    aggregated over seeds, for external plotting tools."""
    aggregated = table.aggregate()
    out: dict[str, str] = {}
    for tissue in table.tissues():
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["method", "k", "auprc", "auroc", "n_seeds"])
        for (cell_tissue, method, k), entry in sorted(aggregated.items()):
            if cell_tissue == tissue:
                writer.writerow([method, k, repr(entry["auprc"]), repr(entry["auroc"]),
                                 entry["n_seeds"]])
        out[tissue] = buf.getvalue()
    return out


@dataclass
class TissueEvaluation:
    """Per-(tissue, seed) planning outcome: either a full shot plan or a
    zero-shot-only fallback where the whole tissue becomes the test set."""

    plan: KShotPlan
    zero_shot_only: bool = False
    reason: str = ""


class ExperimentRunner:
    """Execute an :class:`ExperimentPlan` into a run directory."""

    def __init__(self, plan: ExperimentPlan, resume: bool = False):
        self.plan = plan
        self.out_dir = Path(plan.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.out_dir / "manifest.jsonl"
        self._manifest_lock = threading.Lock()
        self.resume = resume
        self.stats = {"cells_run": 0, "cells_skipped": 0, "cells_failed": 0,
                      "cells_resumed": 0, "models_trained": 0}
        self._existing_cells: set[tuple] = set()
        self._fresh_manifest = True
        if resume and self.manifest_path.exists():
            existing = ResultTable.from_manifest(self.manifest_path)
            self._existing_cells = set(existing.cells)
            self._fresh_manifest = False
        elif self.manifest_path.exists() and not resume:
            self.manifest_path.unlink()

    def _bump(self, name: str, amount: int = 1) -> None:
        with self._manifest_lock:
            self.stats[name] += amount

    # -- preparation --------------------------------------------------------

    def prepare(self) -> None:
        plan = self.plan
        parsed = parse_records(plan.data_path, plan.mapping, plan.delimiter)
        self.examples = label_examples(parsed.records, plan.label_threshold)
        self.partition = partition_by_tissue(self.examples, plan.rare_threshold)
        self.summary = summarize(self.examples)
        write_summary(self.summary, self.out_dir / "summary.csv")
        write_rejections(parsed.rejections, self.out_dir / "rejections.txt")
        (self.out_dir / "plan.json").write_text(self.plan.to_json(), encoding="utf-8")

        self.evaluations: dict[tuple[str, int], TissueEvaluation] = {}
        for tissue, tissue_examples in self.partition.rare.items():
            for seed in plan.seeds:
                self.evaluations[(tissue, seed)] = self._plan_tissue(tissue, tissue_examples, seed)

        self._build_tokenizer()
        if self._fresh_manifest:
            self._append_manifest({"type": "run_header", "version": __version__,
                                   "generator": GENERATOR_NAME, "plan": json.loads(plan.to_json())})
            self._append_manifest({"type": "tokenizer", "path": "tokenizer.tsv",
                                   "sha256": self.tokenizer_checksum,
                                   "vocab_size": self.tokenizer.vocab_size,
                                   "context_length": self.context_length})
        for (tissue, seed), evaluation in sorted(self.evaluations.items()):
            manifest_name = f"shots_{tissue.replace(' ', '_')}_seed{seed}.jsonl"
            write_plan_manifest(evaluation.plan, self.out_dir / manifest_name)
            if self._fresh_manifest:
                self._append_manifest({
                    "type": "plan", "tissue": tissue, "seed": seed,
                    "ladder": list(evaluation.plan.ladder),
                    "zero_shot_only": evaluation.zero_shot_only,
                    "reason": evaluation.reason,
                    "manifest": manifest_name,
                })
        self._pretrained_lm: dict[int, TransformerSequenceClassifier] = {}
        self._tabattn_base: dict[int, TabularAttentionClassifier] = {}
        self._frozen_gbdt_model: GradientBoostedTreesClassifier | None = None
        self._method_plans: dict[tuple, KShotPlan] = {}
        self._common_vocabs = CategoryVocabularies.from_examples(self.partition.common)

    def shots_for(self, tissue: str, seed: int, method: str, k: int) -> list[LabeledExample]:
        """The k-shot set a method trains on.

        By default one plan per (tissue, seed) is shared across methods so
        method effects are isolated; with ``resample_shots_per_method`` each
        method draws its own nested shot chain from the same train pool (the
        test set never changes).
        """
        evaluation = self.evaluations[(tissue, seed)]
        if not self.plan.resample_shots_per_method:
            return evaluation.plan.shots[k]
        key = (tissue, seed, method)
        if key not in self._method_plans:
            shot_seed = seed * len(METHODS) + METHODS.index(method) + 1
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", LadderTruncatedWarning)
                method_plan = build_kshot_plan(evaluation.plan.train_pool,
                                               evaluation.plan.test_set,
                                               self.plan.ladder, shot_seed, tissue)
            manifest_name = (f"shots_{tissue.replace(' ', '_')}_seed{seed}_{method}.jsonl")
            write_plan_manifest(method_plan, self.out_dir / manifest_name)
            self._method_plans[key] = method_plan
        return self._method_plans[key].shots[k]

    def _plan_tissue(self, tissue: str, tissue_examples: list[LabeledExample], seed: int) -> TissueEvaluation:
        try:
            train, test = stratified_split(tissue_examples, SplitSpec(self.plan.test_fraction, seed))
        except SplitInfeasibleError as err:
            # Too few of a label to hold any out: evaluate zero-shot on the
            # whole tissue instead of dropping it.
            plan = KShotPlan(tissue=tissue, train_pool=[], test_set=list(tissue_examples),
                             shots={}, seed=seed, ladder=(), requested_ladder=self.plan.ladder)
            return TissueEvaluation(plan, zero_shot_only=True,
                                    reason=f"insufficient positives for stratified split ({err})")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", LadderTruncatedWarning)
            plan = build_kshot_plan(train, test, self.plan.ladder, seed, tissue)
        return TissueEvaluation(plan)

    def _build_tokenizer(self) -> None:
        corpus_examples = list(self.partition.common)
        encode_pool = list(self.partition.common)
        for evaluation in self.evaluations.values():
            corpus_examples.extend(evaluation.plan.train_pool)
            encode_pool.extend(evaluation.plan.train_pool)
            encode_pool.extend(evaluation.plan.test_set)
        corpus_prompts = [s.prompt for s in serialize_examples(corpus_examples, self.plan.template, self.plan.precision)]
        self.tokenizer = build_vocabulary(corpus_prompts, self.plan.vocab_size)
        all_prompts = [s.prompt for s in serialize_examples(encode_pool, self.plan.template, self.plan.precision)]
        needed = longest_prompt_length(all_prompts, self.tokenizer)
        self.context_length = self.plan.context_length or needed
        if self.context_length < needed:
            raise ValueError(f"context_length {self.context_length} shorter than longest prompt ({needed})")
        tokenizer_path = self.out_dir / "tokenizer.tsv"
        self.tokenizer.save(tokenizer_path)
        self.tokenizer_checksum = hashlib.sha256(tokenizer_path.read_bytes()).hexdigest()

    def _tokenize(self, examples: list[LabeledExample]):
        serialized = serialize_examples(examples, self.plan.template, self.plan.precision)
        return stack_examples(tokenize_examples(serialized, self.tokenizer, self.context_length))

    # -- shared models -------------------------------------------------------

    def _lm_classifier(self, seed: int) -> TransformerSequenceClassifier:
        config = {**self.plan.lm_config(),
                  "context_length": self.context_length,
                  "vocab_size": self.tokenizer.vocab_size,
                  "pad_id": self.tokenizer.pad_id,
                  "seed": seed}
        return TransformerSequenceClassifier(**config)

    def pretrained_lm(self, seed: int) -> TransformerSequenceClassifier:
        if seed not in self._pretrained_lm:
            path = self.out_dir / f"lm_pretrained_seed{seed}.ckpt"
            if self.resume and path.exists():
                self._pretrained_lm[seed] = TransformerSequenceClassifier.load(path)
            else:
                clf = self._lm_classifier(seed)
                X, y = self._tokenize(self.partition.common)
                pretrain_on_common(clf, X, y, seed=seed)
                checksum = clf.save(path)
                self.stats["models_trained"] += 1
                self._append_manifest({"type": "checkpoint", "name": f"lm_pretrained_seed{seed}",
                                       "path": path.name, "sha256": checksum})
                self._pretrained_lm[seed] = clf
        return self._pretrained_lm[seed]

    def tabattn_base(self, seed: int) -> TabularAttentionClassifier:
        if seed not in self._tabattn_base:
            path = self.out_dir / f"tabattn_seed{seed}.ckpt"
            if self.resume and path.exists():
                self._tabattn_base[seed] = TabularAttentionClassifier.load(path)
                return self._tabattn_base[seed]
            vocabs = self._common_vocabs
            clf = TabularAttentionClassifier(**self.plan.tabattn_config(), seed=seed,
                                             drug_vocab_size=vocabs.n_drug_indices,
                                             cell_vocab_size=vocabs.n_cell_indices)
            X, y = encode_rows(self.partition.common, vocabs)
            clf.fit(X, y)
            self.stats["models_trained"] += 1
            checksum = clf.save(path)
            self._append_manifest({"type": "checkpoint", "name": f"tabattn_seed{seed}",
                                   "path": path.name, "sha256": checksum})
            self._tabattn_base[seed] = clf
        return self._tabattn_base[seed]

    # -- cells ---------------------------------------------------------------

    def cell_keys(self) -> list[tuple]:
        keys = []
        for tissue in sorted(self.partition.rare):
            for method in self.plan.methods:
                for k in (0,) + self.plan.ladder:
                    for seed in self.plan.seeds:
                        keys.append((tissue, method, k, seed))
        return keys

    def skip_reason(self, tissue: str, k: int, seed: int) -> str | None:
        """Why a k-shot cell cannot run for this tissue, or None if it can."""
        evaluation = self.evaluations[(tissue, seed)]
        if k > 0 and evaluation.zero_shot_only:
            return evaluation.reason or "insufficient positives"
        if k > 0 and k not in evaluation.plan.ladder:
            return f"train pool too small for k={k}"
        return None

    def run_cell(self, tissue: str, method: str, k: int, seed: int) -> CellResult:
        evaluation = self.evaluations[(tissue, seed)]
        plan = evaluation.plan
        cell = CellResult(tissue=tissue, method=method, k=k, seed=seed, n_test=len(plan.test_set))
        reason = self.skip_reason(tissue, k, seed)
        if reason is not None:
            cell.skipped = True
            cell.skip_reason = reason
            return cell
        shots = self.shots_for(tissue, seed, method, k) if k > 0 else []
        started = time.monotonic()
        try:
            scores, flags = self._score_method(method, seed, shots, plan.test_set)
            labels = np.array([ex.label for ex in plan.test_set])
            cell.auprc = auprc(scores, labels)
            cell.auroc = auroc(scores, labels)
            cell.flags = tuple(flags)
        except MetricUndefinedError as err:
            cell.skipped = True
            cell.skip_reason = f"metric undefined: {err}"
        except Exception as err:  # recorded, never aborts the run
            cell.error = f"{type(err).__name__}: {err}"
        cell.runtime = time.monotonic() - started
        return cell

    def _frozen_gbdt(self) -> GradientBoostedTreesClassifier:
        if self._frozen_gbdt_model is None:
            model = GradientBoostedTreesClassifier(**self.plan.gbdt_config())
            X, y = encode_rows(self.partition.common, self._common_vocabs)
            model.fit(X, y)
            self._bump("models_trained")
            self._frozen_gbdt_model = model
        return self._frozen_gbdt_model

    def _score_method(self, method, seed, shots, test_set):
        flags: list[str] = []
        if method == "gbdt":
            if self.plan.gbdt_frozen:
                flags.append("gbdt-frozen")
                model = self._frozen_gbdt()
                vocabs = self._common_vocabs
            elif not shots:
                # k=0 trains on the common pool alone, which is the same
                # model for every tissue; share one fit
                model = self._frozen_gbdt()
                vocabs = self._common_vocabs
            else:
                train = list(self.partition.common) + list(shots)
                vocabs = CategoryVocabularies.from_examples(train)
                model = GradientBoostedTreesClassifier(**self.plan.gbdt_config())
                X, y = encode_rows(train, vocabs)
                model.fit(X, y)
                self._bump("models_trained")
            if model.degenerate_:
                flags.append("degenerate-constant-model")
            X_test, _ = encode_rows(list(test_set), vocabs)
            return model.predict_proba(X_test)[:, 1], flags
        if method == "tabattn":
            base = self.tabattn_base(seed)
            model = base
            if shots:
                model = base.clone_with_weights()
                X, y = encode_rows(list(shots), self._common_vocabs)
                model.finetune(X, y, epochs=self.plan.tabattn_finetune_epochs)
                self._bump("models_trained")
            X_test, _ = encode_rows(list(test_set), self._common_vocabs)
            return model.predict_proba(X_test)[:, 1], flags
        if method in ("lm_scratch", "lm_pretrained"):
            if method == "lm_pretrained":
                model = self.pretrained_lm(seed)
                if shots:
                    model = model.clone_with_weights()
            else:
                model = self._lm_classifier(seed).initialize()
                if not shots:
                    flags.append(ZERO_SHOT_RANDOM_HEAD_FLAG)
            if shots:
                X, y = self._tokenize(list(shots))
                model.finetune(X, y, **self.plan.lm_finetune_config(), seed=seed)
                self._bump("models_trained")
            X_test, _ = self._tokenize(list(test_set))
            return model.predict_proba(X_test)[:, 1], flags
        if method == "remote":
            return self._score_remote(seed, shots, test_set, flags)
        raise ValueError(f"unknown method {method!r}")

    def _score_remote(self, seed, shots, test_set, flags):
        client = FineTuneClient(self.plan.remote_endpoint)
        if shots:
            serialized = serialize_examples(list(shots), self.plan.template, self.plan.precision)
            job = client.submit_and_await(FineTuneRequest(serialized, base_model=self.plan.remote_base_model))
            model_id = job.model_id
        else:
            model_id = self.plan.remote_base_model
            flags.append("zero-shot-base-model")
        scores = []
        hard_labels = False
        unparseable = 0
        for ex in serialize_examples(list(test_set), self.plan.template, self.plan.precision):
            result = client.classify(model_id, ex.prompt, self.plan.template)
            scores.append(result.score)
            hard_labels = hard_labels or not result.used_probabilities
            unparseable += int(result.unparseable)
        if hard_labels:
            flags.append("hard-label-scores")
        if unparseable:
            flags.append(f"unparseable-answers={unparseable}")
        return np.array(scores), flags

    # -- driving -------------------------------------------------------------

    def run_all(self) -> ResultTable:
        """Attempt every planned cell; resume skips already-manifested keys.

        With jobs == 1 (the default) cells execute in a deterministic order;
        larger worker pools may interleave manifest appends.
        """
        keys = self.cell_keys()
        pending = [key for key in keys if key not in self._existing_cells]
        self.stats["cells_resumed"] += len(keys) - len(pending)

        # Shared models train up front so worker threads only read them.
        if pending:
            if "gbdt" in self.plan.methods:
                self._frozen_gbdt()
            for seed in self.plan.seeds:
                if "lm_pretrained" in self.plan.methods:
                    self.pretrained_lm(seed)
                if "tabattn" in self.plan.methods:
                    self.tabattn_base(seed)

        def execute(key):
            cell = self.run_cell(*key)
            with self._manifest_lock:
                self._append_manifest(cell.to_record())
                if cell.skipped:
                    self.stats["cells_skipped"] += 1
                elif cell.error:
                    self.stats["cells_failed"] += 1
                else:
                    self.stats["cells_run"] += 1
            return cell

        if self.plan.jobs > 1 and len(pending) > 1:
            with ThreadPoolExecutor(max_workers=self.plan.jobs) as pool:
                list(pool.map(execute, pending))
        else:
            for key in pending:
                execute(key)
        return ResultTable.from_manifest(self.manifest_path)

    def _append_manifest(self, record: dict) -> None:
        with open(self.manifest_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def run_experiment(plan: ExperimentPlan, resume: bool = False) -> tuple[ResultTable, ExperimentRunner]:
    runner = ExperimentRunner(plan, resume=resume)
    runner.prepare()
    table = runner.run_all()
    return table, runner
