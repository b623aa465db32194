"""Command-line entry point.

Subcommands: ingest, split, pretrain, run, report, stub-server. Exit codes:
0 success, 1 usage error, 2 data error, 3 runtime error. Errors print one
machine-parseable line (``error: <reason>``) to standard error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import (
    EmptyTrainingSetError,
    MetricUndefinedError,
    NumericalError,
    PlanInfeasibleError,
    RemoteError,
    SchemaError,
    SplitInfeasibleError,
    TemplateError,
)
from .ingest import (
    ColumnMapping,
    label_examples,
    parse_records,
    read_examples,
    read_summary,
    summarize,
    write_examples,
    write_rejections,
    write_summary,
)
from .sampler import DEFAULT_LADDER, SplitSpec, build_kshot_plan, stratified_split, write_plan_manifest

DATA_ERRORS = (SchemaError, SplitInfeasibleError, PlanInfeasibleError, TemplateError,
               EmptyTrainingSetError, MetricUndefinedError, FileNotFoundError,
               json.JSONDecodeError, KeyError, ValueError, TypeError)
RUNTIME_ERRORS = (NumericalError, RemoteError, OSError)


class _Parser(argparse.ArgumentParser):
    """argparse parser whose usage failures exit 1 (not argparse's 2)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> _Parser:
    parser = _Parser(prog="fewshot-synergy",
                     description="Few-shot drug-pair synergy experiment pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_ingest = sub.add_parser("ingest", help="parse and label a synergy screen csv")
    p_ingest.add_argument("csv", help="delimiter-separated input with a header row")
    p_ingest.add_argument("--mapping", help="json file mapping record fields to column names")
    p_ingest.add_argument("--out", required=True, help="output directory for normalized data")
    p_ingest.add_argument("--delimiter", default=",", help="field delimiter (default ',')")
    p_ingest.add_argument("--threshold", type=float, default=5.0,
                          help="synergy-score threshold for the positive label (strict >)")
    p_ingest.set_defaults(func=cmd_ingest)

    p_split = sub.add_parser("split", help="build a k-shot plan for one tissue")
    p_split.add_argument("--data", required=True, help="directory produced by ingest")
    p_split.add_argument("--tissue", required=True)
    p_split.add_argument("--seed", type=int, default=0)
    p_split.add_argument("--ladder", default=",".join(str(k) for k in DEFAULT_LADDER),
                         help="comma-separated shot counts")
    p_split.add_argument("--test-fraction", type=float, default=0.2)
    p_split.add_argument("--out", help="plan manifest path (default inside --data)")
    p_split.set_defaults(func=cmd_split)

    p_pre = sub.add_parser("pretrain", help="train a common-tissue base model")
    p_pre.add_argument("--method", choices=("lm", "tabattn"), required=True)
    p_pre.add_argument("--config", required=True, help="experiment plan json")
    p_pre.add_argument("--seed", type=int, default=0)
    p_pre.set_defaults(func=cmd_pretrain)

    p_run = sub.add_parser("run", help="run every (tissue, method, k, seed) cell")
    p_run.add_argument("--plan", required=True, help="experiment plan json")
    p_run.add_argument("--resume", action="store_true",
                       help="skip cells already present in the run manifest")
    p_run.add_argument("--jobs", type=int, help="worker pool size (default from plan)")
    p_run.set_defaults(func=cmd_run)

    p_rep = sub.add_parser("report", help="render the result table from a run directory")
    p_rep.add_argument("--run", required=True, help="run directory containing manifest.jsonl")
    p_rep.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    p_rep.add_argument("--out", help="output file (default: stdout)")
    p_rep.add_argument("--bold-max", action="store_true", help="bold the best value per column")
    p_rep.add_argument("--plot-data", metavar="DIR",
                       help="also write per-tissue metric-vs-k csv files into DIR")
    p_rep.set_defaults(func=cmd_report)

    p_stub = sub.add_parser("stub-server", help="serve the bundled fine-tune service stub")
    p_stub.add_argument("--port", type=int, required=True)
    p_stub.add_argument("--seed", type=int, default=0)
    p_stub.add_argument("--require-auth", action="store_true")
    p_stub.set_defaults(func=cmd_stub_server)
    return parser


def cmd_ingest(args) -> int:
    mapping = ColumnMapping()
    if args.mapping:
        with open(args.mapping, "r", encoding="utf-8") as fh:
            mapping = ColumnMapping(**json.load(fh))
    result = parse_records(args.csv, mapping, args.delimiter)
    examples = label_examples(result.records, args.threshold)
    summary = summarize(examples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_examples(examples, out / "examples.csv")
    write_summary(summary, out / "summary.csv")
    write_rejections(result.rejections, out / "rejections.txt")
    print(f"accepted {len(result.records)} rows, rejected {len(result.rejections)}, "
          f"warnings {len(result.warnings)}")
    print("tissue,n0,n1")
    for tissue, counts in summary.per_tissue.items():
        print(f"{tissue},{counts.n0},{counts.n1}")
    print(f"drugs={summary.n_drugs} cell_lines={summary.n_cell_lines} rows={summary.n_rows} "
          f"duplicate_keys={summary.n_duplicate_keys}")
    return 0


def cmd_split(args) -> int:
    examples = read_examples(Path(args.data) / "examples.csv")
    tissue_examples = [ex for ex in examples if ex.record.tissue == args.tissue]
    if not tissue_examples:
        raise ValueError(f"no rows for tissue {args.tissue!r}")
    ladder = tuple(int(k) for k in args.ladder.split(","))
    train, test = stratified_split(tissue_examples, SplitSpec(args.test_fraction, args.seed))
    plan = build_kshot_plan(train, test, ladder, args.seed, args.tissue)
    out = Path(args.out) if args.out else Path(args.data) / f"plan_{args.tissue.replace(' ', '_')}_seed{args.seed}.jsonl"
    write_plan_manifest(plan, out)
    print(f"plan written to {out}")
    print(f"train_pool={len(plan.train_pool)} test={len(plan.test_set)} ladder={list(plan.ladder)}"
          + (" (truncated)" if plan.truncated else ""))
    return 0


def cmd_pretrain(args) -> int:
    from .experiment import ExperimentPlan, ExperimentRunner

    plan = ExperimentPlan.load(args.config)
    runner = ExperimentRunner(plan, resume=True)
    runner.prepare()
    if args.method == "lm":
        runner.pretrained_lm(args.seed)
        path = runner.out_dir / f"lm_pretrained_seed{args.seed}.ckpt"
    else:
        runner.tabattn_base(args.seed)
        path = runner.out_dir / f"tabattn_seed{args.seed}.ckpt"
    print(f"checkpoint written to {path}")
    return 0


def cmd_run(args) -> int:
    from .experiment import ExperimentPlan, emit_report, run_experiment

    plan = ExperimentPlan.load(args.plan)
    if args.jobs:
        plan.jobs = args.jobs
    table, runner = run_experiment(plan, resume=args.resume)
    stats = runner.stats
    print(f"cells: ran {stats['cells_run']}, skipped {stats['cells_skipped']}, "
          f"failed {stats['cells_failed']}, resumed {stats['cells_resumed']}; "
          f"models trained {stats['models_trained']}")
    report = emit_report(table, runner.summary, plan.ladder, fmt="markdown")
    (runner.out_dir / "report.md").write_text(report, encoding="utf-8")
    (runner.out_dir / "results.csv").write_text(table.to_csv_text(), encoding="utf-8")
    print(f"report written to {runner.out_dir / 'report.md'}")
    if stats["cells_failed"]:
        print(f"error: {stats['cells_failed']} cells failed (see manifest)", file=sys.stderr)
        return 3
    return 0


def cmd_report(args) -> int:
    from .experiment import ExperimentPlan, ResultTable, emit_plot_data, emit_report

    run_dir = Path(args.run)
    table = ResultTable.from_manifest(run_dir / "manifest.jsonl")
    summary = None
    if (run_dir / "summary.csv").exists():
        summary = read_summary(run_dir / "summary.csv")
    ladder = DEFAULT_LADDER
    if (run_dir / "plan.json").exists():
        ladder = ExperimentPlan.load(run_dir / "plan.json").ladder
    text = emit_report(table, summary, ladder, fmt=args.format, bold_max=args.bold_max)
    if args.plot_data:
        plot_dir = Path(args.plot_data)
        plot_dir.mkdir(parents=True, exist_ok=True)
        for tissue, block in emit_plot_data(table).items():
            (plot_dir / f"{tissue.replace(' ', '_')}_metric_vs_k.csv").write_text(block, encoding="utf-8")
        print(f"plot data written to {plot_dir}")
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"report written to {args.out}")
    else:
        print(text)
    return 0


def cmd_stub_server(args) -> int:
    from .stub_server import serve_forever

    serve_forever(args.port, seed=args.seed, require_auth=args.require_auth)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except DATA_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
