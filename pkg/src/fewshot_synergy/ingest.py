"""Parse raw synergy-screen rows, label them, and partition tissues by size.

The input is delimiter-separated text with a header row. Column names are
configurable through :class:`ColumnMapping`; the defaults match the public
DrugComb summary export.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, TextIO

from .errors import SchemaError

LOEWE_ACCEPT_RANGE = (-100.0, 100.0)
LOEWE_EXPECTED_RANGE = (-100.0, 75.0)
DEFAULT_LABEL_THRESHOLD = 5.0
DEFAULT_RARE_THRESHOLD = 4000


@dataclass(frozen=True)
class ColumnMapping:
    """Source column name for each record field."""

    drug1: str = "drug_row"
    drug2: str = "drug_col"
    cell_line: str = "cell_line_name"
    tissue: str = "tissue_name"
    ri1: str = "ri_row"
    ri2: str = "ri_col"
    loewe: str = "synergy_loewe"

    def columns(self) -> dict[str, str]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class SynergyRecord:
    """One screened drug pair in one cell line.

    ``ri1``/``ri2`` are the single-drug relative-inhibition sensitivities and
    ``loewe`` is the pairwise Loewe synergy score. ``row_id`` is the source
    line number, kept so sampled subsets can be replayed exactly.
    """

    drug1: str
    drug2: str
    cell_line: str
    tissue: str
    ri1: float
    ri2: float
    loewe: float
    row_id: int = -1

    def violations(self) -> list[str]:
        """Return invariant violations; an empty list means the row is valid."""
        problems = []
        for name in ("drug1", "drug2", "cell_line", "tissue"):
            if not getattr(self, name):
                problems.append(f"empty {name}")
        for name in ("ri1", "ri2", "loewe"):
            if not math.isfinite(getattr(self, name)):
                problems.append(f"non-finite {name}")
        lo, hi = LOEWE_ACCEPT_RANGE
        if math.isfinite(self.loewe) and not lo <= self.loewe <= hi:
            problems.append(f"loewe {self.loewe} outside [{lo}, {hi}]")
        return problems


@dataclass(frozen=True)
class LabeledExample:
    """A record plus its binary synergy label (1 = positive synergy)."""

    record: SynergyRecord
    label: int


@dataclass(frozen=True)
class Rejection:
    line: int
    reason: str

    def format(self) -> str:
        return f"line={self.line} reason={self.reason}"


@dataclass
class ParseResult:
    records: list[SynergyRecord]
    rejections: list[Rejection]
    warnings: list[str] = field(default_factory=list)


def _open_source(source) -> TextIO:
    if isinstance(source, (str, Path)):
        return open(source, "r", encoding="utf-8", newline="")
    if isinstance(source, bytes):
        return io.StringIO(source.decode("utf-8"))
    if isinstance(source, io.BufferedIOBase) or hasattr(source, "mode") and "b" in getattr(source, "mode", ""):
        return io.TextIOWrapper(source, encoding="utf-8")
    return source


def parse_records(source, mapping: ColumnMapping = ColumnMapping(), delimiter: str = ",") -> ParseResult:
    """Parse delimiter-separated rows into validated records.

    Rows that violate record invariants or contain unparseable numeric cells
    are collected into the rejection report rather than dropped silently. A
    missing mapped column is fatal and raises :class:`SchemaError`.
    """
    stream = _open_source(source)
    reader = csv.DictReader(stream, delimiter=delimiter)
    if reader.fieldnames is None:
        raise SchemaError("input has no header row")
    header = set(reader.fieldnames)
    missing = [col for col in mapping.columns().values() if col not in header]
    if missing:
        raise SchemaError(f"mapped columns missing from header: {', '.join(sorted(missing))}")

    records: list[SynergyRecord] = []
    rejections: list[Rejection] = []
    warnings: list[str] = []
    lo_warn, hi_warn = LOEWE_EXPECTED_RANGE
    for line_no, row in enumerate(reader, start=2):
        try:
            numeric = {name: float(row[mapping.columns()[name]]) for name in ("ri1", "ri2", "loewe")}
        except (TypeError, ValueError):
            bad = [n for n in ("ri1", "ri2", "loewe")
                   if not _parses_as_finite(row.get(mapping.columns()[n]))]
            rejections.append(Rejection(line_no, f"unparseable numeric cell ({', '.join(bad) or 'row'})"))
            continue
        record = SynergyRecord(
            drug1=(row[mapping.drug1] or "").strip(),
            drug2=(row[mapping.drug2] or "").strip(),
            cell_line=(row[mapping.cell_line] or "").strip(),
            tissue=(row[mapping.tissue] or "").strip(),
            ri1=numeric["ri1"],
            ri2=numeric["ri2"],
            loewe=numeric["loewe"],
            row_id=line_no,
        )
        problems = record.violations()
        if problems:
            rejections.append(Rejection(line_no, "; ".join(problems)))
            continue
        if not lo_warn <= record.loewe <= hi_warn:
            warnings.append(f"line={line_no} loewe {record.loewe} outside expected [{lo_warn}, {hi_warn}]")
        records.append(record)
    return ParseResult(records, rejections, warnings)


def _parses_as_finite(cell) -> bool:
    try:
        return math.isfinite(float(cell))
    except (TypeError, ValueError):
        return False


def label_examples(records: Iterable[SynergyRecord], threshold: float = DEFAULT_LABEL_THRESHOLD) -> list[LabeledExample]:
    """Label records 1 iff loewe is strictly above the threshold."""
    return [LabeledExample(r, int(r.loewe > threshold)) for r in records]


@dataclass
class TissuePartition:
    """Examples split into rare tissues (by name) and a common pool."""

    rare: dict[str, list[LabeledExample]]
    common: list[LabeledExample]
    rare_threshold: int


def partition_by_tissue(examples: Iterable[LabeledExample], rare_threshold: int = DEFAULT_RARE_THRESHOLD) -> TissuePartition:
    """Partition examples into rare tissues (count < threshold) and the rest."""
    by_tissue: dict[str, list[LabeledExample]] = {}
    for ex in examples:
        by_tissue.setdefault(ex.record.tissue, []).append(ex)
    rare: dict[str, list[LabeledExample]] = {}
    common: list[LabeledExample] = []
    for tissue in sorted(by_tissue):
        group = by_tissue[tissue]
        if len(group) < rare_threshold:
            rare[tissue] = group
        else:
            common.extend(group)
    return TissuePartition(rare, common, rare_threshold)


@dataclass(frozen=True)
class TissueCounts:
    n0: int
    n1: int

    @property
    def total(self) -> int:
        return self.n0 + self.n1


@dataclass
class DatasetSummary:
    per_tissue: dict[str, TissueCounts]
    n_drugs: int
    n_cell_lines: int
    n_rows: int
    n_duplicate_keys: int

    def counts(self, tissue: str) -> TissueCounts:
        return self.per_tissue[tissue]


def summarize(examples: Iterable[LabeledExample]) -> DatasetSummary:
    """Per-tissue label counts plus dataset-wide totals.

    Duplicate (drug1, drug2, cell line) keys are kept as distinct examples
    but counted in ``n_duplicate_keys``.
    """
    per_tissue: dict[str, list[int]] = {}
    drugs: set[str] = set()
    cells: set[str] = set()
    seen_keys: set[tuple[str, str, str]] = set()
    n_rows = 0
    n_duplicates = 0
    for ex in examples:
        rec = ex.record
        counts = per_tissue.setdefault(rec.tissue, [0, 0])
        counts[ex.label] += 1
        drugs.update((rec.drug1, rec.drug2))
        cells.add(rec.cell_line)
        key = (rec.drug1, rec.drug2, rec.cell_line)
        if key in seen_keys:
            n_duplicates += 1
        seen_keys.add(key)
        n_rows += 1
    ordered = {t: TissueCounts(n0=per_tissue[t][0], n1=per_tissue[t][1]) for t in sorted(per_tissue)}
    return DatasetSummary(ordered, len(drugs), len(cells), n_rows, n_duplicates)


def write_summary(summary: DatasetSummary, path) -> None:
    """Write the per-tissue summary as csv with columns tissue,n0,n1."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tissue", "n0", "n1"])
        for tissue, counts in summary.per_tissue.items():
            writer.writerow([tissue, counts.n0, counts.n1])


def read_summary(path) -> DatasetSummary:
    """Read a summary written by :func:`write_summary` (per-tissue counts only)."""
    per_tissue: dict[str, TissueCounts] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            per_tissue[row["tissue"]] = TissueCounts(int(row["n0"]), int(row["n1"]))
    total = sum(c.total for c in per_tissue.values())
    return DatasetSummary(per_tissue, 0, 0, total, 0)


def write_rejections(rejections: Iterable[Rejection], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rejection in rejections:
            fh.write(rejection.format() + "\n")


def write_examples(examples: Iterable[LabeledExample], path) -> None:
    """Write normalized labeled examples as csv for downstream stages."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row_id", "drug1", "drug2", "cell_line", "tissue", "ri1", "ri2", "loewe", "label"])
        for ex in examples:
            r = ex.record
            writer.writerow([r.row_id, r.drug1, r.drug2, r.cell_line, r.tissue,
                             repr(r.ri1), repr(r.ri2), repr(r.loewe), ex.label])


def read_examples(path) -> list[LabeledExample]:
    """Read examples written by :func:`write_examples`."""
    out: list[LabeledExample] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            record = SynergyRecord(
                drug1=row["drug1"], drug2=row["drug2"], cell_line=row["cell_line"],
                tissue=row["tissue"], ri1=float(row["ri1"]), ri2=float(row["ri2"]),
                loewe=float(row["loewe"]), row_id=int(row["row_id"]))
            out.append(LabeledExample(record, int(row["label"])))
    return out
