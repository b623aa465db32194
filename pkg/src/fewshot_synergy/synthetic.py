"""Deterministic synthetic datasets for demos and the test suite.

Two families of fixtures:

* a tissue-count mirror whose per-tissue label counts match the seven rare
  tissues of the real screen (plus one common tissue above the rarity
  threshold), for exercising ingest/partition/planning without real data;
* small transfer tasks whose label rule is a function of the drug pair and
  is shared across tissues, so a model trained on the common pool has
  something real to transfer to the rare tissue.
"""

from __future__ import annotations

import csv

import numpy as np

from .ingest import ColumnMapping, LabeledExample, SynergyRecord, label_examples

# (n0, n1) per rare tissue in the mirrored screen.
RARE_TISSUE_COUNTS = {
    "pancreas": (38, 1),
    "endometrium": (36, 32),
    "liver": (192, 21),
    "soft tissue": (269, 83),
    "stomach": (1081, 109),
    "urinary tract": (1996, 462),
    "bone": (3732, 253),
}
COMMON_TISSUE = "breast"
COMMON_TISSUE_ROWS = 4500
COMMON_POSITIVE_SHARE = 0.2

FAMILY_A = tuple(f"avexib{i}" for i in range(8))
FAMILY_B = tuple(f"borvanib{i}" for i in range(8))


def _record(rng: np.random.Generator, drug1: str, drug2: str, cell: str,
            tissue: str, positive: bool, row_id: int) -> SynergyRecord:
    loewe = rng.uniform(10.0, 40.0) if positive else rng.uniform(-40.0, 0.0)
    return SynergyRecord(
        drug1=drug1, drug2=drug2, cell_line=cell, tissue=tissue,
        ri1=round(float(rng.uniform(0.0, 30.0)), 1),
        ri2=round(float(rng.uniform(0.0, 30.0)), 1),
        loewe=round(float(loewe), 2),
        row_id=row_id,
    )


def tissue_mirror_records(seed: int = 0, include_common: bool = True) -> list[SynergyRecord]:
    """Records whose per-tissue n0/n1 counts mirror the seven rare tissues."""
    rng = np.random.default_rng(seed)
    drugs = [f"drug{i:03d}" for i in range(60)]
    records: list[SynergyRecord] = []
    row_id = 2  # first data line of a csv with a header row
    tissues = dict(RARE_TISSUE_COUNTS)
    if include_common:
        n1 = int(COMMON_TISSUE_ROWS * COMMON_POSITIVE_SHARE)
        tissues[COMMON_TISSUE] = (COMMON_TISSUE_ROWS - n1, n1)
    for tissue, (n0, n1) in tissues.items():
        cells = [f"{tissue.replace(' ', '')}cell{i}" for i in range(6)]
        labels = [0] * n0 + [1] * n1
        for label in labels:
            d1, d2 = rng.choice(len(drugs), size=2, replace=False)
            records.append(_record(rng, drugs[int(d1)], drugs[int(d2)],
                                   cells[int(rng.integers(len(cells)))],
                                   tissue, bool(label), row_id))
            row_id += 1
    return records


def write_records_csv(records, path, mapping: ColumnMapping = ColumnMapping(),
                      delimiter: str = ",") -> None:
    """Write records under the given column mapping (ingest's input format)."""
    columns = mapping.columns()
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter=delimiter)
        writer.writerow([columns[k] for k in ("drug1", "drug2", "cell_line", "tissue", "ri1", "ri2", "loewe")])
        for r in records:
            writer.writerow([r.drug1, r.drug2, r.cell_line, r.tissue, r.ri1, r.ri2, r.loewe])


def pair_rule_records(seed: int = 0, rule: str = "both",
                      common_tissues: tuple[str, ...] = ("dermis", "mucosa"),
                      rare_tissue: str = "tendon",
                      rows_per_common: int = 500,
                      rows_rare: int = 400) -> list[SynergyRecord]:
    """A transfer task: the label depends only on the drug pair's families.

    ``rule`` selects the pair rule: "both" labels a pair positive when both
    drugs come from the first family; "parity" labels by whether exactly one
    does. Drugs are shared across tissues while cell lines are tissue
    specific, so the rule transfers but the cell-line context does not.
    """
    if rule not in ("both", "parity"):
        raise ValueError(f"unknown rule {rule!r}")
    rng = np.random.default_rng(seed)
    drugs = list(FAMILY_A + FAMILY_B)
    in_a = {d: d in FAMILY_A for d in drugs}
    records: list[SynergyRecord] = []
    row_id = 2
    layout = [(t, rows_per_common) for t in common_tissues] + [(rare_tissue, rows_rare)]
    for tissue, n_rows in layout:
        cells = [f"{tissue}cell{i}" for i in range(4)]
        for _ in range(n_rows):
            i, j = rng.choice(len(drugs), size=2, replace=False)
            d1, d2 = drugs[int(i)], drugs[int(j)]
            if rule == "both":
                positive = in_a[d1] and in_a[d2]
            else:
                positive = in_a[d1] != in_a[d2]
            records.append(_record(rng, d1, d2, cells[int(rng.integers(len(cells)))],
                                   tissue, positive, row_id))
            row_id += 1
    return records


def pair_rule_examples(seed: int = 0, rule: str = "both", **kwargs) -> list[LabeledExample]:
    return label_examples(pair_rule_records(seed=seed, rule=rule, **kwargs))


def mini_screen_records(seed: int = 7) -> list[SynergyRecord]:
    """The 200-row fixture bundled for the command-line walkthrough:
    180 tendon rows and 20 dermis rows."""
    return pair_rule_records(seed=seed, common_tissues=("dermis",),
                             rows_per_common=20, rare_tissue="tendon", rows_rare=180)
