import csv
import io

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fewshot_synergy.errors import SchemaError
from fewshot_synergy.ingest import (
    ColumnMapping,
    SynergyRecord,
    label_examples,
    parse_records,
    partition_by_tissue,
    read_examples,
    summarize,
    write_examples,
    write_summary,
)

HEADER = "drug_row,drug_col,cell_line_name,tissue_name,ri_row,ri_col,synergy_loewe"


def make_csv(rows):
    return io.StringIO("\n".join([HEADER] + rows) + "\n")


def make_records(tissue_labels):
    """tissue_labels: iterable of (tissue, label) pairs."""
    records = []
    for i, (tissue, label) in enumerate(tissue_labels):
        loewe = 20.0 if label else -20.0
        records.append(SynergyRecord(f"d{i}", f"e{i}", f"c{i % 5}", tissue, 0.5, 1.5, loewe, row_id=i + 2))
    return label_examples(records)


class TestParse:
    def test_single_row(self):
        result = parse_records(make_csv(['lonidamine,717906-29-1,A-673,bone,0.568,28.871,3.2']))
        assert result.rejections == []
        record = result.records[0]
        assert (record.drug1, record.drug2) == ("lonidamine", "717906-29-1")
        assert (record.cell_line, record.tissue) == ("A-673", "bone")
        assert (record.ri1, record.ri2, record.loewe) == (0.568, 28.871, 3.2)
        assert record.row_id == 2

    def test_header_only(self):
        result = parse_records(make_csv([]))
        assert result.records == [] and result.rejections == []

    def test_nan_sensitivity_rejected_with_line(self):
        result = parse_records(make_csv(["a,b,c,bone,NaN,1.0,2.0", "a,b,c,bone,0.1,1.0,2.0"]))
        assert len(result.records) == 1
        (rejection,) = result.rejections
        assert rejection.line == 2
        assert "ri1" in rejection.reason
        assert rejection.format().startswith("line=2 reason=")

    def test_unparseable_numeric_rejected(self):
        result = parse_records(make_csv(["a,b,c,bone,oops,1.0,2.0"]))
        assert len(result.rejections) == 1

    def test_missing_mapped_column_fatal(self):
        stream = io.StringIO("drug_row,drug_col\n" "a,b\n")
        with pytest.raises(SchemaError):
            parse_records(stream)

    def test_empty_identifier_rejected(self):
        result = parse_records(make_csv(["a,b,,bone,0.1,1.0,2.0"]))
        assert result.records == []
        assert "cell_line" in result.rejections[0].reason

    def test_loewe_outside_accept_range_rejected(self):
        result = parse_records(make_csv(["a,b,c,bone,0.1,1.0,150.0"]))
        assert result.records == [] and len(result.rejections) == 1

    def test_loewe_warning_zone(self):
        result = parse_records(make_csv(["a,b,c,bone,0.1,1.0,90.0"]))
        assert len(result.records) == 1
        assert len(result.warnings) == 1

    def test_custom_mapping_and_delimiter(self):
        stream = io.StringIO("a;b;c;t;x;y;score\n" "d1;d2;cl;bone;0.1;0.2;6.0\n")
        mapping = ColumnMapping(drug1="a", drug2="b", cell_line="c", tissue="t",
                                ri1="x", ri2="y", loewe="score")
        result = parse_records(stream, mapping, delimiter=";")
        assert result.records[0].loewe == 6.0

    def test_bytes_input(self):
        payload = (HEADER + "\na,b,c,bone,0.1,1.0,2.0\n").encode("utf-8")
        assert len(parse_records(payload).records) == 1


class TestLabeling:
    def test_strong_positive(self):
        (example,) = make_examples_with_loewe(46.82)
        assert example.label == 1

    def test_boundary_is_negative(self):
        (example,) = make_examples_with_loewe(5.0)
        assert example.label == 0

    def test_range_minimum_is_negative(self):
        (example,) = make_examples_with_loewe(-100.0)
        assert example.label == 0

    def test_threshold_monotonicity(self):
        loewes = [-50.0, -3.0, 0.0, 4.9, 5.0, 5.1, 30.0, 74.0]
        records = [SynergyRecord("a", "b", "c", "bone", 0.0, 0.0, lw) for lw in loewes]
        for low, high in [(0.0, 5.0), (5.0, 10.0), (-10.0, 60.0)]:
            pos_low = {ex.record.loewe for ex in label_examples(records, low) if ex.label}
            pos_high = {ex.record.loewe for ex in label_examples(records, high) if ex.label}
            assert pos_high <= pos_low


def make_examples_with_loewe(loewe):
    return label_examples([SynergyRecord("a", "b", "c", "bone", 0.1, 0.2, loewe)])


class TestPartition:
    def test_counts_against_threshold(self):
        examples = make_records([("pancreas", 0)] * 39 + [("bone", 0)] * 3985 + [("breast", 0)] * 4000)
        partition = partition_by_tissue(examples, rare_threshold=4000)
        assert sorted(partition.rare) == ["bone", "pancreas"]
        assert len(partition.common) == 4000

    def test_exactly_threshold_is_common(self):
        examples = make_records([("breast", 0)] * 4000)
        partition = partition_by_tissue(examples, 4000)
        assert partition.rare == {} and len(partition.common) == 4000

    def test_all_common_when_large(self):
        examples = make_records([("a", 0)] * 10 + [("b", 1)] * 10)
        assert partition_by_tissue(examples, rare_threshold=5).rare == {}

    def test_true_partition(self):
        examples = make_records([("a", 0)] * 3 + [("b", 1)] * 9 + [("c", 0)] * 6)
        partition = partition_by_tissue(examples, rare_threshold=5)
        scattered = [ex for group in partition.rare.values() for ex in group] + partition.common
        assert len(scattered) == len(examples)
        assert {id(ex) for ex in scattered} == {id(ex) for ex in examples}


class TestSummarize:
    def test_pancreas_like_counts(self):
        examples = make_records([("pancreas", 0)] * 38 + [("pancreas", 1)])
        summary = summarize(examples)
        assert (summary.per_tissue["pancreas"].n0, summary.per_tissue["pancreas"].n1) == (38, 1)

    def test_endometrium_like_counts(self):
        examples = make_records([("endometrium", 0)] * 36 + [("endometrium", 1)] * 32)
        counts = summarize(examples).per_tissue["endometrium"]
        assert (counts.n0, counts.n1) == (36, 32)

    def test_empty_input(self):
        summary = summarize([])
        assert summary.per_tissue == {}
        assert (summary.n_drugs, summary.n_cell_lines, summary.n_rows) == (0, 0, 0)

    def test_round_trip_totals(self):
        rows = ["a,b,c,bone,0.1,1.0,2.0", "a,b,c,bone,bad,1.0,2.0", "x,y,z,liver,0.2,0.3,9.0"]
        result = parse_records(make_csv(rows))
        summary = summarize(label_examples(result.records))
        assert summary.n_rows == len(result.records) == 2

    def test_duplicate_keys_flagged(self):
        rows = ["a,b,c,bone,0.1,1.0,2.0", "a,b,c,bone,0.5,0.7,8.0"]
        summary = summarize(label_examples(parse_records(make_csv(rows)).records))
        assert summary.n_duplicate_keys == 1

    def test_summary_export_columns(self, tmp_path):
        examples = make_records([("bone", 0), ("bone", 1), ("liver", 0)])
        write_summary(summarize(examples), tmp_path / "summary.csv")
        lines = (tmp_path / "summary.csv").read_text().splitlines()
        assert lines[0] == "tissue,n0,n1"
        assert lines[1] == "bone,1,1"


class TestExamplesRoundTrip:
    def test_write_read_identity(self, tmp_path):
        examples = make_records([("bone", 0), ("liver", 1)])
        write_examples(examples, tmp_path / "examples.csv")
        assert read_examples(tmp_path / "examples.csv") == examples


messy_cell = st.one_of(
    st.text(alphabet="abz,\"' 5.-", max_size=8),
    st.floats(allow_nan=True, allow_infinity=True).map(str),
    st.just(""),
)


class TestParserFuzz:
    @given(st.lists(st.tuples(messy_cell, messy_cell, messy_cell, messy_cell,
                              messy_cell, messy_cell, messy_cell), max_size=12))
    @settings(max_examples=80, deadline=None)
    def test_every_row_accepted_or_rejected(self, rows):
        """Arbitrary cell contents never crash the parser, and accepted plus
        rejected rows account for every data row."""
        buffer = io.StringIO()
        writer = csv.writer(buffer)
        writer.writerow(["drug_row", "drug_col", "cell_line_name", "tissue_name",
                         "ri_row", "ri_col", "synergy_loewe"])
        writer.writerows(rows)
        result = parse_records(io.StringIO(buffer.getvalue()))
        assert len(result.records) + len(result.rejections) == len(rows)
        for record in result.records:
            assert record.violations() == []
