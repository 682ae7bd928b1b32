import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tabsynth.errors import SchemaError, ValidationError
from tabsynth.table import (
    CATEGORICAL,
    CONTINUOUS,
    Column,
    Schema,
    Table,
    analysis_assessment,
    kfold_split,
    level_frequencies,
    read_csv,
    write_csv,
)

SCHEMA = Schema([Column("x", CONTINUOUS), Column("c", CATEGORICAL, ("a", "b"))])


def write(tmp_path, text, name="data.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestSchema:
    def test_duplicate_names_rejected(self):
        with pytest.raises(SchemaError):
            Schema([Column("x", CONTINUOUS), Column("x", CATEGORICAL)])

    def test_empty_name_rejected(self):
        with pytest.raises(SchemaError):
            Column("", CONTINUOUS)

    def test_round_trip_dict(self):
        assert Schema.from_dict(SCHEMA.to_dict()) == SCHEMA


class TestReadCsv:
    def test_three_line_file(self, tmp_path):
        p = write(tmp_path, "x,c\n1.5,a\n-2,b\n")
        t = read_csv(p, SCHEMA)
        assert len(t) == 2
        assert t.data["x"].tolist() == [1.5, -2.0]
        assert t.labels("c").tolist() == ["a", "b"]
        assert t.rejected == 0

    def test_undeclared_level_rejected(self, tmp_path):
        p = write(tmp_path, "x,c\n1,a\n2,z\n3,b\n")
        t = read_csv(p, SCHEMA)
        assert len(t) == 2
        assert t.rejected == 1

    def test_unparseable_and_nonfinite_rows_rejected(self, tmp_path):
        p = write(tmp_path, "x,c\noops,a\ninf,b\nnan,a\n4,a\n")
        t = read_csv(p, SCHEMA)
        assert t.data["x"].tolist() == [4.0]
        assert t.rejected == 3

    def test_missing_column(self, tmp_path):
        p = write(tmp_path, "x\n1\n")
        with pytest.raises(SchemaError, match="'c'"):
            read_csv(p, SCHEMA)

    def test_levels_discovered_in_file_order(self, tmp_path):
        schema = Schema([Column("c", CATEGORICAL)])
        t = read_csv(write(tmp_path, "c\nq\np\nq\n"), schema)
        assert t.levels("c") == ("q", "p")
        assert t.data["c"].tolist() == [0, 1, 0]

    def test_extra_columns_ignored_and_delimiter(self, tmp_path):
        p = write(tmp_path, "id;c;x\n7;b;0.25\n")
        t = read_csv(p, SCHEMA, delimiter=";")
        assert t.rows() == [(0.25, "b")]

    def test_no_header(self, tmp_path):
        t = read_csv(write(tmp_path, "1,a\n"), SCHEMA, header=False)
        assert len(t) == 1

    def test_write_then_reread_identical(self, tmp_path):
        rng = np.random.default_rng(3)
        t = Table(SCHEMA, {"x": rng.normal(size=50) * 1e3, "c": rng.integers(0, 2, 50)})
        write_csv(t, tmp_path / "out.csv")
        back = read_csv(tmp_path / "out.csv", SCHEMA)
        assert back.equals(t)

    def test_tables_are_immutable(self):
        t = Table(SCHEMA, {"x": [1.0], "c": [0]})
        with pytest.raises(ValueError):
            t.data["x"][0] = 2.0


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=1, max_size=20))
def test_csv_round_trip_is_exact(tmp_path_factory, xs):
    t = Table(SCHEMA, {"x": xs, "c": [i % 2 for i in range(len(xs))]})
    p = tmp_path_factory.mktemp("rt") / "t.csv"
    write_csv(t, p)
    assert read_csv(p, SCHEMA).equals(t)


class TestKfold:
    def test_exact_division(self):
        assert kfold_split(10, 10, seed=1).sizes().tolist() == [1] * 10

    def test_remainder(self):
        assert sorted(kfold_split(11, 10, seed=1).sizes().tolist()) == [1] * 9 + [2]

    def test_tpl_size(self):
        # 678013 = 10 * 67801 + 3
        sizes = kfold_split(678_013, 10, seed=0).sizes()
        assert set(sizes.tolist()) == {67_801, 67_802}
        assert sizes.sum() == 678_013
        assert (sizes == 67_802).sum() == 3

    def test_k_larger_than_n(self):
        with pytest.raises(ValidationError):
            kfold_split(3, 4, seed=0)

    def test_k_below_two(self):
        with pytest.raises(ValidationError):
            kfold_split(3, 1, seed=0)

    def test_deterministic(self):
        a = kfold_split(1000, 7, seed=42).assignment
        b = kfold_split(1000, 7, seed=42).assignment
        assert np.array_equal(a, b)
        assert not np.array_equal(a, kfold_split(1000, 7, seed=43).assignment)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 300), st.integers(2, 12), st.integers(0, 2**32))
def test_folds_partition_rows(n, k, seed):
    if k > n:
        return
    folds = kfold_split(n, k, seed)
    sizes = folds.sizes()
    assert sizes.max() - sizes.min() <= 1
    t = Table(Schema([Column("x", CONTINUOUS)]), {"x": np.arange(n, dtype=float)})
    seen = []
    for i in range(k):
        analysis, assessment = analysis_assessment(t, folds, i)
        assert set(analysis.row_ids).isdisjoint(assessment.row_ids)
        assert sorted(np.concatenate([analysis.row_ids, assessment.row_ids])) == list(range(n))
        seen.extend(assessment.row_ids.tolist())
    assert sorted(seen) == list(range(n))


class TestAnalysisAssessment:
    def test_sizes(self):
        t = Table(Schema([Column("x", CONTINUOUS)]), {"x": np.arange(100.0)})
        folds = kfold_split(t, 10, seed=5)
        analysis, assessment = analysis_assessment(t, folds, 3)
        assert (len(analysis), len(assessment)) == (90, 10)

    def test_small_partition(self):
        t = Table(Schema([Column("x", CONTINUOUS)]), {"x": np.arange(4.0)})
        a, b = analysis_assessment(t, kfold_split(t, 2, seed=0), 0)
        assert (len(a), len(b)) == (2, 2)
        assert sorted(np.concatenate([a.data["x"], b.data["x"]])) == [0, 1, 2, 3]

    def test_index_out_of_range(self):
        t = Table(Schema([Column("x", CONTINUOUS)]), {"x": np.arange(4.0)})
        with pytest.raises(ValidationError):
            analysis_assessment(t, kfold_split(t, 2, seed=0), 2)


class TestLevelFrequencies:
    def test_counting(self):
        t = Table.from_records(Schema([Column("c", CATEGORICAL)]), [("a",), ("a",), ("b",), ("a",)])
        assert level_frequencies(t, "c") == {"a": 0.75, "b": 0.25}

    def test_single_level(self):
        t = Table.from_records(Schema([Column("c", CATEGORICAL)]), [("z",)] * 3)
        assert level_frequencies(t, "c") == {"z": 1.0}

    def test_sampling_oracle(self):
        rng = np.random.default_rng(11)
        codes = rng.choice(3, size=10_000, p=[0.7, 0.2, 0.1])
        t = Table(Schema([Column("c", CATEGORICAL, ("a", "b", "c"))]), {"c": codes})
        freqs = level_frequencies(t, "c")
        assert freqs["a"] == pytest.approx(0.7, abs=0.02)
        assert freqs["b"] == pytest.approx(0.2, abs=0.02)
        assert freqs["c"] == pytest.approx(0.1, abs=0.02)
        assert abs(sum(freqs.values()) - 1) <= 1e-12

    def test_continuous_column_rejected(self):
        with pytest.raises(ValidationError):
            level_frequencies(Table(SCHEMA, {"x": [1.0], "c": [0]}), "x")

    def test_empty_table_rejected(self):
        with pytest.raises(ValidationError):
            level_frequencies(Table(SCHEMA, {"x": [], "c": []}), "c")
