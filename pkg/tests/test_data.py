import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccpf.data import (
    TEST,
    TRAIN,
    VALIDATION,
    SparseDataset,
    assign_split,
    load_covariates,
    load_dataset,
    write_covariates,
    write_dataset,
)
from ccpf.errors import DataError


def write(tmp_path, text, name="data.tsv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_three_line_file(tmp_path):
    ds = load_dataset(write(tmp_path, "u1\ti1\t2.5\nu1\ti2\t-1\nu2\ti1\t0\n"))
    assert (ds.n_rows, ds.n_cols, ds.n_entries) == (2, 2, 3)
    assert ds.row_ids == ["u1", "u2"] and ds.col_ids == ["i1", "i2"]
    assert ds.rows.tolist() == [0, 0, 1]
    assert ds.cols.tolist() == [0, 1, 0]
    assert ds.values.tolist() == [2.5, -1.0, 0.0]
    assert ds.density == 0.75


def test_duplicate_pair_is_named(tmp_path):
    with pytest.raises(DataError, match=r"duplicate entry \(u1, i1\).*line 1"):
        load_dataset(write(tmp_path, "u1\ti1\t1\nu2\ti1\t2\nu1\ti1\t3\n"))


def test_parse_errors_carry_line_numbers(tmp_path):
    with pytest.raises(DataError, match=":2: value 'abc'"):
        load_dataset(write(tmp_path, "a\tb\t1\na\tc\tabc\n"))
    with pytest.raises(DataError, match=":1: expected 3"):
        load_dataset(write(tmp_path, "a\tb\n"))
    with pytest.raises(DataError, match="not finite"):
        load_dataset(write(tmp_path, "a\tb\tnan\n"))
    with pytest.raises(DataError, match="no entries"):
        load_dataset(write(tmp_path, "\n\n"))
    with pytest.raises(DataError, match="cannot read"):
        load_dataset(tmp_path / "absent.tsv")


def test_default_split_sizes_and_determinism():
    a = assign_split(1000, seed=7)
    assert [int(np.sum(a == t)) for t in (TRAIN, VALIDATION, TEST)] == [790, 10, 200]
    assert np.array_equal(a, assign_split(1000, seed=7))
    assert not np.array_equal(a, assign_split(1000, seed=8))
    with pytest.raises(ValueError):
        assign_split(10, (0.5, 0.5, 0.5))


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 3000), seed=st.integers(0, 2**32))
def test_split_partitions_entries(n, seed):
    s = assign_split(n, (0.6, 0.15, 0.25), seed)
    assert s.size == n
    assert int(np.sum(s == VALIDATION)) == round(0.15 * n)
    assert int(np.sum(s == TEST)) == round(0.25 * n)


def test_write_then_load_is_identity(tmp_path):
    rng = np.random.default_rng(0)
    flat = rng.choice(30 * 20, 150, replace=False)
    ds = SparseDataset(30, 20, flat // 20, flat % 20, rng.normal(size=150) * 1e3, np.zeros(150),
                       row_ids=[f"r{i}" for i in range(30)], col_ids=[f"c{j}" for j in range(20)])
    p = tmp_path / "out.tsv"
    write_dataset(ds, p)
    back = load_dataset(p)
    names = lambda d: [(d.row_ids[i], d.col_ids[j], v) for i, j, v in zip(d.rows, d.cols, d.values)]
    assert names(back) == names(ds)
    q = tmp_path / "again.tsv"
    write_dataset(back, q)
    assert p.read_bytes() == q.read_bytes()


def test_dataset_validation():
    with pytest.raises(DataError, match="outside"):
        SparseDataset(2, 2, [0, 2], [0, 0], [1.0, 1.0], [0, 0])
    with pytest.raises(DataError, match=r"duplicate entry \(0, 1\)"):
        SparseDataset(2, 2, [0, 0], [1, 1], [1.0, 1.0], [0, 0])
    with pytest.raises(DataError, match="length"):
        SparseDataset(2, 2, [0], [0, 1], [1.0], [0])


def test_part_and_counts():
    ds = SparseDataset(3, 3, [0, 1, 2], [0, 1, 2], [1.0, 2.0, 3.0], [TRAIN, TEST, TRAIN])
    r, c, v = ds.part(TRAIN)
    assert r.tolist() == [0, 2] and v.tolist() == [1.0, 3.0]
    assert ds.counts() == {"train": 2, "validation": 0, "test": 1}


def test_covariates_round_trip(tmp_path):
    x = np.array([[0.5, -1.0], [2.0, 3.25]])
    p = tmp_path / "cov.tsv"
    write_covariates(x, ["a", "b"], p)
    assert np.array_equal(load_covariates(p, ["b", "a"]), x[::-1])


def test_covariate_errors(tmp_path):
    with pytest.raises(DataError, match="no covariates for column 'z'"):
        load_covariates(write(tmp_path, "a\t1\n", "c.tsv"), ["a", "z"])
    with pytest.raises(DataError, match=":2: expected 1 covariates, got 2"):
        load_covariates(write(tmp_path, "a\t1\nb\t1\t2\n", "c.tsv"), ["a", "b"])
    with pytest.raises(DataError, match="duplicate column id"):
        load_covariates(write(tmp_path, "a\t1\na\t2\n", "c.tsv"), ["a"])
