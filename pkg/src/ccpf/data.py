"""Sparse matrix datasets: TSV ingestion, train/validation/test splits and covariates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

TRAIN, VALIDATION, TEST = 0, 1, 2
DEFAULT_SPLIT = (0.79, 0.01, 0.20)


@dataclass
class SparseDataset:
    """Non-missing cells of an ``n_rows x n_cols`` matrix; absent pairs are missing."""

    n_rows: int
    n_cols: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    split: np.ndarray
    row_ids: list[str] = field(default_factory=list)
    col_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64)
        self.cols = np.asarray(self.cols, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=float)
        self.split = np.asarray(self.split, dtype=np.int8)
        n = self.rows.size
        if not (self.cols.size == self.values.size == self.split.size == n):
            raise DataError("entry arrays differ in length")
        if n and (self.rows.min() < 0 or self.rows.max() >= self.n_rows or self.cols.min() < 0 or self.cols.max() >= self.n_cols):
            raise DataError("entry index outside the matrix")
        flat = self.rows * self.n_cols + self.cols
        uniq, counts = np.unique(flat, return_counts=True)
        if uniq.size != n:
            dup = uniq[counts > 1][0]
            raise DataError(f"duplicate entry {self._name(dup // self.n_cols, dup % self.n_cols)}")
        if not self.row_ids:
            self.row_ids = [str(i) for i in range(self.n_rows)]
        if not self.col_ids:
            self.col_ids = [str(j) for j in range(self.n_cols)]

    def _name(self, i, j):
        ri = self.row_ids[i] if self.row_ids else str(i)
        cj = self.col_ids[j] if self.col_ids else str(j)
        return f"({ri}, {cj})"

    @property
    def n_entries(self) -> int:
        return int(self.rows.size)

    @property
    def density(self) -> float:
        return self.n_entries / (self.n_rows * self.n_cols)

    def part(self, tag: int):
        """``(rows, cols, values)`` of one split, in file order."""
        m = self.split == tag
        return self.rows[m], self.cols[m], self.values[m]

    def counts(self) -> dict[str, int]:
        return {name: int(np.sum(self.split == tag)) for name, tag in (("train", TRAIN), ("validation", VALIDATION), ("test", TEST))}


def assign_split(n: int, fractions=DEFAULT_SPLIT, seed: int = 0) -> np.ndarray:
    """Tag ``n`` entries train/validation/test by a seeded permutation.

    Validation and test sizes are rounded from their fractions; training takes
    the remainder.
    """
    fr = np.asarray(fractions, dtype=float)
    if fr.shape != (3,) or np.any(fr < 0) or not np.isclose(fr.sum(), 1.0):
        raise ValueError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    n_val = int(round(fr[1] * n))
    n_test = int(round(fr[2] * n))
    n_train = n - n_val - n_test
    perm = np.random.default_rng(seed).permutation(n)
    split = np.empty(n, dtype=np.int8)
    split[perm[:n_train]] = TRAIN
    split[perm[n_train:n_train + n_val]] = VALIDATION
    split[perm[n_train + n_val:]] = TEST
    return split


def load_dataset(path, split=DEFAULT_SPLIT, seed: int = 0) -> SparseDataset:
    """Read ``row_id<TAB>col_id<TAB>value`` lines; ids map to indices in order of first appearance."""
    row_index: dict[str, int] = {}
    col_index: dict[str, int] = {}
    rows, cols, vals = [], [], []
    seen: dict[tuple[int, int], int] = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            r, c, v = parts
            try:
                value = float(v)
            except ValueError:
                raise DataError(f"{path}:{lineno}: value {v!r} is not a number") from None
            if not np.isfinite(value):
                raise DataError(f"{path}:{lineno}: value {v!r} is not finite")
            i = row_index.setdefault(r, len(row_index))
            j = col_index.setdefault(c, len(col_index))
            if (i, j) in seen:
                raise DataError(f"{path}:{lineno}: duplicate entry ({r}, {c}), first seen on line {seen[(i, j)]}")
            seen[(i, j)] = lineno
            rows.append(i)
            cols.append(j)
            vals.append(value)
    if not rows:
        raise DataError(f"{path}: no entries")
    return SparseDataset(
        n_rows=len(row_index),
        n_cols=len(col_index),
        rows=np.array(rows),
        cols=np.array(cols),
        values=np.array(vals),
        split=assign_split(len(rows), split, seed),
        row_ids=list(row_index),
        col_ids=list(col_index),
    )


def write_dataset(ds: SparseDataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, j, v in zip(ds.rows, ds.cols, ds.values):
            fh.write(f"{ds.row_ids[i]}\t{ds.col_ids[j]}\t{float(v)!r}\n")


def load_covariates(path, col_ids: list[str]) -> np.ndarray:
    """Read ``col_id<TAB>x_1<TAB>...<TAB>x_K`` lines into an ``(n_cols, K)`` matrix ordered like ``col_ids``."""
    table: dict[str, np.ndarray] = {}
    width = None
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) < 2:
                raise DataError(f"{path}:{lineno}: expected an id and at least one covariate")
            try:
                x = np.array([float(v) for v in parts[1:]])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric covariate") from None
            if width is None:
                width = x.size
            elif x.size != width:
                raise DataError(f"{path}:{lineno}: expected {width} covariates, got {x.size}")
            if parts[0] in table:
                raise DataError(f"{path}:{lineno}: duplicate column id {parts[0]!r}")
            table[parts[0]] = x
    missing = [c for c in col_ids if c not in table]
    if missing:
        raise DataError(f"{path}: no covariates for column {missing[0]!r}")
    return np.stack([table[c] for c in col_ids])


def write_covariates(x: np.ndarray, col_ids: list[str], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for cid, row in zip(col_ids, x):
            fh.write(cid + "\t" + "\t".join(repr(float(v)) for v in row) + "\n")
