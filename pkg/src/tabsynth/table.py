"""Typed in-memory tables, schemas, CSV ingestion and fold splitting.

Continuous cells are stored as float64, categorical cells as dense integer
indices into a per-column level dictionary. Tables are immutable: every
column array is marked read-only and all operations return new tables.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import SchemaError, ValidationError

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"
KINDS = (CONTINUOUS, CATEGORICAL)


@dataclass(frozen=True)
class Column:
    name: str
    kind: str
    levels: tuple[str, ...] | None = None

    def __post_init__(self):
        if not isinstance(self.name, str) or not self.name:
            raise SchemaError("column names must be nonempty strings")
        if self.kind not in KINDS:
            raise SchemaError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.levels is not None:
            if self.kind != CATEGORICAL:
                raise SchemaError(f"column {self.name!r}: levels given for a continuous column")
            levels = tuple(str(v) for v in self.levels)
            if len(set(levels)) != len(levels):
                raise SchemaError(f"column {self.name!r}: duplicate levels")
            object.__setattr__(self, "levels", levels)

    @property
    def is_categorical(self) -> bool:
        return self.kind == CATEGORICAL

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind}
        if self.levels is not None:
            d["levels"] = list(self.levels)
        return d


class Schema:
    """Ordered collection of uniquely named columns."""

    def __init__(self, columns: Iterable[Column]):
        self.columns: tuple[Column, ...] = tuple(columns)
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise SchemaError(f"duplicate column names: {dup}")
        self._index = {c.name: i for i, c in enumerate(self.columns)}

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    def __len__(self):
        return len(self.columns)

    def __iter__(self):
        return iter(self.columns)

    def __contains__(self, name):
        return name in self._index

    def __getitem__(self, name: str) -> Column:
        try:
            return self.columns[self._index[name]]
        except KeyError:
            raise SchemaError(f"unknown column {name!r}") from None

    def __eq__(self, other):
        return isinstance(other, Schema) and self.columns == other.columns

    def __repr__(self):
        return f"Schema({list(self.columns)!r})"

    def categorical(self) -> list[Column]:
        return [c for c in self.columns if c.is_categorical]

    def continuous(self) -> list[Column]:
        return [c for c in self.columns if not c.is_categorical]

    def to_dict(self) -> dict:
        return {"columns": [c.to_dict() for c in self.columns]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Schema":
        try:
            cols = d["columns"]
            return cls(Column(c["name"], c["kind"], c.get("levels")) for c in cols)
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed schema document: {exc}") from None

    @classmethod
    def load(cls, path) -> "Schema":
        with open(path, encoding="utf-8") as f:
            try:
                return cls.from_dict(json.load(f))
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}: invalid JSON ({exc})") from None


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Table:
    """Immutable column-typed table.

    ``row_ids`` identifies rows across subsetting (fold bookkeeping), and
    ``rejected`` counts input rows dropped during ingestion.
    """

    schema: Schema
    data: Mapping[str, np.ndarray]
    row_ids: np.ndarray = field(default=None)
    rejected: int = 0

    def __post_init__(self):
        names = self.schema.names
        if set(self.data) != set(names):
            raise SchemaError(
                f"table columns {sorted(self.data)} do not match schema {sorted(names)}"
            )
        n = None
        data = {}
        for col in self.schema:
            a = np.asarray(self.data[col.name])
            if a.ndim != 1:
                raise SchemaError(f"column {col.name!r} must be one-dimensional")
            if n is None:
                n = a.shape[0]
            elif a.shape[0] != n:
                raise SchemaError(f"column {col.name!r} has {a.shape[0]} rows, expected {n}")
            if col.is_categorical:
                if col.levels is None:
                    raise SchemaError(f"categorical column {col.name!r} has no level dictionary")
                a = a.astype(np.int64, copy=False)
                if a.size and (a.min() < 0 or a.max() >= len(col.levels)):
                    raise SchemaError(f"column {col.name!r}: level index out of range")
            else:
                a = a.astype(np.float64, copy=False)
                if not np.all(np.isfinite(a)):
                    raise SchemaError(f"column {col.name!r} contains non-finite values")
            data[col.name] = _readonly(a)
        n = 0 if n is None else n
        ids = np.arange(n, dtype=np.int64) if self.row_ids is None else np.asarray(self.row_ids, dtype=np.int64)
        if ids.shape != (n,):
            raise SchemaError("row_ids length does not match row count")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "row_ids", _readonly(ids))

    def __len__(self):
        return self.n_rows

    @property
    def n_rows(self) -> int:
        return int(self.row_ids.shape[0])

    def column(self, name: str) -> np.ndarray:
        self.schema[name]
        return self.data[name]

    def levels(self, name: str) -> tuple[str, ...]:
        col = self.schema[name]
        if not col.is_categorical:
            raise ValidationError(f"column {name!r} is not categorical")
        return col.levels

    def labels(self, name: str) -> np.ndarray:
        """Categorical column as an array of level strings."""
        return np.asarray(self.levels(name), dtype=object)[self.data[name]]

    def take(self, indices) -> "Table":
        idx = np.asarray(indices, dtype=np.int64)
        return Table(self.schema, {k: v[idx] for k, v in self.data.items()}, self.row_ids[idx])

    def replace(self, schema: Schema, data: Mapping[str, np.ndarray]) -> "Table":
        """New table with the same row ids and different columns."""
        return Table(schema, data, self.row_ids)

    def equals(self, other: "Table") -> bool:
        return (
            isinstance(other, Table)
            and self.schema == other.schema
            and np.array_equal(self.row_ids, other.row_ids)
            and all(np.array_equal(self.data[k], other.data[k]) for k in self.schema.names)
        )

    def rows(self) -> list[tuple]:
        cols = []
        for c in self.schema:
            cols.append(self.labels(c.name) if c.is_categorical else self.data[c.name])
        return list(zip(*cols))

    @classmethod
    def from_records(cls, schema: Schema, records: Sequence[Sequence]) -> "Table":
        """Build a table from rows of raw values (level strings for categoricals).

        Undeclared categorical levels are discovered in first-appearance order.
        """
        cols = list(zip(*records)) if records else [() for _ in schema]
        data, out_cols = {}, []
        for col, values in zip(schema, cols):
            if col.is_categorical:
                levels = list(col.levels) if col.levels is not None else []
                lookup = {lv: i for i, lv in enumerate(levels)}
                idx = []
                for v in values:
                    v = str(v)
                    if v not in lookup:
                        if col.levels is not None:
                            raise SchemaError(f"column {col.name!r}: undeclared level {v!r}")
                        lookup[v] = len(levels)
                        levels.append(v)
                    idx.append(lookup[v])
                data[col.name] = np.asarray(idx, dtype=np.int64)
                out_cols.append(Column(col.name, CATEGORICAL, tuple(levels)))
            else:
                data[col.name] = np.asarray(values, dtype=np.float64)
                out_cols.append(col)
        return cls(Schema(out_cols), data)


def read_csv(path, schema: Schema, delimiter: str = ",", header: bool = True) -> Table:
    """Read a CSV file into a :class:`Table`.

    Rows with unparseable or non-finite continuous cells, or with levels
    outside a declared level list, are dropped and counted in
    ``Table.rejected``. Columns present in the file but absent from the
    schema are ignored.
    """
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f, delimiter=delimiter)
        if header:
            try:
                head = next(reader)
            except StopIteration:
                raise SchemaError(f"{path}: empty file, header row required") from None
            head = [h.strip() for h in head]
            positions = {}
            for col in schema:
                if col.name not in head:
                    raise SchemaError(f"missing column {col.name!r} in {path}")
                positions[col.name] = head.index(col.name)
            width = len(head)
        else:
            positions = {c.name: i for i, c in enumerate(schema)}
            width = len(schema)

        levels = {c.name: list(c.levels) if c.levels is not None else [] for c in schema.categorical()}
        lookups = {name: {lv: i for i, lv in enumerate(lvs)} for name, lvs in levels.items()}
        values = {c.name: [] for c in schema}
        rejected = 0
        for record in reader:
            if not record:
                continue
            if len(record) != width:
                rejected += 1
                continue
            parsed = {}
            ok = True
            for col in schema:
                cell = record[positions[col.name]].strip()
                if col.is_categorical:
                    lookup = lookups[col.name]
                    if cell not in lookup:
                        if col.levels is not None or cell == "":
                            ok = False
                            break
                        lookup[cell] = len(levels[col.name])
                        levels[col.name].append(cell)
                    parsed[col.name] = lookup[cell]
                else:
                    try:
                        x = float(cell)
                    except ValueError:
                        ok = False
                        break
                    if not math.isfinite(x):
                        ok = False
                        break
                    parsed[col.name] = x
            if not ok:
                rejected += 1
                continue
            for k, v in parsed.items():
                values[k].append(v)

    cols = [
        Column(c.name, CATEGORICAL, tuple(levels[c.name])) if c.is_categorical else c for c in schema
    ]
    data = {
        c.name: np.asarray(values[c.name], dtype=np.int64 if c.is_categorical else np.float64)
        for c in schema
    }
    return Table(Schema(cols), data, rejected=rejected)


def format_float(x: float) -> str:
    # repr gives the shortest string that round-trips exactly
    return repr(float(x))


def write_csv(table: Table, path, delimiter: str = ",") -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, delimiter=delimiter, lineterminator="\n")
        w.writerow(table.schema.names)
        cols = []
        for c in table.schema:
            if c.is_categorical:
                cols.append(table.labels(c.name))
            else:
                cols.append([format_float(x) for x in table.data[c.name]])
        w.writerows(zip(*cols))


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    k: int
    assignment: np.ndarray
    seed: int

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.k)

    def indices(self, k_index: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == k_index)


def kfold_split(table: Table | int, k: int, seed: int) -> FoldAssignment:
    """Randomly partition rows into ``k`` folds whose sizes differ by at most one.

    Rows are shuffled with a seeded generator and dealt round-robin.
    """
    n = table if isinstance(table, (int, np.integer)) else len(table)
    if k < 2:
        raise ValidationError(f"k must be at least 2, got {k}")
    if k > n:
        raise ValidationError(f"cannot split {n} rows into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    assignment = np.empty(n, dtype=np.int64)
    assignment[perm] = np.arange(n) % k
    return FoldAssignment(k, _readonly(assignment), seed)


def analysis_assessment(table: Table, folds: FoldAssignment, k_index: int) -> tuple[Table, Table]:
    """Split into (analysis, assessment): the complement of fold ``k_index`` and the fold itself."""
    if not 0 <= k_index < folds.k:
        raise ValidationError(f"fold index {k_index} out of range for k={folds.k}")
    if folds.assignment.shape[0] != len(table):
        raise ValidationError("fold assignment does not match table size")
    mask = folds.assignment == k_index
    return table.take(np.flatnonzero(~mask)), table.take(np.flatnonzero(mask))


def level_frequencies(table: Table, column: str) -> dict[str, float]:
    col = table.schema[column]
    if not col.is_categorical:
        raise ValidationError(f"column {column!r} is continuous")
    if len(table) == 0:
        raise ValidationError("level frequencies of an empty table")
    counts = np.bincount(table.data[column], minlength=len(col.levels))
    probs = counts / counts.sum()
    return dict(zip(col.levels, probs.tolist()))


def subsample(table: Table, cap: int | None, seed: int) -> Table:
    """Uniform sample of at most ``cap`` rows without replacement, original order kept."""
    if cap is None or len(table) <= cap:
        return table
    idx = np.sort(np.random.default_rng(seed).choice(len(table), size=cap, replace=False))
    return table.take(idx)
