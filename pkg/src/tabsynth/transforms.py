"""Declarative pre- and post-processing pipelines.

A pipeline is two ordered lists of steps: ``pre`` runs on real data before
the synthesizer sees it, ``post`` runs on generated (or real, for scoring)
data afterwards. Steps are small frozen dataclasses that round-trip through
the recipe JSON format; ``tpl_recipe`` and ``lapse_recipe`` load the two
shipped recipes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path
from typing import ClassVar, Mapping, Sequence

import numpy as np

from .errors import ConfigError, TransformError
from .table import CATEGORICAL, CONTINUOUS, Column, Schema, Table

_STEPS: dict[str, type] = {}


def _register(cls):
    _STEPS[cls.op] = cls
    return cls


def _continuous(table: Table, name: str) -> np.ndarray:
    col = table.schema[name]
    if col.is_categorical:
        raise TransformError(f"column {name!r} must be continuous")
    return table.data[name]


def _categorical(table: Table, name: str) -> Column:
    col = table.schema[name]
    if not col.is_categorical:
        raise TransformError(f"column {name!r} must be categorical")
    return col


def _replace_column(table: Table, old: str, new: Column, values: np.ndarray) -> Table:
    cols = [new if c.name == old else c for c in table.schema]
    data = {k: v for k, v in table.data.items() if k != old}
    data[new.name] = values
    return table.replace(Schema(cols), data)


def _set_values(table: Table, name: str, values: np.ndarray) -> Table:
    data = dict(table.data)
    data[name] = values
    return table.replace(table.schema, data)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


class Step:
    op: ClassVar[str]

    def apply(self, table: Table) -> Table:
        raise NotImplementedError

    def to_dict(self) -> dict:
        d = {"op": self.op}
        for f in fields(self):
            d[f.name] = _jsonable(getattr(self, f.name))
        return d


def _jsonable(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return {str(a): _jsonable(b) for a, b in v}
        return [_jsonable(x) for x in v]
    return v


def _pairs(mapping) -> tuple:
    items = mapping.items() if isinstance(mapping, Mapping) else mapping
    return tuple((k, v) for k, v in items)


@_register
@dataclass(frozen=True)
class ClampUpper(Step):
    op: ClassVar[str] = "clamp_upper"
    column: str
    bound: float

    def apply(self, table):
        return _set_values(table, self.column, np.minimum(_continuous(table, self.column), self.bound))


@_register
@dataclass(frozen=True)
class ClampLower(Step):
    op: ClassVar[str] = "clamp_lower"
    column: str
    bound: float

    def apply(self, table):
        return _set_values(table, self.column, np.maximum(_continuous(table, self.column), self.bound))


@_register
@dataclass(frozen=True)
class ClampBoth(Step):
    op: ClassVar[str] = "clamp_both"
    column: str
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ConfigError(f"clamp_both on {self.column!r}: need lo < hi")

    def apply(self, table):
        return _set_values(table, self.column, np.clip(_continuous(table, self.column), self.lo, self.hi))


@_register
@dataclass(frozen=True)
class LogTransform(Step):
    op: ClassVar[str] = "log"
    column: str

    def apply(self, table):
        x = _continuous(table, self.column)
        bad = np.flatnonzero(x <= 0)
        if bad.size:
            raise TransformError(
                f"log of nonpositive value {x[bad[0]]!r} in column {self.column!r}", row=int(bad[0])
            )
        return _set_values(table, self.column, np.log(x))


@_register
@dataclass(frozen=True)
class ExpTransform(Step):
    """Inverse of :class:`LogTransform`, for back-transforming synthetic output."""

    op: ClassVar[str] = "exp"
    column: str

    def apply(self, table):
        return _set_values(table, self.column, np.exp(_continuous(table, self.column)))


@_register
@dataclass(frozen=True)
class RoundToInteger(Step):
    op: ClassVar[str] = "round"
    column: str

    def apply(self, table):
        return _set_values(table, self.column, round_half_away(_continuous(table, self.column)))


@_register
@dataclass(frozen=True)
class BinNumeric(Step):
    """Continuous to categorical by intervals ``[cut[i], cut[i+1])``; the last interval is closed."""

    op: ClassVar[str] = "bin_numeric"
    column: str
    cuts: tuple
    labels: tuple

    def __post_init__(self):
        cuts = tuple(float(c) for c in self.cuts)
        labels = tuple(str(lb) for lb in self.labels)
        object.__setattr__(self, "cuts", cuts)
        object.__setattr__(self, "labels", labels)
        if any(b <= a for a, b in zip(cuts, cuts[1:])):
            raise ConfigError(f"bin_numeric on {self.column!r}: cut points must be strictly ascending")
        if len(set(labels)) != len(labels):
            raise ConfigError(f"bin_numeric on {self.column!r}: bin labels must be unique")
        if len(labels) != len(cuts) - 1:
            raise ConfigError(f"bin_numeric on {self.column!r}: need len(cuts) - 1 labels")

    def apply(self, table):
        x = _continuous(table, self.column)
        cuts = np.asarray(self.cuts)
        outside = np.flatnonzero((x < cuts[0]) | (x > cuts[-1]))
        if outside.size:
            raise TransformError(
                f"value {x[outside[0]]!r} of column {self.column!r} is outside all bins",
                row=int(outside[0]),
            )
        idx = np.searchsorted(cuts, x, side="right") - 1
        idx = np.minimum(idx, len(self.labels) - 1)
        return _replace_column(table, self.column, Column(self.column, CATEGORICAL, self.labels), idx)


@_register
@dataclass(frozen=True)
class BinCategorical(Step):
    """Regroup levels; output levels are the groups in first-appearance order of the map."""

    op: ClassVar[str] = "bin_categorical"
    column: str
    mapping: tuple

    def __post_init__(self):
        object.__setattr__(self, "mapping", tuple((str(k), str(v)) for k, v in _pairs(self.mapping)))

    def apply(self, table):
        col = _categorical(table, self.column)
        m = dict(self.mapping)
        groups = list(dict.fromkeys(m.values()))
        gidx = {g: i for i, g in enumerate(groups)}
        lut = np.empty(len(col.levels), dtype=np.int64)
        for i, lv in enumerate(col.levels):
            if lv in m:
                lut[i] = gidx[m[lv]]
            else:
                lut[i] = -1
        x = table.data[self.column]
        out = lut[x]
        bad = np.flatnonzero(out < 0)
        if bad.size:
            raise TransformError(
                f"level {col.levels[x[bad[0]]]!r} of column {self.column!r} has no group", row=int(bad[0])
            )
        return _replace_column(table, self.column, Column(self.column, CATEGORICAL, tuple(groups)), out)


@_register
@dataclass(frozen=True)
class ToCategorical(Step):
    """Continuous to categorical through an exact value -> level map."""

    op: ClassVar[str] = "to_categorical"
    column: str
    mapping: tuple

    def __post_init__(self):
        pairs = tuple((float(k), str(v)) for k, v in _pairs(self.mapping))
        object.__setattr__(self, "mapping", pairs)

    def apply(self, table):
        x = _continuous(table, self.column)
        levels = list(dict.fromkeys(v for _, v in self.mapping))
        keys = np.asarray([k for k, _ in self.mapping])
        codes = np.asarray([levels.index(v) for _, v in self.mapping], dtype=np.int64)
        order = np.argsort(keys, kind="stable")
        keys, codes = keys[order], codes[order]
        pos = np.clip(np.searchsorted(keys, x), 0, len(keys) - 1)
        bad = np.flatnonzero(keys[pos] != x)
        if bad.size:
            raise TransformError(f"value {x[bad[0]]!r} of column {self.column!r} is not mapped", row=int(bad[0]))
        return _replace_column(table, self.column, Column(self.column, CATEGORICAL, tuple(levels)), codes[pos])

    def to_dict(self):
        d = super().to_dict()
        d["mapping"] = {_num_key(k): v for k, v in self.mapping}
        return d


def _num_key(k: float) -> str:
    return str(int(k)) if float(k).is_integer() else repr(k)


@_register
@dataclass(frozen=True)
class ToNumeric(Step):
    op: ClassVar[str] = "to_numeric"
    column: str
    mapping: tuple

    def __post_init__(self):
        object.__setattr__(self, "mapping", tuple((str(k), float(v)) for k, v in _pairs(self.mapping)))

    def apply(self, table):
        col = _categorical(table, self.column)
        m = dict(self.mapping)
        lut = np.array([m.get(lv, np.nan) for lv in col.levels], dtype=np.float64)
        x = table.data[self.column]
        out = lut[x]
        bad = np.flatnonzero(np.isnan(out))
        if bad.size:
            raise TransformError(f"level {col.levels[x[bad[0]]]!r} of column {self.column!r} is not mapped", row=int(bad[0]))
        return _replace_column(table, self.column, Column(self.column, CONTINUOUS), out)


@_register
@dataclass(frozen=True)
class RateFromCounts(Step):
    """Replace a count column by ``count / exposure`` under a new name."""

    op: ClassVar[str] = "rate_from_counts"
    count: str
    exposure: str
    rate: str

    def apply(self, table):
        c = _continuous(table, self.count)
        e = _continuous(table, self.exposure)
        bad = np.flatnonzero(e <= 0)
        if bad.size:
            raise TransformError(f"nonpositive exposure {e[bad[0]]!r} in column {self.exposure!r}", row=int(bad[0]))
        return _replace_column(table, self.count, Column(self.rate, CONTINUOUS), c / e)


@_register
@dataclass(frozen=True)
class CountsFromRate(Step):
    """Replace a rate column by ``round(rate * exposure)``, rounding half away from zero."""

    op: ClassVar[str] = "counts_from_rate"
    rate: str
    exposure: str
    count: str
    rounding: str = "nearest"

    def __post_init__(self):
        if self.rounding != "nearest":
            raise ConfigError(f"unsupported rounding {self.rounding!r}")

    def apply(self, table):
        r = _continuous(table, self.rate)
        e = _continuous(table, self.exposure)
        return _replace_column(table, self.rate, Column(self.count, CONTINUOUS), round_half_away(r * e))


def step_from_dict(d: Mapping) -> Step:
    d = dict(d)
    try:
        cls = _STEPS[d.pop("op")]
    except KeyError as exc:
        raise ConfigError(f"unknown or missing transform op: {exc}") from None
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for {cls.op}: {exc}") from None


def apply(steps: Sequence[Step], table: Table) -> Table:
    """Apply ``steps`` in order."""
    for step in steps:
        table = step.apply(table)
    return table


@dataclass(frozen=True)
class TransformPipeline:
    pre: tuple = ()
    post: tuple = ()
    name: str = ""

    def preprocess(self, table: Table) -> Table:
        return apply(self.pre, table)

    def postprocess(self, table: Table) -> Table:
        return apply(self.post, table)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "pre": [s.to_dict() for s in self.pre],
            "post": [s.to_dict() for s in self.post],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TransformPipeline":
        return cls(
            pre=tuple(step_from_dict(s) for s in d.get("pre", [])),
            post=tuple(step_from_dict(s) for s in d.get("post", [])),
            name=d.get("name", ""),
        )


SHIPPED = {"tpl": "tpl.recipe.json", "lapse": "lapse.recipe.json"}


def load_recipe(ref) -> TransformPipeline:
    """Load a recipe from a JSON path or one of the shipped names (``tpl``, ``lapse``)."""
    if isinstance(ref, str) and ref in SHIPPED:
        text = resources.files("tabsynth").joinpath("recipes", SHIPPED[ref]).read_text(encoding="utf-8")
    else:
        try:
            text = Path(ref).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read recipe {ref}: {exc}") from None
    try:
        return TransformPipeline.from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"recipe {ref}: invalid JSON ({exc})") from None


def save_recipe(pipeline: TransformPipeline, path) -> None:
    Path(path).write_text(json.dumps(pipeline.to_dict(), indent=2) + "\n", encoding="utf-8")


def tpl_recipe() -> TransformPipeline:
    return load_recipe("tpl")


def lapse_recipe() -> TransformPipeline:
    return load_recipe("lapse")
