"""Poisson GLM with log link and log-exposure offset, fitted by IRLS.

Categorical predictors are dummy coded against a reference level (the
first level observed in row order unless given explicitly); continuous
predictors enter linearly. No penalties and no variable selection.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, qr
from scipy.special import xlogy

from .errors import GlmError, ValidationError
from .table import Table

INTERCEPT = "(Intercept)"


@dataclass(frozen=True)
class Term:
    """One predictor's contribution: a continuous column, or a categorical column's dummies."""

    column: str
    kind: str
    reference: str | None = None
    levels: tuple = ()

    def labels(self) -> list[str]:
        if self.kind == "continuous":
            return [self.column]
        return [f"{self.column}[{lv}]" for lv in self.levels]

    def to_dict(self):
        return {"column": self.column, "kind": self.kind, "reference": self.reference, "levels": list(self.levels)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["column"], d["kind"], d.get("reference"), tuple(d.get("levels", ())))


@dataclass(frozen=True)
class Formula:
    response: str
    offset: str | None
    predictors: tuple

    def __post_init__(self):
        object.__setattr__(self, "predictors", tuple(self.predictors))

    def to_dict(self):
        return {"response": self.response, "offset": self.offset, "predictors": list(self.predictors)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["response"], d.get("offset"), tuple(d["predictors"]))


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    X: np.ndarray
    labels: tuple
    terms: tuple
    unseen: int = 0

    @property
    def shape(self):
        return self.X.shape


def _terms(table: Table, predictors, reference_levels) -> list[Term]:
    terms = []
    for name in predictors:
        col = table.schema[name]
        if not col.is_categorical:
            terms.append(Term(name, "continuous"))
            continue
        codes = table.data[name]
        _, first = np.unique(codes, return_index=True)
        observed = [col.levels[c] for c in codes[np.sort(first)]]
        ref = (reference_levels or {}).get(name)
        if ref is None:
            if not observed:
                raise ValidationError(f"categorical predictor {name!r} has no observations")
            ref = observed[0]
        others = tuple(lv for lv in observed if lv != ref)
        terms.append(Term(name, "categorical", ref, others))
    return terms


def design_from_terms(table: Table, terms) -> DesignMatrix:
    """Build the design for ``table`` using fitted terms; unseen levels fall back to the reference."""
    n = len(table)
    blocks, labels, unseen = [np.ones((n, 1))], [INTERCEPT], 0
    for t in terms:
        labels += t.labels()
        if t.kind == "continuous":
            col = table.schema[t.column]
            if col.is_categorical:
                raise ValidationError(f"predictor {t.column!r} was continuous at fit time")
            blocks.append(table.data[t.column][:, None])
            continue
        values = table.labels(t.column)
        block = np.zeros((n, len(t.levels)))
        pos = {lv: i for i, lv in enumerate(t.levels)}
        idx = np.array([pos.get(v, -1) for v in values], dtype=np.int64)
        missing = (idx < 0) & (values != t.reference)
        if missing.any():
            bad = sorted(set(values[missing]))
            warnings.warn(
                f"{int(missing.sum())} rows of {t.column!r} have levels unseen at fit time {bad}; "
                "mapped to reference level",
                stacklevel=2,
            )
            unseen += int(missing.sum())
        hit = idx >= 0
        block[np.flatnonzero(hit), idx[hit]] = 1.0
        blocks.append(block)
    return DesignMatrix(np.hstack(blocks), tuple(labels), tuple(terms), unseen)


def _check_rank(X: np.ndarray, labels) -> None:
    if X.shape[0] < X.shape[1]:
        raise GlmError(f"design has {X.shape[1]} columns but only {X.shape[0]} rows")
    scale = np.linalg.norm(X, axis=0)
    scale[scale == 0] = 1.0
    r = qr(X / scale, mode="r", check_finite=False)[0]
    d = np.abs(np.diag(r))
    bad = np.flatnonzero(d <= 1e-10 * max(d.max(), 1.0))
    if bad.size:
        names = [labels[i] for i in bad]
        raise GlmError(f"design matrix is rank deficient; collinear columns: {names}")


def build_design(table: Table, response: str, offset: str | None, predictors, reference_levels=None):
    """Return ``(design, y, log_offset)`` for a Poisson GLM."""
    rcol = table.schema[response]
    if rcol.is_categorical:
        raise ValidationError(f"response {response!r} must be a numeric count column")
    y = np.asarray(table.data[response], dtype=np.float64)
    bad = np.flatnonzero((y < 0) | (y != np.round(y)))
    if bad.size:
        raise ValidationError(f"response {response!r} must hold nonnegative integers (row {bad[0]}: {y[bad[0]]!r})")
    if offset is None:
        off = np.zeros(len(table))
    else:
        e = table.column(offset)
        bad = np.flatnonzero(e <= 0)
        if bad.size:
            raise ValidationError(f"offset column {offset!r} must be positive (row {bad[0]}: {e[bad[0]]!r})")
        off = np.log(e)
    design = design_from_terms(table, _terms(table, predictors, reference_levels))
    _check_rank(design.X, design.labels)
    return design, y, off


def poisson_deviance(y, mu) -> float:
    return float(2.0 * np.sum(xlogy(y, y / mu) - (y - mu)))


@dataclass(eq=False)
class GlmModel:
    coefficients: np.ndarray
    labels: tuple
    terms: tuple
    iterations: int
    deviance: float
    deviance_change: float
    converged: bool
    trace: list = field(default_factory=list)

    def coef(self, label: str) -> float:
        return float(self.coefficients[self.labels.index(label)])

    def to_dict(self) -> dict:
        return {
            "labels": list(self.labels),
            "coefficients": self.coefficients.tolist(),
            "terms": [t.to_dict() for t in self.terms],
            "convergence": {
                "iterations": self.iterations,
                "deviance": self.deviance,
                "deviance_change": self.deviance_change,
                "converged": self.converged,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d) -> "GlmModel":
        c = d["convergence"]
        return cls(
            np.asarray(d["coefficients"], dtype=np.float64),
            tuple(d["labels"]),
            tuple(Term.from_dict(t) for t in d["terms"]),
            c["iterations"],
            c["deviance"],
            c["deviance_change"],
            c["converged"],
        )


def fit_poisson(design: DesignMatrix, y, offset, max_iter: int = 50, tol: float = 1e-10, max_halvings: int = 10) -> GlmModel:
    """IRLS with step halving.

    Stops when ``|dev_new - dev_old| / (|dev_new| + 0.1) < tol``. A step that
    still increases the deviance after ``max_halvings`` halvings is rejected;
    three rejected steps in a row raise :class:`GlmError`. Hitting
    ``max_iter`` returns a model flagged ``converged=False``.
    """
    X = design.X
    y = np.asarray(y, dtype=np.float64)
    off = np.asarray(offset, dtype=np.float64)
    n, p = X.shape
    if y.shape != (n,) or off.shape != (n,):
        raise ValidationError("response and offset must match the design rows")
    beta = np.zeros(p)
    if design.labels and design.labels[0] == INTERCEPT:
        beta[0] = np.log(max(y.sum(), 0.5) / np.exp(off).sum())
    mu = np.exp(X @ beta + off)
    dev = poisson_deviance(y, mu)
    trace = [dev]
    change, converged, rejected, it = np.inf, False, 0, 0
    for it in range(1, max_iter + 1):
        eta = X @ beta + off
        z = eta - off + (y - mu) / mu
        XtW = X.T * mu
        try:
            target = cho_solve(cho_factor(XtW @ X, check_finite=False), XtW @ z, check_finite=False)
        except np.linalg.LinAlgError:
            raise GlmError(f"singular weighted normal equations at iteration {it}") from None
        step = target - beta
        for _ in range(max_halvings + 1):
            cand = beta + step
            mu_c = np.exp(X @ cand + off)
            dev_c = poisson_deviance(y, mu_c) if np.all(np.isfinite(mu_c)) else np.inf
            if dev_c <= dev * (1 + 1e-12) + 1e-12:
                break
            step = step / 2
        else:
            rejected += 1
            trace.append(dev_c)
            if rejected >= 3:
                raise GlmError(f"IRLS diverged: deviance increased on 3 consecutive damped steps; trace {trace}")
            continue
        rejected = 0
        change = abs(dev_c - dev) / (abs(dev_c) + 0.1)
        beta, mu, dev = cand, mu_c, dev_c
        trace.append(dev)
        if change < tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"IRLS did not converge in {max_iter} iterations (relative change {change:.3g})", stacklevel=2)
    return GlmModel(beta, design.labels, design.terms, it, dev, float(change), converged, trace)


def fit_formula(table: Table, formula: Formula, reference_levels=None) -> GlmModel:
    design, y, off = build_design(table, formula.response, formula.offset, formula.predictors, reference_levels)
    return fit_poisson(design, y, off)


def predict(model: GlmModel, design: DesignMatrix, offset) -> np.ndarray:
    """Expected counts ``exp(offset) * exp(X beta)``."""
    if tuple(design.labels) != tuple(model.labels):
        raise ValidationError("design columns do not match the fitted model")
    return np.exp(design.X @ model.coefficients + np.asarray(offset, dtype=np.float64))


def predict_table(model: GlmModel, table: Table, offset: str | None) -> np.ndarray:
    design = design_from_terms(table, model.terms)
    off = np.zeros(len(table)) if offset is None else np.log(table.column(offset))
    return predict(model, design, off)


def rmse(predicted, actual) -> float:
    predicted = np.asarray(predicted, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if predicted.shape != actual.shape:
        raise ValidationError(f"length mismatch: {predicted.shape} vs {actual.shape}")
    if predicted.size == 0:
        raise ValidationError("rmse of an empty vector")
    return float(np.sqrt(np.mean((predicted - actual) ** 2)))


def relativities(model: GlmModel, variable: str) -> dict[str, float]:
    """``exp(coefficient)`` per level of a categorical predictor; the reference level is 1."""
    for t in model.terms:
        if t.column == variable:
            if t.kind != "categorical":
                raise ValidationError(f"{variable!r} is not a categorical predictor")
            out = {t.reference: 1.0}
            for lv, label in zip(t.levels, t.labels()):
                out[lv] = float(np.exp(model.coef(label)))
            return out
    raise ValidationError(f"unknown variable {variable!r}")
