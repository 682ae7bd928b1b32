"""Cross-validated ML-efficacy study.

For each fold: the complement of the fold (the analysis set) is optionally
subsampled and used to train a synthesizer; a synthetic table of the same
size is generated and post-processed; one Poisson GLM is fitted on the real
analysis rows and one on the synthetic rows; both are scored by RMSE on the
held-out fold. The report aggregates per-fold metrics, marginal
distribution comparisons and relativity stability across folds.
"""

from __future__ import annotations

import csv
import json
import logging
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
from scipy.stats import ks_2samp

from . import __version__
from .errors import ConfigError, TabsynthError, ValidationError
from .gan import TrainConfig, generate, train
from .glm import Formula, GlmModel, fit_formula, predict_table, relativities, rmse
from .table import Table, analysis_assessment, kfold_split, subsample
from .transforms import TransformPipeline

log = logging.getLogger(__name__)

DECILES = tuple(round(0.1 * i, 1) for i in range(1, 10))


@dataclass(frozen=True)
class StudyConfig:
    recipe: TransformPipeline
    formula: Formula
    train: TrainConfig = field(default_factory=TrainConfig)
    k: int = 10
    seed: int = 0
    subsample_cap: int | None = 100_000
    match_full_size: bool = False
    workers: int = 1
    label: str = ""

    def __post_init__(self):
        if self.k < 2:
            raise ConfigError("k must be at least 2")
        if self.workers < 1:
            raise ConfigError("workers must be positive")

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "k": self.k,
            "seed": self.seed,
            "subsample_cap": self.subsample_cap,
            "match_full_size": self.match_full_size,
            "workers": self.workers,
            "formula": self.formula.to_dict(),
            "train": self.train.to_dict(),
            "recipe": self.recipe.to_dict(),
        }

    @classmethod
    def from_dict(cls, d, recipe: TransformPipeline | None = None) -> "StudyConfig":
        known = {"label", "k", "seed", "subsample_cap", "match_full_size", "workers", "formula", "train", "recipe"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown study config keys: {sorted(unknown)}")
        if recipe is None:
            if "recipe" not in d:
                raise ConfigError("study config needs a recipe")
            recipe = TransformPipeline.from_dict(d["recipe"])
        if "formula" not in d:
            raise ConfigError("study config needs a formula")
        return cls(
            recipe=recipe,
            formula=Formula.from_dict(d["formula"]),
            train=TrainConfig.from_dict(d.get("train", {})),
            k=d.get("k", 10),
            seed=d.get("seed", 0),
            subsample_cap=d.get("subsample_cap", 100_000),
            match_full_size=d.get("match_full_size", False),
            workers=d.get("workers", 1),
            label=d.get("label", ""),
        )


@dataclass(eq=False)
class FoldResult:
    index: int
    ok: bool
    error: str | None = None
    rmse_real: float | None = None
    rmse_syn: float | None = None
    model_real: GlmModel | None = None
    model_syn: GlmModel | None = None
    n_analysis: int = 0
    n_train: int = 0
    n_syn: int = 0
    n_assessment: int = 0
    unseen_levels: int = 0
    analysis_ids: np.ndarray | None = None
    assessment_ids: np.ndarray | None = None
    training_ids: np.ndarray | None = None
    distributions: dict = field(default_factory=dict)
    synthesizer: object = None
    synthetic: Table | None = None
    timings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "fold": self.index,
            "ok": self.ok,
            "error": self.error,
            "rmse_real": self.rmse_real,
            "rmse_syn": self.rmse_syn,
            "n_analysis": self.n_analysis,
            "n_train": self.n_train,
            "n_syn": self.n_syn,
            "n_assessment": self.n_assessment,
            "unseen_levels": self.unseen_levels,
            "glm_real": self.model_real.to_dict()["convergence"] if self.model_real else None,
            "glm_syn": self.model_syn.to_dict()["convergence"] if self.model_syn else None,
        }


@dataclass(eq=False)
class StudyReport:
    config: StudyConfig
    folds: list
    mean_rmse_real: float
    mean_rmse_syn: float
    relative_difference: float
    distributions: dict
    relativities: dict

    @property
    def failed(self) -> list[int]:
        return [f.index for f in self.folds if not f.ok]

    def to_dict(self) -> dict:
        return {
            "library_version": __version__,
            "label": self.config.label,
            "config": self.config.to_dict(),
            "folds": [f.to_dict() for f in self.folds],
            "failed_folds": self.failed,
            "mean_rmse_real": _finite_or_none(self.mean_rmse_real),
            "mean_rmse_syn": _finite_or_none(self.mean_rmse_syn),
            "relative_difference": _finite_or_none(self.relative_difference),
            "distributions": self.distributions,
            "relativities": self.relativities,
        }


def _finite_or_none(x):
    return float(x) if x is not None and np.isfinite(x) else None


def _fold_seeds(master: int, fold: int) -> tuple[int, int, int]:
    state = np.random.SeedSequence([master, fold]).generate_state(3)
    return int(state[0]), int(state[1]), int(state[2])


def reference_levels(table: Table, predictors) -> dict[str, str]:
    """First observed level of each categorical predictor, pinned across folds and datasets."""
    refs = {}
    for name in predictors:
        col = table.schema[name]
        if col.is_categorical and len(table):
            refs[name] = col.levels[int(table.data[name][0])]
    return refs


def _run_fold(pre: Table, model_space: Table, folds, index: int, config: StudyConfig, refs) -> FoldResult:
    t0 = time.perf_counter()
    s_sub, s_train, s_gen = _fold_seeds(config.seed, index)
    analysis, assessment = analysis_assessment(pre, folds, index)
    res = FoldResult(
        index,
        ok=False,
        n_analysis=len(analysis),
        n_assessment=len(assessment),
        analysis_ids=analysis.row_ids,
        assessment_ids=assessment.row_ids,
    )
    try:
        train_rows = subsample(analysis, config.subsample_cap, s_sub)
        res.training_ids = train_rows.row_ids
        res.n_train = len(train_rows)
        synth = train(train_rows, config.train.replace(seed=s_train, subsample_cap=None))
        t1 = time.perf_counter()
        res.n_syn = len(analysis) if config.match_full_size else len(train_rows)
        syn_pre = generate(synth, res.n_syn, s_gen)
        syn = config.recipe.postprocess(syn_pre)
        res.synthesizer, res.synthetic = synth, syn
        res.distributions = distribution_report(train_rows, syn_pre)

        real_rows = model_space.take(np.flatnonzero(folds.assignment != index))
        held_out = model_space.take(np.flatnonzero(folds.assignment == index))
        f = config.formula
        res.model_real = fit_formula(real_rows, f, refs)
        res.model_syn = fit_formula(syn, f, refs)
        for name, m in (("real", res.model_real), ("synthetic", res.model_syn)):
            if not m.converged:
                raise TabsynthError(f"GLM on {name} data did not converge")
        y = held_out.column(f.response)
        res.rmse_real = rmse(predict_table(res.model_real, held_out, f.offset), y)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            mu_syn = predict_table(res.model_syn, held_out, f.offset)
        res.unseen_levels = len(caught)
        for w in caught:
            log.warning("fold %d: %s", index, w.message)
        res.rmse_syn = rmse(mu_syn, y)
        res.ok = True
        res.timings = {"train_seconds": t1 - t0, "total_seconds": time.perf_counter() - t0}
    except TabsynthError as exc:
        res.error = f"{type(exc).__name__}: {exc}"
        res.timings = {"total_seconds": time.perf_counter() - t0}
        log.error("fold %d failed: %s", index, res.error)
    return res


def run_study(table: Table, config: StudyConfig) -> StudyReport:
    """Run the cross-validated efficacy study on a raw (not yet pre-processed) table."""
    pre = config.recipe.preprocess(table)
    model_space = config.recipe.postprocess(pre)
    for name in (config.formula.response, config.formula.offset, *config.formula.predictors):
        if name is not None and name not in model_space.schema:
            raise ConfigError(f"formula column {name!r} does not exist after the recipe")
    folds = kfold_split(pre, config.k, config.seed)
    refs = reference_levels(model_space, config.formula.predictors)
    args = [(pre, model_space, folds, i, config, refs) for i in range(config.k)]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_run_fold_args, args))
    else:
        results = [_run_fold(*a) for a in args]
    return assemble_report(results, config)


def _run_fold_args(args):
    return _run_fold(*args)


def assemble_report(results, config: StudyConfig) -> StudyReport:
    ok = [r for r in results if r.ok]
    if not ok:
        mean_real = mean_syn = rel = float("nan")
    else:
        mean_real = float(np.mean([r.rmse_real for r in ok]))
        mean_syn = float(np.mean([r.rmse_syn for r in ok]))
        rel = (mean_syn - mean_real) / mean_real
    dists = _summarize_distributions(ok)
    rels = relativity_report(ok) if len(ok) >= 2 else {}
    return StudyReport(config, list(results), mean_real, mean_syn, rel, dists, rels)


def distribution_report(real: Table, syn: Table) -> dict:
    """Per-column marginal comparison.

    Categorical columns: level proportions and total-variation distance.
    Continuous columns: deciles and the two-sample Kolmogorov-Smirnov statistic.
    """
    if [(c.name, c.kind) for c in real.schema] != [(c.name, c.kind) for c in syn.schema]:
        raise ValidationError("real and synthetic tables have different schemas")
    out = {}
    for col in real.schema:
        if col.is_categorical:
            levels = list(dict.fromkeys(list(col.levels) + list(syn.schema[col.name].levels)))
            p = _proportions(real, col.name, levels)
            q = _proportions(syn, col.name, levels)
            out[col.name] = {
                "kind": "categorical",
                "levels": levels,
                "real": p.tolist(),
                "synthetic": q.tolist(),
                "tv_distance": float(0.5 * np.abs(p - q).sum()),
            }
        else:
            x, y = real.data[col.name], syn.data[col.name]
            out[col.name] = {
                "kind": "continuous",
                "quantiles": list(DECILES),
                "real": np.quantile(x, DECILES).tolist(),
                "synthetic": np.quantile(y, DECILES).tolist(),
                "ks_statistic": float(ks_2samp(x, y).statistic),
            }
    return out


def _proportions(table: Table, name: str, levels) -> np.ndarray:
    labels = table.labels(name)
    counts = np.array([np.sum(labels == lv) for lv in levels], dtype=np.float64)
    return counts / max(len(table), 1)


def _summarize_distributions(results) -> dict:
    out = {}
    for r in results:
        for name, d in r.distributions.items():
            stat = d.get("tv_distance", d.get("ks_statistic"))
            entry = out.setdefault(
                name,
                {"kind": d["kind"], "statistic": "tv_distance" if d["kind"] == "categorical" else "ks_statistic", "per_fold": {}},
            )
            entry["per_fold"][str(r.index)] = stat
    for entry in out.values():
        vals = list(entry["per_fold"].values())
        entry["mean"] = float(np.mean(vals))
        entry["max"] = float(np.max(vals))
    return out


def relativity_report(results) -> dict:
    """Across-fold mean and variance of each categorical level's relativity, real vs synthetic.

    Levels a fold's model did not estimate are skipped for that fold. The
    variance ratio (synthetic / real) is reported, not judged.
    """
    results = [r for r in results if r.ok]
    if len(results) < 2:
        raise ValidationError("relativity report needs at least two successful folds")
    variables = [t.column for t in results[0].model_real.terms if t.kind == "categorical"]
    out = {}
    for var in variables:
        per = {"real": [], "synthetic": []}
        for r in results:
            try:
                per["real"].append(relativities(r.model_real, var))
                per["synthetic"].append(relativities(r.model_syn, var))
            except ValidationError:
                raise ValidationError(f"variable {var!r} missing from fold {r.index}") from None
        levels = list(dict.fromkeys(lv for side in per.values() for rel in side for lv in rel))
        rows = []
        for lv in levels:
            row = {"level": lv}
            for side, rels in per.items():
                vals = np.array([rel[lv] for rel in rels if lv in rel])
                row[f"{side}_mean"] = float(vals.mean()) if vals.size else None
                row[f"{side}_variance"] = float(vals.var(ddof=1)) if vals.size >= 2 else None
                row[f"{side}_folds"] = int(vals.size)
            rv, sv = row["real_variance"], row["synthetic_variance"]
            row["variance_ratio"] = sv / rv if rv and sv is not None else None
            rows.append(row)
        out[var] = rows
    return out


def format_relative_difference(rel: float) -> str:
    return f"{100 * rel:.2f}%"


def metrics_table(report: StudyReport, label: str | None = None) -> list[tuple]:
    """Rows of (dataset label, mean RMSE real, mean RMSE synthetic, relative difference)."""
    label = label if label is not None else (report.config.label or "study")
    return [(label, report.mean_rmse_real, report.mean_rmse_syn, format_relative_difference(report.relative_difference))]


# -- report directory -------------------------------------------------------


def report_schema() -> dict:
    return json.loads(resources.files("tabsynth").joinpath("schemas", "report.schema.json").read_text())


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def write_report(report: StudyReport, out_dir, save_synthesizers: bool = True) -> Path:
    """Persist the report directory; returns its path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(_dump(report.to_dict()))
    with open(out / "metrics.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["dataset", "mean_rmse_real", "mean_rmse_synthetic", "relative_difference"])
        for label, a, b, rel in metrics_table(report):
            w.writerow([label, repr(a), repr(b), rel])

    ddir = out / "distributions"
    ddir.mkdir(exist_ok=True)
    names = report.distributions.keys()
    for name in names:
        with open(ddir / f"{name}.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["fold", "kind", "key", "real", "synthetic", "statistic"])
            for r in report.folds:
                d = r.distributions.get(name)
                if not r.ok or d is None:
                    continue
                keys = d["levels"] if d["kind"] == "categorical" else d["quantiles"]
                stat = d.get("tv_distance", d.get("ks_statistic"))
                for key, a, b in zip(keys, d["real"], d["synthetic"]):
                    w.writerow([r.index, d["kind"], key, repr(a), repr(b), repr(stat)])

    rdir = out / "relativities"
    rdir.mkdir(exist_ok=True)
    cols = ["level", "real_mean", "real_variance", "synthetic_mean", "synthetic_variance", "variance_ratio", "real_folds", "synthetic_folds"]
    for var, rows in report.relativities.items():
        with open(rdir / f"{var}.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(cols)
            for row in rows:
                w.writerow(["" if row[c] is None else (repr(row[c]) if isinstance(row[c], float) else row[c]) for c in cols])

    for r in report.folds:
        fdir = out / "folds" / f"fold_{r.index}"
        fdir.mkdir(parents=True, exist_ok=True)
        if r.model_real is not None:
            (fdir / "model_real.json").write_text(_dump(r.model_real.to_dict()))
        if r.model_syn is not None:
            (fdir / "model_syn.json").write_text(_dump(r.model_syn.to_dict()))
        if save_synthesizers and r.synthesizer is not None:
            r.synthesizer.save(fdir / "synthesizer.synth")
    return out


def validate_report_dir(path) -> dict:
    """Check the report directory layout and validate ``report.json`` against its JSON schema."""
    path = Path(path)
    try:
        doc = json.loads((path / "report.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"missing or corrupt report.json in {path}: {exc}") from None
    try:
        jsonschema.validate(doc, report_schema())
    except jsonschema.ValidationError as exc:
        raise ValidationError(f"report.json does not match its schema: {exc.message}") from None
    if not (path / "metrics.csv").is_file():
        raise ValidationError("metrics.csv missing")
    for name in doc["distributions"]:
        if not (path / "distributions" / f"{name}.csv").is_file():
            raise ValidationError(f"distributions/{name}.csv missing")
    for var in doc["relativities"]:
        if not (path / "relativities" / f"{var}.csv").is_file():
            raise ValidationError(f"relativities/{var}.csv missing")
    for fold in doc["folds"]:
        if fold["ok"] and not (path / "folds" / f"fold_{fold['fold']}" / "model_real.json").is_file():
            raise ValidationError(f"model files for fold {fold['fold']} missing")
    return doc
