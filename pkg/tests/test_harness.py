import json

import numpy as np
import pytest

from conftest import QUICK_TRAIN, make_toy_claims, toy_study_config
from tabsynth import harness
from tabsynth.errors import ConfigError, TrainingError, ValidationError
from tabsynth.harness import (
    FoldResult,
    StudyConfig,
    assemble_report,
    distribution_report,
    format_relative_difference,
    metrics_table,
    relativity_report,
    run_study,
    validate_report_dir,
    write_report,
)
from tabsynth.glm import GlmModel, Term
from tabsynth.table import CATEGORICAL, CONTINUOUS, Column, Schema, Table


@pytest.fixture(scope="module")
def claims():
    return make_toy_claims(1500, seed=2)


@pytest.fixture(scope="module")
def quick_report(claims):
    return run_study(claims, StudyConfig.from_dict(toy_study_config(train=QUICK_TRAIN)))


class TestStudyConfig:
    def test_round_trip(self):
        cfg = StudyConfig.from_dict(toy_study_config(train=QUICK_TRAIN))
        assert StudyConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            StudyConfig.from_dict({**toy_study_config(), "folds": 3})

    def test_k_below_two(self):
        with pytest.raises(ConfigError):
            StudyConfig.from_dict(toy_study_config(k=1))

    def test_formula_column_must_exist(self, claims):
        d = toy_study_config(train=QUICK_TRAIN)
        d["formula"] = {**d["formula"], "predictors": ["c", "nope"]}
        with pytest.raises(ConfigError, match="nope"):
            run_study(claims, StudyConfig.from_dict(d))


class TestRunStudy:
    def test_structure(self, quick_report, claims):
        r = quick_report
        assert len(r.folds) == 5
        assert r.failed == []
        assert sum(f.n_assessment for f in r.folds) == len(claims)
        assert np.isfinite([r.mean_rmse_real, r.mean_rmse_syn, r.relative_difference]).all()
        assert r.mean_rmse_real == pytest.approx(np.mean([f.rmse_real for f in r.folds]))

    def test_folds_are_disjoint(self, quick_report, claims):
        n = len(claims)
        seen = []
        for f in quick_report.folds:
            assert set(f.assessment_ids).isdisjoint(f.analysis_ids)
            assert set(f.training_ids) <= set(f.analysis_ids)
            assert len(f.analysis_ids) + len(f.assessment_ids) == n
            seen.extend(f.assessment_ids.tolist())
        assert sorted(seen) == list(range(n))

    def test_synthetic_matches_training_size(self, quick_report):
        for f in quick_report.folds:
            assert f.n_syn == f.n_train == len(f.synthetic)

    def test_subsample_cap(self, claims):
        d = toy_study_config(train=QUICK_TRAIN, subsample_cap=500)
        r = run_study(claims, StudyConfig.from_dict(d))
        assert all(f.n_train == 500 and f.n_syn == 500 for f in r.folds)
        d["match_full_size"] = True
        r = run_study(claims, StudyConfig.from_dict(d))
        assert all(f.n_train == 500 and f.n_syn == f.n_analysis for f in r.folds)

    def test_reference_levels_pinned(self, quick_report):
        refs = {f.model_real.terms[0].reference for f in quick_report.folds}
        refs |= {f.model_syn.terms[0].reference for f in quick_report.folds}
        assert len(refs) == 1

    def test_deterministic(self, quick_report, claims):
        again = run_study(claims, StudyConfig.from_dict(toy_study_config(train=QUICK_TRAIN)))
        assert again.to_dict() == quick_report.to_dict()

    def test_failed_fold_is_reported(self, claims, monkeypatch):
        real_train = harness.train
        calls = []

        def flaky(table, config, **kw):
            calls.append(1)
            if len(calls) == 2:
                raise TrainingError("non-finite critic loss at epoch 0")
            return real_train(table, config, **kw)

        monkeypatch.setattr(harness, "train", flaky)
        r = run_study(claims, StudyConfig.from_dict(toy_study_config(train=QUICK_TRAIN)))
        assert r.failed == [1]
        assert "non-finite" in r.folds[1].error
        assert r.mean_rmse_real == pytest.approx(np.mean([f.rmse_real for f in r.folds if f.ok]))


class TestDistributionReport:
    def table(self, codes, x):
        schema = Schema([Column("c", CATEGORICAL, ("a", "b")), Column("x", CONTINUOUS)])
        return Table(schema, {"c": codes, "x": x})

    def test_identical(self):
        t = self.table([0, 1, 1, 0], [1.0, 2.0, 3.0, 4.0])
        d = distribution_report(t, t)
        assert d["c"]["tv_distance"] == 0.0
        assert d["x"]["ks_statistic"] == 0.0

    def test_tv_shift(self):
        real = self.table([0] * 5 + [1] * 5, np.zeros(10))
        syn = self.table([0] * 6 + [1] * 4, np.zeros(10))
        assert distribution_report(real, syn)["c"]["tv_distance"] == pytest.approx(0.1)

    def test_ks(self):
        real = self.table([0, 0, 0, 0], [1.0, 2.0, 3.0, 4.0])
        syn = self.table([0, 0, 0, 0], [3.0, 4.0, 5.0, 6.0])
        assert distribution_report(real, syn)["x"]["ks_statistic"] == pytest.approx(0.5)

    def test_schema_mismatch(self):
        t = self.table([0], [1.0])
        other = Table(Schema([Column("c", CATEGORICAL, ("a",))]), {"c": [0]})
        with pytest.raises(ValidationError):
            distribution_report(t, other)


def fake_fold(index, coef_real, coef_syn, rmse_real=1.0, rmse_syn=1.0):
    term = (Term("g", "categorical", "a", ("b",)),)

    def model(b):
        return GlmModel(np.array([0.0, b]), ("(Intercept)", "g[b]"), term, 1, 0.0, 0.0, True)

    return FoldResult(index, True, rmse_real=rmse_real, rmse_syn=rmse_syn, model_real=model(coef_real), model_syn=model(coef_syn))


class TestRelativityReport:
    def test_identical_models(self):
        rows = relativity_report([fake_fold(i, 0.3, 0.3) for i in range(4)])["g"]
        for row in rows:
            assert row["real_variance"] == 0.0 and row["synthetic_variance"] == 0.0

    def test_reference_level(self):
        rows = relativity_report([fake_fold(i, 0.1 * i, -0.2 * i) for i in range(4)])["g"]
        ref = next(r for r in rows if r["level"] == "a")
        assert (ref["real_mean"], ref["real_variance"]) == (1.0, 0.0)
        assert (ref["synthetic_mean"], ref["synthetic_variance"]) == (1.0, 0.0)

    def test_mean_and_variance(self):
        rows = relativity_report([fake_fold(i, np.log(v), 0.0) for i, v in enumerate([1.0, 2.0, 3.0])])["g"]
        b = next(r for r in rows if r["level"] == "b")
        assert b["real_mean"] == pytest.approx(2.0)
        assert b["real_variance"] == pytest.approx(1.0)
        assert b["variance_ratio"] == 0.0


class TestMetrics:
    @pytest.mark.parametrize(
        "real, syn, text",
        [(0.23672, 0.24195, "2.21%"), (4.00381, 4.02034, "0.41%"), (1.5, 1.5, "0.00%")],
    )
    def test_relative_difference(self, real, syn, text):
        cfg = StudyConfig.from_dict(toy_study_config())
        folds = [fake_fold(0, 0.0, 0.0, real, syn), fake_fold(1, 0.0, 0.0, real, syn)]
        report = assemble_report(folds, cfg)
        assert metrics_table(report) == [("toy", pytest.approx(real), pytest.approx(syn), text)]

    def test_format(self):
        assert format_relative_difference(-0.01234) == "-1.23%"


class TestReportDirectory:
    def test_write_and_validate(self, quick_report, tmp_path):
        write_report(quick_report, tmp_path / "study")
        doc = validate_report_dir(tmp_path / "study")
        assert len(doc["folds"]) == 5
        lines = (tmp_path / "study" / "metrics.csv").read_text().splitlines()
        assert len(lines) == 2 and lines[1].startswith("toy,")
        assert (tmp_path / "study" / "distributions" / "x.csv").is_file()
        assert (tmp_path / "study" / "relativities" / "c.csv").is_file()
        assert (tmp_path / "study" / "folds" / "fold_0" / "synthesizer.synth").is_file()

    def test_no_timings_in_report(self, quick_report, tmp_path):
        write_report(quick_report, tmp_path / "study", save_synthesizers=False)
        assert "seconds" not in (tmp_path / "study" / "report.json").read_text()
        assert not (tmp_path / "study" / "folds" / "fold_0" / "synthesizer.synth").exists()

    def test_corrupt_report(self, quick_report, tmp_path):
        write_report(quick_report, tmp_path / "study", save_synthesizers=False)
        doc = json.loads((tmp_path / "study" / "report.json").read_text())
        doc["folds"][0]["fold"] = "zero"
        (tmp_path / "study" / "report.json").write_text(json.dumps(doc))
        with pytest.raises(ValidationError, match="schema"):
            validate_report_dir(tmp_path / "study")

    def test_empty_dir(self, tmp_path):
        with pytest.raises(ValidationError):
            validate_report_dir(tmp_path)
