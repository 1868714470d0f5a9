import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ktdrift import harness
from ktdrift.harness import (
    SEARCH_RANGES,
    EvalRecord,
    ModelSpec,
    aggregate_report,
    build_validation_sample,
    draw_hyperparams,
    expected_record_counts,
    job_seed,
    read_records_csv,
    records_to_csv,
    run_cross_year,
    run_matrix,
    run_within_year,
    tune_hyperparams,
    write_report,
)
from ktdrift.logstore import sample_assignment_logs
from ktdrift.models.deep import Hyperparams

TINY = Hyperparams(8, 8, 8, 1, 0.1, 1e-2, reg_lambda=1e-5, num_heads=2, learn_decay_rate=0.9)


@pytest.fixture(scope="module")
def samples(small_world):
    _, stores = small_world
    return {s.year_label: sample_assignment_logs(s, 3, 12, seed=i) for i, s in enumerate(stores)}


def test_spec_defaults_and_validation():
    assert ModelSpec("DKT").hyper.d_model == 96
    assert ModelSpec("BKT").hyper is None
    with pytest.raises(ValueError):
        ModelSpec("IRT")


def test_record_rejects_backwards_evaluation():
    with pytest.raises(ValueError):
        EvalRecord("BKT", "2020-2021", "2019-2020", -1, 0, 0, 0.5, 0.5, 0.5, 1)


def test_job_seed_is_stable_and_distinct():
    assert job_seed(1, "BKT", "2019-2020", 0) == job_seed(1, "BKT", "2019-2020", 0)
    assert len({job_seed(1, f, 0) for f in ("BKT", "PFA", "DKT")}) == 3
    assert job_seed(1, "x") != job_seed(2, "x")


def test_within_year_counts_and_pooling(samples):
    year = sorted(samples)[0]
    recs = run_within_year(samples[year], ModelSpec("BKT"), test_mode=True)
    assert len(recs) == 3 * 2
    assert {(r.train_sample, r.eval_sample) for r in recs} == {(i, j) for i in range(3) for j in range(3) if i != j}
    by_id = {s.sample_id: s for s in samples[year]}
    for r in recs:
        assert r.years_between == 0 and r.n_interactions == len(by_id[r.eval_sample].rows)
    with pytest.raises(ValueError, match="10 samples"):
        run_within_year(samples[year], ModelSpec("BKT"))


def test_cross_year_round_robin_and_reuse(samples):
    years = sorted(samples)
    later = {y: samples[y] for y in years[1:]}
    cache = {}
    within = run_within_year(samples[years[0]], ModelSpec("PFA"), test_mode=True, models=cache)
    n_models = len(cache)
    recs = run_cross_year(samples[years[0]], later, ModelSpec("PFA"), models=cache)
    assert len(cache) == n_models == 3  # no refits
    assert len(recs) == 3 * 2
    assert {r.years_between for r in recs} == {1, 2}
    assert all(r.eval_sample == r.train_sample % 3 for r in recs)
    assert run_cross_year(samples[years[-1]], {}, ModelSpec("PFA")) == []
    with pytest.raises(ValueError):
        run_cross_year(samples[years[1]], {years[0]: samples[years[0]]}, ModelSpec("PFA"))


@given(st.integers(1, 6), st.integers(2, 10), st.integers(1, 5))
def test_expected_counts_formula(n_years, n_samples, n_families):
    within, cross = expected_record_counts(n_years, n_samples, n_families)
    assert within == n_families * n_years * n_samples * (n_samples - 1)
    assert cross == n_families * n_samples * n_years * (n_years - 1) // 2
    if n_samples == 10:
        assert within // (n_families * n_years) == 90


def test_five_year_cross_counts():
    assert expected_record_counts(5, 10, 1)[1] == 10 * (4 + 3 + 2 + 1)


def test_matrix_order_counts_and_determinism(samples):
    specs = [ModelSpec("BKT"), ModelSpec("DKT", TINY, seed=3)]
    a = run_matrix(samples, specs, test_mode=True)
    within, cross = expected_record_counts(3, 3, 2)
    assert len(a) == within + cross == 36 + 18
    assert sum(r.years_between == 0 for r in a) == 36
    assert a == sorted(a, key=EvalRecord.sort_key)
    assert all(r.eval_year >= r.train_year for r in a)
    b = run_matrix(samples, specs, test_mode=True)
    assert records_to_csv(a) == records_to_csv(b)


def test_matrix_parallel_matches_serial(samples):
    specs = [ModelSpec("PFA")]
    assert run_matrix(samples, specs, workers=2, test_mode=True) == run_matrix(samples, specs, test_mode=True)


def test_records_csv_roundtrip(tmp_path, samples):
    recs = run_matrix(samples, [ModelSpec("BKT")], test_mode=True)
    text = records_to_csv(recs)
    assert text.splitlines()[0] == "family,train_year,eval_year,years_between,train_sample,eval_sample,auc,log_loss,f1,n_interactions"
    (tmp_path / "r.csv").write_text(text)
    assert read_records_csv(tmp_path / "r.csv") == recs


def test_model_save_load_roundtrip(tmp_path, samples):
    s = samples[sorted(samples)[0]][0]
    for fam, suffix in (("BKT", "json"), ("PFA", "json"), ("SAKT-KC", "ktm")):
        m = harness.fit_model(ModelSpec(fam, TINY if fam == "SAKT-KC" else None), s, seed=1)
        path = tmp_path / f"m.{suffix}"
        harness.save_model(m, path)
        back = harness.load_model(path)
        a, b = harness.score(m, s), harness.score(back, s)
        np.testing.assert_allclose(a.scores, b.scores, rtol=1e-15)


# -- tuning -------------------------------------------------------------------------

@given(st.sampled_from(["DKT", "SAKT-KC", "SAKT-E"]),
       st.lists(st.floats(0, 1, exclude_max=True), min_size=8, max_size=8))
def test_drawn_hyperparameters_in_range(family, u):
    h = draw_hyperparams(family, u)
    assert 20 <= h.num_steps <= 100 and 16 <= h.batch_size <= 64 and 64 <= h.d_model <= 512
    assert 0.1 <= h.dropout_rate <= 0.5 and 1e-4 <= h.learn_rate <= 1e-2
    if family == "DKT":
        assert 100 <= h.num_epochs <= 300 and 1e-6 <= h.reg_lambda <= 1e-2 and h.num_heads is None
    else:
        assert 10 <= h.num_epochs <= 40 and h.num_heads in SEARCH_RANGES["num_heads"]
        assert h.d_model % h.num_heads == 0 and 0.7 <= h.learn_decay_rate <= 0.99


def test_tune_single_trial_and_determinism(small_world):
    _, stores = small_world
    val = build_validation_sample(stores, 40, seed=0)
    assert len(val.assignment_log_ids) == 40
    ranges = {"num_steps": (8, 12), "batch_size": (8, 16), "d_model": (8, 16), "num_epochs": {"DKT": (1, 2), "SAKT": (1, 2)}}
    best, trials = tune_hyperparams("SAKT-KC", val, n_trials=1, seed=0, ranges=ranges)
    assert len(trials) == 1 and best == trials[0].hyper and len(trials[0].fold_aucs) == 4
    again, trials2 = tune_hyperparams("SAKT-KC", val, n_trials=2, seed=0, ranges=ranges, max_train_epochs=1)
    assert trials2[0].hyper == trials[0].hyper
    assert again == max(trials2, key=lambda t: t.mean_auc).hyper
    with pytest.raises(ValueError):
        tune_hyperparams("SAKT-KC", val, n_trials=0)
    with pytest.raises(ValueError):
        tune_hyperparams("BKT", val)


def test_student_folds_partition_students(small_world):
    _, stores = small_world
    val = build_validation_sample(stores, 30, seed=1)
    folds, fold_of = harness._student_folds(val, 4, 0)
    assert sum(len(f) for f in folds) == len(val.rows)
    for f, rows in enumerate(folds):
        assert all(fold_of[r.student_id] == f for r in rows)


# -- reporting -----------------------------------------------------------------------

def rec(fam, yb, k, auc):
    return EvalRecord(fam, "2019-2020", f"{2019 + yb}-{2020 + yb}", yb, k, k, auc, 1 - auc, auc, 10)


def test_report_spearman_and_groups(tmp_path):
    recs = [rec("BKT", yb, k, 0.8 - 0.05 * yb + 0.001 * k) for yb in (0, 1) for k in range(3)]
    recs += [rec("DKT", yb, k, 0.7 - 0.02 * yb + 0.002 * k) for yb in (0, 1) for k in range(3)]
    rep = aggregate_report(recs)
    assert [(g["family"], g["years_between"], g["n"]) for g in rep.groups] == [
        ("BKT", 0, 3), ("BKT", 1, 3), ("DKT", 0, 3), ("DKT", 1, 3)]
    assert rep.groups[0]["auc"][0] == pytest.approx(0.801)
    assert rep.spearman["BKT"]["auc"]["rho"] < 0 and rep.spearman["BKT"]["log_loss"]["rho"] > 0
    assert set(rep.regressions) == {"auc", "log_loss", "f1"}
    assert "quasi-random" in rep.meta["tuner"]
    write_report(rep, recs, tmp_path)
    doc = json.loads((tmp_path / "report.json").read_text())
    assert doc["regressions"]["auc"]["names"][:3] == ["Years Between (YB)", "BKT", "DKT"]
    assert "Regression results for auc" in (tmp_path / "report.txt").read_text()
    assert read_records_csv(tmp_path / "records.csv") == recs


def test_report_strictly_decreasing_gives_rho_minus_one():
    recs = [rec("PFA", 0, 0, 0.8), rec("PFA", 1, 0, 0.7), rec("PFA", 1, 1, 0.7), rec("PFA", 0, 1, 0.8)]
    assert aggregate_report(recs).spearman["PFA"]["auc"]["rho"] == pytest.approx(-1.0)


def test_report_warns_on_missing_family_and_degenerate_inputs():
    recs = [rec("BKT", 0, k, 0.7 + 0.01 * k) for k in range(3)]
    rep = aggregate_report(recs, families=["BKT", "SAKT-E"])
    assert any("SAKT-E" in w for w in rep.warnings)
    assert any("regression" in w for w in rep.warnings)  # one years-between value only
    assert [g["family"] for g in rep.groups] == ["BKT"]
    with pytest.raises(ValueError):
        aggregate_report([])
