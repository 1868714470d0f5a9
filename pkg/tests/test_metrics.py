import json
import math

import numpy as np
import pytest
import scipy.special
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ktdrift.harness import EvalRecord
from ktdrift.metrics import (
    YB,
    ScoredLabels,
    auc,
    betainc,
    f1_score,
    fixed_effects_design,
    log_loss,
    mean_ci,
    midranks,
    ols,
    ols_fixed_effects,
    spearman,
    t_ppf,
    t_sf_two_sided,
)

FAMILIES = ("BKT", "PFA", "DKT", "SAKT-E", "SAKT-KC")
# fitted AUC model used as a noiseless generator
REFERENCE_AUC_MODEL = {"BKT": 0.842, "PFA": 0.729, "DKT": 0.743, "SAKT-E": 0.921, "SAKT-KC": 0.879, YB: -0.010,
          "YB×PFA": -4.95e-3, "YB×DKT": -9.70e-3, "YB×SAKT-E": -0.039, "YB×SAKT-KC": -0.018}


def brute_auc(labels, scores):
    pos, neg = scores[labels == 1], scores[labels == 0]
    diff = pos[:, None] - neg[None, :]
    return ((diff > 0).sum() + 0.5 * (diff == 0).sum()) / (len(pos) * len(neg))


def records_from(generator, noise=0.0, seed=0, n_rep=4):
    rng = np.random.default_rng(seed)
    recs = []
    for fam in FAMILIES:
        for yb in range(5):
            for k in range(n_rep):
                v = generator[fam] + yb * (generator[YB] + generator.get(f"YB×{fam}", 0.0))
                v += noise * rng.normal()
                recs.append(EvalRecord(fam, f"{2019}-2020", f"{2019 + yb}-{2020 + yb}", yb, k, k, v, 1 - v, v, 10))
    return recs


# -- classification metrics ---------------------------------------------------------

def test_auc_examples():
    assert auc(ScoredLabels([0, 1], [0.2, 0.8])) == 1.0
    assert auc(ScoredLabels([0, 1, 1, 0], [0.4] * 4)) == 0.5
    with pytest.raises(ValueError):
        auc(ScoredLabels([1, 1], [0.1, 0.2]))


def test_auc_matches_brute_force_with_ties():
    rng = np.random.default_rng(0)
    labels = rng.integers(2, size=1000)
    scores = np.round(rng.random(1000), 2)  # plenty of ties
    assert abs(auc(ScoredLabels(labels, scores)) - brute_auc(labels, scores)) < 1e-12


labels_scores = st.integers(2, 60).flatmap(lambda n: st.tuples(
    hnp.arrays(np.int64, n, elements=st.integers(0, 1)).filter(lambda y: 0 < y.sum() < len(y)),
    hnp.arrays(np.float64, n, elements=st.integers(0, 64).map(lambda k: k / 64)),  # exact grid
))


@given(labels_scores)
def test_auc_properties(data):
    y, s = data
    a = auc(ScoredLabels(y, s))
    assert abs(a - brute_auc(y, s)) < 1e-12
    assert abs(a + auc(ScoredLabels(y, 1 - s)) - 1.0) < 1e-12  # ties stay ties under 1 - s
    assert abs(a - auc(ScoredLabels(y, s ** 3))) < 1e-12


def test_midranks():
    np.testing.assert_array_equal(midranks([3.0, 1.0, 3.0, 2.0]), [3.5, 1.0, 3.5, 2.0])


def test_log_loss_examples():
    assert log_loss(ScoredLabels([1], [1.0])) == pytest.approx(1e-7, rel=1e-3)
    assert log_loss(ScoredLabels([0, 1], [0.5, 0.5])) == pytest.approx(math.log(2))
    assert log_loss(ScoredLabels([1], [0.0])) == pytest.approx(math.log(1e7), rel=1e-9)
    with pytest.raises(ValueError):
        log_loss(ScoredLabels([], []))


@given(labels_scores)
def test_log_loss_non_negative(data):
    assert log_loss(ScoredLabels(*data)) >= 0.0


def test_f1_examples():
    assert f1_score(ScoredLabels([1, 0, 1], [0.9, 0.1, 0.5])) == 1.0
    assert f1_score(ScoredLabels([1, 1, 0], [0.1, 0.2, 0.3])) == 0.0
    data = ScoredLabels([1, 1, 0, 1, 0], [0.9, 0.8, 0.7, 0.2, 0.1])  # TP=2, FP=1, FN=1
    assert f1_score(data) == pytest.approx(2 / 3)


def test_scored_labels_validation():
    with pytest.raises(ValueError):
        ScoredLabels([1, 0], [0.5])
    with pytest.raises(ValueError):
        ScoredLabels([1], [1.5])


# -- distributions --------------------------------------------------------------------

@given(st.floats(0.05, 200), st.floats(0.05, 200), st.floats(0, 1))
def test_betainc_matches_scipy(a, b, x):
    assert betainc(a, b, x) == pytest.approx(scipy.special.betainc(a, b, x), rel=1e-9, abs=1e-13)


@given(st.floats(-60, 60), st.integers(1, 400))
def test_t_tail_matches_scipy(t, df):
    assert t_sf_two_sided(t, df) == pytest.approx(2 * scipy.stats.t.sf(abs(t), df), rel=1e-8, abs=1e-300)


@pytest.mark.parametrize("q,df", [(0.975, 1), (0.975, 10), (0.995, 3), (0.6, 50), (0.01, 7)])
def test_t_ppf_matches_scipy(q, df):
    assert t_ppf(q, df) == pytest.approx(scipy.stats.t.ppf(q, df), rel=1e-10)


def test_mean_ci_examples():
    m, lo, hi = mean_ci([0.0, 1.0])
    assert m == 0.5 and hi - m == pytest.approx(6.353102368087, rel=1e-9)
    assert mean_ci([0.3, 0.3, 0.3]) == (pytest.approx(0.3), pytest.approx(0.3), pytest.approx(0.3))
    v = [0.1, 0.4, 0.35, 0.2]
    assert mean_ci(v, 0.99)[2] - mean_ci(v, 0.99)[1] > mean_ci(v, 0.95)[2] - mean_ci(v, 0.95)[1]
    with pytest.raises(ValueError):
        mean_ci([1.0])


# -- spearman --------------------------------------------------------------------

def test_spearman_examples():
    assert spearman([1, 2, 3], [3, 6, 9]) == (1.0, 0.0)
    assert spearman([0, 0, 1, 1], [0.9, 0.8, 0.7, 0.6])[0] == pytest.approx(-math.sqrt(0.8))
    assert spearman([1, 2, 3, 4], [4, 3, 2, 1])[0] == -1.0
    with pytest.raises(ValueError):
        spearman([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        spearman([1, 2], [1, 2])


@settings(max_examples=50)
@given(st.integers(4, 40).flatmap(lambda n: st.tuples(
    hnp.arrays(np.float64, n, elements=st.integers(-5, 5).map(float)),
    hnp.arrays(np.float64, n, elements=st.floats(-10, 10)),
)))
def test_spearman_matches_scipy_and_symmetry(data):
    x, y = data
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return
    rho, p = spearman(x, y)
    ref = scipy.stats.spearmanr(x, y)
    assert rho == pytest.approx(ref.statistic, abs=1e-12)
    if abs(rho) < 1:
        assert p == pytest.approx(ref.pvalue, rel=1e-7, abs=1e-14)
    assert spearman(y, x)[0] == pytest.approx(rho, abs=1e-14)
    assert spearman(np.exp(x), y)[0] == pytest.approx(rho, abs=1e-14)


# -- regression ----------------------------------------------------------------------

def test_design_layout():
    X, names = fixed_effects_design(["BKT", "DKT", "DKT"], [0, 1, 2], family_order=["BKT", "DKT"])
    assert names == [YB, "BKT", "DKT", "YB×DKT"]
    np.testing.assert_array_equal(X, [[0, 1, 0, 0], [1, 0, 1, 1], [2, 0, 1, 2]])


def test_noiseless_generator_recovered_exactly():
    res = ols_fixed_effects(records_from(REFERENCE_AUC_MODEL), "auc", family_order=FAMILIES)
    assert res.names == [YB, *FAMILIES, "YB×PFA", "YB×DKT", "YB×SAKT-E", "YB×SAKT-KC"]
    for n, e in zip(res.names, res.estimates):
        assert abs(e - REFERENCE_AUC_MODEL[n]) < 1e-8
    assert res.adj_r2 == pytest.approx(1.0, abs=1e-12)


def test_single_family_line():
    recs = [EvalRecord("BKT", "2019-2020", f"{2019 + y}-x", y, k, k, 0.8 - 0.01 * y, 0.5, 0.7, 5)
            for y in range(4) for k in range(3)]
    res = ols_fixed_effects(recs, "auc")
    assert res.estimates == [pytest.approx(-0.01), pytest.approx(0.8)]
    assert res.adj_r2 == pytest.approx(1.0)


def test_noisy_fit_matches_normal_equations_and_scipy_pvalues():
    recs = records_from(REFERENCE_AUC_MODEL, noise=0.01, seed=3)
    res = ols_fixed_effects(recs, "auc", family_order=FAMILIES)
    X, _ = fixed_effects_design([r.family for r in recs], [r.years_between for r in recs], FAMILIES)
    y = np.array([r.auc for r in recs])
    beta = np.linalg.solve(X.T @ X, X.T @ y)
    np.testing.assert_allclose(res.estimates, beta, rtol=0, atol=1e-10)
    resid = y - X @ beta
    df = len(y) - X.shape[1]
    se = np.sqrt(np.diag(np.linalg.inv(X.T @ X)) * (resid @ resid) / df)
    np.testing.assert_allclose(res.std_errors, se, rtol=1e-9)
    np.testing.assert_allclose(res.p_values, 2 * scipy.stats.t.sf(np.abs(beta / se), df), rtol=1e-7, atol=1e-300)
    adj = 1 - (resid @ resid / ((y - y.mean()) @ (y - y.mean()))) * (len(y) - 1) / df
    assert res.adj_r2 == pytest.approx(adj, rel=1e-12)
    assert res.df_resid == df == 100 - 10
    # residuals orthogonal to every design column
    assert np.max(np.abs(X.T @ resid)) / np.linalg.norm(y) < 1e-8


def test_rank_deficient_design_names_columns():
    X = np.array([[1.0, 2.0, 1.0], [1.0, 2.0, 0.0], [1.0, 2.0, 3.0], [1.0, 2.0, 2.0]])
    with pytest.raises(np.linalg.LinAlgError, match="b"):
        ols(X, [1, 2, 3, 4], ["a", "b", "c"])


def test_fixed_effects_needs_two_yb_values():
    recs = [EvalRecord(f, "2019-2020", "2019-2020", 0, k, k + 1, 0.7, 0.5, 0.6, 5)
            for f in ("BKT", "PFA") for k in range(3)]
    with pytest.raises(ValueError, match="years-between"):
        ols_fixed_effects(recs)


def test_result_exports():
    res = ols_fixed_effects(records_from(REFERENCE_AUC_MODEL, noise=0.01), "auc", family_order=FAMILIES)
    doc = json.loads(res.to_json())
    assert doc["names"][0] == YB and doc["metric"] == "auc"
    text = res.to_text()
    assert "Std. Err" in text and "YB×SAKT-E" in text and "adjusted R^2" in text
    assert all(0.0 <= p <= 1.0 for p in res.p_values) and res.adj_r2 <= 1.0
