import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

import oracles
from bioage.analysis import UndefinedStatisticError
from bioage.evaluation import (
    GapTable,
    age_binned_gap_curves,
    bold_flag,
    fit_ba_ca_line,
    gap_by_morbidity,
    kaplan_meier,
    logrank_test,
    mmd_normal_test,
    mortality_regression,
    mortality_rows_frame,
    ordering_flag,
    paired_difference_test,
    stratify_by_gap,
    survival_by_gap,
    welch_ttest,
)


def _est(ca, gap):
    ca, gap = np.asarray(ca, float), np.asarray(gap, float)
    return pd.DataFrame({"id": [f"s{i}" for i in range(len(ca))], "ca": ca, "gap": gap, "ba": ca + gap})


def _labels(overall, **diseases):
    n = len(overall)
    base = {d: ["normal"] * n for d in ("dm", "hbp", "dlp")}
    base.update({d: ["healthy"] * n for d in ("ms", "cancer", "cvd", "cva")})
    base.update(diseases)
    return pd.DataFrame(dict(base, overall=overall, indeterminate=[""] * n))


# --------------------------------------------------------------------------
# gap tables


def test_gap_table_all_zero():
    lab = _labels(["healthy", "average", "unhealthy"] * 3)
    t = gap_by_morbidity(_est(np.full(9, 50), np.zeros(9)), lab, grouping=("overall",))
    assert (t.cells["mean"] == 0).all()
    f = t.flags().iloc[0]
    assert not f["bold"] and not f["ordering"]


def test_gap_table_bold_example():
    lab = _labels(["healthy", "average", "unhealthy"])
    t = gap_by_morbidity(_est([40, 50, 60], [-2, 0, 1]), lab, grouping=("overall",))
    f = t.flags().iloc[0]
    assert f["ordering"] and f["bold"]
    assert t.mean("overall", "unhealthy") == 1.0


def test_flag_rules():
    assert ordering_flag([-1, 0, 2]) and not ordering_flag([-1, 0, 0])
    assert bold_flag([-0.1, 0.9, 0.1]) and not bold_flag([-0.1, 1.0, 0.1])
    assert bold_flag([-1, 1]) and not bold_flag([0, 1])
    assert not ordering_flag([-1, np.nan, 1]) and not bold_flag([-1, np.nan, 1])


def test_gap_table_matches_groupby_and_marks_empty_cells():
    rng = np.random.default_rng(0)
    n = 500
    overall = rng.choice(["healthy", "average", "unhealthy"], n)
    dm = rng.choice(["normal", "pre"], n)  # no illness cell
    lab = _labels(list(overall), dm=list(dm))
    est = _est(rng.uniform(20, 80, n), rng.normal(size=n))
    t = gap_by_morbidity(est, lab, population="normal", model="m", feature_set="base")
    expected = est.groupby(overall)["gap"].mean()
    for state, val in expected.items():
        assert t.mean("overall", state) == pytest.approx(val, abs=1e-12)
    ill = t.cells[(t.cells["group"] == "dm") & (t.cells["state"] == "illness")].iloc[0]
    assert ill["n"] == 0 and np.isnan(ill["mean"]) and ill["ood"]
    pre = t.cells[(t.cells["group"] == "dm") & (t.cells["state"] == "pre")].iloc[0]
    assert not pre["ood"]


def test_gap_table_ood_marks_follow_population():
    lab = _labels(["healthy", "average", "unhealthy"])
    t = gap_by_morbidity(_est([40, 50, 60], [-2, 0, 1]), lab, population="super_normal", grouping=("overall",))
    assert t.cells.set_index("state")["ood"].to_dict() == {"healthy": False, "average": True, "unhealthy": True}
    t = gap_by_morbidity(_est([40, 50, 60], [-2, 0, 1]), lab, population="whole", grouping=("overall",))
    assert not t.cells["ood"].any()


def test_gap_table_flags_survive_serialisation(tmp_path):
    rng = np.random.default_rng(1)
    lab = _labels(list(rng.choice(["healthy", "average", "unhealthy"], 200)))
    t = gap_by_morbidity(_est(rng.uniform(20, 80, 200), rng.normal(size=200)), lab, "whole", "kdm", "base")
    t.to_csv(tmp_path / "t.csv")
    back = GapTable.from_csv(tmp_path / "t.csv")
    pd.testing.assert_frame_equal(t.flags(), back.flags())
    wide = back.wide()
    assert {"healthy", "healthy_n", "healthy_ood", "ordering", "bold"} <= set(wide.columns)


def test_exclude_indeterminate():
    lab = _labels(["average", "average"])
    lab["indeterminate"] = ["dm", ""]
    t = gap_by_morbidity(_est([40, 50], [5, 1]), lab, grouping=("overall",), exclude_indeterminate=True)
    assert t.mean("overall", "average") == 1.0


# --------------------------------------------------------------------------
# fits and tests


def test_fit_ba_ca_line():
    ca = np.linspace(20, 80, 13)
    assert fit_ba_ca_line(_est(ca, 0)) == pytest.approx((1.0, 0.0), abs=1e-12)
    assert fit_ba_ca_line(_est(ca, -0.2 * ca + 9)) == pytest.approx((0.8, 9.0), abs=1e-12)
    rng = np.random.default_rng(2)
    ca = rng.uniform(20, 80, 50)
    e = _est(ca, rng.normal(0, 5, 50))
    A = np.c_[ca, np.ones(50)]
    a, b = np.linalg.solve(A.T @ A, A.T @ e["ba"].to_numpy())
    assert fit_ba_ca_line(e) == pytest.approx((a, b), abs=1e-10)
    with pytest.raises(ValueError):
        fit_ba_ca_line(_est([40, 40], [1, 2]))


def test_welch_examples():
    assert welch_ttest([1, 2, 3], [1, 2, 3]) == (0.0, 1.0)
    rng = np.random.default_rng(3)
    assert welch_ttest(rng.normal(0, 1e-3, 10), rng.normal(10, 1e-3, 10))[1] < 0.001
    t, p = welch_ttest([1, 2, 3, 4], [2, 4, 6, 8, 10])
    assert t == pytest.approx(-2.2514363231593695, abs=1e-12)
    assert p == pytest.approx(0.06913359319239237, abs=1e-10)
    with pytest.raises(UndefinedStatisticError):
        welch_ttest([1, 1], [2, 2])
    with pytest.raises(ValueError):
        welch_ttest([1], [1, 2])


def test_paired_difference_test():
    mean, t, p = paired_difference_test([3, 4, 5, 7], [1, 2, 4, 4])
    d = np.array([2, 2, 1, 3.0])
    assert mean == 2.0 and t == pytest.approx(2 / (d.std(ddof=1) / 2))
    assert p == pytest.approx(stats.ttest_rel([3, 4, 5, 7], [1, 2, 4, 4], alternative="greater").pvalue)


def test_mortality_exact_fit():
    rng = np.random.default_rng(4)
    ca = rng.uniform(40, 80, 30)
    gap = rng.normal(0, 3, 30)
    days = -10 * gap + 900
    row = mortality_regression(_est(ca, gap), days, "ca_plus_gap")
    assert row.slope == pytest.approx(-10, abs=1e-9)
    assert row.r2 == pytest.approx(1.0, abs=1e-12) and row.pcc == pytest.approx(-1.0, abs=1e-12)


def test_mortality_null_and_univariate_oracle():
    rng = np.random.default_rng(5)
    n = 4000
    ca, gap = rng.uniform(40, 80, n), rng.normal(0, 3, n)
    days = np.where(rng.random(n) < 0.5, rng.uniform(1, 2000, n), np.nan)
    row = mortality_regression(_est(ca, gap), days, "ca_plus_gap")
    assert abs(row.slope) < 10 and row.p_value > 0.05
    dead = ~np.isnan(days)
    lr = stats.linregress(ca[dead] + gap[dead], days[dead])
    uni = mortality_regression(_est(ca, gap), days, "ba_univariate")
    assert uni.slope == pytest.approx(lr.slope, rel=1e-9)
    assert uni.p_value == pytest.approx(lr.pvalue, rel=1e-6)
    assert uni.r2 == pytest.approx(lr.rvalue**2, rel=1e-9) and uni.pcc == pytest.approx(lr.rvalue, rel=1e-9)
    assert uni.n == dead.sum()


def test_mortality_two_predictor_normal_equations():
    ca = np.array([50.0, 62, 71, 45, 58, 66])
    gap = np.array([1.0, -2, 3, 0.5, -1, 2])
    days = np.array([800.0, 600, 200, 900, 700, 350])
    row = mortality_regression(_est(ca, gap), days, "ca_plus_gap")
    X = np.c_[np.ones(6), ca, gap]
    coef = np.linalg.solve(X.T @ X, X.T @ days)
    np.testing.assert_allclose(row.coefficients, coef, rtol=1e-9)
    assert row.slope == pytest.approx(coef[2], rel=1e-9)


def test_mortality_zero_gap_reduces_to_ca_only():
    ca = np.array([50.0, 62, 71, 45, 58, 66])
    days = np.array([800.0, 600, 200, 900, 700, 350])
    est = _est(ca, np.zeros(6))
    with pytest.raises(ValueError, match="collinear"):
        mortality_regression(est, days, "ca_plus_gap")
    reduced = mortality_regression(est, days, "ca_plus_gap", on_degenerate="reduce")
    plain = mortality_regression(est, days, "ca_only")
    assert reduced.coefficients[:2] == pytest.approx(plain.coefficients, rel=1e-12)
    assert reduced.slope == 0.0 and reduced.r2 == pytest.approx(plain.r2)
    with pytest.raises(ValueError, match="three"):
        mortality_regression(est, [1.0, 2.0] + [np.nan] * 4, "ca_only")
    frame = mortality_rows_frame([reduced, plain])
    assert list(frame["mode"]) == ["ca_plus_gap", "ca_only"]


# --------------------------------------------------------------------------
# survival


def test_kaplan_meier_examples():
    flat = kaplan_meier([5, 9, 12], [False, False, False])
    assert len(flat.times) == 0 and np.all(flat.at([1, 100]) == 1.0)
    km = kaplan_meier([10, 20], [True, False])
    assert km.at(10) == 0.5 and km.at(9.99) == 1.0
    times, events = [2, 3, 3, 5, 6, 7, 8, 9], [1, 1, 0, 1, 0, 1, 1, 0]
    km = kaplan_meier(times, np.array(events, bool))
    hand = [(2, 7 / 8), (3, 3 / 4), (5, 3 / 5), (7, 2 / 5), (8, 1 / 5)]
    np.testing.assert_allclose(km.times, [h[0] for h in hand])
    np.testing.assert_allclose(km.survival, [h[1] for h in hand], atol=1e-15)
    np.testing.assert_array_equal(km.at_risk, [8, 7, 5, 3, 2])
    frame = km.to_frame()
    assert frame.iloc[0].tolist() == [0.0, 1.0, 8]
    with pytest.raises(ValueError):
        kaplan_meier([], [])
    with pytest.raises(ValueError):
        kaplan_meier([0, 1], [True, True])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 50), min_size=1, max_size=40))
def test_kaplan_meier_without_censoring_is_empirical(times):
    km = kaplan_meier(times, np.ones(len(times), bool))
    t = np.array(times)
    for u, s in zip(km.times, km.survival):
        assert s == pytest.approx(np.mean(t > u), abs=1e-12)
    assert np.all(np.diff(km.survival) <= 0)


def test_logrank_examples():
    t = np.array([3.0, 5, 8, 9, 12])
    e = np.array([1, 0, 1, 1, 0], bool)
    chi2, p = logrank_test((t, e), (t, e))
    assert chi2 == pytest.approx(0.0, abs=1e-15) and p == pytest.approx(1.0)
    # hand table: O - E = 2 - 26/15, V = 0.25 + 0.24 + 0.25 + 2/9
    chi2, p = logrank_test(([1, 3, 5], np.array([1, 1, 0], bool)), ([2, 4, 6], np.array([1, 1, 1], bool)))
    assert chi2 == pytest.approx((4 / 15) ** 2 / (0.74 + 2 / 9), abs=1e-12)
    assert p == pytest.approx(0.7857365379599127, abs=1e-10)
    with pytest.raises(UndefinedStatisticError):
        logrank_test(([1, 2], np.zeros(2, bool)), ([3], np.zeros(1, bool)))


def test_logrank_detects_fivefold_hazard():
    rng = np.random.default_rng(6)
    ta, tb = rng.exponential(1.0, 500), rng.exponential(0.2, 500)
    cens = lambda t: (np.minimum(t, 1.5), t <= 1.5)
    _, p = logrank_test(cens(ta), cens(tb))
    assert p < 0.001


def test_logrank_super_uniform_under_permutation():
    rng = np.random.default_rng(7)
    t = rng.exponential(1.0, 120) + 1e-3
    e = rng.random(120) < 0.7
    hits = 0
    for _ in range(200):
        g = rng.permutation(120) < 60
        hits += logrank_test((t[g], e[g]), (t[~g], e[~g]))[1] < 0.05
    assert hits / 200 <= 0.10


def test_stratify_by_gap():
    out = stratify_by_gap(np.array([-1.5, 0.0, 1.0, -1.0, 1.2]))
    assert list(out) == ["healthy", "average", "average", "average", "unhealthy"]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=50))
def test_stratify_partitions(gaps):
    out = stratify_by_gap(np.array(gaps))
    counts = {s: int((out == s).sum()) for s in ("healthy", "average", "unhealthy")}
    assert sum(counts.values()) == len(gaps)


def test_survival_by_gap_curves_and_ratio():
    rng = np.random.default_rng(8)
    n = 900
    gap = rng.normal(0, 2, n)
    days = rng.exponential(3000 / np.exp(0.5 * gap))
    events = days < 2000
    times = np.minimum(days, 2000) + 1
    sc = survival_by_gap(_est(np.full(n, 60), gap), times, events)
    assert sum(sc.counts.values()) == n and set(sc.curves) == {"healthy", "average", "unhealthy"}
    assert sc.p_value < 0.001 and sc.excess_ratio > 1
    for c in sc.curves.values():
        assert np.all(np.diff(c.survival) <= 0) and c.survival[0] <= 1
    frame = sc.to_frame()
    assert list(frame.columns) == ["group", "time", "survival", "at_risk"]


def test_age_binned_gap_curves():
    est = _est([40, 42, 44, 47, 52], [1.0, 2.0, 3.0, 4.0, 5.0])
    out = age_binned_gap_curves(est, ["a"] * 5)
    row40 = out[out["bin"] == 40].iloc[0]
    assert row40["n"] == 3 and row40["mean"] == 2.0
    single = out[out["bin"] == 50].iloc[0]
    assert single["q_low"] == single["q_high"] == single["mean"] == 5.0
    rng = np.random.default_rng(9)
    est = _est(rng.uniform(20, 80, 400), rng.normal(size=400))
    states = rng.choice(["x", "y"], 400)
    out = age_binned_gap_curves(est, states).set_index(["state", "bin"])
    for (s, b), part in est.groupby([states, (est["ca"] // 5) * 5]):
        assert out.loc[(s, b), "mean"] == pytest.approx(part["gap"].mean(), abs=1e-12)
        assert out.loc[(s, b), "q_low"] == pytest.approx(part["gap"].quantile(0.25), abs=1e-12)


def test_mmd_normal_test():
    rng = np.random.default_rng(10)
    _, p_null = mmd_normal_test(rng.normal(0, 2, 300), scale=2.0, seed=1)
    _, p_alt = mmd_normal_test(rng.normal(1.5, 2, 300), scale=2.0, seed=1)
    assert p_null > 0.05 and p_alt < 0.01
    assert 1 / 201 <= p_alt <= 1


def test_statistics_oracle_agreement_on_random_fixture():
    rng = np.random.default_rng(11)
    a, b = rng.normal(0, 1, 12), rng.normal(0.5, 2, 9)
    t, p = welch_ttest(a, b)
    to, po = oracles.welch(list(a), list(b))
    assert t == pytest.approx(to, abs=1e-10) and p == pytest.approx(po, abs=1e-10)
    ta, tb = rng.integers(1, 30, 15), rng.integers(1, 30, 12)
    ea, eb = rng.random(15) < 0.6, rng.random(12) < 0.6
    chi2, p = logrank_test((ta, ea), (tb, eb))
    c_o, p_o = oracles.logrank(list(ta), list(ea), list(tb), list(eb))
    assert chi2 == pytest.approx(c_o, abs=1e-10) and p == pytest.approx(p_o, abs=1e-10)
    assert math.isfinite(chi2)
