import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icl_lab.analysis import (TABLE1, TABLE2, TABLE3, TABLE4, FitError, IllPosedFit, _combination_label,
                              detect_emergence, emergence_pvalue, fit_context_exponent, fit_depth_width,
                              fit_power_law, fit_sigmoid_emergence, predict_alpha_theory, predict_critical_scale,
                              table1_discrepancies)

NS = np.logspace(3, 6, 10)


def test_exact_power_law():
    fit = fit_power_law([(n, 100 * n ** -0.5) for n in NS])
    assert abs(fit.exponent - 0.5) < 1e-12
    assert fit.amplitude == pytest.approx(100, rel=1e-10)
    assert fit.r_squared == 1.0
    assert fit.ci_low <= fit.exponent <= fit.ci_high
    assert fit.ci_high - fit.ci_low < 1e-9


@settings(max_examples=40, deadline=None)
@given(st.floats(0.05, 2.0), st.floats(1e-3, 1e3), st.floats(1e-6, 1e6), st.integers(0, 2**31))
def test_power_law_scale_equivariant(alpha, amp, c, seed):
    rng = np.random.default_rng(seed)
    errs = amp * NS ** -alpha * np.exp(0.1 * rng.standard_normal(len(NS)))
    a = fit_power_law(zip(NS, errs), n_bootstrap=200)
    b = fit_power_law(zip(NS, c * errs), n_bootstrap=200)
    assert abs(a.exponent - b.exponent) < 1e-12
    assert b.amplitude == pytest.approx(c * a.amplitude, rel=1e-9)
    assert a.ci_low <= a.exponent <= a.ci_high and 0.0 <= a.r_squared <= 1.0


def test_power_law_bootstrap_coverage():
    rng = np.random.default_rng(0)
    hits = 0
    for trial in range(100):
        errs = 100 * NS ** -0.5 * np.exp(0.05 * rng.standard_normal(len(NS)))
        fit = fit_power_law(zip(NS, errs), n_bootstrap=2000, seed=trial)
        hits += fit.ci_low <= 0.5 <= fit.ci_high
    assert hits >= 90


@pytest.mark.parametrize("points", [[(1, 1), (2, 0.5), (4, 0.25)], [(1, 1), (2, 0), (3, 1), (4, 1)],
                                    [(1, 1), (2, -1), (3, 1), (4, 1)], [(5, 1), (5, 2), (5, 3), (5, 4)]])
def test_power_law_rejects_bad_input(points):
    with pytest.raises(FitError):
        fit_power_law(points)


def test_context_exponent():
    fit = fit_context_exponent({k: 3.0 / max(k, 1) for k in (0, 1, 2, 5, 10, 20, 40)})
    assert abs(fit.exponent - 1.0) < 1e-12 and fit.r_squared == 1.0 and fit.n_points == 6
    with pytest.raises(FitError, match="4 positive k"):
        fit_context_exponent({0: 1.0, 20: 0.5})
    floored = fit_context_exponent({k: {"mean": 2.0 * k ** -0.7 + 0.3} for k in (1, 2, 5, 10, 20, 40, 80)},
                                   floor=True)
    assert floored.exponent == pytest.approx(0.7, abs=1e-3) and floored.floor == pytest.approx(0.3, abs=1e-3)


def test_alpha_theory():
    assert predict_alpha_theory(0) == 0.5
    assert predict_alpha_theory(1) == 0.25
    assert predict_alpha_theory(4) == 0.1
    with pytest.raises(ValueError):
        predict_alpha_theory(-1)


def test_table1_mismatch_flags():
    rows = {(r["task"], r["h"]): r for r in table1_discrepancies()}
    assert not rows[("Linear Regression", 0)]["mismatch"]
    for key in [("Sparse Linear", 1), ("Decision Tree", 2), ("Decision Tree", 3), ("Decision Tree", 4)]:
        assert rows[key]["mismatch"]
    assert rows[("Decision Tree", 2)]["alpha_formula"] == pytest.approx(1 / 6)
    assert [r[3] for r in TABLE1] == [0.48, 0.31, 0.32, 0.23, 0.19]
    assert [r[1:] for r in TABLE4] == [(0.98, 0.05), (0.51, 0.04), (0.43, 0.06)]


def test_critical_scale():
    assert predict_critical_scale(10, 2) == pytest.approx(6.4e7, rel=1e-15)
    assert predict_critical_scale(10, 3) == pytest.approx(6.561e11, rel=1e-15)
    with pytest.raises(ValueError):
        predict_critical_scale(10, 0)
    with pytest.raises(ValueError):
        predict_critical_scale(0, 2)
    # the tabulated h=2 critical scale is far below the unit-constant formula
    assert dict(((t, h), n) for t, h, n in TABLE2)[("Decision Tree", 2)] == 3e5


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 50), st.integers(1, 5))
def test_critical_scale_monotone(k, h):
    v = predict_critical_scale(k, h)
    assert predict_critical_scale(k + 1, h) > v and predict_critical_scale(k, h + 1) > v


def test_sigmoid_recovers_exact_logistic():
    N = np.logspace(3, 7, 12)
    p = 1 / (1 + np.exp(-2.0 * (np.log10(N) - 5.0)))
    fit = fit_sigmoid_emergence(zip(N, p))
    assert fit.kappa == pytest.approx(2.0, rel=0.01)
    assert fit.N_c == pytest.approx(1e5, rel=0.01)
    assert np.allclose(fit.probability(N), p, atol=1e-6)


def test_sigmoid_step_input():
    N = np.logspace(3, 7, 9)  # half-decade spacing
    p = (N >= N[5]).astype(float)
    fit = fit_sigmoid_emergence(zip(N, p))
    assert abs(math.log10(fit.N_c) - math.log10(N[5])) <= 0.5
    assert N[4] <= fit.N_c <= N[5]
    assert fit.kappa > 10


def test_sigmoid_one_sided_is_ill_posed():
    N = np.logspace(3, 7, 8)
    with pytest.raises(IllPosedFit, match="not bracketed"):
        fit_sigmoid_emergence(zip(N, np.full(8, 0.2)))
    with pytest.raises(FitError):
        fit_sigmoid_emergence(zip(N[:5], [0, 0, 1, 1, 1]))


def test_emergence_null():
    res = detect_emergence({n: np.full(50, 20.0) for n in (1e3, 1e4, 1e5)}, 20.0, 0.1)
    assert not res.emerged and res.N_c is None
    assert all(p > 0.1 for p in res.p_values.values())


def test_emergence_first_crossing():
    rng = np.random.default_rng(0)
    errs = {n: 20 + rng.normal(0, 0.05, 40) for n in (1e3, 3e3, 1e4)}
    errs.update({n: 15 + rng.normal(0, 0.05, 40) for n in (3e4, 1e5, 3e5)})
    res = detect_emergence(errs, 20.0, 0.01)
    assert res.emerged and res.N_c == 3e4
    assert res.p_values[3e4] < 0.01 and res.p_values[1e4] >= 0.01


def test_emergence_pvalue_bounds():
    assert emergence_pvalue(np.full(30, 1.0), 5.0, n_bootstrap=999) == pytest.approx(1 / 1000)
    assert emergence_pvalue(np.full(30, 9.0), 5.0, n_bootstrap=999) == 1.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(5.0, 25.0), min_size=2, max_size=6), st.floats(0.1, 5.0), st.integers(0, 1000))
def test_emergence_monotone_under_added_point(levels, drop, seed):
    rng = np.random.default_rng(seed)
    Ns = [10.0 ** (3 + i) for i in range(len(levels))]
    errs = {n: lv + rng.normal(0, 0.5, 30) for n, lv in zip(Ns, levels)}
    before = detect_emergence(errs, 20.0, 0.1, n_bootstrap=300)
    lowest = min(e.mean() for e in errs.values())
    errs[1.0] = lowest - drop + rng.normal(0, 0.5, 30)
    after = detect_emergence(errs, 20.0, 0.1, n_bootstrap=300)
    if before.emerged:
        assert after.emerged and after.N_c <= before.N_c


def _grid(a, b, budgets=(2**12, 2**14, 2**16, 2**18), Ls=(2, 4, 8, 16, 32)):
    rows = []
    for N in budgets:
        for L in Ls:
            d = N / L
            rows.append((N, L, d, L ** -a * d ** -b))
    return rows


def test_depth_width_exact_recovery():
    rows = [(L * d, L, d, L ** -0.5 * d ** -0.5) for L in (2, 4, 8, 16) for d in (32, 64, 128)]
    fit = fit_depth_width(rows, n_bootstrap=200)
    assert not fit.rank_deficient
    assert abs(fit.depth_exponent - 0.5) < 1e-10 and abs(fit.width_exponent - 0.5) < 1e-10
    assert fit.r_squared == pytest.approx(1.0)


def test_depth_width_on_shaped_budgets():
    fit = fit_depth_width(_grid(0.51, 0.48), n_bootstrap=200)
    assert fit.depth_exponent == pytest.approx(0.51, abs=1e-10)
    assert fit.width_exponent == pytest.approx(0.48, abs=1e-10)
    assert fit.n_budgets == 4


def test_allocation_slope_two_thirds():
    rows = []
    for j in range(1, 6):
        N = 2.0 ** (3 * j)
        L_star = 2.0 ** (2 * j)
        for i in range(0, 13):
            L = 2.0 ** i
            rows.append((N, L, N / L, 1.0 + (math.log2(L) - math.log2(L_star)) ** 2))
    fit = fit_depth_width(rows, n_bootstrap=200)
    assert fit.allocation_slope == pytest.approx(2 / 3, abs=0.02)
    assert fit.allocation_ci[0] <= fit.allocation_slope <= fit.allocation_ci[1]


def test_table3_single_budget_is_rank_deficient():
    errs = [e for _, _, e in sorted(TABLE3)]
    assert all(b < a for a, b in zip(errs, errs[1:]))  # decreasing in L
    assert TABLE3[0] == (64, 31_250, 0.12) and TABLE3[-1] == (4, 500_000, 0.48)
    fit = fit_depth_width([(L * d, L, d, e) for L, d, e in TABLE3], n_bootstrap=200)
    assert fit.rank_deficient and fit.width_exponent is None
    assert fit.identifiable.startswith("a - b ")
    assert fit.depth_exponent > 0 and fit.n_budgets == 1 and fit.allocation_slope is None


def test_combination_labels():
    assert _combination_label(-1.0).startswith("a - b ")
    assert _combination_label(-0.5).startswith("a - b/2")
    assert "0.25" in _combination_label(0.25)


def test_depth_width_input_checks():
    with pytest.raises(FitError):
        fit_depth_width([(1, 1, 1, 1)] * 3)
    with pytest.raises(FitError):
        fit_depth_width([(1, 1, 1, 0)] * 4)
