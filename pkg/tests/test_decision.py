import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from fairnb.decision import (FixedCostUtility, RiskReductionUtility, aggregate_utility,
                             calibrated_net_benefit, conditional_utility_fixed, decision_curve,
                             default_grid, net_benefit, net_benefit_fixed, net_benefit_rr,
                             optimal_threshold_fixed, relative_risk_reduction)
from fairnb.errors import DomainError
from fairnb.metrics import IDENTITY_CALIBRATION, CalibrationModel, ipcw_rate

import oracles

# ten subjects scored by hand
S10 = [0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.40, 0.55, 0.70, 0.90]
Y10 = [0, 0, 1, 0, 0, 1, 0, 1, 1, 1]

instances = st.integers(1, 50).flatmap(lambda n: st.tuples(
    st.lists(st.floats(0.0, 1.0), min_size=n, max_size=n),
    st.lists(st.integers(0, 1), min_size=n, max_size=n),
    st.lists(st.floats(0.01, 10.0), min_size=n, max_size=n),
))


def test_hand_case_fixed():
    # at tau = 0.2: treated are the last seven, TP = 4, FP = 3
    assert net_benefit_fixed(S10, Y10, None, 0.2, 0.2) == pytest.approx(4 / 10 - 3 / 10 * 0.25, abs=1e-15)
    # strictly above 0.9 nobody is treated
    assert net_benefit_fixed(S10, Y10, None, 0.95, 0.2) == 0.0


def test_hand_case_risk_reduction():
    u = RiskReductionUtility(0.2, 0.3)
    # treated: 7 people, 4 events; untreated: 3 people, 1 event
    expected = -(1 / 3) * 0.3 - 0.7 * (0.7 * 4 / 7 + 0.3 * 0.2) + 0.5
    assert net_benefit_rr(S10, Y10, None, 0.2, u) == pytest.approx(expected, abs=1e-15)


@settings(max_examples=150, deadline=None)
@given(instances, st.floats(0.0, 1.0), st.floats(0.01, 0.99))
def test_fixed_matches_oracle(inst, tau, ts):
    s, y, w = inst
    assert net_benefit_fixed(s, y, w, tau, ts) == pytest.approx(
        oracles.net_benefit(s, y, w, tau, ts), abs=1e-12)


@settings(max_examples=150, deadline=None)
@given(instances, st.floats(0.0, 1.0), st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_rr_matches_oracle_and_scales_fixed(inst, tau, ts, r):
    s, y, w = inst
    u = RiskReductionUtility(ts, r)
    rr = net_benefit_rr(s, y, w, tau, u)
    assert rr == pytest.approx(oracles.net_benefit_rr(s, y, w, tau, ts, r), abs=1e-12)
    assert rr == pytest.approx(r * (1 - ts) * net_benefit_fixed(s, y, w, tau, ts), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(instances, st.floats(0.01, 0.99))
def test_tpr_fpr_identity(inst, ts):
    s, y, w = inst
    if 0 < sum(y) < len(y):
        tau = 0.3
        p1 = sum(wi for wi, yi in zip(w, y) if yi) / sum(w)
        expected = ipcw_rate(s, y, w, tau, "tpr") * p1 - ipcw_rate(s, y, w, tau, "fpr") * (1 - p1) * ts / (1 - ts)
        assert net_benefit_fixed(s, y, w, tau, ts) == pytest.approx(expected, abs=1e-12)


def test_treat_none_is_zero_and_treat_all_formula(rng):
    s = rng.random(30)
    y = rng.integers(0, 2, 30)
    assert net_benefit_fixed(s, y, None, 1.01, 0.1) == 0.0
    p = y.mean()
    assert net_benefit_fixed(s, y, None, 0.0, 0.1) == pytest.approx(p - (1 - p) / 9, abs=1e-15)


def test_optimal_threshold():
    assert optimal_threshold_fixed(FixedCostUtility(0.8, 0.0, 0.2, 0.0)) == pytest.approx(0.2, abs=1e-15)
    assert optimal_threshold_fixed(FixedCostUtility(1.0, 0.0, 1.0, 0.0)) == 0.5
    # treating is always better: clipped to 0
    assert optimal_threshold_fixed(FixedCostUtility(1.0, 0.5, 0.2, 0.0)) == 0.0
    with pytest.raises(DomainError):
        optimal_threshold_fixed(FixedCostUtility(0.0, 0.5, 0.2, 0.5))
    u = FixedCostUtility(0.8, 0.0, 0.2, 0.0)
    assert conditional_utility_fixed(0.2, u) == pytest.approx(0.0, abs=1e-15)


def test_relative_risk_reduction():
    assert relative_risk_reduction(1.0) == pytest.approx(0.22, abs=1e-15)
    assert relative_risk_reduction(2.0) == pytest.approx(1 - 0.78 ** 2, abs=1e-15)
    with pytest.raises(DomainError):
        relative_risk_reduction(0.0)
    with pytest.raises(DomainError):
        RiskReductionUtility(0.2, 1.0)


def test_net_benefit_dispatch():
    u = FixedCostUtility(0.8, 0.0, 0.2, 0.0)
    assert net_benefit(S10, Y10, None, 0.3, u) == net_benefit_fixed(S10, Y10, None, 0.3, 0.2)
    assert net_benefit(S10, Y10, None, 0.3, 0.2) == net_benefit_fixed(S10, Y10, None, 0.3, 0.2)


def test_calibrated_net_benefit_shifts_threshold():
    assert calibrated_net_benefit(S10, Y10, None, 0.2, 0.2, IDENTITY_CALIBRATION) == \
        net_benefit_fixed(S10, Y10, None, 0.2, 0.2)
    # scores twice too low in odds: the adjusted threshold is lower
    cal = CalibrationModel(math.log(2.0), 1.0)
    adj = 1 / (1 + 2 * 4)
    assert calibrated_net_benefit(S10, Y10, None, 0.2, 0.2, cal) == pytest.approx(
        net_benefit_fixed(S10, Y10, None, adj, 0.2), abs=1e-15)


def test_decision_curve_shapes_and_modes(rng):
    s = rng.random(200)
    y = (rng.random(200) < s).astype(int)
    groups = np.where(rng.random(200) < 0.5, "a", "b")
    curve = decision_curve(s, y, groups=groups)
    assert curve.grid.size == 199 and default_grid()[0] == 0.005
    assert set(curve.series) == {"overall", "a", "b"}
    assert np.all(curve.treat_none == 0)
    nb = curve.series["overall"]["nb"]
    assert nb[10] == net_benefit_fixed(s, y, None, curve.grid[10], curve.grid[10])
    para = decision_curve(s, y, mode="parameterized", tau_star=0.2, calibration=None)
    assert np.all(para.tau_star == 0.2)
    assert np.all(np.isnan(para.series["overall"]["cnb"]))
    text = curve.to_csv()
    assert text.splitlines()[0] == "group,mode,tau,tau_star,nb,cnb,treat_all_nb"
    assert len(text.splitlines()) == 1 + 3 * 199


def test_decision_curve_rejects_bad_grid():
    with pytest.raises(DomainError):
        decision_curve(S10, Y10, grid=[0.2, 0.1])
    with pytest.raises(DomainError):
        decision_curve(S10, Y10, grid=[0.0, 0.5])
    with pytest.raises(ValueError):
        decision_curve(S10, Y10, mode="parameterized")


def test_aggregate_utility_empirical_and_analytic():
    u = FixedCostUtility(0.8, 0.0, 0.2, 0.0)
    # treated cells: 4 TP at 0.8, 3 FP at 0; untreated: 2 TN at 0.2, 1 FN at 0
    assert aggregate_utility(u, 0.2, S10, Y10) == pytest.approx((4 * 0.8 + 2 * 0.2) / 10, abs=1e-15)
    dens = stats.beta(2.5, 7.5).pdf
    val = aggregate_utility(u, 0.2, density=dens)
    lo = stats.beta(3.5, 7.5).cdf(0.2) * 0.25
    expected = 0.2 * (stats.beta(2.5, 7.5).cdf(0.2) - lo) + 0.8 * 0.25 * (1 - stats.beta(3.5, 7.5).cdf(0.2))
    assert val == pytest.approx(expected, abs=1e-10)
    # the calibrated optimum is the root of the conditional utility
    grid = np.linspace(0.05, 0.5, 91)
    vals = [aggregate_utility(u, t, density=dens) for t in grid]
    assert grid[int(np.argmax(vals))] == pytest.approx(0.2, abs=1e-12)
