import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special

from fairnb.errors import CalibrationError, NonInvertibleError, StratificationError, UndefinedMetricError
from fairnb.metrics import (IDENTITY_CALIBRATION, CalibrationModel, ace, fit_calibration_curve,
                            intergroup_variance, invert_calibration, ipcw_auc, ipcw_log_loss,
                            ipcw_rate, strata_labels, stratified_bootstrap, weighted_mean)

import oracles

instances = st.integers(2, 60).flatmap(lambda n: st.tuples(
    st.lists(st.sampled_from([0.05, 0.1, 0.3, 0.5, 0.7]) | st.floats(0.0, 1.0), min_size=n, max_size=n),
    st.lists(st.integers(0, 1), min_size=n, max_size=n),
    st.lists(st.floats(0.01, 10.0), min_size=n, max_size=n),
))


@settings(max_examples=200, deadline=None)
@given(instances)
def test_auc_matches_pairwise_oracle(inst):
    s, y, w = inst
    if 0 < sum(y) < len(y):
        assert abs(ipcw_auc(s, y, w) - oracles.auc(s, y, w)) < 1e-12
    else:
        with pytest.raises(UndefinedMetricError):
            ipcw_auc(s, y, w)


@settings(max_examples=200, deadline=None)
@given(instances, st.sampled_from([0.0, 0.075, 0.1, 0.2, 0.5, 1.0]))
def test_rates_match_oracle(inst, thr):
    s, y, w = inst
    for kind, cls in (("tpr", 1), ("fpr", 0)):
        if cls in y:
            assert abs(ipcw_rate(s, y, w, thr, kind) - oracles.rate(s, y, w, thr, kind)) < 1e-12


def test_auc_examples():
    assert ipcw_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert ipcw_auc([0.4] * 5, [0, 1, 0, 1, 1]) == 0.5
    with pytest.raises(UndefinedMetricError):
        ipcw_auc([0.1, 0.2], [1, 1])
    # zero-weight positives do not count
    with pytest.raises(UndefinedMetricError):
        ipcw_auc([0.1, 0.2], [1, 0], [0.0, 1.0])


def test_rate_edges_and_monotonicity(rng):
    s = rng.random(50)
    y = rng.integers(0, 2, 50)
    w = rng.random(50)
    assert ipcw_rate(s, y, w, 0.0, "tpr") == 1.0
    assert ipcw_rate(s, y, w, 0.0, "fpr") == 1.0
    assert ipcw_rate(s * 0.99, y, w, 1.0, "tpr") == 0.0
    grid = np.linspace(0, 1, 101)
    tpr = [ipcw_rate(s, y, w, t, "tpr") for t in grid]
    assert np.all(np.diff(tpr) <= 0)
    with pytest.raises(UndefinedMetricError):
        ipcw_rate(s, np.zeros(50), w, 0.5, "tpr")


def test_log_loss_hand_case():
    s = [0.9, 0.2, 0.6, 0.4, 0.7]
    y = [1, 0, 1, 0, 0]
    w = [1.0, 2.0, 0.5, 1.5, 1.0]
    expected = (-math.log(0.9) - 2 * math.log(0.8) - 0.5 * math.log(0.6)
                - 1.5 * math.log(0.6) - math.log(0.3)) / 6.0
    assert ipcw_log_loss(s, y, w) == pytest.approx(expected, abs=1e-15)
    assert ipcw_log_loss([1.0], [1]) < 1e-14
    assert math.isfinite(ipcw_log_loss([0.0], [1]))


def test_log_loss_at_base_rate_is_entropy():
    y = np.array([1, 0, 0, 1, 0])
    w = np.array([2.0, 1.0, 1.0, 1.0, 3.0])
    p = np.sum(w * y) / w.sum()
    entropy = -(p * math.log(p) + (1 - p) * math.log(1 - p))
    assert ipcw_log_loss(np.full(5, p), y, w) == pytest.approx(entropy, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(instances, st.floats(0.01, 100.0))
def test_scale_invariance(inst, c):
    s, y, w = inst
    w2 = [c * x for x in w]
    assert ipcw_log_loss(s, y, w2) == pytest.approx(ipcw_log_loss(s, y, w), rel=1e-12)
    if 0 < sum(y) < len(y):
        assert ipcw_auc(s, y, w2) == pytest.approx(ipcw_auc(s, y, w), rel=1e-12)


def test_uniform_weights_equal_unweighted(rng):
    s = rng.random(40)
    y = rng.integers(0, 2, 40)
    w = np.full(40, 1 / 40)
    assert ipcw_auc(s, y, w) == pytest.approx(ipcw_auc(s, y), abs=1e-15)
    assert ipcw_rate(s, y, w, 0.3) == pytest.approx(ipcw_rate(s, y, None, 0.3), abs=1e-15)


def _draw_calibrated(n, a, b, seed):
    rng = np.random.default_rng(seed)
    s = rng.beta(2.0, 5.0, n)
    p = special.expit(a + b * special.logit(s))
    return s, (rng.random(n) < p).astype(int)


def test_calibration_recovers_identity():
    s, y = _draw_calibrated(50_000, 0.0, 1.0, 1)
    model = fit_calibration_curve(s, y)
    assert abs(model.intercept) < 0.05 and abs(model.slope - 1) < 0.05


def test_calibration_recovers_parameters():
    s, y = _draw_calibrated(50_000, 0.5, 2.0, 2)
    model = fit_calibration_curve(s, y)
    assert model.intercept == pytest.approx(0.5, abs=0.1)
    assert model.slope == pytest.approx(2.0, abs=0.1)


def test_calibration_fit_is_weighted_mle():
    s, y = _draw_calibrated(300, 0.2, 1.3, 3)
    w = np.random.default_rng(0).random(300)
    model = fit_calibration_curve(s, y, w)
    beta = oracles.irls_logistic(np.column_stack([np.ones(300), special.logit(s)]), y, w / w.sum())
    assert np.allclose([model.intercept, model.slope], beta, atol=1e-7)


def test_calibration_degenerate_outcome():
    with pytest.raises(CalibrationError):
        fit_calibration_curve([0.2, 0.4, 0.6], [1, 1, 1])


def test_calibration_nonconvergence_carries_iterate():
    s, y = _draw_calibrated(200, 0.0, 1.0, 4)
    with pytest.raises(CalibrationError) as info:
        fit_calibration_curve(s, y, max_iter=1, tol=1e-30)
    assert info.value.params is not None and info.value.grad_norm > 0


def test_invert_calibration_examples():
    assert invert_calibration(IDENTITY_CALIBRATION, 0.075) == 0.075
    s = invert_calibration(CalibrationModel(0.0, 2.0), 0.2)
    assert s == pytest.approx(special.expit(special.logit(0.2) / 2), abs=1e-15)
    assert CalibrationModel(0.0, 2.0)(s) == pytest.approx(0.2, abs=1e-12)
    with pytest.raises(NonInvertibleError):
        invert_calibration(CalibrationModel(0.0, -1.0), 0.2)


@settings(max_examples=100, deadline=None)
@given(st.floats(-3, 3), st.floats(0.1, 5), st.floats(0.001, 0.999))
def test_inverse_round_trip(a, b, t):
    model = CalibrationModel(a, b)
    s = invert_calibration(model, t)
    if 1e-6 < s < 1 - 1e-6:
        assert abs(model(s) - t) < 1e-10
        assert s == pytest.approx(oracles.invert_logit_linear(a, b, t), rel=1e-12, abs=1e-300)


def test_ace_examples():
    s = np.array([0.1, 0.3, 0.5, 0.7, 0.9])
    y = np.array([0, 0, 1, 1, 1])
    assert ace(s, y, None, IDENTITY_CALIBRATION) == 0.0
    model = CalibrationModel(0.4, 1.0)
    w = np.array([1.0, 2.0, 1.0, 1.0, 0.5])
    gaps = [abs(v - 1 / (1 + math.exp(-(0.4 + math.log(v / (1 - v)))))) for v in s]
    assert ace(s, y, w, model) == pytest.approx(np.dot(w, gaps) / w.sum(), abs=1e-15)
    assert ace(s, y, w, CalibrationModel(10.0, 1.0)) <= 1.0


def test_intergroup_variance():
    assert intergroup_variance([0.3, 0.3, 0.3]) == 0.0
    assert intergroup_variance([0.2, 0.4]) == pytest.approx(0.01, abs=1e-15)
    assert intergroup_variance([0.7]) == 0.0


def test_bootstrap_constant_and_single_replicate(rng):
    strata = strata_labels(rng.integers(0, 2, 40), rng.integers(0, 2, 40))
    ci = stratified_bootstrap(lambda ix: 3.0, strata, n_replicates=50, seed=1)
    assert ci.lower == ci.upper == 3.0
    vals = rng.random(40)
    one = stratified_bootstrap(lambda ix: vals[ix].mean(), strata, n_replicates=1, seed=2)
    assert one.lower == one.upper == one.replicates[0]


def test_bootstrap_deterministic_and_stratified(rng):
    labels = np.array([0] * 30 + [1] * 10)
    vals = rng.random(40)
    seen = []

    def stat(ix):
        seen.append(np.bincount(labels[ix], minlength=2))
        return vals[ix].mean()

    a = stratified_bootstrap(stat, labels, n_replicates=20, seed=9)
    b = stratified_bootstrap(lambda ix: vals[ix].mean(), labels, n_replicates=20, seed=9)
    assert np.array_equal(a.replicates, b.replicates)
    assert all(np.array_equal(c, [30, 10]) for c in seen)
    c = stratified_bootstrap(lambda ix: vals[ix].mean(), labels, n_replicates=20, seed=9, n_jobs=3)
    assert np.array_equal(a.replicates, c.replicates)


def test_bootstrap_pools_models_and_counts_failures():
    labels = np.array([0, 0, 1, 1])
    ci = stratified_bootstrap(lambda ix: np.array([1.0, 2.0]), labels, n_replicates=5)
    assert ci.replicates.size == 10 and ci.point == 1.5

    def flaky(ix):
        raise UndefinedMetricError("nope")

    with pytest.raises(UndefinedMetricError):
        stratified_bootstrap(flaky, labels, n_replicates=2)


def test_bootstrap_empty_stratum():
    with pytest.raises(StratificationError):
        stratified_bootstrap(lambda ix: 0.0, ["a", "a"], n_replicates=2, required=["a", "b"])


def test_bootstrap_coverage():
    truth = 0.3
    hits = 0
    reps = 200
    for r in range(reps):
        g = np.random.default_rng(1000 + r)
        x = (g.random(500) < truth).astype(float)
        w = g.uniform(0.5, 1.5, 500)
        ci = stratified_bootstrap(lambda ix: weighted_mean(x[ix], w[ix]), np.zeros(500),
                                  n_replicates=200, seed=r)
        hits += ci.lower <= truth <= ci.upper
    assert hits / reps >= 0.90
