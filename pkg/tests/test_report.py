import math

import numpy as np
import pytest

from fairnb.decision import net_benefit_fixed
from fairnb.errors import DomainError
from fairnb.metrics import ipcw_auc
from fairnb.report import EvalSpec, compute_metrics, evaluate, row_keys


def sample(n=300, seed=0):
    rng = np.random.default_rng(seed)
    group = (rng.random(n) < 0.4).astype(int)
    s = np.clip(rng.beta(2, 6, n) + 0.05 * group, 0.001, 0.999)
    y = (rng.random(n) < s).astype(int)
    w = rng.uniform(0.5, 1.5, n)
    return s, y, w / w.sum(), group


def test_row_keys_layout():
    spec = EvalSpec(thresholds=(0.1,), nb_pairs=((0.1, 0.1), (0.1, 0.2)))
    keys = row_keys(("A", "B"), spec)
    assert keys[:4] == [("auc", "overall", None), ("auc", "A", None), ("auc", "B", None),
                        ("auc", "worst", None)]
    assert ("igvar_tpr", "all", 0.1) in keys
    assert ("nb(tau_star=0.2)", "worst", 0.1) in keys
    assert len(keys) == 3 * 4 + 2 * 4 + 2 * 2 * 4


def test_point_values_match_direct_metrics():
    s, y, w, g = sample()
    spec = EvalSpec(thresholds=(0.2,), nb_pairs=((0.2, 0.2),), n_replicates=5)
    rep = evaluate([s], y, w, g, ("A", "B"), spec)
    assert rep.value("auc") == pytest.approx(ipcw_auc(s, y, w), abs=1e-15)
    assert rep.value("auc", "B") == pytest.approx(ipcw_auc(s[g == 1], y[g == 1], w[g == 1]), abs=1e-15)
    assert rep.value("auc", "worst") == min(rep.value("auc", "A"), rep.value("auc", "B"))
    assert rep.value("nb", "A", 0.2) == pytest.approx(
        net_benefit_fixed(s[g == 0], y[g == 0], w[g == 0], 0.2, 0.2), abs=1e-15)
    tprs = [rep.value("tpr", k, 0.2) for k in ("A", "B")]
    assert rep.value("igvar_tpr", "all", 0.2) == pytest.approx(np.var(tprs), abs=1e-15)


def test_self_baseline_differences_are_zero():
    s, y, w, g = sample()
    rep = evaluate([s], y, w, g, ("A", "B"), EvalSpec(n_replicates=20), baseline_sets=[s.copy()])
    rel = rep.relative
    for arr in (rel["estimate"], rel["lower"], rel["upper"]):
        finite = arr[~np.isnan(arr)]
        assert np.all(finite == 0.0)
    assert "rel_estimate" in rep.to_csv().splitlines()[0]


def test_single_replicate_interval_is_the_replicate():
    s, y, w, g = sample()
    rep = evaluate([s], y, w, g, ("A", "B"), EvalSpec(n_replicates=1, seed=3))
    lo, hi = rep.interval("auc")
    assert lo == hi


def test_bootstrap_is_seeded():
    s, y, w, g = sample()
    a = evaluate([s], y, w, g, ("A", "B"), EvalSpec(n_replicates=30, seed=5))
    b = evaluate([s], y, w, g, ("A", "B"), EvalSpec(n_replicates=30, seed=5), n_jobs=4)
    assert a.to_csv() == b.to_csv()
    c = evaluate([s], y, w, g, ("A", "B"), EvalSpec(n_replicates=30, seed=6))
    assert a.to_csv() != c.to_csv()


def test_multiple_models_average_and_pool():
    s, y, w, g = sample()
    s2 = np.clip(s * 1.1, 0, 1)
    spec = EvalSpec(n_replicates=10)
    both = evaluate([s, s2], y, w, g, ("A", "B"), spec)
    one = evaluate([s], y, w, g, ("A", "B"), spec)
    two = evaluate([s2], y, w, g, ("A", "B"), spec)
    assert both.value("logloss") == pytest.approx((one.value("logloss") + two.value("logloss")) / 2,
                                                  abs=1e-15)


def test_undefined_metrics_are_na():
    s, y, w, g = sample()
    y = y.copy()
    y[g == 1] = 0  # group B has no positives
    rep = evaluate([s], y, w, g, ("A", "B"), EvalSpec(n_replicates=5))
    assert math.isnan(rep.value("auc", "B"))
    assert math.isnan(rep.value("igvar_tpr", "all", 0.075))
    assert rep.value("auc", "worst") == rep.value("auc", "A")
    rows = [r for r in rep.to_csv().splitlines() if r.startswith("auc,B,")]
    assert rows == ["auc,B,NA,NA,NA,NA"]
    assert "NA" in rep.to_text()


def test_hand_net_benefit():
    s = np.array([0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.40, 0.55, 0.70, 0.90])
    y = np.array([0, 0, 1, 0, 0, 1, 0, 1, 1, 1])
    g = np.zeros(10, int)
    spec = EvalSpec(thresholds=(0.2,), nb_pairs=((0.2, 0.2),))
    vals = dict(zip(row_keys(("A",), spec), compute_metrics(s, y, np.ones(10), g, ("A",), spec)))
    assert vals[("nb", "overall", 0.2)] == pytest.approx(0.4 - 0.3 * 0.25, abs=1e-15)
    rr = EvalSpec(thresholds=(0.2,), nb_pairs=((0.2, 0.2),), r=0.3)
    vals = dict(zip(row_keys(("A",), rr), compute_metrics(s, y, np.ones(10), g, ("A",), rr)))
    assert vals[("nb", "overall", 0.2)] == pytest.approx(0.3 * 0.8 * (0.4 - 0.3 * 0.25), abs=1e-15)


@pytest.mark.parametrize("bad", [dict(n_replicates=0), dict(thresholds=(1.0,)),
                                 dict(nb_pairs=((0.1, 0.0),)), dict(r=1.5)])
def test_eval_spec_validation(bad):
    with pytest.raises(DomainError):
        EvalSpec(**bad)
