import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import special

from fairnb.errors import ConfigError, TrainingError
from fairnb.metrics import intergroup_variance, ipcw_auc, ipcw_rate
from fairnb.train import (Architecture, Candidate, RiskModel, StratifiedModel, TrainConfig,
                          TrainData, cross_fit, dro_update, load_model, mmd_penalty,
                          parity_penalty, relaxed_metric, select_model, surrogate, train_dro,
                          train_erm, train_regularized, train_stratified, training_log_csv,
                          weighted_mmd)
from fairnb.train.models import init_params
from fairnb.train.objectives import mmd_penalty_grad, parity_penalty_grad, weighted_mmd_grad
from fairnb.train.trainer import batch_objective

import oracles


def make_data(n=400, seed=0, shift=0.0, noise=(1.0, 1.0), dim=3):
    """Two groups; group 1 features are shifted and its label noise scaled."""
    rng = np.random.default_rng(seed)
    group = (rng.random(n) < 0.5).astype(int)
    X = rng.normal(size=(n, dim))
    X[group == 1, -1] += shift
    beta = np.linspace(1.0, 0.3, dim)
    logit = X @ beta - 1.0
    scale = np.where(group == 1, noise[1], noise[0])
    y = (rng.random(n) < special.expit(logit / scale)).astype(int)
    w = rng.uniform(0.5, 1.5, n)
    w = w * n / w.sum()
    return TrainData(X, y, w, group, ("A", "B"))


# --- surrogates and penalties --------------------------------------------------

def test_surrogate_values():
    z = np.array([-2.0, 0.0, 0.5])
    assert np.array_equal(surrogate("step", z), [0.0, 0.0, 1.0])
    assert np.array_equal(surrogate("hinge", z), [0.0, 1.0, 1.5])
    assert surrogate("softplus", 0.0) == pytest.approx(1.0, abs=1e-15)
    assert surrogate("sigmoid", 0.0) == 0.5
    with pytest.raises(ValueError):
        surrogate("cubic", z)


def test_mmd_examples():
    assert weighted_mmd([0.1, 0.4], [1, 1], [0.1, 0.4], [1, 1]) == 0.0
    # single points: 2 - 2 exp(-|a - b|)
    assert weighted_mmd([0.2], [1], [0.7], [3]) == pytest.approx(2 - 2 * math.exp(-0.5), abs=1e-15)
    assert weighted_mmd([0.2], [1], [0.7], [1], gamma=4.0) == pytest.approx(2 - 2 * math.exp(-2.0), abs=1e-15)


def test_mmd_matches_direct_sum(rng):
    for _ in range(10):
        na, nb = rng.integers(1, 30, 2)
        sa, sb = rng.random(na), rng.random(nb)
        sa[: na // 3] = 0.5  # ties
        wa, wb = rng.random(na) + 0.1, rng.random(nb) + 0.1
        gamma = float(rng.uniform(0.2, 5))
        got = weighted_mmd(sa, wa, sb, wb, gamma)
        assert got == pytest.approx(oracles.mmd_direct(sa, wa, sb, wb, gamma), abs=1e-12)
        assert got >= 0


def test_mmd_gradient_matches_finite_difference(rng):
    sa, sb = rng.random(7), rng.random(9)
    wa, wb = rng.random(7) + 0.1, rng.random(9) + 0.1
    _, ga, gb = weighted_mmd_grad(sa, wa, sb, wb, 1.5)
    fd_a = oracles.central_difference(lambda x: weighted_mmd(x, wa, sb, wb, 1.5), sa)
    fd_b = oracles.central_difference(lambda x: weighted_mmd(sa, wa, x, wb, 1.5), sb)
    assert np.allclose(ga, fd_a, atol=1e-7)
    assert np.allclose(gb, fd_b, atol=1e-7)


def test_mmd_penalty_zero_for_identical_groups():
    s = np.array([0.1, 0.5, 0.9, 0.3])
    y = np.array([0, 1, 1, 0])
    s2, y2 = np.tile(s, 2), np.tile(y, 2)
    g = np.array(["a"] * 4 + ["b"] * 4)
    assert mmd_penalty(s2, y2, g, np.ones(8)) == 0.0
    assert mmd_penalty(s2 * 0.5, y2, np.where(np.arange(8) < 4, "a", "b"), np.ones(8)) == 0.0


def test_mmd_penalty_normalisation_and_skips():
    s = np.array([0.2, 0.8, 0.3, 0.6])
    y = np.array([0, 0, 1, 1])
    g = np.array([0, 1, 0, 1])
    z = special.logit(s)
    vk, _, sk = mmd_penalty_grad(z, y, g, np.ones(4), 2, 1.0, "K")
    v2k, _, _ = mmd_penalty_grad(z, y, g, np.ones(4), 2, 1.0, "2K")
    assert sk == 0 and v2k == pytest.approx(vk / 2, abs=1e-15)
    cells = sum(weighted_mmd([s[i]], [1], s[y == c], [1, 1]) for c in (0, 1)
                for i in np.flatnonzero(y == c))
    assert vk == pytest.approx(cells / 2, abs=1e-15)
    # no negatives in group 1: one cell skipped and the rest rescaled
    y3 = np.array([0, 1, 1, 1])
    v3, _, sk3 = mmd_penalty_grad(z, y3, g, np.ones(4), 2, 1.0, "K")
    assert sk3 == 1
    live = weighted_mmd([0.3], [1], s[y3 == 1], [1, 1, 1]) + weighted_mmd([0.8, 0.6], [1, 1], s[y3 == 1], [1, 1, 1])
    assert v3 == pytest.approx(live * (4 / 3) / 2, abs=1e-15)


def test_parity_hand_case():
    s = np.array([0.9, 0.1, 0.6, 0.4])
    y = np.array([1, 0, 1, 0])
    g = np.array(["a", "a", "b", "b"])
    # the hinge never saturates, so equal hard rates still leave a relaxed gap
    assert parity_penalty(s, y, g, np.ones(4), ("tpr@0.5", "fpr@0.5"), "hinge") > 0
    y2 = np.array([1, 0, 0, 1])
    pen = parity_penalty(s, y2, g, np.ones(4), ("tpr@0.5",), "sigmoid")
    ta = special.expit(0.4)
    tb = special.expit(-0.1)
    overall = (ta + tb) / 2
    assert pen == pytest.approx((ta - overall) ** 2 + (tb - overall) ** 2, abs=1e-15)


def test_parity_gradient_matches_finite_difference(rng):
    z = rng.normal(size=12)
    y = np.array([0, 1] * 6)
    g = np.repeat([0, 1, 2], 4)
    w = rng.random(12) + 0.2
    metrics = [("tpr", 0.3), ("fpr", 0.3), ("auc", None)]
    _, grad, _ = parity_penalty_grad(z, y, g, w, 3, metrics, "softplus")
    fd = oracles.central_difference(lambda v: parity_penalty_grad(v, y, g, w, 3, metrics, "softplus")[0], z)
    assert np.allclose(grad, fd, atol=1e-7)


def test_step_relaxation_equals_rate(rng):
    s = rng.random(50)
    y = rng.integers(0, 2, 50)
    w = rng.random(50)
    for kind in ("tpr", "fpr"):
        # the step is strict, so tie-free data is needed for equality with the inclusive rate
        assert relaxed_metric(kind, s, y, w, 0.45, "step") == pytest.approx(
            ipcw_rate(s, y, w, 0.45, kind), abs=1e-12)


def test_dro_update_cases():
    lam = np.array([0.25, 0.25, 0.5])
    assert np.array_equal(dro_update(lam, [1.0, 2.0, 3.0], 0.0), lam)
    got = dro_update(lam, [1.0, 2.0, 3.0], 0.7)
    assert np.allclose(got, oracles.dro_step(lam, [1.0, 2.0, 3.0], 0.7), atol=1e-15)
    assert got.sum() == pytest.approx(1.0, abs=1e-15)
    # huge losses do not overflow
    big = dro_update(lam, [1e5, 0.0, 0.0], 1.0)
    assert np.all(np.isfinite(big)) and big[0] == pytest.approx(1.0)
    # an absent group keeps its weight
    part = dro_update(lam, [5.0, 1.0, 0.0], 1.0, present=[True, True, False])
    assert part[2] == 0.5 and part[:2].sum() == pytest.approx(0.5, abs=1e-15)


# --- models ------------------------------------------------------------------------

@pytest.mark.parametrize("arch", [Architecture(), Architecture("mlp", (5, 3), "tanh"),
                                  Architecture("mlp", (4,), "relu")])
def test_backprop_matches_finite_difference(arch, rng):
    X = rng.normal(size=(20, 3))
    y = rng.integers(0, 2, 20)
    w = rng.random(20)
    theta = init_params(arch, 3, np.random.default_rng(1))
    data = TrainData(X, y, w, np.zeros(20, int), ("A",))
    cfg = TrainConfig(kind=arch.kind, hidden=arch.hidden, activation=arch.activation)
    idx = np.arange(20)
    _, grad, _ = batch_objective(theta, arch, data, cfg, idx)
    fd = oracles.central_difference(lambda t: batch_objective(t, arch, data, cfg, idx)[0], theta)
    assert np.allclose(grad, fd, atol=1e-6)


def test_regularised_gradient_matches_finite_difference(rng):
    data = make_data(60, seed=3, shift=1.0)
    arch = Architecture()
    theta = init_params(arch, 3, np.random.default_rng(2))
    idx = np.arange(60)
    for cfg in (TrainConfig(objective="reg_mmd", lam=2.0),
                TrainConfig(objective="reg_parity", lam=2.0, parity_metrics=("tpr@0.3", "auc"))):
        _, grad, _ = batch_objective(theta, arch, data, cfg, idx)
        fd = oracles.central_difference(lambda t: batch_objective(t, arch, data, cfg, idx)[0], theta)
        assert np.allclose(grad, fd, atol=1e-6)


def test_model_serialisation_round_trip(rng):
    arch = Architecture("mlp", (4,), "tanh")
    model = RiskModel(arch, 3, init_params(arch, 3, rng))
    X = rng.normal(size=(5, 3))
    back = load_model(model.to_text())
    assert np.array_equal(back.predict(X), model.predict(X))
    strat = StratifiedModel({"A": model, "B": RiskModel(Architecture(), 3, np.zeros(4))})
    back = load_model(strat.to_text())
    g = np.array(["A", "B", "A", "B", "B"])
    assert np.array_equal(back.predict(X, g), strat.predict(X, g))
    with pytest.raises(ValueError):
        model.params[0] = 1.0


# --- training ----------------------------------------------------------------------------

def test_erm_matches_weighted_logistic_regression():
    data = make_data(500, seed=4)
    cfg = TrainConfig(lr=0.05, batch_size=500, max_epochs=3000, patience=3000)
    res = train_erm(data, data, cfg)
    beta = oracles.irls_logistic(np.column_stack([data.X, np.ones(500)]), data.y, data.w / data.w.sum())
    assert np.allclose(res.model.params, beta, atol=1e-3)


def test_erm_learns_base_rate_without_features():
    rng = np.random.default_rng(5)
    y = (rng.random(2000) < 0.3).astype(int)
    data = TrainData(np.zeros((2000, 1)), y, np.ones(2000), np.zeros(2000, int), ("A",))
    res = train_erm(data, data, TrainConfig(lr=0.05))
    assert res.model.predict(np.zeros((1, 1)))[0] == pytest.approx(y.mean(), abs=0.01)


def test_erm_separates_toy_data():
    X = np.array([[-2.0], [-1.5], [-1.0], [1.0], [1.5], [2.0]])
    y = np.array([0, 0, 0, 1, 1, 1])
    data = TrainData(X, y, np.ones(6), np.zeros(6, int), ("A",))
    res = train_erm(data, data, TrainConfig(lr=0.1, batch_size=6, max_epochs=200))
    assert ipcw_auc(res.model.predict(X), y) == 1.0
    assert res.model.predict(X)[-1] > 0.9


def test_zero_lambda_is_bitwise_erm():
    data, dev = make_data(300, seed=6, shift=1.0), make_data(100, seed=7, shift=1.0)
    base = train_erm(data, dev, TrainConfig(max_epochs=5, seed=3))
    for obj in ("reg_mmd", "reg_parity"):
        reg = train_regularized(data, dev, TrainConfig(objective=obj, lam=0.0, max_epochs=5, seed=3))
        assert np.array_equal(reg.model.params, base.model.params)


def test_mmd_regularisation_reduces_rate_gap():
    data = make_data(3000, seed=8, shift=1.5)
    dev = make_data(1000, seed=9, shift=1.5)
    test = make_data(3000, seed=10, shift=1.5)
    cfg = TrainConfig(batch_size=512, max_epochs=40, patience=5)

    def gaps(model):
        s = model.predict(test.X)
        out = []
        for kind in ("tpr", "fpr"):
            out.append(intergroup_variance([ipcw_rate(s[test.group == k], test.y[test.group == k],
                                                      test.w[test.group == k], 0.3, kind) for k in (0, 1)]))
        return out

    erm = gaps(train_erm(data, dev, cfg).model)
    reg = gaps(train_regularized(data, dev, replace(cfg, objective="reg_mmd", lam=10.0)).model)
    assert reg[0] < erm[0] and reg[1] < erm[1]


def test_early_stopping_contracts():
    data, dev = make_data(300, seed=11), make_data(100, seed=12)
    res = train_erm(data, dev, TrainConfig(max_epochs=30, patience=2, lr=0.5, optimizer="sgd"))
    devs = [row[3] for row in res.history]
    assert res.best_dev == min(devs)
    assert res.best_epoch == devs.index(min(devs))
    assert res.history[0][2] is None
    assert len(res.history) - 1 <= 30
    last_best = res.best_epoch
    assert len(res.history) - 1 - last_best <= 2 or len(res.history) == 31
    text = training_log_csv([res])
    assert text.splitlines()[0] == "epoch,fold,objective_value,dev_metric,worst_group"
    assert text.splitlines()[1].split(",")[2] == "NA"


def test_training_is_deterministic():
    data, dev = make_data(200, seed=13), make_data(80, seed=14)
    cfg = TrainConfig(kind="mlp", hidden=(4,), dropout=0.2, max_epochs=4, balanced=True)
    a, b = train_erm(data, dev, cfg), train_erm(data, dev, cfg)
    assert np.array_equal(a.model.params, b.model.params)


def test_single_group_dro_equals_erm():
    data = make_data(200, seed=15)
    one = TrainData(data.X, data.y, data.w, np.zeros(200, int), ("A",))
    cfg = TrainConfig(max_epochs=6, seed=2)
    erm = train_erm(one, one, cfg)
    dro = train_dro(one, one, replace(cfg, eta=0.5))
    assert np.array_equal(erm.model.params, dro.model.params)
    assert np.array_equal(dro.dro_weights, [1.0])


def test_dro_upweights_harder_group():
    data = make_data(2000, seed=16, noise=(0.5, 3.0))
    dev = make_data(600, seed=17, noise=(0.5, 3.0))
    res = train_dro(data, dev, TrainConfig(eta=0.1, batch_size=256, max_epochs=20, patience=20))
    assert res.dro_weights[1] > 0.5
    # a full-batch reference run of the same update agrees on the direction
    ref = np.array([0.5, 0.5])
    s = res.model.predict(data.X)
    losses = [-np.mean(np.where(data.y[data.group == k] == 1, np.log(s[data.group == k]),
                                np.log(1 - s[data.group == k]))) for k in (0, 1)]
    for _ in range(50):
        ref = np.array(oracles.dro_step(ref, losses, 0.1))
    assert ref[1] > 0.5


def test_dro_rejects_absent_group():
    data = make_data(100, seed=18)
    only_a = data.subset(data.group == 0)
    with pytest.raises(TrainingError):
        train_dro(only_a, data, TrainConfig(max_epochs=1))


def test_stratified_training_routes_by_group():
    data, dev = make_data(400, seed=19, shift=2.0), make_data(200, seed=20, shift=2.0)
    res = train_stratified(data, dev, TrainConfig(max_epochs=5))
    assert set(res.results) == {"A", "B"} and not res.errors
    X = dev.X[:6]
    labels = dev.group_labels[:6]
    for i in range(6):
        assert res.model.predict(X[i:i + 1], labels[i:i + 1])[0] == \
            res.model.models[labels[i]].predict(X[i:i + 1])[0]
    with pytest.raises(KeyError):
        res.model.predict(X[:1], ["C"])
    # a group without development data is reported, not fatal
    partial = train_stratified(data, dev.subset(dev.group == 0), TrainConfig(max_epochs=2))
    assert set(partial.errors) == {"B"} and set(partial.results) == {"A"}


def test_cross_fit_uses_each_fold_as_dev():
    parts = [make_data(100, seed=30 + k) for k in range(3)]
    out = cross_fit(parts, TrainConfig(max_epochs=2))
    assert [r.history[0][1] for r in out] == [0, 1, 2]
    single = cross_fit(parts[:1], TrainConfig(max_epochs=2))
    assert len(single) == 1


def test_select_model_ties_and_directions():
    mk = lambda lam, v: Candidate(TrainConfig(objective="reg_mmd", lam=lam),
                                  {"pooled_logloss": [v, v], "worst_auc": [v, v], "worst_logloss": [v, v]})
    cands = [mk(10.0, 0.3), mk(1.0, 0.3), mk(0.1, 0.5)]
    assert select_model(cands, "pooled_logloss") == 1
    assert select_model(cands, "worst_auc") == 2
    cands.append(Candidate(TrainConfig(), {"pooled_logloss": [math.nan], "worst_auc": [math.nan],
                                           "worst_logloss": [math.nan]}))
    assert select_model(cands, "worst_logloss") == 1
    with pytest.raises(ConfigError):
        select_model(cands, "accuracy")


def test_divergence_raises_training_error():
    data = make_data(50, seed=21)
    bad = TrainData(data.X * 1e200, data.y, data.w, data.group, data.groups)
    with np.errstate(all="ignore"), pytest.raises(TrainingError) as info:
        train_erm(bad, data, TrainConfig(optimizer="sgd", lr=1e10, max_epochs=3))
    assert info.value.diagnostics["fold"] == 0


@pytest.mark.parametrize("bad", [dict(objective="svm"), dict(lam=-1.0), dict(lr=0.0),
                                 dict(surrogate="step"), dict(parity_metrics=("tpr",)),
                                 dict(kind="mlp"), dict(dropout=1.0)])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"learning_rate": 0.1})
