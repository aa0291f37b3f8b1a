"""IPCW-weighted performance metrics, calibration curves and bootstrap CIs.

Every metric takes unnormalised nonnegative sample weights and
renormalises them over the samples it is computed on, so results are
invariant to rescaling the weights. With uniform weights each metric
reduces to its ordinary unweighted form.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import (CalibrationError, NonInvertibleError, StratificationError,
                     UndefinedMetricError)

EPS = 1e-15


def as_weights(weights, n=None):
    """Accept a WeightVector, an array or ``None`` (uniform)."""
    if weights is None:
        return np.ones(n, dtype=float)
    w = getattr(weights, "weights", weights)
    w = np.asarray(w, dtype=float)
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    # every metric is scale invariant; constant weights become exact unit counts
    if w.size and w[0] > 0 and np.all(w == w[0]):
        return np.ones(w.shape, dtype=float)
    return w


def clip_prob(s):
    return np.clip(np.asarray(s, dtype=float), EPS, 1 - EPS)


def _prep(scores, y, weights):
    s = np.asarray(scores, dtype=float)
    y = np.asarray(y).astype(int)
    w = as_weights(weights, len(s))
    if not (len(s) == len(y) == len(w)):
        raise ValueError("scores, y and weights must have equal length")
    return s, y, w


def ipcw_auc(scores, y, weights=None):
    """Weighted AUC over positive/negative pairs; ties count 1/2.

    Pair weights are the product of the positive and negative sample
    weights, normalised over all positive-negative pairs.
    """
    s, y, w = _prep(scores, y, weights)
    pos_w = w * (y == 1)
    neg_w = w * (y == 0)
    tot_pos, tot_neg = pos_w.sum(), neg_w.sum()
    if tot_pos <= 0 or tot_neg <= 0:
        raise UndefinedMetricError("AUC needs positive weight in both outcome classes")
    neg = y == 0
    order = np.argsort(s[neg], kind="stable")
    neg_s = s[neg][order]
    cum = np.concatenate([[0.0], np.cumsum(neg_w[neg][order])])
    pos = y == 1
    below = cum[np.searchsorted(neg_s, s[pos], side="left")]
    upto = cum[np.searchsorted(neg_s, s[pos], side="right")]
    return float(np.sum(pos_w[pos] * (below + 0.5 * (upto - below))) / (tot_pos * tot_neg))


def ipcw_log_loss(scores, y, weights=None):
    s, y, w = _prep(scores, y, weights)
    total = w.sum()
    if total <= 0:
        raise UndefinedMetricError("log-loss needs positive total weight")
    s = clip_prob(s)
    loss = -(y * np.log(s) + (1 - y) * np.log1p(-s))
    return float(np.sum(w * loss) / total)


def ipcw_rate(scores, y, weights=None, threshold=0.5, kind="tpr"):
    """Weighted true or false positive rate of the rule ``score >= threshold``."""
    s, y, w = _prep(scores, y, weights)
    kind = kind.lower()
    if kind not in ("tpr", "fpr"):
        raise ValueError("kind must be 'tpr' or 'fpr'")
    cls_w = w * (y == (1 if kind == "tpr" else 0))
    total = cls_w.sum()
    if total <= 0:
        raise UndefinedMetricError(f"{kind.upper()} needs positive weight in its outcome class")
    return float(np.sum(cls_w * (s >= threshold)) / total)


def weighted_mean(values, weights=None):
    v = np.asarray(values, dtype=float)
    w = as_weights(weights, len(v))
    return float(np.sum(w * v) / w.sum())


# --- calibration curve -------------------------------------------------------

@dataclass(frozen=True)
class CalibrationModel:
    """``c(s) = sigmoid(intercept + slope * logit(s))``."""

    intercept: float = 0.0
    slope: float = 1.0

    @property
    def is_identity(self):
        return self.intercept == 0.0 and self.slope == 1.0

    def __call__(self, s):
        if self.is_identity:
            return np.array(s, dtype=float)
        return special.expit(self.intercept + self.slope * special.logit(clip_prob(s)))

    def inverse(self, target):
        return invert_calibration(self, target)


IDENTITY_CALIBRATION = CalibrationModel(0.0, 1.0)


def fit_calibration_curve(scores, y, weights=None, tol=1e-8, max_iter=100) -> CalibrationModel:
    """Weighted logistic regression of ``y`` on ``logit(score)`` by Newton's method.

    Raises:
        CalibrationError: if an outcome class has no weight, or the iteration
            does not reach gradient norm ``tol`` within ``max_iter`` steps.
    """
    s, y, w = _prep(scores, y, weights)
    if np.sum(w * y) <= 0 or np.sum(w * (1 - y)) <= 0:
        raise CalibrationError("calibration fit needs positive weight in both classes")
    w = w / w.sum()
    X = np.column_stack([np.ones_like(s), special.logit(clip_prob(s))])
    theta = np.array([0.0, 1.0])

    def nll(th):
        eta = X @ th
        return np.sum(w * (np.logaddexp(0.0, eta) - y * eta))

    grad_norm = np.inf
    for _ in range(max_iter):
        p = special.expit(X @ theta)
        grad = X.T @ (w * (p - y))
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm < tol:
            return CalibrationModel(float(theta[0]), float(theta[1]))
        hess = (X * (w * p * (1 - p))[:, None]).T @ X
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)):
            break
        f0, slope, t = nll(theta), grad @ step, 1.0
        while nll(theta - t * step) > f0 - 1e-4 * t * slope and t > 1e-10:
            t *= 0.5
        theta = theta - t * step
    raise CalibrationError("calibration curve fit did not converge", params=theta.copy(),
                           grad_norm=grad_norm)


def invert_calibration(model: CalibrationModel, target):
    """Score ``s`` with ``c(s) = target``: ``sigmoid((logit(target) - a) / b)``."""
    if not model.slope > 0:
        raise NonInvertibleError(f"calibration slope {model.slope} is not positive")
    target = np.asarray(target, dtype=float)
    if np.any((target <= 0) | (target >= 1)):
        raise ValueError("target must lie in (0, 1)")
    if model.is_identity:
        return float(target) if target.ndim == 0 else target.copy()
    out = special.expit((special.logit(target) - model.intercept) / model.slope)
    return float(out) if out.ndim == 0 else out


def ace(scores, y, weights=None, calibration: CalibrationModel | None = None):
    """Weighted mean absolute gap between scores and the calibration curve.

    If ``calibration`` is omitted it is fitted on the same sample.
    """
    s, y, w = _prep(scores, y, weights)
    if calibration is None:
        calibration = fit_calibration_curve(s, y, w)
    return float(np.sum(w * np.abs(s - calibration(s))) / w.sum())


def intergroup_variance(values):
    """Population variance of per-group metric values."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("need at least one group value")
    return float(np.mean((v - v.mean()) ** 2))


# --- bootstrap ------------------------------------------------------------------

@dataclass(frozen=True)
class BootstrapCI:
    point: float
    lower: float
    upper: float
    n_replicates: int
    seed: int
    replicates: np.ndarray = field(repr=False, default=None)
    n_failed: int = 0


def strata_labels(*label_arrays):
    """Combine label arrays (e.g. outcome and group) into one stratum key each."""
    cols = [np.asarray(a).astype(str) for a in label_arrays]
    return np.array(["|".join(t) for t in zip(*cols)], dtype=object)


def bootstrap_indices(strata, n_replicates, seed, required=None):
    """Per-replicate index arrays, resampled with replacement within strata.

    Replicate ``b`` draws from ``SeedSequence(seed).spawn(n)[b]``, so a
    replicate's indices do not depend on how many replicates are requested.
    """
    strata = np.asarray(strata, dtype=object)
    keys = sorted(set(strata.tolist()), key=str)
    if required is not None:
        missing = [k for k in required if k not in set(keys)]
        if missing:
            raise StratificationError(f"empty strata: {missing}")
    if len(strata) == 0:
        raise StratificationError("no samples to resample")
    members = [np.flatnonzero(strata == k) for k in keys]
    children = np.random.SeedSequence(seed).spawn(n_replicates)
    out = []
    for child in children:
        rng = np.random.default_rng(child)
        out.append(np.concatenate([m[rng.integers(0, len(m), len(m))] for m in members]))
    return out


def stratified_bootstrap(statistic, strata, n_replicates=1000, seed=0, required=None,
                         n_jobs=1, alpha=0.05) -> BootstrapCI:
    """Percentile CI of ``statistic(indices)`` under stratified resampling.

    ``statistic`` maps an index array to a float or to an array of floats
    (one per trained model); arrays are pooled over models and replicates.
    Replicates where the statistic is undefined are dropped and counted.
    """
    if n_replicates < 1:
        raise ValueError("n_replicates must be >= 1")
    strata = np.asarray(strata, dtype=object)
    point = np.atleast_1d(np.asarray(statistic(np.arange(len(strata))), dtype=float))
    idx = bootstrap_indices(strata, n_replicates, seed, required)

    def run(ix):
        try:
            return np.atleast_1d(np.asarray(statistic(ix), dtype=float))
        except UndefinedMetricError:
            return np.full(point.shape, np.nan)

    if n_jobs and n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            reps = list(pool.map(run, idx))
    else:
        reps = [run(ix) for ix in idx]
    pooled = np.concatenate(reps)
    failed = int(np.sum(np.isnan(pooled)))
    good = pooled[~np.isnan(pooled)]
    if good.size == 0:
        lo = hi = float("nan")
    else:
        lo, hi = np.quantile(good, [alpha / 2, 1 - alpha / 2])
    return BootstrapCI(point=float(np.mean(point)), lower=float(lo), upper=float(hi),
                       n_replicates=n_replicates, seed=seed, replicates=pooled, n_failed=failed)
