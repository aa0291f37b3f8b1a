"""Composite horizon outcomes and inverse probability of censoring weights.

The censoring distribution is modelled with a discrete-time logistic
hazard: the time axis is cut into intervals ``(b_j, b_{j+1}]`` and the
probability of being censored in interval ``j``, given survival to its
start, is ``sigmoid(alpha_j + beta . x)``.

Conventions
-----------
* Survival ``G(t, x) = prod_j (1 - h_j(x)) ** f_j(t)`` where ``f_j(t)`` is
  the fraction of interval ``j`` elapsed by ``t``: full intervals count
  fully and the hazard is spread at a constant rate inside the interval
  containing ``t``. ``G`` is exact at the edges and ``G(0, x) = 1``.
* In the likelihood, a censoring event in interval ``j`` is at risk in
  intervals ``0..j``. A subject whose censoring time is unobserved (the
  outcome event happened first) is at risk only in the intervals it fully
  survived, i.e. those with right edge ``b_{j+1} <= u``. With interval edges
  at every distinct censoring time this makes the intercept-only fit equal
  to the Kaplan-Meier estimate of ``P(C > t)`` at the edges.
* Follow-up is truncated at the horizon before fitting and the last edge is
  the horizon itself, so ``G(horizon, x)`` never includes hazard from beyond
  it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special

from ._io import atomic_write_text, render_csv
from .errors import ConfigError, DomainError

logger = logging.getLogger(__name__)

G_FLOOR = 1e-3


@dataclass(frozen=True)
class CompositeOutcome:
    y: int
    u_y: float
    delta_y: int


def derive_composite_outcome(followup_time, event_indicator, horizon) -> CompositeOutcome:
    """Binary horizon outcome, its follow-up time and uncensored indicator.

    >>> derive_composite_outcome(5.0, True, 10.0)
    CompositeOutcome(y=1, u_y=5.0, delta_y=1)
    """
    if followup_time < 0 or not horizon > 0:
        raise DomainError("follow-up time must be >= 0 and horizon > 0")
    y, u, d = composite_outcomes(np.array([followup_time], float),
                                 np.array([event_indicator], bool), horizon)
    return CompositeOutcome(int(y[0]), float(u[0]), int(d[0]))


def composite_outcomes(time, event, horizon):
    """Vectorised composite outcome: returns arrays ``(y, u_y, delta_y)``.

    With ``event`` true the time is ``T`` (and ``C > T``); otherwise it is
    ``C`` (and ``T > C``). The binary outcome is censored iff ``C < T`` and
    ``C < horizon``; censored entries carry ``y = 0``.
    """
    time = np.asarray(time, float)
    event = np.asarray(event, bool)
    if np.any(time < 0) or not horizon > 0:
        raise DomainError("follow-up times must be >= 0 and horizon > 0")
    y = (event & (time <= horizon)).astype(int)
    delta = (event | (time >= horizon)).astype(int)
    u = np.minimum(time, horizon)
    return y, u, delta


@dataclass(frozen=True, eq=False)
class CensoringModel:
    """Discrete-time logistic hazard for the censoring time.

    ``edges`` has ``B + 1`` strictly increasing entries starting at 0;
    ``intercepts`` has ``B`` entries and ``coef`` one per feature. A model
    with no intervals is the degenerate ``G = 1`` model.
    """

    edges: np.ndarray
    intercepts: np.ndarray
    coef: np.ndarray
    loss_history: tuple = field(default=(), repr=False)

    def __post_init__(self):
        edges = np.asarray(self.edges, float)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "intercepts", np.asarray(self.intercepts, float))
        object.__setattr__(self, "coef", np.asarray(self.coef, float))
        if len(edges) != len(self.intercepts) + 1:
            raise ConfigError("need len(edges) == len(intercepts) + 1")
        if np.any(np.diff(edges) <= 0):
            raise ConfigError("interval edges must be strictly increasing")

    @property
    def n_intervals(self):
        return len(self.intercepts)

    @property
    def is_degenerate(self):
        return self.n_intervals == 0

    def hazards(self, x):
        """Per-interval hazards, shape (n, B)."""
        x = np.atleast_2d(np.asarray(x, float))
        return special.expit(self.intercepts[None, :] + (x @ self.coef)[:, None])

    def survival(self, t, x):
        """``G(t, x)`` for aligned arrays of times and feature rows."""
        t = np.atleast_1d(np.asarray(t, float))
        if np.any(t < 0):
            raise DomainError("t must be nonnegative")
        x = np.atleast_2d(np.asarray(x, float))
        if x.shape[0] == 1 and t.shape[0] > 1:
            x = np.broadcast_to(x, (t.shape[0], x.shape[1]))
        if self.is_degenerate:
            return np.ones(t.shape[0])
        # log(1 - sigmoid(eta)) = -softplus(eta)
        x = x.reshape(t.shape[0], -1)
        eta = self.intercepts[None, :] + (x @ self.coef)[:, None]
        # fraction of each interval elapsed by t; beyond the last edge the
        # last interval counts in full
        lo, hi = self.edges[None, :-1], self.edges[None, 1:]
        elapsed = np.clip((t[:, None] - lo) / (hi - lo), 0.0, 1.0)
        return np.exp(-np.sum(np.logaddexp(0.0, eta) * elapsed, axis=1))

    def to_text(self):
        def row(a):
            return " ".join(repr(float(v)) for v in a)
        return (
            "# discrete-time logistic censoring hazard\n"
            f"n_intervals = {self.n_intervals}\n"
            f"n_features = {self.coef.size}\n"
            f"edges = {row(self.edges)}\n"
            f"intercepts = {row(self.intercepts)}\n"
            f"coef = {row(self.coef)}\n"
        )

    @classmethod
    def from_text(cls, text):
        vals = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, rest = line.partition("=")
            vals[key.strip()] = rest.split()
        try:
            model = cls(edges=[float(v) for v in vals["edges"]],
                        intercepts=[float(v) for v in vals["intercepts"]],
                        coef=[float(v) for v in vals["coef"]])
        except KeyError as exc:
            raise ConfigError(f"censoring model text missing key {exc}") from None
        if model.n_intervals != int(vals["n_intervals"][0]) or model.coef.size != int(vals["n_features"][0]):
            raise ConfigError("censoring model header does not match arrays")
        return model


def censoring_survival(model: CensoringModel, t, x):
    """Scalar ``G(t, x) = P(C > t | X = x)``."""
    if t < 0:
        raise DomainError("t must be nonnegative")
    return float(model.survival(np.array([t]), np.atleast_2d(x))[0])


def degenerate_model(n_features):
    return CensoringModel(edges=[0.0], intercepts=[], coef=np.zeros(n_features))


@dataclass(frozen=True)
class CensoringFitConfig:
    fit_features: bool = True
    l2: float = 0.0
    max_iter: int = 1000
    tol: float = 1e-12


def quantile_edges(censor_times, n_intervals):
    """Edges ``0 < q_1 < ... < q_B`` at empirical quantiles of censoring times.

    Quantiles use the inverted-CDF definition so every edge is an observed
    censoring time; duplicates are merged, so fewer than ``n_intervals``
    intervals may result.
    """
    levels = np.arange(1, n_intervals + 1) / n_intervals
    q = np.quantile(np.asarray(censor_times, float), levels, method="inverted_cdf")
    q = np.unique(q[q > 0])
    return np.concatenate([[0.0], q])


def _person_period(edges, time, censored):
    """Long-format (sample, interval, target) rows for the hazard likelihood."""
    inner = edges[1:]
    idx_event = np.searchsorted(inner, time, side="left")
    n_survived = np.searchsorted(inner, time, side="right")
    B = len(inner)
    counts = np.where(censored, np.minimum(idx_event + 1, B), np.minimum(n_survived, B))
    rows = np.repeat(np.arange(len(time)), counts)
    starts = np.cumsum(counts) - counts
    interval = np.arange(counts.sum()) - np.repeat(starts, counts)
    target = np.zeros(len(rows))
    last = starts + counts - 1
    hit = censored & (idx_event < B) & (counts > 0)
    target[last[hit]] = 1.0
    return rows, interval, target


def fit_censoring_model(train, n_intervals=20, config: CensoringFitConfig | None = None) -> CensoringModel:
    """Fit the discrete-time censoring hazard by maximum likelihood.

    Censoring is the event of interest here; outcome events censor ``C``.
    Uses L-BFGS-B on the mean negative log-likelihood, starting from a
    constant hazard. The per-iteration loss is kept in ``loss_history``.
    """
    config = config or CensoringFitConfig()
    if n_intervals < 1:
        raise ConfigError("n_intervals must be >= 1")
    # G is only ever needed on [0, horizon]: follow-up is truncated there so
    # the last interval ends exactly at the horizon
    horizon = float(train.horizon)
    raw = np.asarray(train.time, float)
    censored = ~np.asarray(train.event, bool) & (raw < horizon)
    time = np.minimum(raw, horizon)
    x = np.asarray(train.features, float)
    m = x.shape[1]
    if not censored.any():
        logger.warning("no censoring events before the horizon; using G = 1")
        return degenerate_model(m)
    edges = quantile_edges(time[censored], n_intervals)
    if edges[-1] < horizon:
        edges = np.append(edges, horizon)
    B = len(edges) - 1
    if B == 0:
        logger.warning("all censoring times are zero; using G = 1")
        return degenerate_model(m)
    rows, interval, target = _person_period(edges, time, censored)
    xr = x[rows] if config.fit_features and m else np.zeros((len(rows), 0))
    p = xr.shape[1]
    n = len(time)
    base = np.clip(target.mean(), 1e-6, 1 - 1e-6)
    theta0 = np.concatenate([np.full(B, special.logit(base)), np.zeros(p)])

    def nll(theta):
        alpha, beta = theta[:B], theta[B:]
        eta = alpha[interval] + (xr @ beta if p else 0.0)
        val = np.sum(np.logaddexp(0.0, eta) - target * eta) / n + 0.5 * config.l2 * beta @ beta
        resid = (special.expit(eta) - target) / n
        grad = np.concatenate([np.bincount(interval, resid, minlength=B),
                               xr.T @ resid + config.l2 * beta if p else np.zeros(0)])
        return val, grad

    history = [nll(theta0)[0]]
    res = optimize.minimize(
        nll, theta0, jac=True, method="L-BFGS-B",
        bounds=[(-30.0, 30.0)] * B + [(None, None)] * p,
        callback=lambda th: history.append(nll(th)[0]),
        options={"maxiter": config.max_iter, "ftol": config.tol, "gtol": 1e-10},
    )
    theta = _newton_polish(res.x, interval, xr, target, n, B, config.l2, nll, history)
    coef = np.zeros(m)
    if p:
        coef = theta[B:]
    return CensoringModel(edges=edges, intercepts=theta[:B], coef=coef, loss_history=tuple(history))


def _newton_polish(theta, interval, xr, target, n, B, l2, nll, history, max_iter=50):
    """Damped Newton steps after L-BFGS to reach a tight optimum."""
    Z = np.zeros((len(interval), B))
    Z[np.arange(len(interval)), interval] = 1.0
    Z = np.hstack([Z, xr])
    ridge = np.concatenate([np.zeros(B), np.full(xr.shape[1], l2)])
    for _ in range(max_iter):
        f0, grad = nll(theta)
        if np.linalg.norm(grad) < 1e-13:
            break
        p = special.expit(Z @ theta)
        hess = (Z * (p * (1 - p) / n)[:, None]).T @ Z + np.diag(ridge)
        try:
            step = np.linalg.solve(hess + 1e-12 * np.eye(len(theta)), grad)
        except np.linalg.LinAlgError:
            break
        t = 1.0
        while t > 1e-8:
            cand = np.concatenate([np.clip(theta[:B] - t * step[:B], -30, 30), theta[B:] - t * step[B:]])
            f1 = nll(cand)[0]
            if f1 <= f0:
                break
            t *= 0.5
        else:
            break
        theta = cand
        history.append(f1)
        if f0 - f1 < 1e-16:
            break
    return theta


@dataclass(frozen=True, eq=False)
class WeightVector:
    """Normalised IPCW weights aligned with a cohort's samples."""

    weights: np.ndarray
    ids: np.ndarray | None = None
    n_clipped: int = 0

    def __len__(self):
        return len(self.weights)

    def to_csv(self):
        ids = self.ids if self.ids is not None else np.arange(len(self))
        return render_csv(["id", "weight"], zip(ids, self.weights))

    def write(self, path):
        return atomic_write_text(path, self.to_csv())


def average_survival(models, t, x):
    models = models if isinstance(models, (list, tuple)) else [models]
    return np.mean([m.survival(t, x) for m in models], axis=0)


def ipcw_weights(model, cohort, floor=G_FLOOR) -> WeightVector:
    """``w_i = (delta_i / G(u_i, x_i)) / sum_j (delta_j / G(u_j, x_j))``.

    ``model`` may be a list of models, in which case ``G`` is their average.
    ``G`` is floored at ``floor`` where ``delta = 1``; the number of floored
    samples is reported in ``n_clipped``.
    """
    _, u, delta = composite_outcomes(cohort.time, cohort.event, cohort.horizon)
    g = average_survival(model, u, cohort.features) if len(u) else np.zeros(0)
    clip = (delta == 1) & (g < floor)
    n_clipped = int(clip.sum())
    if n_clipped:
        logger.warning("%d censoring-survival values floored at %g", n_clipped, floor)
    raw = np.where(delta == 1, 1.0 / np.maximum(g, floor), 0.0)
    total = raw.sum()
    w = raw / total if total > 0 else raw
    return WeightVector(weights=w, ids=np.asarray(cohort.ids), n_clipped=n_clipped)


def fit_fold_models(folds, n_intervals=20, config=None):
    """One censoring model per held-out fold, fitted on the remaining folds.

    With a single fold the model is fitted on that fold itself.
    """
    from .cohort import concat

    if len(folds) == 1:
        return [fit_censoring_model(folds[0], n_intervals, config)]
    return [fit_censoring_model(concat(f for j, f in enumerate(folds) if j != k), n_intervals, config)
            for k in range(len(folds))]


def load_weights(path, cohort) -> WeightVector:
    """Read an ``id,weight`` CSV and align it with ``cohort`` by id."""
    import csv

    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError as exc:
        raise ConfigError(f"weights file not found: {path}") from exc
    if not rows or rows[0] != ["id", "weight"]:
        raise ConfigError(f"{path}: expected header 'id,weight'")
    table = {}
    for line, row in enumerate(rows[1:], start=2):
        if len(row) != 2:
            raise ConfigError(f"{path}: line {line} has {len(row)} fields")
        try:
            table[row[0]] = float(row[1])
        except ValueError:
            raise ConfigError(f"{path}: line {line}: bad weight {row[1]!r}") from None
    missing = [i for i in cohort.ids if i not in table]
    if missing:
        raise ConfigError(f"{path}: no weight for ids {missing[:5]}")
    w = np.array([table[i] for i in cohort.ids], dtype=float)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ConfigError(f"{path}: weights must be finite and nonnegative")
    return WeightVector(weights=w, ids=np.asarray(cohort.ids))
