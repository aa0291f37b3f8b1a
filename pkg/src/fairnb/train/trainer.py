"""Minibatch training loops, early stopping, cross-fitting and model selection."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy import special

from .._io import render_csv
from ..censoring import composite_outcomes
from ..errors import ConfigError, TrainingError, UndefinedMetricError
from ..metrics import ipcw_auc, ipcw_log_loss
from . import objectives as obj
from .models import Architecture, RiskModel, StratifiedModel, backward, forward, init_params

logger = logging.getLogger(__name__)

OBJECTIVES = ("erm", "stratified_erm", "reg_mmd", "reg_parity", "dro")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run.

    ``lam`` weights the fairness penalty (``reg_*`` objectives); ``eta`` is
    the DRO step size and ``dro_metric`` (``logloss`` or ``one_minus_auc``)
    the per-group quantity that drives the group weights and early stopping.
    ``mmd_normalization`` is ``"K"`` (sum over outcome values divided by the
    number of groups) or ``"2K"``.
    """

    objective: str = "erm"
    lam: float = 0.0
    eta: float = 0.01
    gamma: float = 1.0
    lr: float = 0.01
    batch_size: int = 256
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    balanced: bool = False
    optimizer: str = "adam"
    weight_decay: float = 0.0
    kind: str = "logistic"
    hidden: tuple = ()
    activation: str = "relu"
    dropout: float = 0.0
    parity_metrics: tuple = ("tpr@0.075", "fpr@0.075")
    surrogate: str = "softplus"
    dro_metric: str = "logloss"
    mmd_normalization: str = "K"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        pm = self.parity_metrics
        if isinstance(pm, str):
            pm = tuple(p for p in pm.replace(",", " ").split() if p)
        object.__setattr__(self, "parity_metrics", tuple(pm))
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}")
        if not self.lam >= 0:
            raise ConfigError("lam must be >= 0")
        if not self.eta >= 0:
            raise ConfigError("eta must be >= 0")
        if not self.gamma > 0:
            raise ConfigError("gamma must be > 0")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("max_epochs and patience must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.surrogate not in ("hinge", "softplus", "sigmoid"):
            raise ConfigError(f"surrogate must be hinge, softplus or sigmoid, got {self.surrogate!r}")
        if self.dro_metric not in ("logloss", "one_minus_auc"):
            raise ConfigError(f"unknown dro_metric {self.dro_metric!r}")
        if self.mmd_normalization not in ("K", "2K"):
            raise ConfigError("mmd_normalization must be 'K' or '2K'")
        try:
            for m in self.parity_metrics:
                obj.parse_metric(m)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        self.architecture  # validates

    @property
    def architecture(self):
        return Architecture(self.kind, self.hidden, self.activation, self.dropout)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**data)

    def key(self):
        """Stable string identifying the configuration (used for tie-breaks)."""
        return ";".join(f"{k}={v}" for k, v in sorted(asdict(self).items()))


@dataclass(frozen=True, eq=False)
class TrainData:
    """Design matrix, horizon outcome, weights and integer group codes.

    Weights are rescaled to mean 1 so that sets built from separately
    normalised weight vectors can be concatenated.
    """

    X: np.ndarray
    y: np.ndarray
    w: np.ndarray
    group: np.ndarray
    groups: tuple

    def __len__(self):
        return len(self.y)

    @classmethod
    def from_cohort(cls, cohort, weights=None):
        y, _, _ = composite_outcomes(cohort.time, cohort.event, cohort.horizon)
        w = np.ones(len(cohort)) if weights is None else np.asarray(getattr(weights, "weights", weights), float)
        if len(w) != len(cohort):
            raise ValueError("weights do not match cohort")
        total = w.sum()
        w = w * (len(w) / total) if total > 0 else w
        return cls(np.asarray(cohort.features, float), y.astype(int), w, cohort.group_index,
                   tuple(cohort.groups))

    @classmethod
    def concat(cls, parts):
        parts = list(parts)
        return cls(np.vstack([p.X for p in parts]), np.concatenate([p.y for p in parts]),
                   np.concatenate([p.w for p in parts]), np.concatenate([p.group for p in parts]),
                   parts[0].groups)

    def subset(self, index):
        return TrainData(self.X[index], self.y[index], self.w[index], self.group[index], self.groups)

    @property
    def n_groups(self):
        return len(self.groups)

    @property
    def group_labels(self):
        return np.array(self.groups, dtype=object)[self.group]


@dataclass
class TrainResult:
    """Best checkpoint plus the per-epoch log.

    ``history`` rows are ``(epoch, fold, objective_value, dev_metric, worst_group)``.
    """

    model: RiskModel
    config: TrainConfig
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_dev: float = math.inf
    dro_weights: np.ndarray | None = None
    skipped_terms: int = 0

    def log_csv(self):
        return training_log_csv([self])


def training_log_csv(results):
    rows = [r for res in results for r in res.history]
    return render_csv(["epoch", "fold", "objective_value", "dev_metric", "worst_group"], rows)


# --- objective assembly -----------------------------------------------------------

def batch_objective(theta, arch, data: TrainData, config: TrainConfig, index, rng=None,
                    train=False, dro_lambda=None, metrics=None):
    """Objective value, gradient w.r.t. ``theta`` and skipped-term count on a batch.

    The penalty is skipped entirely (no computation, no random draws) when
    ``lam == 0``. For ``dro`` the value is ``sum_k lambda_k L_k``.
    """
    X, y, w, g = data.X[index], data.y[index], data.w[index], data.group[index]
    z, cache = forward(arch, X.shape[1], theta, X, rng, train)
    skipped = 0
    if config.objective == "dro":
        value, dz = obj.dro_loss_grad(z, y, g, w, data.n_groups, dro_lambda)
    else:
        value, dz = obj.log_loss_grad(z, y, w)
        if config.lam > 0 and config.objective == "reg_mmd":
            pv, pg, skipped = obj.mmd_penalty_grad(z, y, g, w, data.n_groups, config.gamma,
                                                   config.mmd_normalization)
            value, dz = value + config.lam * pv, dz + config.lam * pg
        elif config.lam > 0 and config.objective == "reg_parity":
            metrics = metrics or [obj.parse_metric(m) for m in config.parity_metrics]
            pv, pg, skipped = obj.parity_penalty_grad(z, y, g, w, data.n_groups, metrics,
                                                      config.surrogate)
            value, dz = value + config.lam * pv, dz + config.lam * pg
    grad = backward(arch, X.shape[1], theta, cache, dz)
    if config.weight_decay > 0:
        value = value + 0.5 * config.weight_decay * float(theta @ theta)
        grad = grad + config.weight_decay * theta
    return value, grad, skipped


def group_metric_values(scores, data: TrainData, metric, logits=None):
    """Per-group log-loss or ``1 - AUC``; ``nan`` where undefined.

    With ``logits`` the log-loss is computed in logit form, exactly as the
    training objective computes it.
    """
    out = np.full(data.n_groups, np.nan)
    for k in range(data.n_groups):
        mask = data.group == k
        if not mask.any():
            continue
        try:
            if metric == "logloss":
                if logits is not None:
                    if data.w[mask].sum() > 0:
                        out[k] = obj.log_loss_grad(logits[mask], data.y[mask], data.w[mask])[0]
                else:
                    out[k] = ipcw_log_loss(scores[mask], data.y[mask], data.w[mask])
            else:
                out[k] = 1.0 - ipcw_auc(scores[mask], data.y[mask], data.w[mask])
        except UndefinedMetricError:
            pass
    return out


def dev_metric(model: RiskModel, dev: TrainData, config: TrainConfig):
    """Early-stopping criterion (lower is better) and the worst group label.

    ERM: pooled log-loss. Regularised: pooled log-loss plus ``lam`` times the
    penalty on the whole development set. DRO: worst per-group value of
    ``dro_metric``. The worst group is reported by per-group log-loss except
    for DRO, where it is the argmax of the stopping metric.
    """
    z = model.logits(dev.X)
    s = special.expit(z)
    metric = config.dro_metric if config.objective == "dro" else "logloss"
    per_group = group_metric_values(s, dev, metric, logits=z)
    worst = "NA"
    if np.any(np.isfinite(per_group)):
        worst = dev.groups[int(np.nanargmax(per_group))]
    if config.objective == "dro":
        if not np.any(np.isfinite(per_group)):
            raise TrainingError("no group has a defined development metric")
        return float(np.nanmax(per_group)), worst
    value = obj.log_loss_grad(z, dev.y, dev.w)[0]
    if config.lam > 0 and config.objective == "reg_mmd":
        value += config.lam * obj.mmd_penalty_grad(z, dev.y, dev.group, dev.w, dev.n_groups,
                                                   config.gamma, config.mmd_normalization)[0]
    elif config.lam > 0 and config.objective == "reg_parity":
        metrics = [obj.parse_metric(m) for m in config.parity_metrics]
        value += config.lam * obj.parity_penalty_grad(z, dev.y, dev.group, dev.w, dev.n_groups,
                                                      metrics, config.surrogate)[0]
    return float(value), worst


# --- optimisers ---------------------------------------------------------------------

class _SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, theta, grad):
        return theta - self.lr * grad


class _Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, theta, grad):
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _batches(data: TrainData, config: TrainConfig, rng):
    """Shuffled minibatch index arrays for one epoch.

    With ``balanced`` every batch position first picks a group uniformly and
    then a member of that group, both with replacement.
    """
    n = len(data)
    if config.balanced:
        members = [np.flatnonzero(data.group == k) for k in range(data.n_groups)]
        members = [m for m in members if m.size]
        pick = rng.integers(0, len(members), n)
        order = np.empty(n, dtype=int)
        for j, m in enumerate(members):
            sel = pick == j
            order[sel] = m[rng.integers(0, m.size, int(sel.sum()))]
    else:
        order = rng.permutation(n)
    n_batches = max(1, math.ceil(n / config.batch_size))
    return np.array_split(order, n_batches)


def fit(train: TrainData, dev: TrainData, config: TrainConfig, fold=0) -> TrainResult:
    """Train one model by minibatch descent with patience-based early stopping.

    The development criterion is evaluated before the first epoch too, so
    the returned checkpoint is never worse on it than the initial model.
    The epoch-0 log row has no training objective (``NA``).

    Raises:
        TrainingError: if the training objective becomes non-finite.
    """
    if config.objective == "stratified_erm":
        raise ConfigError("use train_stratified for stratified_erm")
    if len(train) == 0 or len(dev) == 0:
        raise TrainingError("empty training or development data")
    arch = config.architecture
    m = train.X.shape[1]
    rng = np.random.default_rng(config.seed)
    theta = init_params(arch, m, rng)
    opt = _Adam(config.lr) if config.optimizer == "adam" else _SGD(config.lr)
    metrics = [obj.parse_metric(p) for p in config.parity_metrics]
    lam_dro = np.full(train.n_groups, 1.0 / train.n_groups) if config.objective == "dro" else None
    if config.objective == "dro":
        absent = [train.groups[k] for k in range(train.n_groups) if not np.any(train.group == k)]
        if absent:
            raise TrainingError(f"groups absent from training data: {absent}")

    def checkpoint(th):
        return RiskModel(arch, m, th)

    best_dev, worst = dev_metric(checkpoint(theta), dev, config)
    result = TrainResult(model=checkpoint(theta), config=config, best_epoch=0, best_dev=best_dev,
                         history=[(0, fold, None, best_dev, worst)])
    best_lam = None if lam_dro is None else lam_dro.copy()
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        total, count = 0.0, 0
        for index in _batches(train, config, rng):
            if lam_dro is not None:
                z = forward(arch, m, theta, train.X[index])[0]
                scores = special.expit(z)
                sub = train.subset(index)
                g = group_metric_values(scores, sub, config.dro_metric, logits=z)
                present = np.isfinite(g)
                lam_dro = obj.dro_update(lam_dro, np.where(present, g, 0.0), config.eta, present)
            value, grad, skipped = batch_objective(theta, arch, train, config, index, rng, True,
                                                   lam_dro, metrics)
            if not (math.isfinite(value) and np.all(np.isfinite(grad))):
                raise TrainingError("training objective diverged",
                                    diagnostics={"epoch": epoch, "fold": fold, "value": value,
                                                 "param_norm": float(np.linalg.norm(theta))})
            result.skipped_terms += skipped
            theta = opt.step(theta, grad)
            total += value
            count += 1
        if not np.all(np.isfinite(theta)):
            raise TrainingError("parameters diverged", diagnostics={"epoch": epoch, "fold": fold})
        current, worst = dev_metric(checkpoint(theta), dev, config)
        result.history.append((epoch, fold, total / count, current, worst))
        if current < result.best_dev:
            result.model, result.best_dev, result.best_epoch = checkpoint(theta), current, epoch
            best_lam = None if lam_dro is None else lam_dro.copy()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    result.dro_weights = best_lam
    if result.skipped_terms:
        logger.info("fold %s: %d empty penalty terms skipped", fold, result.skipped_terms)
    return result


def train_erm(train, dev, config: TrainConfig, fold=0) -> TrainResult:
    return fit(train, dev, replace(config, objective="erm"), fold)


def train_regularized(train, dev, config: TrainConfig, fold=0) -> TrainResult:
    if config.objective not in ("reg_mmd", "reg_parity"):
        raise ConfigError("train_regularized needs objective reg_mmd or reg_parity")
    return fit(train, dev, config, fold)


def train_dro(train, dev, config: TrainConfig, fold=0) -> TrainResult:
    return fit(train, dev, replace(config, objective="dro"), fold)


@dataclass
class StratifiedResult:
    model: StratifiedModel
    results: dict
    errors: dict

    @property
    def history(self):
        return [row for r in self.results.values() for row in r.history]


def train_stratified(train: TrainData, dev: TrainData, config: TrainConfig, fold=0) -> StratifiedResult:
    """Independent ERM per group; groups that cannot be trained are reported in ``errors``."""
    cfg = replace(config, objective="erm")
    results, errors = {}, {}
    for k, label in enumerate(train.groups):
        tr = train.subset(train.group == k)
        dv = dev.subset(dev.group == k)
        try:
            if len(tr) == 0 or len(dv) == 0:
                raise TrainingError(f"group {label!r} has no training or development data")
            results[label] = fit(tr, dv, cfg, fold)
        except TrainingError as exc:
            errors[label] = exc
            logger.warning("stratified model for group %r not trained: %s", label, exc)
    if not results:
        raise TrainingError("no stratified model could be trained",
                            diagnostics={"errors": {g: str(e) for g, e in errors.items()}})
    return StratifiedResult(StratifiedModel({g: r.model for g, r in results.items()}), results, errors)


def train_one(train, dev, config: TrainConfig, fold=0):
    if config.objective == "stratified_erm":
        return train_stratified(train, dev, config, fold)
    return fit(train, dev, config, fold)


def cross_fit(fold_data, config: TrainConfig):
    """One model per fold: fold ``k`` is the development set, the rest train.

    With a single fold it serves as both.
    """
    out = []
    for k, dev in enumerate(fold_data):
        rest = [d for j, d in enumerate(fold_data) if j != k] or [dev]
        out.append(train_one(TrainData.concat(rest), dev, config, fold=k))
    return out


# --- selection ---------------------------------------------------------------------------

CRITERIA = ("pooled_logloss", "worst_auc", "worst_logloss")


@dataclass(frozen=True)
class Candidate:
    """A configuration with per-fold validation metrics.

    ``metrics`` maps ``pooled_logloss``, ``worst_auc`` and ``worst_logloss``
    to one value per fold.
    """

    config: TrainConfig
    metrics: dict


def validation_metrics(model, data: TrainData):
    """Pooled log-loss, worst-group AUC and worst-group log-loss on ``data``."""
    scores = model.predict(data.X, data.group_labels)
    ll = group_metric_values(scores, data, "logloss")
    one_minus_auc = group_metric_values(scores, data, "one_minus_auc")
    return {
        "pooled_logloss": ipcw_log_loss(scores, data.y, data.w),
        "worst_auc": float(1.0 - np.nanmax(one_minus_auc)) if np.any(np.isfinite(one_minus_auc)) else math.nan,
        "worst_logloss": float(np.nanmax(ll)) if np.any(np.isfinite(ll)) else math.nan,
    }


def select_model(candidates, criterion="pooled_logloss"):
    """Index of the best candidate after averaging each metric over folds.

    Log-losses are minimised and AUC maximised. Ties go to the smaller
    ``lam`` and then the lexicographically smaller config key. Candidates
    whose averaged metric is undefined are never selected unless all are.
    """
    if criterion not in CRITERIA:
        raise ConfigError(f"unknown selection criterion {criterion!r}")
    if not candidates:
        raise ConfigError("no candidates to select from")
    sign = -1.0 if criterion == "worst_auc" else 1.0

    def sort_key(i):
        c = candidates[i]
        v = float(np.mean(c.metrics[criterion]))
        v = math.inf if math.isnan(v) else sign * v
        return (v, c.config.lam, c.config.key())

    return min(range(len(candidates)), key=sort_key)


def config_hash(config: TrainConfig):
    return hashlib.sha256(config.key().encode()).hexdigest()[:12]
