"""Test-set evaluation: per-group metrics with stratified bootstrap intervals."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ._io import fmt, render_csv
from .decision import RiskReductionUtility, calibrated_net_benefit, net_benefit
from .errors import CalibrationError, DomainError, NonInvertibleError, UndefinedMetricError
from .metrics import (ace, bootstrap_indices, fit_calibration_curve, intergroup_variance,
                      ipcw_auc, ipcw_log_loss, ipcw_rate, strata_labels)

logger = logging.getLogger(__name__)

OVERALL = "overall"
WORST = "worst"
ALL_GROUPS = "all"


@dataclass(frozen=True)
class EvalSpec:
    """What to report.

    ``nb_pairs`` lists ``(tau, tau_star)``; with ``r`` set the risk-reduction
    net benefit is used, otherwise the fixed-cost form.
    """

    thresholds: tuple = (0.075, 0.2)
    nb_pairs: tuple = ((0.075, 0.075), (0.2, 0.2))
    r: float | None = None
    n_replicates: int = 1000
    seed: int = 0
    alpha: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        object.__setattr__(self, "nb_pairs", tuple((float(a), float(b)) for a, b in self.nb_pairs))
        if self.n_replicates < 1:
            raise DomainError("n_replicates must be >= 1")
        if any(not 0 < t < 1 for t in self.thresholds):
            raise DomainError("thresholds must lie in (0, 1)")
        if any(not (0 < a < 1 and 0 < b < 1) for a, b in self.nb_pairs):
            raise DomainError("net-benefit (tau, tau_star) pairs must lie in (0, 1)")
        if self.r is not None and not 0 < self.r < 1:
            raise DomainError("r must lie in (0, 1)")

    def utility(self, tau_star):
        return RiskReductionUtility(tau_star, self.r) if self.r is not None else tau_star


def _safe(fn, *args):
    try:
        return fn(*args)
    except (UndefinedMetricError, CalibrationError, NonInvertibleError, ValueError, ZeroDivisionError):
        return math.nan


def _nb_name(kind, tau, tau_star):
    return kind if tau == tau_star else f"{kind}(tau_star={fmt(tau_star)})"


def row_keys(groups, spec: EvalSpec):
    """Report rows as ``(metric, group, threshold)`` in output order."""
    keys = []
    sets = [OVERALL, *groups]
    for metric in ("auc", "logloss", "ace"):
        keys += [(metric, g, None) for g in sets] + [(metric, WORST, None)]
    for t in spec.thresholds:
        for kind in ("tpr", "fpr"):
            keys += [(kind, g, t) for g in sets] + [(f"igvar_{kind}", ALL_GROUPS, t)]
    for tau, ts in spec.nb_pairs:
        for kind in ("nb", "cnb"):
            name = _nb_name(kind, tau, ts)
            keys += [(name, g, tau) for g in sets] + [(name, WORST, tau)]
    return keys


def compute_metrics(scores, y, w, group, groups, spec: EvalSpec):
    """Vector of metric values aligned with :func:`row_keys`; ``nan`` marks undefined."""
    masks = {OVERALL: np.ones(len(y), dtype=bool)}
    for k, g in enumerate(groups):
        masks[g] = group == k
    data = {g: (scores[m], y[m], w[m]) for g, m in masks.items()}
    cal = {}
    for g, (s, yy, ww) in data.items():
        cal[g] = _safe(fit_calibration_curve, s, yy, ww) if len(s) else math.nan
    values = {}
    for g, (s, yy, ww) in data.items():
        values[("auc", g, None)] = _safe(ipcw_auc, s, yy, ww)
        values[("logloss", g, None)] = _safe(ipcw_log_loss, s, yy, ww) if len(s) else math.nan
        c = cal[g]
        values[("ace", g, None)] = math.nan if isinstance(c, float) else _safe(ace, s, yy, ww, c)
        for t in spec.thresholds:
            values[("tpr", g, t)] = _safe(ipcw_rate, s, yy, ww, t, "tpr")
            values[("fpr", g, t)] = _safe(ipcw_rate, s, yy, ww, t, "fpr")
        for tau, ts in spec.nb_pairs:
            u = spec.utility(ts)
            values[(_nb_name("nb", tau, ts), g, tau)] = (
                _safe(net_benefit, s, yy, ww, tau, u) if len(s) and ww.sum() > 0 else math.nan)
            values[(_nb_name("cnb", tau, ts), g, tau)] = (
                math.nan if isinstance(c, float) else _safe(calibrated_net_benefit, s, yy, ww, tau, u, c))
    out = []
    for key in row_keys(groups, spec):
        metric, g, t = key
        if g == WORST:
            vals = np.array([values[(metric, h, t)] for h in groups])
            if np.all(np.isnan(vals)):
                out.append(math.nan)
            elif metric in ("logloss", "ace"):
                out.append(float(np.nanmax(vals)))
            else:
                out.append(float(np.nanmin(vals)))
        elif g == ALL_GROUPS:
            vals = np.array([values[(metric[len("igvar_"):], h, t)] for h in groups])
            out.append(math.nan if np.any(np.isnan(vals)) else intergroup_variance(vals))
        else:
            out.append(values[key])
    return np.array(out, dtype=float)


@dataclass
class MetricReport:
    """Point estimates (mean over models) and pooled percentile intervals.

    When a baseline was supplied, ``relative`` holds the differences
    ``model - baseline`` computed on shared bootstrap samples.
    """

    keys: list
    estimate: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    n_replicates: int
    seed: int
    relative: dict | None = None
    n_undefined: np.ndarray = field(default=None, repr=False)

    def value(self, metric, group=OVERALL, threshold=None):
        return float(self.estimate[self.keys.index((metric, group, threshold))])

    def interval(self, metric, group=OVERALL, threshold=None):
        i = self.keys.index((metric, group, threshold))
        return float(self.lower[i]), float(self.upper[i])

    def rows(self):
        for i, (metric, g, t) in enumerate(self.keys):
            row = [metric, g, t, self.estimate[i], self.lower[i], self.upper[i]]
            if self.relative is not None:
                row += [self.relative["estimate"][i], self.relative["lower"][i],
                        self.relative["upper"][i]]
            yield row

    def to_csv(self):
        header = ["metric", "group", "threshold", "estimate", "ci_lower", "ci_upper"]
        if self.relative is not None:
            header += ["rel_estimate", "rel_ci_lower", "rel_ci_upper"]
        return render_csv(header, self.rows())

    def to_text(self):
        lines = [f"metric report ({self.n_replicates} bootstrap replicates, seed {self.seed})", ""]
        width = max(len(k[0]) for k in self.keys)
        for row in self.rows():
            metric, g, t, est, lo, hi = row[:6]
            thr = "" if t is None else f"@{fmt(t)}"
            line = f"{(metric + thr).ljust(width + 7)} {str(g).ljust(10)} {_num(est)}  [{_num(lo)}, {_num(hi)}]"
            if self.relative is not None:
                line += f"  diff {_num(row[6])} [{_num(row[7])}, {_num(row[8])}]"
            lines.append(line)
        return "\n".join(lines) + "\n"


def _num(v):
    return "NA" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.4f}"


def _percentiles(samples, alpha):
    """Columnwise percentile interval ignoring ``nan``; all-``nan`` columns stay ``nan``."""
    lo = np.full(samples.shape[1], np.nan)
    hi = np.full(samples.shape[1], np.nan)
    for j in range(samples.shape[1]):
        col = samples[:, j]
        col = col[~np.isnan(col)]
        if col.size:
            lo[j], hi[j] = np.quantile(col, [alpha / 2, 1 - alpha / 2])
    return lo, hi


def evaluate(score_sets, y, w, group, groups, spec: EvalSpec | None = None, baseline_sets=None,
             n_jobs=1):
    """Metric report for one or more score vectors on the same samples.

    ``score_sets`` holds one score vector per trained model; intervals pool
    over models and bootstrap replicates. Resampling is stratified by
    outcome and group, and weights are renormalised within each replicate.
    ``baseline_sets`` are paired with ``score_sets`` by position when the
    counts match, otherwise compared with their mean.
    """
    spec = spec or EvalSpec()
    y = np.asarray(y).astype(int)
    w = np.asarray(w, dtype=float)
    group = np.asarray(group)
    score_sets = [np.asarray(s, float) for s in score_sets]
    if baseline_sets is not None:
        baseline_sets = [np.asarray(s, float) for s in baseline_sets]
    keys = row_keys(groups, spec)

    def stat(sets, ix):
        return np.array([compute_metrics(s[ix], y[ix], w[ix], group[ix], groups, spec) for s in sets])

    full = np.arange(len(y))
    point = stat(score_sets, full)
    strata = strata_labels(y, group)
    idx = bootstrap_indices(strata, spec.n_replicates, spec.seed)

    def replicate(ix):
        vals = stat(score_sets, ix)
        base = stat(baseline_sets, ix) if baseline_sets is not None else None
        return vals, base

    if n_jobs and n_jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            reps = list(pool.map(replicate, idx))
    else:
        reps = [replicate(ix) for ix in idx]
    pooled = np.concatenate([v for v, _ in reps])
    lo, hi = _percentiles(pooled, spec.alpha)
    undefined = np.isnan(pooled).sum(axis=0)
    if undefined.any():
        logger.warning("%d bootstrap metric values undefined", int(undefined.sum()))
    relative = None
    if baseline_sets is not None:
        base_point = stat(baseline_sets, full)

        def diff(vals, base):
            if len(base) == len(vals):
                return vals - base
            return vals - base.mean(axis=0, keepdims=True)

        diffs = np.concatenate([diff(v, b) for v, b in reps])
        rlo, rhi = _percentiles(diffs, spec.alpha)
        relative = {"estimate": diff(point, base_point).mean(axis=0), "lower": rlo, "upper": rhi}
    return MetricReport(keys=keys, estimate=point.mean(axis=0), lower=lo, upper=hi,
                        n_replicates=spec.n_replicates, seed=spec.seed, relative=relative,
                        n_undefined=undefined)
