"""Utility-based decision analysis: net benefit, calibrated net benefit and decision curves.

Two utility models are supported:

* fixed expected utilities per confusion-matrix cell
  (:class:`FixedCostUtility`), giving the classical net benefit
  ``TPR * P(Y=1) - FPR * P(Y=0) * tau_star / (1 - tau_star)``;
* a treatment with constant relative risk reduction ``r`` and a constant
  harm (:class:`RiskReductionUtility`), giving a net benefit measured on
  the absolute-risk scale and normalised so that treating nobody scores 0.

All probabilities are weighted by the supplied sample weights. When a
conditioning set is empty (e.g. nobody is above the threshold) its term
contributes 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from ._io import render_csv
from .errors import CalibrationError, DomainError, NonInvertibleError
from .metrics import (CalibrationModel, as_weights, fit_calibration_curve,
                      invert_calibration)

GUIDELINE_THRESHOLDS = (0.075, 0.20)


def default_grid():
    """0.005, 0.010, ..., 0.995 (199 points)."""
    return np.round(np.arange(1, 200) * 0.005, 10)


@dataclass(frozen=True)
class FixedCostUtility:
    u_tp: float
    u_fp: float
    u_tn: float
    u_fn: float

    @property
    def optimal_threshold(self):
        return optimal_threshold_fixed(self)


@dataclass(frozen=True)
class RiskReductionUtility:
    """Benefit-harm trade-off ``tau_star`` and relative risk reduction ``r``.

    Under calibration the harm-to-benefit ratio ``k_harm / (u_0 - u_1)``
    equals ``r * tau_star``; it never appears separately in the net benefit.
    """

    tau_star: float
    r: float

    def __post_init__(self):
        if not 0 < self.tau_star < 1:
            raise DomainError("tau_star must lie in (0, 1)")
        if not 0 < self.r < 1:
            raise DomainError("r must lie in (0, 1)")

    @property
    def harm_ratio(self):
        return self.r * self.tau_star


def conditional_utility_fixed(c_of_s, u: FixedCostUtility):
    """Utility of treating minus not treating at calibration value ``c(s)``."""
    c = np.asarray(c_of_s, dtype=float)
    out = (u.u_tp - u.u_fn) * c + (u.u_fp - u.u_tn) * (1 - c)
    return float(out) if out.ndim == 0 else out


def optimal_threshold_fixed(u: FixedCostUtility):
    """Root of the conditional utility for a calibrated model.

    Values outside [0, 1] (no root) are clipped to the treat-all or
    treat-none end.
    """
    num = u.u_tn - u.u_fp
    den = num + u.u_tp - u.u_fn
    if not den > 0:
        raise DomainError("u_tn - u_fp + u_tp - u_fn must be positive")
    return min(max(num / den, 0.0), 1.0)


def relative_risk_reduction(kappa, per_unit=0.22):
    """``1 - (1 - per_unit) ** kappa`` for an LDL-C reduction ``kappa`` (mmol/L)."""
    if not kappa > 0:
        raise DomainError("kappa must be positive")
    return -math.expm1(kappa * math.log1p(-per_unit))


def _masses(scores, y, weights, tau):
    s = np.asarray(scores, dtype=float)
    y = np.asarray(y).astype(int)
    w = as_weights(weights, len(s))
    total = w.sum()
    above = s >= tau
    return s, y, w, total, above


def net_benefit_fixed(scores, y, weights=None, tau=0.5, tau_star=None):
    """Net benefit at score threshold ``tau`` with trade-off ``tau_star``."""
    tau_star = tau if tau_star is None else tau_star
    if not 0 < tau_star < 1:
        raise DomainError("tau_star must lie in (0, 1)")
    s, y, w, total, above = _masses(scores, y, weights, tau)
    pos_w = np.sum(w * y)
    neg_w = np.sum(w * (1 - y))
    tpr = np.sum(w * y * above) / pos_w if pos_w > 0 else 0.0
    fpr = np.sum(w * (1 - y) * above) / neg_w if neg_w > 0 else 0.0
    return float(tpr * (pos_w / total) - fpr * (neg_w / total) * tau_star / (1 - tau_star))


def net_benefit_rr(scores, y, weights=None, tau=0.5, spec: RiskReductionUtility = None):
    """Risk-reduction net benefit at score threshold ``tau``.

    ``-(1 - NPV) P(S < tau) - P(S >= tau) ((1 - r) PPV + r tau_star) + P(Y = 1)``
    """
    s, y, w, total, above = _masses(scores, y, weights, tau)
    below_w = np.sum(w * ~above)
    above_w = np.sum(w * above)
    term_below = 0.0
    if below_w > 0:
        one_minus_npv = np.sum(w * y * ~above) / below_w
        term_below = one_minus_npv * (below_w / total)
    term_above = 0.0
    if above_w > 0:
        ppv = np.sum(w * y * above) / above_w
        term_above = (above_w / total) * ((1 - spec.r) * ppv + spec.r * spec.tau_star)
    prevalence = np.sum(w * y) / total
    return float(-term_below - term_above + prevalence)


def net_benefit(scores, y, weights, tau, utility):
    """Dispatch on the utility: a float ``tau_star``, fixed costs or risk reduction."""
    if isinstance(utility, RiskReductionUtility):
        return net_benefit_rr(scores, y, weights, tau, utility)
    if isinstance(utility, FixedCostUtility):
        return net_benefit_fixed(scores, y, weights, tau, optimal_threshold_fixed(utility))
    return net_benefit_fixed(scores, y, weights, tau, float(utility))


def calibrated_net_benefit(scores, y, weights, tau, utility, calibration: CalibrationModel):
    """Net benefit evaluated at the score threshold ``c^{-1}(tau)``."""
    return net_benefit(scores, y, weights, invert_calibration(calibration, tau), utility)


def _with_tau_star(utility, tau_star):
    if isinstance(utility, RiskReductionUtility):
        return RiskReductionUtility(tau_star, utility.r)
    return tau_star


@dataclass
class DecisionCurve:
    """Net benefit series over a threshold grid, overall and per group.

    ``series[group]`` holds arrays ``nb``, ``cnb``, ``treat_all`` and
    ``p_treat`` (the weighted fraction at or above each threshold) aligned
    with ``grid``. The treat-none reference is identically 0.
    """

    grid: np.ndarray
    mode: str
    tau_star: np.ndarray
    series: dict = field(default_factory=dict)

    @property
    def treat_none(self):
        return np.zeros_like(self.grid)

    def rows(self):
        for g, ser in self.series.items():
            for i, tau in enumerate(self.grid):
                yield (g, self.mode, float(tau), float(self.tau_star[i]), ser["nb"][i],
                       ser["cnb"][i], ser["treat_all"][i])

    def to_csv(self):
        return render_csv(["group", "mode", "tau", "tau_star", "nb", "cnb", "treat_all_nb"],
                          self.rows())


def decision_curve(scores, y, weights=None, grid=None, mode="standard", tau_star=None,
                   utility=None, calibration="fit", groups=None):
    """Decision curves in standard (``tau_star = tau``) or parameterized mode.

    Args:
        utility: ``None`` for the fixed-cost form, or a
            :class:`RiskReductionUtility` whose ``r`` is used (its
            ``tau_star`` is replaced pointwise in standard mode).
        calibration: a :class:`CalibrationModel`, a dict of them keyed by
            group, ``"fit"`` to fit one per evaluated sample set, or ``None``
            to skip the calibrated series.
        groups: optional group label per sample; adds one series per label
            next to ``"overall"``.
    """
    grid = default_grid() if grid is None else np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise DomainError("empty threshold grid")
    if np.any((grid <= 0) | (grid >= 1)) or np.any(np.diff(grid) <= 0):
        raise DomainError("grid must be strictly increasing inside (0, 1)")
    if mode not in ("standard", "parameterized"):
        raise ValueError("mode must be 'standard' or 'parameterized'")
    if mode == "parameterized":
        if tau_star is None:
            tau_star = getattr(utility, "tau_star", None)
        if tau_star is None:
            raise ValueError("parameterized mode needs tau_star")
        stars = np.full(grid.shape, float(tau_star))
    else:
        stars = grid.copy()
    s = np.asarray(scores, dtype=float)
    y = np.asarray(y).astype(int)
    w = as_weights(weights, len(s))
    sets = {"overall": np.ones(len(s), dtype=bool)}
    if groups is not None:
        groups = np.asarray(groups, dtype=object)
        for g in sorted(set(groups.tolist()), key=str):
            sets[g] = groups == g
    curve = DecisionCurve(grid=grid, mode=mode, tau_star=stars)
    for name, mask in sets.items():
        ss, yy, ww = s[mask], y[mask], w[mask]
        cal = calibration.get(name) if isinstance(calibration, dict) else calibration
        if isinstance(cal, str) and cal == "fit":
            try:
                cal = fit_calibration_curve(ss, yy, ww)
            except CalibrationError:
                cal = None
        nb = np.empty(grid.size)
        cnb = np.full(grid.size, np.nan)
        treat_all = np.empty(grid.size)
        p_treat = np.empty(grid.size)
        total = ww.sum()
        for i, (tau, ts) in enumerate(zip(grid, stars)):
            u = _with_tau_star(utility, ts)
            nb[i] = net_benefit(ss, yy, ww, tau, u)
            treat_all[i] = net_benefit(ss, yy, ww, 0.0, u)
            p_treat[i] = np.sum(ww * (ss >= tau)) / total
            if cal is not None:
                try:
                    cnb[i] = calibrated_net_benefit(ss, yy, ww, tau, u, cal)
                except NonInvertibleError:
                    pass
        curve.series[name] = {"nb": nb, "cnb": cnb, "treat_all": treat_all, "p_treat": p_treat}
    return curve


def aggregate_utility(u: FixedCostUtility, tau, scores=None, y=None, weights=None,
                      calibration=None, density=None):
    """Population-average utility of treating everyone with score ``>= tau``.

    Empirical mode (``scores`` given) averages per-sample utilities using the
    observed ``y`` or, if ``y`` is omitted, the calibration values ``c(s)``.
    Analytic mode (``density`` given, a callable on (0, 1)) integrates
    ``U1(s) p(s)`` above ``tau`` and ``U0(s) p(s)`` below it by adaptive
    quadrature; ``calibration`` is then a callable ``c`` (identity if None).
    """
    if not 0 <= tau <= 1:
        raise DomainError("tau must lie in [0, 1]")

    def treated(c):
        return u.u_tp * c + u.u_fp * (1 - c)

    def untreated(c):
        return u.u_fn * c + u.u_tn * (1 - c)

    if density is not None:
        curve = calibration if calibration is not None else (lambda s: s)
        lo = integrate.quad(lambda s: untreated(curve(s)) * density(s), 0.0, tau,
                            epsabs=1e-12, epsrel=1e-10, limit=200)[0] if tau > 0 else 0.0
        hi = integrate.quad(lambda s: treated(curve(s)) * density(s), tau, 1.0,
                            epsabs=1e-12, epsrel=1e-10, limit=200)[0] if tau < 1 else 0.0
        return lo + hi
    s = np.asarray(scores, dtype=float)
    w = as_weights(weights, len(s))
    if y is not None:
        c = np.asarray(y, dtype=float)
    else:
        c = calibration(s) if calibration is not None else s
    above = s >= tau
    vals = np.where(above, treated(c), untreated(c))
    return float(np.sum(w * vals) / w.sum())
