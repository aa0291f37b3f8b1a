"""Analytic simulation of subgroup score distributions, calibration and decision thresholds.

Three settings are built from one score distribution and three subgroup
calibration curves:

* ``demographic_parity``: every subgroup shares the score distribution,
  with an identity, under-estimating or over-estimating calibration curve;
* ``recalibrated``: each subgroup's scores are replaced by their calibration
  value, which makes every subgroup calibrated;
* ``equalized_odds``: every subgroup receives the class-conditional score
  distributions of the calibrated reference subgroup, mixed at its own
  incidence.

Everything is computed by deterministic quadrature; there is no sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, stats

from ._io import render_csv
from .decision import FixedCostUtility, optimal_threshold_fixed
from .errors import DomainError

_QUAD = dict(epsabs=1e-13, epsrel=1e-12, limit=400)
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(12)


# --- distributions and curves ----------------------------------------------------

class ScoreDistribution:
    """A score density on (0, 1) given as a vectorised callable.

    The callable is the exact density; :meth:`tabulate` gives the
    grid-tabulated version, normalised by the trapezoidal rule.
    """

    def __init__(self, pdf, name="custom"):
        self._pdf = pdf
        self.name = name

    @classmethod
    def beta(cls, a=2.5, b=7.5):
        dist = stats.beta(a, b)
        return cls(dist.pdf, f"beta({a},{b})")

    def pdf(self, s):
        s = np.asarray(s, dtype=float)
        inside = (s > 0) & (s < 1)
        out = np.zeros(s.shape)
        with np.errstate(divide="ignore", invalid="ignore"):
            vals = np.asarray(self._pdf(np.where(inside, s, 0.5)), dtype=float)
        out[inside] = np.broadcast_to(vals, s.shape)[inside]
        out[~np.isfinite(out)] = 0.0
        return out

    __call__ = pdf

    def mass(self):
        return integrate.quad(self.pdf, 0.0, 1.0, **_QUAD)[0]

    def mean(self):
        return integrate.quad(lambda s: s * self.pdf(s), 0.0, 1.0, **_QUAD)[0]

    def tabulate(self, n=4001):
        """``(grid, values)`` on ``n`` equispaced points, normalised to unit trapezoid mass."""
        grid = np.linspace(0.0, 1.0, n)
        vals = self.pdf(grid)
        return grid, vals / np.trapezoid(vals, grid)


@dataclass(frozen=True)
class CalibrationCurve:
    """A monotone calibration curve ``c`` with optional inverse and derivative."""

    name: str
    fn: object
    inverse: object = None
    derivative: object = None

    def __call__(self, s):
        return self.fn(np.asarray(s, dtype=float))


def identity_curve():
    return CalibrationCurve("identity", lambda s: s * 1.0, lambda t: np.asarray(t, float) * 1.0,
                            lambda s: np.ones_like(s))


def under_curve():
    """``c(s) = -(s - 1)^2 + 1``: risk is under-estimated."""
    return CalibrationCurve("under", lambda s: -(s - 1.0) ** 2 + 1.0,
                            lambda t: 1.0 - np.sqrt(1.0 - np.asarray(t, float)),
                            lambda s: -2.0 * (s - 1.0))


def over_curve():
    """``c(s) = 2s + (s - 1)^2 - 1``: risk is over-estimated."""
    return CalibrationCurve("over", lambda s: 2.0 * s + (s - 1.0) ** 2 - 1.0,
                            lambda t: np.sqrt(np.asarray(t, float)),
                            lambda s: 2.0 + 2.0 * (s - 1.0))


CURVES = {"identity": identity_curve, "under": under_curve, "over": over_curve}


@dataclass(frozen=True)
class SubgroupSpec:
    name: str
    distribution: ScoreDistribution
    curve: CalibrationCurve

    def __post_init__(self):
        probe = np.linspace(0.0, 1.0, 1001)
        c = self.curve(probe)
        if np.any(c < -1e-12) or np.any(c > 1 + 1e-12):
            raise DomainError(f"calibration curve of {self.name!r} leaves [0, 1]")


def subgroup_incidence(spec: SubgroupSpec):
    """``P(Y = 1) = integral of c(s) p(s)`` by adaptive quadrature."""
    return integrate.quad(lambda s: spec.curve(s) * spec.distribution(s), 0.0, 1.0, **_QUAD)[0]


def recalibrate_scores(spec: SubgroupSpec) -> ScoreDistribution:
    """Density of ``S' = c(S)``: ``p(c^{-1}(s')) / c'(c^{-1}(s'))``.

    Raises:
        DomainError: if the curve is not strictly increasing or lacks an
            inverse and derivative.
    """
    curve = spec.curve
    if curve.inverse is None or curve.derivative is None:
        raise DomainError("recalibration needs the curve's inverse and derivative")
    probe = np.linspace(0.0, 1.0, 2001)
    if np.any(np.diff(curve(probe)) <= 0):
        raise DomainError(f"calibration curve {curve.name!r} is not strictly increasing")
    if curve.name == "identity":
        return spec.distribution
    base = spec.distribution

    def pdf(t):
        s = curve.inverse(t)
        return base(s) / np.abs(curve.derivative(s))

    return ScoreDistribution(pdf, f"recalibrated({base.name},{curve.name})")


def _is_identity_calibrated(spec):
    probe = np.linspace(0.0, 1.0, 101)
    return np.allclose(spec.curve(probe), probe, rtol=0, atol=1e-12)


def equalize_odds_transform(specs, reference: SubgroupSpec):
    """Give every subgroup the reference's class-conditional score densities.

    With ``p_ref(s | 1) = s p_ref(s) / q`` and ``p_ref(s | 0) =
    (1 - s) p_ref(s) / (1 - q)`` (``q`` the reference incidence), subgroup
    ``g`` with incidence ``p_g`` gets density ``p_ref(s|1) p_g + p_ref(s|0)
    (1 - p_g)`` and calibration curve ``p_ref(s|1) p_g / density``.

    Raises:
        DomainError: if the reference is not identity-calibrated.
    """
    if not _is_identity_calibrated(reference):
        raise DomainError("reference subgroup must be identity-calibrated")
    ref = reference.distribution
    q = subgroup_incidence(reference)

    def pos(s):
        return s * ref(s) / q

    def neg(s):
        return (1.0 - s) * ref(s) / (1.0 - q)

    out = []
    for spec in specs:
        p_g = subgroup_incidence(spec)

        def density(s, p_g=p_g):
            return pos(s) * p_g + neg(s) * (1.0 - p_g)

        def curve(s, p_g=p_g):
            s = np.asarray(s, float)
            num = pos(s) * p_g
            den = num + neg(s) * (1.0 - p_g)
            with np.errstate(divide="ignore", invalid="ignore"):
                c = np.where(den > 0, num / np.where(den > 0, den, 1.0), _edge_limit(s, p_g, q))
            return c

        out.append(SubgroupSpec(spec.name, ScoreDistribution(density, f"eo({spec.name})"),
                                CalibrationCurve(f"eo({spec.name})", curve)))
    return out


def _edge_limit(s, p_g, q):
    # c_g(s) = 1 / (1 + (1 - s) q (1 - p_g) / (s (1 - q) p_g)) where the density vanishes
    s = np.asarray(s, float)
    with np.errstate(divide="ignore"):
        odds = np.where(s > 0, (1.0 - s) * q * (1.0 - p_g) / (np.where(s > 0, s, 1.0) * (1.0 - q) * p_g),
                        np.inf)
    return 1.0 / (1.0 + odds)


# --- scenarios ----------------------------------------------------------------------

SETTINGS = ("demographic_parity", "recalibrated", "equalized_odds")


@dataclass(frozen=True)
class SimConfig:
    """Scenario parameters; defaults reproduce the three standard settings."""

    alpha: float = 2.5
    beta: float = 7.5
    u_tp: float = 0.8
    u_fp: float = 0.0
    u_tn: float = 0.2
    u_fn: float = 0.0
    tau_star: float = 0.2
    grid_step: float = 0.001
    n_tabulate: int = 4001
    subgroups: tuple = ("identity", "under", "over")

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise DomainError("beta parameters must be positive")
        if not 0 < self.tau_star < 1:
            raise DomainError("tau_star must lie in (0, 1)")
        n = round(1.0 / self.grid_step)
        if not (self.grid_step > 0 and n >= 2 and abs(n * self.grid_step - 1.0) < 1e-9):
            raise DomainError("grid_step must divide 1")
        if self.n_tabulate < 3:
            raise DomainError("n_tabulate must be >= 3")
        unknown = [s for s in self.subgroups if s not in CURVES]
        if unknown:
            raise DomainError(f"unknown calibration curves {unknown}")
        if "identity" not in self.subgroups:
            raise DomainError("an identity-calibrated subgroup is required as reference")

    @property
    def utility(self):
        return FixedCostUtility(self.u_tp, self.u_fp, self.u_tn, self.u_fn)

    @property
    def grid(self):
        n = round(1.0 / self.grid_step)
        return np.linspace(0.0, 1.0, n + 1)


@dataclass(frozen=True)
class SimScenario:
    setting: str
    subgroups: tuple
    utility: FixedCostUtility
    tau_star: float
    grid: np.ndarray
    n_tabulate: int = 4001


def build_scenarios(config: SimConfig | None = None):
    """The three settings as :class:`SimScenario` objects."""
    config = config or SimConfig()
    base = ScoreDistribution.beta(config.alpha, config.beta)
    dp = tuple(SubgroupSpec(name, base, CURVES[name]()) for name in config.subgroups)
    recal = tuple(SubgroupSpec(s.name, recalibrate_scores(s), identity_curve()) for s in dp)
    reference = next(s for s in dp if s.name == "identity")
    eo = tuple(equalize_odds_transform(dp, reference))
    common = dict(utility=config.utility, tau_star=config.tau_star, grid=config.grid,
                  n_tabulate=config.n_tabulate)
    return [SimScenario("demographic_parity", dp, **common),
            SimScenario("recalibrated", recal, **common),
            SimScenario("equalized_odds", eo, **common)]


def _cell_integrals(f, grid):
    """Integral of ``f`` over each grid cell.

    Gauss-Legendre on interior cells; adaptive quadrature on the two end
    cells, where densities may have unbounded derivatives.
    """
    a, b = grid[:-1], grid[1:]
    half, mid = (b - a) / 2, (b + a) / 2
    x = mid[:, None] + half[:, None] * _GL_NODES[None, :]
    out = (f(x) * _GL_WEIGHTS[None, :]).sum(axis=1) * half
    for i in (0, len(a) - 1):
        out[i] = integrate.quad(f, a[i], b[i], **_QUAD)[0]
    return out


def _upper_tail(cells):
    """``tail[i]`` = integral from ``grid[i]`` to 1, from per-cell integrals."""
    return np.concatenate([np.cumsum(cells[::-1])[::-1], [0.0]])


@dataclass
class SubgroupResult:
    name: str
    incidence: float
    series: dict
    argmax: dict


@dataclass
class SimResult:
    """Per-subgroup series over the threshold grid and argmax thresholds.

    Series: ``density``, ``calibration``, ``tpr``, ``fpr`` (the ROC curve
    traced by the threshold), ``utility`` and ``nb``.
    """

    setting: str
    grid: np.ndarray
    subgroups: list = field(default_factory=list)

    def series_rows(self):
        for sg in self.subgroups:
            for name, values in sg.series.items():
                for s, v in zip(self.grid, values):
                    yield self.setting, sg.name, name, float(s), float(v)

    def argmax_rows(self):
        for sg in self.subgroups:
            for metric, thr in sg.argmax.items():
                yield self.setting, sg.name, metric, thr

    def to_csv(self):
        return render_csv(["setting", "subgroup", "series", "s", "value"], self.series_rows())

    def argmax(self, subgroup, metric="utility"):
        return next(sg.argmax[metric] for sg in self.subgroups if sg.name == subgroup)


def series_csv(results):
    return render_csv(["setting", "subgroup", "series", "s", "value"],
                      (row for r in results for row in r.series_rows()))


def argmax_csv(results):
    return render_csv(["setting", "subgroup", "metric", "threshold"],
                      (row for r in results for row in r.argmax_rows()))


def _grid_argmax(grid, values):
    # first maximiser; values are rounded to suppress quadrature noise on flat tops
    return float(np.round(grid[int(np.argmax(np.round(values, 14)))], 10))


def run_simulation(scenario: SimScenario) -> SimResult:
    """Density, calibration, ROC, aggregate utility and net benefit per subgroup.

    With ``A(t) = int_t^1 c p`` and ``B(t) = int_t^1 p``, the rule ``s >= t``
    has ``TPR = A / q``, ``FPR = (B - A) / (1 - q)``, utility
    ``u_fn (q - A) + u_tn (1 - q - B + A) + u_tp A + u_fp (B - A)`` and net
    benefit ``A - (B - A) tau* / (1 - tau*)``.
    """
    grid = np.asarray(scenario.grid, dtype=float)
    u = scenario.utility
    optimal_threshold_fixed(u)  # validates the utility
    odds = scenario.tau_star / (1 - scenario.tau_star)
    result = SimResult(scenario.setting, grid)
    for spec in scenario.subgroups:
        dens, curve = spec.distribution, spec.curve
        A = _upper_tail(_cell_integrals(lambda s: curve(s) * dens(s), grid))
        B = _upper_tail(_cell_integrals(dens, grid))
        q, mass = A[0], B[0]
        tpr = A / q
        fpr = (B - A) / (mass - q)
        tpr[-1] = fpr[-1] = 0.0
        tpr[0] = fpr[0] = 1.0
        utility = u.u_fn * (q - A) + u.u_tn * (mass - q - (B - A)) + u.u_tp * A + u.u_fp * (B - A)
        nb = A - (B - A) * odds
        _, tab = dens.tabulate(scenario.n_tabulate)
        tab_grid = np.linspace(0.0, 1.0, scenario.n_tabulate)
        series = {
            "density": np.interp(grid, tab_grid, tab),
            "calibration": curve(grid),
            "tpr": tpr,
            "fpr": fpr,
            "utility": utility,
            "nb": nb,
        }
        argmax = {"utility": _grid_argmax(grid, utility), "nb": _grid_argmax(grid, nb)}
        result.subgroups.append(SubgroupResult(spec.name, float(q), series, argmax))
    return result


def simulate(config: SimConfig | None = None):
    """Run all three settings; returns a list of :class:`SimResult`."""
    return [run_simulation(s) for s in build_scenarios(config)]


def expected_argmax(curve_name, tau=0.2):
    """Closed-form optimal threshold ``c^{-1}(tau)`` for the setting-1 curves."""
    if curve_name == "identity":
        return tau
    if curve_name == "under":
        return 1.0 - math.sqrt(1.0 - tau)
    if curve_name == "over":
        return math.sqrt(tau)
    raise DomainError(f"no closed form for {curve_name!r}")
