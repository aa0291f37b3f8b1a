"""Cohort data model, synthetic generation, CSV ingestion and partitioning.

A cohort is stored column-wise (one numpy array per field) so that
downstream metrics and training can index it cheaply; :class:`Sample`
gives a row view for callers that want one.

Synthetic data-generating process
---------------------------------
For a sample in group ``g`` with features ``x``:

* ``x ~ Normal(feature_shift[g], I_m)``
* event time ``T ~ Exponential(rate = exp(a_g + beta . x))`` where ``a_g`` is
  chosen so that a sample with ``x = 0`` has horizon risk ``base_risk[g]``,
  i.e. ``a_g = log(-log(1 - base_risk[g]) / horizon)``.
* censoring time ``C ~ Exponential(rate = censoring_rate[g] * exp(censor_coef . x))``
  drawn independently of ``T`` given ``x`` (``C = inf`` when the rate is 0).

The true horizon risk ``1 - exp(-rate * horizon)`` is retained per sample.

RNG contract: ``numpy.random.default_rng(seed)`` (PCG64). Groups are drawn in
vocabulary order; within a group the draws are, in order, the ``n x m``
standard normals for features, ``n`` uniforms for event times and ``n``
uniforms for censoring times (inverse-CDF sampling, ``-log(U) / rate``).
Partitioning uses ``default_rng(seed).permutation(n)`` followed by
contiguous slicing.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._io import atomic_write_text, fmt
from .errors import CohortParseError, ConfigError, SizingError


@dataclass(frozen=True)
class Sample:
    id: str
    group: str
    features: np.ndarray
    followup_time: float
    event_indicator: bool
    true_risk: float | None = None


def _frozen(a, dtype=None):
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Cohort:
    """Immutable column store of samples.

    Attributes:
        ids: sample identifiers, shape (n,).
        group: group label per sample, shape (n,).
        features: feature matrix, shape (n, m).
        time: observed follow-up time ``min(T, C)``.
        event: True where the follow-up time is an outcome event.
        groups: ordered group vocabulary.
        horizon: prediction horizon.
        true_risk: generator probability of an event by the horizon, if known.
    """

    ids: np.ndarray
    group: np.ndarray
    features: np.ndarray
    time: np.ndarray
    event: np.ndarray
    groups: tuple
    horizon: float
    true_risk: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.ids)
        feats = np.asarray(self.features, dtype=float)
        if feats.ndim == 1:
            feats = feats.reshape(n, -1)
        object.__setattr__(self, "ids", _frozen(self.ids, dtype=object))
        object.__setattr__(self, "group", _frozen(self.group, dtype=object))
        object.__setattr__(self, "features", _frozen(feats))
        object.__setattr__(self, "time", _frozen(self.time, dtype=float))
        object.__setattr__(self, "event", _frozen(self.event, dtype=bool))
        object.__setattr__(self, "groups", tuple(self.groups))
        if self.true_risk is not None:
            object.__setattr__(self, "true_risk", _frozen(self.true_risk, dtype=float))
        if not self.groups:
            raise ConfigError("cohort needs at least one group")
        if not self.horizon > 0:
            raise ConfigError("horizon must be positive")
        for arr, name in ((self.group, "group"), (self.features, "features"),
                          (self.time, "time"), (self.event, "event")):
            if len(arr) != n:
                raise ConfigError(f"{name} has length {len(arr)}, expected {n}")
        if np.any(self.time < 0):
            raise ConfigError("follow-up times must be nonnegative")
        unknown = set(self.group.tolist()) - set(self.groups)
        if unknown:
            raise ConfigError(f"groups not in vocabulary: {sorted(unknown)}")

    def __len__(self):
        return len(self.ids)

    @property
    def feature_dim(self):
        return self.features.shape[1]

    @property
    def group_index(self):
        """Integer code of each sample's group in the vocabulary."""
        lookup = {g: k for k, g in enumerate(self.groups)}
        return np.fromiter((lookup[g] for g in self.group), dtype=int, count=len(self))

    @property
    def samples(self):
        risk = self.true_risk
        return [
            Sample(self.ids[i], self.group[i], self.features[i], float(self.time[i]),
                   bool(self.event[i]), None if risk is None else float(risk[i]))
            for i in range(len(self))
        ]

    def subset(self, index):
        index = np.asarray(index)
        return Cohort(
            ids=self.ids[index], group=self.group[index], features=self.features[index],
            time=self.time[index], event=self.event[index], groups=self.groups,
            horizon=self.horizon,
            true_risk=None if self.true_risk is None else self.true_risk[index],
        )

    def equals(self, other, check_truth=False):
        """Field-wise equality; ``true_risk`` is compared only if asked."""
        same = (
            self.groups == other.groups
            and self.horizon == other.horizon
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.group, other.group)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.time, other.time)
            and np.array_equal(self.event, other.event)
        )
        if same and check_truth:
            a, b = self.true_risk, other.true_risk
            same = (a is None and b is None) or (
                a is not None and b is not None and np.array_equal(a, b))
        return same

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], horizon, groups=None):
        samples = list(samples)
        if groups is None:
            groups = sorted({s.group for s in samples})
        risks = [s.true_risk for s in samples]
        return cls(
            ids=[s.id for s in samples],
            group=[s.group for s in samples],
            features=np.array([np.asarray(s.features, float) for s in samples]).reshape(len(samples), -1),
            time=[s.followup_time for s in samples],
            event=[s.event_indicator for s in samples],
            groups=groups,
            horizon=horizon,
            true_risk=None if any(r is None for r in risks) else risks,
        )


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple = (0.625, 0.125, 0.25)
    n_train_folds: int = 5
    seed: int = 0

    def __post_init__(self):
        fr = tuple(float(f) for f in self.fractions)
        object.__setattr__(self, "fractions", fr)
        if len(fr) != 3:
            raise ConfigError("fractions must be (train, validation, test)")
        if not all(0 < f < 1 for f in fr):
            raise ConfigError(f"each fraction must lie in (0, 1), got {fr}")
        if abs(sum(fr) - 1) > 1e-9:
            raise ConfigError(f"fractions must sum to 1, got {sum(fr)}")
        if int(self.n_train_folds) < 1:
            raise ConfigError("n_train_folds must be a positive integer")


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the synthetic cohort generator.

    ``base_risk`` is the horizon event probability of a sample with all
    features equal to zero; ``censoring_rate`` is the exponential censoring
    intensity per time unit. Per-group values are dicts keyed by label.
    """

    counts: dict
    base_risk: dict
    censoring_rate: dict
    feature_dim: int = 4
    horizon: float = 10.0
    seed: int = 0
    coef: tuple | None = None
    censor_coef: tuple | None = None
    feature_shift: dict = field(default_factory=dict)

    def __post_init__(self):
        groups = set(self.counts)
        if not groups:
            raise ConfigError("at least one group is required")
        if set(self.base_risk) != groups or set(self.censoring_rate) != groups:
            raise ConfigError("counts, base_risk and censoring_rate must share group keys")
        for g in groups:
            if int(self.counts[g]) < 1:
                raise ConfigError(f"count for group {g!r} must be >= 1")
            if not 0 < float(self.base_risk[g]) < 1:
                raise ConfigError(f"base_risk for group {g!r} must lie in (0, 1)")
            if float(self.censoring_rate[g]) < 0:
                raise ConfigError(f"censoring_rate for group {g!r} must be >= 0")
        if self.feature_dim < 0:
            raise ConfigError("feature_dim must be nonnegative")
        if not self.horizon > 0:
            raise ConfigError("horizon must be positive")
        for name in ("coef", "censor_coef"):
            v = getattr(self, name)
            if v is not None and len(v) != self.feature_dim:
                raise ConfigError(f"{name} must have length feature_dim")

    @property
    def groups(self):
        return tuple(sorted(self.counts))


def horizon_risk(rate, horizon):
    """P(T <= horizon) for an exponential event time with the given rate."""
    return -np.expm1(-np.asarray(rate, float) * horizon)


def generate_synthetic_cohort(config: SynthConfig) -> Cohort:
    rng = np.random.default_rng(config.seed)
    m = config.feature_dim
    coef = np.zeros(m) if config.coef is None else np.asarray(config.coef, float)
    ccoef = np.zeros(m) if config.censor_coef is None else np.asarray(config.censor_coef, float)
    cols = {k: [] for k in ("group", "x", "t", "e", "risk")}
    for g in config.groups:
        n = int(config.counts[g])
        shift = np.broadcast_to(np.asarray(config.feature_shift.get(g, 0.0), float), (m,))
        x = rng.standard_normal((n, m)) + shift
        intercept = math.log(-math.log1p(-float(config.base_risk[g])) / config.horizon)
        rate = np.exp(intercept + x @ coef)
        event_time = -np.log(rng.random(n)) / rate
        u_cens = rng.random(n)
        crate = float(config.censoring_rate[g]) * np.exp(x @ ccoef)
        with np.errstate(divide="ignore"):
            censor_time = np.where(crate > 0, -np.log(u_cens) / np.where(crate > 0, crate, 1.0), np.inf)
        cols["group"].append(np.full(n, g, dtype=object))
        cols["x"].append(x)
        cols["t"].append(np.minimum(event_time, censor_time))
        cols["e"].append(event_time <= censor_time)
        cols["risk"].append(horizon_risk(rate, config.horizon))
    total = sum(int(c) for c in config.counts.values())
    width = max(6, len(str(total)))
    return Cohort(
        ids=[f"s{i:0{width}d}" for i in range(total)],
        group=np.concatenate(cols["group"]),
        features=np.concatenate(cols["x"]).reshape(total, m),
        time=np.concatenate(cols["t"]),
        event=np.concatenate(cols["e"]),
        groups=config.groups,
        horizon=config.horizon,
        true_risk=np.concatenate(cols["risk"]),
    )


# --- CSV ------------------------------------------------------------------

GROUPS_DIRECTIVE = "#groups="


def cohort_to_csv(cohort: Cohort, declare_groups=False) -> str:
    lines = []
    if declare_groups:
        lines.append(GROUPS_DIRECTIVE + ",".join(cohort.groups))
    header = ["id", "group", "t", "event"] + [f"f{j}" for j in range(cohort.feature_dim)]
    lines.append(",".join(header))
    for i in range(len(cohort)):
        row = [str(cohort.ids[i]), str(cohort.group[i]), fmt(float(cohort.time[i])),
               "1" if cohort.event[i] else "0"]
        row += [fmt(float(v)) for v in cohort.features[i]]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def write_cohort(cohort: Cohort, path, declare_groups=False):
    return atomic_write_text(path, cohort_to_csv(cohort, declare_groups))


def load_cohort(path, horizon, groups=None) -> Cohort:
    """Read a cohort CSV (``id,group,t,event,f0,...``).

    An optional first line ``#groups=a,b,c`` declares the group vocabulary
    and its order; otherwise the sorted set of observed labels is used.
    Row numbers in errors are 1-based file line numbers.
    """
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        lines = fh.read().splitlines()
    lineno = 0
    if lines and lines[0].startswith(GROUPS_DIRECTIVE):
        declared = [g for g in lines[0][len(GROUPS_DIRECTIVE):].split(",") if g]
        groups = groups or declared
        lines = lines[1:]
        lineno = 1
    reader = csv.reader(lines)
    try:
        header = next(reader)
    except StopIteration:
        raise CohortParseError(lineno + 1, None, "missing header") from None
    header = [h.strip() for h in header]
    for col in ("id", "group", "t", "event"):
        if col not in header:
            raise CohortParseError(lineno + 1, col, "missing column")
    fcols = [h for h in header if h.startswith("f") and h[1:].isdigit()]
    fcols.sort(key=lambda h: int(h[1:]))
    if [int(h[1:]) for h in fcols] != list(range(len(fcols))):
        raise CohortParseError(lineno + 1, "f*", "feature columns must be f0..f{m-1}")
    pos = {h: k for k, h in enumerate(header)}
    ids, grp, tt, ev, feats = [], [], [], [], []
    for k, row in enumerate(reader):
        rowno = lineno + 2 + k
        if not row:
            continue
        if len(row) != len(header):
            raise CohortParseError(rowno, None, f"expected {len(header)} fields, got {len(row)}")
        ids.append(row[pos["id"]])
        grp.append(row[pos["group"]])
        t = _parse_float(row[pos["t"]], rowno, "t")
        if t < 0:
            raise CohortParseError(rowno, "t", f"negative follow-up time {t}")
        tt.append(t)
        e = row[pos["event"]].strip()
        if e not in ("0", "1"):
            raise CohortParseError(rowno, "event", f"event must be 0 or 1, got {e!r}")
        ev.append(e == "1")
        feats.append([_parse_float(row[pos[c]], rowno, c) for c in fcols])
    if groups is None:
        groups = sorted(set(grp))
    missing = sorted(set(grp) - set(groups))
    if missing:
        bad = grp.index(missing[0])
        raise CohortParseError(lineno + 2 + bad, "group", f"label {missing[0]!r} not declared")
    n = len(ids)
    return Cohort(ids=ids, group=grp, features=np.array(feats, float).reshape(n, len(fcols)),
                  time=tt, event=ev, groups=groups, horizon=horizon)


def _parse_float(text, row, col):
    try:
        v = float(text)
    except ValueError:
        raise CohortParseError(row, col, f"non-numeric value {text!r}") from None
    if not math.isfinite(v):
        raise CohortParseError(row, col, f"non-finite value {text!r}")
    return v


# --- partitioning ----------------------------------------------------------

def _allocate(n, fractions):
    raw = np.asarray(fractions) * n
    sizes = np.floor(raw + 1e-9).astype(int)
    remainder = n - sizes.sum()
    order = np.argsort(-(raw - sizes), kind="stable")
    sizes[order[:remainder]] += 1
    return sizes


def partition(cohort: Cohort, spec: SplitSpec):
    """Shuffle with the spec's seed, slice into train/validation/test.

    The train slice is further cut into ``n_train_folds`` contiguous folds
    whose sizes differ by at most one.

    Returns:
        (train_folds, validation, test)
    """
    n = len(cohort)
    if n == 0:
        raise SizingError("cannot partition an empty cohort")
    sizes = _allocate(n, spec.fractions)
    if np.any(sizes < 1) or sizes[0] < spec.n_train_folds:
        raise SizingError(
            f"{n} samples cannot fill train/validation/test sizes {sizes.tolist()} "
            f"with {spec.n_train_folds} train folds")
    perm = np.random.default_rng(spec.seed).permutation(n)
    train_idx = perm[:sizes[0]]
    val_idx = perm[sizes[0]:sizes[0] + sizes[1]]
    test_idx = perm[sizes[0] + sizes[1]:]
    folds = [cohort.subset(ix) for ix in np.array_split(train_idx, spec.n_train_folds)]
    return folds, cohort.subset(val_idx), cohort.subset(test_idx)


def concat(cohorts):
    cohorts = list(cohorts)
    first = cohorts[0]
    risk = None
    if all(c.true_risk is not None for c in cohorts):
        risk = np.concatenate([c.true_risk for c in cohorts])
    return Cohort(
        ids=np.concatenate([c.ids for c in cohorts]),
        group=np.concatenate([c.group for c in cohorts]),
        features=np.concatenate([c.features for c in cohorts]),
        time=np.concatenate([c.time for c in cohorts]),
        event=np.concatenate([c.event for c in cohorts]),
        groups=first.groups, horizon=first.horizon, true_risk=risk,
    )
