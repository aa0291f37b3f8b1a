"""Command-line front end.

Every subcommand reads a flat TOML config (``--config``), writes only inside
``--out`` and finishes by writing ``manifest.json`` with the seeds used, a
hash of the resolved config and the completed stages. Exit codes: 0 on
success, 2 for configuration or input errors, 3 for runtime errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from ._io import atomic_write_text, load_config, render_csv
from .censoring import fit_fold_models, ipcw_weights, load_weights
from .cohort import (SplitSpec, SynthConfig, cohort_to_csv, generate_synthetic_cohort,
                     load_cohort, partition)
from .decision import decision_curve, relative_risk_reduction
from .errors import CohortParseError, ConfigError, DomainError, FairNBError, SizingError
from .report import EvalSpec, evaluate
from .sim import SimConfig, argmax_csv, series_csv, simulate
from .train import Candidate, TrainConfig, TrainData, cross_fit, select_model, validation_metrics
from .train.models import load_model
from .train.trainer import CRITERIA, config_hash, training_log_csv

logger = logging.getLogger("fairnb")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


class Settings:
    """Flat config with typed getters; relative paths resolve against the config's folder."""

    def __init__(self, data, base_dir):
        self.data = dict(data)
        self.base_dir = Path(base_dir)

    def get(self, key, default=None, kind=None):
        if key not in self.data:
            return default
        value = self.data[key]
        try:
            if kind is float:
                return float(value)
            if kind is int:
                if isinstance(value, bool) or int(value) != value:
                    raise ValueError
                return int(value)
            if kind is bool:
                if not isinstance(value, bool):
                    raise ValueError
                return value
            if kind is list:
                return list(value) if isinstance(value, (list, tuple)) else [value]
            if kind is str:
                if not isinstance(value, str):
                    raise ValueError
                return value
        except (TypeError, ValueError):
            raise ConfigError(f"config key {key!r} has invalid value {value!r}") from None
        return value

    def path(self, key, required=True):
        value = self.get(key, kind=str)
        if value is None:
            if required:
                raise ConfigError(f"config key {key!r} is required")
            return None
        p = Path(value)
        p = p if p.is_absolute() else self.base_dir / p
        if not p.exists():
            raise ConfigError(f"{key}: path does not exist: {p}")
        return p

    def paths(self, key, required=True):
        values = self.get(key, kind=list)
        if values is None:
            if required:
                raise ConfigError(f"config key {key!r} is required")
            return None
        out = []
        for v in values:
            p = Path(v)
            p = p if p.is_absolute() else self.base_dir / p
            if not p.exists():
                raise ConfigError(f"{key}: path does not exist: {p}")
            out.append(p)
        return out

    def digest(self):
        blob = json.dumps(self.data, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()


class Run:
    """Output directory bookkeeping: atomic writes and the manifest."""

    def __init__(self, command, out, settings: Settings):
        self.command = command
        self.out = Path(out)
        self.settings = settings
        self.files = []
        self.stages = []
        self.seeds = {}

    def write(self, rel, text):
        path = self.out / rel
        atomic_write_text(path, text)
        self.files.append(str(rel))
        return path

    def stage(self, name):
        self.stages.append(name)

    def manifest(self, status):
        data = {
            "command": self.command,
            "status": status,
            "config_hash": self.settings.digest(),
            "config": self.settings.data,
            "seeds": self.seeds,
            "stages": self.stages,
            "outputs": sorted(self.files),
        }
        atomic_write_text(self.out / "manifest.json", json.dumps(data, indent=2, sort_keys=True,
                                                                 default=str) + "\n")


# --- config helpers ----------------------------------------------------------------

def _synth_config(st: Settings, seed):
    groups = [str(g) for g in st.get("groups", kind=list) or []]
    if not groups:
        raise ConfigError("synthetic cohort needs 'groups'")

    def per_group(key, default=None, cast=float):
        vals = st.get(key, kind=list)
        if vals is None:
            if default is None:
                raise ConfigError(f"config key {key!r} is required")
            vals = [default] * len(groups)
        if len(vals) != len(groups):
            raise ConfigError(f"{key!r} needs one value per group")
        return {g: cast(v) for g, v in zip(groups, vals)}

    shift = st.get("feature_shift", kind=list)
    feature_shift = {}
    if shift is not None:
        if len(shift) != len(groups):
            raise ConfigError("'feature_shift' needs one entry per group")
        feature_shift = {g: s for g, s in zip(groups, shift)}
    coef = st.get("coef", kind=list)
    ccoef = st.get("censor_coef", kind=list)
    return SynthConfig(
        counts=per_group("counts", cast=int),
        base_risk=per_group("base_risk"),
        censoring_rate=per_group("censoring_rate", 0.0),
        feature_dim=st.get("feature_dim", 4, int),
        horizon=st.get("horizon", 10.0, float),
        seed=seed,
        coef=None if coef is None else tuple(float(c) for c in coef),
        censor_coef=None if ccoef is None else tuple(float(c) for c in ccoef),
        feature_shift=feature_shift,
    )


def _load_or_synth(st: Settings, run: Run, seed):
    horizon = st.get("horizon", 10.0, float)
    if st.get("cohort") is not None:
        return load_cohort(st.path("cohort"), horizon)
    cfg = _synth_config(st, st.get("synth_seed", seed, int))
    run.seeds["synth"] = cfg.seed
    cohort = generate_synthetic_cohort(cfg)
    run.write("cohort.csv", cohort_to_csv(cohort, declare_groups=True))
    return cohort


SYNTH_KEYS = ("groups", "counts", "base_risk", "censoring_rate", "feature_dim", "coef",
              "censor_coef", "feature_shift", "synth_seed")


def _split_spec(st: Settings, seed):
    fr = st.get("fractions", [0.625, 0.125, 0.25], list)
    if len(fr) != 3:
        raise ConfigError("'fractions' needs three values")
    return SplitSpec(fractions=tuple(float(f) for f in fr), n_train_folds=st.get("n_folds", 5, int),
                     seed=st.get("split_seed", seed, int))


def _train_config(st: Settings, seed, **override):
    vals = {}
    for key in TRAIN_KEYS:
        if key in ("seed",):
            continue
        v = st.get(key)
        if v is not None:
            vals[key] = tuple(v) if isinstance(v, list) else v
    vals["seed"] = st.get("train_seed", seed, int)
    vals.update(override)
    try:
        return TrainConfig(**vals)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _eval_spec(st: Settings, seed):
    kappa = st.get("kappa", None, float)
    pairs = st.get("nb_pairs", None, list)
    thresholds = st.get("thresholds", [0.075, 0.2], list)
    if pairs is None:
        pairs = [[t, t] for t in thresholds]
    try:
        pairs = [tuple(float(x) for x in p) for p in pairs]
        if any(len(p) != 2 for p in pairs):
            raise ValueError
    except (TypeError, ValueError):
        raise ConfigError("'nb_pairs' must be a list of [tau, tau_star] pairs") from None
    return EvalSpec(thresholds=tuple(float(t) for t in thresholds), nb_pairs=tuple(pairs),
                    r=None if kappa is None else relative_risk_reduction(kappa),
                    n_replicates=st.get("n_replicates", 1000, int),
                    seed=st.get("bootstrap_seed", seed, int))


def _cohort_and_weights(st: Settings):
    cohort = load_cohort(st.path("cohort"), st.get("horizon", 10.0, float))
    wpath = st.path("weights", required=False)
    if wpath is None:
        logger.warning("no weights given; using uniform weights")
        return cohort, None
    return cohort, load_weights(wpath, cohort)


def _scores(models, cohort):
    return [m.predict(cohort.features, cohort.group) for m in models]


def _load_models(paths):
    return [load_model(Path(p).read_text(encoding="utf-8")) for p in paths]


# --- commands ---------------------------------------------------------------------

def cmd_simulate(st: Settings, run: Run, seed, threads):
    cfg = SimConfig(**{f.name: _sim_value(st, f.name) for f in fields(SimConfig)
                       if st.get(f.name) is not None})
    results = simulate(cfg)
    run.stage("simulate")
    run.write("sim_series.csv", series_csv(results))
    run.write("sim_argmax.csv", argmax_csv(results))


def _sim_value(st, key):
    v = st.get(key)
    if key == "subgroups":
        return tuple(str(x) for x in (v if isinstance(v, list) else [v]))
    if key == "n_tabulate":
        return st.get(key, kind=int)
    return st.get(key, kind=float)


def cmd_synth(st: Settings, run: Run, seed, threads):
    cfg = _synth_config(st, seed)
    run.seeds["synth"] = cfg.seed
    cohort = generate_synthetic_cohort(cfg)
    run.stage("synth")
    run.write("cohort.csv", cohort_to_csv(cohort, declare_groups=True))
    risk = cohort.true_risk
    run.write("true_risk.csv", render_csv(["id", "risk"], zip(cohort.ids, risk)))


def _prepare(st: Settings, run: Run, seed):
    cohort = _load_or_synth(st, run, seed)
    run.stage("cohort")
    spec = _split_spec(st, seed)
    run.seeds["split"] = spec.seed
    folds, val, test = partition(cohort, spec)
    run.stage("partition")
    n_intervals = st.get("n_intervals", 20, int)
    cens = fit_fold_models(folds, n_intervals)
    for k, m in enumerate(cens):
        run.write(f"censoring/fold{k}.txt", m.to_text())
    fold_w = [ipcw_weights(m, f) for m, f in zip(cens, folds)]
    val_w = ipcw_weights(cens, val)
    test_w = ipcw_weights(cens, test)
    for k, w in enumerate(fold_w):
        run.write(f"weights/fold{k}.csv", w.to_csv())
    run.write("weights/validation.csv", val_w.to_csv())
    run.write("weights/test.csv", test_w.to_csv())
    run.stage("censoring")
    fold_data = [TrainData.from_cohort(f, w) for f, w in zip(folds, fold_w)]
    return cohort, fold_data, val, val_w, test, test_w


def _model_text(result):
    return result.model.to_text()


def _train_candidate(run: Run, fold_data, config, tag):
    results = cross_fit(fold_data, config)
    for k, res in enumerate(results):
        run.write(f"models/{tag}_fold{k}.txt", _model_text(res))
    run.write(f"logs/{tag}.csv", training_log_csv(results))
    return results


def cmd_train(st: Settings, run: Run, seed, threads):
    _, fold_data, *_ = _prepare(st, run, seed)
    config = _train_config(st, seed)
    run.seeds["train"] = config.seed
    _train_candidate(run, fold_data, config, "model")
    run.write("train_config.txt", _config_text(config))
    run.stage("train")


def _config_text(config: TrainConfig):
    return "".join(f"{k} = {v}\n" for k, v in sorted(asdict(config).items()))


def _candidates(st: Settings, seed):
    objectives = [str(o) for o in st.get("objective", ["erm"], list)]
    lams = [float(v) for v in st.get("lams", [0.0], list)]
    etas = [float(v) for v in st.get("etas", [0.01], list)]
    out = []
    for objective in objectives:
        if objective in ("reg_mmd", "reg_parity"):
            out += [_train_config(st, seed, objective=objective, lam=lam) for lam in lams]
        elif objective == "dro":
            out += [_train_config(st, seed, objective=objective, eta=eta) for eta in etas]
        else:
            out.append(_train_config(st, seed, objective=objective))
    return out


def cmd_pipeline(st: Settings, run: Run, seed, threads):
    criterion = st.get("selection", "pooled_logloss", str)
    if criterion not in CRITERIA:
        raise ConfigError(f"'selection' must be one of {CRITERIA}")
    candidates = _candidates(st, seed)
    spec = _eval_spec(st, seed)
    run.seeds["train"] = candidates[0].seed
    run.seeds["bootstrap"] = spec.seed
    cohort, fold_data, val, val_w, test, test_w = _prepare(st, run, seed)
    val_data = TrainData.from_cohort(val, val_w)
    scored, rows = [], []
    for i, config in enumerate(candidates):
        tag = f"cand{i:02d}"
        results = _train_candidate(run, fold_data, config, tag)
        per_fold = [validation_metrics(r.model, val_data) for r in results]
        metrics = {c: [m[c] for m in per_fold] for c in CRITERIA}
        scored.append((Candidate(config, metrics), results))
        rows.append([tag, config.objective, config.lam, config.eta, config_hash(config)]
                    + [float(np.mean(metrics[c])) for c in CRITERIA])
    run.stage("train")
    best = select_model([c for c, _ in scored], criterion)
    rows = [r + [int(i == best)] for i, r in enumerate(rows)]
    run.write("selection.csv", render_csv(["candidate", "objective", "lam", "eta", "config_hash",
                                           *CRITERIA, "selected"], rows))
    run.stage("select")
    models = [r.model for r in scored[best][1]]
    scores = _scores(models, test)
    y = TrainData.from_cohort(test, test_w).y
    report = evaluate(scores, y, test_w.weights, test.group_index, test.groups, spec, n_jobs=threads)
    run.write("report.csv", report.to_csv())
    run.write("report.txt", report.to_text())
    run.stage("evaluate")
    _write_curve(run, st, scores, y, test_w.weights, test.group, spec)
    run.stage("dca")


def _write_curve(run, st, scores, y, w, groups, spec: EvalSpec):
    mode = st.get("dca_mode", "standard", str)
    tau_star = st.get("dca_tau_star", None, float)
    utility = None
    if spec.r is not None:
        from .decision import RiskReductionUtility
        utility = RiskReductionUtility(tau_star if tau_star is not None else 0.5, spec.r)
    k = len(scores)
    curve = decision_curve(np.concatenate(scores), np.tile(y, k), np.tile(w, k), mode=mode,
                           tau_star=tau_star, utility=utility,
                           groups=np.tile(np.asarray(groups, dtype=object), k))
    run.write("decision_curve.csv", curve.to_csv())


def cmd_evaluate(st: Settings, run: Run, seed, threads):
    models = _load_models(st.paths("models"))
    base_paths = st.paths("baseline_models", required=False)
    baseline = _load_models(base_paths) if base_paths else None
    cohort, weights = _cohort_and_weights(st)
    spec = _eval_spec(st, seed)
    run.seeds["bootstrap"] = spec.seed
    data = TrainData.from_cohort(cohort, weights)
    w = np.ones(len(cohort)) if weights is None else weights.weights
    report = evaluate(_scores(models, cohort), data.y, w, cohort.group_index, cohort.groups, spec,
                      baseline_sets=None if baseline is None else _scores(baseline, cohort),
                      n_jobs=threads)
    if report.n_undefined is not None and report.n_undefined.any() or np.isnan(report.estimate).any():
        logger.warning("some metrics are undefined and reported as NA")
    run.write("report.csv", report.to_csv())
    run.write("report.txt", report.to_text())
    run.stage("evaluate")


def cmd_dca(st: Settings, run: Run, seed, threads):
    models = _load_models(st.paths("models"))
    cohort, weights = _cohort_and_weights(st)
    data = TrainData.from_cohort(cohort, weights)
    w = np.ones(len(cohort)) if weights is None else weights.weights
    kappa = st.get("kappa", None, float)
    spec_r = None if kappa is None else relative_risk_reduction(kappa)
    grid = None
    if st.get("grid") is not None:
        grid = np.asarray([float(v) for v in st.get("grid", kind=list)])
    mode = st.get("mode", "standard", str)
    tau_star = st.get("tau_star", None, float)
    utility = None
    if spec_r is not None:
        from .decision import RiskReductionUtility
        utility = RiskReductionUtility(tau_star if tau_star is not None else 0.5, spec_r)
    scores = _scores(models, cohort)
    k = len(scores)
    groups = np.tile(np.asarray(cohort.group, dtype=object), k) if st.get("by_group", True, bool) else None
    curve = decision_curve(np.concatenate(scores), np.tile(data.y, k), np.tile(w, k), grid=grid,
                           mode=mode, tau_star=tau_star, utility=utility, groups=groups)
    run.write("decision_curve.csv", curve.to_csv())
    run.stage("dca")


COMMANDS = {
    "simulate": cmd_simulate,
    "synth": cmd_synth,
    "pipeline": cmd_pipeline,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "dca": cmd_dca,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="fairnb", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat TOML config file")
        p.add_argument("--seed", type=int, help="overrides the config 'seed'")
        p.add_argument("--out", help="output directory (default: config 'out' or ./out)")
        p.add_argument("--threads", type=int, default=1, help="worker threads for bootstrap")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    run = None
    try:
        if args.config:
            data = load_config(args.config)
            base = Path(args.config).resolve().parent
        else:
            data, base = {}, Path.cwd()
        if args.seed is not None:
            data["seed"] = args.seed
        st = Settings(data, base)
        seed = st.get("seed", 0, int)
        out = args.out or st.get("out", "out", str)
        if args.threads is None or args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        run = Run(args.command, out, st)
        run.seeds["seed"] = seed
        _validate_keys(args.command, st)
        COMMANDS[args.command](st, run, seed, args.threads)
        run.manifest("ok")
        return EXIT_OK
    except (ConfigError, DomainError, CohortParseError, SizingError) as exc:
        print(f"fairnb {args.command}: configuration error: {exc}", file=sys.stderr)
        code = EXIT_CONFIG
    except FairNBError as exc:
        print(f"fairnb {args.command}: error: {exc}", file=sys.stderr)
        code = EXIT_RUNTIME
    except (OSError, ValueError, FloatingPointError) as exc:
        print(f"fairnb {args.command}: error: {exc}", file=sys.stderr)
        code = EXIT_RUNTIME
    if run is not None and run.stages:
        try:
            run.manifest("failed")
        except OSError:
            pass
    return code


# Keys each command accepts, checked before any work starts.
_COMMON = {"seed", "out", "horizon"}
_PREP = {"cohort", "fractions", "n_folds", "split_seed", "n_intervals", *SYNTH_KEYS}
_EVAL = {"thresholds", "nb_pairs", "kappa", "n_replicates", "bootstrap_seed"}
ACCEPTED = {
    "simulate": {f.name for f in fields(SimConfig)},
    "synth": set(SYNTH_KEYS) - {"synth_seed"},
    "train": _PREP | TRAIN_KEYS | {"train_seed"},
    "pipeline": _PREP | TRAIN_KEYS | _EVAL | {"train_seed", "lams", "etas", "selection",
                                              "dca_mode", "dca_tau_star"},
    "evaluate": {"models", "baseline_models", "cohort", "weights"} | _EVAL,
    "dca": {"models", "cohort", "weights", "kappa", "grid", "mode", "tau_star", "by_group"},
}


def _validate_keys(command, st: Settings):
    unknown = sorted(set(st.data) - ACCEPTED[command] - _COMMON)
    if unknown:
        raise ConfigError(f"unknown config keys for {command}: {unknown}")


if __name__ == "__main__":
    sys.exit(main())
