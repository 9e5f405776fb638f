"""Command-line interface: simulate, fit, evaluate, accuracy, benchmark.

Datasets travel as wide CSV files (per-stage covariate columns, then the
stage action, ..., then ``Y``); regimes as JSON files; run settings as
flags optionally seeded from a YAML/JSON config file.  Every report embeds
the seeds, a hash of the resolved configuration and the estimator
diagnostics needed to reproduce the run.

Exit status: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import __version__
from .core import (
    ConfigError,
    DataError,
    Dataset,
    DtrlabError,
    FeatureMap,
    LinearSignRule,
    Regime,
    ShapeError,
    ThresholdRule,
    Trajectory,
    rule_from_dict,
    rule_to_dict,
)
from .ctree import TreeHyperparams, causal_tree_fit
from .direct import OwlSpec, RegimeClass, bowl_fit, search_optimal_regime
from .indirect import (
    FitResult,
    a_learning_fit,
    fit_propensity_models,
    q_learning_fit,
    stage_spec,
)
from .simlab import (
    DgpSpec,
    SpecError,
    bootstrap_se,
    case1_dgp,
    case2_dgp,
    decision_accuracy,
    generate_from_spec,
    mc_value,
    truncated_normal,
)
from .stats import NumericalError

METHODS = ("q", "a1", "a2", "a3", "a4", "dwols", "ctree", "ipwe", "aipwe", "bowl")
PSI_METHODS = ("q", "a1", "a2", "a3", "a4", "dwols")

# ---------------------------------------------------------------------------
# CSV dataset I/O


def _fmt(value: float) -> str:
    # Shortest representation that round-trips exactly.
    return repr(float(value))


def write_dataset_csv(data: Dataset, path: str | Path) -> None:
    """Wide CSV: stage covariates then the stage action, per stage, then Y.

    Stages past a trajectory's terminal stage are left empty.
    """
    header: list[str] = []
    for j, names in enumerate(data.stage_names, start=1):
        header.extend(names)
        header.append(f"A{j}")
    header.append("Y")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for t in data.trajectories:
            row: list[str] = []
            for j in range(data.stage_count):
                dim = data.stage_dims[j]
                if j < t.n_stages:
                    row.extend(_fmt(v) for v in t.covariates[j])
                    row.append(str(t.actions[j]))
                else:
                    row.extend([""] * (dim + 1))
            row.append(_fmt(t.outcome))
            writer.writerow(row)


def _parse_wide_header(header: Sequence[str]) -> tuple[tuple[str, ...], ...]:
    if not header or header[-1] != "Y":
        raise DataError("the last CSV column must be Y")
    stages: list[tuple[str, ...]] = []
    current: list[str] = []
    expect = 1
    for col in header[:-1]:
        if col == f"A{expect}":
            if not current:
                raise DataError(f"no covariate columns before {col}")
            stages.append(tuple(current))
            current = []
            expect += 1
        elif col.startswith("A") and col[1:].isdigit():
            raise DataError(f"unexpected action column {col!r}; expected "
                            f"A{expect}")
        else:
            current.append(col)
    if current:
        raise DataError("trailing covariate columns without an action column")
    if not stages:
        raise DataError("no stages found in the CSV header")
    return tuple(stages)


def read_dataset_csv(path: str | Path, long: bool = False) -> Dataset:
    """Load a dataset; ``long=True`` accepts one row per person-stage."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if long:
        return _read_long(header, body, path)
    stage_names = _parse_wide_header(header)
    trajectories = []
    for ln, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DataError(f"{path}:{ln}: expected {len(header)} cells")
        covs: list[tuple[float, ...]] = []
        acts: list[int] = []
        pos = 0
        stopped = False
        for j, names in enumerate(stage_names, start=1):
            cells = row[pos: pos + len(names) + 1]
            pos += len(names) + 1
            if all(c.strip() == "" for c in cells):
                stopped = True
                continue
            if stopped:
                raise DataError(
                    f"{path}:{ln}: stage {j} present after a missing stage; "
                    "early-terminated rows must be prefixes")
            if any(c.strip() == "" for c in cells):
                raise DataError(f"{path}:{ln}: stage {j} is partially empty")
            try:
                covs.append(tuple(float(c) for c in cells[:-1]))
            except ValueError:
                raise DataError(f"{path}:{ln}: non-numeric covariate in "
                                f"stage {j}") from None
            if cells[-1].strip() not in ("0", "1"):
                raise DataError(
                    f"{path}:{ln}: action A{j}={cells[-1]!r}; only binary "
                    "0/1 actions are supported")
            acts.append(int(cells[-1]))
        try:
            y = float(row[-1])
        except ValueError:
            raise DataError(f"{path}:{ln}: non-numeric outcome") from None
        try:
            trajectories.append(Trajectory(tuple(covs), tuple(acts), y))
        except DataError as e:
            raise DataError(f"{path}:{ln}: {e}") from None
    try:
        return Dataset(tuple(trajectories), stage_names)
    except DataError as e:
        raise DataError(f"{path}: {e}") from None


def _read_long(header, body, path) -> Dataset:
    """Long format: id, stage, A, Y plus covariate cells X1..Xp."""
    required = ["id", "stage", "A", "Y"]
    if header[:4] != required:
        raise DataError(f"{path}: long format needs leading columns "
                        f"{required}, got {header[:4]}")
    xcols = header[4:]
    per_id: dict[str, dict[int, tuple]] = {}
    order: list[str] = []
    y_by_id: dict[str, float] = {}
    for ln, row in enumerate(body, start=2):
        ident, stage_s, a_s, y_s = row[:4]
        try:
            stage = int(stage_s)
        except ValueError:
            raise DataError(f"{path}:{ln}: non-integer stage") from None
        if a_s.strip() not in ("0", "1"):
            raise DataError(f"{path}:{ln}: only binary 0/1 actions are "
                            "supported")
        values = [c for c in row[4:] if c.strip() != ""]
        try:
            covs = tuple(float(c) for c in values)
        except ValueError:
            raise DataError(f"{path}:{ln}: non-numeric covariate") from None
        if ident not in per_id:
            per_id[ident] = {}
            order.append(ident)
        per_id[ident][stage] = (covs, int(a_s))
        if y_s.strip() != "":
            y_by_id[ident] = float(y_s)
    dims: dict[int, int] = {}
    for ident, stages in per_id.items():
        for j, (covs, _) in stages.items():
            dims.setdefault(j, len(covs))
            if dims[j] != len(covs):
                raise DataError(
                    f"{path}: inconsistent stage-{j} dimension for id "
                    f"{ident!r}")
    K = max(dims)
    stage_names = tuple(
        (f"L{j}",) if dims.get(j, 1) == 1
        else tuple(f"L{j}_{k}" for k in range(1, dims[j] + 1))
        for j in range(1, K + 1))
    trajectories = []
    for ident in order:
        stages = per_id[ident]
        if sorted(stages) != list(range(1, len(stages) + 1)):
            raise DataError(f"{path}: id {ident!r} has non-prefix stages "
                            f"{sorted(stages)}")
        if ident not in y_by_id:
            raise DataError(f"{path}: id {ident!r} has no outcome")
        covs = tuple(stages[j][0] for j in range(1, len(stages) + 1))
        acts = tuple(stages[j][1] for j in range(1, len(stages) + 1))
        trajectories.append(Trajectory(covs, acts, y_by_id[ident]))
    return Dataset(tuple(trajectories), stage_names)


# ---------------------------------------------------------------------------
# Regime files


def regime_to_json_dict(regime: Regime) -> dict:
    return {"stage_count": regime.stage_count,
            "rules": [rule_to_dict(r) for r in regime.rules]}


def regime_from_json_dict(d: dict) -> Regime:
    try:
        rules = tuple(rule_from_dict(r) for r in d["rules"])
    except (KeyError, TypeError) as e:
        raise ConfigError(f"malformed regime file: {e}") from None
    return Regime(rules)


def write_regime(regime: Regime, path: str | Path) -> None:
    Path(path).write_text(json.dumps(regime_to_json_dict(regime), indent=2)
                          + "\n")


def read_regime(path: str | Path) -> Regime:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid regime JSON ({e})") from None
    return regime_from_json_dict(payload)


# ---------------------------------------------------------------------------
# Declarative generating-process files

_EXPR_FUNCS = {
    "abs": np.abs, "exp": np.exp, "log": np.log, "log1p": np.log1p,
    "sqrt": np.sqrt, "minimum": np.minimum, "maximum": np.maximum,
    "where": np.where, "sign": np.sign, "pi": math.pi,
}


def _safe_eval(expr: str, env: dict) -> np.ndarray:
    from scipy.special import expit

    namespace = dict(_EXPR_FUNCS)
    namespace["expit"] = expit
    namespace.update(env)
    try:
        return eval(compile(expr, "<dgp-spec>", "eval"),
                    {"__builtins__": {}}, namespace)
    except Exception as e:
        raise SpecError(f"cannot evaluate expression {expr!r}: {e}") from None


def _make_sampler(names, dists):
    def sampler(rng, env, n):
        out = {}
        scope = dict(env)
        for name in names:
            d = dists[name]
            kind = d.get("dist", "normal")
            mean = d.get("mean", 0.0)
            mean = (_safe_eval(mean, scope) if isinstance(mean, str)
                    else float(mean))
            if kind == "constant":
                out[name] = np.broadcast_to(np.asarray(mean, float), (n,)).copy()
            elif kind == "normal":
                out[name] = np.broadcast_to(mean, (n,)) + rng.normal(
                    0.0, float(d["sd"]), n)
            elif kind == "truncnormal":
                out[name] = truncated_normal(
                    rng, np.broadcast_to(mean, (n,)), float(d["sd"]),
                    low=float(d.get("low", -np.inf)),
                    high=float(d.get("high", np.inf)), size=n)
            elif kind == "uniform":
                lo, hi = float(d["low"]), float(d["high"])
                out[name] = lo + (hi - lo) * rng.random(n)
            else:
                raise SpecError(f"unknown distribution {kind!r} for {name!r}")
            scope[name] = out[name]
        return out

    return sampler


def _make_env_fn(expr):
    return lambda env: np.asarray(_safe_eval(expr, env), dtype=float)


def _make_regret(expr):
    def regret(env, a):
        scope = dict(env)
        scope["A"] = np.asarray(a, dtype=float)
        return np.asarray(_safe_eval(expr, scope), dtype=float)

    return regret


def _make_oracle(expr):
    return lambda env: np.asarray(_safe_eval(expr, env)).astype(np.int64)


def load_dgp_spec(path: str | Path) -> DgpSpec:
    """Build a generating process from a declarative YAML/JSON file.

    Expressions reference previously sampled columns (and ``A`` inside
    regrets) and are evaluated in a restricted numeric namespace.
    """
    try:
        payload = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as e:
        raise SpecError(f"{path}: invalid YAML ({e})") from None
    if not isinstance(payload, dict) or "stages" not in payload:
        raise SpecError(f"{path}: expected a mapping with a 'stages' list")
    samplers, props, regrets, oracles, names = [], [], [], [], []
    for k, block in enumerate(payload["stages"], start=1):
        for key in ("names", "sample", "propensity", "regret", "oracle"):
            if key not in block:
                raise SpecError(f"{path}: stage {k} is missing {key!r}")
        stage_names = tuple(str(s) for s in block["names"])
        names.append(stage_names)
        samplers.append(_make_sampler(stage_names, block["sample"]))
        props.append(_make_env_fn(str(block["propensity"])))
        regrets.append(_make_regret(str(block["regret"])))
        oracles.append(_make_oracle(str(block["oracle"])))
    centered = payload.get("centered")
    return DgpSpec(
        stage_names=tuple(names),
        samplers=tuple(samplers),
        propensities=tuple(props),
        regrets=tuple(regrets),
        oracle_rules=tuple(oracles),
        mean_outcome=float(payload.get("mean_outcome", 0.0)),
        noise_sd=float(payload.get("noise_sd", 0.0)),
        centered_term=None if centered is None else _make_env_fn(str(centered)),
        oracle_regime=None,
        name=str(payload.get("name", Path(path).stem)),
    )


def _resolve_dgp(case: str | None, spec_file: str | None) -> DgpSpec:
    if (case is None) == (spec_file is None):
        raise ConfigError("exactly one of --case and --spec-file is required")
    if case is not None:
        if case == "case1":
            return case1_dgp()
        if case == "case2":
            return case2_dgp()
        raise ConfigError(f"unknown case {case!r}; choose case1 or case2")
    return load_dgp_spec(spec_file)


# ---------------------------------------------------------------------------
# Shared helpers


def _default_seed(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("DTRLAB_SEED")
    return int(env) if env else 0


def _load_config(args) -> None:
    """Fill options left unset on the command line from a YAML/JSON config.

    Keys mirror the long option names (dashes or underscores); explicit
    flags always win.
    """
    path = getattr(args, "config", None)
    if not path:
        return
    try:
        payload = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"{path}: cannot read config ({e})") from None
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: the config must be a mapping")
    for key, value in payload.items():
        attr = str(key).replace("-", "_")
        if attr in ("config", "func", "command") or not hasattr(args, attr):
            raise ConfigError(f"{path}: unknown config key {key!r}")
        if getattr(args, attr) is None:
            if isinstance(value, list):
                value = [str(v) for v in value]
            setattr(args, attr, value)


def _fill_defaults(args, defaults: dict) -> None:
    for attr, value in defaults.items():
        if getattr(args, attr) is None:
            setattr(args, attr, value)


def _require(args, attr: str, flag: str) -> None:
    if getattr(args, attr) is None:
        raise ConfigError(f"{flag} is required (flag or config key)")


def _listify(value) -> list[str]:
    if isinstance(value, (list, tuple)):
        return [str(v) for v in value]
    return [v.strip() for v in str(value).split(",")]


_FIT_DEFAULTS = {
    "long": False,
    "grid_points": 41,
    "min_leaf": 10,
    "max_depth": 4,
    "honest_fraction": 0.5,
    "no_iptw": False,
    "kernel": "linear",
    "c_grid": "0.25,0.5,1,2,4",
    "folds": 4,
}

_BENCH_DEFAULTS = {
    "replications": 200,
    "sizes": "1000",
    "methods": "q,a1,a2,a3,a4,dwols,ipwe,aipwe",
    "n_tes": 1000,
    "mc_draws": 0,
    "jobs": 1,
}


def _config_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _write_json(payload: dict, path: str | None) -> None:
    if path:
        Path(path).write_text(json.dumps(payload, indent=2, default=_jsonify)
                              + "\n")


def _jsonify(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return str(obj)


def rule_text(rule) -> str:
    """Human rendering; linear two-term rules become threshold statements."""
    if isinstance(rule, ThresholdRule):
        op = "<" if rule.direction == "below" else ">"
        return f"treat if {rule.column} {op} {rule.cutoff:.6g}"
    if isinstance(rule, LinearSignRule):
        terms = rule.features.terms
        coefs = rule.coefficients
        if len(terms) == 2 and terms[0] == "1":
            c0, c1 = coefs
            if c1 < 0:
                return f"treat if {terms[1]} < {c0 / -c1:.6g}"
            if c1 > 0:
                return f"treat if {terms[1]} > {-c0 / c1:.6g}"
            return "always treat" if c0 > 0 else "never treat"
        parts = " + ".join(f"{c:.6g}*{t}" if t != "1" else f"{c:.6g}"
                           for c, t in zip(coefs, terms))
        return f"treat if {parts} > 0"
    kind = type(rule).__name__
    if kind == "TreeRule":
        return "treat if the leaf contrast is positive (see tree)"
    return "treat if the fitted decision function is positive"


def _parse_stage_formulas(values: list[str] | None, what: str,
                          K: int) -> list[str] | None:
    if not values:
        return None
    if len(values) == 1 and ";" in values[0]:
        values = [v.strip() for v in values[0].split(";")]
    if len(values) != K:
        raise ConfigError(f"{what}: expected {K} stage formulas, got "
                          f"{len(values)}")
    return values


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    seed = _default_seed(args.seed)
    spec = _resolve_dgp(args.case, args.spec_file)
    data = generate_from_spec(spec, args.n, seed)
    write_dataset_csv(data, args.out)
    print(f"wrote {data.n} trajectories x {data.stage_count} stages to "
          f"{args.out} (seed {seed})")
    return 0


# ---------------------------------------------------------------------------
# fit


def _build_stage_specs(args, data: Dataset, variant: str):
    K = data.stage_count
    contrasts = _parse_stage_formulas(args.contrast, "--contrast", K)
    tfrees = _parse_stage_formulas(args.tfree, "--tfree", K)
    props = _parse_stage_formulas(args.propensity, "--propensity", K)
    need_contrast = variant in PSI_METHODS or variant == "aipwe"
    need_tfree = variant in ("q", "a3", "a4", "dwols", "aipwe")
    need_prop = variant not in ("q",)
    if need_contrast and contrasts is None:
        raise ConfigError(f"method {variant!r} needs --contrast formulas "
                          "(one per stage)")
    if need_tfree and tfrees is None:
        raise ConfigError(f"method {variant!r} needs --tfree formulas")
    if need_prop and props is None:
        raise ConfigError(f"method {variant!r} needs --propensity formulas")
    specs = []
    for j in range(K):
        specs.append(stage_spec(
            contrast=contrasts[j] if contrasts else "1",
            treatment_free=tfrees[j] if tfrees else None,
            propensity=props[j] if props else None,
            variant=variant if variant in ("q",) + tuple(PSI_METHODS[1:]) else "q",
        ))
    return specs


def _psi_estimator(variant, specs):
    def run(data: Dataset) -> np.ndarray:
        fit = (q_learning_fit(data, specs) if variant == "q"
               else a_learning_fit(data, specs))
        return np.concatenate([p for p in fit.psi])

    return run


def _clip_counts(prop_models, data: Dataset) -> tuple[int, ...]:
    env = data.env()
    counts = []
    for j, model in enumerate(prop_models, start=1):
        rows = data.stage_rows(j)
        env_j = {k: v[rows] for k, v in env.items()}
        p = model.predict(env_j, int(np.sum(rows)))
        counts.append(int(np.sum((p <= model.clip)
                                 | (p >= 1.0 - model.clip))))
    return tuple(counts)


def cmd_fit(args) -> int:
    _load_config(args)
    _fill_defaults(args, _FIT_DEFAULTS)
    _require(args, "method", "--method")
    _require(args, "data", "--data")
    method = str(args.method).lower()
    if method not in METHODS:
        raise ConfigError(
            f"unknown method {args.method!r}; choose one of "
            f"{', '.join(METHODS)}")
    seed = _default_seed(args.seed)
    data = read_dataset_csv(args.data, long=args.long)
    K = data.stage_count
    resolved = {"command": "fit", "method": method, "data": str(args.data),
                "seed": seed, "contrast": args.contrast, "tfree": args.tfree,
                "propensity": args.propensity, "bootstrap": args.bootstrap}
    report: dict = {
        "tool": f"dtrlab {__version__}",
        "method": method,
        "data": str(args.data),
        "n": data.n,
        "stage_count": K,
        "seed": seed,
        "config_hash": _config_hash(resolved),
        "notes": [],
    }
    prop_formulas = _parse_stage_formulas(args.propensity, "--propensity", K)

    if method in PSI_METHODS:
        specs = _build_stage_specs(args, data, method)
        fit = (q_learning_fit(data, specs) if method == "q"
               else a_learning_fit(data, specs))
        report["stages"] = [
            {
                "stage": j + 1,
                "psi": fit.psi[j],
                "xi": fit.xi[j],
                "alpha": fit.alpha[j],
                "rule": rule_to_dict(fit.regime.rules[j]),
                "rule_text": rule_text(fit.regime.rules[j]),
            }
            for j in range(K)
        ]
        report["value_means"] = fit.value_means
        report["diagnostics"] = fit.diagnostics
        if args.bootstrap:
            report["notes"].append(
                "standard errors are nonparametric bootstrap estimates")
            boot = bootstrap_se(_psi_estimator(method, specs), data,
                                args.bootstrap, seed)
            report["bootstrap"] = {
                "replicates": args.bootstrap,
                "failures": boot.failures,
                "psi_se": boot.standard_errors,
            }
        regime = fit.regime
    elif method == "ctree":
        if prop_formulas is None:
            raise ConfigError("method 'ctree' needs --propensity formulas")
        prop_maps = [FeatureMap.parse(f) for f in prop_formulas]
        feat = _parse_stage_formulas(args.tree_features, "--tree-features", K)
        features = ([FeatureMap(tuple(t.strip() for t in f.split(",")))
                     for f in feat] if feat else None)
        hyper = TreeHyperparams(
            min_leaf=int(args.min_leaf), max_depth=int(args.max_depth),
            honest_fraction=float(args.honest_fraction),
            use_iptw=not args.no_iptw, seed=seed)
        fit = causal_tree_fit(data, prop_maps, hyper, features)
        report["stages"] = [
            {
                "stage": j + 1,
                "tree": fit.trees[j].to_json_dict(),
                "tree_text": fit.trees[j].to_text(),
                "rule_text": rule_text(fit.regime.rules[j]),
            }
            for j in range(K)
        ]
        report["value_means"] = fit.value_means
        report["diagnostics"] = fit.diagnostics
        regime = fit.regime
    elif method in ("ipwe", "aipwe"):
        if not args.threshold_columns:
            raise ConfigError(f"method {method!r} needs --threshold-columns "
                              "(the regime class)")
        if prop_formulas is None:
            raise ConfigError(f"method {method!r} needs --propensity formulas")
        columns = [c.strip() for c in args.threshold_columns.split(",")]
        if len(columns) != K:
            raise ConfigError(f"--threshold-columns: expected {K} columns")
        cls = RegimeClass.thresholds(columns, grid_points=int(args.grid_points))
        prop_models = fit_propensity_models(
            data, [FeatureMap.parse(f) for f in prop_formulas])
        q_fit = None
        if method == "aipwe":
            q_fit = q_learning_fit(data, _build_stage_specs(args, data, "aipwe"))
        regime, estimate = search_optimal_regime(
            data, cls, method, prop_models, q_fit=q_fit)
        report["stages"] = [
            {"stage": j + 1, "rule": rule_to_dict(regime.rules[j]),
             "rule_text": rule_text(regime.rules[j])}
            for j in range(K)
        ]
        report["value_estimate"] = {
            "value": estimate.value,
            "estimator": estimate.estimator,
            "n_consistent": estimate.n_consistent,
            "augmentation": estimate.augmentation,
        }
        report["diagnostics"] = {
            "grid_points": args.grid_points,
            "propensity_clipped": _clip_counts(prop_models, data),
        }
        if args.bootstrap:
            def thresholds(d: Dataset) -> np.ndarray:
                pm = fit_propensity_models(
                    d, [FeatureMap.parse(f) for f in prop_formulas])
                qf = (q_learning_fit(d, _build_stage_specs(args, d, "aipwe"))
                      if method == "aipwe" else None)
                r, _ = search_optimal_regime(d, cls, method, pm, q_fit=qf)
                return np.array([rule.cutoff for rule in r.rules])

            report["notes"].append(
                "standard errors are nonparametric bootstrap estimates")
            boot = bootstrap_se(thresholds, data, args.bootstrap, seed)
            report["bootstrap"] = {
                "replicates": args.bootstrap,
                "failures": boot.failures,
                "threshold_se": boot.standard_errors,
            }
    else:  # bowl
        if prop_formulas is None:
            raise ConfigError("method 'bowl' needs --propensity formulas")
        prop_models = fit_propensity_models(
            data, [FeatureMap.parse(f) for f in prop_formulas])
        feat = _parse_stage_formulas(args.tree_features, "--tree-features", K)
        features = (tuple(FeatureMap(tuple(t.strip() for t in f.split(",")))
                          for f in feat) if feat else None)
        spec = OwlSpec(
            kernel=args.kernel, gamma=args.gamma,
            c_grid=tuple(float(c) for c in _listify(args.c_grid)),
            cv_folds=int(args.folds), features=features, seed=seed)
        fit = bowl_fit(data, spec, prop_models)
        report["stages"] = [
            {"stage": j + 1, "rule": rule_to_dict(fit.regime.rules[j]),
             "rule_text": rule_text(fit.regime.rules[j])}
            for j in range(K)
        ]
        report["diagnostics"] = dict(fit.diagnostics)
        report["diagnostics"]["propensity_clipped"] = _clip_counts(
            prop_models, data)
        regime = fit.regime

    if args.bootstrap and method in ("ctree", "bowl"):
        report["notes"].append(
            f"--bootstrap ignored: method {method!r} has no parameter "
            "vector to resample")

    if args.save_regime:
        write_regime(regime if method not in ("ipwe", "aipwe") else regime,
                     args.save_regime)
    _print_fit_report(report)
    _write_json(report, args.out)
    return 0


def _print_fit_report(report: dict) -> None:
    print(f"method: {report['method']}   n={report['n']} "
          f"K={report['stage_count']}   seed={report['seed']} "
          f"config={report['config_hash']}")
    for stage in report.get("stages", []):
        j = stage["stage"]
        print(f"stage {j}: {stage.get('rule_text', '')}")
        if stage.get("psi") is not None:
            print(f"  psi{j} = {np.round(np.asarray(stage['psi']), 4).tolist()}")
        if stage.get("xi") is not None:
            print(f"  xi{j}  = {np.round(np.asarray(stage['xi']), 4).tolist()}")
        if stage.get("tree_text"):
            print("  " + stage["tree_text"].replace("\n", "\n  "))
    if report.get("value_means"):
        means = ", ".join(f"{v:.2f}" for v in report["value_means"])
        print(f"value-column means: {means}")
    if report.get("value_estimate"):
        ve = report["value_estimate"]
        print(f"{ve['estimator']} value: {ve['value']:.3f} "
              f"(consistent trajectories: {ve['n_consistent']})")
    if report.get("bootstrap"):
        bs = report["bootstrap"]
        key = "psi_se" if "psi_se" in bs else "threshold_se"
        print(f"bootstrap SE ({bs['replicates']} replicates, "
              f"{bs['failures']} failures): "
              f"{np.round(np.asarray(bs[key]), 4).tolist()}")


# ---------------------------------------------------------------------------
# evaluate / accuracy


def cmd_evaluate(args) -> int:
    seed = _default_seed(args.seed)
    spec = _resolve_dgp(args.case, args.spec_file)
    regime = read_regime(args.regime)
    report = mc_value(regime, spec, args.draws, seed)
    payload = {
        "command": "evaluate",
        "regime": str(args.regime),
        "process": spec.name,
        "draws": report.draws,
        "seed": seed,
        "config_hash": _config_hash({"command": "evaluate",
                                     "regime": str(args.regime),
                                     "process": spec.name,
                                     "draws": args.draws, "seed": seed}),
        "value": report.value,
        "standard_error": report.standard_error,
    }
    print(f"Monte-Carlo value of {args.regime} under {spec.name}: "
          f"{report.value:.3f} (SE {report.standard_error:.3f}, "
          f"B={report.draws}, seed {seed})")
    _write_json(payload, args.out)
    return 0


def cmd_accuracy(args) -> int:
    seed = _default_seed(args.seed)
    spec = _resolve_dgp(args.case, None)
    if spec.oracle_regime is None:
        raise ConfigError("accuracy needs a process with a known oracle "
                          "regime (case1 or case2)")
    regime = read_regime(args.regime)
    test = generate_from_spec(spec, args.n_tes, seed, audit=False)
    report = decision_accuracy(regime, spec.oracle_regime, test)
    payload = {
        "command": "accuracy",
        "regime": str(args.regime),
        "process": spec.name,
        "n_tes": args.n_tes,
        "seed": seed,
        "config_hash": _config_hash({"command": "accuracy",
                                     "regime": str(args.regime),
                                     "process": spec.name,
                                     "n_tes": args.n_tes, "seed": seed}),
        "per_stage": report.per_stage,
        "overall": report.overall,
    }
    stages = "  ".join(f"accu{j + 1}={a:.4f}"
                       for j, a in enumerate(report.per_stage))
    print(f"{stages}  overall={report.overall:.4f}  "
          f"(n_tes={args.n_tes}, seed {seed})")
    _write_json(payload, args.out)
    return 0


# ---------------------------------------------------------------------------
# benchmark

CASE1_FORMULAS = {
    "contrast": ("1,L1", "1,L2"),
    "tfree": ("1,L1", "1,L1,A1,L1:A1,L2"),
    "propensity": ("1,L1", "1,L2"),
    "thresholds": ("L1", "L2"),
    "true_psi": (250.0, -1.0, 720.0, -2.0),
    "true_thresholds": (250.0, 360.0),
}
# Linear blip and treatment-free working models over the full history
# (dimensions grow with the stage), with correctly specified treatment
# models.
CASE2_FORMULAS = {
    "contrast": ("1,W,L11,L12", "1,W,L11,L12,A1,L21,L22",
                 "1,W,L11,L12,A1,L21,L22,A2,L31,L32"),
    "tfree": ("1,W,L11,L12", "1,W,L11,L12,A1,L21,L22",
              "1,W,L11,L12,A1,L21,L22,A2,L31,L32"),
    "propensity": ("1,W", "1,L21,L22", "1,L31"),
    "true_psi": None,
    "true_thresholds": None,
}


def _suite_formulas(suite: str) -> dict:
    return CASE1_FORMULAS if suite == "case1" else CASE2_FORMULAS


def _suite_dgp(suite: str) -> DgpSpec:
    return case1_dgp() if suite == "case1" else case2_dgp()


def _benchmark_replicate(task: tuple) -> dict:
    """One replication: simulate, fit every method, score on fresh data."""
    suite, n, n_tes, mc_draws, methods, ss = task
    spec = _suite_dgp(suite)
    forms = _suite_formulas(suite)
    train_seed, test_seed, mc_seed, hyper_seed = (
        int(s.generate_state(1)[0]) for s in ss.spawn(4))
    train = generate_from_spec(spec, n, train_seed, audit=False)
    test = generate_from_spec(spec, n_tes, test_seed, audit=False)
    out: dict = {}
    prop_maps = [FeatureMap.parse(f) for f in forms["propensity"]]
    shared: dict = {}
    for method in methods:
        try:
            out[method] = _run_one_method(
                method, suite, train, test, spec, forms, prop_maps,
                mc_draws, mc_seed, hyper_seed, shared)
        except (DtrlabError, np.linalg.LinAlgError) as e:
            out[method] = {"failed": True, "error": f"{type(e).__name__}: {e}"}
    return out


def _run_one_method(method, suite, train, test, spec, forms, prop_maps,
                    mc_draws, mc_seed, hyper_seed, shared) -> dict:
    result: dict = {"failed": False}
    if method in PSI_METHODS:
        specs = [
            stage_spec(forms["contrast"][j], forms["tfree"][j],
                       forms["propensity"][j], method)
            for j in range(train.stage_count)
        ]
        fit = (q_learning_fit(train, specs) if method == "q"
               else a_learning_fit(train, specs))
        result["psi"] = np.concatenate(fit.psi).tolist()
        result["psi_labels"] = [f"psi{j + 1}{k}"
                                for j, arr in enumerate(fit.psi)
                                for k in range(len(arr))]
        result["thresholds"] = _implied_thresholds(fit)
        regime = fit.regime
    elif method == "ctree":
        fit = causal_tree_fit(train, prop_maps,
                              TreeHyperparams(seed=hyper_seed))
        regime = fit.regime
    elif method in ("ipwe", "aipwe"):
        if "thresholds" not in forms or forms["thresholds"] is None:
            raise ConfigError(
                f"method {method!r} is not configured for suite {suite!r}")
        if "prop_models" not in shared:
            shared["prop_models"] = fit_propensity_models(train, prop_maps)
        q_fit = None
        if method == "aipwe":
            if "q_fit" not in shared:
                q_specs = [stage_spec(forms["contrast"][j], forms["tfree"][j],
                                      variant="q")
                           for j in range(train.stage_count)]
                shared["q_fit"] = q_learning_fit(train, q_specs)
            q_fit = shared["q_fit"]
        cls = RegimeClass.thresholds(forms["thresholds"])
        regime, _ = search_optimal_regime(
            train, cls, method, shared["prop_models"], q_fit=q_fit)
        result["thresholds"] = [r.cutoff for r in regime.rules]
    elif method == "bowl":
        if "prop_models" not in shared:
            shared["prop_models"] = fit_propensity_models(train, prop_maps)
        fit = bowl_fit(train, OwlSpec(seed=hyper_seed), shared["prop_models"])
        regime = fit.regime
    else:
        raise ConfigError(f"unknown method {method!r}")
    acc = decision_accuracy(regime, spec.oracle_regime, test)
    result["accuracy"] = list(acc.per_stage) + [acc.overall]
    if mc_draws > 0:
        result["value"] = mc_value(regime, spec, mc_draws, mc_seed).value
    return result


def _implied_thresholds(fit: FitResult) -> list:
    out = []
    for psi in fit.psi:
        if psi is None or len(psi) != 2 or psi[1] >= 0:
            out.append(None)
        else:
            out.append(float(psi[0] / -psi[1]))
    return out


def _agg(values: list[float]) -> tuple[str, str]:
    arr = np.asarray([v for v in values if v is not None], dtype=float)
    if arr.size == 0:
        return ("NA", "NA")
    mean = _fmt(float(np.mean(arr)))
    sd = _fmt(float(np.std(arr, ddof=1))) if arr.size > 1 else "NA"
    return mean, sd


def cmd_benchmark(args) -> int:
    _load_config(args)
    _fill_defaults(args, _BENCH_DEFAULTS)
    _require(args, "suite", "--suite")
    _require(args, "out_dir", "--out-dir")
    seed = _default_seed(args.seed)
    suite = args.suite
    if suite not in ("case1", "case2"):
        raise ConfigError(f"unknown suite {suite!r}; choose case1 or case2")
    methods = tuple(m.lower() for m in _listify(args.methods))
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; choose from "
                              f"{', '.join(METHODS)}")
        if suite == "case2" and m in ("ipwe", "aipwe"):
            raise ConfigError(
                "the direct-search estimators are not configured for case2 "
                "(too many free regime parameters)")
    sizes = tuple(int(s) for s in _listify(args.sizes))
    R = int(args.replications)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(seed).spawn(len(sizes) * R)
    tasks = []
    for si, n in enumerate(sizes):
        for r in range(R):
            tasks.append((suite, n, int(args.n_tes), int(args.mc_draws), methods,
                          children[si * R + r]))
    jobs = int(args.jobs)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_benchmark_replicate, tasks))
    else:
        results = [_benchmark_replicate(t) for t in tasks]
    # Aggregate by replicate index; identical output for any worker count.
    forms = _suite_formulas(suite)
    failures: dict = {}
    est_rows, acc_rows, val_rows = [], [], []
    for si, n in enumerate(sizes):
        reps = results[si * R: (si + 1) * R]
        for method in methods:
            ok = [r[method] for r in reps if not r[method]["failed"]]
            n_fail = R - len(ok)
            failures[(n, method)] = n_fail
            if n_fail > 0.2 * R:
                raise NumericalError(
                    f"method {method!r} failed {n_fail}/{R} replications at "
                    f"n={n}")
            if method in PSI_METHODS and ok and "psi" in ok[0]:
                labels = ok[0]["psi_labels"]
                true_psi = forms.get("true_psi")
                for k, label in enumerate(labels):
                    mean, sd = _agg([r["psi"][k] for r in ok])
                    true = (_fmt(true_psi[k])
                            if true_psi and k < len(true_psi) else "NA")
                    est_rows.append([suite, n, method, label, true,
                                     mean, sd, len(ok), n_fail])
            if ok and "thresholds" in ok[0]:
                true_thr = forms.get("true_thresholds")
                for j in range(len(ok[0]["thresholds"])):
                    values = [r["thresholds"][j] for r in ok]
                    if all(v is None for v in values):
                        continue
                    mean, sd = _agg(values)
                    true = (_fmt(true_thr[j]) if true_thr else "NA")
                    est_rows.append([suite, n, method, f"threshold{j + 1}",
                                     true, mean, sd, len(ok), n_fail])
            if ok and "accuracy" in ok[0]:
                K = len(ok[0]["accuracy"]) - 1
                labels = [f"accu{j + 1}" for j in range(K)] + ["accu"]
                for k, label in enumerate(labels):
                    mean, sd = _agg([r["accuracy"][k] for r in ok])
                    acc_rows.append([suite, n, method, label, mean, sd,
                                     len(ok), n_fail])
            if ok and "value" in ok[0]:
                mean, sd = _agg([r["value"] for r in ok])
                val_rows.append([suite, n, method, mean, sd, len(ok), n_fail])
    _write_csv(out_dir / f"{suite}_estimates.csv",
               ["suite", "n", "method", "parameter", "true", "mean", "sd",
                "reps_ok", "reps_failed"], est_rows)
    _write_csv(out_dir / f"{suite}_accuracy.csv",
               ["suite", "n", "method", "stage", "mean", "sd", "reps_ok",
                "reps_failed"], acc_rows)
    if val_rows:
        _write_csv(out_dir / f"{suite}_values.csv",
                   ["suite", "n", "method", "mean", "sd", "reps_ok",
                    "reps_failed"], val_rows)
    summary = _render_summary(suite, seed, R, sizes, methods, est_rows,
                              acc_rows, val_rows)
    (out_dir / f"{suite}_summary.txt").write_text(summary)
    print(summary, end="")
    return 0


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([str(c) for c in row])


def _round(s: str, nd: int = 4) -> str:
    if s == "NA":
        return s
    return f"{float(s):.{nd}g}"


def _render_summary(suite, seed, R, sizes, methods, est_rows, acc_rows,
                    val_rows) -> str:
    buf = io.StringIO()
    buf.write(f"benchmark suite {suite}  R={R}  sizes={list(sizes)}  "
              f"seed={seed}\n")
    buf.write(f"methods: {', '.join(methods)}\n")
    if est_rows:
        buf.write("\nestimates (mean, SD over replications):\n")
        for row in est_rows:
            _, n, method, param, true, mean, sd, ok, fail = row
            true_s = "" if true == "NA" else f" true={_round(true)}"
            buf.write(f"  n={n:<6} {method:<6} {param:<12}{true_s:<14} "
                      f"mean={_round(mean):<10} SD={_round(sd)}\n")
    if acc_rows:
        buf.write("\ndecision accuracy (proportion, SD):\n")
        for row in acc_rows:
            _, n, method, stage, mean, sd, ok, fail = row
            buf.write(f"  n={n:<6} {method:<6} {stage:<7} "
                      f"mean={_round(mean):<10} SD={_round(sd)}\n")
    if val_rows:
        buf.write("\nMonte-Carlo regime values:\n")
        for row in val_rows:
            _, n, method, mean, sd, ok, fail = row
            buf.write(f"  n={n:<6} {method:<6} value={_round(mean):<10} "
                      f"SD={_round(sd)}\n")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dtrlab",
        description="Estimate and evaluate optimal dynamic treatment "
                    "regimes from longitudinal data.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="simulate a dataset to CSV")
    sim.add_argument("--case", choices=["case1", "case2"])
    sim.add_argument("--spec-file", help="declarative YAML/JSON process file")
    sim.add_argument("-n", type=int, required=True)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--out", required=True)
    sim.set_defaults(func=cmd_simulate)

    fit = sub.add_parser("fit", help="fit an estimator to a CSV dataset")
    fit.add_argument("--config", help="YAML/JSON file supplying any of the "
                                      "options below; flags win")
    fit.add_argument("--method", help=f"one of: {', '.join(METHODS)}")
    fit.add_argument("--data")
    fit.add_argument("--long", action="store_const", const=True,
                     help="input CSV is in long (person-stage) format")
    fit.add_argument("--contrast", action="append",
                     help="stage contrast formula, repeat per stage "
                          "(e.g. '1,L2')")
    fit.add_argument("--tfree", action="append",
                     help="stage treatment-free formula, repeat per stage")
    fit.add_argument("--propensity", action="append",
                     help="stage propensity formula, repeat per stage")
    fit.add_argument("--tree-features", action="append",
                     help="per-stage feature columns for ctree/bowl")
    fit.add_argument("--threshold-columns",
                     help="comma-separated columns for the ipwe/aipwe "
                          "threshold regime class")
    fit.add_argument("--grid-points", type=int)
    fit.add_argument("--min-leaf", type=int)
    fit.add_argument("--max-depth", type=int)
    fit.add_argument("--honest-fraction", type=float)
    fit.add_argument("--no-iptw", action="store_const", const=True)
    fit.add_argument("--kernel", choices=["linear", "rbf"])
    fit.add_argument("--gamma", type=float)
    fit.add_argument("--c-grid")
    fit.add_argument("--folds", type=int)
    fit.add_argument("--bootstrap", type=int, metavar="B",
                     help="bootstrap replicates for standard errors")
    fit.add_argument("--seed", type=int)
    fit.add_argument("--save-regime", help="write the fitted regime JSON")
    fit.add_argument("--out", help="write the JSON report")
    fit.set_defaults(func=cmd_fit)

    ev = sub.add_parser("evaluate",
                        help="Monte-Carlo value of a regime file")
    ev.add_argument("--regime", required=True)
    ev.add_argument("--case", choices=["case1", "case2"])
    ev.add_argument("--spec-file")
    ev.add_argument("-B", "--draws", type=int, default=10000)
    ev.add_argument("--seed", type=int)
    ev.add_argument("--out")
    ev.set_defaults(func=cmd_evaluate)

    ac = sub.add_parser("accuracy",
                        help="decision accuracy of a regime file against "
                             "the oracle")
    ac.add_argument("--regime", required=True)
    ac.add_argument("--case", choices=["case1", "case2"], required=True)
    ac.add_argument("--n-tes", type=int, default=1000)
    ac.add_argument("--seed", type=int)
    ac.add_argument("--out")
    ac.set_defaults(func=cmd_accuracy)

    be = sub.add_parser("benchmark",
                        help="replicate the simulation benchmark tables")
    be.add_argument("--config", help="YAML/JSON file supplying any of the "
                                     "options below; flags win")
    be.add_argument("--suite")
    be.add_argument("-R", "--replications", type=int)
    be.add_argument("--sizes")
    be.add_argument("--methods")
    be.add_argument("--n-tes", type=int)
    be.add_argument("--mc-draws", type=int,
                    help="Monte-Carlo draws for per-replicate regime values "
                         "(0 disables)")
    be.add_argument("--seed", type=int)
    be.add_argument("--jobs", type=int)
    be.add_argument("--out-dir")
    be.set_defaults(func=cmd_benchmark)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SpecError, ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (NumericalError, np.linalg.LinAlgError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
