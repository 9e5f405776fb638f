"""Regret-parameterised data generation and Monte-Carlo evaluation.

A generating process is specified by per-stage covariate samplers, treatment
probabilities and nonnegative regret functions.  The outcome is built as

    Y = mean_outcome + centered_term + noise - sum_j regret_j(history, A_j)

so the oracle regime (the one zeroing every regret) attains ``mean_outcome``
on average, and the conditional mean of ``Y`` given any realised history
follows the regret decomposition by construction.

Seeds are threaded explicitly through ``numpy.random.SeedSequence`` so
replications, bootstrap resamples and Monte-Carlo draws are reproducible
and independent of worker scheduling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit, ndtr, ndtri

from .core import (
    Dataset,
    DtrlabError,
    FeatureMap,
    LinearSignRule,
    Regime,
    ShapeError,
    TreeNode,
    TreeRule,
)
from .stats import NumericalError

__all__ = [
    "SpecError",
    "DgpSpec",
    "McValueReport",
    "AccuracyReport",
    "BootstrapResult",
    "truncated_normal",
    "generate_from_spec",
    "generate_case1",
    "generate_case2",
    "case1_dgp",
    "case2_dgp",
    "case1_oracle_regime",
    "case2_oracle_regime",
    "audit_regrets",
    "mc_value",
    "decision_accuracy",
    "bootstrap_se",
]

Env = dict[str, np.ndarray]
Sampler = Callable[[np.random.Generator, Env, int], Env]
EnvFn = Callable[[Env], np.ndarray]
RegretFn = Callable[[Env, np.ndarray], np.ndarray]

_AUDIT_TOL = 1e-8


class SpecError(DtrlabError, ValueError):
    """Invalid data-generating specification."""


@dataclass(frozen=True)
class DgpSpec:
    """Declarative generating process for a K-stage study.

    ``samplers[j]`` draws the stage ``j+1`` covariates given the accumulated
    environment (prior covariates plus actions ``A1..Aj``); ``propensities``
    give treatment probabilities, ``regrets`` the per-stage loss of a
    sub-optimal action, and ``oracle_rules`` the actions that zero each
    regret.  ``oracle_regime`` is an equivalent rule-based representation
    when one exists (None for ad-hoc file-defined processes).
    """

    stage_names: tuple[tuple[str, ...], ...]
    samplers: tuple[Sampler, ...]
    propensities: tuple[EnvFn, ...]
    regrets: tuple[RegretFn, ...]
    oracle_rules: tuple[EnvFn, ...]
    mean_outcome: float
    noise_sd: float = 0.0
    centered_term: EnvFn | None = None
    oracle_regime: Regime | None = None
    name: str = "custom"

    def __post_init__(self) -> None:
        K = len(self.stage_names)
        if K < 1:
            raise SpecError("a generating process needs at least one stage")
        for part, label in (
            (self.samplers, "samplers"),
            (self.propensities, "propensities"),
            (self.regrets, "regrets"),
            (self.oracle_rules, "oracle_rules"),
        ):
            if len(part) != K:
                raise SpecError(f"{label} must list one entry per stage")
        if self.noise_sd < 0:
            raise SpecError("noise_sd must be nonnegative")

    @property
    def stage_count(self) -> int:
        return len(self.stage_names)


def truncated_normal(
    rng: np.random.Generator,
    mean: np.ndarray | float,
    sd: float,
    low: float = -np.inf,
    high: float = np.inf,
    size: int | None = None,
) -> np.ndarray:
    """Exact rejection-free truncated-normal sampling via the inverse CDF."""
    mean = np.asarray(mean, dtype=float)
    if size is None:
        size = mean.shape[0] if mean.ndim else 1
    lo = ndtr((low - mean) / sd)
    hi = ndtr((high - mean) / sd)
    u = rng.random(size)
    return mean + sd * ndtri(lo + u * (hi - lo))


def _outcome(
    spec: DgpSpec, rng: np.random.Generator, env: Env, actions: list[np.ndarray], n: int
) -> np.ndarray:
    y = np.full(n, spec.mean_outcome)
    if spec.centered_term is not None:
        y = y + np.broadcast_to(np.asarray(spec.centered_term(env), dtype=float), (n,))
    if spec.noise_sd > 0:
        y = y + rng.normal(0.0, spec.noise_sd, n)
    for j, regret in enumerate(spec.regrets):
        y = y - np.broadcast_to(np.asarray(regret(env, actions[j]), dtype=float), (n,))
    return y


def _audit_env(spec: DgpSpec, env: Env, n: int) -> None:
    ones = np.ones(n)
    zeros = np.zeros(n)
    for j, regret in enumerate(spec.regrets, start=1):
        mu0 = np.asarray(regret(env, zeros), dtype=float)
        mu1 = np.asarray(regret(env, ones), dtype=float)
        worst = min(float(np.min(mu0, initial=np.inf)),
                    float(np.min(mu1, initial=np.inf)))
        if worst < -_AUDIT_TOL:
            raise SpecError(
                f"stage {j} regret is negative ({worst:.3g}) on sampled "
                "histories; regrets must be nonnegative")
        opt = np.asarray(spec.oracle_rules[j - 1](env), dtype=float)
        at_opt = np.where(opt > 0, mu1, mu0)
        if float(np.max(np.abs(at_opt), initial=0.0)) > _AUDIT_TOL:
            raise SpecError(
                f"stage {j} regret does not vanish at the oracle action")


def generate_from_spec(
    spec: DgpSpec, n: int, seed: int, audit: bool = True
) -> Dataset:
    """Simulate ``n`` trajectories; deterministic given ``(spec, n, seed)``.

    Draws proceed in time order (stage covariates, then the action uniform,
    stage by stage, then the outcome noise).  A sampling audit rejects specs
    whose regrets go negative or fail to vanish at the oracle action.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    env: Env = {}
    actions: list[np.ndarray] = []
    for j in range(spec.stage_count):
        drawn = spec.samplers[j](rng, dict(env), n)
        for name in spec.stage_names[j]:
            if name not in drawn:
                raise SpecError(f"stage {j + 1} sampler did not produce "
                                f"column {name!r}")
            env[name] = np.broadcast_to(
                np.asarray(drawn[name], dtype=float), (n,)).copy()
        p = np.broadcast_to(
            np.asarray(spec.propensities[j](env), dtype=float), (n,))
        if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
            raise SpecError(f"stage {j + 1} propensity outside [0, 1]")
        a = (rng.random(n) < p).astype(np.int64)
        env[f"A{j + 1}"] = a
        actions.append(a)
    if audit:
        _audit_env(spec, env, n)
    y = _outcome(spec, rng, env, actions, n)
    covs = [
        np.column_stack([env[c] for c in names])
        for names in spec.stage_names
    ]
    return Dataset.from_arrays(
        spec.stage_names, covs, np.column_stack(actions), y)


def audit_regrets(spec: DgpSpec, n: int, seed: int) -> None:
    """Regret nonnegativity audit on a fresh sample of ``n`` histories."""
    generate_from_spec(spec, n, seed, audit=True)


# ---------------------------------------------------------------------------
# Benchmark generating processes

_CASE1_PSI = ((250.0, -1.0), (720.0, -2.0))


def _case1_sample_stage1(rng, env, n):
    return {"L1": rng.normal(450.0, 150.0, n)}


def _case1_sample_stage2(rng, env, n):
    return {"L2": rng.normal(1.25 * env["L1"], 60.0, n)}


def _case1_prop1(env):
    # 0.006 (not 0.06): the larger slope would drive the treated arm to
    # measure zero over the L1 range and make every downstream fit
    # degenerate.
    return expit(2.0 - 0.006 * env["L1"])


def _case1_prop2(env):
    return expit(0.8 - 0.004 * env["L2"])


def _case1_blip(env, j):
    psi0, psi1 = _CASE1_PSI[j - 1]
    return psi0 + psi1 * env[f"L{j}"]


def _case1_regret1(env, a):
    blip = _case1_blip(env, 1)
    return ((blip > 0).astype(float) - a) * blip


def _case1_regret2(env, a):
    blip = _case1_blip(env, 2)
    return ((blip > 0).astype(float) - a) * blip


def _case1_oracle1(env):
    return (_case1_blip(env, 1) > 0).astype(np.int64)


def _case1_oracle2(env):
    return (_case1_blip(env, 2) > 0).astype(np.int64)


def _case1_centered(env):
    return 1.6 * (env["L1"] - 450.0)


def case1_oracle_regime() -> Regime:
    return Regime((
        LinearSignRule(FeatureMap(("1", "L1")), _CASE1_PSI[0]),
        LinearSignRule(FeatureMap(("1", "L2")), _CASE1_PSI[1]),
    ))


def case1_dgp() -> DgpSpec:
    """Two stages, scalar covariates, linear blips with confounded actions."""
    return DgpSpec(
        stage_names=(("L1",), ("L2",)),
        samplers=(_case1_sample_stage1, _case1_sample_stage2),
        propensities=(_case1_prop1, _case1_prop2),
        regrets=(_case1_regret1, _case1_regret2),
        oracle_rules=(_case1_oracle1, _case1_oracle2),
        mean_outcome=1120.0,
        noise_sd=60.0,
        centered_term=_case1_centered,
        oracle_regime=case1_oracle_regime(),
        name="case1",
    )


def _case2_sample_stage1(rng, env, n):
    return {
        "W": truncated_normal(rng, 45.0, 10.0, low=10.0, size=n),
        "L11": truncated_normal(rng, 20.0, 5.0, low=0.0, size=n),
        "L12": truncated_normal(rng, 10.0, 3.0, low=0.0, size=n),
    }


def _case2_sample_stage2(rng, env, n):
    return {
        "L21": truncated_normal(rng, 1.25 * env["L11"] - 2.0 * env["A1"], 5.0, low=0.0),
        "L22": truncated_normal(rng, env["L12"] - env["A1"], 3.0, low=0.0),
    }


def _case2_sample_stage3(rng, env, n):
    return {
        "L31": truncated_normal(
            rng, env["L21"] - 2.0 * (env["A1"] + env["A2"]), 5.0, low=0.0),
        "L32": truncated_normal(rng, env["L22"] - env["A2"], 3.0, low=0.0),
    }


def _case2_prop1(env):
    return expit(-3.0 + 0.1 * env["W"])


def _case2_prop2(env):
    return expit(-1.0 + 0.04 * (env["L21"] + env["L22"]))


def _case2_prop3(env):
    return expit(-2.0 + 0.1 * env["L31"])


def _case2_oracle1(env):
    return ((env["L11"] > 30.0) | (env["L12"] > 12.0)).astype(np.int64)


def _case2_oracle2(env):
    return ((env["L21"] > 25.0) | (env["L22"] > 10.0)).astype(np.int64)


def _case2_oracle3(env):
    return (env["L31"] + env["L32"] > 35.0).astype(np.int64)


def _case2_regret1(env, a):
    scale = 0.5 * (np.abs(env["L11"] - 30.0) + np.abs(env["L12"] - 12.0))
    return scale * (_case2_oracle1(env) - a) ** 2


def _case2_regret2(env, a):
    scale = np.abs(env["L21"] - 25.0) + np.abs(env["L22"] - 10.0)
    return scale * (_case2_oracle2(env) - a) ** 2


def _case2_regret3(env, a):
    return 2.0 * np.log(env["W"]) * (_case2_oracle3(env) - a) ** 2


def _or_rule_tree(first: str, first_cut: float, second: str,
                  second_cut: float) -> TreeRule:
    # Treat iff first > first_cut or second > second_cut.
    tree = TreeNode(
        feature=0,
        threshold=first_cut,
        left=TreeNode(
            feature=1,
            threshold=second_cut,
            left=TreeNode(contrast=-1.0),
            right=TreeNode(contrast=1.0),
        ),
        right=TreeNode(contrast=1.0),
    )
    return TreeRule(FeatureMap((first, second)), tree)


def case2_oracle_regime() -> Regime:
    return Regime((
        _or_rule_tree("L11", 30.0, "L12", 12.0),
        _or_rule_tree("L21", 25.0, "L22", 10.0),
        LinearSignRule(FeatureMap(("1", "L31", "L32")), (-35.0, 1.0, 1.0)),
    ))


def case2_dgp() -> DgpSpec:
    """Three stages, paired biomarkers, boolean rules then a linear rule."""
    return DgpSpec(
        stage_names=(("W", "L11", "L12"), ("L21", "L22"), ("L31", "L32")),
        samplers=(_case2_sample_stage1, _case2_sample_stage2,
                  _case2_sample_stage3),
        propensities=(_case2_prop1, _case2_prop2, _case2_prop3),
        regrets=(_case2_regret1, _case2_regret2, _case2_regret3),
        oracle_rules=(_case2_oracle1, _case2_oracle2, _case2_oracle3),
        mean_outcome=100.0,
        noise_sd=10.0,
        oracle_regime=case2_oracle_regime(),
        name="case2",
    )


def generate_case1(n: int, seed: int) -> Dataset:
    return generate_from_spec(case1_dgp(), n, seed, audit=False)


def generate_case2(n: int, seed: int) -> Dataset:
    return generate_from_spec(case2_dgp(), n, seed, audit=False)


# ---------------------------------------------------------------------------
# Evaluation


@dataclass(frozen=True)
class McValueReport:
    """Monte-Carlo estimate of a regime's mean outcome."""

    value: float
    draws: int
    standard_error: float
    regime_id: str

    def __post_init__(self) -> None:
        if self.draws < 1:
            raise ValueError("draws must be >= 1")


@dataclass(frozen=True)
class AccuracyReport:
    """Agreement between a fitted and an oracle regime on test histories.

    ``overall`` is the proportion of complete test trajectories whose
    fitted actions match the oracle at every stage.
    """

    per_stage: tuple[float, ...]
    overall: float
    n_test: int


def mc_value(regime: Regime, spec: DgpSpec, draws: int, seed: int) -> McValueReport:
    """Forward-simulate with actions forced to the regime's output."""
    if draws < 1:
        raise ValueError("draws must be >= 1")
    if regime.stage_count != spec.stage_count:
        raise ShapeError(
            f"regime has {regime.stage_count} rules, process has "
            f"{spec.stage_count} stages")
    rng = np.random.default_rng(seed)
    env: Env = {}
    actions: list[np.ndarray] = []
    for j in range(spec.stage_count):
        drawn = spec.samplers[j](rng, dict(env), draws)
        for name in spec.stage_names[j]:
            env[name] = np.broadcast_to(
                np.asarray(drawn[name], dtype=float), (draws,)).copy()
        a = regime.rules[j].actions(env, draws)
        env[f"A{j + 1}"] = a
        actions.append(a)
    y = _outcome(spec, rng, env, actions, draws)
    se = float(np.std(y, ddof=1) / math.sqrt(draws)) if draws > 1 else float("nan")
    return McValueReport(
        value=float(np.mean(y)),
        draws=draws,
        standard_error=se,
        regime_id=f"{spec.name}:{len(regime.rules)}-stage",
    )


def decision_accuracy(fitted: Regime, oracle: Regime, test: Dataset) -> AccuracyReport:
    """Per-stage and all-stage agreement proportions on observed test histories."""
    K = test.stage_count
    if fitted.stage_count != K or oracle.stage_count != K:
        raise ShapeError("fitted and oracle regimes must match the test "
                         "dataset's stage count")
    env = test.env()
    terminal = test.terminal_stages
    per_stage = []
    all_match = np.ones(test.n, dtype=bool)
    for j in range(1, K + 1):
        reached = terminal >= j
        env_j = {k: v[reached] for k, v in env.items()}
        m = int(np.sum(reached))
        match = (fitted.rules[j - 1].actions(env_j, m)
                 == oracle.rules[j - 1].actions(env_j, m))
        per_stage.append(float(np.mean(match)))
        sub = all_match[reached]
        sub &= match
        all_match[reached] = sub
    complete = terminal >= K
    overall = float(np.mean(all_match[complete])) if np.any(complete) else float("nan")
    return AccuracyReport(tuple(per_stage), overall, test.n)


@dataclass(frozen=True)
class BootstrapResult:
    standard_errors: np.ndarray
    estimates: np.ndarray
    failures: int
    replicates: int


def bootstrap_se(
    estimator: Callable[[Dataset], np.ndarray],
    data: Dataset,
    replicates: int,
    seed: int,
    align: Callable[[np.ndarray], np.ndarray] | None = None,
) -> BootstrapResult:
    """Nonparametric bootstrap standard errors of an estimator.

    Trajectories are resampled with replacement; the SE is the standard
    deviation of the replicate estimates.  ``align`` post-processes each
    replicate (used for sign alignment of normalised parameters).  More
    than 20% failed replicates raises :class:`NumericalError`.
    """
    if replicates < 2:
        raise ValueError("at least 2 bootstrap replicates are required")
    children = np.random.SeedSequence(seed).spawn(replicates)
    estimates = []
    failures = 0
    for child in children:
        rng = np.random.default_rng(child)
        idx = rng.integers(0, data.n, data.n)
        try:
            est = np.atleast_1d(np.asarray(estimator(data.subset(idx)),
                                           dtype=float))
        except (DtrlabError, np.linalg.LinAlgError):
            failures += 1
            continue
        if align is not None:
            est = np.atleast_1d(np.asarray(align(est), dtype=float))
        estimates.append(est)
    if failures > 0.2 * replicates:
        raise NumericalError(
            f"{failures} of {replicates} bootstrap replicates failed")
    stacked = np.vstack(estimates)
    return BootstrapResult(
        standard_errors=np.std(stacked, axis=0, ddof=1),
        estimates=stacked,
        failures=failures,
        replicates=replicates,
    )
