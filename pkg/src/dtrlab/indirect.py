"""Backward-induction estimators: Q-learning and A-learning variants.

Both proceed from the last stage to the first.  Q-learning fits the full
outcome regression ``A_j C_j(H_j) + m_j(H_j)`` by least squares and carries
``I{C_j>0} C_j + m_j`` backwards as the next response.  A-learning models
only the contrast ``C_j`` and estimates it from conditional-covariance
estimating equations (or propensity-adjusted regressions), carrying
``V_{j+1} + (I{C_j>0} - A_j) C_j`` backwards, which is monotone in the
stage index by construction.

A-learning variants differ in the nuisance handling:

* ``a1``: estimating equation with the treatment-free mean set to zero;
* ``a2``: least squares on ``[A r, pihat r]`` plus an intercept;
* ``a3``: joint estimating-equation solve with a linear treatment-free
  working model (doubly robust);
* ``a4``: least squares on ``[A r, pihat r, D]`` (doubly robust);
* ``dwols``: least squares on ``[A r, D]`` weighted by ``|A - pihat|``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import (
    ConfigError,
    Dataset,
    FeatureMap,
    LinearSignRule,
    Regime,
)
from . import stats
from .stats import (
    PROPENSITY_CLIP,
    clip_probabilities,
    logistic_fit,
    ols_fit,
    solve_joint_linear_ee,
)

__all__ = [
    "StageModelSpec",
    "FitResult",
    "PropensityModel",
    "stage_spec",
    "fit_propensity_models",
    "q_learning_fit",
    "a_learning_fit",
    "blip_regret_convert",
    "regret_to_blip",
    "q_function_values",
]

A_VARIANTS = ("a1", "a2", "a3", "a4", "dwols")


@dataclass(frozen=True)
class StageModelSpec:
    """Design specification for one decision stage.

    ``contrast`` spans the treatment-effect features ``r_j``,
    ``treatment_free`` the features ``D_j`` of the no-treatment mean, and
    ``propensity`` the features of the treatment-probability model.
    """

    contrast: FeatureMap
    treatment_free: FeatureMap | None = None
    propensity: FeatureMap | None = None
    variant: str = "q"

    def __post_init__(self) -> None:
        object.__setattr__(self, "variant", str(self.variant).lower())
        if self.variant not in ("q",) + A_VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")


def stage_spec(
    contrast: str,
    treatment_free: str | None = None,
    propensity: str | None = None,
    variant: str = "q",
) -> StageModelSpec:
    """Build a stage specification from comma-separated formula strings."""
    return StageModelSpec(
        contrast=FeatureMap.parse(contrast),
        treatment_free=None if treatment_free is None else FeatureMap.parse(treatment_free),
        propensity=None if propensity is None else FeatureMap.parse(propensity),
        variant=variant,
    )


@dataclass(frozen=True)
class PropensityModel:
    """Fitted stage treatment-probability model with clipped predictions."""

    features: FeatureMap
    coefficients: np.ndarray
    clip: float = PROPENSITY_CLIP

    def predict(self, env: Mapping[str, object], n: int) -> np.ndarray:
        from scipy.special import expit

        p = expit(self.features.matrix(env, n) @ self.coefficients)
        return np.clip(p, self.clip, 1.0 - self.clip)


def fit_propensity_models(
    data: Dataset, feature_maps: Sequence[FeatureMap]
) -> list[PropensityModel]:
    """Fit one logistic treatment model per stage on the rows reaching it."""
    if len(feature_maps) != data.stage_count:
        raise ConfigError("one propensity feature map per stage is required")
    env = data.env()
    models = []
    for j, fmap in enumerate(feature_maps, start=1):
        rows = data.stage_rows(j)
        env_j = {k: v[rows] for k, v in env.items()}
        m = int(np.sum(rows))
        X = fmap.matrix(env_j, m)
        fit = _stage_call(j, logistic_fit, X, env_j[f"A{j}"],
                          column_names=fmap.terms)
        models.append(PropensityModel(fmap, fit.coefficients))
    return models


@dataclass(frozen=True)
class FitResult:
    """A fitted regime plus per-stage estimates and value columns.

    ``values[:, j-1]`` holds the stage-``j`` value column for every
    trajectory; trajectories that stopped before stage ``j`` carry their
    realised outcome there.  ``values`` is None for estimators without a
    value-column construction.
    """

    variant: str
    regime: Regime
    psi: tuple[np.ndarray | None, ...]
    xi: tuple[np.ndarray | None, ...]
    alpha: tuple[np.ndarray | None, ...]
    values: np.ndarray | None
    value_means: tuple[float, ...]
    diagnostics: dict = field(default_factory=dict)
    specs: tuple[StageModelSpec, ...] | None = None
    trees: tuple | None = None


def _stage_call(j: int, fn, *args, **kwargs):
    """Run a numeric fit, tagging raised errors with the stage index."""
    try:
        return fn(*args, **kwargs)
    except stats.SingularDesignError as e:
        err = stats.SingularDesignError(f"stage {j}: {e}", e.columns)
        err.stage = j
        raise err from e
    except stats.NumericalError as e:
        err = type(e)(f"stage {j}: {e}")
        err.stage = j
        raise err from e


def _check_specs(data: Dataset, specs: Sequence[StageModelSpec],
                 allowed: tuple[str, ...]) -> str:
    if len(specs) != data.stage_count:
        raise ConfigError(
            f"{len(specs)} stage specifications for {data.stage_count} stages")
    variants = {s.variant for s in specs}
    if len(variants) != 1:
        raise ConfigError("all stage specifications must share one variant")
    variant = variants.pop()
    if variant not in allowed:
        raise ConfigError(f"variant {variant!r} not supported here")
    return variant


def q_learning_fit(data: Dataset, specs: Sequence[StageModelSpec]) -> FitResult:
    """Backward least-squares fit of the full stage outcome regressions."""
    _check_specs(data, specs, ("q",))
    env = data.env()
    n, K = data.n, data.stage_count
    v = env["Y"].copy()
    values = np.empty((n, K))
    psi: list[np.ndarray | None] = [None] * K
    xi: list[np.ndarray | None] = [None] * K
    rules: list[LinearSignRule | None] = [None] * K
    conds = []
    for j in range(K, 0, -1):
        spec = specs[j - 1]
        if spec.treatment_free is None:
            raise ConfigError(f"stage {j}: Q-learning needs a treatment-free "
                              "feature map")
        rows = data.stage_rows(j)
        env_j = {k: c[rows] for k, c in env.items()}
        m = int(np.sum(rows))
        R = spec.contrast.matrix(env_j, m)
        D = spec.treatment_free.matrix(env_j, m)
        a = env_j[f"A{j}"]
        X = np.hstack([R * a[:, None], D])
        names = tuple(f"A:{t}" for t in spec.contrast.terms) + spec.treatment_free.terms
        fit = _stage_call(j, ols_fit, X, v[rows], column_names=names)
        p_r = spec.contrast.dim
        psi[j - 1] = fit.coefficients[:p_r]
        xi[j - 1] = fit.coefficients[p_r:]
        conds.append(fit.condition_number)
        contrast = R @ psi[j - 1]
        v = v.copy()
        v[rows] = np.where(contrast > 0, contrast, 0.0) + D @ xi[j - 1]
        values[:, j - 1] = v
        rules[j - 1] = LinearSignRule(spec.contrast, tuple(psi[j - 1]))
    return FitResult(
        variant="q",
        regime=Regime(tuple(rules)),
        psi=tuple(psi),
        xi=tuple(xi),
        alpha=(None,) * K,
        values=values,
        value_means=tuple(float(np.mean(values[:, j])) for j in range(K)),
        diagnostics={"condition_numbers": tuple(reversed(conds))},
        specs=tuple(specs),
    )


def a_learning_fit(data: Dataset, specs: Sequence[StageModelSpec]) -> FitResult:
    """Backward contrast estimation with propensity-based nuisance handling."""
    variant = _check_specs(data, specs, A_VARIANTS)
    env = data.env()
    n, K = data.n, data.stage_count
    v = env["Y"].copy()
    values = np.empty((n, K))
    psi: list[np.ndarray | None] = [None] * K
    xi: list[np.ndarray | None] = [None] * K
    alpha: list[np.ndarray | None] = [None] * K
    rules: list[LinearSignRule | None] = [None] * K
    clip_counts = []
    ee_residuals = []
    for j in range(K, 0, -1):
        spec = specs[j - 1]
        if spec.propensity is None:
            raise ConfigError(f"stage {j}: A-learning needs a propensity "
                              "feature map")
        if variant in ("a3", "a4", "dwols") and spec.treatment_free is None:
            raise ConfigError(f"stage {j}: variant {variant!r} needs a "
                              "treatment-free feature map")
        rows = data.stage_rows(j)
        env_j = {k: c[rows] for k, c in env.items()}
        m = int(np.sum(rows))
        a = env_j[f"A{j}"]
        P = spec.propensity.matrix(env_j, m)
        prop_fit = _stage_call(j, logistic_fit, P, a,
                               column_names=spec.propensity.terms)
        alpha[j - 1] = prop_fit.coefficients
        pi, clipped = clip_probabilities(prop_fit.predict(P))
        clip_counts.append(clipped)
        R = spec.contrast.matrix(env_j, m)
        D = (None if spec.treatment_free is None
             else spec.treatment_free.matrix(env_j, m))
        if variant == "a1":
            ee = _stage_call(j, solve_joint_linear_ee, R, a, None, pi, v[rows],
                             column_names=spec.contrast.terms)
            psi[j - 1], xi[j - 1] = ee.psi, None
            ee_residuals.append(ee.relative_residual)
        elif variant == "a3":
            ee = _stage_call(j, solve_joint_linear_ee, R, a, D, pi, v[rows],
                             column_names=spec.contrast.terms,
                             tfree_names=spec.treatment_free.terms)
            psi[j - 1], xi[j - 1] = ee.psi, ee.xi
            ee_residuals.append(ee.relative_residual)
        elif variant in ("a2", "a4"):
            blocks = [R * a[:, None], R * pi[:, None]]
            names = [f"A:{t}" for t in spec.contrast.terms]
            names += [f"pi:{t}" for t in spec.contrast.terms]
            if variant == "a2":
                # An intercept absorbs response level shifts, keeping the
                # contrast block shift-invariant.
                blocks.append(np.ones((m, 1)))
                names.append("1")
            else:
                blocks.append(D)
                names += list(spec.treatment_free.terms)
            fit = _stage_call(j, ols_fit, np.hstack(blocks), v[rows],
                              column_names=names)
            psi[j - 1] = fit.coefficients[: spec.contrast.dim]
            if variant == "a4":
                xi[j - 1] = fit.coefficients[2 * spec.contrast.dim:]
        else:  # dwols
            X = np.hstack([R * a[:, None], D])
            names = [f"A:{t}" for t in spec.contrast.terms]
            names += list(spec.treatment_free.terms)
            fit = _stage_call(j, ols_fit, X, v[rows],
                              weights=np.abs(a - pi), column_names=names)
            psi[j - 1] = fit.coefficients[: spec.contrast.dim]
            xi[j - 1] = fit.coefficients[spec.contrast.dim:]
        contrast = R @ psi[j - 1]
        v = v.copy()
        v[rows] = v[rows] + ((contrast > 0).astype(float) - a) * contrast
        values[:, j - 1] = v
        rules[j - 1] = LinearSignRule(spec.contrast, tuple(psi[j - 1]))
    diagnostics = {
        "propensity_clipped": tuple(reversed(clip_counts)),
        "propensity_clip": PROPENSITY_CLIP,
    }
    if ee_residuals:
        diagnostics["ee_relative_residuals"] = tuple(reversed(ee_residuals))
    return FitResult(
        variant=variant,
        regime=Regime(tuple(rules)),
        psi=tuple(psi),
        xi=tuple(xi),
        alpha=tuple(alpha),
        values=values,
        value_means=tuple(float(np.mean(values[:, j])) for j in range(K)),
        diagnostics=diagnostics,
        specs=tuple(specs),
    )


def blip_regret_convert(blip: np.ndarray) -> np.ndarray:
    """Regrets from blip values laid out over actions on the last axis.

    ``mu(h, a) = max_a' blip(h, a') - blip(h, a)``.
    """
    blip = np.asarray(blip, dtype=float)
    if not np.all(np.isfinite(blip)):
        raise ValueError("blip values must be finite")
    return np.max(blip, axis=-1, keepdims=True) - blip


def regret_to_blip(regret: np.ndarray) -> np.ndarray:
    """Inverse of :func:`blip_regret_convert` for reference-anchored blips:
    ``blip(h, a) = mu(h, 0) - mu(h, a)``."""
    regret = np.asarray(regret, dtype=float)
    return regret[..., [0]] - regret


def q_function_values(
    fit: FitResult,
    env: Mapping[str, object],
    n: int,
    stage: int,
    actions: np.ndarray,
) -> np.ndarray:
    """Evaluate a fitted stage outcome regression at the given actions."""
    if fit.specs is None or fit.xi[stage - 1] is None:
        raise ConfigError("fit does not carry a full outcome regression for "
                          f"stage {stage}")
    spec = fit.specs[stage - 1]
    R = spec.contrast.matrix(env, n)
    D = spec.treatment_free.matrix(env, n)
    a = np.asarray(actions, dtype=float)
    return a * (R @ fit.psi[stage - 1]) + D @ fit.xi[stage - 1]
