"""Direct policy search: inverse-probability-weighted value estimation over
regime classes, and backward outcome-weighted learning.

The value of a candidate regime is estimated from the trajectories whose
observed actions happen to follow it, reweighted by the inverse probability
of that compliance; an augmented variant adds a mean-zero term built from
fitted stage outcome regressions, trading bias protection for variance.
Backward outcome-weighted learning instead recasts each stage as a weighted
classification problem and fits the decision function by a hinge-loss
minimisation, restricting at stage ``j`` to trajectories consistent with
the already-fitted later rules.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    ConfigError,
    DataError,
    Dataset,
    DecisionFnRule,
    FeatureMap,
    LinearSignRule,
    Regime,
    ThresholdRule,
)
from ._hinge import kernel_cd, linear_cd
from .indirect import FitResult, PropensityModel
from .stats import OptimizerConfig, maximize

__all__ = [
    "RegimeClass",
    "ValueEstimate",
    "OwlSpec",
    "ipwe_value",
    "aipwe_value",
    "search_optimal_regime",
    "bowl_fit",
]


@dataclass(frozen=True)
class ValueEstimate:
    """Estimated mean outcome of a regime.

    ``n_consistent`` counts trajectories following the regime at every
    reached stage; ``augmentation`` is the mean contribution of the
    augmentation term (zero for the plain estimator).
    """

    value: float
    estimator: str
    n_consistent: int
    augmentation: float = 0.0
    warnings: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not math.isfinite(self.value):
            raise ValueError("value estimate must be finite")


class _ValueEvaluator:
    """Precomputed pieces for fast repeated value evaluation.

    Propensities (and, for the augmented estimator, the fitted stage
    regressions) do not depend on the candidate regime, so they are
    evaluated once; each candidate costs a few vector operations.
    """

    def __init__(self, data: Dataset, propensity: Sequence[PropensityModel],
                 q_fit: FitResult | None = None):
        K = data.stage_count
        if len(propensity) != K:
            raise ConfigError("one propensity model per stage is required")
        self.data = data
        self.env = data.env()
        self.n = data.n
        self.K = K
        self.y = self.env["Y"]
        self.reach = np.column_stack(
            [data.stage_rows(j) for j in range(1, K + 1)])
        self.actions = np.column_stack(
            [np.where(self.reach[:, j], self.env[f"A{j + 1}"], -1.0)
             for j in range(K)])
        self.pi = np.zeros((self.n, K))
        for j in range(K):
            rows = self.reach[:, j]
            env_j = {k: v[rows] for k, v in self.env.items()}
            self.pi[rows, j] = propensity[j].predict(env_j, int(np.sum(rows)))
        self.q_contrast = None
        self.q_tfree = None
        if q_fit is not None:
            self.q_contrast = np.zeros((self.n, K))
            self.q_tfree = np.zeros((self.n, K))
            for j in range(K):
                rows = self.reach[:, j]
                env_j = {k: v[rows] for k, v in self.env.items()}
                m = int(np.sum(rows))
                spec = q_fit.specs[j]
                self.q_contrast[rows, j] = (
                    spec.contrast.matrix(env_j, m) @ q_fit.psi[j])
                self.q_tfree[rows, j] = (
                    spec.treatment_free.matrix(env_j, m) @ q_fit.xi[j])

    def regime_actions(self, regime: Regime) -> np.ndarray:
        if regime.stage_count != self.K:
            raise ConfigError(
                f"regime has {regime.stage_count} rules for {self.K} stages")
        out = np.zeros((self.n, self.K), dtype=np.int64)
        for j in range(self.K):
            rows = self.reach[:, j]
            env_j = {k: v[rows] for k, v in self.env.items()}
            out[rows, j] = regime.rules[j].actions(env_j, int(np.sum(rows)))
        return out

    def _weights(self, d: np.ndarray):
        # lambda_j: probability of deviating from the regime at stage j;
        # zero past the terminal stage so cumulative products are unchanged.
        lam = np.where(d == 1, 1.0 - self.pi, self.pi)
        lam = np.where(self.reach, lam, 0.0)
        M = np.cumprod(1.0 - lam, axis=1)
        cons = self.reach & (self.actions == d)
        deviate = self.reach & ~cons
        has_dev = deviate.any(axis=1)
        first_dev = np.where(has_dev, np.argmax(deviate, axis=1), self.K)
        return lam, M, has_dev, first_dev

    def ipwe(self, d: np.ndarray) -> tuple[float, int]:
        lam, M, has_dev, _ = self._weights(d)
        consistent = ~has_dev
        value = float(np.mean(
            np.where(consistent, self.y / M[:, -1], 0.0)))
        return value, int(np.sum(consistent))

    def aipwe(self, d: np.ndarray) -> tuple[float, int, float]:
        if self.q_contrast is None:
            raise ConfigError("augmented estimation needs a fitted stage "
                              "outcome regression")
        lam, M, has_dev, first_dev = self._weights(d)
        consistent = ~has_dev
        base = np.where(consistent, self.y / M[:, -1], 0.0)
        aug = np.zeros(self.n)
        q_at_d = d * self.q_contrast + self.q_tfree
        for j in range(self.K):
            at_j = has_dev & (first_dev == j)
            past_j = (first_dev >= j) & self.reach[:, j]
            num = at_j.astype(float) - lam[:, j] * past_j.astype(float)
            aug += np.where(self.reach[:, j], num / M[:, j] * q_at_d[:, j], 0.0)
        return (float(np.mean(base + aug)), int(np.sum(consistent)),
                float(np.mean(aug)))


def ipwe_value(
    data: Dataset,
    regime: Regime,
    propensity: Sequence[PropensityModel],
) -> ValueEstimate:
    """Inverse-probability-weighted mean outcome of a regime.

    Only trajectories consistent with the regime at every reached stage
    contribute, weighted by the inverse of the fitted probability of staying
    consistent throughout.
    """
    ev = _ValueEvaluator(data, propensity)
    value, n_cons = ev.ipwe(ev.regime_actions(regime))
    warnings = ()
    if n_cons == 0:
        warnings = ("no trajectory is consistent with the regime; the "
                    "estimate is zero by convention",)
    return ValueEstimate(value, "IPWE", n_cons, 0.0, warnings)


def aipwe_value(
    data: Dataset,
    regime: Regime,
    propensity: Sequence[PropensityModel],
    q_fit: FitResult,
) -> ValueEstimate:
    """Augmented inverse-probability-weighted value, using the fitted stage
    outcome regressions (evaluated at the regime's actions) as the
    augmentation model."""
    ev = _ValueEvaluator(data, propensity, q_fit)
    value, n_cons, aug = ev.aipwe(ev.regime_actions(regime))
    warnings = ()
    if n_cons == 0:
        warnings = ("no trajectory is consistent with the regime",)
    return ValueEstimate(value, "AIPWE", n_cons, aug, warnings)


# ---------------------------------------------------------------------------
# Regime-class search


@dataclass(frozen=True)
class RegimeClass:
    """A parameterised family of candidate regimes.

    Families: per-stage ``threshold`` rules on a named covariate,
    ``normalized_linear`` sign rules with unit-norm coefficient vectors, or
    a finite ``enumeration`` of explicit regimes.
    """

    family: str
    columns: tuple[str, ...] | None = None
    directions: tuple[str, ...] | None = None
    features: tuple[FeatureMap, ...] | None = None
    regimes: tuple[Regime, ...] | None = None
    grid_points: int = 41

    def __post_init__(self) -> None:
        if self.family == "threshold":
            if not self.columns:
                raise ConfigError("threshold family needs one column per stage")
            if self.directions is None:
                object.__setattr__(
                    self, "directions", ("below",) * len(self.columns))
            elif len(self.directions) != len(self.columns):
                raise ConfigError("one direction per stage is required")
        elif self.family == "normalized_linear":
            if not self.features:
                raise ConfigError("normalized_linear family needs one feature "
                                  "map per stage")
        elif self.family == "enumeration":
            if not self.regimes:
                raise ConfigError("enumeration family needs a nonempty "
                                  "regime list")
        else:
            raise ConfigError(f"unknown regime family {self.family!r}")

    @classmethod
    def thresholds(cls, columns: Sequence[str],
                   directions: Sequence[str] | None = None,
                   grid_points: int = 41) -> "RegimeClass":
        return cls(family="threshold", columns=tuple(columns),
                   directions=None if directions is None else tuple(directions),
                   grid_points=grid_points)

    @classmethod
    def normalized_linear(cls, features: Sequence[FeatureMap]) -> "RegimeClass":
        return cls(family="normalized_linear", features=tuple(features))

    @classmethod
    def enumeration(cls, regimes: Sequence[Regime]) -> "RegimeClass":
        return cls(family="enumeration", regimes=tuple(regimes))

    @property
    def stage_count(self) -> int:
        if self.family == "threshold":
            return len(self.columns)
        if self.family == "normalized_linear":
            return len(self.features)
        return self.regimes[0].stage_count

    def parameter_dim(self) -> int:
        if self.family == "threshold":
            return len(self.columns)
        if self.family == "normalized_linear":
            return sum(f.dim for f in self.features)
        raise ConfigError("enumeration families are not parameterised")

    def build(self, theta: np.ndarray) -> Regime:
        theta = np.asarray(theta, dtype=float)
        if self.family == "threshold":
            return Regime(tuple(
                ThresholdRule(c, float(t), d)
                for c, t, d in zip(self.columns, theta, self.directions)))
        if self.family == "normalized_linear":
            rules = []
            k = 0
            for fmap in self.features:
                block = theta[k: k + fmap.dim]
                norm = float(np.linalg.norm(block))
                if norm > 0:
                    block = block / norm
                rules.append(LinearSignRule(fmap, tuple(block)))
                k += fmap.dim
            return Regime(tuple(rules))
        raise ConfigError("enumeration families are not parameterised")

    def default_config(self, data: Dataset, seed: int | None = None) -> OptimizerConfig:
        """Search strategy: a central marginal-quantile grid (1%..99%)
        polished by Nelder-Mead for thresholds; seeded multi-start
        Nelder-Mead on the sphere for normalised linear rules.

        The quantile grid doubles as the search box: boundary rules that
        treat (almost) nobody or everybody sit on wide flat plateaus of the
        objective and are excluded from the default class.
        """
        if self.family == "threshold":
            grid = []
            for c in self.columns:
                col = data.column(c)
                col = col[np.isfinite(col)]
                qs = np.quantile(col, np.linspace(0.01, 0.99, self.grid_points))
                grid.append(np.unique(qs))
            return OptimizerConfig(method="grid_then_nelder_mead", grid=grid,
                                   seed=seed)
        if self.family == "normalized_linear":
            dim = self.parameter_dim()
            rng = np.random.default_rng(seed)

            def block_unit() -> np.ndarray:
                # Every stage block nonzero, so each start is a valid
                # unit-norm member of the class.
                parts = []
                for fmap in self.features:
                    v = rng.standard_normal(fmap.dim)
                    parts.append(v / np.linalg.norm(v))
                return np.concatenate(parts)

            starts = [block_unit() for _ in range(4 * dim)]
            return OptimizerConfig(method="multi_start",
                                   starts=[s.tolist() for s in starts],
                                   seed=seed)
        raise ConfigError("enumeration families need no optimiser")


def search_optimal_regime(
    data: Dataset,
    regime_class: RegimeClass,
    estimator: str = "ipwe",
    propensity: Sequence[PropensityModel] | None = None,
    q_fit: FitResult | None = None,
    config: OptimizerConfig | None = None,
) -> tuple[Regime, ValueEstimate]:
    """Maximise the estimated value over a regime class.

    Returns the best regime found and its value estimate.  Normalised
    linear solutions are re-normalised to unit stage norms before return.
    """
    estimator = estimator.lower()
    if estimator not in ("ipwe", "aipwe"):
        raise ConfigError(f"unknown estimator {estimator!r}")
    if propensity is None:
        raise ConfigError("fitted propensity models are required")
    if estimator == "aipwe" and q_fit is None:
        raise ConfigError("the augmented estimator needs a fitted stage "
                          "outcome regression (q_fit)")
    ev = _ValueEvaluator(data, propensity, q_fit if estimator == "aipwe" else None)

    def estimate(d: np.ndarray) -> ValueEstimate:
        if estimator == "ipwe":
            value, n_cons = ev.ipwe(d)
            w = () if n_cons else ("no consistent trajectories",)
            return ValueEstimate(value, "IPWE", n_cons, 0.0, w)
        value, n_cons, aug = ev.aipwe(d)
        w = () if n_cons else ("no consistent trajectories",)
        return ValueEstimate(value, "AIPWE", n_cons, aug, w)

    if regime_class.family == "enumeration":
        best = None
        for regime in regime_class.regimes:
            est = estimate(ev.regime_actions(regime))
            if best is None or est.value > best[1].value:
                best = (regime, est)
        return best

    # Fast parameter-to-actions path: feature matrices are fixed, only the
    # rule parameters move during the search.
    K = ev.K
    if regime_class.family == "threshold":
        cols = [np.where(ev.reach[:, j],
                         ev.env[regime_class.columns[j]], np.nan)
                for j in range(K)]
        below = [d == "below" for d in regime_class.directions]

        def actions_for(theta: np.ndarray) -> np.ndarray:
            d = np.zeros((ev.n, K), dtype=np.int64)
            for j in range(K):
                with np.errstate(invalid="ignore"):
                    hit = (cols[j] < theta[j]) if below[j] else (cols[j] > theta[j])
                d[:, j] = np.where(ev.reach[:, j], hit, 0)
            return d
    else:
        mats = []
        offsets = []
        k = 0
        for j, fmap in enumerate(regime_class.features):
            rows = ev.reach[:, j]
            env_j = {key: v[rows] for key, v in ev.env.items()}
            X = np.zeros((ev.n, fmap.dim))
            X[rows] = fmap.matrix(env_j, int(np.sum(rows)))
            mats.append(X)
            offsets.append((k, k + fmap.dim))
            k += fmap.dim

        def actions_for(theta: np.ndarray) -> np.ndarray:
            d = np.zeros((ev.n, K), dtype=np.int64)
            for j in range(K):
                lo, hi = offsets[j]
                d[:, j] = np.where(ev.reach[:, j],
                                   mats[j] @ theta[lo:hi] > 0, 0)
            return d

    if config is None:
        config = regime_class.default_config(data)
    # The grid's bounding box is the declared search region; the polish
    # step is clamped to it so the returned rule stays inside the class.
    box = None
    if config.grid is not None:
        box = (np.array([float(np.min(ax)) for ax in config.grid]),
               np.array([float(np.max(ax)) for ax in config.grid]))

    def clamp(theta: np.ndarray) -> np.ndarray:
        if box is None:
            return theta
        return np.clip(theta, box[0], box[1])

    def objective(theta: np.ndarray) -> float:
        d = actions_for(clamp(theta))
        if estimator == "ipwe":
            return ev.ipwe(d)[0]
        return ev.aipwe(d)[0]

    theta, _, _ = maximize(objective, config)
    theta = clamp(np.asarray(theta, dtype=float))
    regime = regime_class.build(theta)
    return regime, estimate(actions_for(theta))


# ---------------------------------------------------------------------------
# Backward outcome-weighted learning


@dataclass(frozen=True)
class OwlSpec:
    """Settings for backward outcome-weighted learning.

    ``c_grid`` holds regularisation levels; the stage penalty is ``c/n`` for
    the ``n`` rows entering that stage's problem.  ``gamma=None`` selects the
    RBF width by the median pairwise-distance heuristic.  Outcomes are
    shifted by the stage subset's minimum so the classification weights are
    nonnegative, and weights are normalised to unit mean so the fitted rule
    is invariant to rescaling the outcome.
    """

    kernel: str = "linear"
    gamma: float | None = None
    c_grid: tuple[float, ...] = (0.25, 0.5, 1.0, 2.0, 4.0)
    cv_folds: int = 4
    features: tuple[FeatureMap, ...] | None = None
    seed: int = 0
    tol: float = 1e-4
    max_epochs: int = 2000

    def __post_init__(self) -> None:
        if self.kernel not in ("linear", "rbf"):
            raise ConfigError(f"unknown kernel {self.kernel!r}")
        if not self.c_grid:
            raise ConfigError("the regularisation grid must be nonempty")
        if self.cv_folds < 2:
            raise ConfigError("at least 2 cross-validation folds are required")


def _median_heuristic_gamma(Z: np.ndarray, rng: np.random.Generator) -> float:
    m = Z.shape[0]
    if m > 2000:
        Z = Z[rng.choice(m, 2000, replace=False)]
    sq = (np.sum(Z ** 2, axis=1)[:, None] + np.sum(Z ** 2, axis=1)[None, :]
          - 2.0 * Z @ Z.T)
    d = np.sqrt(np.maximum(sq[np.triu_indices(Z.shape[0], k=1)], 0.0))
    med = float(np.median(d[d > 0])) if np.any(d > 0) else 1.0
    return 1.0 / (2.0 * med ** 2)


class _HingeProblem:
    """One stage's weighted classification problem in standardised features."""

    def __init__(self, Z, labels, weights, spec: OwlSpec, gamma: float | None):
        self.Z = Z
        self.labels = labels
        self.weights = weights
        self.spec = spec
        self.gamma = gamma
        if spec.kernel == "linear":
            self.Xb = np.hstack([Z, np.ones((Z.shape[0], 1))])
        else:
            self.Kfull = self._kernel(Z, Z) + 1.0

    def _kernel(self, A, B):
        sq = (np.sum(A ** 2, axis=1)[:, None] + np.sum(B ** 2, axis=1)[None, :]
              - 2.0 * A @ B.T)
        return np.exp(-self.gamma * np.maximum(sq, 0.0))

    def solve(self, idx: np.ndarray, c: float):
        y = self.labels[idx]
        ub = self.weights[idx] / (2.0 * c)
        if self.spec.kernel == "linear":
            X = self.Xb[idx]
            w, alpha, gap, gap0, epochs = linear_cd(
                X, y, ub, self.spec.tol, self.spec.max_epochs)
            # Guard: never return a solution worse than the zero function.
            margins = 1.0 - y * (X @ w)
            if (0.5 * w @ w + ub @ np.maximum(margins, 0.0)) > float(np.sum(ub)):
                w = np.zeros_like(w)
                alpha = np.zeros_like(alpha)
            return ("linear", w, idx, alpha, gap, gap0, epochs)
        Ksub = self.Kfull[np.ix_(idx, idx)]
        alpha, f, gap, gap0, epochs = kernel_cd(
            Ksub, y, ub, self.spec.tol, self.spec.max_epochs)
        norm_sq = float(np.sum(alpha * y * f))
        primal = 0.5 * norm_sq + float(ub @ np.maximum(1.0 - y * f, 0.0))
        if primal > float(np.sum(ub)):
            alpha = np.zeros_like(alpha)
        return ("rbf", alpha, idx, alpha, gap, gap0, epochs)

    def decide(self, model, Z_new: np.ndarray) -> np.ndarray:
        kind, param, idx = model[0], model[1], model[2]
        if kind == "linear":
            return np.hstack([Z_new, np.ones((Z_new.shape[0], 1))]) @ param
        coef = param * self.labels[idx]
        return self._kernel(Z_new, self.Z[idx]) @ coef + float(np.sum(coef))


def bowl_fit(
    data: Dataset,
    spec: OwlSpec,
    propensity: Sequence[PropensityModel],
) -> FitResult:
    """Backward outcome-weighted learning over all stages.

    At stage ``j`` only trajectories consistent with the already-fitted
    later rules enter; each carries weight (shifted outcome) divided by the
    product of fitted probabilities of its observed actions from ``j`` on.
    The regularisation level is chosen per stage by cross-validated weighted
    value.
    """
    K = data.stage_count
    if len(propensity) != K:
        raise ConfigError("one propensity model per stage is required")
    features = spec.features
    if features is None:
        features = tuple(FeatureMap(names) for names in data.stage_names)
    elif len(features) != K:
        raise ConfigError("one feature map per stage is required")
    env = data.env()
    n = data.n
    y = env["Y"]
    reach = np.column_stack([data.stage_rows(j) for j in range(1, K + 1)])
    # P(observed action | history) per stage, 1 past the terminal stage.
    p_obs = np.ones((n, K))
    for j in range(K):
        rows = reach[:, j]
        env_j = {k: v[rows] for k, v in env.items()}
        pi = propensity[j].predict(env_j, int(np.sum(rows)))
        a = env_j[f"A{j + 1}"]
        p_obs[rows, j] = np.where(a == 1, pi, 1.0 - pi)
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    cons_later = np.ones(n, dtype=bool)
    rules: list[DecisionFnRule | None] = [None] * K
    diagnostics: dict = {"kernel": spec.kernel, "stages": []}
    warnings: list[str] = []
    for j in range(K, 0, -1):
        rows = np.nonzero(reach[:, j - 1] & cons_later)[0]
        if rows.size == 0:
            raise DataError(
                f"stage {j}: no trajectories are consistent with the fitted "
                "later rules; a larger sample is required")
        fmap = features[j - 1]
        env_j = {k: v[rows] for k, v in env.items()}
        X = fmap.matrix(env_j, rows.size)
        center = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale == 0] = 1.0
        Z = (X - center) / scale
        a = env[f"A{j}"][rows]
        labels = 2.0 * a - 1.0
        shifted = y[rows] - float(np.min(y[rows]))
        denom = np.prod(p_obs[rows, j - 1:], axis=1)
        w = shifted / denom
        mean_w = float(np.mean(w))
        stage_diag = {"stage": j, "n": int(rows.size),
                      "weight_mean_raw": mean_w}
        if len(np.unique(labels)) < 2 or mean_w <= 0:
            # Nothing to separate: emit the constant rule matching the data.
            const = 1.0 if np.all(labels > 0) else -1.0
            rules[j - 1] = DecisionFnRule(
                features=fmap, kernel="linear",
                center=tuple(center), scale=tuple(scale),
                intercept=const, weights=(0.0,) * fmap.dim)
            warnings.append(
                f"stage {j}: degenerate problem, constant rule emitted")
            stage_diag["constant_rule"] = True
            diagnostics["stages"].append(stage_diag)
            d_j = rules[j - 1].actions(env_j, rows.size)
            cons_later[rows] &= (a == d_j)
            continue
        w = w / mean_w
        gamma = None
        if spec.kernel == "rbf":
            gamma = spec.gamma or _median_heuristic_gamma(Z, rng)
            stage_diag["gamma"] = gamma
        problem = _HingeProblem(Z, labels, w, spec, gamma)
        n_j = rows.size
        perm = rng.permutation(n_j)
        folds = np.array_split(perm, spec.cv_folds)
        scores = []
        for c in spec.c_grid:
            score = 0.0
            for fold in folds:
                train = np.setdiff1d(perm, fold, assume_unique=False)
                if train.size == 0 or len(np.unique(labels[train])) < 2:
                    continue
                model = problem.solve(train, c)
                phi = problem.decide(model, Z[fold])
                score += float(np.sum(w[fold] * (labels[fold] * phi > 0)))
            scores.append(score)
        best_c = spec.c_grid[int(np.argmax(scores))]
        model = problem.solve(np.arange(n_j), best_c)
        stage_diag.update({"selected_c": best_c, "cv_scores": scores,
                           "duality_gap": model[4], "epochs": model[6]})
        if spec.kernel == "linear":
            wb = model[1]
            rules[j - 1] = DecisionFnRule(
                features=fmap, kernel="linear",
                center=tuple(center), scale=tuple(scale),
                intercept=float(wb[-1]), weights=tuple(wb[:-1]))
        else:
            alpha = model[1]
            support = np.nonzero(alpha > 0)[0]
            coef = alpha[support] * labels[support]
            rules[j - 1] = DecisionFnRule(
                features=fmap, kernel="rbf", gamma=gamma,
                center=tuple(center), scale=tuple(scale),
                intercept=float(np.sum(coef)),
                support_points=tuple(tuple(p) for p in Z[support]),
                dual_coef=tuple(coef))
        diagnostics["stages"].append(stage_diag)
        d_j = rules[j - 1].actions(env_j, rows.size)
        cons_later[rows] &= (a == d_j)
    diagnostics["stages"].reverse()
    if warnings:
        diagnostics["warnings"] = tuple(warnings)
    return FitResult(
        variant="bowl",
        regime=Regime(tuple(rules)),
        psi=(None,) * K,
        xi=(None,) * K,
        alpha=tuple(np.asarray(p.coefficients) for p in propensity),
        values=None,
        value_means=(),
        diagnostics=diagnostics,
    )
