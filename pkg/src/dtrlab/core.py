"""Domain model for longitudinal sequential-treatment data and decision regimes.

A study record is an ordered sequence ``(L_1, A_1, ..., L_K, A_K, Y)`` of
per-stage covariate vectors ``L_j``, binary treatment actions ``A_j`` and a
final real outcome ``Y``.  A regime is a sequence of per-stage decision
rules, each mapping the accumulated history to an action in ``{0, 1}``.

All types in this module are immutable after construction and safe to share
across concurrent workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence, Union

import numpy as np

__all__ = [
    "DtrlabError",
    "ShapeError",
    "DataError",
    "ConfigError",
    "FeatureMap",
    "Trajectory",
    "Dataset",
    "History",
    "TreeNode",
    "LinearSignRule",
    "ThresholdRule",
    "TreeRule",
    "DecisionFnRule",
    "Rule",
    "Regime",
    "CONSISTENT",
    "default_stage_names",
    "history",
    "apply_regime",
    "consistency_index",
    "rule_to_dict",
    "rule_from_dict",
]


class DtrlabError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(DtrlabError, ValueError):
    """Dimension mismatch between a rule, feature map or data object."""


class DataError(DtrlabError, ValueError):
    """Invalid or inconsistent input data."""


class ConfigError(DtrlabError, ValueError):
    """Invalid configuration or incompatible arguments."""


# Returned by :func:`consistency_index` when a trajectory follows the regime
# at every stage it reached.
CONSISTENT: float = math.inf

#: Either a stage number in ``{1, ..., K}`` or :data:`CONSISTENT`.
ConsistencyIndex = float

_RESERVED_PREFIX = "A"


def _is_action_name(name: str) -> bool:
    return len(name) > 1 and name[0] == _RESERVED_PREFIX and name[1:].isdigit()


@dataclass(frozen=True)
class FeatureMap:
    """Named feature expansion of a history.

    Each term is ``"1"`` (intercept), a column name, or a product of column
    names joined by ``":"`` (e.g. ``"L1:A1"``).  Column names refer to
    covariate labels and to action columns ``"A1", "A2", ...``.
    """

    terms: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.terms:
            raise ShapeError("feature map needs at least one term")
        object.__setattr__(self, "terms", tuple(str(t) for t in self.terms))

    @classmethod
    def parse(cls, spec: str | Sequence[str]) -> "FeatureMap":
        """Parse a comma-separated term list, adding an implicit intercept.

        An intercept is prepended unless already present or explicitly
        suppressed by a leading ``"0"`` or ``"-1"`` term.
        """
        if isinstance(spec, str):
            parts = [p.strip() for p in spec.split(",") if p.strip()]
        else:
            parts = [str(p).strip() for p in spec]
        if not parts:
            raise ConfigError("empty feature specification")
        if parts[0] in ("0", "-1"):
            parts = parts[1:]
            if not parts:
                raise ConfigError("feature specification suppresses the "
                                  "intercept but lists no columns")
        elif "1" not in parts:
            parts = ["1"] + parts
        return cls(tuple(parts))

    @property
    def dim(self) -> int:
        return len(self.terms)

    def label(self) -> str:
        return ",".join(self.terms)

    def column_names(self) -> set[str]:
        names: set[str] = set()
        for term in self.terms:
            if term == "1":
                continue
            names.update(term.split(":"))
        return names

    def matrix(self, env: Mapping[str, object], n: int) -> np.ndarray:
        """Evaluate the map on columnar data, returning an ``(n, dim)`` array.

        ``env`` maps column names to scalars or length-``n`` arrays.
        """
        cols = np.empty((n, len(self.terms)))
        for k, term in enumerate(self.terms):
            if term == "1":
                cols[:, k] = 1.0
                continue
            value = np.ones(n)
            for part in term.split(":"):
                try:
                    raw = env[part]
                except KeyError:
                    raise DataError(f"unknown column {part!r} in feature "
                                    f"map {self.label()!r}") from None
                value = value * np.broadcast_to(np.asarray(raw, dtype=float), (n,))
            cols[:, k] = value
        return cols

    def __call__(self, values: Mapping[str, float]) -> np.ndarray:
        """Evaluate the map on a single history, returning a vector."""
        return self.matrix(values, 1)[0]


@dataclass(frozen=True)
class Trajectory:
    """One individual's record: per-stage covariates and actions, then the outcome.

    ``covariates[j]`` is the stage ``j+1`` covariate vector and ``actions[j]``
    the binary action taken at that stage.  Individuals may stop early, in
    which case the record is a prefix of the dataset-wide stage layout; the
    last recorded stage is the terminal stage.
    """

    covariates: tuple[tuple[float, ...], ...]
    actions: tuple[int, ...]
    outcome: float

    def __post_init__(self) -> None:
        covs = tuple(tuple(float(v) for v in stage) for stage in self.covariates)
        acts = tuple(int(a) for a in self.actions)
        object.__setattr__(self, "covariates", covs)
        object.__setattr__(self, "actions", acts)
        object.__setattr__(self, "outcome", float(self.outcome))
        if len(covs) < 1:
            raise DataError("a trajectory needs at least one stage")
        if len(acts) != len(covs):
            raise DataError("one action per recorded stage is required")
        for a in acts:
            if a not in (0, 1):
                raise DataError(f"actions must be binary 0/1, got {a}")
        for stage in covs:
            for v in stage:
                if not math.isfinite(v):
                    raise DataError("covariates must be finite")
        if not math.isfinite(self.outcome):
            raise DataError("outcome must be finite")

    @property
    def n_stages(self) -> int:
        return len(self.covariates)

    @property
    def terminal_stage(self) -> int:
        return len(self.covariates)


def default_stage_names(stage_dims: Sequence[int]) -> tuple[tuple[str, ...], ...]:
    """Generic covariate labels: ``L1``, or ``L1_1, L1_2, ...`` for vectors."""
    names = []
    for j, dim in enumerate(stage_dims, start=1):
        if dim == 1:
            names.append((f"L{j}",))
        else:
            names.append(tuple(f"L{j}_{k}" for k in range(1, dim + 1)))
    return tuple(names)


@dataclass(frozen=True)
class Dataset:
    """A collection of i.i.d. trajectories sharing a stage layout.

    Early-terminated trajectories must be prefixes of the common layout.
    Columnar float arrays (NaN past the terminal stage) are cached at
    construction for vectorised model fitting.
    """

    trajectories: tuple[Trajectory, ...]
    stage_names: tuple[tuple[str, ...], ...]
    _env: dict = field(init=False, repr=False, compare=False)
    _terminal: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        trajs = tuple(self.trajectories)
        names = tuple(tuple(s) for s in self.stage_names)
        object.__setattr__(self, "trajectories", trajs)
        object.__setattr__(self, "stage_names", names)
        if not trajs:
            raise DataError("dataset needs at least one trajectory")
        if not names:
            raise DataError("dataset needs at least one stage")
        flat = [c for stage in names for c in stage]
        if len(set(flat)) != len(flat):
            raise DataError("covariate labels must be unique across stages")
        for c in flat:
            if c == "Y" or _is_action_name(c):
                raise DataError(f"covariate label {c!r} collides with a "
                                "reserved column name")
        K = len(names)
        dims = tuple(len(s) for s in names)
        n = len(trajs)
        terminal = np.empty(n, dtype=np.intp)
        cols = {c: np.full(n, np.nan) for c in flat}
        actions = {j: np.full(n, np.nan) for j in range(1, K + 1)}
        y = np.empty(n)
        for i, t in enumerate(trajs):
            if t.n_stages > K:
                raise DataError(f"trajectory {i} has {t.n_stages} stages, "
                                f"dataset defines {K}")
            terminal[i] = t.n_stages
            y[i] = t.outcome
            for j in range(t.n_stages):
                if len(t.covariates[j]) != dims[j]:
                    raise DataError(
                        f"trajectory {i} stage {j + 1}: expected "
                        f"{dims[j]} covariates, got {len(t.covariates[j])}")
                for c, v in zip(names[j], t.covariates[j]):
                    cols[c][i] = v
                actions[j + 1][i] = t.actions[j]
        env = dict(cols)
        for j in range(1, K + 1):
            env[f"A{j}"] = actions[j]
        env["Y"] = y
        object.__setattr__(self, "_env", env)
        object.__setattr__(self, "_terminal", terminal)

    @classmethod
    def from_arrays(
        cls,
        stage_names: Sequence[Sequence[str]],
        covariates: Sequence[np.ndarray],
        actions: np.ndarray,
        outcome: np.ndarray,
        terminal: np.ndarray | None = None,
    ) -> "Dataset":
        """Build a dataset from columnar arrays.

        ``covariates[j]`` has shape ``(n, d_j)``, ``actions`` shape ``(n, K)``
        and ``outcome`` shape ``(n,)``.  ``terminal`` gives the last recorded
        stage per trajectory (defaults to ``K`` everywhere).
        """
        K = len(stage_names)
        outcome = np.asarray(outcome, dtype=float)
        n = outcome.shape[0]
        actions = np.asarray(actions)
        if actions.shape != (n, K):
            raise ShapeError(f"actions must have shape ({n}, {K})")
        if terminal is None:
            terminal = np.full(n, K, dtype=int)
        covs = [np.atleast_2d(np.asarray(c, dtype=float)) for c in covariates]
        trajs = []
        for i in range(n):
            T = int(terminal[i])
            stage_covs = tuple(tuple(covs[j][i]) for j in range(T))
            stage_acts = tuple(int(actions[i, j]) for j in range(T))
            trajs.append(Trajectory(stage_covs, stage_acts, float(outcome[i])))
        return cls(tuple(trajs), tuple(tuple(s) for s in stage_names))

    @property
    def n(self) -> int:
        return len(self.trajectories)

    @property
    def stage_count(self) -> int:
        return len(self.stage_names)

    @property
    def stage_dims(self) -> tuple[int, ...]:
        return tuple(len(s) for s in self.stage_names)

    @property
    def terminal_stages(self) -> np.ndarray:
        return self._terminal

    def env(self) -> dict[str, np.ndarray]:
        """Columnar view of the data; treat the arrays as read-only."""
        return dict(self._env)

    def column(self, name: str) -> np.ndarray:
        try:
            return self._env[name]
        except KeyError:
            raise DataError(f"unknown column {name!r}") from None

    def stage_rows(self, j: int) -> np.ndarray:
        """Boolean mask of trajectories that reached stage ``j`` (1-based)."""
        if not 1 <= j <= self.stage_count:
            raise IndexError(f"stage {j} out of range 1..{self.stage_count}")
        return self._terminal >= j

    def history(self, i: int, j: int) -> "History":
        return history(self.trajectories[i], j, self.stage_names)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        trajs = tuple(self.trajectories[int(i)] for i in indices)
        return Dataset(trajs, self.stage_names)


@dataclass(frozen=True)
class History:
    """The information available just before the stage-``j`` decision.

    Holds the covariate vectors ``L_1, ..., L_j`` and the prior actions
    ``A_1, ..., A_{j-1}`` together with the covariate labels.
    """

    stage: int
    covariates: tuple[tuple[float, ...], ...]
    actions: tuple[int, ...]
    names: tuple[tuple[str, ...], ...]

    def __post_init__(self) -> None:
        if self.stage < 1:
            raise IndexError("stage index must be >= 1")
        if len(self.covariates) != self.stage:
            raise ShapeError(f"history at stage {self.stage} needs "
                             f"{self.stage} covariate vectors")
        if len(self.actions) != self.stage - 1:
            raise ShapeError(f"history at stage {self.stage} needs "
                             f"{self.stage - 1} prior actions")
        if len(self.names) != self.stage:
            raise ShapeError("one name tuple per stage is required")

    def value_map(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for labels, values in zip(self.names, self.covariates):
            out.update(zip(labels, values))
        for k, a in enumerate(self.actions, start=1):
            out[f"A{k}"] = float(a)
        return out


def history(
    trajectory: Trajectory,
    j: int,
    names: Sequence[Sequence[str]] | None = None,
) -> History:
    """The prefix ``(L_1..L_j, A_1..A_{j-1})`` of a trajectory."""
    if not 1 <= j <= trajectory.n_stages:
        raise IndexError(
            f"stage {j} out of range 1..{trajectory.n_stages}")
    if names is None:
        names = default_stage_names([len(s) for s in trajectory.covariates])
    return History(
        stage=j,
        covariates=trajectory.covariates[:j],
        actions=trajectory.actions[: j - 1],
        names=tuple(tuple(s) for s in names)[:j],
    )


# ---------------------------------------------------------------------------
# Decision rules


@dataclass(frozen=True)
class TreeNode:
    """Node of a binary partition tree.

    Internal nodes route on ``feature <= threshold`` (left) versus ``>``
    (right).  Leaves carry the estimated contrast and the per-arm counts of
    the rows used for that estimate.
    """

    feature: int | None = None
    threshold: float | None = None
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    contrast: float | None = None
    n_treated: int | None = None
    n_control: int | None = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Leaf contrast for every row of ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.empty(X.shape[0])
        self._fill(X, np.arange(X.shape[0]), out)
        return out

    def _fill(self, X: np.ndarray, idx: np.ndarray, out: np.ndarray) -> None:
        if self.is_leaf:
            out[idx] = self.contrast
            return
        go_left = X[idx, self.feature] <= self.threshold
        self.left._fill(X, idx[go_left], out)
        self.right._fill(X, idx[~go_left], out)

    def leaves(self) -> Iterator["TreeNode"]:
        if self.is_leaf:
            yield self
        else:
            yield from self.left.leaves()
            yield from self.right.leaves()

    @property
    def depth(self) -> int:
        if self.is_leaf:
            return 0
        return 1 + max(self.left.depth, self.right.depth)

    def to_dict(self) -> dict:
        if self.is_leaf:
            return {
                "contrast": self.contrast,
                "n_treated": self.n_treated,
                "n_control": self.n_control,
            }
        return {
            "feature": self.feature,
            "threshold": self.threshold,
            "left": self.left.to_dict(),
            "right": self.right.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TreeNode":
        if "feature" in d:
            return cls(
                feature=int(d["feature"]),
                threshold=float(d["threshold"]),
                left=cls.from_dict(d["left"]),
                right=cls.from_dict(d["right"]),
            )
        return cls(
            contrast=float(d["contrast"]),
            n_treated=None if d.get("n_treated") is None else int(d["n_treated"]),
            n_control=None if d.get("n_control") is None else int(d["n_control"]),
        )


@dataclass(frozen=True)
class LinearSignRule:
    """Treat iff ``psi . r(h) > 0`` for a linear feature map ``r``."""

    features: FeatureMap
    coefficients: tuple[float, ...]

    def __post_init__(self) -> None:
        coefs = tuple(float(c) for c in self.coefficients)
        object.__setattr__(self, "coefficients", coefs)
        if len(coefs) != self.features.dim:
            raise ShapeError(
                f"rule has {len(coefs)} coefficients for "
                f"{self.features.dim} features")

    def contrasts(self, env: Mapping[str, object], n: int) -> np.ndarray:
        return self.features.matrix(env, n) @ np.asarray(self.coefficients)

    def actions(self, env: Mapping[str, object], n: int) -> np.ndarray:
        return (self.contrasts(env, n) > 0).astype(np.int64)


@dataclass(frozen=True)
class ThresholdRule:
    """Treat iff a single covariate lies strictly below (or above) a cutoff."""

    column: str
    cutoff: float
    direction: str = "below"

    def __post_init__(self) -> None:
        if self.direction not in ("below", "above"):
            raise ConfigError("direction must be 'below' or 'above'")
        object.__setattr__(self, "cutoff", float(self.cutoff))

    def actions(self, env: Mapping[str, object], n: int) -> np.ndarray:
        try:
            raw = env[self.column]
        except KeyError:
            raise DataError(f"unknown column {self.column!r}") from None
        col = np.broadcast_to(np.asarray(raw, dtype=float), (n,))
        if self.direction == "below":
            return (col < self.cutoff).astype(np.int64)
        return (col > self.cutoff).astype(np.int64)


@dataclass(frozen=True)
class TreeRule:
    """Treat iff the leaf contrast of a fitted partition tree is positive."""

    features: FeatureMap
    tree: TreeNode

    def contrasts(self, env: Mapping[str, object], n: int) -> np.ndarray:
        return self.tree.predict(self.features.matrix(env, n))

    def actions(self, env: Mapping[str, object], n: int) -> np.ndarray:
        return (self.contrasts(env, n) > 0).astype(np.int64)


@dataclass(frozen=True)
class DecisionFnRule:
    """Treat iff a fitted decision function is positive.

    Inputs are standardised by the stored ``center``/``scale`` before the
    kernel expansion.  For the linear kernel the function is
    ``w . z + intercept``; for the RBF kernel it is the dual expansion over
    the stored support points.
    """

    features: FeatureMap
    kernel: str
    center: tuple[float, ...]
    scale: tuple[float, ...]
    intercept: float
    weights: tuple[float, ...] | None = None
    support_points: tuple[tuple[float, ...], ...] | None = None
    dual_coef: tuple[float, ...] | None = None
    gamma: float | None = None

    def __post_init__(self) -> None:
        if self.kernel not in ("linear", "rbf"):
            raise ConfigError(f"unknown kernel {self.kernel!r}")
        if self.kernel == "linear":
            if self.weights is None:
                raise ShapeError("linear decision function needs weights")
            if len(self.weights) != self.features.dim:
                raise ShapeError("weight/feature dimension mismatch")
        else:
            if self.support_points is None or self.dual_coef is None:
                raise ShapeError("rbf decision function needs support points "
                                 "and dual weights")
            if self.gamma is None or self.gamma <= 0:
                raise ConfigError("rbf decision function needs gamma > 0")

    def decision_values(self, env: Mapping[str, object], n: int) -> np.ndarray:
        X = self.features.matrix(env, n)
        Z = (X - np.asarray(self.center)) / np.asarray(self.scale)
        if self.kernel == "linear":
            return Z @ np.asarray(self.weights) + self.intercept
        S = np.asarray(self.support_points)
        sq = (
            np.sum(Z ** 2, axis=1)[:, None]
            + np.sum(S ** 2, axis=1)[None, :]
            - 2.0 * Z @ S.T
        )
        K = np.exp(-self.gamma * np.maximum(sq, 0.0))
        return K @ np.asarray(self.dual_coef) + self.intercept

    def actions(self, env: Mapping[str, object], n: int) -> np.ndarray:
        return (self.decision_values(env, n) > 0).astype(np.int64)


Rule = Union[LinearSignRule, ThresholdRule, TreeRule, DecisionFnRule]


@dataclass(frozen=True)
class Regime:
    """A sequence of decision rules, one per stage."""

    rules: tuple[Rule, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "rules", tuple(self.rules))
        if not self.rules:
            raise ShapeError("a regime needs at least one rule")

    @property
    def stage_count(self) -> int:
        return len(self.rules)

    def actions(self, env: Mapping[str, object], n: int) -> np.ndarray:
        """Per-stage actions on columnar data, shape ``(n, K)``."""
        return np.column_stack([r.actions(env, n) for r in self.rules])


def apply_regime(regime: Regime, h: History) -> int:
    """The regime's action for a single history; exact ties give action 0."""
    if h.stage > regime.stage_count:
        raise IndexError(
            f"history stage {h.stage} exceeds regime length "
            f"{regime.stage_count}")
    rule = regime.rules[h.stage - 1]
    return int(rule.actions(h.value_map(), 1)[0])


def consistency_index(
    regime: Regime,
    trajectory: Trajectory,
    names: Sequence[Sequence[str]] | None = None,
) -> ConsistencyIndex:
    """First stage at which the observed action deviates from the regime.

    Returns :data:`CONSISTENT` (infinity) when every recorded stage follows
    the regime.
    """
    if trajectory.n_stages > regime.stage_count:
        raise ShapeError(
            f"trajectory has {trajectory.n_stages} stages, regime has "
            f"{regime.stage_count} rules")
    for j in range(1, trajectory.n_stages + 1):
        if apply_regime(regime, history(trajectory, j, names)) != trajectory.actions[j - 1]:
            return float(j)
    return CONSISTENT


# ---------------------------------------------------------------------------
# Rule (de)serialisation for regime files


def rule_to_dict(rule: Rule) -> dict:
    if isinstance(rule, LinearSignRule):
        return {
            "type": "linear_sign",
            "features": list(rule.features.terms),
            "coefficients": list(rule.coefficients),
        }
    if isinstance(rule, ThresholdRule):
        return {
            "type": "threshold",
            "column": rule.column,
            "cutoff": rule.cutoff,
            "direction": rule.direction,
        }
    if isinstance(rule, TreeRule):
        return {
            "type": "tree",
            "features": list(rule.features.terms),
            "tree": rule.tree.to_dict(),
        }
    if isinstance(rule, DecisionFnRule):
        out = {
            "type": "decision_fn",
            "features": list(rule.features.terms),
            "kernel": rule.kernel,
            "center": list(rule.center),
            "scale": list(rule.scale),
            "intercept": rule.intercept,
        }
        if rule.kernel == "linear":
            out["weights"] = list(rule.weights)
        else:
            out["gamma"] = rule.gamma
            out["support_points"] = [list(p) for p in rule.support_points]
            out["dual_coef"] = list(rule.dual_coef)
        return out
    raise ConfigError(f"unknown rule type {type(rule).__name__}")


def rule_from_dict(d: Mapping) -> Rule:
    kind = d.get("type")
    if kind == "linear_sign":
        return LinearSignRule(FeatureMap(tuple(d["features"])),
                              tuple(d["coefficients"]))
    if kind == "threshold":
        return ThresholdRule(d["column"], float(d["cutoff"]),
                             d.get("direction", "below"))
    if kind == "tree":
        return TreeRule(FeatureMap(tuple(d["features"])),
                        TreeNode.from_dict(d["tree"]))
    if kind == "decision_fn":
        kernel = d["kernel"]
        common = dict(
            features=FeatureMap(tuple(d["features"])),
            kernel=kernel,
            center=tuple(d["center"]),
            scale=tuple(d["scale"]),
            intercept=float(d["intercept"]),
        )
        if kernel == "linear":
            return DecisionFnRule(weights=tuple(d["weights"]), **common)
        return DecisionFnRule(
            gamma=float(d["gamma"]),
            support_points=tuple(tuple(p) for p in d["support_points"]),
            dual_coef=tuple(d["dual_coef"]),
            **common,
        )
    raise ConfigError(f"unknown rule type {kind!r} in regime file")
