"""Honest recursive partitioning of per-stage treatment-effect heterogeneity.

Each stage's contrast function is approximated by a binary tree: rows are
split into a training half that chooses the splits and an estimation half
that fills the leaf contrasts, so leaf estimates are not overfit to the
split selection.  Splits maximise a variance-penalised heterogeneity
criterion over the leaves they create,

    sum_leaves (n_leaf/n_train) * C_leaf^2
    - (1/n_train + 1/n_est) * sum_leaves (S2_treated/p + S2_control/(1-p))

computed on the training half, where ``S2`` are within-leaf response
variances per arm and ``p`` the leaf's treated fraction; growth stops when
no legal candidate scores above zero.  Leaf contrasts
compare inverse-probability-weighted response means between arms when
``use_iptw`` is on, correcting for propensity variation within leaves.

Backwards over stages, the fitted trees play the role of the contrast
function in the usual value update ``V_j = V_{j+1} + (I{C_j>0} - A_j) C_j``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .core import (
    ConfigError,
    DataError,
    Dataset,
    FeatureMap,
    Regime,
    TreeNode,
    TreeRule,
)
from .indirect import FitResult, _stage_call
from .stats import clip_probabilities, logistic_fit

__all__ = [
    "TreeHyperparams",
    "CausalTree",
    "build_causal_tree",
    "causal_tree_fit",
]


@dataclass(frozen=True)
class TreeHyperparams:
    """Complexity controls for one stage's tree.

    ``honest_fraction`` is the share of rows assigned to the training
    (split-choosing) half; the rest estimate leaf contrasts.
    """

    min_leaf: int = 10
    max_depth: int = 4
    honest_fraction: float = 0.5
    use_iptw: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.min_leaf < 2:
            raise ConfigError("min_leaf must be >= 2")
        if self.max_depth < 0:
            raise ConfigError("max_depth must be >= 0")
        if not 0.0 < self.honest_fraction < 1.0:
            raise ConfigError("honest_fraction must be in (0, 1)")


@dataclass(frozen=True)
class CausalTree:
    root: TreeNode
    feature_names: tuple[str, ...]
    n_train: int
    n_estimate: int

    def predict_contrast(self, X: np.ndarray) -> np.ndarray:
        return self.root.predict(X)

    @property
    def n_leaves(self) -> int:
        return sum(1 for _ in self.root.leaves())

    def to_text(self) -> str:
        lines: list[str] = []

        def walk(node: TreeNode, indent: int) -> None:
            pad = "  " * indent
            if node.is_leaf:
                lines.append(
                    f"{pad}leaf: contrast={node.contrast:.4g} "
                    f"(treated {node.n_treated}, control {node.n_control})")
                return
            name = self.feature_names[node.feature]
            lines.append(f"{pad}if {name} <= {node.threshold:.6g}:")
            walk(node.left, indent + 1)
            lines.append(f"{pad}else:")
            walk(node.right, indent + 1)

        walk(self.root, 0)
        return "\n".join(lines)

    def to_json_dict(self) -> dict:
        return {
            "feature_names": list(self.feature_names),
            "n_train": self.n_train,
            "n_estimate": self.n_estimate,
            "tree": self.root.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2)


class _Half:
    """Per-half row store with the sufficient statistics for split scans."""

    def __init__(self, X, a, v, w):
        self.X = X
        self.a = a
        self.v = v
        self.w = w

    def counts(self, idx):
        a = self.a[idx]
        n1 = int(np.sum(a))
        return n1, idx.size - n1

    def contrast(self, idx):
        a = self.a[idx]
        w = self.w[idx]
        v = self.v[idx]
        w1 = float(np.sum(w * a))
        w0 = float(np.sum(w * (1 - a)))
        if w1 <= 0 or w0 <= 0:
            return None
        m1 = float(np.sum(w * v * a)) / w1
        m0 = float(np.sum(w * v * (1 - a))) / w0
        return m1 - m0


def _leaf_criterion(share, contrast, s2_1, s2_0, p_hat, penalty):
    return (share * contrast ** 2
            - penalty * (s2_1 / p_hat + s2_0 / (1.0 - p_hat)))


def _best_split(train: _Half, est: _Half, tr_idx, es_idx, min_leaf, penalty,
                n_train_total):
    """Best (criterion, feature, threshold) over candidate midpoints, or None.

    A candidate's criterion is the summed variance-penalised heterogeneity
    of the two leaves it creates; a node becomes a leaf when no legal
    candidate scores above zero.  The node's own criterion is deliberately
    not the baseline: under confounding the between-arm means of a mixed
    node need not average its children's, which would block splits that
    isolate genuine effect regions.
    """
    if tr_idx.size < 2 or es_idx.size < 2:
        return None
    best = None
    a = train.a[tr_idx]
    v = train.v[tr_idx]
    w = train.w[tr_idx]
    ea = est.a[es_idx]
    n_est1 = float(np.sum(ea))
    n_est0 = es_idx.size - n_est1
    for f in range(train.X.shape[1]):
        x = train.X[tr_idx, f]
        order = np.argsort(x, kind="stable")
        xs, as_, vs, ws = x[order], a[order], v[order], w[order]
        distinct = np.nonzero(np.diff(xs) > 0)[0]
        if distinct.size == 0:
            continue
        thresholds = 0.5 * (xs[distinct] + xs[distinct + 1])
        # Left-side prefix sums over the sorted training rows, per arm;
        # right sides follow from the node totals.
        t1 = as_
        t0 = 1.0 - as_
        cn1 = np.cumsum(t1)[distinct]
        cn0 = np.cumsum(t0)[distinct]
        cw1 = np.cumsum(ws * t1)[distinct]
        cw0 = np.cumsum(ws * t0)[distinct]
        cwv1 = np.cumsum(ws * vs * t1)[distinct]
        cwv0 = np.cumsum(ws * vs * t0)[distinct]
        cv1 = np.cumsum(vs * t1)[distinct]
        cv0 = np.cumsum(vs * t0)[distinct]
        cq1 = np.cumsum(vs * vs * t1)[distinct]
        cq0 = np.cumsum(vs * vs * t0)[distinct]
        tn1, tn0 = float(np.sum(t1)), float(np.sum(t0))
        tw1, tw0 = float(np.sum(ws * t1)), float(np.sum(ws * t0))
        twv1, twv0 = float(np.sum(ws * vs * t1)), float(np.sum(ws * vs * t0))
        tv1, tv0 = float(np.sum(vs * t1)), float(np.sum(vs * t0))
        tq1, tq0 = float(np.sum(vs * vs * t1)), float(np.sum(vs * vs * t0))
        n1L, n0L = cn1, cn0
        n1R, n0R = tn1 - cn1, tn0 - cn0
        ex = est.X[es_idx, f]
        e_order = np.argsort(ex, kind="stable")
        exs = ex[e_order]
        eas = ea[e_order]
        e1 = np.cumsum(eas)
        e0 = np.cumsum(1.0 - eas)
        pos = np.searchsorted(exs, thresholds, side="right")
        en1L = np.where(pos > 0, e1[np.maximum(pos - 1, 0)], 0.0)
        en0L = np.where(pos > 0, e0[np.maximum(pos - 1, 0)], 0.0)
        legal = (
            (n1L >= min_leaf) & (n0L >= min_leaf)
            & (n1R >= min_leaf) & (n0R >= min_leaf)
            & (en1L >= min_leaf) & (en0L >= min_leaf)
            & (n_est1 - en1L >= min_leaf) & (n_est0 - en0L >= min_leaf)
        )
        if not np.any(legal):
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            cL = cwv1 / cw1 - cwv0 / cw0
            cR = (twv1 - cwv1) / (tw1 - cw1) - (twv0 - cwv0) / (tw0 - cw0)
            s2_1L = (cq1 - cv1 ** 2 / n1L) / (n1L - 1)
            s2_0L = (cq0 - cv0 ** 2 / n0L) / (n0L - 1)
            s2_1R = ((tq1 - cq1) - (tv1 - cv1) ** 2 / n1R) / (n1R - 1)
            s2_0R = ((tq0 - cq0) - (tv0 - cv0) ** 2 / n0R) / (n0R - 1)
            pL = n1L / (n1L + n0L)
            pR = n1R / (n1R + n0R)
            critL = _leaf_criterion((n1L + n0L) / n_train_total, cL,
                                    s2_1L, s2_0L, pL, penalty)
            critR = _leaf_criterion((n1R + n0R) / n_train_total, cR,
                                    s2_1R, s2_0R, pR, penalty)
            crit = critL + critR
        crit = np.where(legal, crit, -np.inf)
        k = int(np.argmax(crit))
        if np.isfinite(crit[k]) and (best is None or crit[k] > best[0]):
            best = (float(crit[k]), f, float(thresholds[k]))
    if best is None or best[0] <= 0.0:
        return None
    return best


def _grow(train, est, tr_idx, es_idx, depth, hyper, penalty, n_train_total) -> TreeNode:
    split = None
    if depth < hyper.max_depth:
        split = _best_split(train, est, tr_idx, es_idx, hyper.min_leaf,
                            penalty, n_train_total)
    if split is None:
        contrast = est.contrast(es_idx)
        n1, n0 = est.counts(es_idx)
        return TreeNode(contrast=contrast, n_treated=n1, n_control=n0)
    _, f, thr = split
    tr_left = tr_idx[train.X[tr_idx, f] <= thr]
    tr_right = tr_idx[train.X[tr_idx, f] > thr]
    es_left = es_idx[est.X[es_idx, f] <= thr]
    es_right = es_idx[est.X[es_idx, f] > thr]
    return TreeNode(
        feature=f,
        threshold=thr,
        left=_grow(train, est, tr_left, es_left, depth + 1, hyper, penalty,
                   n_train_total),
        right=_grow(train, est, tr_right, es_right, depth + 1, hyper, penalty,
                    n_train_total),
    )


def build_causal_tree(
    features: np.ndarray,
    actions: np.ndarray,
    responses: np.ndarray,
    propensity: np.ndarray | None = None,
    hyper: TreeHyperparams = TreeHyperparams(),
    feature_names: Sequence[str] | None = None,
) -> CausalTree:
    """Grow one honest tree from stage rows.

    ``propensity`` supplies fitted treatment probabilities for the IPTW
    leaf correction; it may be omitted when ``use_iptw`` is off.
    """
    X = np.atleast_2d(np.asarray(features, dtype=float))
    a = np.asarray(actions, dtype=float)
    v = np.asarray(responses, dtype=float)
    n = X.shape[0]
    if a.shape != (n,) or v.shape != (n,):
        raise DataError("actions and responses must match the feature rows")
    if n < 2 * hyper.min_leaf:
        raise DataError(
            f"{n} rows cannot support min_leaf={hyper.min_leaf}")
    if len(np.unique(a)) < 2:
        raise DataError("both actions must be present to estimate contrasts")
    if hyper.use_iptw:
        if propensity is None:
            raise ConfigError("use_iptw requires fitted propensities")
        pi = np.asarray(propensity, dtype=float)
        w = np.where(a == 1, 1.0 / pi, 1.0 / (1.0 - pi))
    else:
        w = np.ones(n)
    names = (tuple(feature_names) if feature_names is not None
             else tuple(f"x{k}" for k in range(X.shape[1])))
    rng = np.random.default_rng(hyper.seed)
    perm = rng.permutation(n)
    n_tr = int(round(hyper.honest_fraction * n))
    n_tr = min(max(n_tr, 1), n - 1)
    tr_rows, es_rows = perm[:n_tr], perm[n_tr:]
    for label, rows in (("training", tr_rows), ("estimation", es_rows)):
        if len(np.unique(a[rows])) < 2:
            raise DataError(
                f"the {label} half contains a single action; more data or a "
                "different seed is required")
    train = _Half(X[tr_rows], a[tr_rows], v[tr_rows], w[tr_rows])
    est = _Half(X[es_rows], a[es_rows], v[es_rows], w[es_rows])
    penalty = 1.0 / tr_rows.size + 1.0 / es_rows.size
    root = _grow(train, est, np.arange(tr_rows.size), np.arange(es_rows.size),
                 0, hyper, penalty, tr_rows.size)
    return CausalTree(root=root, feature_names=names,
                      n_train=tr_rows.size, n_estimate=es_rows.size)


def causal_tree_fit(
    data: Dataset,
    propensity: Sequence[FeatureMap],
    hyper: TreeHyperparams | Sequence[TreeHyperparams] = TreeHyperparams(),
    features: Sequence[FeatureMap] | None = None,
) -> FitResult:
    """Backward tree-based contrast estimation over all stages.

    ``features`` selects the per-stage split variables (default: the stage's
    own covariates).  Per-stage seeds are derived from a single
    ``TreeHyperparams.seed`` so repeated fits are reproducible.
    """
    K = data.stage_count
    if len(propensity) != K:
        raise ConfigError("one propensity feature map per stage is required")
    if features is None:
        features = [FeatureMap(names) for names in data.stage_names]
    elif len(features) != K:
        raise ConfigError("one tree feature map per stage is required")
    if isinstance(hyper, TreeHyperparams):
        stage_seeds = np.random.SeedSequence(hyper.seed).generate_state(K)
        hypers = [replace(hyper, seed=int(s)) for s in stage_seeds]
    else:
        hypers = list(hyper)
        if len(hypers) != K:
            raise ConfigError("one hyperparameter set per stage is required")
    env = data.env()
    n = data.n
    v = env["Y"].copy()
    values = np.empty((n, K))
    alpha: list[np.ndarray | None] = [None] * K
    rules: list[TreeRule | None] = [None] * K
    trees: list[CausalTree] = [None] * K
    clip_counts = []
    for j in range(K, 0, -1):
        rows = data.stage_rows(j)
        env_j = {k: c[rows] for k, c in env.items()}
        m = int(np.sum(rows))
        a = env_j[f"A{j}"]
        P = propensity[j - 1].matrix(env_j, m)
        prop_fit = _stage_call(j, logistic_fit, P, a,
                               column_names=propensity[j - 1].terms)
        alpha[j - 1] = prop_fit.coefficients
        pi, clipped = clip_probabilities(prop_fit.predict(P))
        clip_counts.append(clipped)
        X = features[j - 1].matrix(env_j, m)
        try:
            tree = build_causal_tree(
                X, a, v[rows], pi, hypers[j - 1],
                feature_names=features[j - 1].terms)
        except (DataError, ConfigError) as e:
            raise type(e)(f"stage {j}: {e}") from e
        trees[j - 1] = tree
        contrast = tree.predict_contrast(X)
        v = v.copy()
        v[rows] = v[rows] + ((contrast > 0).astype(float) - a) * contrast
        values[:, j - 1] = v
        rules[j - 1] = TreeRule(features[j - 1], tree.root)
    return FitResult(
        variant="ctree",
        regime=Regime(tuple(rules)),
        psi=(None,) * K,
        xi=(None,) * K,
        alpha=tuple(alpha),
        values=values,
        value_means=tuple(float(np.mean(values[:, j])) for j in range(K)),
        diagnostics={
            "propensity_clipped": tuple(reversed(clip_counts)),
            "n_leaves": tuple(t.n_leaves for t in trees),
        },
        trees=tuple(trees),
    )
