"""Numerical primitives: least squares, logistic regression, linear
estimating equations and derivative-free maximisation.

All fits go through a column-pivoted QR factorisation so rank deficiencies
are reported with the offending column names instead of surfacing as silent
near-singular solves.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
import scipy.optimize
from scipy.special import expit

from .core import DtrlabError

__all__ = [
    "NumericalError",
    "SingularDesignError",
    "ConvergenceError",
    "EvaluationError",
    "LinearFit",
    "LogisticFit",
    "JointEeFit",
    "OptimizerConfig",
    "ols_fit",
    "logistic_fit",
    "solve_joint_linear_ee",
    "maximize",
    "PROPENSITY_CLIP",
    "clip_probabilities",
]

# Fitted treatment probabilities are clipped to this band before entering
# any weight or estimating equation; positivity can fail numerically in
# finite samples.
PROPENSITY_CLIP = 1e-3


class NumericalError(DtrlabError, RuntimeError):
    """A numerical procedure failed."""


class SingularDesignError(NumericalError):
    """Rank-deficient design or estimating-equation matrix."""

    def __init__(self, message: str, columns: Sequence[str] = ()) -> None:
        super().__init__(message)
        self.columns = tuple(columns)


class ConvergenceError(NumericalError):
    """An iterative fit did not converge."""


class EvaluationError(NumericalError):
    """An objective returned a non-finite value."""

    def __init__(self, message: str, point: np.ndarray | None = None) -> None:
        super().__init__(message)
        self.point = None if point is None else np.asarray(point, dtype=float)


def clip_probabilities(p: np.ndarray, clip: float = PROPENSITY_CLIP) -> tuple[np.ndarray, int]:
    """Clip probabilities into ``[clip, 1-clip]``; returns (clipped, #clipped)."""
    p = np.asarray(p, dtype=float)
    clipped = np.clip(p, clip, 1.0 - clip)
    return clipped, int(np.sum(clipped != p))


@dataclass(frozen=True)
class LinearFit:
    coefficients: np.ndarray
    residuals: np.ndarray
    rank: int
    condition_number: float
    column_names: tuple[str, ...] | None = None


@dataclass(frozen=True)
class LogisticFit:
    coefficients: np.ndarray
    converged: bool
    iterations: int
    score_norm: float
    column_names: tuple[str, ...] | None = None

    def predict(self, X: np.ndarray) -> np.ndarray:
        return expit(np.asarray(X, dtype=float) @ self.coefficients)


@dataclass(frozen=True)
class JointEeFit:
    psi: np.ndarray
    xi: np.ndarray | None
    relative_residual: float
    condition_number: float


def _column_labels(p: int, names: Sequence[str] | None) -> tuple[str, ...]:
    if names is None:
        return tuple(f"x{k}" for k in range(p))
    if len(names) != p:
        raise ValueError(f"{len(names)} column names for {p} columns")
    return tuple(str(c) for c in names)


def _pivoted_qr_solve(
    A: np.ndarray,
    b: np.ndarray,
    names: tuple[str, ...],
    what: str,
) -> tuple[np.ndarray, int, float]:
    """Least-squares solve of ``A x = b`` with rank diagnosis.

    Raises :class:`SingularDesignError` naming the columns pivoted into the
    rank-deficient tail.
    """
    n, p = A.shape
    if n < p:
        raise SingularDesignError(
            f"{what}: {n} rows cannot identify {p} columns", names)
    Q, R, piv = scipy.linalg.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(n, p) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    if rank < p:
        offending = tuple(names[k] for k in piv[rank:])
        raise SingularDesignError(
            f"{what}: rank-deficient matrix (rank {rank} of {p}); "
            f"offending columns: {', '.join(offending)}", offending)
    z = scipy.linalg.solve_triangular(R, Q.T @ b)
    x = np.empty(p)
    x[piv] = z
    cond = float(diag[0] / diag[-1]) if diag[-1] > 0 else np.inf
    return x, rank, cond


def ols_fit(
    X: np.ndarray,
    y: np.ndarray,
    weights: np.ndarray | None = None,
    column_names: Sequence[str] | None = None,
) -> LinearFit:
    """Ordinary (or weighted) least squares via column-pivoted QR.

    Solves the weighted normal equations ``X' W (y - X b) = 0``; weights must
    be nonnegative.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2:
        raise ValueError("design matrix must be 2-d")
    if y.shape != (X.shape[0],):
        raise ValueError("response length must match the design rows")
    names = _column_labels(X.shape[1], column_names)
    if weights is None:
        Xw, yw = X, y
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != y.shape:
            raise ValueError("weights length must match the response")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        root = np.sqrt(w)
        Xw, yw = X * root[:, None], y * root
    beta, rank, cond = _pivoted_qr_solve(Xw, yw, names, "least squares")
    return LinearFit(
        coefficients=beta,
        residuals=y - X @ beta,
        rank=rank,
        condition_number=cond,
        column_names=names,
    )


def _bernoulli_loglik(a: np.ndarray, p: np.ndarray) -> float:
    p = np.clip(p, 1e-12, 1.0 - 1e-12)
    return float(np.sum(a * np.log(p) + (1.0 - a) * np.log1p(-p)))


def logistic_fit(
    X: np.ndarray,
    a: np.ndarray,
    column_names: Sequence[str] | None = None,
    max_iter: int = 100,
    tol: float = 1e-6,
    allow_single_class: bool = False,
) -> LogisticFit:
    """Maximum-likelihood logistic regression via IRLS with step halving.

    Convergence means the score (log-likelihood gradient) has max-norm at
    most ``tol``.  A fit that exhausts ``max_iter`` raises
    :class:`ConvergenceError` (the usual symptom of perfect separation)
    unless the response is single-class and ``allow_single_class`` is set,
    in which case the capped non-converged fit is returned.
    """
    X = np.asarray(X, dtype=float)
    a = np.asarray(a, dtype=float)
    if set(np.unique(a)) - {0.0, 1.0}:
        raise ValueError("binary 0/1 response required")
    names = _column_labels(X.shape[1], column_names)
    single_class = len(np.unique(a)) < 2
    if single_class and not allow_single_class:
        raise ValueError("response contains a single class; pass "
                         "allow_single_class=True to fit anyway")
    def separated(p: np.ndarray) -> bool:
        # Every observation fitted with probability ~0 or ~1 on the correct
        # side: the likelihood has no maximiser.
        delta = 1e-5
        return bool(np.all(np.where(a == 1, p > 1 - delta, p < delta)))

    beta = np.zeros(X.shape[1])
    loglik = _bernoulli_loglik(a, expit(X @ beta))
    score_norm = np.inf
    for it in range(1, max_iter + 1):
        p = expit(X @ beta)
        score = X.T @ (a - p)
        score_norm = float(np.max(np.abs(score))) if score.size else 0.0
        if score_norm <= tol:
            if not single_class and separated(p):
                break
            return LogisticFit(beta, True, it - 1, score_norm, names)
        w = np.maximum(p * (1.0 - p), 1e-10)
        root = np.sqrt(w)
        try:
            step, _, _ = _pivoted_qr_solve(
                X * root[:, None], (a - p) / root, names, "logistic IRLS")
        except SingularDesignError:
            raise
        # Halve the step while it fails to improve the likelihood.
        for _ in range(40):
            candidate = beta + step
            new_loglik = _bernoulli_loglik(a, expit(X @ candidate))
            if new_loglik >= loglik - 1e-12:
                break
            step = step / 2.0
        beta = beta + step
        loglik = _bernoulli_loglik(a, expit(X @ beta))
    p = expit(X @ beta)
    score_norm = float(np.max(np.abs(X.T @ (a - p))))
    if single_class:
        return LogisticFit(beta, False, max_iter, score_norm, names)
    hint = ("the classes are perfectly separated" if separated(p)
            else "the classes may be nearly separated")
    raise ConvergenceError(
        "logistic regression did not converge "
        f"(score max-norm {score_norm:.3g}, max |coef| "
        f"{float(np.max(np.abs(beta))):.3g}); {hint}")


def solve_joint_linear_ee(
    r_design: np.ndarray,
    actions: np.ndarray,
    tfree_design: np.ndarray | None,
    propensity: np.ndarray,
    response: np.ndarray,
    column_names: Sequence[str] | None = None,
    tfree_names: Sequence[str] | None = None,
) -> JointEeFit:
    """Exact solve of the stacked linear estimating equations

    ``sum_i R_i (v_i - A_i R_i'psi - D_i'xi)(A_i - pi_i) = 0`` and
    ``sum_i D_i (v_i - A_i R_i'psi - D_i'xi) = 0``.

    With ``tfree_design=None`` the second block is dropped and only the
    first equation (with ``xi`` omitted) is solved.  Both unknowns enter
    linearly, so the solution is a single stacked linear solve.
    """
    R = np.asarray(r_design, dtype=float)
    A = np.asarray(actions, dtype=float)
    pi = np.asarray(propensity, dtype=float)
    v = np.asarray(response, dtype=float)
    n, p_r = R.shape
    if not (A.shape == pi.shape == v.shape == (n,)):
        raise ValueError("actions, propensity and response must be length-n vectors")
    r_names = _column_labels(p_r, column_names)
    w = A - pi
    RW = R * w[:, None]
    if tfree_design is None:
        M = RW.T @ (R * A[:, None])
        b = RW.T @ v
        names = tuple(f"psi:{c}" for c in r_names)
    else:
        D = np.asarray(tfree_design, dtype=float)
        if D.shape[0] != n:
            raise ValueError("treatment-free design must have n rows")
        p_d = D.shape[1]
        d_names = _column_labels(p_d, tfree_names)
        top = np.hstack([RW.T @ (R * A[:, None]), RW.T @ D])
        bottom = np.hstack([D.T @ (R * A[:, None]), D.T @ D])
        M = np.vstack([top, bottom])
        b = np.concatenate([RW.T @ v, D.T @ v])
        names = tuple(f"psi:{c}" for c in r_names) + tuple(
            f"xi:{c}" for c in d_names)
    theta, _, cond = _pivoted_qr_solve(M, b, names, "estimating equations")
    resid = M @ theta - b
    rel = float(np.linalg.norm(resid) / (1.0 + np.linalg.norm(b)))
    if rel > 1e-8:
        raise NumericalError(
            f"estimating-equation solve left relative residual {rel:.3g}")
    psi = theta[:p_r]
    xi = None if tfree_design is None else theta[p_r:]
    return JointEeFit(psi=psi, xi=xi, relative_residual=rel,
                      condition_number=cond)


# ---------------------------------------------------------------------------
# Derivative-free maximisation


@dataclass(frozen=True)
class OptimizerConfig:
    """Search strategy for maximising a black-box objective.

    ``grid`` holds one value array per dimension; ``grid_then_nelder_mead``
    scans the full product and polishes the best cell with Nelder-Mead.
    ``multi_start`` runs Nelder-Mead from every point in ``starts``.
    """

    method: str = "grid_then_nelder_mead"
    start: Sequence[float] | None = None
    starts: Sequence[Sequence[float]] | None = None
    grid: Sequence[Sequence[float]] | None = None
    max_evaluations: int = 4000
    xtol: float = 1e-6
    ftol: float = 1e-10
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.method not in ("nelder_mead", "grid_then_nelder_mead",
                               "multi_start"):
            raise ValueError(f"unknown optimiser method {self.method!r}")
        if self.max_evaluations < 1:
            raise ValueError("max_evaluations must be >= 1")
        if self.grid is not None:
            for axis in self.grid:
                if not np.all(np.isfinite(axis)):
                    raise ValueError("grid bounds must be finite")


class _CountedObjective:
    def __init__(self, fn: Callable[[np.ndarray], float]) -> None:
        self.fn = fn
        self.evaluations = 0

    def __call__(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=float)
        self.evaluations += 1
        value = float(self.fn(x))
        if not np.isfinite(value):
            raise EvaluationError(
                f"objective returned non-finite value {value!r} at "
                f"{x.tolist()}", point=x)
        return value


def _nelder_mead(
    counted: _CountedObjective,
    x0: np.ndarray,
    budget: int,
    config: OptimizerConfig,
    initial_step: np.ndarray | None = None,
) -> tuple[np.ndarray, float]:
    if budget < 1:
        return x0, counted.fn(x0)
    d = x0.size
    simplex = None
    if initial_step is not None:
        simplex = np.vstack([x0] + [x0 + np.eye(d)[k] * initial_step[k]
                                    for k in range(d)])
    res = scipy.optimize.minimize(
        lambda x: -counted(x),
        x0,
        method="Nelder-Mead",
        options={
            "maxfev": budget,
            "xatol": config.xtol,
            "fatol": config.ftol,
            "initial_simplex": simplex,
        },
    )
    return np.asarray(res.x, dtype=float), -float(res.fun)


def maximize(
    objective: Callable[[np.ndarray], float],
    config: OptimizerConfig,
) -> tuple[np.ndarray, float, int]:
    """Maximise ``objective`` per ``config``; returns (argmax, value, evals).

    A non-finite objective value raises :class:`EvaluationError` carrying
    the offending point.  ``grid_then_nelder_mead`` never returns a value
    below the best grid value.
    """
    counted = _CountedObjective(objective)
    if config.method == "nelder_mead":
        if config.start is None:
            raise ValueError("nelder_mead requires a start point")
        x0 = np.asarray(config.start, dtype=float)
        x, v = _nelder_mead(counted, x0, config.max_evaluations, config)
        return x, v, counted.evaluations

    if config.method == "multi_start":
        if not config.starts:
            raise ValueError("multi_start requires start points")
        best_x, best_v = None, -np.inf
        per_start = max(1, config.max_evaluations // len(config.starts))
        for s in config.starts:
            x, v = _nelder_mead(counted, np.asarray(s, dtype=float),
                                per_start, config)
            if v > best_v:
                best_x, best_v = x, v
        return best_x, best_v, counted.evaluations

    if config.grid is None:
        raise ValueError("grid_then_nelder_mead requires a grid")
    axes = [np.asarray(axis, dtype=float) for axis in config.grid]
    best_x, best_v = None, -np.inf
    for point in itertools.product(*axes):
        x = np.asarray(point)
        v = counted(x)
        if v > best_v:
            best_x, best_v = x, v
    # Polish from the best grid cell with a simplex sized by the local
    # grid spacing.
    step = np.empty(len(axes))
    for k, axis in enumerate(axes):
        if axis.size > 1:
            gaps = np.diff(np.sort(axis))
            step[k] = 0.5 * float(np.min(gaps[gaps > 0], initial=1.0))
        else:
            step[k] = max(1.0, abs(best_x[k])) * 0.05
    budget = config.max_evaluations - counted.evaluations
    if budget > 0:
        x, v = _nelder_mead(counted, best_x, budget, config,
                            initial_step=step)
        if v > best_v:
            best_x, best_v = x, v
    return best_x, best_v, counted.evaluations
