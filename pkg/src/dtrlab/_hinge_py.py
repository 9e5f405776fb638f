"""Pure-Python dual coordinate descent for the weighted hinge loss.

Reference implementation of the solvers in ``_hinge_cd.pyx``; selected at
import time by :mod:`dtrlab._hinge` when the compiled kernel is missing or
explicitly disabled.  Same contracts, substantially slower inner loops.

The problem solved is

    min_w  0.5 ||w||^2 + sum_i C_i * max(0, 1 - y_i w.x_i)

whose dual is box-constrained with per-sample upper bounds ``C_i``.  The
kernelised variant replaces ``w.x_i`` with the dual expansion over a
precomputed kernel matrix (which must already include any bias offset).
Iteration stops once the duality gap falls below ``tol`` times the gap at
the zero solution.
"""

from __future__ import annotations

import numpy as np


def _linear_gap(X, y, ub, w, alpha):
    margins = 1.0 - y * (X @ w)
    primal = 0.5 * float(w @ w) + float(ub @ np.maximum(margins, 0.0))
    dual = float(np.sum(alpha)) - 0.5 * float(w @ w)
    return primal - dual, primal


def linear_cd(
    X: np.ndarray,
    y: np.ndarray,
    ub: np.ndarray,
    tol: float = 1e-4,
    max_epochs: int = 1000,
) -> tuple[np.ndarray, np.ndarray, float, float, int]:
    """Returns ``(w, alpha, gap, gap0, epochs)``."""
    X = np.ascontiguousarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    ub = np.asarray(ub, dtype=float)
    n, p = X.shape
    w = np.zeros(p)
    alpha = np.zeros(n)
    gap0 = float(np.sum(ub))
    if gap0 <= 0.0:
        return w, alpha, 0.0, 0.0, 0
    sq = np.einsum("ij,ij->i", X, X)
    gap = gap0
    epochs = 0
    for epoch in range(1, max_epochs + 1):
        for i in range(n):
            c = ub[i]
            if c <= 0.0:
                continue
            if sq[i] <= 0.0:
                alpha[i] = c
                continue
            a_old = alpha[i]
            grad = y[i] * float(X[i] @ w) - 1.0
            if (a_old <= 0.0 and grad >= 0.0) or (a_old >= c and grad <= 0.0):
                continue
            a_new = min(max(a_old - grad / sq[i], 0.0), c)
            delta = a_new - a_old
            if delta != 0.0:
                alpha[i] = a_new
                w += delta * y[i] * X[i]
        epochs = epoch
        gap, _ = _linear_gap(X, y, ub, w, alpha)
        if gap <= tol * gap0 + 1e-12:
            break
    return w, alpha, gap, gap0, epochs


def kernel_cd(
    K: np.ndarray,
    y: np.ndarray,
    ub: np.ndarray,
    tol: float = 1e-4,
    max_epochs: int = 1000,
) -> tuple[np.ndarray, np.ndarray, float, float, int]:
    """Returns ``(alpha, decision_values, gap, gap0, epochs)``."""
    K = np.ascontiguousarray(K, dtype=float)
    y = np.asarray(y, dtype=float)
    ub = np.asarray(ub, dtype=float)
    n = y.shape[0]
    alpha = np.zeros(n)
    f = np.zeros(n)  # f_i = sum_j alpha_j y_j K_ij
    gap0 = float(np.sum(ub))
    if gap0 <= 0.0:
        return alpha, f, 0.0, 0.0, 0
    gap = gap0
    epochs = 0
    for epoch in range(1, max_epochs + 1):
        for i in range(n):
            c = ub[i]
            if c <= 0.0:
                continue
            qii = K[i, i]
            if qii <= 0.0:
                alpha[i] = c
                continue
            a_old = alpha[i]
            grad = y[i] * f[i] - 1.0
            if (a_old <= 0.0 and grad >= 0.0) or (a_old >= c and grad <= 0.0):
                continue
            a_new = min(max(a_old - grad / qii, 0.0), c)
            delta = a_new - a_old
            if delta != 0.0:
                alpha[i] = a_new
                f += delta * y[i] * K[i]
        epochs = epoch
        norm_sq = float(np.sum(alpha * y * f))
        primal = 0.5 * norm_sq + float(ub @ np.maximum(1.0 - y * f, 0.0))
        dual = float(np.sum(alpha)) - 0.5 * norm_sq
        gap = primal - dual
        if gap <= tol * gap0 + 1e-12:
            break
    return alpha, f, gap, gap0, epochs
