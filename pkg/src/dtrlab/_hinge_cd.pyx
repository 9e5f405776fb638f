# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled dual coordinate descent for the weighted hinge loss.

Mirrors :mod:`dtrlab._hinge_py`; see that module for the problem statement
and the stopping rule.
"""

import numpy as np


def linear_cd(object X_in, object y_in, object ub_in,
              double tol=1e-4, int max_epochs=1000):
    """Returns ``(w, alpha, gap, gap0, epochs)``."""
    X_arr = np.ascontiguousarray(X_in, dtype=np.float64)
    y_arr = np.ascontiguousarray(y_in, dtype=np.float64)
    ub_arr = np.ascontiguousarray(ub_in, dtype=np.float64)
    cdef double[:, ::1] X = X_arr
    cdef double[::1] y = y_arr
    cdef double[::1] ub = ub_arr
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t p = X.shape[1]

    w_arr = np.zeros(p, dtype=np.float64)
    alpha_arr = np.zeros(n, dtype=np.float64)
    sq_arr = np.einsum("ij,ij->i", X_arr, X_arr)
    cdef double[::1] w = w_arr
    cdef double[::1] alpha = alpha_arr
    cdef double[::1] sq = sq_arr

    cdef double gap0 = 0.0
    cdef Py_ssize_t i, k
    for i in range(n):
        gap0 += ub[i]
    if gap0 <= 0.0:
        return w_arr, alpha_arr, 0.0, 0.0, 0

    cdef double gap = gap0
    cdef double c, a_old, a_new, grad, delta, xw, wsq, primal, dual, m
    cdef int epoch, epochs = 0
    for epoch in range(1, max_epochs + 1):
        for i in range(n):
            c = ub[i]
            if c <= 0.0:
                continue
            if sq[i] <= 0.0:
                alpha[i] = c
                continue
            a_old = alpha[i]
            xw = 0.0
            for k in range(p):
                xw += X[i, k] * w[k]
            grad = y[i] * xw - 1.0
            if (a_old <= 0.0 and grad >= 0.0) or (a_old >= c and grad <= 0.0):
                continue
            a_new = a_old - grad / sq[i]
            if a_new < 0.0:
                a_new = 0.0
            elif a_new > c:
                a_new = c
            delta = a_new - a_old
            if delta != 0.0:
                alpha[i] = a_new
                for k in range(p):
                    w[k] += delta * y[i] * X[i, k]
        epochs = epoch
        wsq = 0.0
        for k in range(p):
            wsq += w[k] * w[k]
        primal = 0.5 * wsq
        dual = -0.5 * wsq
        for i in range(n):
            xw = 0.0
            for k in range(p):
                xw += X[i, k] * w[k]
            m = 1.0 - y[i] * xw
            if m > 0.0:
                primal += ub[i] * m
            dual += alpha[i]
        gap = primal - dual
        if gap <= tol * gap0 + 1e-12:
            break
    return w_arr, alpha_arr, gap, gap0, epochs


def kernel_cd(object K_in, object y_in, object ub_in,
              double tol=1e-4, int max_epochs=1000):
    """Returns ``(alpha, decision_values, gap, gap0, epochs)``."""
    K_arr = np.ascontiguousarray(K_in, dtype=np.float64)
    y_arr = np.ascontiguousarray(y_in, dtype=np.float64)
    ub_arr = np.ascontiguousarray(ub_in, dtype=np.float64)
    cdef double[:, ::1] K = K_arr
    cdef double[::1] y = y_arr
    cdef double[::1] ub = ub_arr
    cdef Py_ssize_t n = y.shape[0]

    alpha_arr = np.zeros(n, dtype=np.float64)
    f_arr = np.zeros(n, dtype=np.float64)
    cdef double[::1] alpha = alpha_arr
    cdef double[::1] f = f_arr

    cdef double gap0 = 0.0
    cdef Py_ssize_t i, k
    for i in range(n):
        gap0 += ub[i]
    if gap0 <= 0.0:
        return alpha_arr, f_arr, 0.0, 0.0, 0

    cdef double gap = gap0
    cdef double c, a_old, a_new, grad, delta, qii, norm_sq, primal, dual, m
    cdef int epoch, epochs = 0
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
            a_new = a_old - grad / qii
            if a_new < 0.0:
                a_new = 0.0
            elif a_new > c:
                a_new = c
            delta = a_new - a_old
            if delta != 0.0:
                alpha[i] = a_new
                for k in range(n):
                    f[k] += delta * y[i] * K[i, k]
        epochs = epoch
        norm_sq = 0.0
        primal = 0.0
        dual = 0.0
        for i in range(n):
            norm_sq += alpha[i] * y[i] * f[i]
            m = 1.0 - y[i] * f[i]
            if m > 0.0:
                primal += ub[i] * m
            dual += alpha[i]
        primal += 0.5 * norm_sq
        dual -= 0.5 * norm_sq
        gap = primal - dual
        if gap <= tol * gap0 + 1e-12:
            break
    return alpha_arr, f_arr, gap, gap0, epochs
