"""Compiled inner loops for gradient flow and gradient descent on factor chains.

Every routine works on a ``(L, d, d)`` float64 stack with ``F[0] = W_1`` and
observation arrays ``rows, cols, targets``. The Python-level reference for the
gradient is :func:`deepfact.core.layer_gradients`; tests compare the two.
"""

from __future__ import annotations

import numpy as np
from numba import njit

RUNNING = 0
CONVERGED = 1
TIME_LIMIT = 2
STEP_COLLAPSE = 3
DIVERGED = 4
ITER_LIMIT = 5


# Below this size plain loops beat the BLAS call overhead.
BLAS_MIN_DIM = 8


@njit(cache=True, nogil=True)
def _mm(a, b, out):
    n, k = a.shape
    m = b.shape[1]
    if n >= BLAS_MIN_DIM:
        np.dot(a, b, out)
        return
    for i in range(n):
        for j in range(m):
            out[i, j] = 0.0
        for p in range(k):
            aip = a[i, p]
            if aip != 0.0:
                for j in range(m):
                    out[i, j] += aip * b[p, j]


@njit(cache=True, nogil=True)
def _mm_tn(a, b, out):
    # out = a.T @ b
    k, n = a.shape
    m = b.shape[1]
    if n >= BLAS_MIN_DIM:
        np.dot(a.T, b, out)
        return
    for i in range(n):
        for j in range(m):
            out[i, j] = 0.0
    for p in range(k):
        for i in range(n):
            api = a[p, i]
            if api != 0.0:
                for j in range(m):
                    out[i, j] += api * b[p, j]


@njit(cache=True, nogil=True)
def _partials(F, pre, suf, prod):
    L, d = F.shape[0], F.shape[1]
    for i in range(d):
        for j in range(d):
            pre[0, i, j] = 1.0 if i == j else 0.0
            suf[L - 1, i, j] = 1.0 if i == j else 0.0
    for l in range(1, L):
        _mm(F[l - 1], pre[l - 1], pre[l])
    for l in range(L - 2, -1, -1):
        _mm(suf[l + 1], F[l + 1], suf[l])
    _mm(suf[0], F[0], prod)


@njit(cache=True, nogil=True)
def chain_loss(F, rows, cols, targets, pre, suf, prod):
    _partials(F, pre, suf, prod)
    acc = 0.0
    for k in range(rows.size):
        r = prod[rows[k], cols[k]] - targets[k]
        acc += r * r
    return 0.5 * acc


@njit(cache=True, nogil=True)
def chain_gradient(F, rows, cols, targets, grad, pre, suf, prod, tmp):
    """Write dLoss/dW_l into ``grad`` and return the loss."""
    L, d = F.shape[0], F.shape[1]
    _partials(F, pre, suf, prod)
    acc = 0.0
    res = np.empty(rows.size)
    for k in range(rows.size):
        r = prod[rows[k], cols[k]] - targets[k]
        res[k] = r
        acc += r * r
    for l in range(L):
        # tmp = R @ pre[l].T, filled one observed residual at a time
        for i in range(d):
            for j in range(d):
                tmp[i, j] = 0.0
        for k in range(rows.size):
            r = res[k]
            if r != 0.0:
                i = rows[k]
                c = cols[k]
                for m in range(d):
                    tmp[i, m] += r * pre[l, m, c]
        _mm_tn(suf[l], tmp, grad[l])
    return 0.5 * acc


@njit(cache=True, nogil=True)
def _workspace(F):
    L, d = F.shape[0], F.shape[1]
    return (
        np.empty((L, d, d)),
        np.empty((L, d, d)),
        np.empty((d, d)),
        np.empty((d, d)),
    )


@njit(cache=True, nogil=True)
def flow_segment(F, rows, cols, targets, h, t, t_max, stop_loss, max_accept,
                 use_rk4, adaptive, min_step, slack_rel, slack_abs):
    """Advance gradient flow in place by at most ``max_accept`` accepted steps.

    Returns ``(t, h, loss, accepted, rejected, status)``. A step that raises
    the loss beyond the slack is rejected and the step is halved.
    """
    L, d = F.shape[0], F.shape[1]
    pre, suf, prod, tmp = _workspace(F)
    g = np.empty((L, d, d))
    g_new = np.empty((L, d, d))
    k2 = np.empty((L, d, d))
    k3 = np.empty((L, d, d))
    k4 = np.empty((L, d, d))
    stage = np.empty((L, d, d))
    F_new = np.empty((L, d, d))

    loss = chain_gradient(F, rows, cols, targets, g, pre, suf, prod, tmp)
    accepted = 0
    rejected = 0
    status = RUNNING
    if loss <= stop_loss:
        return t, h, loss, accepted, rejected, CONVERGED
    while accepted < max_accept:
        if t >= t_max:
            status = TIME_LIMIT
            break
        hh = h
        clipped = False
        if t + hh > t_max:
            hh = t_max - t
            clipped = True
        if use_rk4:
            for l in range(L):
                stage[l] = F[l] - 0.5 * hh * g[l]
            chain_gradient(stage, rows, cols, targets, k2, pre, suf, prod, tmp)
            for l in range(L):
                stage[l] = F[l] - 0.5 * hh * k2[l]
            chain_gradient(stage, rows, cols, targets, k3, pre, suf, prod, tmp)
            for l in range(L):
                stage[l] = F[l] - hh * k3[l]
            chain_gradient(stage, rows, cols, targets, k4, pre, suf, prod, tmp)
            for l in range(L):
                F_new[l] = F[l] - (hh / 6.0) * (g[l] + 2.0 * k2[l] + 2.0 * k3[l] + k4[l])
        else:
            for l in range(L):
                F_new[l] = F[l] - hh * g[l]
        loss_new = chain_gradient(F_new, rows, cols, targets, g_new, pre, suf, prod, tmp)
        if adaptive and not (loss_new <= loss * (1.0 + slack_rel) + slack_abs):
            rejected += 1
            h = 0.5 * hh
            if h < min_step:
                status = STEP_COLLAPSE
                break
            continue
        if not np.isfinite(loss_new):
            status = DIVERGED
            break
        F[:] = F_new
        g[:] = g_new
        loss = loss_new
        t = t + hh
        accepted += 1
        if clipped and t < t_max:
            t = t_max
        if loss <= stop_loss:
            status = CONVERGED
            break
    return t, h, loss, accepted, rejected, status


@njit(cache=True, nogil=True)
def gd_segment(F, rows, cols, targets, eta, max_iters, stop_loss):
    """Run at most ``max_iters`` plain gradient steps in place.

    Returns ``(loss, iterations, status)``.
    """
    L, d = F.shape[0], F.shape[1]
    pre, suf, prod, tmp = _workspace(F)
    g = np.empty((L, d, d))
    loss = chain_gradient(F, rows, cols, targets, g, pre, suf, prod, tmp)
    it = 0
    status = RUNNING
    while True:
        if loss <= stop_loss:
            status = CONVERGED
            break
        if not np.isfinite(loss):
            status = DIVERGED
            break
        if it >= max_iters:
            break
        for l in range(L):
            for i in range(d):
                for j in range(d):
                    F[l, i, j] -= eta * g[l, i, j]
        loss = chain_gradient(F, rows, cols, targets, g, pre, suf, prod, tmp)
        it += 1
    return loss, it, status
