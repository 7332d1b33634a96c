"""Numeric inner loops: mini-batch softmax training and the greedy KL scan.

Each kernel exists twice. ``*_jit`` is a loop nest compiled by numba;
``*_np`` is the vectorised numpy fallback. The public names dispatch on
``fedselect._accel.USE_NUMBA`` at import time. Both paths consume the same
pre-drawn permutations so they agree to floating-point rounding.
"""

from __future__ import annotations

import math

import numpy as np

from . import _accel
from ._accel import njit

__all__ = [
    "softmax_xent_grad",
    "train_epochs",
    "greedy_kl_scores",
    "train_epochs_np",
    "train_epochs_jit",
    "greedy_kl_scores_np",
    "greedy_kl_scores_jit",
]


def softmax_xent_grad(W, b, X, y):
    """Mean softmax cross-entropy over ``(X, y)`` and its gradient.

    Returns ``(loss, dW, db)``. Reference implementation used by tests and by
    the central reference model; the kernels inline the same arithmetic.
    """
    z = X @ W + b
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    s = ez.sum(axis=1, keepdims=True)
    p = ez / s
    n = X.shape[0]
    loss = float(np.mean(np.log(s[:, 0]) - z[np.arange(n), y]))
    p[np.arange(n), y] -= 1.0
    p /= n
    return loss, X.T @ p, p.sum(axis=0)


# --------------------------------------------------------------------------
# local training
# --------------------------------------------------------------------------

def train_epochs_np(W, b, X, y, order, batch_size, lr, adam, beta1, beta2, eps):
    """Mini-batch descent over the rows of ``order`` (one row per epoch).

    ``W`` and ``b`` are updated in place. With ``adam`` true the update is
    Adam with bias correction and a fresh moment state.
    """
    n = X.shape[0]
    mW = np.zeros_like(W)
    vW = np.zeros_like(W)
    mb = np.zeros_like(b)
    vb = np.zeros_like(b)
    step = 0
    for epoch in range(order.shape[0]):
        perm = order[epoch]
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            _, gW, gb = softmax_xent_grad(W, b, X[idx], y[idx])
            if adam:
                step += 1
                mW *= beta1
                mW += (1.0 - beta1) * gW
                vW *= beta2
                vW += (1.0 - beta2) * gW * gW
                mb *= beta1
                mb += (1.0 - beta1) * gb
                vb *= beta2
                vb += (1.0 - beta2) * gb * gb
                c1 = 1.0 - beta1 ** step
                c2 = 1.0 - beta2 ** step
                W -= lr * (mW / c1) / (np.sqrt(vW / c2) + eps)
                b -= lr * (mb / c1) / (np.sqrt(vb / c2) + eps)
            else:
                W -= lr * gW
                b -= lr * gb
    return W, b


@njit
def train_epochs_jit(W, b, X, y, order, batch_size, lr, adam, beta1, beta2, eps):
    n, d = X.shape
    C = W.shape[1]
    gW = np.zeros((d, C))
    gb = np.zeros(C)
    mW = np.zeros((d, C))
    vW = np.zeros((d, C))
    mb = np.zeros(C)
    vb = np.zeros(C)
    z = np.zeros(C)
    step = 0
    for epoch in range(order.shape[0]):
        for start in range(0, n, batch_size):
            stop = min(start + batch_size, n)
            m = stop - start
            gW[:, :] = 0.0
            gb[:] = 0.0
            for r in range(start, stop):
                i = order[epoch, r]
                zmax = -np.inf
                for c in range(C):
                    acc = b[c]
                    for k in range(d):
                        acc += X[i, k] * W[k, c]
                    z[c] = acc
                    if acc > zmax:
                        zmax = acc
                s = 0.0
                for c in range(C):
                    z[c] = math.exp(z[c] - zmax)
                    s += z[c]
                for c in range(C):
                    g = z[c] / s
                    if c == y[i]:
                        g -= 1.0
                    g /= m
                    gb[c] += g
                    for k in range(d):
                        gW[k, c] += X[i, k] * g
            if adam:
                step += 1
                c1 = 1.0 - beta1 ** step
                c2 = 1.0 - beta2 ** step
                for c in range(C):
                    mb[c] = beta1 * mb[c] + (1.0 - beta1) * gb[c]
                    vb[c] = beta2 * vb[c] + (1.0 - beta2) * gb[c] * gb[c]
                    b[c] -= lr * (mb[c] / c1) / (math.sqrt(vb[c] / c2) + eps)
                    for k in range(d):
                        mW[k, c] = beta1 * mW[k, c] + (1.0 - beta1) * gW[k, c]
                        vW[k, c] = beta2 * vW[k, c] + (1.0 - beta2) * gW[k, c] * gW[k, c]
                        W[k, c] -= lr * (mW[k, c] / c1) / (math.sqrt(vW[k, c] / c2) + eps)
            else:
                for c in range(C):
                    b[c] -= lr * gb[c]
                    for k in range(d):
                        W[k, c] -= lr * gW[k, c]
    return W, b


# --------------------------------------------------------------------------
# greedy selection scan
# --------------------------------------------------------------------------

def greedy_kl_scores_np(current, candidates, taken):
    """KL(merge(current, candidate) || uniform) for every candidate row.

    ``current`` is the summed class-count vector of the tentative set and
    ``candidates`` the per-client count matrix. Rows flagged in ``taken`` get
    ``inf``.
    """
    C = candidates.shape[1]
    merged = candidates + current[None, :]
    p = merged / merged.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p * C), 0.0)
    out = terms.sum(axis=1)
    out[taken] = np.inf
    return out


@njit
def greedy_kl_scores_jit(current, candidates, taken):
    N, C = candidates.shape
    out = np.empty(N)
    for k in range(N):
        if taken[k]:
            out[k] = np.inf
            continue
        tot = 0.0
        for c in range(C):
            tot += candidates[k, c] + current[c]
        acc = 0.0
        for c in range(C):
            p = (candidates[k, c] + current[c]) / tot
            if p > 0.0:
                acc += p * math.log(p * C)
        out[k] = acc
    return out


if _accel.USE_NUMBA:
    train_epochs = train_epochs_jit
    greedy_kl_scores = greedy_kl_scores_jit
else:
    train_epochs = train_epochs_np
    greedy_kl_scores = greedy_kl_scores_np
