"""Matérn-5/2 covariance and its adjoint as numba loops.

Inputs are stacks ``X1`` (batch, n, d) and ``X2`` (batch, m, d), float64,
C-contiguous; the scaled squared distance is ``s = 5 |x1 - x2|^2 / l^2``.
"""

import numba
import numpy as np


@numba.njit(cache=True)
def matern52_fwd(X1, X2, inv_ls2, var):
    nb, n, d = X1.shape
    m = X2.shape[1]
    K = np.empty((nb, n, m))
    for b in range(nb):
        for i in range(n):
            for j in range(m):
                acc = 0.0
                for k in range(d):
                    t = X1[b, i, k] - X2[b, j, k]
                    acc += t * t
                s = 5.0 * inv_ls2 * acc
                r = np.sqrt(s)
                K[b, i, j] = var * (1.0 + r + s / 3.0) * np.exp(-r)
    return K


@numba.njit(cache=True)
def matern52_bwd(G, X1, X2, inv_ls2, var):
    # dK/ds = -var e^{-r} (1 + r) / 6; returns grads for X1, X2 and the
    # sums  sum(dK/ds * s * G)  and  sum(K * G)  for the log hyperparameters
    nb, n, d = X1.shape
    m = X2.shape[1]
    g1 = np.zeros_like(X1)
    g2 = np.zeros_like(X2)
    gs_s = 0.0
    gk = 0.0
    for b in range(nb):
        for i in range(n):
            for j in range(m):
                acc = 0.0
                for k in range(d):
                    t = X1[b, i, k] - X2[b, j, k]
                    acc += t * t
                s = 5.0 * inv_ls2 * acc
                r = np.sqrt(s)
                e = np.exp(-r)
                g = G[b, i, j]
                gk += g * var * (1.0 + r + s / 3.0) * e
                gs = -g * var * e * (1.0 + r) / 6.0
                gs_s += gs * s
                c = gs * 10.0 * inv_ls2
                for k in range(d):
                    t = c * (X1[b, i, k] - X2[b, j, k])
                    g1[b, i, k] += t
                    g2[b, j, k] -= t
    return g1, g2, gs_s, gk
