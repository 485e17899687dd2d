"""Batched dense triangular kernels (numba).

All functions take stacks of square matrices shaped (batch, m, m) and
right-hand sides shaped (batch, m, k), float64, C-contiguous.
"""

import numba
import numpy as np


@numba.njit(cache=True)
def _cholesky(A, L):
    # returns (batch index, pivot index) of the first failure, or (-1, -1)
    nb, m, _ = A.shape
    for b in range(nb):
        Ab = A[b]
        Lb = L[b]
        for j in range(m):
            s = Ab[j, j]
            for t in range(j):
                s -= Lb[j, t] * Lb[j, t]
            if not s > 0.0:
                return b, j
            d = np.sqrt(s)
            Lb[j, j] = d
            inv = 1.0 / d
            for i in range(j + 1, m):
                s = Ab[i, j]
                for t in range(j):
                    s -= Lb[i, t] * Lb[j, t]
                Lb[i, j] = s * inv
    return -1, -1


@numba.njit(cache=True)
def _tri_inv(L, X):
    nb, m, _ = L.shape
    for b in range(nb):
        Lb = L[b]
        Xb = X[b]
        for i in range(m):
            inv = 1.0 / Lb[i, i]
            Xb[i, i] = inv
            for t in range(i):
                c = Lb[i, t]
                for j in range(t + 1):
                    Xb[i, j] -= c * Xb[t, j]
            for j in range(i):
                Xb[i, j] *= inv


@numba.njit(cache=True)
def _solve_lower(L, X):
    # in place: X <- L^{-1} X
    nb, m, k = X.shape
    for b in range(nb):
        Lb = L[b]
        Xb = X[b]
        for i in range(m):
            for t in range(i):
                c = Lb[i, t]
                for j in range(k):
                    Xb[i, j] -= c * Xb[t, j]
            inv = 1.0 / Lb[i, i]
            for j in range(k):
                Xb[i, j] *= inv


@numba.njit(cache=True)
def _solve_lower_t(L, X):
    # in place: X <- L^{-T} X
    nb, m, k = X.shape
    for b in range(nb):
        Lb = L[b]
        Xb = X[b]
        for i in range(m - 1, -1, -1):
            for t in range(i + 1, m):
                c = Lb[t, i]
                for j in range(k):
                    Xb[i, j] -= c * Xb[t, j]
            inv = 1.0 / Lb[i, i]
            for j in range(k):
                Xb[i, j] *= inv


def _stack(a, ndim_core):
    a = np.ascontiguousarray(a, dtype=np.float64)
    batch = a.shape[:-ndim_core]
    return a.reshape((-1,) + a.shape[-ndim_core:]), batch


def cholesky(A):
    """Lower Cholesky factor of each matrix in ``A``.

    Returns ``(L, batch_index, pivot)``; ``batch_index`` is -1 on success,
    otherwise the flat index of the first matrix that is not positive
    definite and ``pivot`` the failing column.
    """
    A3, batch = _stack(A, 2)
    L = np.zeros_like(A3)
    b, j = _cholesky(A3, L)
    return L.reshape(batch + A3.shape[1:]), int(b), int(j)


def tri_inv(L):
    L3, batch = _stack(L, 2)
    X = np.zeros_like(L3)
    _tri_inv(L3, X)
    return X.reshape(batch + L3.shape[1:])


def solve_lower(L, B):
    """``L^{-1} B`` with ``L`` and ``B`` sharing leading batch dimensions."""
    L3, _ = _stack(L, 2)
    X = np.array(B, dtype=np.float64, order="C", copy=True)
    shape = X.shape
    _solve_lower(L3, X.reshape((-1,) + shape[-2:]))
    return X


def solve_lower_t(L, B):
    """``L^{-T} B`` with ``L`` lower triangular."""
    L3, _ = _stack(L, 2)
    X = np.array(B, dtype=np.float64, order="C", copy=True)
    shape = X.shape
    _solve_lower_t(L3, X.reshape((-1,) + shape[-2:]))
    return X
