"""Loop-heavy numeric kernels with a numba fast path and a numpy fallback.

The backend is chosen once at import time: numba is used when it imports
cleanly and the environment variable ``HARMONY_NUMBA`` is not set to
``0``/``false``/``off``. Both backends implement identical arithmetic, so
either one satisfies the same accuracy contracts; ``benchmarks/bench_kernels.py``
compares their speed.
"""

from __future__ import annotations

import math
import os

import numpy as np

_flag = os.environ.get("HARMONY_NUMBA", "1").strip().lower()
NUMBA_REQUESTED = _flag not in ("0", "false", "off", "no")

if NUMBA_REQUESTED:
    try:
        from numba import njit

        HAVE_NUMBA = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        HAVE_NUMBA = False
else:
    HAVE_NUMBA = False

USING_NUMBA = HAVE_NUMBA

#: off-diagonal Frobenius norm below which the Jacobi sweep stops
JACOBI_TOL = 1e-12
_JACOBI_MAX_SWEEPS = 64


def _jacobi_rotation(app: float, aqq: float, apq: float):
    """Givens parameters (c, s, t) annihilating the (p, q) entry."""
    theta = (aqq - app) / (2.0 * apq)
    if theta >= 0.0:
        t = 1.0 / (theta + math.sqrt(theta * theta + 1.0))
    else:
        t = -1.0 / (-theta + math.sqrt(theta * theta + 1.0))
    c = 1.0 / math.sqrt(t * t + 1.0)
    return c, t * c, t


def jacobi_eigh_numpy(a: np.ndarray):
    """Cyclic Jacobi eigendecomposition, vectorized row/column updates."""
    n = a.shape[0]
    mat = np.array(a, dtype=np.float64, copy=True)
    vec = np.eye(n)
    for _ in range(_JACOBI_MAX_SWEEPS):
        off = mat.copy()
        np.fill_diagonal(off, 0.0)
        if math.sqrt(float(np.sum(off * off))) < JACOBI_TOL:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = mat[p, q]
                if apq == 0.0:
                    continue
                c, s, _ = _jacobi_rotation(mat[p, p], mat[q, q], apq)
                rot = np.array([[c, s], [-s, c]])
                mat[:, [p, q]] = mat[:, [p, q]] @ rot
                mat[[p, q], :] = rot.T @ mat[[p, q], :]
                mat[p, q] = 0.0
                mat[q, p] = 0.0
                vec[:, [p, q]] = vec[:, [p, q]] @ rot
    order = np.argsort(np.diag(mat), kind="stable")
    return np.diag(mat)[order].copy(), vec[:, order].copy()


def levenshtein_numpy(a: np.ndarray, b: np.ndarray) -> int:
    """Edit distance between two integer code arrays, row-vectorized DP."""
    if a.shape[0] == 0:
        return int(b.shape[0])
    if b.shape[0] == 0:
        return int(a.shape[0])
    lb = b.shape[0]
    idx = np.arange(lb + 1)
    prev = idx.copy()
    for i in range(1, a.shape[0] + 1):
        sub = prev[:-1] + (b != a[i - 1])
        cand = np.empty(lb + 1, dtype=np.int64)
        cand[0] = i
        np.minimum(prev[1:] + 1, sub, out=cand[1:])
        # left-to-right insertion chain: row[j] = min(cand[j], row[j-1] + 1)
        prev = np.minimum.accumulate(cand - idx) + idx
    return int(prev[-1])


if USING_NUMBA:

    @njit(cache=True)
    def jacobi_eigh_numba(a):  # pragma: no cover - exercised via dispatch
        n = a.shape[0]
        mat = a.copy()
        vec = np.eye(n)
        for _ in range(_JACOBI_MAX_SWEEPS):
            off = 0.0
            for i in range(n):
                for j in range(n):
                    if i != j:
                        off += mat[i, j] * mat[i, j]
            if math.sqrt(off) < JACOBI_TOL:
                break
            for p in range(n - 1):
                for q in range(p + 1, n):
                    apq = mat[p, q]
                    if apq == 0.0:
                        continue
                    theta = (mat[q, q] - mat[p, p]) / (2.0 * apq)
                    if theta >= 0.0:
                        t = 1.0 / (theta + math.sqrt(theta * theta + 1.0))
                    else:
                        t = -1.0 / (-theta + math.sqrt(theta * theta + 1.0))
                    c = 1.0 / math.sqrt(t * t + 1.0)
                    s = t * c
                    for i in range(n):
                        mip = mat[i, p]
                        miq = mat[i, q]
                        mat[i, p] = c * mip - s * miq
                        mat[i, q] = s * mip + c * miq
                    for i in range(n):
                        mpi = mat[p, i]
                        mqi = mat[q, i]
                        mat[p, i] = c * mpi - s * mqi
                        mat[q, i] = s * mpi + c * mqi
                    mat[p, q] = 0.0
                    mat[q, p] = 0.0
                    for i in range(n):
                        vip = vec[i, p]
                        viq = vec[i, q]
                        vec[i, p] = c * vip - s * viq
                        vec[i, q] = s * vip + c * viq
        diag = np.empty(n)
        for i in range(n):
            diag[i] = mat[i, i]
        order = np.argsort(diag)
        return diag[order].copy(), vec[:, order].copy()

    @njit(cache=True)
    def levenshtein_numba(a, b):  # pragma: no cover - exercised via dispatch
        la = a.shape[0]
        lb = b.shape[0]
        if la == 0:
            return lb
        if lb == 0:
            return la
        prev = np.arange(lb + 1)
        cur = np.empty(lb + 1, dtype=np.int64)
        for i in range(1, la + 1):
            cur[0] = i
            for j in range(1, lb + 1):
                cost = 0 if a[i - 1] == b[j - 1] else 1
                best = prev[j] + 1
                if cur[j - 1] + 1 < best:
                    best = cur[j - 1] + 1
                if prev[j - 1] + cost < best:
                    best = prev[j - 1] + cost
                cur[j] = best
            prev, cur = cur, prev
        return int(prev[lb])

else:
    jacobi_eigh_numba = None
    levenshtein_numba = None


def jacobi_eigh(a: np.ndarray):
    """Eigendecomposition of a symmetric matrix on the active backend.

    Returns (eigenvalues ascending, eigenvectors as columns).
    """
    if USING_NUMBA:
        return jacobi_eigh_numba(np.ascontiguousarray(a, dtype=np.float64))
    return jacobi_eigh_numpy(a)


def levenshtein(a: str, b: str) -> int:
    """Edit distance between two strings on the active backend."""
    ca = np.array([ord(ch) for ch in a], dtype=np.int64)
    cb = np.array([ord(ch) for ch in b], dtype=np.int64)
    if USING_NUMBA:
        return int(levenshtein_numba(ca, cb))
    return levenshtein_numpy(ca, cb)
