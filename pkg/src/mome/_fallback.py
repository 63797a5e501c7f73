"""Pure-Python/numpy versions of the compiled kernels in ``_kernels.pyx``.

Loop order is kept identical to the compiled code so both backends produce
bit-identical results for ``topk_mask_rows``, ``moving_average`` and
``fnv1a64``. ``jacobi_eigvalsh`` agrees to rounding.
"""

import math

import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & _MASK64
    return h


def topk_mask_rows(g, k):
    g = np.ascontiguousarray(g, dtype=np.float64)
    n, e = g.shape
    out = np.zeros((n, e), dtype=np.float64)
    if n == 0:
        return out
    # stable sort on -g keeps the lowest index first among ties
    idx = np.argsort(-g, axis=1, kind="stable")[:, :k]
    np.put_along_axis(out, idx, 1.0, axis=1)
    return out


def moving_average(x, k):
    x = np.ascontiguousarray(x, dtype=np.float64)
    n = x.shape[0]
    half = (k - 1) // 2
    padded = np.concatenate([np.full(half, x[0]), x, np.full(k - 1 - half, x[-1])])
    acc = padded[0:n].copy()
    for j in range(1, k):
        acc = acc + padded[j:j + n]
    return acc / k


def jacobi_eigvalsh(a_in, tol=1e-14, max_sweeps=100):
    with np.errstate(over="ignore"):
        return _jacobi(np.array(a_in, dtype=np.float64, copy=True), tol, max_sweeps)


def _jacobi(a, tol, max_sweeps):
    n = a.shape[0]
    for _ in range(max_sweeps):
        total = float(np.sum(a * a))
        off = total - float(np.sum(np.diag(a) ** 2))
        if off <= tol * tol * total or off == 0.0:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta  # theta^2 would overflow
                elif theta >= 0.0:
                    t = 1.0 / (theta + math.sqrt(theta * theta + 1.0))
                else:
                    t = -1.0 / (-theta + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
    return np.sort(np.diag(a).copy())
