# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Must stay bit-compatible with ``_fallback.py``."""

import numpy as np
from libc.math cimport fabs, sqrt
from libc.stdint cimport uint64_t


cdef uint64_t FNV_OFFSET = 0xcbf29ce484222325ULL
cdef uint64_t FNV_PRIME = 0x100000001b3ULL


def fnv1a64(bytes data):
    cdef uint64_t h = FNV_OFFSET
    cdef const unsigned char[:] buf = data
    cdef Py_ssize_t i
    for i in range(buf.shape[0]):
        h ^= buf[i]
        h *= FNV_PRIME
    return h


def topk_mask_rows(double[:, ::1] g, int k):
    cdef Py_ssize_t n = g.shape[0], e = g.shape[1]
    cdef Py_ssize_t r, j, t, best
    cdef double bv
    out = np.zeros((n, e), dtype=np.float64)
    cdef double[:, ::1] m = out
    for r in range(n):
        for t in range(k):
            best = -1
            bv = 0.0
            for j in range(e):
                if m[r, j] != 0.0:
                    continue
                # strict '>' keeps the lowest index among equal scores
                if best < 0 or g[r, j] > bv:
                    best = j
                    bv = g[r, j]
            m[r, best] = 1.0
    return out


def moving_average(double[::1] x, int k):
    cdef Py_ssize_t n = x.shape[0], half = (k - 1) // 2
    cdef Py_ssize_t i, j, src
    cdef double acc
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] tr = out
    for i in range(n):
        acc = 0.0
        for j in range(k):
            src = i - half + j
            if src < 0:
                src = 0
            elif src >= n:
                src = n - 1
            if j == 0:
                acc = x[src]
            else:
                acc = acc + x[src]
        tr[i] = acc / k
    return out


def jacobi_eigvalsh(a_in, double tol=1e-14, int max_sweeps=100):
    cdef double[:, ::1] a = np.array(a_in, dtype=np.float64, order="C", copy=True)
    cdef Py_ssize_t n = a.shape[0], p, q, r
    cdef int sweep
    cdef double off, total, theta, t, c, s, apq, app, aqq, arp, arq
    for sweep in range(max_sweeps):
        off = 0.0
        total = 0.0
        for p in range(n):
            for q in range(n):
                total += a[p, q] * a[p, q]
                if p != q:
                    off += a[p, q] * a[p, q]
        if off <= tol * tol * total or off == 0.0:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                app = a[p, p]
                aqq = a[q, q]
                theta = (aqq - app) / (2.0 * apq)
                if fabs(theta) > 1e150:
                    t = 0.5 / theta  # theta^2 would overflow
                elif theta >= 0.0:
                    t = 1.0 / (theta + sqrt(theta * theta + 1.0))
                else:
                    t = -1.0 / (-theta + sqrt(theta * theta + 1.0))
                c = 1.0 / sqrt(t * t + 1.0)
                s = t * c
                for r in range(n):
                    arp = a[r, p]
                    arq = a[r, q]
                    a[r, p] = c * arp - s * arq
                    a[r, q] = s * arp + c * arq
                for r in range(n):
                    arp = a[p, r]
                    arq = a[q, r]
                    a[p, r] = c * arp - s * arq
                    a[q, r] = s * arp + c * arq
    vals = np.empty(n, dtype=np.float64)
    for p in range(n):
        vals[p] = a[p, p]
    vals.sort()
    return vals
