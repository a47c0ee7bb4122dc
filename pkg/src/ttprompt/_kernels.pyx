"""Compiled kernels: naive-order matmul and batched tensor-train chains.

Every loop accumulates in the same order as ``_kernels_py`` so the two
backends agree bitwise. Built without FMA contraction (see setup.py).
"""
import numpy as np


def matmul(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], m = a.shape[1], p = b.shape[1]
    cdef Py_ssize_t i, l, j
    cdef double ail
    out = np.zeros((n, p), dtype=np.float64)
    cdef double[:, ::1] o = out
    for i in range(n):
        for l in range(m):
            ail = a[i, l]
            for j in range(p):
                o[i, j] += ail * b[l, j]
    return out


def tt_forward(const double[:, :, :, ::1] cores, const long long[::1] ranks,
               const double[:, ::1] terminal, const long long[::1] patterns):
    cdef Py_ssize_t n = cores.shape[0], rmax = cores.shape[2]
    cdef Py_ssize_t k = terminal.shape[1], npat = patterns.shape[0]
    cdef Py_ssize_t p, l, i, j, r0, r1, s
    cdef long long pat
    out = np.zeros((npat, k), dtype=np.float64)
    cdef double[:, ::1] o = out
    left_arr = np.zeros(rmax if rmax > 0 else 1, dtype=np.float64)
    new_arr = np.zeros(rmax if rmax > 0 else 1, dtype=np.float64)
    cdef double[::1] left = left_arr
    cdef double[::1] new = new_arr
    cdef double li
    for p in range(npat):
        pat = patterns[p]
        left[0] = 1.0
        for l in range(n):
            r0 = ranks[l]
            r1 = ranks[l + 1]
            s = (pat >> l) & 1
            for j in range(r1):
                new[j] = 0.0
            for i in range(r0):
                li = left[i]
                for j in range(r1):
                    new[j] += li * cores[l, s, i, j]
            for j in range(r1):
                left[j] = new[j]
        r0 = ranks[n]
        for i in range(r0):
            li = left[i]
            for j in range(k):
                o[p, j] += li * terminal[i, j]
    return out


def tt_backward(const double[:, :, :, ::1] cores, const long long[::1] ranks,
                const double[:, ::1] terminal, const long long[::1] patterns,
                const double[:, ::1] dbeta):
    cdef Py_ssize_t n = cores.shape[0], rmax = cores.shape[2]
    cdef Py_ssize_t k = terminal.shape[1], npat = patterns.shape[0]
    cdef Py_ssize_t p, l, i, j, r0, r1, s
    cdef long long pat
    dcores_arr = np.zeros((cores.shape[0], 2, rmax, rmax), dtype=np.float64)
    dterm_arr = np.zeros((terminal.shape[0], k), dtype=np.float64)
    cdef double[:, :, :, ::1] dcores = dcores_arr
    cdef double[:, ::1] dterm = dterm_arr
    lefts_arr = np.zeros((n + 1, rmax if rmax > 0 else 1), dtype=np.float64)
    g_arr = np.zeros(rmax if rmax > 0 else 1, dtype=np.float64)
    gn_arr = np.zeros(rmax if rmax > 0 else 1, dtype=np.float64)
    cdef double[:, ::1] lefts = lefts_arr
    cdef double[::1] g = g_arr
    cdef double[::1] gn = gn_arr
    cdef double li, acc
    for p in range(npat):
        pat = patterns[p]
        lefts[0, 0] = 1.0
        for l in range(n):
            r0 = ranks[l]
            r1 = ranks[l + 1]
            s = (pat >> l) & 1
            for j in range(r1):
                lefts[l + 1, j] = 0.0
            for i in range(r0):
                li = lefts[l, i]
                for j in range(r1):
                    lefts[l + 1, j] += li * cores[l, s, i, j]
        r0 = ranks[n]
        for i in range(r0):
            for j in range(k):
                dterm[i, j] += lefts[n, i] * dbeta[p, j]
        for i in range(r0):
            acc = 0.0
            for j in range(k):
                acc += terminal[i, j] * dbeta[p, j]
            g[i] = acc
        for l in range(n - 1, -1, -1):
            r0 = ranks[l]
            r1 = ranks[l + 1]
            s = (pat >> l) & 1
            for i in range(r0):
                for j in range(r1):
                    dcores[l, s, i, j] += lefts[l, i] * g[j]
            for i in range(r0):
                acc = 0.0
                for j in range(r1):
                    acc += cores[l, s, i, j] * g[j]
                gn[i] = acc
            for i in range(r0):
                g[i] = gn[i]
    return dcores_arr, dterm_arr
