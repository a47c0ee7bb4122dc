"""Numpy fallback for the compiled kernels.

Loops are vectorized over rows/patterns but keep the inner accumulation
order of the compiled version, so both backends return identical bits.
"""
import numpy as np


def matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for l in range(a.shape[1]):
        out += a[:, l : l + 1] * b[l : l + 1, :]
    return out


def _chain_lefts(cores, ranks, patterns):
    n = cores.shape[0]
    lefts = [np.ones((patterns.shape[0], 1))]
    for l in range(n):
        r0, r1 = ranks[l], ranks[l + 1]
        bits = (patterns >> l) & 1
        slices = cores[l, bits, :r0, :r1]
        new = np.zeros((patterns.shape[0], r1))
        for i in range(r0):
            new += lefts[-1][:, i : i + 1] * slices[:, i, :]
        lefts.append(new)
    return lefts


def tt_forward(cores, ranks, terminal, patterns):
    left = _chain_lefts(cores, ranks, patterns)[-1]
    out = np.zeros((patterns.shape[0], terminal.shape[1]))
    for i in range(ranks[-1]):
        out += left[:, i : i + 1] * terminal[i][None, :]
    return out


def tt_backward(cores, ranks, terminal, patterns, dbeta):
    n, npat = cores.shape[0], patterns.shape[0]
    lefts = _chain_lefts(cores, ranks, patterns)
    dcores = np.zeros((n, 2, cores.shape[2], cores.shape[3]))
    dterm = np.zeros(terminal.shape)

    # np.add.at accumulates sequentially in pattern order
    outer = lefts[n][:, :, None] * dbeta[:, None, :]
    np.add.at(dterm[None], np.zeros(npat, dtype=np.intp), outer)
    g = np.zeros((npat, ranks[n]))
    for j in range(terminal.shape[1]):
        g += terminal[None, :, j] * dbeta[:, j : j + 1]

    for l in range(n - 1, -1, -1):
        r0, r1 = ranks[l], ranks[l + 1]
        bits = (patterns >> l) & 1
        slices = cores[l, bits, :r0, :r1]
        outer = lefts[l][:, :, None] * g[:, None, :]
        np.add.at(dcores[l, :, :r0, :r1], bits, outer)
        gn = np.zeros((npat, r0))
        for j in range(r1):
            gn += slices[:, :, j] * g[:, j : j + 1]
        g = gn
    return dcores, dterm
