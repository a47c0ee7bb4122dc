"""Dense numerical kernel: matrix ops, seeded randomness, parameters, Adam.

Randomness
----------
All sampling flows from one integer seed. ``Rng(seed).stream(purpose)``
returns an independent ``numpy.random.Generator`` backed by the counter-based
Philox generator, keyed by ``SeedSequence(seed, spawn_key=(index,))`` where
``index`` is the position of ``purpose`` in :data:`STREAMS`. The order of
:data:`STREAMS` is part of the reproducibility contract; append, never reorder.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import kernels
from .errors import NumericalError, ShapeError

STREAMS = ("split", "partition", "missing", "init", "batches", "dcl", "data", "probe")


class Rng:
    """Seeded root stream split into named, independent sub-streams."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF

    def stream(self, purpose: str, *extra: int) -> np.random.Generator:
        if purpose not in STREAMS:
            raise KeyError(f"unknown rng purpose {purpose!r}")
        key = (STREAMS.index(purpose),) + tuple(int(e) for e in extra)
        ss = np.random.SeedSequence(self.seed, spawn_key=key)
        return np.random.Generator(np.random.Philox(ss))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with naive row-major, left-to-right accumulation."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return kernels.matmul(a, b)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_rows(x):
    """Softmax over the last axis, stabilized by subtracting the row max."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ParamTensor:
    """A trainable array with its gradient, freeze flag and Adam moments."""

    value: np.ndarray
    trainable: bool = True
    frozen: bool = False
    grad: np.ndarray | None = None
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value) if self.grad is None else self.grad

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def reset_optimizer(self):
        self.m = None
        self.v = None


def adam_step(params: Iterable[ParamTensor], lr: float, betas=(0.9, 0.999),
              eps: float = 1e-8, step: int = 1) -> None:
    """Apply one bias-corrected Adam update in place. Frozen params are skipped."""
    b1, b2 = betas
    for p in params:
        if p.frozen or not p.trainable:
            continue
        g = p.grad
        if g is None or g.shape != p.value.shape:
            raise ShapeError(f"grad shape {None if g is None else g.shape} != value shape {p.value.shape}")
        if p.m is None:
            p.m = np.zeros_like(p.value)
            p.v = np.zeros_like(p.value)
        p.m = b1 * p.m + (1.0 - b1) * g
        p.v = b2 * p.v + (1.0 - b2) * g * g
        m_hat = p.m / (1.0 - b1**step)
        v_hat = p.v / (1.0 - b2**step)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)


def finite_diff_grad(loss_fn: Callable[[ParamTensor], float], param: ParamTensor,
                     h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``loss_fn`` w.r.t. every entry of ``param``.

    ``param.value`` is perturbed in place and restored exactly after each probe.
    """
    if h <= 0:
        raise ValueError("finite difference step must be positive")
    grad = np.zeros_like(param.value)
    flat = param.value.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(loss_fn(param))
        flat[i] = orig - h
        fm = float(loss_fn(param))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"non-finite loss while probing entry {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> float:
    """Norm-wise relative error ``|a - f| / max(|a|, |f|, floor)``.

    The floor keeps blocks whose true gradient is zero (e.g. the key half of an
    additive prompt, which softmax shift-invariance cancels) from dividing noise
    by noise.
    """
    diff = np.linalg.norm(np.ravel(analytic) - np.ravel(numeric))
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(diff / scale)


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)
