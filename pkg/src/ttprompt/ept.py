"""Missing-aware prompt banks.

A missing-view pattern is a length-``n`` 0/1 vector (bit ``v`` set iff view
``v`` is observed). Patterns are indexed by ``sum(bits[v] << v)``, so view 0
is the least significant bit and the all-missing pattern is index 0. Index 0
lives in the bank's index space but is never a valid sample indicator.

Three banks share one interface (``prompts`` / ``backward`` / ``params``):

* :class:`EptBank` generates the prompt for pattern ``m`` as ``A @ beta_m`` where
  ``beta_m`` is a tensor-train chain ``G_1(m_1) ... G_n(m_n) @ G_end``.
* :class:`DenseBank` stores one column per pattern.
* :class:`PerViewBank` sums one prompt per observed view.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import CapacityError, ConfigError, ShapeError, ValidationError
from .numcore import ParamTensor, matmul

MATERIALIZE_BUDGET = 2**26


def pattern_index(bits) -> int:
    bits = np.asarray(bits).astype(np.int64).ravel()
    if np.any((bits != 0) & (bits != 1)):
        raise ValidationError(f"pattern must be 0/1, got {bits.tolist()}")
    return int(sum(int(b) << v for v, b in enumerate(bits)))


def pattern_bits(index: int, n: int) -> np.ndarray:
    return np.array([(int(index) >> v) & 1 for v in range(n)], dtype=np.int64)


def indices_from_mask(mask: np.ndarray) -> np.ndarray:
    """Row-wise pattern indices for an ``N x n`` indicator matrix."""
    mask = np.asarray(mask).astype(np.int64)
    return (mask << np.arange(mask.shape[1], dtype=np.int64)).sum(axis=1)


def bits_matrix(indices, n: int) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    return ((indices[:, None] >> np.arange(n, dtype=np.int64)) & 1).astype(np.float64)


def check_sample_pattern(bits) -> None:
    if not np.any(np.asarray(bits) != 0):
        raise ValidationError("all-views-missing pattern is not a valid sample indicator")


def _as_indices(patterns, n: int) -> np.ndarray:
    arr = np.asarray(patterns)
    if arr.ndim == 2:
        if arr.shape[1] != n:
            raise ShapeError(f"pattern length {arr.shape[1]} != bank view count {n}")
        return indices_from_mask(arr)
    arr = arr.astype(np.int64).ravel()
    if np.any(arr < 0) or np.any(arr >= (1 << n)):
        raise ShapeError(f"pattern index out of range for n={n}")
    return arr


class _Bank:
    n: int
    d: int

    def prompt(self, bits) -> np.ndarray:
        bits = np.asarray(bits)
        if bits.ndim != 1 or bits.shape[0] != self.n:
            raise ShapeError(f"pattern length {bits.shape} does not match bank n={self.n}")
        return self.prompts([pattern_index(bits)])[:, 0]

    def materialize_all(self) -> np.ndarray:
        size = (1 << self.n) * self.d
        if size > MATERIALIZE_BUDGET:
            raise CapacityError(
                f"materializing 2^{self.n} x {self.d} = {size} values exceeds the budget "
                f"of {MATERIALIZE_BUDGET}; subsample patterns instead"
            )
        return self.prompts(np.arange(1 << self.n, dtype=np.int64))

    def named_params(self) -> dict[str, ParamTensor]:
        raise NotImplementedError


class EptBank(_Bank):
    """Low-rank basis times tensor-train coefficients."""

    kind = "ept"

    def __init__(self, basis: np.ndarray, cores: list[np.ndarray], terminal: np.ndarray):
        self.basis = ParamTensor(basis)
        self.cores = [ParamTensor(c) for c in cores]
        self.terminal = ParamTensor(terminal)
        self.validate()

    @classmethod
    def init(cls, n: int, d: int, k: int, ranks, rng: np.random.Generator) -> "EptBank":
        ranks = normalize_ranks(ranks, n)
        basis = rng.normal(0.0, 0.02, size=(d, k))
        # variance-preserving chain: each slice keeps E|left|^2 constant
        cores = [rng.normal(0.0, 1.0 / np.sqrt(ranks[l + 1]), size=(2, ranks[l], ranks[l + 1]))
                 for l in range(n)]
        terminal = rng.normal(0.0, 1.0, size=(ranks[n], k))
        return cls(basis, cores, terminal)

    @property
    def n(self) -> int:
        return len(self.cores)

    @property
    def d(self) -> int:
        return self.basis.shape[0]

    @property
    def k(self) -> int:
        return self.basis.shape[1]

    @property
    def ranks(self) -> list[int]:
        return [self.cores[0].shape[1]] + [c.shape[2] for c in self.cores]

    def validate(self) -> None:
        if not self.cores:
            raise ConfigError("EPT bank needs at least one view core")
        for l, c in enumerate(self.cores):
            if c.value.ndim != 3 or c.shape[0] != 2:
                raise ConfigError(f"core {l} must have shape (2, r_prev, r_next), got {c.shape}")
            if l and c.shape[1] != self.cores[l - 1].shape[2]:
                raise ConfigError(
                    f"core {l} left rank {c.shape[1]} != core {l - 1} right rank {self.cores[l - 1].shape[2]}")
        if self.cores[0].shape[1] != 1:
            raise ConfigError("boundary rank r_0 must be 1")
        if self.terminal.shape != (self.cores[-1].shape[2], self.k):
            raise ConfigError(f"terminal core shape {self.terminal.shape} != ({self.cores[-1].shape[2]}, {self.k})")
        if self.d % 2:
            raise ConfigError(f"prompt length d={self.d} must be even")

    def _packed(self):
        return kernels.pack_cores([c.value for c in self.cores], self.ranks)

    def coefficients(self, patterns) -> np.ndarray:
        """``P x k`` coefficient rows for the given pattern indices (or bit rows)."""
        idx = _as_indices(patterns, self.n)
        packed, ranks = self._packed()
        return kernels.tt_forward(packed, ranks, self.terminal.value, idx)

    def prompts(self, patterns) -> np.ndarray:
        betas = self.coefficients(patterns)
        return matmul(self.basis.value, betas.T)

    def backward(self, patterns, upstream: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of ``sum_p <upstream[:, p], prompt_p>`` for every bank parameter."""
        idx = _as_indices(patterns, self.n)
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != (self.d, idx.shape[0]):
            raise ShapeError(f"upstream shape {upstream.shape} != ({self.d}, {idx.shape[0]})")
        packed, ranks = self._packed()
        betas = kernels.tt_forward(packed, ranks, self.terminal.value, idx)
        grads = {"basis": matmul(upstream, betas)}
        dbeta = matmul(upstream.T, self.basis.value)
        dpacked, dterm = kernels.tt_backward(packed, ranks, self.terminal.value, idx, dbeta)
        for l, c in enumerate(self.cores):
            grads[f"cores.{l}"] = dpacked[l, :, : c.shape[1], : c.shape[2]].copy()
        grads["terminal"] = dterm
        return grads

    def named_params(self) -> dict[str, ParamTensor]:
        out = {"basis": self.basis}
        out.update({f"cores.{l}": c for l, c in enumerate(self.cores)})
        out["terminal"] = self.terminal
        return out


class DenseBank(_Bank):
    """One independent prompt column per pattern (``d x 2^n`` table)."""

    kind = "dense"

    def __init__(self, table: np.ndarray):
        self.table = ParamTensor(table)
        n = int(np.log2(self.table.shape[1]))
        if self.table.value.ndim != 2 or (1 << n) != self.table.shape[1]:
            raise ConfigError(f"dense table needs 2^n columns, got {self.table.shape}")
        self._n = n

    @classmethod
    def init(cls, n: int, d: int, rng: np.random.Generator) -> "DenseBank":
        if (1 << n) * d > MATERIALIZE_BUDGET:
            raise CapacityError(f"dense bank with n={n}, d={d} exceeds the materialization budget")
        return cls(rng.normal(0.0, 0.02, size=(d, 1 << n)))

    @property
    def n(self) -> int:
        return self._n

    @property
    def d(self) -> int:
        return self.table.shape[0]

    def prompts(self, patterns) -> np.ndarray:
        return self.table.value[:, _as_indices(patterns, self.n)].copy()

    def backward(self, patterns, upstream):
        grad = np.zeros_like(self.table.value)
        np.add.at(grad.T, _as_indices(patterns, self.n), np.asarray(upstream).T)
        return {"table": grad}

    def named_params(self):
        return {"table": self.table}


class PerViewBank(_Bank):
    """One prompt per view; a pattern's prompt sums its observed views' prompts."""

    kind = "perview"

    def __init__(self, view_prompts: np.ndarray):
        self.views = ParamTensor(view_prompts)  # d x n

    @classmethod
    def init(cls, n: int, d: int, rng: np.random.Generator) -> "PerViewBank":
        return cls(rng.normal(0.0, 0.02, size=(d, n)))

    @property
    def n(self) -> int:
        return self.views.shape[1]

    @property
    def d(self) -> int:
        return self.views.shape[0]

    def prompts(self, patterns):
        return matmul(self.views.value, bits_matrix(_as_indices(patterns, self.n), self.n).T)

    def backward(self, patterns, upstream):
        return {"views": matmul(np.asarray(upstream), bits_matrix(_as_indices(patterns, self.n), self.n))}

    def named_params(self):
        return {"views": self.views}


def normalize_ranks(ranks, n: int) -> list[int]:
    """Expand a scalar TT rank ``R`` to ``(1, R, ..., R)``; validate explicit lists."""
    if np.isscalar(ranks):
        out = [1] + [int(ranks)] * n
    else:
        out = [int(r) for r in ranks]
    if len(out) != n + 1:
        raise ConfigError(f"need n+1={n + 1} TT ranks, got {len(out)}")
    if out[0] != 1:
        raise ConfigError("boundary rank r_0 must be 1")
    if min(out) < 1:
        raise ConfigError("TT ranks must be positive")
    return out


def make_bank(kind: str, n: int, d: int, k: int, ranks, rng: np.random.Generator):
    if d % 2:
        raise ConfigError(f"prompt length d={d} must be even")
    if kind == "ept":
        return EptBank.init(n, d, k, ranks, rng)
    if kind == "dense":
        return DenseBank.init(n, d, rng)
    if kind == "perview":
        return PerViewBank.init(n, d, rng)
    raise ConfigError(f"unknown bank kind {kind!r}")


# Single-pattern entry points -------------------------------------------------

def tt_coefficients(bank: EptBank, m) -> np.ndarray:
    bits = np.asarray(m)
    if bits.shape != (bank.n,):
        raise ShapeError(f"pattern length {bits.shape} does not match bank n={bank.n}")
    return bank.coefficients(bits[None, :])[0]


def prompt_for_pattern(bank, m) -> np.ndarray:
    return bank.prompt(m)


def materialize_all(bank) -> np.ndarray:
    """``d x 2^n`` matrix whose column ``j`` is the prompt for pattern index ``j``."""
    return bank.materialize_all()


def ept_backward(bank: EptBank, m, upstream) -> dict[str, np.ndarray]:
    upstream = np.asarray(upstream, dtype=np.float64).reshape(-1, 1)
    return bank.backward([pattern_index(m)], upstream)


# Parameter accounting --------------------------------------------------------

@dataclass(frozen=True)
class ParamCount:
    kind: str
    count: int
    formula: str


def ept_exact_count(n: int, d: int, k: int, ranks) -> int:
    r = normalize_ranks(ranks, n)
    return sum(r[l] * 2 * r[l + 1] for l in range(n)) + r[n] * k + d * k


def param_count(kind: str, n: int, d: int, k: int = 4, R: int = 2, r: int = 2,
                ranks=None) -> list[ParamCount]:
    """Prompt-parameter counts needed to cover all ``2^n`` patterns.

    ``EPT`` returns two entries: the exact learnable count of :class:`EptBank`
    and the ``n*R^2*k + d*k`` complexity bound. ``r`` is the EPE-P rank.
    """
    kind = kind.upper().replace("-", "")
    if min(n, d, k, R, r) < 1:
        raise ConfigError("all counts must be >= 1")
    if kind == "MAP":
        return [ParamCount("MAP", (2**n) * d, "(2^n)*d")]
    if kind == "MSP":
        return [ParamCount("MSP", n * d, "n*d")]
    if kind == "EPEP":
        return [ParamCount("EPE-P", n**3 + d * r, "n^3+d*r")]
    if kind == "EPT":
        exact = ept_exact_count(n, d, k, R if ranks is None else ranks)
        return [
            ParamCount("EPT exact", exact, "sum_l r_{l-1}*2*r_l + r_n*k + d*k"),
            ParamCount("EPT bound", n * R * R * k + d * k, "n*R^2*k+d*k"),
        ]
    raise ConfigError(f"unknown parameter-count kind {kind!r}")
