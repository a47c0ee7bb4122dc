"""Backend selection for the hot kernels.

The compiled module ``ttprompt._kernels`` is used when it was built;
otherwise the numpy fallback ``ttprompt._kernels_py`` is selected at import.
Both produce bitwise-identical results.
"""
import numpy as np

from . import _kernels_py

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

BACKENDS = {"python": _kernels_py}
if _compiled is not None:
    BACKENDS["cython"] = _compiled

_active = _compiled if _compiled is not None else _kernels_py


def backend_name() -> str:
    return "cython" if _active is _compiled and _compiled is not None else "python"


def use_backend(name: str) -> None:
    """Switch the active backend (``"cython"`` or ``"python"``)."""
    global _active
    if name not in BACKENDS:
        raise ValueError(f"kernel backend {name!r} unavailable; have {sorted(BACKENDS)}")
    _active = BACKENDS[name]


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _active.matmul(np.ascontiguousarray(a, dtype=np.float64),
                          np.ascontiguousarray(b, dtype=np.float64))


def pack_cores(cores, ranks):
    """Stack per-view (2, r_prev, r_next) cores into one zero-padded array."""
    rmax = max(int(r) for r in ranks)
    packed = np.zeros((len(cores), 2, rmax, rmax))
    for l, core in enumerate(cores):
        packed[l, :, : core.shape[1], : core.shape[2]] = core
    return packed, np.asarray(ranks, dtype=np.int64)


def tt_forward(packed, ranks, terminal, patterns):
    return _active.tt_forward(
        np.ascontiguousarray(packed, dtype=np.float64),
        np.ascontiguousarray(ranks, dtype=np.int64),
        np.ascontiguousarray(terminal, dtype=np.float64),
        np.ascontiguousarray(patterns, dtype=np.int64),
    )


def tt_backward(packed, ranks, terminal, patterns, dbeta):
    return _active.tt_backward(
        np.ascontiguousarray(packed, dtype=np.float64),
        np.ascontiguousarray(ranks, dtype=np.int64),
        np.ascontiguousarray(terminal, dtype=np.float64),
        np.ascontiguousarray(patterns, dtype=np.int64),
        np.ascontiguousarray(dbeta, dtype=np.float64),
    )
