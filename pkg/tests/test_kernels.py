import importlib
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import full_tt_tensor, naive_matmul
from ttprompt import _kernels_py, kernels

HAVE_CYTHON = "cython" in kernels.BACKENDS
needs_cython = pytest.mark.skipif(not HAVE_CYTHON, reason="compiled extension not built")


def random_chain(n, k, R, seed):
    g = np.random.default_rng(seed)
    ranks = [1] + [R] * n
    cores = [g.normal(size=(2, ranks[l], ranks[l + 1])) for l in range(n)]
    terminal = g.normal(size=(R, k))
    packed, r = kernels.pack_cores(cores, ranks)
    return cores, terminal, packed, r


@pytest.fixture
def restore_backend():
    name = kernels.backend_name()
    yield
    kernels.use_backend(name)


class TestPythonKernels:
    def test_matmul_oracle(self):
        g = np.random.default_rng(0)
        a, b = g.normal(size=(5, 7)), g.normal(size=(7, 3))
        np.testing.assert_allclose(_kernels_py.matmul(a, b), naive_matmul(a, b), atol=1e-12)

    @pytest.mark.parametrize("n", [1, 2, 3, 4])
    def test_tt_forward_oracle(self, n):
        cores, terminal, packed, r = random_chain(n, 3, 2, n)
        full = full_tt_tensor(cores, terminal)
        pats = np.arange(1 << n)
        out = _kernels_py.tt_forward(packed, r, terminal, pats)
        for p in pats:
            bits = tuple((p >> l) & 1 for l in range(n))
            np.testing.assert_allclose(out[p], full[bits], atol=1e-12)

    def test_tt_backward_is_adjoint(self):
        # <dbeta, J dx> equals <J^T dbeta, dx> for the linear map in the terminal
        cores, terminal, packed, r = random_chain(3, 2, 2, 5)
        pats = np.array([1, 3, 6, 7, 7])
        g = np.random.default_rng(9)
        dbeta, dterm_dir = g.normal(size=(5, 2)), g.normal(size=terminal.shape)
        _, dterm = _kernels_py.tt_backward(packed, r, terminal, pats, dbeta)
        lhs = np.sum(dbeta * _kernels_py.tt_forward(packed, r, dterm_dir, pats))
        assert np.sum(dterm * dterm_dir) == pytest.approx(lhs, rel=1e-12)

    def test_mixed_ranks_padding(self):
        g = np.random.default_rng(1)
        ranks = [1, 3, 1, 2]
        cores = [g.normal(size=(2, ranks[l], ranks[l + 1])) for l in range(3)]
        terminal = g.normal(size=(2, 4))
        packed, r = kernels.pack_cores(cores, ranks)
        full = full_tt_tensor(cores, terminal)
        out = _kernels_py.tt_forward(packed, r, terminal, np.array([5]))
        np.testing.assert_allclose(out[0], full[(1, 0, 1)], atol=1e-12)


@needs_cython
class TestBackendParity:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**31))
    def test_matmul(self, m, l, n, seed):
        g = np.random.default_rng(seed)
        a, b = g.normal(size=(m, l)), g.normal(size=(l, n))
        c = kernels.BACKENDS["cython"].matmul(a, b)
        assert c.tobytes() == _kernels_py.matmul(a, b).tobytes()

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 7), st.integers(1, 5), st.integers(1, 4), st.integers(1, 12),
           st.integers(0, 2**31))
    def test_tt(self, n, k, R, npat, seed):
        _, terminal, packed, r = random_chain(n, k, R, seed)
        g = np.random.default_rng(seed + 1)
        pats = g.integers(0, 1 << n, size=npat).astype(np.int64)
        dbeta = g.normal(size=(npat, k))
        cy = kernels.BACKENDS["cython"]
        assert cy.tt_forward(packed, r, terminal, pats).tobytes() == \
            _kernels_py.tt_forward(packed, r, terminal, pats).tobytes()
        for a, b in zip(cy.tt_backward(packed, r, terminal, pats, dbeta),
                        _kernels_py.tt_backward(packed, r, terminal, pats, dbeta)):
            assert a.tobytes() == b.tobytes()

    def test_model_step_identical(self, restore_backend, tiny_model, tiny_batch):
        from ttprompt.model import backward_step
        out = {}
        for name in ("python", "cython"):
            kernels.use_backend(name)
            res = backward_step(tiny_model, tiny_batch, 0, lam=0.5)
            out[name] = (res.total, {k: v.tobytes() for k, v in res.grads.items()})
        assert out["python"] == out["cython"]


class TestSelection:
    def test_unknown_backend(self):
        with pytest.raises(ValueError, match="unavailable"):
            kernels.use_backend("fortran")

    def test_switch(self, restore_backend):
        kernels.use_backend("python")
        assert kernels.backend_name() == "python"
        if HAVE_CYTHON:
            kernels.use_backend("cython")
            assert kernels.backend_name() == "cython"

    def test_fallback_when_extension_missing(self, monkeypatch):
        import ttprompt
        monkeypatch.setitem(sys.modules, "ttprompt._kernels", None)
        monkeypatch.delattr(ttprompt, "_kernels", raising=False)
        try:
            mod = importlib.reload(kernels)
            assert mod.backend_name() == "python"
            assert set(mod.BACKENDS) == {"python"}
        finally:
            monkeypatch.undo()
            importlib.reload(kernels)
        assert kernels.backend_name() == ("cython" if HAVE_CYTHON else "python")
