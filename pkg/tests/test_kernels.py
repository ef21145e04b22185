import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from entd.kernels import (
    CholeskyError,
    RbfKernel,
    chol_psd,
    gram,
    inv_psd,
    logdet,
    solve_psd,
)


def t(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


class TestGram:
    def test_unit_diagonal_exact(self):
        x = t(np.random.default_rng(0).standard_normal((7, 4)))
        k = gram(RbfKernel(1.5), x, x)
        assert (k.diagonal() == 1.0).all()

    def test_known_value(self):
        # k(0, 2) with bandwidth 1: exp(-4 / 2) = exp(-2)
        k = gram(RbfKernel(1.0), t([[0.0]]), t([[2.0]]))
        assert abs(float(k[0, 0]) - math.exp(-2.0)) < 1e-15

    def test_transpose_symmetry(self):
        rng = np.random.default_rng(1)
        x, y = t(rng.standard_normal((5, 3))), t(rng.standard_normal((4, 3)))
        a = gram(RbfKernel(0.7), x, y)
        b = gram(RbfKernel(0.7), y, x).T
        assert torch.allclose(a, b, atol=1e-15)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            gram(RbfKernel(), t(np.zeros((2, 3))), t(np.zeros((2, 4))))

    def test_shift_invariance(self):
        rng = np.random.default_rng(2)
        x, y = rng.standard_normal((6, 3)), rng.standard_normal((5, 3))
        c = rng.standard_normal(3)
        a = gram(RbfKernel(1.0), t(x), t(y))
        b = gram(RbfKernel(1.0), t(x + c), t(y + c))
        assert torch.allclose(a, b, atol=1e-12)

    def test_bandwidth_validation(self):
        with pytest.raises(ValueError):
            RbfKernel(0.0)


class TestCholPsd:
    def test_identity(self):
        fac = chol_psd(torch.eye(4, dtype=torch.float64))
        assert fac.jitter == 0.0
        assert torch.equal(fac.chol, torch.eye(4, dtype=torch.float64))

    def test_rank_one_needs_jitter(self):
        fac = chol_psd(t(np.ones((2, 2))))
        assert fac.jitter > 0.0

    def test_reconstruction(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((6, 6))
        k = t(a @ a.T + 6 * np.eye(6))
        fac = chol_psd(k)
        rec = fac.chol @ fac.chol.T
        rel = float(torch.linalg.norm(rec - k) / torch.linalg.norm(k))
        assert rel < 1e-10 and fac.jitter == 0.0

    def test_asymmetric_rejected(self):
        bad = t([[1.0, 0.5], [0.0, 1.0]])
        with pytest.raises(ValueError, match="symmetric"):
            chol_psd(bad)

    def test_hopeless_matrix_raises(self):
        with pytest.raises(CholeskyError):
            chol_psd(t([[1.0, 0.0], [0.0, -1.0]]))

    @given(seed=st.integers(0, 200), p=st.integers(1, 40))
    @settings(max_examples=30, deadline=None)
    def test_gram_matrices_factor_with_small_jitter(self, seed, p):
        rng = np.random.default_rng(seed)
        x = t(rng.standard_normal((p, 3)))
        k = gram(RbfKernel(1.0), x, x)
        fac = chol_psd(k)
        assert fac.jitter <= 1e-6 * float(k.diagonal().sum() / p) + 1e-30

    def test_large_gram(self):
        rng = np.random.default_rng(11)
        x = t(rng.standard_normal((1024, 6)))
        fac = chol_psd(gram(RbfKernel(1.0), x, x))
        assert fac.jitter <= 1e-6


class TestSolves:
    def test_identity_solve(self):
        fac = chol_psd(torch.eye(3, dtype=torch.float64))
        b = t([1.0, 2.0, 3.0])
        assert torch.equal(solve_psd(fac, b), b)

    def test_logdet_identity(self):
        assert float(logdet(chol_psd(torch.eye(5, dtype=torch.float64)))) == 0.0

    def test_solve_matches_dense_inverse(self):
        rng = np.random.default_rng(4)
        a = rng.standard_normal((8, 8))
        k = a @ a.T + 8 * np.eye(8)
        b = rng.standard_normal((8, 3))
        fac = chol_psd(t(k))
        want = np.linalg.inv(k) @ b
        assert np.allclose(solve_psd(fac, t(b)).numpy(), want, atol=1e-8)

    def test_inv_psd(self):
        rng = np.random.default_rng(5)
        a = rng.standard_normal((5, 5))
        k = a @ a.T + 5 * np.eye(5)
        inv = inv_psd(chol_psd(t(k))).numpy()
        assert np.allclose(inv, np.linalg.inv(k), atol=1e-9)

    def test_logdet_matches_slogdet(self):
        rng = np.random.default_rng(6)
        a = rng.standard_normal((7, 7))
        k = a @ a.T + 7 * np.eye(7)
        assert abs(float(logdet(chol_psd(t(k)))) - np.linalg.slogdet(k)[1]) < 1e-9
