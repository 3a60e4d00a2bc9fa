"""Spectral estimator checks against dense SVD oracles."""

import numpy as np
import pytest

from bbebm import netlib, spectral
from bbebm.spectral import SpectralConfig, EVAL_CFG


class LinearGen:
    """Generator stub with a fixed dense Jacobian."""

    def __init__(self, a):
        self.a = np.asarray(a, dtype=np.float64)
        self.latent_dim = self.a.shape[1]

    def apply(self, z):
        from bbebm.diffkernel import Tensor
        import bbebm.diffkernel as dk
        if not isinstance(z, Tensor):
            z = Tensor(z)
        return dk.matmul(z, Tensor(self.a.T))


def random_mlp_gen(rng, widths):
    return netlib.Generator(widths, activation="tanh", sigma_noise=0.01, rng=rng)


class TestSmallestSingularValue:
    def test_padded_diagonal(self):
        a = np.zeros((4, 3))
        a[0, 0], a[1, 1], a[2, 2] = 3.0, 2.0, 1.0
        res = spectral.smallest_singular_value(
            LinearGen(a), np.zeros(3), EVAL_CFG, rng=np.random.default_rng(0))
        assert res.s1_estimate[0] == pytest.approx(1.0, rel=1e-6)
        assert np.linalg.norm(res.v_min[0]) == pytest.approx(1.0, abs=1e-10)

    def test_isotropic_map(self):
        res = spectral.smallest_singular_value(
            LinearGen(2.5 * np.eye(3)), np.zeros(3),
            SpectralConfig(max_iters=3, tol=1e-6), rng=np.random.default_rng(1))
        assert res.s1_estimate[0] == pytest.approx(2.5, rel=1e-10)

    def test_random_mlp_matches_dense_svd(self):
        rng = np.random.default_rng(2)
        gen = random_mlp_gen(rng, [2, 16, 3])
        z = rng.normal(size=(1, 2))
        res = spectral.smallest_singular_value(gen, z, EVAL_CFG, rng=rng)
        j = spectral.dense_jacobian(gen, z)
        s_true = np.linalg.svd(j, compute_uv=False).min()
        assert abs(res.s1_estimate[0] - s_true) / s_true < 1e-4

    def test_estimate_upper_bounds_truth_and_rayleigh_at_vmin(self):
        rng = np.random.default_rng(3)
        gen = random_mlp_gen(rng, [2, 12, 12, 4])
        z = rng.normal(size=(1, 2))
        res = spectral.smallest_singular_value(
            gen, z, SpectralConfig(max_iters=2, tol=1e-9), rng=rng)
        j = spectral.dense_jacobian(gen, z)
        s_true = np.linalg.svd(j, compute_uv=False).min()
        assert res.s1_estimate[0] >= s_true - 1e-12
        # the reported estimate is the Rayleigh quotient at v_min
        rq = np.linalg.norm(j @ res.v_min[0])
        assert res.s1_estimate[0] == pytest.approx(rq, rel=1e-10)

    def test_monotone_descent(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            gen = random_mlp_gen(rng, [3, 10, 10, 5])
            z = rng.normal(size=(4, 3))
            res = spectral.smallest_singular_value(
                gen, z, SpectralConfig(max_iters=30, tol=1e-12), rng=rng, track_rho=True)
            tr = np.stack(res.rho_trace)
            diffs = np.diff(tr, axis=0)
            assert np.all(diffs <= 1e-10 * np.maximum(tr[:-1], 1.0))

    def test_estimate_bounds_random_directions(self):
        rng = np.random.default_rng(5)
        gen = random_mlp_gen(rng, [2, 8, 3])
        z = rng.normal(size=(1, 2))
        res = spectral.smallest_singular_value(gen, z, EVAL_CFG, rng=rng)
        j = spectral.dense_jacobian(gen, z)
        for _ in range(100):
            v = rng.normal(size=2)
            assert res.s1_estimate[0] <= np.linalg.norm(j @ v) / np.linalg.norm(v) + 1e-9

    def test_zero_iterations_returns_probe_surrogate_root(self):
        rng = np.random.default_rng(6)
        gen = LinearGen(np.diag([3.0, 1.0]))
        res = spectral.smallest_singular_value(
            gen, np.zeros(2), SpectralConfig(max_iters=0, tol=1e-3, probe_count=4000),
            rng=rng)
        # RMS singular value sqrt(tr/d) = sqrt(5), within probe noise
        assert res.s1_estimate[0] == pytest.approx(np.sqrt(5.0), rel=0.1)
        assert res.v_min is None and res.probes is not None

    def test_degenerate_jacobian_raises(self):
        gen = LinearGen(np.zeros((3, 2)))
        with pytest.raises(spectral.DegenerateJacobianError):
            spectral.smallest_singular_value(gen, np.zeros(2), EVAL_CFG,
                                             rng=np.random.default_rng(0))


class TestHutchinsonEntropy:
    def test_equal_singular_values_equality(self):
        # all s_i = s: surrogate = d log s = half log det, exactly (AM-GM equality)
        s = 1.7
        assert spectral.trace_surrogate(2 * s * s, d=2) == pytest.approx(2 * np.log(s))

    def test_diag_3_1_strictly_larger(self):
        val = spectral.trace_surrogate(10.0, d=2)
        assert val == pytest.approx(np.log(5.0))
        assert val > np.log(3.0)

    def test_probe_estimate_concentrates(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(5, 3))
        gen = LinearGen(a)
        cfg = SpectralConfig(max_iters=1, tol=1e-3, probe_count=10_000)
        got = spectral.hutchinson_entropy(gen, np.zeros(3), cfg, rng=rng)[0]
        tr = np.trace(a.T @ a)
        # delta-method SE of the surrogate from the probe variance of |Jv|^2
        probes = rng.standard_normal(size=(10_000, 3))
        vals = np.einsum("ij,kj->ki", a, probes)
        sq = (vals ** 2).sum(axis=1)
        se_t = sq.std() / np.sqrt(len(sq))
        se = 1.5 * se_t / tr
        assert abs(got - spectral.trace_surrogate(tr, 3)) < 3 * se

    def test_ordering_chain_on_dense_oracle(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            gen = random_mlp_gen(rng, [2, 9, 4])
            z = rng.normal(size=(1, 2))
            j = spectral.dense_jacobian(gen, z)
            svals = np.linalg.svd(j, compute_uv=False)
            d = 2
            lo = d * np.log(svals.min())
            mid = np.log(svals ** 2).sum() / 2
            hi = spectral.trace_surrogate((svals ** 2).sum(), d)
            assert lo <= mid + 1e-12 <= hi + 2e-12


class TestAnisotropyIndex:
    def test_orthonormal_columns_zero(self):
        q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(5, 3)))
        assert spectral.anisotropy_index(LinearGen(q), np.zeros(3))[0] == pytest.approx(0.0, abs=1e-12)

    def test_diag_population_std(self):
        got = spectral.anisotropy_index(LinearGen(np.diag([3.0, 1.0])), np.zeros(2))[0]
        assert got == pytest.approx(1.0)

    def test_identity_zero(self):
        assert spectral.anisotropy_index(LinearGen(np.eye(2)), np.zeros(2))[0] == 0.0

    def test_latent_permutation_invariance(self):
        rng = np.random.default_rng(9)
        a = rng.normal(size=(6, 4))
        perm = [2, 0, 3, 1]
        c0 = spectral.anisotropy_index(LinearGen(a), np.zeros(4))[0]
        c1 = spectral.anisotropy_index(LinearGen(a[:, perm]), np.zeros(4))[0]
        assert c0 == pytest.approx(c1, rel=1e-12)
