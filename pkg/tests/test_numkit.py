import math

import numpy as np
import pytest

from isoshape import numkit
from isoshape.errors import (
    ContractError,
    DegenerateInputError,
    DimensionError,
    ParameterError,
    SampleSizeError,
)
from isoshape.numkit import (
    Rng,
    binomial_two_sided_p,
    gaussian_matrix,
    ks_statistic,
    qr_haar,
    spectral_norm,
    sym_eigvals,
)


class TestRng:
    def test_same_seed_same_stream(self):
        a = Rng(123).normal(size=1000)
        b = Rng(123).normal(size=1000)
        assert np.array_equal(a, b)

    def test_different_seeds_differ(self):
        assert not np.array_equal(Rng(1).uniform(size=100), Rng(2).uniform(size=100))

    def test_counter_advances(self):
        rng = Rng(9)
        first = rng.uniform(size=10)
        second = rng.uniform(size=10)
        assert not np.array_equal(first, second)

    def test_state_round_trip(self):
        rng = Rng(42)
        rng.normal(size=17)
        resumed = Rng.from_state(rng.state())
        assert np.array_equal(rng.uniform(size=5), resumed.uniform(size=5))

    def test_child_streams_independent(self):
        rng = Rng(7)
        a = rng.child("data").uniform(size=100)
        b = rng.child("init").uniform(size=100)
        assert not np.array_equal(a, b)
        # deriving a child does not advance the parent
        assert rng.counter == 0

    def test_uniform_range(self):
        u = Rng(3).uniform(size=10000)
        assert np.all(u >= 0.0) and np.all(u < 1.0)

    def test_uniform_low_high(self):
        u = Rng(3).uniform(size=10000, low=-1.0, high=1.0)
        assert np.all(u >= -1.0) and np.all(u < 1.0)
        assert abs(np.mean(u)) < 0.05

    def test_normal_moments(self):
        z = Rng(11).normal(size=200000)
        assert abs(np.mean(z)) < 0.01
        assert abs(np.std(z) - 1.0) < 0.01

    def test_integers_cover_range(self):
        k = Rng(5).integers(7, size=10000)
        assert set(np.unique(k)) == set(range(7))

    def test_permutation_is_permutation(self):
        perm = Rng(8).permutation(50)
        assert sorted(perm) == list(range(50))

    def test_choice_without_replacement(self):
        rng = Rng(4)
        for _ in range(100):
            picked = rng.choice_without_replacement(10, 3)
            assert len(set(picked.tolist())) == 3
            assert np.all((picked >= 0) & (picked < 10))


class TestGaussianMatrix:
    def test_zero_std_gives_zero_matrix(self):
        m = gaussian_matrix(2, 2, 0.0, 0.0, Rng(99))
        assert np.array_equal(m, np.zeros((2, 2)))

    def test_determinism(self):
        a = gaussian_matrix(3, 3, 0.0, 1.0, Rng(7))
        b = gaussian_matrix(3, 3, 0.0, 1.0, Rng(7))
        assert np.array_equal(a, b)

    def test_moments_at_large_n(self):
        m = gaussian_matrix(1, 10**5, 0.0, 1.0, Rng(123))
        assert abs(np.mean(m)) < 4.0 / math.sqrt(10**5)
        assert abs(np.var(m) - 1.0) < 0.05

    def test_mean_and_std_applied(self):
        m = gaussian_matrix(100, 100, 5.0, 0.1, Rng(1))
        assert abs(np.mean(m) - 5.0) < 0.01
        assert abs(np.std(m) - 0.1) < 0.01

    def test_bad_dimensions(self):
        with pytest.raises(DimensionError):
            gaussian_matrix(0, 3, 0.0, 1.0, Rng(1))
        with pytest.raises(ParameterError):
            gaussian_matrix(2, 2, 0.0, -1.0, Rng(1))


class TestQrHaar:
    def test_identity(self):
        q, r = qr_haar(np.eye(3))
        assert np.allclose(q, np.eye(3), atol=1e-14)
        assert np.allclose(r, np.eye(3), atol=1e-14)

    def test_sign_correction_on_diagonal_input(self):
        q, r = qr_haar(np.diag([-2.0, 3.0, 1.0]))
        assert np.allclose(q, np.diag([-1.0, 1.0, 1.0]), atol=1e-14)
        assert np.allclose(r, np.diag([2.0, 3.0, 1.0]), atol=1e-14)

    def test_reconstruction_and_orthogonality(self):
        rng = Rng(2024)
        for _ in range(50):
            a = gaussian_matrix(3, 3, 0.0, 1.0, rng)
            q, r = qr_haar(a)
            assert np.max(np.abs(q @ r - a)) < 1e-10
            assert np.linalg.norm(q.T @ q - np.eye(3)) < 1e-10
            assert np.min(np.diagonal(r)) > 0.0

    def test_rank_deficient_rejected(self):
        a = np.array([[1.0, 2.0], [2.0, 4.0]])
        with pytest.raises(DegenerateInputError):
            qr_haar(a)

    def test_non_square_rejected(self):
        with pytest.raises(DimensionError):
            qr_haar(np.ones((2, 3)))


class TestSymEigvals:
    def test_diagonal(self):
        ev = sym_eigvals(np.diag([5.0, -1.0, 2.0]))
        assert np.allclose(ev, [5.0, 2.0, -1.0], atol=1e-14)

    def test_zero_matrix(self):
        assert np.array_equal(sym_eigvals(np.zeros((3, 3))), np.zeros(3))

    def test_trace_and_determinant_oracle(self):
        rng = Rng(55)
        for _ in range(50):
            a = gaussian_matrix(3, 3, 0.0, 1.0, rng)
            m = a + a.T
            ev = sym_eigvals(m)
            assert abs(np.sum(ev) - np.trace(m)) < 1e-10
            assert abs(np.prod(ev) - np.linalg.det(m)) < 1e-10

    def test_closed_form_matches_jacobi(self):
        rng = Rng(56)
        for _ in range(50):
            a = gaussian_matrix(3, 3, 0.0, 1.0, rng)
            m = a + a.T
            assert np.allclose(
                sym_eigvals(m, method="closed_form"),
                sym_eigvals(m, method="jacobi"),
                atol=1e-10,
            )

    def test_jacobi_general_size(self):
        rng = Rng(57)
        a = gaussian_matrix(8, 8, 0.0, 1.0, rng)
        m = a + a.T
        ev = sym_eigvals(m)
        assert abs(np.sum(ev) - np.trace(m)) < 1e-9
        assert abs(np.prod(ev) - np.linalg.det(m)) < 1e-7 * max(1.0, abs(np.linalg.det(m)))

    def test_similarity_invariance(self):
        rng = Rng(58)
        for _ in range(20):
            a = gaussian_matrix(3, 3, 0.0, 1.0, rng)
            m = a + a.T
            q, _ = qr_haar(gaussian_matrix(3, 3, 0.0, 1.0, rng))
            assert np.allclose(sym_eigvals(q.T @ m @ q), sym_eigvals(m), atol=1e-9)

    def test_asymmetric_rejected(self):
        with pytest.raises(ContractError):
            sym_eigvals(np.array([[1.0, 2.0], [0.0, 1.0]]))


class TestSpectralNorm:
    def test_identity(self):
        assert abs(spectral_norm(np.eye(3)) - 1.0) < 1e-12

    def test_diagonal_absolute_values(self):
        assert abs(spectral_norm(np.diag([0.5, -0.3, 0.1])) - 0.5) < 1e-12

    def test_rayleigh_brute_force_oracle(self):
        rng = Rng(77)
        m = gaussian_matrix(3, 3, 0.0, 1.0, rng)
        x = rng.normal(size=(10**5, 3))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        brute = np.max(np.linalg.norm(x @ m.T, axis=1))
        assert abs(spectral_norm(m) - brute) < 1e-3

    def test_nonnegative_and_scaling(self):
        rng = Rng(78)
        for _ in range(20):
            m = gaussian_matrix(3, 3, 0.0, 1.0, rng)
            s = spectral_norm(m)
            assert s >= 0.0
            assert abs(spectral_norm(-2.5 * m) - 2.5 * s) < 1e-10 * max(1.0, s)

    def test_orthogonal_has_unit_norm(self):
        rng = Rng(79)
        for _ in range(20):
            q, _ = qr_haar(gaussian_matrix(3, 3, 0.0, 1.0, rng))
            assert abs(spectral_norm(q) - 1.0) < 1e-10

    def test_rectangular_input(self):
        m = np.array([[3.0, 0.0, 0.0], [0.0, 4.0, 0.0]])
        assert abs(spectral_norm(m) - 4.0) < 1e-12


class TestKsStatistic:
    def test_degenerate_samples_statistic(self):
        stat, _ = ks_statistic(np.full(100, 0.5), lambda v: min(1.0, max(0.0, v)))
        assert abs(stat - 0.5) < 1e-12

    def test_uniform_calibration(self):
        # With a correct implementation p < 0.01 should occur for about 1% of
        # seeds; these 1000 seeds are fixed, so the count is frozen (992).
        hits = 0
        for seed in range(1000):
            u = Rng(seed).uniform(size=10**4)
            _, p = ks_statistic(u, lambda v: np.clip(v, 0.0, 1.0))
            if p > 0.01:
                hits += 1
        assert hits >= 990

    def test_gross_mismatch(self):
        u = Rng(5).uniform(size=10**4)
        _, p = ks_statistic(u, lambda v: min(1.0, max(0.0, (v + 1.0) / 2.0)))
        assert p < 1e-6

    def test_too_few_samples(self):
        with pytest.raises(SampleSizeError):
            ks_statistic(np.linspace(0, 1, 10), lambda v: v)

    def test_non_monotone_cdf_rejected(self):
        u = Rng(6).uniform(size=100)
        with pytest.raises(ContractError):
            ks_statistic(u, lambda v: -v)


class TestBinomialTwoSided:
    def test_balanced_split_p_one(self):
        assert binomial_two_sided_p(50, 100) == 1.0

    def test_extreme_split_tiny_p(self):
        assert binomial_two_sided_p(0, 100) < 1e-29

    def test_matches_direct_enumeration(self):
        # direct sum over the pmf for a small case
        n, k = 20, 6
        pmf = [math.comb(n, i) * 0.5**n for i in range(n + 1)]
        lo = min(k, n - k)
        expected = sum(pmf[: lo + 1]) + sum(pmf[n - lo:])
        assert abs(binomial_two_sided_p(k, n) - expected) < 1e-14

    def test_kolmogorov_sf_small_lambda(self):
        assert numkit._kolmogorov_sf(0.1) == 1.0
        assert 0.0 < numkit._kolmogorov_sf(1.36) < 0.051
        assert numkit._kolmogorov_sf(1.36) > 0.049
