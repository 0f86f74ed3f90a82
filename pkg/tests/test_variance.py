import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from grouppanel.panel import LinearHypothesis
from grouppanel.variance import (CovarianceError, GroupCovariances, bartlett_weight,
                                 default_bandwidth, driscoll_kraay_cov, hypothesis_cov,
                                 pesaran_group_cov, sym_invsqrt, sym_sqrt, theoretical_cov)

from conftest import make_panel


def assert_sym_psd(a):
    np.testing.assert_allclose(a, a.T, atol=1e-10)
    lam = np.linalg.eigvalsh(a)
    assert lam.min() >= -1e-8 * max(lam.max(), 1e-300)


class TestPesaran:
    def test_identical_rows(self):
        cov = pesaran_group_cov(np.array([[1.0, 2.0], [1.0, 2.0]]), np.array([0, 0]))
        np.testing.assert_array_equal(cov.per_group[0], 0)

    def test_pair(self):
        cov = pesaran_group_cov(np.array([[0.0], [2.0]]), np.array([0, 0]))
        assert cov.per_group[0][0, 0] == pytest.approx(1.0)

    def test_quadratic_scaling(self, rng):
        B = rng.normal(size=(9, 2))
        labels = np.arange(9) % 2
        base = pesaran_group_cov(B, labels)
        centers = np.array([B[labels == g].mean(0) for g in (0, 1)])
        doubled = pesaran_group_cov(centers[labels] + 2 * (B - centers[labels]), labels)
        for a, b in zip(base.per_group, doubled.per_group):
            np.testing.assert_allclose(b, 4 * a, atol=1e-12)

    def test_singleton_named(self):
        with pytest.raises(CovarianceError, match="group 2"):
            pesaran_group_cov(np.zeros((3, 1)), np.array([0, 1, 0]))


class TestDriscollKraay:
    def test_bartlett_weights(self):
        np.testing.assert_allclose(bartlett_weight([0, 4, 2, 5], 4), [1, 0, 0.5, 0])

    def test_default_bandwidth(self):
        assert [default_bandwidth(T) for T in (20, 50, 100)] == [3, 4, 5]

    def test_zero_residuals(self, rng):
        X = rng.normal(size=(6, 5, 2))
        d = make_panel(X @ np.array([1.0, -1.0]), X)
        cov = driscoll_kraay_cov(d, np.zeros(6, int), np.array([1.0, -1.0]), 2)
        np.testing.assert_allclose(cov.per_group[0], 0, atol=1e-28)

    def test_two_period_hand_value(self):
        # unit 1 alone in group 1: X = 1, y = (1, 3), residuals (-1, 1)
        d = make_panel([[1.0, 3.0], [0.0, 5.0]], np.ones((2, 2, 1)))
        cov = driscoll_kraay_cov(d, np.array([0, 1]), np.array([2.0, 2.5]), L=1)
        assert cov.per_group[0][0, 0] == pytest.approx(0.5, abs=1e-14)

    def test_white_noise_approaches_sandwich(self):
        rng = np.random.default_rng(2024)
        N, T = 200, 60
        X = rng.normal(size=(N, T, 2))
        u = rng.normal(size=(N, T)) * (1 + 0.5 * np.abs(X[:, :, 0]))
        b = np.array([1.0, 0.5])
        d = make_panel(X @ b + u, X)
        alpha = np.linalg.lstsq(X.reshape(-1, 2), d.y.reshape(-1), rcond=None)[0]
        dk = driscoll_kraay_cov(d, np.zeros(N, int), alpha, L=1).per_group[0]
        resid = d.y - X @ alpha
        A = np.einsum("ntk,ntl->kl", X, X)
        meat = np.einsum("ntk,ntl,nt->kl", X, X, resid ** 2)
        white = np.linalg.inv(A) @ meat @ np.linalg.inv(A)
        assert np.linalg.norm(dk - white) / np.linalg.norm(white) < 0.10

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 5))
    def test_symmetric_psd(self, seed, L):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(8, 7, 2))
        d = make_panel(rng.normal(size=(8, 7)), X)
        labels = np.arange(8) % 2
        cov = driscoll_kraay_cov(d, labels, rng.normal(size=4), L)
        for block in cov.per_group:
            assert_sym_psd(block)


class TestTheoretical:
    def test_scalar_scaling(self):
        cov = theoretical_cov(np.eye(2), 1.0, np.array([0, 0, 0, 0, 1]))
        np.testing.assert_allclose(cov.per_group[0], 0.25 * np.eye(2))

    def test_linear_in_sigma2(self):
        labels = np.array([0, 1, 1])
        a = theoretical_cov(np.eye(2), 1.0, labels).block
        np.testing.assert_allclose(theoretical_cov(np.eye(2), 2.0, labels).block, 2 * a)

    def test_diagonal_inverse(self):
        cov = theoretical_cov(np.diag([2.0, 4.0]), 3.0, np.array([0, 0, 0, 1]))
        np.testing.assert_allclose(cov.per_group[0], np.diag([3 / 6, 3 / 12]))

    def test_singular(self):
        with pytest.raises(CovarianceError):
            theoretical_cov(np.ones((2, 2)), 1.0, np.array([0, 1]))


class TestHypothesisCov:
    def test_selection(self):
        cov = GroupCovariances((np.array([[2.0, 0.3], [0.3, 5.0]]),), "theory")
        H = LinearHypothesis(np.array([[0.0, 1.0]]), np.zeros(1), 1, 2)
        assert hypothesis_cov(cov, H)[0, 0] == 5.0

    def test_difference(self):
        cov = GroupCovariances((np.array([[1.5]]), np.array([[2.5]])), "theory")
        H = LinearHypothesis(np.array([[1.0, -1.0]]), np.zeros(1), 2, 1)
        assert hypothesis_cov(cov, H)[0, 0] == 4.0

    def test_singular(self):
        cov = GroupCovariances((np.zeros((1, 1)), np.zeros((1, 1))), "dk")
        H = LinearHypothesis(np.array([[1.0, -1.0]]), np.zeros(1), 2, 1)
        with pytest.raises(CovarianceError, match="hypothesis covariance singular"):
            hypothesis_cov(cov, H)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_congruence_preserves_psd(self, seed):
        rng = np.random.default_rng(seed)
        blocks = []
        for _ in range(3):
            A = rng.normal(size=(2, 2))
            blocks.append(A @ A.T + 0.1 * np.eye(2))
        H = LinearHypothesis(rng.normal(size=(2, 6)), np.zeros(2), 3, 2)
        assert_sym_psd(hypothesis_cov(GroupCovariances(tuple(blocks), "dk"), H))

    def test_theory_matches_direct_formula(self, rng):
        Sigma = np.array([[2.0, 0.4], [0.4, 1.0]])
        labels = np.array([0, 1, 1, 0, 1, 1, 1])
        H = LinearHypothesis(rng.normal(size=(3, 4)), np.zeros(3), 2, 2)
        got = hypothesis_cov(theoretical_cov(Sigma, 1.7, labels), H)
        N_sigma = np.kron(np.diag(np.bincount(labels)), Sigma)
        direct = 1.7 * H.R @ np.linalg.inv(N_sigma) @ H.R.T
        np.testing.assert_allclose(got, direct, atol=1e-12)


def test_matrix_roots(rng):
    A = rng.normal(size=(3, 3))
    S = A @ A.T + np.eye(3)
    np.testing.assert_allclose(sym_sqrt(S) @ sym_sqrt(S), S, atol=1e-12)
    np.testing.assert_allclose(sym_invsqrt(S) @ S @ sym_invsqrt(S), np.eye(3), atol=1e-12)


def test_json_round_trip(rng):
    cov = pesaran_group_cov(rng.normal(size=(6, 2)), np.arange(6) % 2)
    back = GroupCovariances.from_dict(cov.to_dict())
    np.testing.assert_array_equal(back.block, cov.block)
