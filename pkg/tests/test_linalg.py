import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eigenprune import linalg
from eigenprune.linalg import (
    ConvergenceError, RankOneTerm, ShapeError, apply_term, frobenius, matmul, rank_one_terms, svd, transpose,
)
from oracles import gram_eigenvalues


def check_factors(a, f, tol=1e-10):
    r = min(a.shape)
    assert f.u.shape == (a.shape[0], r) and f.v.shape == (a.shape[1], r)
    assert np.max(np.abs(f.u.T @ f.u - np.eye(r))) <= tol
    assert np.max(np.abs(f.v.T @ f.v - np.eye(r))) <= tol
    assert np.all(f.sigma >= 0) and np.all(np.diff(f.sigma) <= 0)
    assert frobenius(a - f.reconstruct()) <= tol * frobenius(a)


def test_identity():
    f = svd(np.eye(3))
    np.testing.assert_array_equal(f.sigma, [1, 1, 1])
    check_factors(np.eye(3), f)


def test_diag_with_negative_entry():
    a = np.diag([3.0, -2.0])
    f = svd(a)
    np.testing.assert_allclose(f.sigma, [3, 2], rtol=1e-14)
    np.testing.assert_allclose(f.sigma ** 2, gram_eigenvalues(a), rtol=1e-12)
    np.testing.assert_allclose(f.reconstruct(), a, atol=1e-14)


def test_zero_matrix():
    f = svd(np.zeros((2, 2)))
    np.testing.assert_array_equal(f.sigma, [0, 0])
    assert np.max(np.abs(f.u.T @ f.u - np.eye(2))) <= 1e-10


@pytest.mark.parametrize("shape", [(1, 1), (1, 5), (5, 1), (2, 3), (3, 2), (7, 7), (40, 9), (9, 40)])
def test_shapes(shape):
    a = np.random.default_rng(sum(shape)).standard_normal(shape)
    check_factors(a, svd(a))


def test_rank_deficient_keeps_orthonormal_basis():
    a = np.outer([1.0, 2.0, 3.0, 4.0], [1.0, -1.0, 0.5])
    f = svd(a)
    check_factors(a, f)
    assert f.sigma[1] <= 1e-12 * f.sigma[0]


def test_sigma_matches_characteristic_polynomial():
    rng = np.random.default_rng(11)
    for _ in range(300):
        m, n = rng.integers(1, 4, size=2)
        a = rng.standard_normal((m, n))
        sigma = svd(a).sigma
        lam = np.clip(gram_eigenvalues(a), 0, None)
        k = min(m, n)
        expected = np.sqrt(lam[:k])
        np.testing.assert_allclose(sigma, expected, rtol=1e-8, atol=1e-12 * expected[0])


@settings(max_examples=40, deadline=None)
@given(m=st.integers(1, 24), n=st.integers(1, 24), seed=st.integers(0, 2**32 - 1),
       scale=st.sampled_from([1e-6, 1.0, 1e6]))
def test_reconstruction_property(m, n, seed, scale):
    a = scale * np.random.default_rng(seed).standard_normal((m, n))
    f = svd(a)
    check_factors(a, f)
    terms = rank_one_terms(f)
    total = sum(t.materialize() for t in terms)
    assert frobenius(a - total) <= 1e-10 * frobenius(a)


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        svd(np.array([[1.0, np.nan]]))


def test_convergence_error_names_matrix(monkeypatch):
    monkeypatch.setattr(linalg, "MAX_SWEEPS", 1)
    a = np.random.default_rng(0).standard_normal((12, 12))
    with pytest.raises(ConvergenceError, match="blocks.0.key.*residual"):
        svd(a, name="blocks.0.key")


class TestRankOneTerms:
    def test_rank_one_input(self):
        a = 5.0 * np.outer([0.6, 0.8], [1.0, 0.0])
        terms = rank_one_terms(svd(a))
        assert [t.index for t in terms] == [0, 1]
        assert terms[0].sigma == pytest.approx(5.0)
        np.testing.assert_allclose(terms[0].materialize(), a, atol=1e-14)
        np.testing.assert_allclose(terms[1].materialize(), 0, atol=1e-14)

    def test_identity_sum(self):
        terms = rank_one_terms(svd(np.eye(2)))
        np.testing.assert_allclose(terms[0].materialize() + terms[1].materialize(), np.eye(2), atol=1e-14)

    def test_random_4x3(self):
        a = np.random.default_rng(0).standard_normal((4, 3))
        terms = rank_one_terms(svd(a))
        assert len(terms) == 3
        for t in terms:
            assert np.linalg.norm(t.u) == pytest.approx(1, abs=1e-10)
            assert np.linalg.norm(t.v) == pytest.approx(1, abs=1e-10)
        assert frobenius(a - sum(t.materialize() for t in terms)) / frobenius(a) <= 1e-10


class TestApplyTerm:
    def test_unit(self):
        e1 = np.array([1.0, 0.0])
        np.testing.assert_array_equal(apply_term(RankOneTerm(0, 1.0, e1, e1), e1), e1)

    def test_zero_sigma(self):
        t = RankOneTerm(0, 0.0, np.array([1.0, 2.0]), np.array([0.6, 0.8]))
        np.testing.assert_array_equal(apply_term(t, [3.0, -4.0]), [0.0, 0.0])

    def test_hand_computed(self):
        t = RankOneTerm(0, 2.0, np.array([1.0, 0.0]), np.array([0.6, 0.8]))
        np.testing.assert_allclose(apply_term(t, [1.0, 1.0]), [2.8, 0.0], atol=1e-15)

    def test_matches_dense(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            a = rng.standard_normal((6, 4))
            for t in rank_one_terms(svd(a)):
                x = rng.standard_normal(4)
                np.testing.assert_allclose(apply_term(t, x), t.materialize() @ x, rtol=0, atol=1e-12)

    def test_token_axis(self):
        t = rank_one_terms(svd(np.random.default_rng(1).standard_normal((3, 5))))[0]
        xs = np.random.default_rng(2).standard_normal((4, 5))
        np.testing.assert_allclose(apply_term(t, xs), xs @ t.materialize().T, atol=1e-12)

    def test_shape_error(self):
        t = RankOneTerm(0, 1.0, np.ones(2), np.ones(3) / np.sqrt(3))
        with pytest.raises(ShapeError):
            apply_term(t, np.ones(2))


def test_plumbing():
    a = np.random.default_rng(0).standard_normal((3, 4))
    np.testing.assert_array_equal(matmul(np.eye(3), a), a)
    assert frobenius(np.diag([3.0, 4.0])) == 5.0
    np.testing.assert_array_equal(transpose(transpose(a)), a)
    with pytest.raises(ShapeError):
        matmul(a, a)
