import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from boxeki.ensemble import (
    Ensemble,
    NoiseModel,
    cross_cov,
    empirical_cov,
    empirical_mean,
    weighted_misfit,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_ensemble_is_read_only():
    e = Ensemble(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        e.particles[0, 0] = 1.0
    assert e.J == 3 and e.n == 2


def test_moments_hand_example():
    U = np.array([[0.0, 0.0], [2.0, 4.0]])
    assert np.allclose(empirical_mean(U), [1.0, 2.0])
    # 1/J normalisation
    assert np.allclose(empirical_cov(U), [[1.0, 2.0], [2.0, 4.0]])


def test_identical_particles_have_zero_covariance():
    U = np.tile([1.0, -2.0, 3.0], (4, 1))
    assert np.allclose(empirical_cov(U), 0.0)


def test_cross_cov_count_mismatch():
    with pytest.raises(ValueError):
        cross_cov(np.zeros((3, 2)), np.zeros((4, 2)))


@settings(max_examples=40, deadline=None)
@given(arrays(float, (5, 3), elements=finite))
def test_cov_symmetric_psd_and_permutation_invariant(U):
    C = empirical_cov(U)
    assert np.allclose(C, C.T)
    assert np.linalg.eigvalsh(C).min() >= -1e-8 * max(1.0, np.abs(C).max())
    perm = np.random.default_rng(0).permutation(5)
    assert np.allclose(empirical_cov(U[perm]), C)
    assert np.allclose(empirical_mean(U[perm]), empirical_mean(U))


@settings(max_examples=30, deadline=None)
@given(arrays(float, (4, 3), elements=finite))
def test_cross_cov_of_self_is_cov(U):
    assert np.allclose(cross_cov(U, U), empirical_cov(U), atol=1e-8)


def test_noise_model_validation():
    with pytest.raises(ValueError):
        NoiseModel(np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(np.linalg.LinAlgError):
        NoiseModel(np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_noise_model_solve_and_norms(rng):
    B = rng.standard_normal((4, 4))
    G = B @ B.T + 4 * np.eye(4)
    nm = NoiseModel(G)
    r = rng.standard_normal(4)
    assert np.allclose(nm.solve(r), np.linalg.solve(G, r))
    assert np.isclose(nm.sq_norm(r), r @ np.linalg.solve(G, r))
    assert np.isclose(np.sum(nm.whiten(r) ** 2), nm.sq_norm(r))
    assert np.isclose(weighted_misfit(r, nm), 0.5 * nm.sq_norm(r))


def test_noise_sampling_covariance():
    nm = NoiseModel.isotropic(0.1, 3)
    draws = nm.sample(np.random.default_rng(0), size=40000)
    assert np.allclose(np.cov(draws.T), 0.01 * np.eye(3), atol=5e-4)
