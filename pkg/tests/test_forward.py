import math

import numpy as np
import pytest

from boxeki.ensemble import NoiseModel
from boxeki.forward import (
    DarcyForward,
    DarcyProblem2D,
    EllipticProblem1D,
    LeastSquaresProblem,
    LinearForwardOperator,
    assemble_elliptic_1d,
    darcy_jacobian,
    fd_jacobian,
    misfit_and_grad,
    uniform_obs_grid,
    uniform_obs_points,
)
from boxeki.priors import build_kl_prior


def test_linear_operator_rowwise(rng):
    A = rng.standard_normal((3, 4))
    G = LinearForwardOperator(A)
    U = rng.standard_normal((5, 4))
    assert np.allclose(G(U), U @ A.T)
    assert np.allclose(G(U[0]), A @ U[0])
    assert np.allclose(fd_jacobian(G, U[0]), A, atol=1e-8)


def test_misfit_gradient_central_fd(rng):
    A = rng.standard_normal((6, 4))
    y = rng.standard_normal(6)
    noise = NoiseModel(np.diag(rng.uniform(0.5, 2.0, 6)))
    for _ in range(5):
        u = rng.standard_normal(4)
        f, g = misfit_and_grad(u, A, y, noise)
        fd = np.empty(4)
        d = 1e-6
        for i in range(4):
            e = np.zeros(4)
            e[i] = d
            fd[i] = (misfit_and_grad(u + e, A, y, noise)[0] - misfit_and_grad(u - e, A, y, noise)[0]) / (2 * d)
        assert np.linalg.norm(g - fd) <= 1e-6 * np.linalg.norm(g)


def test_least_squares_problem_hessian(rng):
    A = rng.standard_normal((5, 3))
    noise = NoiseModel.isotropic(0.5, 5)
    prob = LeastSquaresProblem(A, rng.standard_normal(5), noise)
    assert np.allclose(prob.hessian, A.T @ A / 0.25)


def test_elliptic_operator_is_coercive_and_symmetric_in_observation():
    A = assemble_elliptic_1d()
    M = A.matrix
    assert M.shape == (16, 16)
    # the solution operator of a self-adjoint problem observed at the
    # parameter nodes is symmetric positive definite up to quadrature effects
    assert np.linalg.eigvalsh(0.5 * (M + M.T)).min() > 0
    assert np.allclose(M, M.T, atol=1e-3 * np.abs(M).max())


def test_elliptic_low_observation_rank():
    A = assemble_elliptic_1d(obs_points=uniform_obs_points(15))
    assert A.matrix.shape == (15, 16)
    H = A.matrix.T @ A.matrix
    assert np.linalg.matrix_rank(H) == 15


def test_elliptic_rejects_boundary_observations():
    with pytest.raises(ValueError):
        assemble_elliptic_1d(obs_points=np.array([0.0, 1.0]))


def test_fem_manufactured_solution_second_order():
    # -p'' + p = 2 sin x has p = sin x on (0, pi)
    errs = []
    for N in (32, 64, 128, 256):
        prob = EllipticProblem1D(math.pi, N, np.array([1.0]), np.array([1.0]))
        p = prob.solve(2.0 * np.sin(prob.nodes))
        errs.append(np.max(np.abs(p - np.sin(prob.nodes))))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates > 1.8), rates


@pytest.fixture(scope="module")
def darcy16():
    prior = build_kl_prior(n_cells=16, truncation=64)
    return DarcyProblem2D(16, prior, uniform_obs_grid(4))


def test_darcy_constant_field_symmetry_and_positivity(darcy16):
    p = darcy16.solve_field(np.zeros((17, 17)))
    assert np.allclose(p, p.T, atol=1e-14)
    assert np.allclose(p, p[::-1, :], atol=1e-14)
    assert p.min() >= 0.0 and p[1:-1, 1:-1].min() > 0.0
    # the square's torsion function peaks near 0.0737
    assert abs(p.max() - 0.0737) < 2e-3


def test_darcy_maximum_principle_random_fields(darcy16, rng):
    fwd = DarcyForward(darcy16)
    for u in rng.standard_normal((5, 64)):
        p = darcy16.solve_field(darcy16.log_permeability(u))
        assert p.min() >= -1e-14
    assert fwd(rng.standard_normal((3, 64))).shape == (3, 16)


def test_darcy_batched_matches_single(darcy16, rng):
    fwd = DarcyForward(darcy16)
    U = rng.standard_normal((4, 64))
    assert np.allclose(fwd(U), np.stack([fwd(u) for u in U]), atol=1e-15)


def test_darcy_grid_refinement_second_order(rng):
    prior = build_kl_prior(n_cells=16, truncation=16)
    u = 0.5 * rng.standard_normal(16)
    obs = uniform_obs_grid(4)
    G = [DarcyForward(DarcyProblem2D(N, prior, obs))(u) for N in (20, 40, 80, 160)]
    diffs = [np.max(np.abs(G[i] - G[i + 1])) for i in range(3)]
    rates = np.log2(np.array(diffs[:-1]) / np.array(diffs[1:]))
    assert np.all(rates > 1.7), rates


def test_darcy_jacobian_matches_central_fd(darcy16, rng):
    fwd = DarcyForward(darcy16)
    u = 0.3 * rng.standard_normal(64)
    Jf = darcy_jacobian(u, darcy16)
    d = 1e-5
    cols = [(fwd(u + d * e) - fwd(u - d * e)) / (2 * d) for e in np.eye(64)[:8]]
    Jc = np.array(cols).T
    assert np.allclose(Jf[:, :8], Jc, rtol=1e-3, atol=1e-8)
