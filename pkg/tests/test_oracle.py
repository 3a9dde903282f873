import numpy as np
import pytest

from boxeki.constraints import BoxConstraint, kkt_residual
from boxeki.ensemble import NoiseModel
from boxeki.forward import LeastSquaresProblem, LinearForwardOperator
from boxeki.oracle import (
    brute_force_box,
    projected_preconditioned_step,
    solve_barrier,
    solve_box_ls,
    solve_box_nls,
)

from conftest import random_box_ls


def test_interior_minimiser_has_zero_multipliers(rng):
    A = rng.standard_normal((4, 3))
    u0 = np.array([0.1, -0.2, 0.3])
    box = BoxConstraint.uniform(-1.0, 1.0, 3)
    k = solve_box_ls(A, A @ u0, NoiseModel(np.eye(4)), box)
    assert np.allclose(k.u_star, u0, atol=1e-9)
    assert np.allclose(k.multipliers, 0.0)


def test_one_dimensional_hand_solution():
    k = solve_box_ls(np.eye(1), np.array([2.0]), NoiseModel(np.eye(1)), BoxConstraint([0.0], [1.0]))
    assert np.allclose(k.u_star, [1.0])
    assert np.allclose(k.multipliers, [0.0, 1.0])
    assert k.kkt_residual <= 1e-12


def test_random_instances_match_brute_force(rng):
    for _ in range(5):
        A, y, noise, box = random_box_ls(rng)
        k = solve_box_ls(A, y, noise, box)
        prob = LeastSquaresProblem(A, y, noise, box)
        assert box.is_feasible(k.u_star)
        assert kkt_residual(k.u_star, k.multipliers, prob) <= 1e-8
        d = [np.max(np.abs(brute_force_box(A, y, noise, box, g) - k.u_star)) for g in (11, 101)]
        assert d[1] <= (box.upper - box.lower).max() / 100 + 1e-12
        assert d[1] <= d[0] + 1e-12


def test_unique_solution_from_random_starts(rng):
    A, y, noise, box = random_box_ls(rng)
    ref = solve_box_ls(A, y, noise, box).u_star
    for _ in range(5):
        x0 = rng.uniform(box.lower, box.upper)
        assert np.allclose(solve_box_ls(A, y, noise, box, x0=x0).u_star, ref, atol=1e-8)


def test_rank_deficient_case(case2):
    A, y, noise, box, truth, e0 = case2
    k = solve_box_ls(A.matrix, y, noise, box)
    assert k.kkt_residual <= 1e-8


def test_brute_force_corner_and_interior():
    box = BoxConstraint.uniform(0.0, 1.0, 2)
    noise = NoiseModel(np.eye(2))
    assert np.allclose(brute_force_box(np.eye(2), np.array([5.0, -5.0]), noise, box, 11), [1.0, 0.0])
    got = brute_force_box(np.eye(2), np.array([0.33, 0.71]), noise, box, 11)
    assert np.allclose(got, [0.3, 0.7])


def test_brute_force_dimension_guard():
    box = BoxConstraint.uniform(0.0, 1.0, 6)
    with pytest.raises(ValueError):
        brute_force_box(np.eye(6), np.zeros(6), NoiseModel(np.eye(6)), box, 3)


def test_barrier_symmetric_instance_at_centre():
    box = BoxConstraint([-1.0], [3.0])
    for iota in (0.1, 10.0, 1e4):
        u = solve_barrier(np.eye(1), np.array([1.0]), NoiseModel(np.eye(1)), box, iota)
        assert np.allclose(u, [1.0])


def test_barrier_gap_bound_and_monotone(rng):
    A, y, noise, box = random_box_ls(rng, n=4)
    prob = LeastSquaresProblem(A, y, noise, box)
    phi_star = prob.misfit(solve_box_ls(A, y, noise, box).u_star)
    gaps = []
    for iota in (1e2, 1e3, 1e4):
        u = solve_barrier(A, y, noise, box, iota)
        assert box.is_interior(u)
        g = iota * prob.gradient(u) - __import__("boxeki").constraints.barrier_gradient(u, box)
        assert np.linalg.norm(g) <= 1e-8 * max(1.0, iota)
        gaps.append(prob.misfit(u) - phi_star)
        assert -1e-12 <= gaps[-1] <= 2 * box.m / iota
    assert gaps[0] > gaps[1] > gaps[2]


def test_barrier_rejects_bad_input():
    box = BoxConstraint([0.0], [1.0])
    with pytest.raises(ValueError):
        solve_barrier(np.eye(1), np.zeros(1), NoiseModel(np.eye(1)), box, 0.0)
    with pytest.raises(ValueError):
        solve_barrier(np.eye(1), np.zeros(1), NoiseModel(np.eye(1)), box, 1.0, x0=np.array([1.0]))


def test_nonlinear_solver_agrees_on_linear_model(rng):
    A, y, noise, box = random_box_ls(rng)
    ref = solve_box_ls(A, y, noise, box).u_star
    k = solve_box_nls(LinearForwardOperator(A), y, noise, box)
    assert np.allclose(k.u_star, ref, atol=1e-6)


def test_projected_preconditioned_step_counterexample():
    box = BoxConstraint([-np.inf, -np.inf], [np.inf, 0.0])
    D = np.array([[1.0, 2.0], [2.0, 10.0]])
    grad = np.array([3.0, -2.0])
    for alpha in (0.01, 0.1, 1.0):
        assert np.allclose(projected_preconditioned_step([1.0, 0.0], grad, D, alpha, box), [1 + alpha, 0.0])
