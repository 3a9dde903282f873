import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from boxeki.constraints import (
    FACE_TOL,
    BarrierDomainError,
    BoxConstraint,
    active_index_set,
    active_index_set_union,
    barrier_gradient,
    barrier_value,
    kkt_residual,
    project,
    recover_multipliers,
    smoothed_indicator,
    transform_preconditioner,
)
from boxeki.ensemble import NoiseModel, empirical_cov
from boxeki.forward import LeastSquaresProblem


def test_box_rejects_inverted_bounds_naming_component():
    with pytest.raises(ValueError, match="component 1"):
        BoxConstraint([0.0, 1.0], [1.0, 1.0])


def test_constraint_values_sign_convention():
    box = BoxConstraint([0.0], [2.0])
    h = box.constraint_values(np.array([0.5]))
    assert np.allclose(h, [-0.5, -1.5])
    N = box.constraint_normals()
    assert np.allclose(N, [[-1.0], [1.0]])


def test_project_examples():
    box = BoxConstraint.uniform(0.0, 1.0, 2)
    assert np.allclose(project([2.0, 0.5], box), [1.0, 0.5])
    assert np.allclose(project([0.3, 0.7], box), [0.3, 0.7])
    half = BoxConstraint([-np.inf, -np.inf], [np.inf, 0.0])
    alpha = 0.1
    assert np.allclose(project([1 + alpha, 14 * alpha], half), [1 + alpha, 0.0])


def test_project_leaves_unconstrained_tail():
    box = BoxConstraint([0.0], [1.0], n=3)
    assert np.allclose(project([5.0, 5.0, -5.0], box), [1.0, 5.0, -5.0])


@settings(max_examples=50, deadline=None)
@given(arrays(float, 4, elements=st.floats(-10, 10)), arrays(float, 4, elements=st.floats(-10, 10)))
def test_project_idempotent_and_lipschitz(u, v):
    box = BoxConstraint.uniform(-1.0, 2.0, 4)
    pu = project(u, box)
    assert np.array_equal(project(pu, box), pu)
    assert np.all(np.abs(pu - project(v, box)) <= np.abs(u - v) + 1e-15)
    assert box.is_feasible(pu)


def test_barrier_gradient_hand_values():
    assert np.allclose(barrier_gradient([0.0], BoxConstraint([-1.0], [1.0])), [0.0])
    assert np.isclose(barrier_gradient([0.5], BoxConstraint([0.0], [2.0]))[0], 4.0 / 3.0)


def test_barrier_gradient_domain():
    box = BoxConstraint([0.0], [1.0])
    for u in ([0.0], [1.0], [1.5]):
        with pytest.raises(BarrierDomainError):
            barrier_gradient(u, box)
    with pytest.raises(BarrierDomainError):
        barrier_value([1.0], box)


def test_barrier_gradient_matches_fd(rng):
    box = BoxConstraint(rng.uniform(-2, -1, 5), rng.uniform(1, 2, 5))
    for _ in range(10):
        u = rng.uniform(box.lower + 0.05, box.upper - 0.05)
        fd = np.empty(5)
        d = 1e-6
        for i in range(5):
            e = np.zeros(5)
            e[i] = d
            fd[i] = (barrier_value(u + e, box) - barrier_value(u - e, box)) / (2 * d)
        g = barrier_gradient(u, box)
        # barrier_gradient is the sum (1/h_i) grad h_i = -grad of -sum log(-h_i)
        assert np.linalg.norm(g + fd) <= 1e-6 * max(1.0, np.linalg.norm(fd))


def test_smoothed_indicator_examples():
    iota = 0.2
    assert smoothed_indicator(0.5, "lower", iota) == 1.0
    assert smoothed_indicator(-iota, "lower", iota) == 0.0
    assert np.isclose(smoothed_indicator(-iota / 2, "lower", iota), 0.5)
    assert smoothed_indicator(-0.5, "upper", iota) == 1.0
    assert smoothed_indicator(iota, "upper", iota) == 0.0
    with pytest.raises(ValueError):
        smoothed_indicator(0.0, "lower", 0.0)


def test_smoothed_indicator_tends_to_indicator():
    v = np.array([-0.3, -1e-3, 1e-3, 0.3])
    for side, ind in (("lower", v >= 0), ("upper", v <= 0)):
        assert np.array_equal(smoothed_indicator(v, side, 1e-6), ind.astype(float))


def test_active_index_set_definition():
    box = BoxConstraint.uniform(0.0, 1.0, 3)
    e = np.array([[0.0, 0.5, 1.0], [0.0, 0.5, 1.0]])
    assert list(active_index_set(e, np.array([1.0, 1.0, 1.0]), box)) == [0]
    assert list(active_index_set(e, np.array([-1.0, 0.0, -1.0]), box)) == [2]
    assert list(active_index_set(np.full((2, 3), 0.5), np.ones(3), box)) == []
    # face equality within the absolute tolerance
    e2 = e.copy()
    e2[:, 0] = 0.5 * FACE_TOL
    assert list(active_index_set(e2, np.ones(3), box)) == [0]


def test_union_active_set_contains_mean_set():
    box = BoxConstraint.uniform(0.0, 1.0, 2)
    e = np.array([[0.0, 0.3], [0.4, 1.0]])
    grads = np.array([[1.0, 0.0], [0.0, -1.0]])
    assert list(active_index_set_union(e, grads, box)) == [0, 1]


def test_transform_preconditioner_blocks(rng):
    B = rng.standard_normal((5, 5))
    C = B @ B.T
    eps = 0.3
    assert np.allclose(transform_preconditioner(C, [], eps), C + eps * np.eye(5))
    assert np.allclose(transform_preconditioner(C, range(5), eps), eps * np.eye(5))
    D = transform_preconditioner(C, [0, 1], eps)
    assert np.allclose(D[:2, :2], eps * np.eye(2))
    assert np.allclose(D[:2, 2:], 0.0) and np.allclose(D[2:, :2], 0.0)
    assert np.allclose(D[2:, 2:], C[2:, 2:] + eps * np.eye(3))
    assert np.allclose(D, D.T)
    assert np.linalg.eigvalsh(D).min() >= eps - 1e-10
    with pytest.raises(ValueError):
        transform_preconditioner(C, [], 0.0)


def test_pinned_ensemble_covariance_row_vanishes(rng):
    U = rng.uniform(0.1, 0.9, (5, 4))
    U[:, 1] = 0.0
    C = empirical_cov(U)
    assert np.allclose(np.delete(C[1], 1), 0.0)


def test_kkt_residual_examples():
    A = np.eye(2)
    noise = NoiseModel(np.eye(2))
    prob = LeastSquaresProblem(A, np.array([0.2, 0.3]), noise, BoxConstraint.uniform(0.0, 1.0, 2))
    assert kkt_residual(np.array([0.2, 0.3]), np.zeros(4), prob) <= 1e-15
    u = np.array([0.5, 0.5])
    assert np.isclose(kkt_residual(u, np.zeros(4), prob), np.linalg.norm(prob.gradient(u)))
    # 1-dim: min (u-2)^2/2 on [0,1] -> u*=1, multiplier 1 on the upper face
    p1 = LeastSquaresProblem(np.eye(1), np.array([2.0]), NoiseModel(np.eye(1)), BoxConstraint([0.0], [1.0]))
    lam = recover_multipliers(np.array([1.0]), p1.gradient(np.array([1.0])), p1.box)
    assert np.allclose(lam, [0.0, 1.0])
    assert kkt_residual(np.array([1.0]), lam, p1) <= 1e-15
