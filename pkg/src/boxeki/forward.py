"""Forward models: generic linear operators, the 1D elliptic FEM problem,
the 2D Darcy flow problem, and least-squares misfits.

Every forward model is a callable mapping a parameter vector (or a (J, n)
stack of them) to observations, and exposes ``jacobian(u)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from boxeki.ensemble import NoiseModel


class ForwardSolveError(RuntimeError):
    """A PDE solve inside a forward model failed."""


class LinearForwardOperator:
    """G(u) = A u for a dense K x n matrix A."""

    is_linear = True

    def __init__(self, A, problem=None):
        A = np.array(A, dtype=float, copy=True)
        if A.ndim != 2:
            raise ValueError("A must be a matrix")
        if not np.all(np.isfinite(A)):
            raise ValueError("A has non-finite entries")
        A.setflags(write=False)
        self.matrix = A
        self.problem = problem

    @property
    def K(self) -> int:
        return self.matrix.shape[0]

    @property
    def n(self) -> int:
        return self.matrix.shape[1]

    def __call__(self, u):
        return np.asarray(u, dtype=float) @ self.matrix.T

    def jacobian(self, u=None):
        return self.matrix

    def __repr__(self):
        return f"LinearForwardOperator(K={self.K}, n={self.n})"


def misfit_and_grad(u, A, y, noise: NoiseModel):
    """Phi(u) = 1/2 ||y - A u||_Gamma^2 and its gradient A^T Gamma^{-1}(A u - y)."""
    A = A.matrix if isinstance(A, LinearForwardOperator) else np.asarray(A, float)
    u = np.asarray(u, dtype=float)
    r = u @ A.T - y
    wr = noise.solve(r)
    value = 0.5 * np.einsum("...k,...k->...", r, wr)
    grad = wr @ A
    if np.ndim(value) == 0:
        value = float(value)
    return value, grad


@dataclass(frozen=True)
class LeastSquaresProblem:
    """Box-constrained linear least squares min_{u in box} Phi(u)."""

    A: np.ndarray
    y: np.ndarray
    noise: NoiseModel
    box: object = None

    def __post_init__(self):
        A = self.A.matrix if isinstance(self.A, LinearForwardOperator) else self.A
        object.__setattr__(self, "A", np.asarray(A, dtype=float))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float))
        if self.A.shape[0] != self.y.shape[0] or self.noise.K != self.y.shape[0]:
            raise ValueError("A, y and the noise model disagree on the number of observations")

    @property
    def n(self) -> int:
        return self.A.shape[1]

    @property
    def hessian(self) -> np.ndarray:
        return self.A.T @ self.noise.inverse @ self.A

    def misfit(self, u):
        return misfit_and_grad(u, self.A, self.y, self.noise)[0]

    def gradient(self, u):
        return misfit_and_grad(u, self.A, self.y, self.noise)[1]

    def misfit_and_grad(self, u):
        return misfit_and_grad(u, self.A, self.y, self.noise)


def fd_jacobian(func, u, step: float | None = None) -> np.ndarray:
    """Forward-difference Jacobian of ``func`` at ``u``.

    The default step is 1e-6 * (1 + ||u||_inf).
    """
    u = np.asarray(u, dtype=float)
    if step is None:
        step = 1e-6 * (1.0 + np.max(np.abs(u), initial=0.0))
    shifted = u + step * np.eye(u.size)
    g0 = np.asarray(func(u), dtype=float)
    g = np.asarray(func(shifted), dtype=float)
    return (g - g0).T / step


# --------------------------------------------------------------------------
# 1D elliptic problem  -p'' + p = u on (0, L), p(0) = p(L) = 0


@dataclass(frozen=True)
class EllipticProblem1D:
    """P1 finite elements for -p'' + p = f with homogeneous Dirichlet data.

    ``param_nodes`` are the interior nodes carrying the parameter values; the
    source is their piecewise-linear interpolant (zero at the boundary).
    """

    length: float
    n_elements: int
    param_nodes: np.ndarray
    obs_points: np.ndarray
    nodes: np.ndarray = field(init=False, repr=False)
    _banded: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        N = int(self.n_elements)
        h = self.length / N
        nodes = np.linspace(0.0, self.length, N + 1)
        # interior system (N-1 unknowns): stiffness/h + mass*h/6, tridiagonal
        diag = 2.0 / h + 4.0 * h / 6.0
        off = -1.0 / h + h / 6.0
        ab = np.empty((2, N - 1))
        ab[0, :] = off
        ab[1, :] = diag
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "_banded", ab)
        object.__setattr__(self, "param_nodes", np.asarray(self.param_nodes, float))
        object.__setattr__(self, "obs_points", np.asarray(self.obs_points, float))

    @property
    def mesh_size(self) -> float:
        return self.length / self.n_elements

    def load_vector(self, f_nodes) -> np.ndarray:
        """Consistent-mass load M f for nodal source values, interior rows."""
        f = np.asarray(f_nodes, dtype=float)
        h = self.mesh_size
        return h / 6.0 * (f[..., :-2] + 4.0 * f[..., 1:-1] + f[..., 2:])

    def solve(self, f_nodes) -> np.ndarray:
        """Nodal FEM solution (including the zero boundary values)."""
        rhs = self.load_vector(f_nodes)
        try:
            inner = scipy.linalg.solveh_banded(self._banded, rhs.T).T
        except np.linalg.LinAlgError as exc:
            raise ForwardSolveError("singular FEM system") from exc
        zeros = np.zeros(inner.shape[:-1] + (1,))
        return np.concatenate([zeros, inner, zeros], axis=-1)

    def source_from_params(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        xs = np.concatenate([[0.0], self.param_nodes, [self.length]])
        if u.ndim == 1:
            return np.interp(self.nodes, xs, np.concatenate([[0.0], u, [0.0]]))
        return np.stack([self.source_from_params(row) for row in u])

    def observe(self, p_nodes, points=None) -> np.ndarray:
        points = self.obs_points if points is None else np.asarray(points, float)
        p = np.asarray(p_nodes, dtype=float)
        if p.ndim == 1:
            return np.interp(points, self.nodes, p)
        return np.stack([np.interp(points, self.nodes, row) for row in p])


def assemble_elliptic_1d(
    n_params: int = 16,
    obs_points=None,
    mesh_size: float = 2.0**-8,
    length: float = math.pi,
) -> LinearForwardOperator:
    """Observation matrix A of the parameter-to-observation map for -p'' + p = u.

    The parameter is the source at ``n_params`` equispaced interior nodes;
    by default the solution is observed at those same nodes.
    """
    param_nodes = length * np.arange(1, n_params + 1) / (n_params + 1)
    obs = param_nodes if obs_points is None else np.asarray(obs_points, dtype=float)
    if obs.ndim != 1 or obs.size == 0:
        raise ValueError("obs_points must be a non-empty vector")
    if np.any(obs <= 0.0) or np.any(obs >= length):
        raise ValueError(f"observation points must lie strictly inside (0, {length})")
    n_elements = int(math.ceil(length / mesh_size))
    problem = EllipticProblem1D(length, n_elements, param_nodes, obs)
    sources = problem.source_from_params(np.eye(n_params))
    p = problem.solve(sources)
    A = problem.observe(p).T
    return LinearForwardOperator(A, problem=problem)


def uniform_obs_points(count: int, length: float = math.pi) -> np.ndarray:
    return length * np.arange(1, count + 1) / (count + 1)


# --------------------------------------------------------------------------
# 2D Darcy flow  -div(exp(u) grad p) = f on (0,1)^2, p = 0 on the boundary


@dataclass(frozen=True)
class DarcyProblem2D:
    """Centred finite differences on a uniform grid of the unit square.

    ``prior`` supplies the basis mapping the parameter vector to the nodal
    log-permeability field; observations are bilinear interpolations of
    the pressure at ``obs_points``.
    """

    n_cells: int
    prior: object
    obs_points: np.ndarray
    source: float = 1.0

    def __post_init__(self):
        if self.n_cells < 2:
            raise ValueError("need at least two cells per direction")
        object.__setattr__(self, "obs_points", np.asarray(self.obs_points, float).reshape(-1, 2))

    @property
    def h(self) -> float:
        return 1.0 / self.n_cells

    @property
    def K(self) -> int:
        return self.obs_points.shape[0]

    @property
    def n(self) -> int:
        return self.prior.truncation

    def log_permeability(self, u) -> np.ndarray:
        """Nodal field sum_j sqrt(lambda_j) u_j phi_j on the (N+1)^2 grid."""
        return self.prior.field(u, self.n_cells)

    def system_matrix(self, kappa) -> np.ndarray:
        """Upper banded form of the SPD five-point operator.

        ``kappa`` may carry leading batch axes; the bands of the systems are
        then laid end to end, giving the banded form of the block-diagonal
        matrix (each block's leading off-diagonal entries are zero, so no
        coupling between blocks appears).
        """
        kappa = np.asarray(kappa, dtype=float)
        N = self.n_cells
        M = N - 1
        h2 = self.h**2
        kx = 0.5 * (kappa[..., :-1, :] + kappa[..., 1:, :])  # faces (i+1/2, j)
        ky = 0.5 * (kappa[..., :, :-1] + kappa[..., :, 1:])  # faces (i, j+1/2)
        batch = kappa.shape[:-2]
        # interior node (i, j), i,j in 1..M, index (i-1) + (j-1)*M
        diag = (kx[..., :-1, 1:-1] + kx[..., 1:, 1:-1] + ky[..., 1:-1, :-1] + ky[..., 1:-1, 1:]) / h2
        # x-neighbour (i-1, j) -> (i, j) through face (i-1/2, j), i >= 2
        wx = np.zeros(batch + (M, M))
        wx[..., 1:, :] = -kx[..., 1:-1, 1:-1] / h2
        # y-neighbour (i, j-1) -> (i, j) through face (i, j-1/2), j >= 2
        wy = np.zeros(batch + (M, M))
        wy[..., :, 1:] = -ky[..., 1:-1, 1:-1] / h2
        ab = np.zeros((M + 1, int(np.prod(batch, dtype=int)) * M * M))
        ab[M, :] = np.swapaxes(diag, -1, -2).ravel()
        ab[M - 1, :] = np.swapaxes(wx, -1, -2).ravel()
        ab[0, :] = np.swapaxes(wy, -1, -2).ravel()
        return ab

    def solve_field(self, log_kappa) -> np.ndarray:
        """Pressure on the full (N+1)^2 grid for a nodal log-permeability.

        Leading batch axes are solved together in one banded factorisation.
        """
        log_kappa = np.asarray(log_kappa, dtype=float)
        if not np.all(np.isfinite(log_kappa)):
            raise ForwardSolveError("non-finite log-permeability")
        N = self.n_cells
        M = N - 1
        batch = log_kappa.shape[:-2]
        with np.errstate(over="raise"):
            try:
                kappa = np.exp(log_kappa)
            except FloatingPointError:
                raise ForwardSolveError("permeability overflow") from None
        ab = self.system_matrix(kappa)
        rhs = np.full(ab.shape[1], float(self.source))
        try:
            inner = scipy.linalg.solveh_banded(ab, rhs, check_finite=False)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise ForwardSolveError(f"Darcy linear solve failed: {exc}") from exc
        p = np.zeros(batch + (N + 1, N + 1))
        p[..., 1:-1, 1:-1] = np.swapaxes(inner.reshape(batch + (M, M)), -1, -2)
        return p

    def observe(self, p) -> np.ndarray:
        N = self.n_cells
        x = self.obs_points[:, 0] * N
        y = self.obs_points[:, 1] * N
        i = np.clip(np.floor(x).astype(int), 0, N - 1)
        j = np.clip(np.floor(y).astype(int), 0, N - 1)
        tx = x - i
        ty = y - j
        return (
            (1 - tx) * (1 - ty) * p[..., i, j]
            + tx * (1 - ty) * p[..., i + 1, j]
            + (1 - tx) * ty * p[..., i, j + 1]
            + tx * ty * p[..., i + 1, j + 1]
        )


def uniform_obs_grid(per_side: int = 4) -> np.ndarray:
    """per_side^2 points at (i, j)/(per_side + 1), i, j = 1..per_side."""
    s = np.arange(1, per_side + 1) / (per_side + 1)
    X, Y = np.meshgrid(s, s, indexing="ij")
    return np.column_stack([X.ravel(), Y.ravel()])


def darcy_apply(u, problem: DarcyProblem2D) -> np.ndarray:
    """Observed pressures for KL coefficients u; accepts a (J, n) stack."""
    u = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(u)):
        raise ForwardSolveError("non-finite parameter vector")
    p = problem.solve_field(problem.log_permeability(u))
    return problem.observe(p)


def darcy_jacobian(u_bar, problem: DarcyProblem2D, step: float | None = None) -> np.ndarray:
    """Forward-difference Jacobian (K x n) of darcy_apply at u_bar."""
    return fd_jacobian(lambda v: darcy_apply(v, problem), u_bar, step)


class DarcyForward:
    """Callable wrapper so the Darcy map can be used wherever G is expected."""

    is_linear = False

    def __init__(self, problem: DarcyProblem2D):
        self.problem = problem

    @property
    def K(self) -> int:
        return self.problem.K

    @property
    def n(self) -> int:
        return self.problem.n

    def __call__(self, u):
        return darcy_apply(u, self.problem)

    def jacobian(self, u):
        return darcy_jacobian(u, self.problem)

    def __repr__(self):
        return f"DarcyForward(n_cells={self.problem.n_cells}, K={self.K}, n={self.n})"
