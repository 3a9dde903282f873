"""Reference solvers for the box-constrained least-squares problems.

solve_box_ls      projected gradient with backtracking, polished by a
                  reduced Newton step on the free variables
solve_barrier     damped Newton on iota*Phi - sum log(-h)
brute_force_box   exhaustive tensor-grid search (tests only)
solve_box_nls     bounded nonlinear least squares for the Darcy problem
"""

from __future__ import annotations

import itertools
import logging

import numpy as np
import scipy.linalg
import scipy.optimize

from boxeki.constraints import (
    FACE_TOL,
    BoxConstraint,
    KKTPoint,
    barrier_gradient,
    barrier_hessian_diag,
    barrier_value,
    kkt_residual,
    project,
    recover_multipliers,
)
from boxeki.ensemble import NoiseModel
from boxeki.forward import LeastSquaresProblem

log = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    def __init__(self, message, residual=None, point=None):
        super().__init__(message)
        self.residual = residual
        self.point = point


def _start_point(box: BoxConstraint, n: int, x0=None):
    if x0 is not None:
        return project(np.asarray(x0, float), box)
    x = np.zeros(n)
    x[: box.m] = np.where(
        np.isfinite(box.lower) & np.isfinite(box.upper),
        box.center,
        np.clip(0.0, box.lower, box.upper),
    )
    return x


def _binding(x, g, box):
    """Faces where x sits exactly and the gradient pushes outward."""
    xm, gm = x[: box.m], g[: box.m]
    mask = np.zeros(x.size, dtype=bool)
    mask[: box.m] = ((xm <= box.lower) & (gm > 0)) | ((xm >= box.upper) & (gm < 0))
    return mask


def solve_box_ls(
    A,
    y,
    noise: NoiseModel,
    box: BoxConstraint,
    tol: float = 1e-10,
    max_iter: int = 20_000,
    x0=None,
) -> KKTPoint:
    """Minimise 1/2 ||y - A u||_Gamma^2 over the box.

    Runs projected gradient steps (Armijo backtracking along the projection
    arc) from the box centre; after each step a Newton step restricted to
    the free variables is tried and kept if it lowers the misfit. Stops when
    ||u - P(u - grad Phi(u))|| <= tol.
    """
    prob = LeastSquaresProblem(A, y, noise, box)
    H = prob.hessian
    lipschitz = max(float(np.linalg.eigvalsh(H)[-1]), 1e-300)
    x = _start_point(box, prob.n, x0)
    f, g = prob.misfit_and_grad(x)
    step = 1.0 / lipschitz
    pg_norm = np.inf
    for it in range(1, max_iter + 1):
        pg_norm = float(np.linalg.norm(x - project(x - g, box)))
        if pg_norm <= tol:
            break
        # projected gradient step with Armijo backtracking
        alpha = step
        while True:
            x_new = project(x - alpha * g, box)
            f_new, g_new = prob.misfit_and_grad(x_new)
            if f_new <= f + 1e-4 * g @ (x_new - x) or alpha < 1e-30:
                break
            alpha *= 0.5
        s = x_new - x
        dg = g_new - g
        # Barzilai-Borwein guess for the next trial step
        sy = s @ dg
        step = float(np.clip(s @ s / sy, 1e-3 / lipschitz, 1e6 / lipschitz)) if sy > 0 else 1.0 / lipschitz
        x, f, g = x_new, f_new, g_new
        # Newton polish on the free set
        free = ~_binding(x, g, box)
        if free.any():
            Hff = H[np.ix_(free, free)]
            d = np.zeros_like(x)
            d[free] = -scipy.linalg.lstsq(Hff, g[free], cond=1e-13)[0]
            x_try = project(x + d, box)
            f_try, g_try = prob.misfit_and_grad(x_try)
            if f_try <= f:
                x, f, g = x_try, f_try, g_try
    else:
        raise ConvergenceError(
            f"projected gradient did not converge in {max_iter} iterations "
            f"(projected-gradient norm {pg_norm:.3e})",
            residual=pg_norm,
            point=x,
        )
    lam = recover_multipliers(x, g, box)
    station = g + lam @ box.constraint_normals()
    return KKTPoint(
        u_star=x,
        multipliers=lam,
        stationarity_residual=float(np.linalg.norm(station)),
        kkt_residual=kkt_residual(x, lam, prob),
        iterations=it,
    )


def barrier_objective(u, prob: LeastSquaresProblem, iota: float) -> float:
    return iota * prob.misfit(u) + barrier_value(u, prob.box)


def solve_barrier(
    A,
    y,
    noise: NoiseModel,
    box: BoxConstraint,
    iota: float,
    x0=None,
    tol: float = 1e-10,
    max_iter: int = 500,
) -> np.ndarray:
    """Minimiser of iota*Phi(u) - sum_i log(-h_i(u)) by damped Newton.

    Uses the exact Hessian iota A^T Gamma^{-1} A + diag(1/h_i^2); steps are
    cut to stay strictly inside the box and backtracked on the objective.
    The gradient tolerance is relative to the natural gradient scale
    max(1, iota * ||grad Phi(x0)||).
    """
    if not iota > 0:
        raise ValueError("iota must be positive")
    prob = LeastSquaresProblem(A, y, noise, box)
    if box.m != prob.n:
        raise ValueError("the barrier problem needs every component constrained")
    H = prob.hessian
    x = box.center.copy() if x0 is None else np.asarray(x0, float).copy()
    if not box.is_interior(x):
        raise ValueError("barrier Newton needs a strictly interior start")
    scale = max(1.0, iota * float(np.linalg.norm(prob.gradient(x))))
    fx = barrier_objective(x, prob, iota)
    for _ in range(max_iter):
        grad = iota * prob.gradient(x) - barrier_gradient(x, box)
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= tol * scale:
            return x
        hess = iota * H + np.diag(barrier_hessian_diag(x, box))
        d = -scipy.linalg.solve(hess, grad, assume_a="pos")
        # fraction to the boundary
        with np.errstate(divide="ignore", invalid="ignore"):
            room_lo = np.where(d < 0, (box.lower - x) / d, np.inf)
            room_hi = np.where(d > 0, (box.upper - x) / d, np.inf)
        t = min(1.0, 0.99 * float(np.min(np.minimum(room_lo, room_hi))))
        decrement = float(-grad @ d)
        while True:
            x_new = x + t * d
            f_new = barrier_objective(x_new, prob, iota) if box.is_interior(x_new) else np.inf
            if f_new <= fx - 0.25 * t * decrement or t < 1e-14:
                break
            t *= 0.5
        if t < 1e-14 or decrement <= 1e-30 * max(1.0, abs(fx)):
            # Newton decrement at rounding level: accept
            return x_new if np.isfinite(f_new) else x
        x, fx = x_new, f_new
    raise ConvergenceError(
        f"barrier Newton did not converge (gradient norm {gnorm:.3e})", residual=gnorm, point=x
    )


def brute_force_box(A, y, noise: NoiseModel, box: BoxConstraint, grid_points_per_dim: int) -> np.ndarray:
    """Argmin of Phi over the tensor grid spanning the box (faces included)."""
    prob = LeastSquaresProblem(A, y, noise, box)
    n = prob.n
    if n > 5:
        raise ValueError(f"brute force over {n} dimensions is too expensive (limit 5)")
    if box.m != n or not (np.all(np.isfinite(box.lower)) and np.all(np.isfinite(box.upper))):
        raise ValueError("brute force needs a bounded box on every component")
    axes = [np.linspace(lo, hi, grid_points_per_dim) for lo, hi in zip(box.lower, box.upper)]
    best, best_val = None, np.inf
    # chunk over the first axis to bound memory
    rest = np.array(list(itertools.product(*axes[1:]))) if n > 1 else np.zeros((1, 0))
    for x0 in axes[0]:
        pts = np.column_stack([np.full(len(rest), x0), rest])
        vals = prob.misfit(pts)
        k = int(np.argmin(vals))
        if vals[k] < best_val:
            best_val, best = vals[k], pts[k]
    return best


def solve_box_nls(fwd, y, noise: NoiseModel, box: BoxConstraint, x0=None, tol: float = 1e-12) -> KKTPoint:
    """Bounded nonlinear least squares min Phi(u) for a nonlinear forward map.

    Trust-region reflective iterations on the whitened residual, with the
    forward model's Jacobian.
    """
    n = fwd.n
    x = _start_point(box, n, x0)
    lo = np.full(n, -np.inf)
    hi = np.full(n, np.inf)
    lo[: box.m], hi[: box.m] = box.lower, box.upper
    y = np.asarray(y, float)

    def resid(u):
        return noise.whiten(fwd(u) - y)

    def jac(u):
        return noise.whiten(np.asarray(fwd.jacobian(u), float).T).T

    x = np.clip(x, lo + 1e-12 * (hi - lo), hi - 1e-12 * (hi - lo))
    res = scipy.optimize.least_squares(
        resid, x, jac=jac, bounds=(lo, hi), method="trf", xtol=tol, ftol=tol, gtol=tol, max_nfev=2000
    )
    u = res.x
    g = res.jac.T @ res.fun
    # snap components that sit on a face to it exactly
    um = u[: box.m]
    width = box.upper - box.lower
    um = np.where(um - box.lower <= 1e-8 * width, box.lower, um)
    um = np.where(box.upper - um <= 1e-8 * width, box.upper, um)
    u[: box.m] = um
    lam = recover_multipliers(u, g, box, tol=FACE_TOL)
    station = g + lam @ box.constraint_normals()
    return KKTPoint(
        u_star=u,
        multipliers=lam,
        stationarity_residual=float(np.linalg.norm(station)),
        kkt_residual=float(np.linalg.norm(station)),
        iterations=int(res.nfev),
    )


def projected_preconditioned_step(x, grad, D, alpha: float, box: BoxConstraint) -> np.ndarray:
    """P(x - alpha * D grad)."""
    return project(np.asarray(x, float) - alpha * np.asarray(D, float) @ np.asarray(grad, float), box)
