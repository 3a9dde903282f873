"""Box constraints: projection, log-barrier, active sets and KKT checks.

The box acts on the first m of n components,

    a_i <= u_i <= b_i,   i = 0..m-1,

and is also viewed as 2m linear inequalities h(u) <= 0 with
h_i(u) = a_i - u_i and h_{i+m}(u) = u_i - b_i.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from boxeki.ensemble import _as_particles, empirical_mean

FACE_TOL = 1e-9


class DomainError(ValueError):
    """A flow or barrier was evaluated outside the set where it is defined."""


class BarrierDomainError(DomainError):
    """Raised when a barrier quantity is evaluated on or outside the box."""


class InfeasibleStateError(DomainError):
    """A gated flow was handed a particle outside the closed box."""


@dataclass(frozen=True)
class BoxConstraint:
    lower: np.ndarray
    upper: np.ndarray
    n: int

    def __init__(self, lower, upper, n=None):
        lo = np.atleast_1d(np.asarray(lower, dtype=float)).copy()
        hi = np.atleast_1d(np.asarray(upper, dtype=float)).copy()
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lower and upper bounds must be vectors of equal length")
        bad = np.flatnonzero(~(lo < hi))
        if bad.size:
            i = int(bad[0])
            raise ValueError(
                f"box component {i}: lower bound {lo[i]!r} is not below upper bound {hi[i]!r}"
            )
        m = lo.size
        n = m if n is None else int(n)
        if n < m:
            raise ValueError(f"box constrains {m} components but the dimension is {n}")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "n", n)

    @classmethod
    def uniform(cls, lower: float, upper: float, n: int, m: int | None = None):
        m = n if m is None else m
        return cls(np.full(m, lower), np.full(m, upper), n)

    @property
    def m(self) -> int:
        return self.lower.size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def constraint_values(self, u) -> np.ndarray:
        """The 2m values h(u); feasible iff all are <= 0. Works row-wise."""
        u = np.asarray(u, dtype=float)
        um = u[..., : self.m]
        return np.concatenate([self.lower - um, um - self.upper], axis=-1)

    def constraint_normals(self) -> np.ndarray:
        """Gradients c_j of the 2m constraints, shape (2m, n)."""
        c = np.zeros((2 * self.m, self.n))
        idx = np.arange(self.m)
        c[idx, idx] = -1.0
        c[self.m + idx, idx] = 1.0
        return c

    def is_feasible(self, u, tol: float = 0.0) -> bool:
        return bool(np.all(self.constraint_values(u) <= tol))

    def is_interior(self, u) -> bool:
        return bool(np.all(self.constraint_values(u) < 0.0))


def project(u, box: BoxConstraint) -> np.ndarray:
    """Componentwise clamp of the constrained components; works row-wise."""
    out = np.array(u, dtype=float, copy=True)
    out[..., : box.m] = np.clip(out[..., : box.m], box.lower, box.upper)
    return out


def barrier_value(u, box: BoxConstraint) -> float:
    """-sum_i log(-h_i(u)) for a strictly interior point."""
    h = box.constraint_values(u)
    if np.any(h >= 0.0):
        raise BarrierDomainError("log-barrier evaluated on or outside the box")
    return float(-np.sum(np.log(-h)))


def barrier_gradient(u, box: BoxConstraint) -> np.ndarray:
    """sum_i (1/h_i(u)) grad h_i(u), i.e. minus the gradient of barrier_value.

    Accepts a single point or a (J, n) stack. Component i <= m equals
    1/(u_i - a_i) + 1/(u_i - b_i); unconstrained components are zero.
    """
    u = np.asarray(u, dtype=float)
    um = u[..., : box.m]
    dlo = um - box.lower
    dhi = um - box.upper
    if not (dlo.min() > 0.0 and dhi.max() < 0.0):
        raise BarrierDomainError("barrier gradient requires a strictly interior point")
    gm = 1.0 / dlo + 1.0 / dhi
    if box.m == u.shape[-1]:
        return gm
    g = np.zeros_like(u)
    g[..., : box.m] = gm
    return g


def barrier_hessian_diag(u, box: BoxConstraint) -> np.ndarray:
    """Diagonal of the Hessian of barrier_value at an interior point."""
    u = np.asarray(u, dtype=float)
    d = np.zeros_like(u)
    um = u[: box.m]
    d[: box.m] = 1.0 / (um - box.lower) ** 2 + 1.0 / (um - box.upper) ** 2
    return d


def smoothed_indicator(v, side: str, iota: float):
    """Piecewise-linear surrogate for the indicator of [0, inf) or (-inf, 0].

    side="lower" smooths 1_[0,inf): 1 for v >= 0, 0 for v <= -iota.
    side="upper" smooths 1_(-inf,0]: 1 for v <= 0, 0 for v >= iota.
    """
    if iota <= 0:
        raise ValueError("iota must be positive")
    v = np.asarray(v, dtype=float)
    if side == "lower":
        out = np.clip(1.0 + v / iota, 0.0, 1.0)
    elif side == "upper":
        out = np.clip(1.0 - v / iota, 0.0, 1.0)
    else:
        raise ValueError(f"side must be 'lower' or 'upper', got {side!r}")
    return float(out) if out.ndim == 0 else out


def _outward_gradient_mask(u, grad, box: BoxConstraint, tol: float) -> np.ndarray:
    um = np.asarray(u, float)[..., : box.m]
    gm = np.asarray(grad, float)[..., : box.m]
    at_lo = np.abs(um - box.lower) <= tol
    at_hi = np.abs(um - box.upper) <= tol
    return (at_lo & (gm > 0.0)) | (at_hi & (gm < 0.0))


def active_index_set(e, grad_at_mean, box: BoxConstraint, tol: float = FACE_TOL) -> np.ndarray:
    """Indices where the ensemble mean sits on a face and -grad points outward."""
    mask = _outward_gradient_mask(empirical_mean(e), grad_at_mean, box, tol)
    return np.flatnonzero(mask)


def active_index_set_union(e, grads, box: BoxConstraint, tol: float = FACE_TOL) -> np.ndarray:
    """Union over particles of the per-particle active sets.

    ``grads`` holds the misfit gradient at every particle, shape (J, n).
    """
    mask = _outward_gradient_mask(_as_particles(e), grads, box, tol)
    return np.flatnonzero(mask.any(axis=0))


def transform_preconditioner(C, active, eps: float) -> np.ndarray:
    """Covariance made diagonal on the active set, with eps added everywhere.

    D = C + eps*I on the inactive block, eps on the active diagonal and zero
    in every active row and column off the diagonal.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    D = np.array(C, dtype=float, copy=True)
    active = np.asarray(active, dtype=int)
    D[active, :] = 0.0
    D[:, active] = 0.0
    D[np.diag_indices_from(D)] += eps
    return D


@dataclass(frozen=True)
class KKTPoint:
    u_star: np.ndarray
    multipliers: np.ndarray
    stationarity_residual: float
    kkt_residual: float = 0.0
    iterations: int = 0


def recover_multipliers(u, grad, box: BoxConstraint, tol: float = FACE_TOL) -> np.ndarray:
    """Multipliers read off the faces where the gradient points outward.

    Ordering matches constraint_values: lower faces first, then upper.
    """
    u = np.asarray(u, float)
    g = np.asarray(grad, float)[: box.m]
    um = u[: box.m]
    lam = np.zeros(2 * box.m)
    lo = (np.abs(um - box.lower) <= tol) & (g > 0.0)
    hi = (np.abs(um - box.upper) <= tol) & (g < 0.0)
    lam[: box.m][lo] = g[lo]
    lam[box.m :][hi] = -g[hi]
    return lam


def kkt_residual(u, lam, problem) -> float:
    """Largest violation among the four KKT conditions of a box LS problem.

    ``problem`` needs ``gradient(u)`` and ``box``. Zero iff (u, lam) is a
    KKT pair.
    """
    box = problem.box
    u = np.asarray(u, float)
    lam = np.asarray(lam, float)
    if lam.shape != (2 * box.m,):
        raise ValueError(f"expected {2 * box.m} multipliers, got shape {lam.shape}")
    h = box.constraint_values(u)
    feas = float(np.max(np.maximum(h, 0.0), initial=0.0))
    dual = float(np.max(np.maximum(-lam, 0.0), initial=0.0))
    slack = float(np.max(np.abs(lam * h), initial=0.0))
    station = problem.gradient(u) + lam @ box.constraint_normals()
    return max(feas, dual, slack, float(np.linalg.norm(station)))
