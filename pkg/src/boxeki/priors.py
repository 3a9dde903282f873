"""Gaussian priors and initial ensembles.

The Karhunen-Loeve prior lives on the unit square with the Dirichlet
Laplacian, so the eigenpairs of sigma^2 (I - Laplacian)^(-nu) are known in
closed form:

    lambda_{k,l} = sigma^2 (1 + pi^2 (k^2 + l^2))^(-nu),
    phi_{k,l}(x, y) = 2 sin(k pi x) sin(l pi y).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from boxeki.constraints import BoxConstraint, project
from boxeki.ensemble import Ensemble

INTERIOR_PUSHBACK = 1e-6


@lru_cache(maxsize=32)
def _sine_basis(modes: tuple, n_cells: int) -> np.ndarray:
    x = np.linspace(0.0, 1.0, n_cells + 1)
    k = np.array([m[0] for m in modes])[:, None]
    l = np.array([m[1] for m in modes])[:, None]
    sx = np.sin(math.pi * k * x[None, :])
    sy = np.sin(math.pi * l * x[None, :])
    basis = 2.0 * sx[:, :, None] * sy[:, None, :]
    basis.setflags(write=False)
    return basis


@dataclass(frozen=True)
class KLPrior:
    """Truncated KL expansion of a Gaussian field on the unit square."""

    eigenvalues: np.ndarray
    modes: tuple
    n_cells: int
    sigma2: float
    nu: float
    eigenfunctions: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, dtype=float).copy()
        lam.setflags(write=False)
        object.__setattr__(self, "eigenvalues", lam)
        object.__setattr__(self, "eigenfunctions", _sine_basis(tuple(self.modes), self.n_cells))

    @property
    def truncation(self) -> int:
        return len(self.modes)

    def basis(self, n_cells: int | None = None) -> np.ndarray:
        """Eigenfunctions on the (n_cells+1)^2 node grid, shape (modes, N+1, N+1)."""
        if n_cells is None or n_cells == self.n_cells:
            return self.eigenfunctions
        return _sine_basis(tuple(self.modes), n_cells)

    def field(self, u, n_cells: int | None = None) -> np.ndarray:
        """Nodal field sum_j sqrt(lambda_j) u_j phi_j for whitened coordinates u."""
        u = np.asarray(u, dtype=float)
        if u.shape[-1] != self.truncation:
            raise ValueError(f"expected {self.truncation} coefficients, got {u.shape[-1]}")
        return np.tensordot(np.sqrt(self.eigenvalues) * u, self.basis(n_cells), axes=(-1, 0))

    def field_from_coefficients(self, theta, n_cells: int | None = None) -> np.ndarray:
        """Nodal field sum_j theta_j phi_j."""
        return np.tensordot(np.asarray(theta, float), self.basis(n_cells), axes=(-1, 0))

    def whiten(self, theta) -> np.ndarray:
        """KL coefficients theta_j = sqrt(lambda_j) xi_j  ->  xi."""
        return np.asarray(theta, float) / np.sqrt(self.eigenvalues)

    def grid_inner(self, f, g, n_cells: int | None = None) -> float:
        """Discrete L2 inner product h^2 sum f g over the node grid."""
        N = self.n_cells if n_cells is None else n_cells
        return float(np.sum(f * g)) / N**2


def build_kl_prior(
    n_cells: int = 16,
    sigma2: float = 1.0,
    nu: float = 2.0,
    truncation: int = 64,
    dim: int = 2,
) -> KLPrior:
    """Leading ``truncation`` eigenpairs of sigma2 (I - Laplacian)^(-nu)."""
    if dim != 2:
        raise ValueError("only the unit square (dim=2) is supported")
    if not nu > dim / 2:
        raise ValueError(f"smoothness nu={nu} must exceed d/2={dim / 2}")
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    # sine modes k, l < N are exactly orthonormal on the node grid
    capacity = (n_cells - 1) ** 2
    if truncation < 1 or truncation > capacity:
        raise ValueError(
            f"truncation {truncation} exceeds the {capacity} modes a {n_cells}-cell grid resolves"
        )
    kk, ll = np.meshgrid(np.arange(1, n_cells), np.arange(1, n_cells), indexing="ij")
    kk, ll = kk.ravel(), ll.ravel()
    lam = sigma2 * (1.0 + math.pi**2 * (kk**2 + ll**2)) ** (-nu)
    order = np.lexsort((ll, kk, -lam))[:truncation]
    modes = tuple((int(kk[i]), int(ll[i])) for i in order)
    return KLPrior(lam[order], modes, n_cells, float(sigma2), float(nu))


def kl_sample(prior: KLPrior, count: int, seed=None, whitened: bool = False, xi=None) -> Ensemble:
    """Draw ``count`` KL coefficient vectors sqrt(lambda) * xi, xi ~ N(0, I).

    With ``whitened=True`` the standard-normal xi are returned instead, which
    is the parameterisation used by the Darcy forward model.
    """
    if xi is None:
        rng = np.random.default_rng(seed)
        xi = rng.standard_normal((count, prior.truncation))
    xi = np.asarray(xi, dtype=float).reshape(count, prior.truncation)
    if whitened:
        return Ensemble(xi)
    return Ensemble(np.sqrt(prior.eigenvalues) * xi)


def parameter_nodes(n: int, length: float = math.pi) -> np.ndarray:
    return length * np.arange(1, n + 1) / (n + 1)


def pushback_interior(u, box: BoxConstraint, margin: float = INTERIOR_PUSHBACK) -> np.ndarray:
    """Clamp constrained components to [a + margin, b - margin]."""
    out = np.array(u, dtype=float, copy=True)
    width = box.upper - box.lower
    margin = np.minimum(margin, 0.25 * width)
    out[..., : box.m] = np.clip(out[..., : box.m], box.lower + margin, box.upper - margin)
    return out


def fourier_initial_ensemble(
    n: int,
    J: int,
    seed=None,
    box: BoxConstraint | None = None,
    n_modes: int = 10,
    nodes=None,
    pushback: float = INTERIOR_PUSHBACK,
) -> Ensemble:
    """Random sine series sum_k xi_k sin(k x), xi_k ~ N(0, k^-2), k = 1..n_modes.

    Each particle is evaluated at the parameter nodes, projected onto the box
    and pushed ``pushback`` inside every face (so barrier flows can start
    from it). Pass ``pushback=0`` for a plain projection.
    """
    if J < 1:
        raise ValueError("ensemble size must be at least 1")
    x = parameter_nodes(n) if nodes is None else np.asarray(nodes, float)
    rng = np.random.default_rng(seed)
    k = np.arange(1, n_modes + 1)
    xi = rng.standard_normal((J, n_modes)) / k
    particles = xi @ np.sin(np.outer(k, x))
    if box is not None:
        particles = project(particles, box)
        if pushback > 0:
            particles = pushback_interior(particles, box, pushback)
    return Ensemble(particles)
