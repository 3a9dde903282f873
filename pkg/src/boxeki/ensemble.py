"""Ensemble container, observation-noise model and empirical moments.

All moments use the 1/J normalisation, not the unbiased 1/(J-1).
Particles are stored row-wise: an ensemble of J particles in R^n is a
(J, n) array.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg


class Ensemble:
    """Immutable collection of J particles in R^n.

    The particle array is copied on construction and marked read-only, so
    snapshots can be shared freely.
    """

    __slots__ = ("_particles",)

    def __init__(self, particles):
        arr = np.array(particles, dtype=float, copy=True)
        if arr.ndim == 1:
            arr = arr[np.newaxis, :]
        if arr.ndim != 2:
            raise ValueError("particles must be a (J, n) array or a list of vectors")
        if arr.shape[0] < 1:
            raise ValueError("an ensemble needs at least one particle")
        arr.setflags(write=False)
        self._particles = arr

    @property
    def particles(self) -> np.ndarray:
        return self._particles

    @property
    def J(self) -> int:
        return self._particles.shape[0]

    @property
    def n(self) -> int:
        return self._particles.shape[1]

    def __len__(self):
        return self.J

    def __iter__(self):
        return iter(self._particles)

    def __getitem__(self, j):
        return self._particles[j]

    def copy(self) -> "Ensemble":
        return Ensemble(self._particles)

    def as_array(self) -> np.ndarray:
        """Writable copy of the particle array."""
        return np.array(self._particles)

    def __repr__(self):
        return f"Ensemble(J={self.J}, n={self.n})"


def _as_particles(e) -> np.ndarray:
    if isinstance(e, Ensemble):
        return e.particles
    arr = np.asarray(e, dtype=float)
    if arr.ndim != 2:
        raise ValueError("expected a (J, n) particle array")
    return arr


def empirical_mean(e) -> np.ndarray:
    return _as_particles(e).mean(axis=0)


def empirical_cov(e) -> np.ndarray:
    """Empirical covariance (1/J) sum_j (u_j - mean)(u_j - mean)^T."""
    u = _as_particles(e)
    du = u - u.mean(axis=0)
    c = du.T @ du / u.shape[0]
    # exact symmetry; the product above is symmetric only up to rounding
    return 0.5 * (c + c.T)


def cross_cov(e, images) -> np.ndarray:
    """Parameter/observation cross covariance C^{up}, shape (n, K)."""
    u = _as_particles(e)
    g = np.asarray(images, dtype=float)
    if g.ndim == 1:
        g = g[:, np.newaxis]
    if g.shape[0] != u.shape[0]:
        raise ValueError(
            f"need one image per particle: got {g.shape[0]} images for {u.shape[0]} particles"
        )
    du = u - u.mean(axis=0)
    dg = g - g.mean(axis=0)
    return du.T @ dg / u.shape[0]


@dataclass(frozen=True)
class NoiseModel:
    """Gaussian observation noise N(0, gamma) with a cached Cholesky factor."""

    gamma: np.ndarray
    _chol: np.ndarray = field(init=False, repr=False, compare=False)
    _inv: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        g = np.array(self.gamma, dtype=float, copy=True)
        if g.ndim != 2 or g.shape[0] != g.shape[1]:
            raise ValueError("noise covariance must be a square matrix")
        if not np.allclose(g, g.T, rtol=1e-12, atol=1e-14 * np.abs(g).max()):
            raise ValueError("noise covariance must be symmetric")
        try:
            chol = scipy.linalg.cholesky(g, lower=True)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("noise covariance is not positive definite") from exc
        inv = scipy.linalg.cho_solve((chol, True), np.eye(g.shape[0]))
        g.setflags(write=False)
        inv = 0.5 * (inv + inv.T)
        inv.setflags(write=False)
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "_chol", chol)
        object.__setattr__(self, "_inv", inv)

    @classmethod
    def isotropic(cls, std: float, K: int) -> "NoiseModel":
        """Gamma = std^2 I_K."""
        return cls(std**2 * np.eye(K))

    @property
    def K(self) -> int:
        return self.gamma.shape[0]

    @property
    def inverse(self) -> np.ndarray:
        return self._inv

    @property
    def cholesky(self) -> np.ndarray:
        return self._chol

    def solve(self, r):
        """Gamma^{-1} r; r may be a vector or a stack of row vectors."""
        r = np.asarray(r, dtype=float)
        return r @ self._inv

    def whiten(self, r):
        """L^{-1} r with Gamma = L L^T, applied to the last axis."""
        r = np.asarray(r, dtype=float)
        return scipy.linalg.solve_triangular(self._chol, r.T, lower=True).T

    def sq_norm(self, r):
        """||r||_Gamma^2 = r^T Gamma^{-1} r, row-wise for stacked inputs."""
        r = np.asarray(r, dtype=float)
        return np.einsum("...k,...k->...", r, r @ self._inv)

    def inner(self, a, b):
        return np.einsum("...k,...k->...", np.asarray(a, float), np.asarray(b, float) @ self._inv)

    def sample(self, rng: np.random.Generator, size=None) -> np.ndarray:
        shape = (self.K,) if size is None else (size, self.K)
        z = rng.standard_normal(shape)
        return z @ self._chol.T


def weighted_misfit(r, noise: NoiseModel) -> float:
    """Half the squared Gamma-weighted norm of a residual r."""
    r = np.asarray(r, dtype=float)
    if r.shape[-1] != noise.K:
        raise ValueError(f"residual has length {r.shape[-1]}, noise model expects {noise.K}")
    return 0.5 * float(noise.sq_norm(r))
