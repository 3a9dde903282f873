"""Ensemble Kalman updates and their continuous-time flows.

Discrete steps return a new :class:`Ensemble`. Flow right-hand sides take a
(J, n) particle array (or an Ensemble) and return the (J, n) array of
velocities, so they can be handed straight to the integrator.

Constraint modes of a flow:

    none                  plain EKI / ESRF limit
    projected             EKI velocity, outward motion stopped at the faces
    transformed           as projected, but preconditioned by D(u), the
                          eps-inflated covariance made diagonal on the
                          active set
    barrier_smoothed      -iota C grad Phi + log-barrier force
    transformed_smoothed  -iota D(u) grad Phi + log-barrier force
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg

from boxeki.constraints import (
    FACE_TOL,
    BoxConstraint,
    InfeasibleStateError,
    active_index_set,
    active_index_set_union,
    barrier_gradient,
    project,
    smoothed_indicator,
    transform_preconditioner,
)
from boxeki.ensemble import Ensemble, NoiseModel, _as_particles, cross_cov

FAMILIES = ("eki", "esrf")
CONSTRAINT_MODES = ("none", "projected", "transformed", "barrier_smoothed", "transformed_smoothed")
GATED_MODES = ("projected", "transformed")
BARRIER_MODES = ("barrier_smoothed", "transformed_smoothed")


@dataclass(frozen=True)
class FlowSpec:
    """Which right-hand side to integrate, and its parameters.

    ``eps`` is the constant inflation floor; with ``schedule="decaying"`` the
    inflation is 1/(t^alpha + R) instead. ``iota`` weighs the misfit against
    the log barrier, ``ramp_width`` is the width of the linear ramp that
    replaces the face indicator in gated modes.
    """

    family: str = "eki"
    constraint_mode: str = "none"
    iota: float = 1.0
    eps: float = 1.0
    schedule: str = "constant"
    alpha: float = 0.75
    R: float = 1.0
    ramp_width: float = 1e-3
    nonlinear_inflation: str = "off"
    theta: float = 0.0
    active_set: str = "mean"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.constraint_mode not in CONSTRAINT_MODES:
            raise ValueError(
                f"constraint_mode must be one of {CONSTRAINT_MODES}, got {self.constraint_mode!r}"
            )
        if self.schedule not in ("constant", "decaying"):
            raise ValueError(f"schedule must be 'constant' or 'decaying', got {self.schedule!r}")
        if self.schedule == "decaying":
            if not 0.0 < self.alpha < 1.0:
                raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
            if not self.R > 0.0:
                raise ValueError(f"R must be positive, got {self.R}")
        if self.eps < 0.0:
            raise ValueError("eps must be non-negative")
        if self.constraint_mode in BARRIER_MODES and not self.iota > 0.0:
            raise ValueError("iota must be positive when a barrier term is active")
        if self.constraint_mode in GATED_MODES and not self.ramp_width > 0.0:
            raise ValueError("ramp_width must be positive")
        if self.nonlinear_inflation not in ("off", "jacobian"):
            raise ValueError("nonlinear_inflation must be 'off' or 'jacobian'")
        if self.theta < 0.0:
            raise ValueError("theta must be non-negative")
        if self.active_set not in ("mean", "union"):
            raise ValueError("active_set must be 'mean' or 'union'")

    @property
    def inflated(self) -> bool:
        return self.constraint_mode in ("transformed", "transformed_smoothed")

    def with_(self, **changes) -> "FlowSpec":
        return replace(self, **changes)


def inflation_schedule(t: float, spec: FlowSpec) -> float:
    """eps(t): constant ``spec.eps`` or 1/(t^alpha + R)."""
    if t < 0:
        raise ValueError("time must be non-negative")
    if spec.schedule == "constant":
        return spec.eps
    return 1.0 / (t**spec.alpha + spec.R)


# ---------------------------------------------------------------------------
# discrete updates


def _spawn_streams(rng, J):
    if isinstance(rng, np.random.Generator):
        return rng.spawn(J)
    return [np.random.default_rng(s) for s in np.random.SeedSequence(rng).spawn(J)]


def eki_discrete_step(
    e, fwd, y, noise: NoiseModel, rng=None, h: float = 1.0, perturb: bool = True
) -> Ensemble:
    """One analysis step u_j + C^{up}(C^{pp} + Gamma/h)^{-1}(y_j - G(u_j)).

    y_j = y + eta_j with eta_j ~ N(0, Gamma/h) drawn from a separate stream
    per particle index (``rng`` may be a Generator or an integer seed).
    """
    U = _as_particles(e)
    J = U.shape[0]
    G = np.asarray(fwd(U), dtype=float)
    cup = cross_cov(U, G)
    cpp = cross_cov(G, G)
    y = np.asarray(y, dtype=float)
    targets = np.broadcast_to(y, G.shape).copy()
    if perturb:
        streams = _spawn_streams(np.random.default_rng() if rng is None else rng, J)
        scale = 1.0 / np.sqrt(h)
        for j, s in enumerate(streams):
            targets[j] += scale * noise.sample(s)
    S = cpp + noise.gamma / h
    try:
        W = scipy.linalg.solve(S, (targets - G).T, assume_a="sym").T
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("singular innovation covariance C^pp + Gamma") from exc
    return Ensemble(U + W @ cup.T)


def projected_eki_step(e, fwd, y, noise: NoiseModel, box: BoxConstraint, h: float) -> Ensemble:
    """Projected analysis step with step size h (no perturbed observations).

    Particles are projected before the statistics are formed, updated with
    Gamma/h in the gain, and projected again.
    """
    if not h > 0:
        raise ValueError("step size h must be positive")
    U = project(_as_particles(e), box)
    G = np.asarray(fwd(U), dtype=float)
    cup = cross_cov(U, G)
    cpp = cross_cov(G, G)
    S = cpp + noise.gamma / h
    try:
        W = scipy.linalg.solve(S, (np.asarray(y, float) - G).T, assume_a="sym").T
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("singular system in projected step") from exc
    return Ensemble(project(U + W @ cup.T, box))


# ---------------------------------------------------------------------------
# continuous-time right-hand sides


def _innovations(G, y, family):
    if family == "esrf":
        return y - 0.5 * G - 0.5 * G.mean(axis=0)
    return y - G


def kalman_velocity(U, G, y, noise: NoiseModel, family: str = "eki") -> np.ndarray:
    """C^{up} Gamma^{-1} (innovation_j) for every particle."""
    J = U.shape[0]
    dU = U - U.mean(axis=0)
    dG = G - G.mean(axis=0)
    W = noise.solve(_innovations(G, y, family))
    # (1/J) sum_k <G_k - G_bar, w_j> (u_k - u_bar)
    return (W @ dG.T) @ dU / J


def eki_flow_rhs(e, fwd, y, noise: NoiseModel) -> np.ndarray:
    """Continuous-time EKI limit; equals -C(u) grad Phi(u_j) for linear G."""
    U = _as_particles(e)
    return kalman_velocity(U, np.asarray(fwd(U), float), np.asarray(y, float), noise, "eki")


def esrf_flow_rhs(e, fwd, y, noise: NoiseModel) -> np.ndarray:
    """Continuous-time ESRF limit with innovation y - G(u_j)/2 - G_bar/2."""
    U = _as_particles(e)
    return kalman_velocity(U, np.asarray(fwd(U), float), np.asarray(y, float), noise, "esrf")


def nonlinear_inflated_rhs(e, fwd, y, noise: NoiseModel, theta: float, C0=None) -> np.ndarray:
    """(C^{up} + theta C0 DG(u_bar)^T) Gamma^{-1} (y - G(u_j)).

    ``C0`` defaults to the identity (the prior covariance in whitened
    coordinates).
    """
    U = _as_particles(e)
    y = np.asarray(y, float)
    G = np.asarray(fwd(U), float)
    v = kalman_velocity(U, G, y, noise, "eki")
    if theta == 0.0:
        return v
    Jac = np.asarray(fwd.jacobian(U.mean(axis=0)), float)
    W = noise.solve(y - G)
    grad_like = W @ Jac  # rows: DG^T Gamma^{-1} r_j
    if C0 is not None:
        grad_like = grad_like @ np.asarray(C0, float).T
    return v + theta * grad_like


def _check_feasible(U, box: BoxConstraint):
    h = box.constraint_values(U)
    if np.any(h > 0.0):
        j, i = np.unravel_index(np.argmax(h), h.shape)
        raise InfeasibleStateError(
            f"particle {j} violates bound {i % box.m} by {h[j, i]:.3e}"
        )


def gate_velocity(U, V, box: BoxConstraint, ramp_width: float, face_tol: float = FACE_TOL):
    """Stop outward motion at the faces, with the face test smoothed.

    The face cases of the projected limit are blended with the interior case
    by w = smoothed_indicator(distance-to-face sign flipped): w = 1 on the face,
    0 at distance ``ramp_width`` inside. The outward part of a velocity
    component is scaled by 1 - w, the inward part passes unchanged. Particles
    then approach a face exponentially instead of hitting it in finite time,
    which keeps the field Lipschitz. Components beyond m are not gated.
    ``face_tol`` widens the face by a rounding-level margin.
    """
    V = np.array(V, dtype=float, copy=True)
    m = box.m
    um = U[:, :m]
    vm = V[:, :m]
    w_lo = smoothed_indicator(box.lower + face_tol - um, "lower", ramp_width)
    w_hi = smoothed_indicator(um - box.upper + face_tol, "lower", ramp_width)
    out_lo = vm < 0.0
    out_hi = vm > 0.0
    vm[out_lo] *= 1.0 - w_lo[out_lo]
    vm[out_hi] *= 1.0 - w_hi[out_hi]
    V[:, :m] = vm
    return V


class FlowContext:
    """Bundles a forward model, data and box with a FlowSpec.

    ``rhs(t, U)`` is the velocity field handed to the integrator.
    """

    def __init__(
        self,
        spec: FlowSpec,
        fwd,
        y,
        noise: NoiseModel,
        box: BoxConstraint | None = None,
        prior_cov=None,
    ):
        if spec.constraint_mode != "none" and box is None:
            raise ValueError(f"constraint mode {spec.constraint_mode!r} needs a box")
        self.spec = spec
        self.fwd = fwd
        self.y = np.asarray(y, dtype=float)
        self.noise = noise
        self.box = box
        self.prior_cov = None if prior_cov is None else np.asarray(prior_cov, dtype=float)
        self.linear = bool(getattr(fwd, "is_linear", False))
        if self.linear:
            A = fwd.matrix
            self._A = A
            self._AtGi = A.T @ noise.inverse  # n x K
        self.evaluations = 0

    # -- pieces -----------------------------------------------------------

    def gradients(self, U, G=None):
        """grad Phi at every particle (linear forward models only)."""
        G = U @ self._A.T if G is None else G
        return (G - self.y) @ self._AtGi.T

    def _linear_direction_grads(self, U, G, ubar=None):
        grads = self.gradients(U, G)
        ubar = U.mean(axis=0) if ubar is None else ubar
        grad_mean = self._AtGi @ (self._A @ ubar - self.y)
        if self.spec.family == "esrf":
            grads = 0.5 * (grads + grad_mean)
        return grads, grad_mean

    def _active(self, U, grads_particles, grad_mean, ubar=None):
        box = self.box
        if ubar is not None and self.spec.active_set == "mean":
            um = ubar[: box.m]
            # cheap exit: mean well inside the box
            if np.min(um - box.lower) > FACE_TOL and np.min(box.upper - um) > FACE_TOL:
                return ()
        if self.spec.active_set == "union":
            return active_index_set_union(U, grads_particles, self.box)
        return active_index_set(U, grad_mean, self.box)

    def preconditioned_descent(self, t, U):
        """The ungated velocity: -P(u) g_j, with P = C or D(u)."""
        spec = self.spec
        G = np.asarray(self.fwd(U), dtype=float)
        eps = inflation_schedule(t, spec) if spec.inflated else 0.0
        if self.linear:
            ubar = U.sum(axis=0) / U.shape[0]
            grads, grad_mean = self._linear_direction_grads(U, G, ubar)
            dU = U - ubar
            if not spec.inflated:
                # C g_j without forming C: (1/J) dU^T (dU g_j)
                return -((grads @ dU.T) @ dU) / U.shape[0]
            plain = grads if spec.family == "eki" else self.gradients(U, G)
            active = self._active(U, plain, grad_mean, ubar) if self.box is not None else ()
            if len(active) == 0:
                # D = C + eps I, applied in factored form
                return -(((grads @ dU.T) @ dU) / U.shape[0] + eps * grads)
            C = dU.T @ dU / U.shape[0]
            D = transform_preconditioner(C, active, eps)
            return -grads @ D
        # nonlinear: derivative-free C^{up} part plus Jacobian-based inflation
        v = kalman_velocity(U, G, self.y, self.noise, spec.family)
        theta = spec.theta if spec.nonlinear_inflation == "jacobian" else 0.0
        if not spec.inflated and theta == 0.0:
            return v
        ubar = U.mean(axis=0)
        Jac = np.asarray(self.fwd.jacobian(ubar), dtype=float)
        W = self.noise.solve(_innovations(G, self.y, spec.family))
        descent = W @ Jac  # -grad surrogate per particle
        if theta:
            v = v + theta * self._apply_prior(descent)
        if spec.inflated:
            v = v + eps * descent
            if self.box is not None:
                g_mean = -(self.noise.solve(self.y - np.asarray(self.fwd(ubar), float)) @ Jac)
                active = self._active(U, -descent, g_mean)
                if len(active):
                    v[:, active] = eps * descent[:, active]
        return v

    def _apply_prior(self, rows):
        return rows if self.prior_cov is None else rows @ self.prior_cov.T

    # -- full right-hand sides ------------------------------------------------

    def rhs(self, t, U):
        U = _as_particles(U)
        self.evaluations += 1
        mode = self.spec.constraint_mode
        if mode == "none":
            if self.spec.nonlinear_inflation == "jacobian" and not self.linear:
                return self.preconditioned_descent(t, U)
            if self.linear and self.spec.nonlinear_inflation == "jacobian":
                grads, _ = self._linear_direction_grads(U, U @ self._A.T)
                dU = U - U.mean(axis=0)
                drift = -((grads @ dU.T) @ dU) / U.shape[0]
                return drift - self.spec.theta * self._apply_prior(grads)
            G = np.asarray(self.fwd(U), dtype=float)
            return kalman_velocity(U, G, self.y, self.noise, self.spec.family)
        if mode in GATED_MODES:
            _check_feasible(U, self.box)
            V = self.preconditioned_descent(t, U)
            return gate_velocity(U, V, self.box, self.spec.ramp_width)
        # barrier modes
        force = barrier_gradient(U, self.box)
        return self.spec.iota * self.preconditioned_descent(t, U) + force

    __call__ = rhs

    def domain(self, U) -> bool:
        """Whether U is an admissible state for this flow."""
        mode = self.spec.constraint_mode
        if mode == "none":
            return bool(np.all(np.isfinite(U)))
        if mode in BARRIER_MODES:
            return self.box.is_interior(U)
        return self.box.is_feasible(U)


def transformed_flow_rhs(e, fwd, y, noise, box, spec: FlowSpec, t: float = 0.0) -> np.ndarray:
    """Gated flow driven by -D(u) g_j (or -C g_j for ``projected`` mode).

    g_j is grad Phi(u_j) for EKI and (grad Phi(u_j) + grad Phi(u_bar))/2 for
    ESRF. Raises InfeasibleStateError for particles outside the box.
    """
    if spec.constraint_mode not in GATED_MODES:
        spec = spec.with_(constraint_mode="transformed")
    return FlowContext(spec, fwd, y, noise, box).rhs(t, _as_particles(e))


def projected_flow_rhs(e, fwd, y, noise, box, spec: FlowSpec | None = None, t: float = 0.0):
    """Projected EKI limit: the Kalman velocity with outward motion stopped at faces."""
    spec = FlowSpec(constraint_mode="projected") if spec is None else spec
    return FlowContext(spec.with_(constraint_mode="projected"), fwd, y, noise, box).rhs(
        t, _as_particles(e)
    )


def smoothed_flow_rhs(e, fwd, y, noise, box, spec: FlowSpec, t: float = 0.0) -> np.ndarray:
    """-iota P(u) g_j + sum_i (1/h_i) grad h_i with P = C or D(u).

    Uses C for ``barrier_smoothed`` and D(u) with eps(t) for
    ``transformed_smoothed``. Raises BarrierDomainError on boundary contact.
    """
    if spec.constraint_mode not in BARRIER_MODES:
        raise ValueError("smoothed_flow_rhs needs a barrier constraint mode")
    return FlowContext(spec, fwd, y, noise, box).rhs(t, _as_particles(e))


def make_flow(spec: FlowSpec, fwd, y, noise, box=None, prior_cov=None) -> FlowContext:
    return FlowContext(spec, fwd, y, noise, box, prior_cov)
