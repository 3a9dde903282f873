"""Adaptive Dormand-Prince 5(4) integration of ensemble flows.

Steps are clipped to land exactly on the checkpoint times. With the
feasibility guard on, a trial step is rejected (and the step halved) when
any stage leaves the flow's domain or the accepted state fails the domain
predicate; the state is never projected back. The step size that failed is
remembered as a soft cap on later proposals, relaxed by CAP_RELAX per
accepted step, so a flow pressed against a face does not alternate between
growing the step and being rejected.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from boxeki.constraints import DomainError
from boxeki.ensemble import Ensemble, _as_particles

log = logging.getLogger(__name__)

# Dormand & Prince (1980), RK5(4)7M
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B_LOW = np.array(
    [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
)
_E = _B - _B_LOW

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 5.0
CAP_RELAX = 1.05


class StepSizeUnderflow(RuntimeError):
    """The step size fell below what floating point can resolve."""

    def __init__(self, t, state, message=None):
        self.t = t
        self.state = np.array(state)
        super().__init__(message or f"step size underflow at t={t:.6e}")


@dataclass(frozen=True)
class IntegrationConfig:
    t_end: float
    rel_tol: float = 1e-6
    abs_tol: float = 1e-9
    max_step: float = math.inf
    checkpoints: int = 25
    feasibility_guard: bool = True
    max_steps: int = 10_000_000

    def __post_init__(self):
        if not self.t_end > 0:
            raise ValueError("t_end must be positive")
        if not (self.rel_tol > 0 and self.abs_tol > 0):
            raise ValueError("tolerances must be positive")
        if not self.max_step > 0:
            raise ValueError("max_step must be positive")
        if self.checkpoints < 2:
            raise ValueError("need at least two checkpoints")


@dataclass
class Trajectory:
    times: np.ndarray
    snapshots: list
    stats: dict = field(default_factory=dict)
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.times)

    @property
    def final(self) -> Ensemble:
        return self.snapshots[-1]


def checkpoint_grid(t_end: float, count: int) -> np.ndarray:
    """t = 0 followed by ``count`` log-spaced times from 1e-2 to t_end."""
    if count < 2:
        raise ValueError("count must be at least 2")
    if not t_end > 1e-2:
        raise ValueError("t_end must exceed the first checkpoint 1e-2")
    ts = np.logspace(-2.0, math.log10(t_end), count)
    ts[0] = 1e-2
    ts[-1] = t_end
    return np.concatenate([[0.0], ts])


def _error_norm(err, y, y_new, rtol, atol):
    scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
    return math.sqrt(float(np.mean((err / scale) ** 2)))


def _initial_step(rhs, t0, y0, f0, rtol, atol, domain_errors):
    scale = atol + rtol * np.abs(y0)
    d0 = math.sqrt(float(np.mean((y0 / scale) ** 2)))
    d1 = math.sqrt(float(np.mean((f0 / scale) ** 2)))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    try:
        f1 = rhs(t0 + h0, y0 + h0 * f0)
        d2 = math.sqrt(float(np.mean(((f1 - f0) / scale) ** 2))) / h0
    except domain_errors:
        return h0 * 1e-3
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1)


def integrate(rhs, e0, cfg: IntegrationConfig, domain=None, times=None, callback=None) -> Trajectory:
    """Integrate dU/dt = rhs(t, U) from the ensemble e0 over [0, cfg.t_end].

    ``times`` overrides the default log-spaced checkpoint grid. ``domain``
    is an optional predicate on states checked after every accepted step
    when the feasibility guard is on. ``callback(t, ensemble)`` is called at
    every checkpoint.
    """
    y = np.array(_as_particles(e0), dtype=float)
    shape = y.shape
    times = checkpoint_grid(cfg.t_end, cfg.checkpoints) if times is None else np.asarray(times, float)
    if times[0] != 0.0 or np.any(np.diff(times) <= 0):
        raise ValueError("checkpoint times must start at 0 and increase strictly")
    rtol, atol = cfg.rel_tol, cfg.abs_tol
    guard = cfg.feasibility_guard
    domain_errors = (DomainError,) if guard else ()

    t = 0.0
    f = np.asarray(rhs(t, y), dtype=float).reshape(shape)
    snapshots = [Ensemble(y)]
    if callback is not None:
        callback(t, snapshots[-1])
    h = min(_initial_step(rhs, t, y, f, rtol, atol, domain_errors), cfg.max_step)
    n_steps = n_rejected = n_domain = 0
    n_eval = 2
    k = [None] * 7
    cap = math.inf  # soft limit from the last domain rejection

    for t_next in times[1:]:
        while t < t_next:
            if n_steps + n_rejected > cfg.max_steps:
                raise StepSizeUnderflow(t, y, f"step limit {cfg.max_steps} exceeded at t={t:.6e}")
            h_try = min(h, cap, t_next - t, cfg.max_step)
            landing = h_try >= t_next - t
            if h_try <= 16 * np.finfo(float).eps * max(abs(t), 1.0):
                raise StepSizeUnderflow(t, y)
            k[0] = f
            ok = True
            try:
                for s in range(1, 7):
                    ys = y.copy()
                    for a, ks in zip(_A[s], k):
                        if a:
                            ys += (h_try * a) * ks
                    k[s] = np.asarray(rhs(t + _C[s] * h_try, ys), dtype=float).reshape(shape)
                    n_eval += 1
            except domain_errors:
                ok = False
            if ok:
                y_new = ys  # stage 7 is evaluated at the 5th-order solution
                err = h_try * sum(c * ks for c, ks in zip(_E, k) if c)
                en = _error_norm(err, y, y_new, rtol, atol)
                if not np.isfinite(en):
                    en = math.inf
            if not ok or (guard and domain is not None and en <= 1.0 and not domain(y_new)):
                n_domain += 1
                n_rejected += 1
                h = 0.5 * h_try
                cap = 0.9 * h_try
                continue
            if en <= 1.0:
                t = t_next if landing else t + h_try
                y = y_new
                f = k[6]
                n_steps += 1
                cap *= CAP_RELAX
                factor = MAX_FACTOR if en == 0 else min(MAX_FACTOR, SAFETY * en ** (-0.2))
                # a step shortened to hit a checkpoint must not shrink the proposal
                h = max(h, h_try * factor) if landing else h_try * factor
            else:
                n_rejected += 1
                h = h_try * max(MIN_FACTOR, SAFETY * en ** (-0.2))
        snap = Ensemble(y)
        snapshots.append(snap)
        if callback is not None:
            callback(t, snap)

    stats = {
        "steps": n_steps,
        "rejected": n_rejected,
        "domain_rejections": n_domain,
        "rhs_evaluations": n_eval,
    }
    log.debug("integration finished: %s", stats)
    return Trajectory(np.array(times), snapshots, stats)
