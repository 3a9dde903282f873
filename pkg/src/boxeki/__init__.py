"""Box-constrained ensemble Kalman inversion: flows, forward models, oracles, diagnostics."""

from boxeki.constraints import (
    BarrierDomainError,
    BoxConstraint,
    DomainError,
    InfeasibleStateError,
    KKTPoint,
    project,
)
from boxeki.diagnostics import DiagnosticsRecord, compute_record, estimate_rate
from boxeki.dynamics import FlowSpec, make_flow
from boxeki.ensemble import Ensemble, NoiseModel, empirical_cov, empirical_mean
from boxeki.integrator import IntegrationConfig, Trajectory, integrate
from boxeki.oracle import solve_barrier, solve_box_ls

__version__ = "0.1.0"

__all__ = [
    "BarrierDomainError",
    "BoxConstraint",
    "DiagnosticsRecord",
    "DomainError",
    "Ensemble",
    "FlowSpec",
    "InfeasibleStateError",
    "IntegrationConfig",
    "KKTPoint",
    "NoiseModel",
    "Trajectory",
    "compute_record",
    "empirical_cov",
    "empirical_mean",
    "estimate_rate",
    "integrate",
    "make_flow",
    "project",
    "solve_barrier",
    "solve_box_ls",
]
