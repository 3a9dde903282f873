"""Per-checkpoint convergence metrics, power-law rate fits and CSV output."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, fields

import numpy as np

from boxeki.ensemble import NoiseModel, _as_particles

CSV_COLUMNS = ("t", "spread", "residual", "kkt_residual", "obs_spread", "obs_residual", "cost_gap")


@dataclass(frozen=True)
class DiagnosticsRecord:
    t: float
    spread: float
    residual: float
    kkt_residual: float
    obs_spread: float
    obs_residual: float
    cost_gap: float

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v):
                raise ValueError(f"diagnostic {f.name} is not finite ({v})")
            if f.name != "t" and v < 0:
                raise ValueError(f"diagnostic {f.name} is negative ({v})")

    def as_dict(self):
        return asdict(self)


def _images(fwd, U):
    return np.atleast_2d(np.asarray(fwd(U), float))


def compute_record(e, truth, kkt, fwd, y, noise: NoiseModel, t: float) -> DiagnosticsRecord:
    """The six metrics, averaged over particles.

    spread        |u_j - mean|^2
    residual      |u_j - u_true|^2
    kkt_residual  |u_j - u*|^2
    obs_spread    |G(u_j) - mean_k G(u_k)|_Gamma^2   (|A e_j|^2 for linear G)
    obs_residual  |G(u_j) - G(u_true)|_Gamma^2        (|A r_j|^2 for linear G)
    cost_gap      (Phi(u_j) - Phi(u*))^2
    """
    U = _as_particles(e)
    truth = np.asarray(truth, float).ravel()
    u_star = np.asarray(getattr(kkt, "u_star", kkt), float).ravel()
    if truth.size != U.shape[1] or u_star.size != U.shape[1]:
        raise ValueError(
            f"truth/u* have sizes {truth.size}/{u_star.size}, ensemble dimension is {U.shape[1]}"
        )
    y = np.asarray(y, float)
    G = _images(fwd, U)
    G_true = _images(fwd, truth[None])[0]
    G_star = _images(fwd, u_star[None])[0]

    dev = U - U.mean(axis=0)
    phi = 0.5 * noise.sq_norm(G - y)
    phi_star = 0.5 * float(noise.sq_norm(G_star - y))
    return DiagnosticsRecord(
        t=float(t),
        spread=float(np.mean(np.sum(dev**2, axis=1))),
        residual=float(np.mean(np.sum((U - truth) ** 2, axis=1))),
        kkt_residual=float(np.mean(np.sum((U - u_star) ** 2, axis=1))),
        obs_spread=float(np.mean(noise.sq_norm(G - G.mean(axis=0)))),
        obs_residual=float(np.mean(noise.sq_norm(G - G_true))),
        cost_gap=float(np.mean((phi - phi_star) ** 2)),
    )


def last_decade(records):
    t_end = max(r.t for r in records)
    return (t_end / 10.0, t_end)


def estimate_rate(records, metric: str, window=None) -> float:
    """Least-squares slope of log(metric) against log(t) over window=(t0, t1).

    The default window is the last decade of checkpoint times.
    """
    if metric not in CSV_COLUMNS[1:]:
        raise ValueError(f"unknown metric {metric!r}")
    records = [r for r in records if r.t > 0]
    if window is None:
        window = last_decade(records)
    lo, hi = window
    sel = [r for r in records if lo * (1 - 1e-12) <= r.t <= hi * (1 + 1e-12)]
    if len(sel) < 5:
        raise ValueError(f"rate fit needs at least 5 records in the window, got {len(sel)}")
    vals = np.array([getattr(r, metric) for r in sel])
    if np.any(vals <= 0):
        raise ValueError(f"metric {metric} has nonpositive values in the fit window")
    t = np.log([r.t for r in sel])
    slope, _ = np.polyfit(t, np.log(vals), 1)
    return float(slope)


def records_to_csv(records, path=None) -> str:
    """Write records with the fixed header; returns the CSV text."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow([f"{getattr(r, c):.12e}" for c in CSV_COLUMNS])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [DiagnosticsRecord(**{k: float(v) for k, v in row.items()}) for row in rows]
