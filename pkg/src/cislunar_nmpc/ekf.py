"""
Extended Kalman filter with range and line-of-sight measurements.

Both measurements are taken relative to a reference body (the Moon by
default): the range ``|r - r_ref|`` and the unit vector ``(r - r_ref)/range``.
Process noise is white acceleration on the velocity channels. The applied
impulses are treated as known inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn
from .dynamics import Point, SystemParams, libration_point

SIGMA_Q = 1e-3
SIGMA_RANGE = 1e-6
SIGMA_LOS = 1e-5
P0_SCALE = 1e-6
REFERENCE_BODIES = ("moon", "earth", "L1", "L2")


def reference_position(body: str = "moon", params: SystemParams = SystemParams()) -> np.ndarray:
    if body == "moon":
        return np.array([1.0 - params.mu, 0.0, 0.0])
    if body == "earth":
        return np.array([-params.mu, 0.0, 0.0])
    if body in ("L1", "L2"):
        return libration_point(Point(body), params).position.copy()
    raise ValueError(f"unknown reference body {body!r}; choose from {REFERENCE_BODIES}")


@dataclass
class EkfConfig:
    sigma_q: float = SIGMA_Q
    sigma_range: float = SIGMA_RANGE
    sigma_los: float = SIGMA_LOS
    p0_scale: float = P0_SCALE
    reference: str = "moon"

    def __post_init__(self):
        if min(self.sigma_q, self.sigma_range, self.sigma_los) < 0 or self.p0_scale <= 0:
            raise ValueError("noise levels must be >= 0 and p0_scale > 0")
        if self.reference not in REFERENCE_BODIES:
            raise ValueError(f"reference must be one of {REFERENCE_BODIES}")

    @property
    def P0(self) -> np.ndarray:
        return self.p0_scale * np.eye(6)

    def measurement_cov(self) -> np.ndarray:
        return np.diag([self.sigma_range ** 2] + [self.sigma_los ** 2] * 3)


@dataclass
class EstimatorState:
    mean: np.ndarray
    cov: np.ndarray
    epoch: float = 0.0
    skipped: int = 0  # measurement updates rejected for a singular innovation

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).copy()
        self.cov = _symmetrize(np.asarray(self.cov, dtype=float))


@dataclass
class Measurement:
    range: float
    los: np.ndarray
    epoch: float = 0.0
    sigma_range: float = SIGMA_RANGE
    sigma_los: float = SIGMA_LOS
    reference: np.ndarray = field(default_factory=lambda: reference_position())

    def __post_init__(self):
        self.los = np.asarray(self.los, dtype=float)
        if self.range <= 0:
            raise ValueError("range must be positive")
        if abs(np.linalg.norm(self.los) - 1.0) > 1e-12:
            raise ValueError("line of sight must be a unit vector")

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([[self.range], self.los])

    @property
    def cov(self) -> np.ndarray:
        return np.diag([self.sigma_range ** 2] + [self.sigma_los ** 2] * 3)


def _symmetrize(P):
    return 0.5 * (P + P.T)


def measure(state, ref) -> np.ndarray:
    """Noise-free ``(range, los_x, los_y, los_z)``."""
    d = np.asarray(state, dtype=float)[:3] - ref
    rho = np.linalg.norm(d)
    return np.concatenate([[rho], d / rho])


def measurement_jacobian(state, ref) -> np.ndarray:
    """``4 x 6`` Jacobian of :func:`measure`."""
    d = np.asarray(state, dtype=float)[:3] - ref
    rho = np.linalg.norm(d)
    u = d / rho
    H = np.zeros((4, 6))
    H[0, :3] = u
    H[1:, :3] = (np.eye(3) - np.outer(u, u)) / rho
    return H


def simulate_measurement(truth, rng: np.random.Generator | None = None,
                         sigma_range: float = SIGMA_RANGE, sigma_los: float = SIGMA_LOS,
                         ref=None, epoch: float = 0.0) -> Measurement:
    """Range with Gaussian noise; line of sight tilted by a small Gaussian angle."""
    ref = reference_position() if ref is None else np.asarray(ref, dtype=float)
    h = measure(truth, ref)
    rho, u = h[0], h[1:]
    if rng is not None and sigma_range > 0:
        rho = rho + sigma_range * rng.standard_normal()
    if rng is not None and sigma_los > 0:
        tilt = sigma_los * rng.standard_normal(3)
        tilt -= (tilt @ u) * u
        u = u + tilt
        u = u / np.linalg.norm(u)
    return Measurement(float(rho), u, epoch, sigma_range, sigma_los, ref)


def process_noise(sigma_q: float, dt: float) -> np.ndarray:
    return sigma_q ** 2 * dt * np.diag([0.0, 0.0, 0.0, 1.0, 1.0, 1.0])


def predict(est: EstimatorState, dt: float, applied_dv=None, sigma_q: float = SIGMA_Q,
            params: SystemParams = SystemParams(), substeps: int | None = None) -> EstimatorState:
    """Time update over ``dt`` with an impulse applied at the start."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    dv = np.zeros(3) if applied_dv is None else np.asarray(applied_dv, dtype=float)
    mean, phi = dyn.step_with_impulse_stm(est.mean, dv, dt, dt, params, substeps)
    P = phi @ est.cov @ phi.T + process_noise(sigma_q, dt)
    return EstimatorState(mean, P, est.epoch + dt, est.skipped)


def update(est: EstimatorState, z: Measurement, R=None, epoch_tol: float = 1e-9) -> EstimatorState:
    """Joseph-form measurement update; skipped if the innovation covariance is singular."""
    if abs(z.epoch - est.epoch) > epoch_tol:
        raise ValueError(f"measurement epoch {z.epoch} != estimator epoch {est.epoch}")
    R = z.cov if R is None else np.asarray(R, dtype=float)
    H = measurement_jacobian(est.mean, z.reference)
    y = z.vector - measure(est.mean, z.reference)
    S = H @ est.cov @ H.T + R
    try:
        if np.linalg.cond(S) > 1e14:
            raise np.linalg.LinAlgError
        K = np.linalg.solve(S, H @ est.cov).T
    except np.linalg.LinAlgError:
        return EstimatorState(est.mean, est.cov, est.epoch, est.skipped + 1)
    mean = est.mean + K @ y
    A = np.eye(6) - K @ H
    P = A @ est.cov @ A.T + K @ R @ K.T
    return EstimatorState(mean, P, est.epoch, est.skipped)


def nees(est: EstimatorState, truth) -> float:
    e = np.asarray(truth, dtype=float) - est.mean
    return float(e @ np.linalg.solve(est.cov, e))
