"""
Circular restricted three-body dynamics in the Earth-Moon rotating frame.

All quantities are dimensionless: the Earth-Moon distance, the Moon's mean
motion and the total mass are one. The Earth sits at ``(-mu, 0, 0)`` and the
Moon at ``(1 - mu, 0, 0)``.

The integrators are fixed-step classical RK4 kernels compiled with numba. A
kernel never raises; it reports a status code that the Python wrappers turn
into :class:`SingularityError`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numba
import numpy as np
from scipy.optimize import bisect

MU_EARTH_MOON = 0.01215

# canonical units used when reporting dimensional quantities
LU_KM = 384_400.0
TU_S = 375_190.0
VU_MS = LU_KM * 1000.0 / TU_S

DEFAULT_STEP = 1e-3
SINGULARITY_RADIUS = 1e-9

_OK = 0
_SINGULAR = 1
_NONFINITE = 2


class SingularityError(ValueError):
    """Raised when a state reaches a primary or becomes non-finite."""


class ConfigurationError(ValueError):
    """Raised for inconsistent integration settings."""


@dataclass(frozen=True)
class SystemParams:
    mu: float = MU_EARTH_MOON

    def __post_init__(self):
        if not (0.0 < self.mu < 0.5):
            raise ValueError(f"mu must lie in (0, 0.5), got {self.mu}")


class Point(str, Enum):
    L1 = "L1"
    L2 = "L2"


@dataclass(frozen=True)
class LibrationPoint:
    index: Point
    position: np.ndarray

    @property
    def x(self) -> float:
        return float(self.position[0])


# ---------------------------------------------------------------------------
# numba kernels


@numba.njit(cache=True)
def _deriv(s, mu, acc, out):
    x, y, z, vx, vy, vz = s[0], s[1], s[2], s[3], s[4], s[5]
    dx1 = x + mu
    dx2 = x - 1.0 + mu
    yz2 = y * y + z * z
    r1sq = dx1 * dx1 + yz2
    r2sq = dx2 * dx2 + yz2
    r1 = math.sqrt(r1sq)
    r2 = math.sqrt(r2sq)
    if not (r1 >= SINGULARITY_RADIUS and r2 >= SINGULARITY_RADIUS):
        # also catches NaN
        return _SINGULAR
    k1 = (1.0 - mu) / (r1sq * r1)
    k2 = mu / (r2sq * r2)
    out[0] = vx
    out[1] = vy
    out[2] = vz
    out[3] = 2.0 * vy + x - k1 * dx1 - k2 * dx2 + acc[0]
    out[4] = -2.0 * vx + y - k1 * y - k2 * y + acc[1]
    out[5] = -k1 * z - k2 * z + acc[2]
    return _OK


@numba.njit(cache=True)
def _jacobian(s, mu, A):
    x, y, z = s[0], s[1], s[2]
    dx1 = x + mu
    dx2 = x - 1.0 + mu
    r1sq = dx1 * dx1 + y * y + z * z
    r2sq = dx2 * dx2 + y * y + z * z
    r1 = math.sqrt(r1sq)
    r2 = math.sqrt(r2sq)
    k1 = (1.0 - mu) / (r1sq * r1)
    k2 = mu / (r2sq * r2)
    g1 = 3.0 * (1.0 - mu) / (r1sq * r1sq * r1)
    g2 = 3.0 * mu / (r2sq * r2sq * r2)
    for i in range(6):
        for j in range(6):
            A[i, j] = 0.0
    A[0, 3] = 1.0
    A[1, 4] = 1.0
    A[2, 5] = 1.0
    A[3, 0] = 1.0 - k1 - k2 + g1 * dx1 * dx1 + g2 * dx2 * dx2
    A[4, 1] = 1.0 - k1 - k2 + (g1 + g2) * y * y
    A[5, 2] = -k1 - k2 + (g1 + g2) * z * z
    A[3, 1] = A[4, 0] = (g1 * dx1 + g2 * dx2) * y
    A[3, 2] = A[5, 0] = (g1 * dx1 + g2 * dx2) * z
    A[4, 2] = A[5, 1] = (g1 + g2) * y * z
    A[3, 4] = 2.0
    A[4, 3] = -2.0


@numba.njit(cache=True)
def _rk4(s0, h, n, mu, acc):
    s = s0.copy()
    k1 = np.empty(6)
    k2 = np.empty(6)
    k3 = np.empty(6)
    k4 = np.empty(6)
    tmp = np.empty(6)
    for _ in range(n):
        if _deriv(s, mu, acc, k1) != _OK:
            return s, _SINGULAR
        for i in range(6):
            tmp[i] = s[i] + 0.5 * h * k1[i]
        if _deriv(tmp, mu, acc, k2) != _OK:
            return s, _SINGULAR
        for i in range(6):
            tmp[i] = s[i] + 0.5 * h * k2[i]
        if _deriv(tmp, mu, acc, k3) != _OK:
            return s, _SINGULAR
        for i in range(6):
            tmp[i] = s[i] + h * k3[i]
        if _deriv(tmp, mu, acc, k4) != _OK:
            return s, _SINGULAR
        for i in range(6):
            s[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    for i in range(6):
        if not math.isfinite(s[i]):
            return s, _NONFINITE
    return s, _OK


@numba.njit(cache=True)
def _stm_rhs(w, mu, acc, dw):
    # w = [state(6), stm(36) row-major]
    status = _deriv(w, mu, acc, dw)
    if status != _OK:
        return status
    x, y, z = w[0], w[1], w[2]
    dx1 = x + mu
    dx2 = x - 1.0 + mu
    r1sq = dx1 * dx1 + y * y + z * z
    r2sq = dx2 * dx2 + y * y + z * z
    r1 = math.sqrt(r1sq)
    r2 = math.sqrt(r2sq)
    k = (1.0 - mu) / (r1sq * r1) + mu / (r2sq * r2)
    g1 = 3.0 * (1.0 - mu) / (r1sq * r1sq * r1)
    g2 = 3.0 * mu / (r2sq * r2sq * r2)
    gx = g1 * dx1 + g2 * dx2
    g = g1 + g2
    uxx = 1.0 - k + g1 * dx1 * dx1 + g2 * dx2 * dx2
    uyy = 1.0 - k + g * y * y
    uzz = -k + g * z * z
    uxy = gx * y
    uxz = gx * z
    uyz = g * y * z
    for j in range(6):
        p0 = w[6 + j]
        p1 = w[12 + j]
        p2 = w[18 + j]
        p3 = w[24 + j]
        p4 = w[30 + j]
        p5 = w[36 + j]
        dw[6 + j] = p3
        dw[12 + j] = p4
        dw[18 + j] = p5
        dw[24 + j] = uxx * p0 + uxy * p1 + uxz * p2 + 2.0 * p4
        dw[30 + j] = uxy * p0 + uyy * p1 + uyz * p2 - 2.0 * p3
        dw[36 + j] = uxz * p0 + uyz * p1 + uzz * p2
    return _OK


@numba.njit(cache=True)
def _rk4_stm(s0, P0, h, n, mu, acc):
    w = np.empty(42)
    w[:6] = s0
    for i in range(6):
        for j in range(6):
            w[6 + 6 * i + j] = P0[i, j]
    k1 = np.empty(42)
    k2 = np.empty(42)
    k3 = np.empty(42)
    k4 = np.empty(42)
    tmp = np.empty(42)
    status = _OK
    for _ in range(n):
        if _stm_rhs(w, mu, acc, k1) != _OK:
            status = _SINGULAR
            break
        for i in range(42):
            tmp[i] = w[i] + 0.5 * h * k1[i]
        if _stm_rhs(tmp, mu, acc, k2) != _OK:
            status = _SINGULAR
            break
        for i in range(42):
            tmp[i] = w[i] + 0.5 * h * k2[i]
        if _stm_rhs(tmp, mu, acc, k3) != _OK:
            status = _SINGULAR
            break
        for i in range(42):
            tmp[i] = w[i] + h * k3[i]
        if _stm_rhs(tmp, mu, acc, k4) != _OK:
            status = _SINGULAR
            break
        for i in range(42):
            w[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    s = w[:6].copy()
    P = w[6:].copy().reshape((6, 6))
    if status == _OK:
        for i in range(42):
            if not math.isfinite(w[i]):
                status = _NONFINITE
    return s, P, status


@numba.njit(cache=True)
def _impulse_coast(s0, dv, n_sub, h, nt, mu, acc):
    s = s0.copy()
    s[3] += dv[0]
    s[4] += dv[1]
    s[5] += dv[2]
    return _rk4(s, h, n_sub * nt, mu, acc)


@numba.njit(cache=True)
def _impulse_coast_stm(s0, dv, n_sub, h, nt, mu):
    s = s0.copy()
    s[3] += dv[0]
    s[4] += dv[1]
    s[5] += dv[2]
    return _rk4_stm(s, np.eye(6), h, n_sub * nt, mu, np.zeros(3))


@numba.njit(cache=True)
def _rollout(s0, dvs, n_sub, h, nt, mu, want_stm):
    m = dvs.shape[0]
    states = np.empty((m + 1, 6))
    phis = np.zeros((m, 6, 6))
    states[0] = s0
    eye = np.eye(6)
    zero = np.zeros(3)
    for k in range(m):
        s = states[k].copy()
        s[3] += dvs[k, 0]
        s[4] += dvs[k, 1]
        s[5] += dvs[k, 2]
        if want_stm:
            s, P, status = _rk4_stm(s, eye, h, n_sub * nt, mu, zero)
            phis[k] = P
        else:
            s, status = _rk4(s, h, n_sub * nt, mu, zero)
        if status != _OK:
            return states, phis, status
        states[k + 1] = s
    return states, phis, _OK


# ---------------------------------------------------------------------------
# public API

_ZERO_ACC = np.zeros(3)


def _as_state(state) -> np.ndarray:
    s = np.asarray(state, dtype=float)
    if s.shape != (6,):
        raise ValueError(f"state must have shape (6,), got {s.shape}")
    if not np.all(np.isfinite(s)):
        raise SingularityError("state has non-finite components")
    return s


def _check(status: int):
    if status == _SINGULAR:
        raise SingularityError("trajectory reached a primary (r < 1e-9)")
    if status == _NONFINITE:
        raise SingularityError("integration produced non-finite values")


def primary_distances(state, params: SystemParams = SystemParams()) -> tuple[float, float]:
    s = np.asarray(state, dtype=float)
    mu = params.mu
    r1 = math.sqrt((s[0] + mu) ** 2 + s[1] ** 2 + s[2] ** 2)
    r2 = math.sqrt((s[0] - 1.0 + mu) ** 2 + s[1] ** 2 + s[2] ** 2)
    return r1, r2


def eom(state, params: SystemParams = SystemParams()) -> np.ndarray:
    """Time derivative ``(vx, vy, vz, ax, ay, az)`` of a rotating-frame state."""
    s = _as_state(state)
    out = np.empty(6)
    _check(_deriv(s, params.mu, _ZERO_ACC, out))
    return out


def jacobian(state, params: SystemParams = SystemParams()) -> np.ndarray:
    """6x6 Jacobian of :func:`eom` with respect to the state."""
    s = _as_state(state)
    eom(s, params)
    A = np.empty((6, 6))
    _jacobian(s, params.mu, A)
    return A


def jacobi_constant(state, params: SystemParams = SystemParams()) -> float:
    s = _as_state(state)
    r1, r2 = primary_distances(s, params)
    if r1 < SINGULARITY_RADIUS or r2 < SINGULARITY_RADIUS:
        raise SingularityError("state at a primary")
    mu = params.mu
    return float(s[0] ** 2 + s[1] ** 2 + 2.0 * (1.0 - mu) / r1 + 2.0 * mu / r2
                 - (s[3] ** 2 + s[4] ** 2 + s[5] ** 2))


def collinear_residual(x: float, mu: float) -> float:
    """x-acceleration at rest on the x-axis; zero at the collinear points."""
    d1 = x + mu
    d2 = x - 1.0 + mu
    return x - (1.0 - mu) * d1 / abs(d1) ** 3 - mu * d2 / abs(d2) ** 3


def libration_point(index: Point | str, params: SystemParams = SystemParams()) -> LibrationPoint:
    index = Point(index)
    mu = params.mu
    tiny = 1e-15
    if index is Point.L1:
        lo, hi = max(-mu + tiny, 0.0) + tiny, 1.0 - mu - tiny
    else:
        lo, hi = 1.0 - mu + tiny, 2.0
    x = bisect(collinear_residual, lo, hi, args=(mu,), xtol=1e-14, rtol=4 * np.finfo(float).eps,
               maxiter=400)
    return LibrationPoint(index, np.array([x, 0.0, 0.0]))


def substeps_for(dt: float, max_step: float = DEFAULT_STEP) -> int:
    return max(1, int(math.ceil(abs(dt) / max_step - 1e-9)))


def propagate(state, dt: float, substeps: int | None = None,
              params: SystemParams = SystemParams(), accel=None) -> np.ndarray:
    """Advance ``state`` by ``dt`` with ``substeps`` equal RK4 steps.

    ``accel`` is an optional constant extra acceleration (3-vector), used for
    injected disturbances.
    """
    s = _as_state(state)
    if substeps is None:
        substeps = substeps_for(dt)
    if substeps < 1:
        raise ConfigurationError("substeps must be >= 1")
    if not math.isfinite(dt):
        raise ConfigurationError("dt must be finite")
    if dt == 0.0:
        return s.copy()
    acc = _ZERO_ACC if accel is None else np.asarray(accel, dtype=float)
    out, status = _rk4(s, dt / substeps, int(substeps), params.mu, acc)
    _check(status)
    return out


def propagate_with_stm(state, dt: float, substeps: int | None = None,
                       params: SystemParams = SystemParams()) -> tuple[np.ndarray, np.ndarray]:
    """Propagate state and state transition matrix together."""
    s = _as_state(state)
    if substeps is None:
        substeps = substeps_for(dt)
    if substeps < 1:
        raise ConfigurationError("substeps must be >= 1")
    if dt == 0.0:
        return s.copy(), np.eye(6)
    out, phi, status = _rk4_stm(s, np.eye(6), dt / substeps, int(substeps), params.mu, _ZERO_ACC)
    _check(status)
    return out, phi


def ratio_nt(Ts: float, Ts_hat: float) -> int:
    """Number of fine steps per control step; must be a positive integer."""
    if not (Ts_hat > 0 and Ts_hat <= Ts * (1 + 1e-12)):
        raise ConfigurationError("need 0 < Ts_hat <= Ts")
    r = Ts / Ts_hat
    nt = int(round(r))
    if nt < 1 or abs(r - nt) > 1e-9 * max(1.0, r):
        raise ConfigurationError(f"Ts/Ts_hat = {r} is not an integer")
    return nt


def step_with_impulse(state, dv, Ts: float, Ts_hat: float,
                      params: SystemParams = SystemParams(), substeps: int | None = None,
                      accel=None) -> np.ndarray:
    """Apply an impulse, then coast for ``Ts`` in ``Ts/Ts_hat`` fine steps.

    Each fine step of length ``Ts_hat`` is integrated with ``substeps`` RK4
    steps (default: enough to keep the RK4 step at or below 1e-3).
    """
    s = _as_state(state)
    dv = np.asarray(dv, dtype=float)
    if dv.shape != (3,) or not np.all(np.isfinite(dv)):
        raise ValueError("dv must be a finite 3-vector")
    nt = ratio_nt(Ts, Ts_hat)
    if substeps is None:
        substeps = substeps_for(Ts_hat)
    acc = _ZERO_ACC if accel is None else np.asarray(accel, dtype=float)
    out, status = _impulse_coast(s, dv, int(substeps), Ts_hat / substeps, nt, params.mu, acc)
    _check(status)
    return out


def step_with_impulse_stm(state, dv, Ts: float, Ts_hat: float,
                          params: SystemParams = SystemParams(),
                          substeps: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """As :func:`step_with_impulse`; also returns the STM of the coast arc.

    The STM maps perturbations of the post-impulse state, so the sensitivity
    to the pre-impulse state is ``phi`` and to the impulse ``phi[:, 3:]``.
    """
    s = _as_state(state)
    dv = np.asarray(dv, dtype=float)
    nt = ratio_nt(Ts, Ts_hat)
    if substeps is None:
        substeps = substeps_for(Ts_hat)
    out, phi, status = _impulse_coast_stm(s, dv, int(substeps), Ts_hat / substeps, nt, params.mu)
    _check(status)
    return out, phi


def rollout(state, dvs, Ts: float, Ts_hat: float, params: SystemParams = SystemParams(),
            substeps: int | None = None, stm: bool = False):
    """Chain :func:`step_with_impulse` over the rows of ``dvs``.

    Returns the ``(m + 1, 6)`` states (the first is ``state``) and, with
    ``stm=True``, the ``(m, 6, 6)`` coast-arc STMs (zeros otherwise).
    """
    s = _as_state(state)
    dvs = np.ascontiguousarray(dvs, dtype=float).reshape(-1, 3)
    nt = ratio_nt(Ts, Ts_hat)
    if substeps is None:
        substeps = substeps_for(Ts_hat)
    states, phis, status = _rollout(s, dvs, int(substeps), Ts_hat / substeps, nt,
                                    params.mu, stm)
    _check(status)
    return states, phis


def to_ms(dv_dimensionless: float) -> float:
    return dv_dimensionless * VU_MS
