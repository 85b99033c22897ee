"""
Receding-horizon controller that keeps a spacecraft inside an orbit family.

The reference is not one orbit but the family surrogate ``P(chi, nu)``: the
optimizer chooses the impulses together with the orbit parameter ``chi`` and
the phases ``nu`` it tracks over the horizon. With ``X_0`` the current state
and ``dv_i = dv_min(i, Nc)``::

    X_i = f(X_{i-1}, dv_i),                          i = 1 .. Np + 1
    J   = sum_{i<=Np} |X_i - P(chi_i, nu_i)|_Q^2 + sum_{i<=Nc} |dv_i|_R^2
          + |X_{Np+1} - P(chi_{Np+1}, nu_{Np+1})|_Qt^2

``f`` applies an impulse and coasts one control period ``Ts`` in ``Ts/Ts_hat``
RK4 steps. Three modes differ in how ``chi_i`` is chosen:

* ``FixedChi``: one free ``chi`` for the whole horizon.
* ``VariableChi``: one free ``chi`` per stage; the terminal term reuses
  ``chi_Np``.
* ``FixedOrbit``: ``chi`` pinned to ``chi_ref``; only the phases are free.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from enum import Enum

import numpy as np
from scipy.optimize import minimize

from . import dynamics as dyn
from .dynamics import SingularityError, SystemParams
from .families import Kind
from .surrogate import MprModel, SubManifoldModel, parameterize

BIG_COST = 1e20
MULTISTART = 8
IMPULSES_PER_REV = 20
DEFAULT_NT = 10


class Mode(str, Enum):
    FIXED_CHI = "FixedChi"
    VARIABLE_CHI = "VariableChi"
    FIXED_ORBIT = "FixedOrbit"


# Horizon defaults per family kind as (Np, Nc).
HORIZONS = {Kind.LYAPUNOV: (5, 2), Kind.HALO: (4, 4), Kind.NRHO: (5, 2)}


def _diag(values):
    return np.diag(np.asarray(values, dtype=float))


@dataclass
class NmpcConfig:
    """Controller settings. All times and impulses are dimensionless."""

    Ts: float
    Ts_hat: float
    chi_bounds: tuple[float, float]
    Np: int = 4
    Nc: int = 4
    Q: np.ndarray = field(default_factory=lambda: _diag([1, 1, 1, 0, 0, 0]))
    Qt: np.ndarray = field(default_factory=lambda: _diag([1, 1, 1, 0, 0, 0]))
    R: np.ndarray = field(default_factory=lambda: 1e-2 * np.eye(3))
    dv_bounds: tuple[float, float] = (-0.1, 0.1)
    mode: Mode = Mode.FIXED_CHI
    chi_ref: float | None = None
    substeps: int = 1
    max_iter: int = 200
    gtol: float = 1e-8
    multistart: int = MULTISTART
    mu: float = dyn.MU_EARTH_MOON

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        self.Qt = np.asarray(self.Qt, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        self.mode = Mode(self.mode)
        self.chi_bounds = tuple(float(v) for v in self.chi_bounds)
        self.dv_bounds = tuple(float(v) for v in self.dv_bounds)
        self.validate()

    def validate(self):
        if not 1 <= self.Nc <= self.Np:
            raise dyn.ConfigurationError("need 1 <= Nc <= Np")
        dyn.ratio_nt(self.Ts, self.Ts_hat)
        for name, m, n in (("Q", self.Q, 6), ("Qt", self.Qt, 6), ("R", self.R, 3)):
            if m.shape != (n, n) or not np.allclose(m, m.T):
                raise dyn.ConfigurationError(f"{name} must be a symmetric {n}x{n} matrix")
        if np.linalg.eigvalsh(self.Q).min() < -1e-12 or np.linalg.eigvalsh(self.Qt).min() < -1e-12:
            raise dyn.ConfigurationError("Q and Qt must be positive semi-definite")
        if np.linalg.eigvalsh(self.R).min() <= 0:
            raise dyn.ConfigurationError("R must be positive definite")
        lo, hi = self.chi_bounds
        if not lo < hi:
            raise dyn.ConfigurationError("chi_bounds must satisfy min < max")
        if self.dv_bounds[0] > self.dv_bounds[1]:
            raise dyn.ConfigurationError("dv_bounds must satisfy min <= max")
        if self.mode is Mode.FIXED_ORBIT:
            if self.chi_ref is None:
                raise dyn.ConfigurationError("FixedOrbit mode needs chi_ref")
            if not lo <= self.chi_ref <= hi:
                raise dyn.ConfigurationError("chi_ref must lie inside chi_bounds")
        if self.substeps < 1 or self.max_iter < 1 or self.multistart < 1:
            raise dyn.ConfigurationError("substeps, max_iter and multistart must be >= 1")

    @property
    def params(self) -> SystemParams:
        return SystemParams(self.mu)

    @property
    def n_chi(self) -> int:
        return {Mode.FIXED_CHI: 1, Mode.VARIABLE_CHI: self.Np, Mode.FIXED_ORBIT: 0}[self.mode]

    def with_mode(self, mode: Mode, chi_ref: float | None = None) -> "NmpcConfig":
        return replace(self, mode=Mode(mode), chi_ref=chi_ref)

    @classmethod
    def for_family(cls, model: MprModel, chi: float, period: float | None = None,
                   **overrides) -> "NmpcConfig":
        """Defaults for a spacecraft near the member with parameter ``chi``.

        ``chi_bounds`` is the range of the sub-manifold holding ``chi``; the
        control period is one twentieth of the orbital period.
        """
        sub = model.sub_for(chi)
        period = sub.period if period is None else period
        Np, Nc = HORIZONS[model.tag.kind]
        Ts = period / IMPULSES_PER_REV
        kw = dict(Ts=Ts, Ts_hat=Ts / DEFAULT_NT, chi_bounds=sub.chi_range, Np=Np, Nc=Nc,
                  mu=model.mu)
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("Q", "Qt", "R"):
            d[k] = np.asarray(getattr(self, k)).tolist()
        d["mode"] = self.mode.value
        d["chi_bounds"] = list(self.chi_bounds)
        d["dv_bounds"] = list(self.dv_bounds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NmpcConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise dyn.ConfigurationError(f"unknown NmpcConfig fields: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "NmpcConfig":
        return cls.from_dict(json.loads(text))


@dataclass
class HorizonSolution:
    dv: np.ndarray          # (Nc, 3)
    chi: float | np.ndarray  # scalar, or (Np,) in VariableChi mode
    nu: np.ndarray          # (Np + 1,) in [-pi, pi)
    cost: float
    iterations: int = 0
    evaluations: int = 0
    converged: bool = True
    wall_time: float = 0.0
    message: str = ""

    def stage_chis(self, Np: int) -> np.ndarray:
        return _stage_chis(self.chi, Np)


def _wrap(a):
    return (np.asarray(a, dtype=float) + np.pi) % (2.0 * np.pi) - np.pi


def _stage_chis(chi, Np: int) -> np.ndarray:
    c = np.atleast_1d(np.asarray(chi, dtype=float))
    if c.size == 1:
        return np.full(Np + 1, c[0])
    if c.size != Np:
        raise ValueError(f"expected 1 or {Np} chi values, got {c.size}")
    return np.append(c, c[-1])


def _held(dv, Np: int) -> np.ndarray:
    """Impulse per propagation step: dv_1..dv_Nc, then dv_Nc held to step Np + 1."""
    dv = np.asarray(dv, dtype=float).reshape(-1, 3)
    idx = np.minimum(np.arange(Np + 1), len(dv) - 1)
    return dv[idx], idx


def _weights(cfg: NmpcConfig):
    return [cfg.Q] * cfg.Np + [cfg.Qt]


def reference_model(model: MprModel | SubManifoldModel, cfg: NmpcConfig) -> SubManifoldModel:
    """Sub-manifold that serves the whole ``chi_bounds`` window."""
    if isinstance(model, SubManifoldModel):
        return model
    lo, hi = cfg.chi_bounds
    sub = model.sub_for(0.5 * (lo + hi))
    tol = 1e-12 * max(1.0, abs(hi))
    if not (sub.contains(lo, tol) and sub.contains(hi, tol)):
        raise dyn.ConfigurationError("chi_bounds must lie inside one sub-manifold")
    return sub


def cost_eval(x0, dv_seq, chi, nu_seq, model, cfg: NmpcConfig) -> float:
    """Horizon cost; ``inf`` if the rollout hits a primary."""
    sub = reference_model(model, cfg)
    dv_seq = np.asarray(dv_seq, dtype=float).reshape(-1, 3)
    nu_seq = np.asarray(nu_seq, dtype=float)
    if dv_seq.shape[0] != cfg.Nc or nu_seq.shape != (cfg.Np + 1,):
        raise ValueError("dv_seq must be (Nc, 3) and nu_seq (Np + 1,)")
    dvs, _ = _held(dv_seq, cfg.Np)
    try:
        X, _ = dyn.rollout(x0, dvs, cfg.Ts, cfg.Ts_hat, cfg.params, cfg.substeps)
    except SingularityError:
        return math.inf
    ref = sub(_stage_chis(chi, cfg.Np), nu_seq)
    J = 0.0
    for r, W in zip(X[1:] - ref, _weights(cfg)):
        J += float(r @ W @ r)
    for d in dv_seq:
        J += float(d @ cfg.R @ d)
    return J


class _Problem:
    """Stacked decision vector ``z = [dv (3 Nc), chi (n_chi), nu (Np + 1)]``.

    ``chi`` enters the optimizer normalized to [-1, 1] over ``chi_bounds``.
    """

    def __init__(self, x0, sub: SubManifoldModel, cfg: NmpcConfig):
        self.x0 = np.asarray(x0, dtype=float)
        self.sub = sub
        self.cfg = cfg
        self.nd = 3 * cfg.Nc
        self.nc = cfg.n_chi
        lo, hi = cfg.chi_bounds
        self.c_mid, self.c_half = 0.5 * (lo + hi), 0.5 * (hi - lo)
        W = _weights(cfg)
        self.W = np.array(W)
        self.evals = 0

    def pack(self, dv, chi, nu) -> np.ndarray:
        parts = [np.asarray(dv, dtype=float).ravel()]
        if self.nc:
            c = np.broadcast_to(np.atleast_1d(np.asarray(chi, dtype=float)), (self.nc,))
            parts.append((c - self.c_mid) / self.c_half)
        parts.append(np.asarray(nu, dtype=float))
        return np.concatenate(parts)

    def unpack(self, z):
        cfg = self.cfg
        dv = z[:self.nd].reshape(cfg.Nc, 3)
        if self.nc == 0:
            chi = float(cfg.chi_ref)
        else:
            c = np.clip(self.c_mid + self.c_half * z[self.nd:self.nd + self.nc], *cfg.chi_bounds)
            chi = float(c[0]) if cfg.mode is Mode.FIXED_CHI else c
        nu = z[self.nd + self.nc:]
        return dv, chi, nu

    def bounds(self):
        lo, hi = self.cfg.dv_bounds
        return ([(lo, hi)] * self.nd + [(-1.0, 1.0)] * self.nc
                + [(None, None)] * (self.cfg.Np + 1))

    def fun_grad(self, z):
        self.evals += 1
        cfg = self.cfg
        Np = cfg.Np
        dv, chi, nu = self.unpack(z)
        dvs, idx = _held(dv, Np)
        try:
            X, phi = dyn.rollout(self.x0, dvs, cfg.Ts, cfg.Ts_hat, cfg.params, cfg.substeps,
                                 stm=True)
        except SingularityError:
            return BIG_COST, np.zeros_like(z)
        ref, dchi, dnu = self.sub.eval_grad(_stage_chis(chi, Np), nu)
        r = X[1:] - ref
        Wr = np.einsum("kij,kj->ki", self.W, r)
        J = float(np.sum(r * Wr)) + float(np.einsum("ki,ij,kj->", dv, cfg.R, dv))
        # adjoint sweep: lam_i = dJ/dX_i including everything downstream
        g_dv = 2.0 * dv @ cfg.R
        lam = np.zeros(6)
        for i in range(Np, -1, -1):
            lam = 2.0 * Wr[i] + (phi[i + 1].T @ lam if i < Np else 0.0)
            g_dv[idx[i]] += phi[i][:, 3:].T @ lam
        g_nu = -2.0 * np.sum(Wr * dnu, axis=1)
        g_ref = -2.0 * np.sum(Wr * dchi, axis=1)
        parts = [g_dv.ravel()]
        if cfg.mode is Mode.FIXED_CHI:
            parts.append([g_ref.sum() * self.c_half])
        elif cfg.mode is Mode.VARIABLE_CHI:
            g = g_ref[:Np].copy()
            g[-1] += g_ref[Np]
            parts.append(g * self.c_half)
        parts.append(g_nu)
        return J, np.concatenate(parts)


def initial_phases(x0, sub: SubManifoldModel, cfg: NmpcConfig, tag) -> np.ndarray:
    """Current location angle advanced at the sub-manifold's mean rate."""
    nu0 = parameterize(x0, tag, cfg.params)
    return nu0 + sub.nu_rate * cfg.Ts * np.arange(1, cfg.Np + 2)


def shift(sol: HorizonSolution, sub: SubManifoldModel, cfg: NmpcConfig) -> HorizonSolution:
    """Shift-by-one warm start for the next control step."""
    dv = np.vstack([sol.dv[1:], sol.dv[-1:]]) if cfg.Nc > 1 else sol.dv.copy()
    nu = np.unwrap(np.asarray(sol.nu, dtype=float))
    step = nu[-1] - nu[-2] if len(nu) > 1 else sub.nu_rate * cfg.Ts
    nu = np.append(nu[1:], nu[-1] + step)
    chi = sol.chi
    if np.ndim(chi):
        chi = np.append(chi[1:], chi[-1])
    return HorizonSolution(dv, chi, nu, math.nan)


def _chi_grid(cfg: NmpcConfig, n: int) -> np.ndarray:
    lo, hi = cfg.chi_bounds
    return np.linspace(lo, hi, n + 2)[1:-1] if n > 1 else np.array([0.5 * (lo + hi)])


def _run(prob: _Problem, z0, cfg: NmpcConfig):
    res = minimize(prob.fun_grad, z0, jac=True, method="L-BFGS-B", bounds=prob.bounds(),
                   options={"maxiter": cfg.max_iter, "gtol": cfg.gtol, "ftol": 1e-15,
                            "maxcor": 20})
    return res


def solve(x0, model, cfg: NmpcConfig, warm_start: HorizonSolution | None = None,
          tag=None) -> HorizonSolution:
    """Minimize the horizon cost over impulses, orbit parameter(s) and phases.

    Without a warm start the problem is solved from ``cfg.multistart``
    values of ``chi`` spread over ``chi_bounds`` and the best result kept.
    """
    t0 = time.perf_counter()
    sub = reference_model(model, cfg)
    tag = tag if tag is not None else model.tag
    prob = _Problem(x0, sub, cfg)
    if warm_start is not None:
        starts = [prob.pack(warm_start.dv, warm_start.chi, warm_start.nu)]
    else:
        nu = initial_phases(x0, sub, cfg, tag)
        dv0 = np.zeros((cfg.Nc, 3))
        if cfg.mode is Mode.FIXED_ORBIT:
            starts = [prob.pack(dv0, cfg.chi_ref, nu)]
        else:
            starts = [prob.pack(dv0, c, nu) for c in _chi_grid(cfg, cfg.multistart)]
    best = None
    iters = 0
    for z0 in starts:
        res = _run(prob, z0, cfg)
        iters += res.nit
        if best is None or res.fun < best.fun:
            best = res
    z = np.clip(best.x, [b[0] if b[0] is not None else -np.inf for b in prob.bounds()],
                [b[1] if b[1] is not None else np.inf for b in prob.bounds()])
    dv, chi, nu = prob.unpack(z)
    nu = _wrap(nu)
    cost = cost_eval(x0, dv, chi, nu, sub, cfg)
    g = prob.fun_grad(prob.pack(dv, chi, nu))[1]
    converged = bool(best.success) or _projected_gradient(z, g, prob) < cfg.gtol
    return HorizonSolution(dv.copy(), chi if np.ndim(chi) == 0 else np.array(chi), nu, cost,
                           iters, prob.evals, converged, time.perf_counter() - t0,
                           str(best.message))


def _projected_gradient(z, g, prob: _Problem) -> float:
    pg = g.copy()
    for k, (lo, hi) in enumerate(prob.bounds()):
        if lo is not None and z[k] <= lo and g[k] > 0:
            pg[k] = 0.0
        if hi is not None and z[k] >= hi and g[k] < 0:
            pg[k] = 0.0
    return float(np.max(np.abs(pg))) if len(pg) else 0.0


def controller_step(x_est, model, cfg: NmpcConfig, warm_start: HorizonSolution | None = None,
                    tag=None):
    """Solve the horizon problem and return ``(first impulse, solution)``.

    ``warm_start`` is the previous step's solution; it is shifted by one
    control period before use.
    """
    sub = reference_model(model, cfg)
    ws = shift(warm_start, sub, cfg) if warm_start is not None else None
    sol = solve(x_est, model, cfg, ws, tag)
    return sol.dv[0].copy(), sol
