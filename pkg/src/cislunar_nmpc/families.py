"""
Periodic orbit families about the collinear points L1 and L2.

Members are symmetric with respect to the xz-plane, so every orbit is stored
by its state at a perpendicular crossing of that plane (``y = vx = vz = 0``)
together with its full period.

Three tools build a family:

* :func:`initial_guess` -- a linearized seed about the libration point;
* :func:`differential_correction` -- classical single shooting to the next
  ``y = 0`` crossing with event location by bisection;
* :func:`pac_continue` -- pseudo-arclength continuation on the fixed-time
  half-period shooting problem.

:func:`generate_family` chains them for each :class:`FamilyTag`.
"""

from __future__ import annotations

import datetime as _dt
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.optimize import minimize_scalar

from . import dynamics as dyn
from .dynamics import Point, SystemParams, libration_point

log = logging.getLogger(__name__)

CORRECTION_TOL = 1e-12
CLOSURE_TOL = 1e-10
NRHO_PERILUNE = 0.03
# NRHO catalogs end here; closer passes need very small fixed steps
NRHO_MIN_PERILUNE = 0.008
# RK4 step used far from the Moon, and the scaling that shrinks it near perilune
MAX_STEP = 5e-4
MOON_STEP_GAIN = 1e-2
CHI_SAMPLES = 1000
# halo catalogs start at the first member with a yz loop at least this round
HALO_MIN_ROUNDNESS = 0.5


class Kind(str, Enum):
    LYAPUNOV = "LO"
    HALO = "HO"
    NRHO = "NRHO"


class Branch(str, Enum):
    NORTH = "N"
    SOUTH = "S"


class CorrectionError(RuntimeError):
    pass


class AmplitudeError(ValueError):
    pass


@dataclass(frozen=True)
class FamilyTag:
    kind: Kind
    point: Point
    branch: Branch | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "point", Point(self.point))
        if self.kind is Kind.LYAPUNOV:
            if self.branch is not None:
                raise ValueError("Lyapunov families have no branch")
        else:
            object.__setattr__(self, "branch", Branch(self.branch or Branch.NORTH))

    @property
    def planar(self) -> bool:
        return self.kind is Kind.LYAPUNOV

    def __str__(self):
        s = f"{self.kind.value}-{self.point.value}"
        return s if self.branch is None else f"{s}-{self.branch.value}"

    @classmethod
    def parse(cls, text: str) -> "FamilyTag":
        """Parse ``"LO-L1"``, ``"HO-L2"``, ``"NRHO-L1-S"`` and the like."""
        parts = text.strip().upper().split("-")
        if len(parts) not in (2, 3):
            raise ValueError(f"bad family tag {text!r}")
        kind = Kind(parts[0])
        branch = Branch(parts[2]) if len(parts) == 3 else None
        return cls(kind, Point(parts[1]), branch)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "point": self.point.value,
                "branch": None if self.branch is None else self.branch.value}

    @classmethod
    def from_dict(cls, d: dict) -> "FamilyTag":
        return cls(Kind(d["kind"]), Point(d["point"]),
                   None if d.get("branch") is None else Branch(d["branch"]))


ALL_TAGS = tuple(FamilyTag(k, p) for k in Kind for p in Point)


@dataclass(frozen=True)
class PeriodicOrbit:
    tag: FamilyTag
    x0: np.ndarray
    period: float
    chi: float
    substeps: int

    @property
    def step(self) -> float:
        return self.period / self.substeps

    def closure(self, params: SystemParams = SystemParams()) -> float:
        xT = dyn.propagate(self.x0, self.period, self.substeps, params)
        return float(np.max(np.abs(xT - self.x0)))

    def to_dict(self) -> dict:
        return {"x0": [float(v) for v in self.x0], "period": float(self.period),
                "chi": float(self.chi), "substeps": int(self.substeps)}

    @classmethod
    def from_dict(cls, d: dict, tag: FamilyTag) -> "PeriodicOrbit":
        period = float(d["period"])
        substeps = int(d.get("substeps") or _even(period / MAX_STEP))
        return cls(tag, np.asarray(d["x0"], dtype=float), period, float(d["chi"]), substeps)


@dataclass
class FamilyCatalog:
    tag: FamilyTag
    members: list[PeriodicOrbit]
    mu: float
    tolerances: dict = field(default_factory=lambda: {"correction": CORRECTION_TOL,
                                                      "closure": CLOSURE_TOL})
    created: str = field(default_factory=lambda: _dt.datetime.now(_dt.timezone.utc).isoformat())
    status: str = "complete"

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def __getitem__(self, i):
        return self.members[i]

    @property
    def chis(self) -> np.ndarray:
        return np.array([m.chi for m in self.members])

    @property
    def params(self) -> SystemParams:
        return SystemParams(self.mu)

    def check_invariants(self):
        if any(m.tag != self.tag for m in self.members):
            raise ValueError("catalog members must share the catalog tag")
        d = np.diff(self.chis)
        if len(d) and not (np.all(d > 0) or np.all(d < 0)):
            raise ValueError("chi is not strictly monotone along the catalog")

    def to_json(self) -> str:
        header = {"mu": self.mu, "tag": self.tag.to_dict(), "tolerances": self.tolerances,
                  "created": self.created, "status": self.status}
        return json.dumps({**header, "members": [m.to_dict() for m in self.members]}, indent=1)

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def from_json(cls, text: str) -> "FamilyCatalog":
        d = json.loads(text)
        tag = FamilyTag.from_dict(d["tag"])
        cat = cls(tag, [PeriodicOrbit.from_dict(m, tag) for m in d["members"]], float(d["mu"]),
                  d.get("tolerances", {}), d.get("created", ""), d.get("status", "complete"))
        cat.check_invariants()
        return cat

    @classmethod
    def load(cls, path) -> "FamilyCatalog":
        return cls.from_json(Path(path).read_text())


def _even(x: float) -> int:
    n = int(math.ceil(x - 1e-9))
    return max(2, n + (n % 2))


def step_for_perilune(r_min: float) -> float:
    """RK4 step resolving a pass at distance ``r_min`` from the Moon."""
    return min(MAX_STEP, MOON_STEP_GAIN * r_min ** 1.5)


def _moon_side(point: Point) -> float:
    # +1 when the Moon lies in the +x direction from the libration point
    return 1.0 if point is Point.L1 else -1.0


def _linear_modes(point: Point, params: SystemParams):
    lp = libration_point(point, params)
    mu = params.mu
    c2 = mu / abs(lp.x - 1 + mu) ** 3 + (1 - mu) / abs(lp.x + mu) ** 3
    lam = math.sqrt((2 - c2 + math.sqrt(9 * c2 * c2 - 8 * c2)) / 2)
    k = (lam * lam + 1 + 2 * c2) / (2 * lam)
    return lp, lam, k


# amplitude limits of the linear seed (dimensionless length)
_MAX_SEED_AMPLITUDE = 0.05


def initial_guess(tag: FamilyTag, amplitude: float,
                  params: SystemParams = SystemParams()) -> np.ndarray:
    """Linearized periodic state at ``amplitude`` from the libration point.

    The planar center mode gives ``x = a cos(lt)``, ``y = -k a sin(lt)``; the
    seed sits on the Moon side of the point. Halo and NRHO seeds add an
    out-of-plane offset of the same amplitude (the vertical mode has nearly
    the planar frequency); they are meant to be refined by the halo
    continuation, which starts from the bifurcating Lyapunov member.
    """
    if not (0.0 <= amplitude <= _MAX_SEED_AMPLITUDE):
        raise AmplitudeError(f"amplitude must lie in [0, {_MAX_SEED_AMPLITUDE}]")
    lp, lam, k = _linear_modes(tag.point, params)
    a = _moon_side(tag.point) * amplitude
    state = np.array([lp.x + a, 0.0, 0.0, 0.0, -k * a * lam, 0.0])
    if not tag.planar:
        sign = 1.0 if tag.branch is Branch.NORTH else -1.0
        state[2] = sign * amplitude
    return state


def linear_half_period(point: Point, params: SystemParams = SystemParams()) -> float:
    _, lam, _ = _linear_modes(point, params)
    return math.pi / lam


# ---------------------------------------------------------------------------
# single shooting with event location


def _find_crossing(x0, h, t_max, params):
    """First y = 0 crossing after leaving the plane; returns (t, state, stm)."""
    x = np.asarray(x0, dtype=float)
    phi = np.eye(6)
    t = 0.0
    y_prev = x[1]
    t_min = 10 * h
    while t < t_max:
        x_new, dphi = dyn.propagate_with_stm(x, h, 1, params)
        t_new = t + h
        if t_new > t_min and y_prev * x_new[1] <= 0.0 and x_new[1] != y_prev:
            lo, hi = 0.0, h
            y_lo = y_prev
            while hi - lo > 1e-13:
                mid = 0.5 * (lo + hi)
                y_mid = dyn.propagate(x, mid, 1, params)[1]
                if y_mid * y_lo > 0:
                    lo, y_lo = mid, y_mid
                else:
                    hi = mid
            dt = 0.5 * (lo + hi)
            xc, dphi = dyn.propagate_with_stm(x, dt, 1, params)
            return t + dt, xc, dphi @ phi
        x, phi, t, y_prev = x_new, dphi @ phi, t_new, x_new[1]
    raise CorrectionError("no y = 0 crossing found within the search window")


def differential_correction(guess, tag: FamilyTag, params: SystemParams = SystemParams(),
                            step: float | None = None, max_iter: int = 50,
                            fix: str = "z0") -> PeriodicOrbit:
    """Refine ``guess`` into a symmetric periodic orbit.

    Propagates to the next ``y = 0`` crossing and drives ``vx`` (and ``vz``
    for spatial orbits) to zero there. Planar orbits vary ``vy0``; spatial
    ones vary ``vy0`` and ``x0`` (``fix="z0"``) or ``z0`` (``fix="x0"``).
    The period is twice the crossing time.
    """
    x0 = np.array(guess, dtype=float)
    x0[[1, 3, 5]] = 0.0
    if tag.planar:
        x0[2] = 0.0
        rows, cols = [3], [4]
    else:
        rows, cols = [3, 5], ([0, 4] if fix == "z0" else [2, 4])
    h = step or MAX_STEP
    t_max = 2.0 * 2.0 * linear_half_period(tag.point, params)
    for it in range(max_iter + 1):
        tc, xc, phi = _find_crossing(x0, h, t_max, params)
        err = np.max(np.abs(xc[rows]))
        if err < CORRECTION_TOL:
            break
        if it == max_iter:
            raise CorrectionError(f"no convergence after {max_iter} iterations (|res|={err:.2e})")
        f = dyn.eom(xc, params)
        # variation at the crossing with the crossing time adjusted to keep y = 0
        D = phi[np.ix_(rows, cols)] - np.outer(f[rows], phi[1, cols]) / f[1]
        x0[cols] -= np.linalg.solve(D, xc[rows])
    return _finalize_fixed_time(x0, tc, tag, params, step=h)


# ---------------------------------------------------------------------------
# fixed-time half-period shooting used by the continuation


def _free(tag: FamilyTag):
    if tag.planar:
        return [0, 4], [1, 3]
    return [0, 2, 4], [1, 3, 5]


def _state_from(u, free):
    x0 = np.zeros(6)
    x0[free] = u[:-1]
    return x0


def _shoot(u, free, rows, n_half, params):
    x0 = _state_from(u, free)
    xf, phi = dyn.propagate_with_stm(x0, u[-1], n_half, params)
    G = xf[rows]
    J = np.hstack([phi[np.ix_(rows, free)], dyn.eom(xf, params)[rows][:, None]])
    return G, J, xf


def _newton(u, free, rows, n_half, params, tangent=None, u_prev=None, ds=0.0, max_iter=12):
    """Newton on the shooting residual, optionally augmented by the arclength equation."""
    u = u.copy()
    for it in range(max_iter):
        G, J, _ = _shoot(u, free, rows, n_half, params)
        if tangent is not None:
            G = np.append(G, tangent @ (u - u_prev) - ds)
            J = np.vstack([J, tangent])
        res = np.max(np.abs(G[: len(rows)]))
        arc_ok = tangent is None or abs(G[-1]) < 1e-12
        if res < CORRECTION_TOL and arc_ok:
            return _polish(u, res, free, rows, n_half, params, tangent, u_prev, ds), it
        if not np.all(np.isfinite(G)) or res > 1.0:
            break
        if J.shape[0] == J.shape[1]:
            du = np.linalg.solve(J, -G)
        else:
            du = np.linalg.lstsq(J, -G, rcond=None)[0]
        u = u + du
        if not np.all(np.isfinite(u)) or u[-1] <= 0:
            break
    raise CorrectionError("Newton corrector failed")


def _polish(u, res, free, rows, n_half, params, tangent, u_prev, ds):
    # a few extra Newton steps push the residual to round-off; unstable
    # members amplify the half-period residual by orders of magnitude
    for _ in range(3):
        G, J, _ = _shoot(u, free, rows, n_half, params)
        if tangent is not None:
            G = np.append(G, tangent @ (u - u_prev) - ds)
            J = np.vstack([J, tangent])
        r = np.max(np.abs(G[: len(rows)]))
        if r > res:
            break
        u_try = u + np.linalg.lstsq(J, -G, rcond=None)[0]
        G_try, _, _ = _shoot(u_try, free, rows, n_half, params)
        r_try = np.max(np.abs(G_try))
        if r_try >= r:
            break
        u, res = u_try, r_try
    return u


def _tangent(u, free, rows, n_half, params, prev=None):
    _, J, _ = _shoot(u, free, rows, n_half, params)
    _, _, vt = np.linalg.svd(J)
    t = vt[-1]
    if prev is not None and t @ prev < 0:
        t = -t
    return t


def _finalize_fixed_time(x0, tau, tag, params, step=None):
    """Polish on the fixed-step half-period map and compute chi."""
    free, rows = _free(tag)
    u = np.append(x0[free], tau)
    h = step or MAX_STEP
    n_half = _even(tau / h) // 2
    u, _ = _newton(u, free, rows, n_half, params, max_iter=20)
    return _make_orbit(u, free, tag, n_half, params)


def _make_orbit(u, free, tag, n_half, params):
    return _accept(u, free, tag, n_half, params).orbit


# ---------------------------------------------------------------------------
# sampling and geometric orbit descriptors


def sample_orbit(orbit: PeriodicOrbit, n: int,
                 params: SystemParams = SystemParams()) -> tuple[np.ndarray, np.ndarray]:
    """``n`` states at uniformly spaced times in ``[0, period)``.

    Returns ``(times, states)`` with ``states`` of shape ``(n, 6)``. The RK4
    step never exceeds the orbit's own integration step.
    """
    if n < 2:
        raise ValueError("need at least two samples")
    dt = orbit.period / n
    m = max(1, int(math.ceil(dt / orbit.step - 1e-9)))
    states = np.empty((n, 6))
    x = orbit.x0.copy()
    for i in range(n):
        states[i] = x
        if i + 1 < n:
            x = dyn.propagate(x, dt, m, params)
    return np.arange(n) * dt, states


def sample_orbit_uniform_nu(orbit: PeriodicOrbit, n: int, params: SystemParams = SystemParams(),
                            oversample: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """``n`` states at evenly spaced location angles, starting from ``x0``.

    The crossing time of each target angle is interpolated on a dense
    uniform-time grid, and the state is propagated from the preceding grid
    point, so every sample lies exactly on the orbit.
    """
    t, x = sample_orbit(orbit, oversample * n, params)
    nu = np.unwrap(location_angle(x, orbit.tag, params))
    sign = 1.0 if nu[-1] > nu[0] else -1.0
    tt = np.r_[t, orbit.period]
    nn = sign * (np.r_[nu, nu[0] + sign * 2 * np.pi] - nu[0])
    times = np.interp(2 * np.pi * np.arange(n) / n, nn, tt)
    k = np.searchsorted(t, times, side="right") - 1
    states = np.empty((n, 6))
    for i, (j, ti) in enumerate(zip(k, times)):
        h = ti - t[j]
        states[i] = x[j] if h <= 0 else dyn.propagate(
            x[j], h, max(1, int(math.ceil(h / orbit.step - 1e-9))), params)
    return times, states


def perilune(orbit: PeriodicOrbit, params: SystemParams = SystemParams(), n: int = 2000) -> float:
    _, states = sample_orbit(orbit, n, params)
    return _r_moon(states, params)


def _r_moon(states, params):
    return float(np.linalg.norm(states[:, :3] - [1 - params.mu, 0, 0], axis=1).min())


def location_angle(states, tag: FamilyTag, params: SystemParams = SystemParams()) -> np.ndarray:
    """Angle locating each state along its orbit, in ``[-pi, pi)``.

    Lyapunov: planar angle of the offset from the libration point, measured
    from the axis pointing at the Moon. Halo/NRHO: angle of the (y, z)
    projection of the offset, measured from +z towards +y.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    lp = libration_point(tag.point, params)
    d = states[:, :3] - lp.position
    if tag.planar:
        s = _moon_side(tag.point)
        a, b = s * d[:, 1], s * d[:, 0]
    else:
        a, b = d[:, 1], d[:, 2]
    if np.any(np.hypot(a, b) < 1e-14):
        raise ValueError("location angle undefined on the projection axis")
    return _wrap(np.arctan2(a, b))


def _wrap(angle):
    return (np.asarray(angle) + np.pi) % (2 * np.pi) - np.pi


def winds_once(states, tag, params) -> bool:
    """True when the location angle sweeps one full turn monotonically."""
    raw = location_angle(states, tag, params)
    nu = np.unwrap(np.append(raw, raw[0]))
    d = np.diff(nu)
    return bool((np.all(d > 0) or np.all(d < 0)) and abs(abs(nu[-1] - nu[0]) - 2 * np.pi) < 1e-6)


def projection_roundness(states, tag, params: SystemParams = SystemParams()) -> float:
    """Min over max distance of the projected path from the libration point.

    The location angle of a thin loop (ratio near 0) turns very unevenly, and
    no low-order trigonometric polynomial in it reproduces the state well.
    """
    d = np.atleast_2d(states)[:, :3] - libration_point(tag.point, params).position
    r = np.hypot(d[:, 0], d[:, 1]) if tag.planar else np.hypot(d[:, 1], d[:, 2])
    return float(r.min() / r.max())


def _top_distance(orbit, states, params):
    """Distance from the highest point of the orbit to its libration point."""
    lp = libration_point(orbit.tag.point, params)
    sign = -1.0 if orbit.tag.branch is Branch.SOUTH else 1.0
    k = int(np.argmax(sign * states[:, 2]))
    n = len(states)
    dt = orbit.period / n
    base = states[k - 1] if k > 0 else states[-1]
    m = max(2, int(math.ceil(2 * dt / orbit.step)))

    def at(s):
        return dyn.propagate(base, s, max(1, int(math.ceil(m * s / (2 * dt)))), params)

    res = minimize_scalar(lambda s: -sign * at(s)[2], bounds=(0.0, 2 * dt), method="bounded",
                          options={"xatol": 1e-10})
    return float(np.linalg.norm(at(res.x)[:3] - lp.position))


def describe(orbit: PeriodicOrbit, params: SystemParams = SystemParams()):
    """``(chi, perilune radius, samples)`` of an orbit from one sampling pass."""
    _, states = sample_orbit(orbit, CHI_SAMPLES, params)
    if orbit.tag.planar:
        lp = libration_point(orbit.tag.point, params)
        side = _moon_side(orbit.tag.point)
        x0 = orbit.x0[0] if side * (orbit.x0[0] - lp.x) > 0 else states[CHI_SAMPLES // 2, 0]
        chi = abs(x0 - lp.x)
    else:
        chi = _top_distance(orbit, states, params)
    return chi, _r_moon(states, params), states


def orbit_chi(orbit: PeriodicOrbit, params: SystemParams = SystemParams()) -> float:
    """Family coordinate of an orbit.

    Lyapunov: distance from the libration point to the Moon-side x-axis
    crossing. Halo/NRHO: distance from the highest point (max z; min z for
    southern branches) to the libration point, located on a 1000-point
    sampling and refined by a bounded scalar search.
    """
    return describe(orbit, params)[0]


# ---------------------------------------------------------------------------
# pseudo-arclength continuation


@dataclass
class _Member:
    u: np.ndarray
    n_half: int
    orbit: PeriodicOrbit | None
    r_min: float
    winds: bool = True
    roundness: float = 1.0


def _accept(u, free, tag, n_half, params):
    x0 = _state_from(u, free)
    orbit = PeriodicOrbit(tag, x0, 2.0 * u[-1], 0.0, 2 * n_half)
    chi, r_min, states = describe(orbit, params)
    orbit = PeriodicOrbit(tag, x0, orbit.period, chi, 2 * n_half)
    return _Member(u, n_half, orbit, r_min, winds_once(states, tag, params),
                   projection_roundness(states, tag, params))


def _continuation(seed: _Member, free, rows, tag, step, count, params, tangent=None,
                  stop=None, max_step_factor=1.0):
    """Yield successive family members; the first yielded is ``seed``."""
    members = [seed]
    yield seed
    t = tangent if tangent is not None else _tangent(seed.u, free, rows, seed.n_half, params)
    ds = step
    easy = 0
    chi_dir = 0.0
    while len(members) < count:
        cur = members[-1]
        n_half = _even(cur.u[-1] / step_for_perilune(cur.r_min)) // 2
        while True:
            u_pred = cur.u + ds * t
            try:
                u_new, its = _newton(u_pred, free, rows, n_half, params, tangent=t,
                                     u_prev=cur.u, ds=ds)
                break
            except (CorrectionError, dyn.SingularityError, np.linalg.LinAlgError):
                ds *= 0.5
                easy = 0
                if ds < step / 64:
                    raise CorrectionError(f"continuation stalled after {len(members)} members")
        mem = _accept(u_new, free, tag, n_half, params)
        dchi = mem.orbit.chi - cur.orbit.chi
        if chi_dir == 0.0:
            chi_dir = math.copysign(1.0, dchi)
        if dchi * chi_dir <= 0.0:
            log.info("chi turns back after %d members; stopping", len(members))
            return
        if not mem.winds:
            log.info("location angle no longer winds once after %d members; stopping",
                     len(members))
            return
        if stop is not None and stop(mem):
            return
        members.append(mem)
        yield mem
        t = _tangent(mem.u, free, rows, mem.n_half, params, prev=t)
        easy = easy + 1 if its <= 3 else 0
        if easy >= 3 and ds * 2 <= step * max_step_factor:
            ds *= 2
            easy = 0


def _member_from_orbit(orbit: PeriodicOrbit, params) -> _Member:
    free, _ = _free(orbit.tag)
    u = np.append(orbit.x0[free], orbit.period / 2)
    return _accept(u, free, orbit.tag, orbit.substeps // 2, params)


def _orient(free, rows, mem, tag, step, params):
    """Tangent at ``mem`` pointing towards increasing chi."""
    t = _tangent(mem.u, free, rows, mem.n_half, params)
    trial = cur = mem
    try:
        u_new, _ = _newton(mem.u + step * t, free, rows, mem.n_half, params, tangent=t,
                           u_prev=mem.u, ds=step)
        trial = _accept(u_new, free, tag, mem.n_half, params)
    except CorrectionError:
        pass
    if trial is not cur and trial.orbit.chi < cur.orbit.chi:
        t = -t
    return t


def pac_continue(seed: PeriodicOrbit, step: float = 5e-3, count: int = 200,
                 params: SystemParams = SystemParams(), stop=None,
                 tangent=None) -> FamilyCatalog:
    """Continue a family from ``seed`` by pseudo-arclength steps.

    The unknowns are the free initial-state components and the half period;
    each member satisfies the half-period symmetry conditions plus the
    arclength equation ``t . (u - u_prev) = ds``. The tangent is oriented so
    that chi increases. On corrector failure the step is halved down to
    ``step/64``; below that the partial catalog is returned with status
    ``"partial"``.
    """
    free, rows = _free(seed.tag)
    mem = _member_from_orbit(seed, params)
    if tangent is None and count > 1:
        tangent = _orient(free, rows, mem, seed.tag, step, params)
    orbits = []
    status = "complete"
    try:
        for m in _continuation(mem, free, rows, seed.tag, step, count, params,
                               tangent=tangent, stop=stop):
            orbits.append(m.orbit)
    except CorrectionError as exc:
        log.warning("%s", exc)
        status = "partial"
    cat = FamilyCatalog(seed.tag, orbits, params.mu, status=status)
    cat.tolerances["step"] = step
    cat.check_invariants()
    return cat


# ---------------------------------------------------------------------------
# family generation


LYAPUNOV_SEED_AMPLITUDE = 0.005
HALO_SEED_OFFSET = 1e-3


def _vertical_index(mem: _Member, params) -> float:
    # d(vz)/d(z0) at the half period; vanishes where the halo branch bifurcates
    x0 = _state_from(mem.u, [0, 4])
    _, phi = dyn.propagate_with_stm(x0, mem.u[-1], mem.n_half, params)
    return float(phi[5, 2])


def lyapunov_seed(point: Point, params: SystemParams = SystemParams()) -> PeriodicOrbit:
    tag = FamilyTag(Kind.LYAPUNOV, point)
    return differential_correction(initial_guess(tag, LYAPUNOV_SEED_AMPLITUDE, params), tag,
                                   params)


def halo_bifurcation(point: Point, params: SystemParams = SystemParams(),
                     step: float = 5e-3) -> PeriodicOrbit:
    """Lyapunov member at which the halo family branches off."""
    tag = FamilyTag(Kind.LYAPUNOV, point)
    seed = lyapunov_seed(point, params)
    free, rows = _free(tag)
    mem = _member_from_orbit(seed, params)
    tangent = _orient(free, rows, mem, tag, step, params)
    prev, prev_idx = None, None
    for m in _continuation(mem, free, rows, tag, step, 10_000, params, tangent=tangent):
        idx = _vertical_index(m, params)
        if prev is not None and idx * prev_idx < 0:
            break
        prev, prev_idx = m, idx
    else:
        raise CorrectionError("no halo bifurcation found along the Lyapunov family")
    # secant refinement between the bracketing members
    a, fa, b, fb = prev, prev_idx, m, idx
    for _ in range(30):
        w = fa / (fa - fb)
        u_guess = a.u + w * (b.u - a.u)
        t = (b.u - a.u) / np.linalg.norm(b.u - a.u)
        u, _ = _newton(u_guess, free, rows, a.n_half, params, tangent=t, u_prev=a.u,
                       ds=t @ (u_guess - a.u))
        c = _Member(u, a.n_half, None, a.r_min)
        fc = _vertical_index(c, params)
        if abs(fc) < 1e-10 or np.linalg.norm(b.u - a.u) < 1e-12:
            break
        if fc * fa < 0:
            b, fb = c, fc
        else:
            a, fa = c, fc
    return _make_orbit(u, free, tag, a.n_half, params)


def halo_seed(point: Point, branch: Branch = Branch.NORTH,
              params: SystemParams = SystemParams(),
              offset: float = HALO_SEED_OFFSET) -> tuple[PeriodicOrbit, np.ndarray]:
    """First halo member next to the bifurcation, and the branch tangent.

    The bifurcating Lyapunov orbit is started from its far-side crossing (the
    one away from the Moon), lifted out of plane by ``offset`` and corrected
    with ``z0`` frozen. The far-side crossing stays the apolune crossing all
    the way into the NRHO range.
    """
    lyap = halo_bifurcation(point, params)
    far = dyn.propagate(lyap.x0, lyap.period / 2, lyap.substeps // 2, params)
    sign = 1.0 if branch is Branch.NORTH else -1.0
    tag = FamilyTag(Kind.HALO, point, branch)
    free, rows = _free(tag)
    u0 = np.array([far[0], 0.0, far[4], lyap.period / 2])
    e_z = np.array([0.0, sign, 0.0, 0.0])
    n_half = lyap.substeps // 2
    u, _ = _newton(u0 + offset * e_z, free, rows, n_half, params, tangent=e_z, u_prev=u0,
                   ds=offset)
    seed = _make_orbit(u, free, tag, n_half, params)
    return seed, _tangent(u, free, rows, n_half, params, prev=e_z)


DEFAULT_STEPS = {Kind.LYAPUNOV: 5e-3, Kind.HALO: 2e-3, Kind.NRHO: 5e-4}


def _retag(orbit: PeriodicOrbit, tag: FamilyTag) -> PeriodicOrbit:
    return PeriodicOrbit(tag, orbit.x0, orbit.period, orbit.chi, orbit.substeps)


def generate_family(tag: FamilyTag, count: int = 200, step: float | None = None,
                    params: SystemParams = SystemParams(),
                    min_perilune: float = NRHO_MIN_PERILUNE,
                    min_roundness: float = HALO_MIN_ROUNDNESS) -> FamilyCatalog:
    """Build a catalog of ``count`` members (fewer if the family range ends).

    Lyapunov families start from a small corrected linear seed. Halo families
    are continued from the Lyapunov bifurcation. They are recorded from the
    first member whose yz projection reaches ``min_roundness`` and stop where
    the perilune radius drops below the NRHO threshold. NRHO catalogs continue
    the same branch from there down to ``min_perilune``.
    """
    step = step or DEFAULT_STEPS[tag.kind]
    if tag.kind is Kind.LYAPUNOV:
        return pac_continue(lyapunov_seed(tag.point, params), step, count, params)

    seed, tangent = halo_seed(tag.point, tag.branch, params)
    free, rows = _free(seed.tag)
    mem = _member_from_orbit(seed, params)
    orbits = []
    status = "complete"
    if tag.kind is Kind.HALO:
        def stop(m):
            return m.r_min < NRHO_PERILUNE
        gen = _continuation(mem, free, rows, seed.tag, step, 100_000, params, tangent, stop)
        gen = itertools.islice(itertools.dropwhile(lambda m: m.roundness < min_roundness, gen),
                               count)
    else:
        # walk the halo range at the halo step, then go on finer into the NRHO range
        prev = last = mem
        for m in _continuation(mem, free, rows, seed.tag, DEFAULT_STEPS[Kind.HALO], 100_000,
                               params, tangent, lambda m: m.r_min < NRHO_PERILUNE):
            prev, last = last, m
        t = _tangent(last.u, free, rows, last.n_half, params, prev=last.u - prev.u)
        first = None
        for m in _continuation(last, free, rows, seed.tag, step, 100_000, params, t):
            if m.r_min < NRHO_PERILUNE:
                first = m
                break
            prev = m
        if first is None:
            raise CorrectionError("halo branch never reaches the NRHO range")
        mem = first
        tangent = _tangent(first.u, free, rows, first.n_half, params, prev=first.u - prev.u)

        def stop(m):
            return m.r_min < min_perilune
        gen = _continuation(mem, free, rows, seed.tag, step, count, params, tangent, stop)
    try:
        for m in gen:
            orbits.append(_retag(m.orbit, tag))
    except CorrectionError as exc:
        log.warning("%s", exc)
        status = "partial"
    cat = FamilyCatalog(tag, orbits, params.mu, status=status)
    cat.tolerances["step"] = step
    cat.check_invariants()
    return cat
