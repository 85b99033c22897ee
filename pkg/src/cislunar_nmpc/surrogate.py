"""
Polynomial surrogate of an orbit family's state as a function of (chi, nu).

Each family is cut into contiguous chi slices ("sub-manifolds"). On every
slice each state component is a least-squares polynomial in the monomials

    chi^a * cos(nu)^b * sin(nu)^c,    a + b + c <= N

with chi mapped affinely to [-1, 1] over the slice. Since cos^2 + sin^2 = 1
the basis is redundant; a column-pivoted QR keeps an independent subset and
the dropped columns get zero coefficients.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from .dynamics import SystemParams
from .families import (FamilyCatalog, FamilyTag, Kind, PeriodicOrbit, location_angle,
                       orbit_chi, sample_orbit, sample_orbit_uniform_nu)

DEFAULT_DEGREE = 6
DEFAULT_PARTS = 4
# (degree, parts) per family kind, from a held-out sweep (see ``degree_sweep``).
# The Lyapunov location angle turns unevenly on the elongated orbits, so its
# trigonometric content needs a much higher order.
KIND_DEFAULTS = {Kind.LYAPUNOV: (14, 8), Kind.HALO: (10, 4), Kind.NRHO: (10, 4)}
DEFAULT_SAMPLES = 100
RANK_TOL = 1e-11


class IllConditionedFit(ValueError):
    pass


class ChiOutOfRange(ValueError):
    pass


def exponents(degree: int) -> np.ndarray:
    """All ``(a, b, c)`` with ``a + b + c <= degree``, lowest total order first."""
    out = [(a, b, t - a - b) for t in range(degree + 1)
           for a in range(t, -1, -1) for b in range(t - a, -1, -1)]
    return np.array(out, dtype=int)


def intrinsic_rank(degree: int) -> int:
    # chi^a times a trigonometric polynomial of order degree - a
    return (degree + 1) ** 2


def _powers(x, n):
    x = np.asarray(x, dtype=float)
    p = np.ones((n + 1,) + x.shape)
    for k in range(1, n + 1):
        p[k] = p[k - 1] * x
    return p


def design_matrix(chi_n, nu, exps) -> np.ndarray:
    n = int(exps.max()) if len(exps) else 0
    cp = _powers(chi_n, n)
    c = _powers(np.cos(nu), n)
    s = _powers(np.sin(nu), n)
    return (cp[exps[:, 0]] * c[exps[:, 1]] * s[exps[:, 2]]).T


@dataclass
class SubManifoldModel:
    chi_range: tuple[float, float]
    degree: int
    exps: np.ndarray
    coef: np.ndarray  # (n_terms, 6)
    diagnostics: dict = field(default_factory=dict)
    nu_rate: float = 0.0
    period: float = 0.0

    def __post_init__(self):
        lo, hi = self.chi_range
        if not lo < hi:
            raise ValueError("chi_range must satisfy L < U")
        self.exps = np.asarray(self.exps, dtype=int)
        self.coef = np.asarray(self.coef, dtype=float)
        if np.any(self.exps.sum(axis=1) > self.degree):
            raise ValueError("exponent triple exceeds the total-order cap")

    @property
    def center(self) -> float:
        return 0.5 * (self.chi_range[0] + self.chi_range[1])

    @property
    def scale(self) -> float:
        return 0.5 * (self.chi_range[1] - self.chi_range[0])

    def normalize(self, chi):
        return (np.asarray(chi, dtype=float) - self.center) / self.scale

    def contains(self, chi, tol=0.0) -> bool:
        return self.chi_range[0] - tol <= chi <= self.chi_range[1] + tol

    def __call__(self, chi, nu) -> np.ndarray:
        chi, nu = np.broadcast_arrays(np.asarray(chi, dtype=float), np.asarray(nu, dtype=float))
        A = design_matrix(self.normalize(chi).ravel(), nu.ravel(), self.exps)
        return (A @ self.coef).reshape(chi.shape + (6,))

    def _compact(self):
        # pivoting leaves zero rows for dropped columns; skip them when evaluating
        if getattr(self, "_cache", None) is None or self._cache[0] is not self.coef:
            keep = np.any(self.coef != 0.0, axis=1)
            self._cache = (self.coef, self.exps[keep], np.ascontiguousarray(self.coef[keep]))
        return self._cache[1], self._cache[2]

    def eval_grad(self, chi, nu):
        """Values and partial derivatives with respect to chi and nu.

        Inputs are 1-D arrays of equal length; returns three ``(n, 6)`` arrays.
        """
        x = self.normalize(np.atleast_1d(chi))
        nu = np.atleast_1d(np.asarray(nu, dtype=float))
        e, coef = self._compact()
        n = self.degree + 1
        cp = _powers(x, n)
        c = _powers(np.cos(nu), n)
        s = _powers(np.sin(nu), n)
        a, b, k = e[:, 0], e[:, 1], e[:, 2]
        X, C, S = cp[a], c[b], s[k]
        CS = C * S
        val = (X * CS).T @ coef
        dX = a[:, None] * cp[np.maximum(a - 1, 0)] / self.scale
        dchi = (dX * CS).T @ coef
        # d/dnu cos^b sin^k = -b cos^(b-1) sin^(k+1) + k cos^(b+1) sin^(k-1)
        dC = -b[:, None] * c[np.maximum(b - 1, 0)] * s[k + 1] \
            + k[:, None] * c[b + 1] * s[np.maximum(k - 1, 0)]
        dnu = (X * dC).T @ coef
        return val, dchi, dnu

    def to_dict(self) -> dict:
        coeffs = [{"exponents": [int(v) for v in self.exps[t]], "alpha": float(self.coef[t, i]),
                   "component": i}
                  for t in range(len(self.exps)) for i in range(6)]
        return {"chi_range": [float(v) for v in self.chi_range], "degree": self.degree,
                "normalization": {"center": self.center, "scale": self.scale},
                "nu_rate": self.nu_rate, "period": self.period,
                "coefficients": coeffs, "diagnostics": self.diagnostics}

    @classmethod
    def from_dict(cls, d: dict) -> "SubManifoldModel":
        exps = exponents(int(d["degree"]))
        index = {tuple(e): i for i, e in enumerate(exps.tolist())}
        coef = np.zeros((len(exps), 6))
        for item in d["coefficients"]:
            coef[index[tuple(item["exponents"])], int(item["component"])] = item["alpha"]
        return cls(tuple(d["chi_range"]), int(d["degree"]), exps, coef,
                   d.get("diagnostics", {}), float(d.get("nu_rate", 0.0)),
                   float(d.get("period", 0.0)))


@dataclass
class TrainingSet:
    chi: np.ndarray
    nu: np.ndarray
    states: np.ndarray
    member: np.ndarray  # catalog index of each sample


def training_data(orbits, samples: int = DEFAULT_SAMPLES,
                  params: SystemParams = SystemParams()) -> TrainingSet:
    """Samples at evenly spaced location angles along every orbit.

    Uniform time spacing leaves wide angle gaps where the spacecraft moves
    fast (perilune), and the polynomial is unconstrained inside them.
    """
    chis, nus, states, idx = [], [], [], []
    for i, orbit in enumerate(orbits):
        _, x = sample_orbit_uniform_nu(orbit, samples, params)
        chis.append(np.full(samples, orbit.chi))
        nus.append(location_angle(x, orbit.tag, params))
        states.append(x)
        idx.append(np.full(samples, i))
    return TrainingSet(np.concatenate(chis), np.concatenate(nus), np.vstack(states),
                       np.concatenate(idx))


def fit_mpr(chi, nu, states, degree: int = DEFAULT_DEGREE,
            chi_range: tuple[float, float] | None = None) -> SubManifoldModel:
    """Least-squares fit of every state component over the monomial basis."""
    chi = np.asarray(chi, dtype=float)
    nu = np.asarray(nu, dtype=float)
    states = np.asarray(states, dtype=float)
    if chi_range is None:
        chi_range = (float(chi.min()), float(chi.max()))
    exps = exponents(degree)
    if len(chi) < intrinsic_rank(degree):
        raise IllConditionedFit(
            f"{len(chi)} samples cannot determine a degree-{degree} fit; "
            "add data or lower the degree")
    model = SubManifoldModel(chi_range, degree, exps, np.zeros((len(exps), 6)))
    A = design_matrix(model.normalize(chi), nu, exps)
    Q, R, piv = linalg.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > RANK_TOL * diag[0]))
    if rank < intrinsic_rank(degree):
        raise IllConditionedFit(
            f"numerical rank {rank} < {intrinsic_rank(degree)} for degree {degree}; "
            "add data or lower the degree")
    sol = linalg.solve_triangular(R[:rank, :rank], Q[:, :rank].T @ states)
    model.coef[piv[:rank]] = sol
    resid = A @ model.coef - states
    model.diagnostics = residual_stats(resid)
    return model


def residual_stats(resid) -> dict:
    resid = np.atleast_2d(resid)
    return {
        "max_residual": float(np.max(np.abs(resid))),
        "rms_residual": float(np.sqrt(np.mean(resid ** 2))),
        "max_position_error": float(np.max(np.linalg.norm(resid[:, :3], axis=1))),
        "max_velocity_error": float(np.max(np.linalg.norm(resid[:, 3:], axis=1))),
    }


def split_submanifolds(catalog: FamilyCatalog, parts: int) -> list[FamilyCatalog]:
    """Contiguous chi slices sharing one boundary member with each neighbour."""
    m = len(catalog)
    if parts < 1:
        raise ValueError("parts must be >= 1")
    if parts == 1:
        return [catalog]
    if parts > m - 1:
        raise ValueError(f"cannot split {m} members into {parts} overlapping parts")
    cuts = np.round(np.linspace(0, m - 1, parts + 1)).astype(int)
    return [FamilyCatalog(catalog.tag, catalog.members[cuts[k]:cuts[k + 1] + 1], catalog.mu,
                          dict(catalog.tolerances), catalog.created, catalog.status)
            for k in range(parts)]


@dataclass
class MprModel:
    tag: FamilyTag
    subs: list[SubManifoldModel]
    mu: float
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.subs = sorted(self.subs, key=lambda s: s.chi_range[0])
        for a, b in zip(self.subs, self.subs[1:]):
            if not math.isclose(a.chi_range[1], b.chi_range[0], rel_tol=0, abs_tol=1e-14):
                raise ValueError("sub-manifold chi ranges must tile the family without gaps")

    @property
    def chi_range(self) -> tuple[float, float]:
        return self.subs[0].chi_range[0], self.subs[-1].chi_range[1]

    @property
    def params(self) -> SystemParams:
        return SystemParams(self.mu)

    def index_of(self, chi: float) -> int:
        lo, hi = self.chi_range
        if not lo <= chi <= hi:
            raise ChiOutOfRange(f"chi={chi} outside family range [{lo}, {hi}]")
        for k, sub in enumerate(self.subs):
            if chi <= sub.chi_range[1]:
                return k
        return len(self.subs) - 1

    def sub_for(self, chi: float) -> SubManifoldModel:
        return self.subs[self.index_of(chi)]

    def __call__(self, chi: float, nu: float) -> np.ndarray:
        return self.sub_for(float(chi))(chi, nu)

    def to_json(self) -> str:
        return json.dumps({"tag": self.tag.to_dict(), "mu": self.mu,
                           "sub_manifolds": [s.to_dict() for s in self.subs],
                           "diagnostics": self.diagnostics}, indent=1)

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def from_json(cls, text: str) -> "MprModel":
        d = json.loads(text)
        return cls(FamilyTag.from_dict(d["tag"]),
                   [SubManifoldModel.from_dict(s) for s in d["sub_manifolds"]],
                   float(d["mu"]), d.get("diagnostics", {}))

    @classmethod
    def load(cls, path) -> "MprModel":
        return cls.from_json(Path(path).read_text())


def eval_mpr(model: MprModel, chi: float, nu: float) -> np.ndarray:
    return model(chi, nu)


def parameterize(state, tag: FamilyTag, params: SystemParams = SystemParams()) -> float:
    """Location angle nu of a single state (see :func:`families.location_angle`)."""
    return float(location_angle(np.asarray(state)[None, :], tag, params)[0])


def holdout_split(n: int, fraction: float) -> np.ndarray:
    """Boolean mask of held-out members: evenly spread, never the end members."""
    mask = np.zeros(n, dtype=bool)
    k = int(round(fraction * n))
    if k <= 0:
        return mask
    if n - k < 2:
        raise ValueError("holdout leaves fewer than two training members")
    idx = np.round(np.linspace(1, n - 2, k)).astype(int)
    mask[np.unique(idx)] = True
    return mask


def default_fit(tag: FamilyTag) -> tuple[int, int]:
    """Default ``(degree, parts)`` for a family."""
    return KIND_DEFAULTS.get(tag.kind, (DEFAULT_DEGREE, DEFAULT_PARTS))


def build_model(catalog: FamilyCatalog, degree: int | None = None,
                parts: int | None = None, samples: int = DEFAULT_SAMPLES,
                holdout: float = 0.0) -> MprModel:
    """Fit one sub-manifold model per chi slice of ``catalog``.

    ``degree`` and ``parts`` default to ``default_fit(catalog.tag)``. With
    ``holdout > 0`` that fraction of interior members is withheld from
    fitting and the reconstruction error on them is stored in the model
    diagnostics under ``"holdout"``.
    """
    d_deg, d_parts = default_fit(catalog.tag)
    degree = d_deg if degree is None else degree
    parts = d_parts if parts is None else parts
    params = catalog.params
    if catalog.chis[0] > catalog.chis[-1]:
        catalog = FamilyCatalog(catalog.tag, catalog.members[::-1], catalog.mu,
                                catalog.tolerances, catalog.created, catalog.status)
    held = holdout_split(len(catalog), holdout)
    subs = []
    held_resid = []
    for part in split_submanifolds(catalog, parts):
        members = part.members
        lo, hi = members[0].chi, members[-1].chi
        train = [m for m in members if not held[_index(catalog, m)]]
        test = [m for m in members if held[_index(catalog, m)]]
        data = training_data(train, samples, params)
        sub = fit_mpr(data.chi, data.nu, data.states, degree, (lo, hi))
        periods = np.array([m.period for m in members])
        nu0 = location_angle(np.array([m.x0 for m in members[:1]]), catalog.tag, params)
        x1 = sample_orbit(members[0], 64, params)[1][1]
        nu1 = location_angle(x1[None, :], catalog.tag, params)
        direction = np.sign(_wrap_diff(nu1[0], nu0[0]))
        sub.nu_rate = float(direction * 2 * np.pi / periods.mean())
        sub.period = float(periods.mean())
        if test:
            tdata = training_data(test, samples, params)
            r = sub(tdata.chi, tdata.nu) - tdata.states
            sub.diagnostics["holdout"] = residual_stats(r)
            held_resid.append(r)
        subs.append(sub)
    model = MprModel(catalog.tag, subs, catalog.mu)
    model.diagnostics = {
        "degree": degree, "parts": parts, "samples_per_member": samples,
        "max_residual": max(s.diagnostics["max_residual"] for s in subs),
        "max_position_error": max(s.diagnostics["max_position_error"] for s in subs),
        "max_velocity_error": max(s.diagnostics["max_velocity_error"] for s in subs),
    }
    if held_resid:
        model.diagnostics["holdout"] = residual_stats(np.vstack(held_resid))
        model.diagnostics["holdout_fraction"] = holdout
    return model


def degree_sweep(catalog: FamilyCatalog, degrees=range(3, 11), parts: int | None = None,
                 holdout: float = 0.2, samples: int = DEFAULT_SAMPLES) -> list[dict]:
    """Held-out reconstruction error for each candidate degree."""
    rows = []
    for n in degrees:
        try:
            m = build_model(catalog, n, parts, samples, holdout)
        except IllConditionedFit as exc:
            rows.append({"degree": n, "error": str(exc)})
            continue
        h = m.diagnostics.get("holdout", {})
        rows.append({"degree": n, "parts": m.diagnostics["parts"],
                     "train_position": m.diagnostics["max_position_error"],
                     "train_velocity": m.diagnostics["max_velocity_error"],
                     "holdout_position": h.get("max_position_error", float("nan")),
                     "holdout_velocity": h.get("max_velocity_error", float("nan"))})
    return rows


def _index(catalog, member):
    for i, m in enumerate(catalog.members):
        if m is member:
            return i
    raise KeyError("member not in catalog")


def _wrap_diff(a, b):
    return (a - b + np.pi) % (2 * np.pi) - np.pi


def export_residuals_csv(model: MprModel, catalog: FamilyCatalog, path,
                         samples: int = DEFAULT_SAMPLES):
    """Per-sample reconstruction errors for plotting."""
    params = catalog.params
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["member", "sub", "chi", "nu", "err_x", "err_y", "err_z",
                    "err_vx", "err_vy", "err_vz"])
        for i, orbit in enumerate(catalog.members):
            data = training_data([orbit], samples, params)
            k = model.index_of(orbit.chi)
            r = model.subs[k](data.chi, data.nu) - data.states
            for j in range(samples):
                w.writerow([i, k, repr(data.chi[j]), repr(data.nu[j])]
                           + [repr(float(v)) for v in r[j]])


def member_chi(orbit: PeriodicOrbit, params: SystemParams = SystemParams()) -> float:
    return orbit_chi(orbit, params)
