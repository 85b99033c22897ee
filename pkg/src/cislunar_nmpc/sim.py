"""
Closed-loop simulation: truth dynamics with disturbances, EKF navigation and
the family-tracking controller, plus campaign drivers built on top of it.

One control step lasts ``Ts``. The controller acts on the current estimate,
the impulse is applied to the truth, and then for each of the ``Ts/Ts_hat``
fine steps the truth is propagated under the bias acceleration plus a fresh
Gaussian acceleration held over that fine step (see :class:`Disturbance`),
the filter predicts, and one measurement is processed.
"""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from . import dynamics as dyn
from . import ekf as kf
from .dynamics import SingularityError
from .families import PeriodicOrbit
from .nmpc import IMPULSES_PER_REV, HorizonSolution, Mode, NmpcConfig, controller_step
from .surrogate import MprModel

STEADY_FRACTION = 0.05
DISPERSION = 1e-6
TRUTH_STEP = 5e-4


@dataclass
class Disturbance:
    """Bias acceleration plus random acceleration on the truth.

    ``noise="white"`` treats ``sigma_q`` as the spectral density of white
    acceleration noise, the model the filter assumes: each fine step of
    length ``dt`` gets an acceleration drawn with standard deviation
    ``sigma_q / sqrt(dt)``. ``noise="held"`` draws it with standard deviation
    ``sigma_q`` instead.
    """

    bias: tuple[float, float, float] = (1e-4, 0.0, 0.0)
    sigma_q: float = 1e-3
    noise: str = "white"

    def __post_init__(self):
        self.bias = tuple(float(v) for v in self.bias)
        if len(self.bias) != 3 or self.sigma_q < 0:
            raise ValueError("bias must be a 3-vector and sigma_q >= 0")
        if self.noise not in ("white", "held"):
            raise ValueError("noise must be 'white' or 'held'")

    def accel_sigma(self, dt: float) -> float:
        return self.sigma_q / math.sqrt(dt) if self.noise == "white" else self.sigma_q

    @classmethod
    def none(cls) -> "Disturbance":
        return cls((0.0, 0.0, 0.0), 0.0)


@dataclass
class Scenario:
    """Everything one closed-loop run needs.

    ``x0`` is the true initial state and ``chi0`` the family parameter of the
    nominal member, against which the chi history is reported. With
    ``estimate_error`` the filter starts from ``x0`` plus a draw from its own
    initial covariance; otherwise from ``x0`` exactly.
    """

    model: MprModel
    x0: np.ndarray
    chi0: float
    nmpc: NmpcConfig
    ekf: kf.EkfConfig = field(default_factory=kf.EkfConfig)
    disturbance: Disturbance = field(default_factory=Disturbance)
    revolutions: int = 5
    seed: int = 0
    estimate_error: bool = True
    sensor_noise: bool = True
    x_est0: np.ndarray | None = None
    period: float | None = None  # nominal orbital period; sets steps per revolution

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        if self.revolutions < 1:
            raise ValueError("revolutions must be >= 1")

    @property
    def steps_per_rev(self) -> int:
        if self.period is None:
            return IMPULSES_PER_REV
        return max(1, int(round(self.period / self.nmpc.Ts)))

    @property
    def n_steps(self) -> int:
        return self.revolutions * self.steps_per_rev

    @property
    def truth_substeps(self) -> int:
        return dyn.substeps_for(self.nmpc.Ts_hat, TRUTH_STEP)


def scenario_for_member(model: MprModel, orbit: PeriodicOrbit, revolutions: int = 5,
                        seed: int = 0, disturbance: Disturbance | None = None,
                        ekf: kf.EkfConfig | None = None, **nmpc_overrides) -> Scenario:
    cfg = NmpcConfig.for_family(model, orbit.chi, orbit.period, **nmpc_overrides)
    return Scenario(model, orbit.x0.copy(), orbit.chi, cfg, ekf or kf.EkfConfig(),
                    disturbance or Disturbance(), revolutions, seed, period=orbit.period)


def null_scenario(model: MprModel, orbit: PeriodicOrbit, revolutions: int = 2,
                  **nmpc_overrides) -> Scenario:
    """On-member start, no disturbance, noise-free sensors, exact initial estimate."""
    scn = scenario_for_member(model, orbit, revolutions, 0, Disturbance.none(), **nmpc_overrides)
    scn.estimate_error = False
    scn.sensor_noise = False
    return scn


@dataclass
class RunMetrics:
    total_dv: float
    total_dv_ms: float
    dv: np.ndarray             # (n, 3) applied impulses
    convergence_time: float    # revolutions; nan if not converged
    converged: bool
    mean_solve_time: float     # seconds
    p95_solve_time: float
    chi: np.ndarray            # controller's chi per step
    dchi: np.ndarray           # change of chi over each step (first entry: chi - chi0)
    estimation_error: np.ndarray  # position error norm per step
    final_chi: float
    chi_in_bounds: bool
    failed_steps: int
    aborted: bool = False
    message: str = ""

    def summary(self) -> dict:
        return {
            "total_dv": self.total_dv, "total_dv_ms": self.total_dv_ms,
            "impulses": int(len(self.dv)),
            "convergence_time_rev": None if math.isnan(self.convergence_time)
            else self.convergence_time,
            "converged": self.converged,
            "mean_solve_time_s": self.mean_solve_time, "p95_solve_time_s": self.p95_solve_time,
            "final_chi": self.final_chi, "chi_in_bounds": self.chi_in_bounds,
            "chi_offset_final": float(self.chi[-1] - self.chi[0] + self.dchi[0])
            if len(self.chi) else None,
            "failed_steps": self.failed_steps, "aborted": self.aborted, "message": self.message,
        }


@dataclass
class RunResult:
    metrics: RunMetrics
    log: dict  # column name -> array, one row per control step
    timing: np.ndarray  # solver wall time per step, seconds


TRAJECTORY_COLUMNS = (
    ["t"] + [f"truth_{c}" for c in "xyzuvw"] + [f"est_{c}" for c in "xyzuvw"]
    + [f"ref_{c}" for c in "xyzuvw"] + ["dv_x", "dv_y", "dv_z"]
    + ["dv_x_ms", "dv_y_ms", "dv_z_ms", "J", "solver_iters", "converged", "chi", "nu",
       "est_pos_err", "cov_trace", "nees"])


def convergence_time(dchi, steps_per_rev: int, fraction: float = STEADY_FRACTION) -> float:
    """Revolutions until ``dchi`` first settles into its steady band.

    The steady value is the median over the final revolution. The run has
    converged at the first step from which ``|dchi - steady|`` stays below
    ``fraction`` of ``|dchi[0]|`` for one full revolution. Returns ``nan`` if
    that never happens.
    """
    d = np.asarray(dchi, dtype=float)
    n = len(d)
    if n < 2 * steps_per_rev:
        return math.nan
    steady = float(np.median(d[-steps_per_rev:]))
    band = fraction * abs(d[0])
    inside = np.abs(d - steady) <= band
    for k in range(n - steps_per_rev + 1):
        if inside[k:k + steps_per_rev].all():
            return k / steps_per_rev
    return math.nan


def run_closed_loop(scn: Scenario) -> RunResult:
    cfg, model = scn.nmpc, scn.model
    params = cfg.params
    nt = dyn.ratio_nt(cfg.Ts, cfg.Ts_hat)
    sub = scn.truth_substeps
    ss = np.random.SeedSequence(scn.seed)
    rng_init, rng_proc, rng_meas = (np.random.default_rng(s) for s in ss.spawn(3))
    ref_pos = kf.reference_position(scn.ekf.reference, params)
    R = scn.ekf.measurement_cov()
    bias = np.array(scn.disturbance.bias)
    sigma_a = scn.disturbance.accel_sigma(cfg.Ts_hat)

    truth = scn.x0.copy()
    x_est = scn.x0 if scn.x_est0 is None else np.asarray(scn.x_est0, dtype=float)
    if scn.estimate_error:
        x_est = x_est + rng_init.multivariate_normal(np.zeros(6), scn.ekf.P0)
    est = kf.EstimatorState(x_est, scn.ekf.P0, 0.0)

    def measure_update(est):
        noise_rng = rng_meas if scn.sensor_noise else None
        z = kf.simulate_measurement(truth, noise_rng, scn.ekf.sigma_range, scn.ekf.sigma_los,
                                    ref_pos, est.epoch)
        return kf.update(est, z, R)

    # the first decision already uses one measurement
    est = measure_update(est)

    rows, timing, dvs, chis = [], [], [], []
    failed, aborted, message = 0, False, ""
    ws: HorizonSolution | None = None
    for k in range(scn.n_steps):
        t = k * cfg.Ts
        t0 = time.perf_counter()
        try:
            dv, sol = controller_step(est.mean, model, cfg, ws)
            ok = math.isfinite(sol.cost)
        except (SingularityError, ValueError) as exc:
            ok, sol, message = False, None, str(exc)
        timing.append(time.perf_counter() - t0)
        if not ok:
            failed += 1
            dv = np.zeros(3)
            ws = None
        else:
            ws = sol
        chi = float(np.atleast_1d(sol.chi)[0]) if sol is not None else math.nan
        nu = float(sol.nu[0]) if sol is not None else math.nan
        ref = (model.sub_for(chi)(chi, nu) if sol is not None else np.full(6, math.nan))
        err = float(np.linalg.norm(est.mean[:3] - truth[:3]))
        rows.append([t, *truth, *est.mean, *ref, *dv, *(dyn.VU_MS * dv),
                     sol.cost if sol else math.nan, sol.iterations if sol else 0,
                     int(sol.converged) if sol else 0, chi, nu, err, float(np.trace(est.cov)),
                     kf.nees(est, truth)])
        dvs.append(dv)
        chis.append(chi)
        try:
            for j in range(nt):
                d = dv if j == 0 else None
                acc = bias + sigma_a * rng_proc.standard_normal(3) if sigma_a > 0 else bias
                truth = dyn.step_with_impulse(truth, np.zeros(3) if d is None else d,
                                              cfg.Ts_hat, cfg.Ts_hat, params, sub, acc)
                est = kf.predict(est, cfg.Ts_hat, d, scn.ekf.sigma_q, params, sub)
                est = measure_update(est)
        except SingularityError as exc:
            aborted, message = True, f"truth propagation failed: {exc}"
            break

    log = {name: np.array([r[i] for r in rows]) for i, name in enumerate(TRAJECTORY_COLUMNS)}
    dv_arr = np.array(dvs).reshape(-1, 3)
    chi_arr = np.array(chis)
    dchi = np.diff(chi_arr, prepend=scn.chi0)
    spr = scn.steps_per_rev
    conv = convergence_time(dchi, spr) if not aborted else math.nan
    lo, hi = cfg.chi_bounds
    final_chi = float(chi_arr[-1]) if len(chi_arr) else math.nan
    tm = np.array(timing)
    total = float(np.sum(np.linalg.norm(dv_arr, axis=1)))
    metrics = RunMetrics(
        total_dv=total, total_dv_ms=dyn.to_ms(total), dv=dv_arr,
        convergence_time=conv, converged=not math.isnan(conv),
        mean_solve_time=float(tm.mean()) if len(tm) else math.nan,
        p95_solve_time=float(np.percentile(tm, 95)) if len(tm) else math.nan,
        chi=chi_arr, dchi=dchi, estimation_error=log["est_pos_err"],
        final_chi=final_chi, chi_in_bounds=bool(lo <= final_chi <= hi),
        failed_steps=failed, aborted=aborted, message=message)
    return RunResult(metrics, log, tm)


# ---------------------------------------------------------------------------
# output files


def _fmt(v) -> str:
    return repr(float(v)) if not isinstance(v, (int, np.integer)) else str(int(v))


def write_trajectory(result: RunResult, path) -> None:
    """Per-step log. Wall-clock solver times go to a separate timing file so
    that this one is reproducible byte for byte."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        n = len(result.log["t"])
        for i in range(n):
            w.writerow([_fmt(result.log[c][i]) for c in TRAJECTORY_COLUMNS])


def write_timing(result: RunResult, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "t", "solver_ms", "solver_iters"])
        for i, s in enumerate(result.timing):
            w.writerow([i, _fmt(result.log["t"][i]), _fmt(1e3 * s),
                        int(result.log["solver_iters"][i])])


def write_metrics(metrics: RunMetrics | dict, path) -> None:
    data = metrics.summary() if isinstance(metrics, RunMetrics) else metrics
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True))


def write_rows(rows: list[dict], path) -> None:
    keys = list(rows[0]) if rows else []
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, keys, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


# ---------------------------------------------------------------------------
# campaigns


def _mc_run(args):
    scn, index = args
    try:
        res = run_closed_loop(scn)
    except Exception as exc:  # one bad run must not sink the campaign
        return {"run": index, "seed": scn.seed, "failed": True, "error": str(exc)}
    m = res.metrics
    return {"run": index, "seed": scn.seed, "failed": m.aborted, "error": m.message,
            "total_dv": m.total_dv, "total_dv_ms": m.total_dv_ms,
            "convergence_time_rev": m.convergence_time, "converged": m.converged,
            "mean_solve_ms": 1e3 * m.mean_solve_time, "final_chi": m.final_chi,
            "chi_in_bounds": m.chi_in_bounds, "failed_steps": m.failed_steps}


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


def monte_carlo(base: Scenario, runs: int = 50, dispersion: float = DISPERSION,
                workers: int = 1) -> tuple[list[dict], dict]:
    """Independent runs with the true initial state drawn around ``base.x0``.

    Run ``i`` uses seed ``base.seed + i``; its initial state is
    ``base.x0 + N(0, dispersion * I6)`` and the filter starts from ``base.x0``.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    jobs = []
    for i in range(runs):
        seed = base.seed + i
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        x0 = base.x0 + math.sqrt(dispersion) * rng.standard_normal(6)
        scn = replace(base, x0=x0, x_est0=base.x0.copy(), seed=seed, estimate_error=False)
        jobs.append((scn, i))
    rows = _map(_mc_run, jobs, workers)
    return rows, summarize(rows)


def summarize(rows: list[dict]) -> dict:
    ok = [r for r in rows if not r["failed"]]
    out = {"runs": len(rows), "failures": len(rows) - len(ok),
           "failure_fraction": (len(rows) - len(ok)) / len(rows)}
    if ok:
        conv = [r for r in ok if r["converged"]]
        out.update({
            "converged_fraction": len(conv) / len(rows),
            "converged_in_bounds_fraction":
                sum(1 for r in conv if r["chi_in_bounds"]) / len(rows),
            "total_dv_mean": float(np.mean([r["total_dv"] for r in ok])),
            "total_dv_ms_mean": float(np.mean([r["total_dv_ms"] for r in ok])),
            "mean_solve_ms": float(np.mean([r["mean_solve_ms"] for r in ok])),
            "convergence_time_mean_rev":
                float(np.mean([r["convergence_time_rev"] for r in conv])) if conv else None,
        })
    return out


def horizon_sweep(base: Scenario, Np_range, Nc_range) -> list[dict]:
    """One closed-loop run per ``(Np, Nc)`` cell; cells with ``Nc > Np`` are marked."""
    rows = []
    for Np in Np_range:
        for Nc in Nc_range:
            row = {"Np": Np, "Nc": Nc}
            if Nc > Np:
                rows.append({**row, "status": "infeasible"})
                continue
            try:
                scn = replace(base, nmpc=replace(base.nmpc, Np=Np, Nc=Nc))
                m = run_closed_loop(scn).metrics
                n = max(len(m.dv), 1)
                rows.append({**row, "status": "failed" if m.aborted else "ok",
                             "mean_dv": m.total_dv / n, "mean_dv_ms": m.total_dv_ms / n,
                             "total_dv": m.total_dv, "mean_solve_ms": 1e3 * m.mean_solve_time})
            except Exception as exc:
                rows.append({**row, "status": "failed", "error": str(exc)})
    return rows


def sweep_spearman(rows: list[dict]) -> dict:
    """Spearman correlation of solve time with Np, per Nc."""
    out = {}
    for Nc in sorted({r["Nc"] for r in rows}):
        cells = [r for r in rows if r["Nc"] == Nc and r["status"] == "ok"]
        if len(cells) >= 3:
            rho = stats.spearmanr([r["Np"] for r in cells],
                                  [r["mean_solve_ms"] for r in cells]).statistic
            out[Nc] = float(rho)
    return out


def compare_modes(scn: Scenario) -> dict[str, RunMetrics]:
    """The same scenario (same seeds) under each controller mode.

    ``FixedOrbit`` tracks the nominal member ``scn.chi0``.
    """
    out = {}
    for mode in (Mode.VARIABLE_CHI, Mode.FIXED_CHI, Mode.FIXED_ORBIT):
        cfg = scn.nmpc.with_mode(mode, scn.chi0 if mode is Mode.FIXED_ORBIT else None)
        out[mode.value] = run_closed_loop(replace(scn, nmpc=cfg)).metrics
    return out
