"""
Command-line entry point.

    cislunar-nmpc families generate --tag HO-L1-N --count 200
    cislunar-nmpc model fit --catalog HO-L1-N.json --holdout 0.2
    cislunar-nmpc --config scenario.json simulate
    cislunar-nmpc --config scenario.json sweep | montecarlo | compare

Exit codes: 0 success, 1 usage or configuration error, 2 partial
computational failure (results are still written).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import ekf as kf
from . import sim
from .dynamics import MU_EARTH_MOON, ConfigurationError, SystemParams
from .families import FamilyCatalog, FamilyTag, generate_family
from .nmpc import Mode, NmpcConfig
from .surrogate import IllConditionedFit, MprModel, build_model, export_residuals_csv

log = logging.getLogger("cislunar_nmpc")

EXIT_OK, EXIT_USAGE, EXIT_PARTIAL = 0, 1, 2

_num = {"type": "number"}
_int = {"type": "integer"}
_vec3 = {"type": "array", "items": _num, "minItems": 3, "maxItems": 3}
_pair = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}
_mat = {"type": "array", "items": {"type": "array", "items": _num}}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


NMPC_SCHEMA = _obj({
    "Np": _int, "Nc": _int, "Q": _mat, "Qt": _mat, "R": _mat,
    "Q_diag": {"type": "array", "items": _num, "minItems": 6, "maxItems": 6},
    "Qt_diag": {"type": "array", "items": _num, "minItems": 6, "maxItems": 6},
    "R_diag": _vec3, "Ts": _num, "Ts_hat": _num, "nt": _int,
    "dv_bounds": _pair, "chi_bounds": _pair,
    "mode": {"enum": [m.value for m in Mode]}, "chi_ref": _num,
    "substeps": _int, "max_iter": _int, "gtol": _num, "multistart": _int,
})

SCENARIO_SCHEMA = _obj({
    "model": {"type": "string"},
    "catalog": {"type": "string"},
    "member": _int,
    "revolutions": _int,
    "seed": _int,
    "nmpc": NMPC_SCHEMA,
    "ekf": _obj({"sigma_q": _num, "sigma_range": _num, "sigma_los": _num, "p0_scale": _num,
                 "reference": {"enum": list(kf.REFERENCE_BODIES)}}),
    "disturbance": _obj({"bias": _vec3, "sigma_q": _num, "noise": {"enum": ["white", "held"]}}),
    "estimate_error": {"type": "boolean"},
    "sensor_noise": {"type": "boolean"},
    "runs": _int,
    "dispersion": _num,
    "workers": _int,
    "Np_range": {"type": "array", "items": _int, "minItems": 1},
    "Nc_range": {"type": "array", "items": _int, "minItems": 1},
}, required=("model", "catalog"))


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cislunar-nmpc", description=__doc__.split("\n\n")[0].strip())
    p.add_argument("--seed", type=int, default=None, help="RNG seed (default 0)")
    p.add_argument("--mu", type=float, default=None,
                   help=f"mass ratio (default {MU_EARTH_MOON})")
    p.add_argument("--out-dir", type=Path, default=Path("."), help="output directory")
    p.add_argument("--config", type=Path, default=None, help="scenario JSON file")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    fam = sub.add_parser("families", help="periodic orbit catalogs")
    fsub = fam.add_subparsers(dest="action", required=True, parser_class=_Parser)
    gen = fsub.add_parser("generate", help="continue a family and write its catalog")
    gen.add_argument("--tag", required=True, help="e.g. LO-L1, HO-L2-N, NRHO-L1-S")
    gen.add_argument("--count", type=int, default=200)
    gen.add_argument("--step", type=float, default=None, help="continuation step")
    gen.add_argument("--out", type=Path, default=None)

    mod = sub.add_parser("model", help="surrogate models")
    msub = mod.add_subparsers(dest="action", required=True, parser_class=_Parser)
    fit = msub.add_parser("fit", help="fit the (chi, nu) surrogate to a catalog")
    fit.add_argument("--catalog", type=Path, required=True)
    fit.add_argument("--degree", type=int, default=None)
    fit.add_argument("--parts", type=int, default=None)
    fit.add_argument("--samples", type=int, default=100)
    fit.add_argument("--holdout", type=float, default=0.0)
    fit.add_argument("--out", type=Path, default=None)
    fit.add_argument("--residuals-csv", type=Path, default=None)

    for name, text in (("simulate", "one closed-loop run"),
                       ("sweep", "closed-loop runs over an (Np, Nc) grid"),
                       ("montecarlo", "dispersed closed-loop runs"),
                       ("compare", "the three controller modes on one scenario")):
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--config", dest="sub_config", type=Path, default=None,
                        help="scenario JSON file (same as the global flag)")
    return p


# ---------------------------------------------------------------------------
# config handling


def validate_config(cfg: dict) -> None:
    """Raise :class:`UsageError` naming the offending field path."""
    errors = sorted(jsonschema.Draft7Validator(SCENARIO_SCHEMA).iter_errors(cfg),
                    key=lambda e: list(e.absolute_path))
    if errors:
        lines = []
        for e in errors:
            path = ".".join(str(x) for x in e.absolute_path) or "<root>"
            lines.append(f"{path}: {e.message}")
        raise UsageError("invalid config:\n  " + "\n  ".join(lines))


def load_config(path: Path | None) -> dict:
    if path is None:
        raise UsageError("this command needs --config")
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}")
    validate_config(cfg)
    base = Path(path).parent
    for key in ("model", "catalog"):
        p = Path(cfg[key])
        cfg[key] = p if p.is_absolute() else base / p
        if not cfg[key].exists():
            raise UsageError(f"{key}: file not found: {cfg[key]}")
    return cfg


def default_member(catalog: FamilyCatalog, model: MprModel) -> int:
    """Member closest to the middle of the central sub-manifold."""
    sub = model.subs[(len(model.subs) - 1) // 2]
    return int(np.argmin(np.abs(np.asarray(catalog.chis) - sub.center)))


def nmpc_overrides(d: dict) -> dict:
    out = dict(d)
    for key, name in (("Q_diag", "Q"), ("Qt_diag", "Qt"), ("R_diag", "R")):
        if key in out:
            out[name] = np.diag(out.pop(key))
    if "nt" in out:
        nt = out.pop("nt")
        if "Ts" in out:
            out["Ts_hat"] = out["Ts"] / nt
        else:
            out["_nt"] = nt
    return out


def build_scenario(cfg: dict, seed: int, mu: float | None) -> sim.Scenario:
    model = MprModel.load(cfg["model"])
    catalog = FamilyCatalog.load(cfg["catalog"])
    if mu is not None and not math.isclose(mu, model.mu, rel_tol=0, abs_tol=1e-15):
        raise UsageError(f"--mu {mu} does not match the model's mu {model.mu}")
    if str(catalog.tag) != str(model.tag):
        raise UsageError(f"catalog tag {catalog.tag} does not match model tag {model.tag}")
    index = cfg.get("member", default_member(catalog, model))
    if not 0 <= index < len(catalog):
        raise UsageError(f"member: index {index} outside 0..{len(catalog) - 1}")
    orbit = catalog[index]
    over = nmpc_overrides(cfg.get("nmpc", {}))
    nt = over.pop("_nt", None)
    if nt is not None:
        Ts = orbit.period / 20
        over.update(Ts=Ts, Ts_hat=Ts / nt)
    try:
        scn = sim.scenario_for_member(
            model, orbit, cfg.get("revolutions", 5), seed,
            sim.Disturbance(**cfg["disturbance"]) if "disturbance" in cfg else None,
            kf.EkfConfig(**cfg.get("ekf", {})), **over)
    except (ConfigurationError, ValueError) as exc:
        raise UsageError(f"nmpc: {exc}")
    scn.estimate_error = cfg.get("estimate_error", True)
    scn.sensor_noise = cfg.get("sensor_noise", True)
    return scn


# ---------------------------------------------------------------------------
# commands


def cmd_families(args) -> int:
    try:
        tag = FamilyTag.parse(args.tag)
    except ValueError as exc:
        raise UsageError(str(exc))
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    params = SystemParams(args.mu if args.mu is not None else MU_EARTH_MOON)
    cat = generate_family(tag, args.count, args.step, params)
    out = args.out or args.out_dir / f"{tag}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    cat.save(out)
    worst = max(m.closure(params) for m in cat)
    chis = cat.chis
    print(f"{tag}: {len(cat)} members, chi {min(chis):.6f} .. {max(chis):.6f}, "
          f"worst closure {worst:.2e}, status {cat.status}")
    print(f"wrote {out}")
    return EXIT_OK if cat.status == "complete" else EXIT_PARTIAL


def cmd_fit(args) -> int:
    try:
        cat = FamilyCatalog.load(args.catalog)
    except FileNotFoundError:
        raise UsageError(f"catalog not found: {args.catalog}")
    if args.mu is not None and not math.isclose(args.mu, cat.mu, rel_tol=0, abs_tol=1e-15):
        raise UsageError(f"--mu {args.mu} does not match the catalog's mu {cat.mu}")
    if not 0.0 <= args.holdout < 1.0:
        raise UsageError("--holdout must lie in [0, 1)")
    try:
        model = build_model(cat, args.degree, args.parts, args.samples, args.holdout)
    except (IllConditionedFit, ValueError) as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = args.out or args.out_dir / f"{cat.tag}.model.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    d = model.diagnostics
    print(f"{cat.tag}: degree {d['degree']}, {d['parts']} sub-manifolds")
    for k, s in enumerate(model.subs):
        g = s.diagnostics
        line = (f"  [{k}] chi {s.chi_range[0]:.6f} .. {s.chi_range[1]:.6f}  "
                f"max residual {g['max_residual']:.3e}  position {g['max_position_error']:.3e}  "
                f"velocity {g['max_velocity_error']:.3e}")
        if "holdout" in g:
            line += f"  held-out position {g['holdout']['max_position_error']:.3e}"
        print(line)
    if "holdout" in d:
        h = d["holdout"]
        print(f"held-out ({args.holdout:g}): position {h['max_position_error']:.3e}, "
              f"velocity {h['max_velocity_error']:.3e}")
    if args.residuals_csv:
        export_residuals_csv(model, cat, args.residuals_csv)
    print(f"wrote {out}")
    return EXIT_OK


def _seed(args, cfg) -> int:
    if args.seed is not None:
        return args.seed
    return cfg.get("seed", 0)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _write_json(data, path: Path):
    path.write_text(json.dumps(data, indent=1, sort_keys=True, default=_json_default))


def cmd_simulate(args, cfg) -> int:
    scn = build_scenario(cfg, _seed(args, cfg), args.mu)
    res = sim.run_closed_loop(scn)
    out = args.out_dir
    sim.write_trajectory(res, out / "trajectory.csv")
    sim.write_timing(res, out / "timing.csv")
    meta = res.metrics.summary()
    meta.update(mode=scn.nmpc.mode.value, seed=scn.seed, chi0=scn.chi0,
                nmpc=scn.nmpc.to_dict())
    _write_json(meta, out / "metrics.json")
    m = res.metrics
    print(f"total dv {m.total_dv:.6e} ({m.total_dv_ms:.3f} m/s) over {len(m.dv)} impulses; "
          f"convergence {m.convergence_time} rev; mean solve {1e3 * m.mean_solve_time:.1f} ms")
    return EXIT_PARTIAL if (m.aborted or m.failed_steps) else EXIT_OK


def cmd_sweep(args, cfg) -> int:
    scn = build_scenario(cfg, _seed(args, cfg), args.mu)
    Np_range = cfg.get("Np_range", [2, 4, 6, 8])
    Nc_range = cfg.get("Nc_range", [1, 2, 3])
    rows = sim.horizon_sweep(scn, Np_range, Nc_range)
    keys = ["Np", "Nc", "status", "mean_dv", "mean_dv_ms", "total_dv", "mean_solve_ms", "error"]
    rows = [{k: r.get(k, "") for k in keys} for r in rows]
    sim.write_rows(rows, args.out_dir / "sweep.csv")
    done = [r for r in rows if r["status"] != "infeasible"]
    print(f"{len(done)} cells run ({len(rows) - len(done)} infeasible skipped)")
    return EXIT_PARTIAL if any(r["status"] == "failed" for r in rows) else EXIT_OK


def cmd_montecarlo(args, cfg) -> int:
    scn = build_scenario(cfg, _seed(args, cfg), args.mu)
    rows, summary = sim.monte_carlo(scn, cfg.get("runs", 50),
                                    cfg.get("dispersion", sim.DISPERSION),
                                    cfg.get("workers", 1))
    keys = ["run", "seed", "failed", "error", "total_dv", "total_dv_ms", "convergence_time_rev",
            "converged", "mean_solve_ms", "final_chi", "chi_in_bounds", "failed_steps"]
    sim.write_rows([{k: r.get(k, "") for k in keys} for r in rows],
                   args.out_dir / "montecarlo.csv")
    _write_json(summary, args.out_dir / "montecarlo.json")
    print(json.dumps(summary, indent=1, default=_json_default))
    return EXIT_PARTIAL if summary["failures"] else EXIT_OK


def cmd_compare(args, cfg) -> int:
    scn = build_scenario(cfg, _seed(args, cfg), args.mu)
    res = sim.compare_modes(scn)
    blocks = {mode: m.summary() for mode, m in res.items()}
    _write_json(blocks, args.out_dir / "compare.json")
    for mode, m in res.items():
        print(f"{mode:12s} total dv {m.total_dv:.6e} ({m.total_dv_ms:.3f} m/s)  "
              f"mean solve {1e3 * m.mean_solve_time:.1f} ms")
    bad = any(m.aborted or m.failed_steps for m in res.values())
    return EXIT_PARTIAL if bad else EXIT_OK


SCENARIO_COMMANDS = {"simulate": cmd_simulate, "sweep": cmd_sweep,
                     "montecarlo": cmd_montecarlo, "compare": cmd_compare}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.out_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "families":
            return cmd_families(args)
        if args.command == "model":
            return cmd_fit(args)
        cfg = load_config(args.sub_config or args.config)
        return SCENARIO_COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
