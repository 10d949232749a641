"""Command-line runner: ``sepcross <subcommand> [--config FILE] [--out DIR] ...``.

Each subcommand builds all artifacts in memory and writes them at the end, so
a failed run leaves no partial output. Exit status: 0 success, 1 model or
domain error, 2 configuration error.
"""
from __future__ import annotations

import argparse
import io
import json
import math
import os
import sys
from dataclasses import asdict

import numpy as np

from . import __version__
from .averaged import integrate_averaged
from .config import SUBCOMMANDS, load_config
from .ensemble import EnsembleSpec, fit_scaling, run_capture_experiment
from .errors import ConfigError, SepcrossError
from .geometry import (from_action_angle, orbit_integrals, period_asymptotics, separatrix,
                       well_bottom)
from .model import make_preset
from .perturbed import classify_capture, integrate_full
from .theta import ThetaContext, capture_probability, compute_theta

DEFAULT_BASE = {"I": 0.6, "phi": math.pi, "z": 1.0}


# ---------------------------------------------------------------------------
# output helpers


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "%.17g" % float(v)


def emit_csv(header, rows) -> str:
    """CSV text with 17 significant digits; an empty series gives the header only."""
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        if len(row) != len(header):
            raise ValueError(f"row of length {len(row)} does not match header {header}")
        buf.write(",".join(_fmt(v) for v in row) + "\n")
    return buf.getvalue()


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def emit_json(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# config helpers


def build_system(cfg):
    try:
        return make_preset(cfg["preset"], **cfg["params"])
    except KeyError as exc:
        raise ConfigError(str(exc.args[0])) from None


def _z_default(system, z):
    if system.dim_z == 0:
        if z is not None:
            raise ConfigError(f"preset {system.name!r} has no slow variable; drop 'z'")
        return None
    return 1.0 if z is None else float(z)


def resolve_point(system, point, what="base_point"):
    """(p, q, z...) from a coordinate list or an {I, phi, z} object in G3."""
    if point is None:
        point = dict(DEFAULT_BASE)
        if system.dim_z == 0:
            point.pop("z")
    if isinstance(point, dict):
        if system.dim_z and "z" not in point:
            raise ConfigError(f"{what} needs 'z' for preset {system.name!r}")
        if not system.dim_z and "z" in point:
            raise ConfigError(f"preset {system.name!r} has no slow variable; drop {what}.z")
        z = float(point["z"]) if system.dim_z else None
        pq = from_action_angle(system, 3, float(point["I"]), float(point["phi"]), z)
        return np.concatenate([pq, [z] if system.dim_z else []])
    arr = np.asarray(point, dtype=float)
    if arr.size != 2 + system.dim_z:
        raise ConfigError(f"{what} needs {2 + system.dim_z} coordinates")
    return arr


# ---------------------------------------------------------------------------
# subcommands; each returns {file name: text}


def cmd_geometry(cfg):
    system = build_system(cfg)
    z = _z_default(system, cfg["z"])
    sep = separatrix(system, z)
    fr = sep.frame
    rows = []
    for h in cfg["levels"]:
        for nu in ((3,) if h > 0 else (1, 2)):
            d = orbit_integrals(system, float(h), z, nu, h_min=cfg["h_min"])
            rows.append((z, nu, h, d.period, d.action, sep.area(nu)))
    art = {"geometry.csv": emit_csv(["z", "nu", "h", "T", "I", "S_nu"], rows)}
    step = cfg["polyline_step"]
    for lp in sep.loops:
        # resample the traced polyline to the requested arc spacing
        s_new = np.arange(0.0, lp.s[-1], step)
        s_new = np.append(s_new, lp.s[-1])
        p = np.interp(s_new, lp.s, lp.p)
        q = np.interp(s_new, lp.s, lp.q)
        art[f"loop_{lp.nu}.csv"] = emit_csv(["s", "p", "q"], zip(s_new, p, q))
    wells = {nu: well_bottom(system, z, nu) for nu in (1, 2)}
    fits = {}
    for nu in (1, 2, 3):
        f = period_asymptotics(system, z, nu)
        fits[str(nu)] = {"a": f.a, "b": f.b, "residual": f.residual}
    art["geometry.json"] = emit_json({
        "z": z, "saddle": fr.C, "omega0": fr.omega0, "xi_axis": fr.xi_axis,
        "eta_axis": fr.eta_axis, "areas": sep.areas,
        "dS_dz": [float(np.sum(sep.dS_dz(nu))) for nu in (1, 2, 3)] if system.dim_z else None,
        "well_bottoms": {str(nu): {"point": w[0], "energy": w[1]} for nu, w in wells.items()},
        "period_fit": fits})
    return art


def cmd_theta(cfg):
    system = build_system(cfg)
    zs = cfg["z"] if isinstance(cfg["z"], list) else [cfg["z"]]
    out = []
    for z in zs:
        z = _z_default(system, z)
        th = compute_theta(system, z=z)
        pr = capture_probability(th)
        out.append({"z": z, "theta": th.as_tuple(), "P": [pr.P1, pr.P2],
                    "quad_error": th.estimated_quadrature_error})
    return {"theta.json": emit_json(out if isinstance(cfg["z"], list) else out[0])}


def cmd_averaged(cfg):
    system = build_system(cfg)
    if cfg["h0"] is not None:
        if cfg["base_point"] is not None:
            raise ConfigError("give either h0/z0 or base_point, not both")
        h0 = float(cfg["h0"])
        z0 = _z_default(system, cfg["z0"])
    else:
        pt = resolve_point(system, cfg["base_point"])
        z0 = float(pt[2]) if system.dim_z else None
        h0 = system.hamiltonian(pt[0], pt[1], z0)
    sol = integrate_averaged(system, None, (h0, [] if z0 is None else [z0]),
                             (0.0, cfg["tau_max"]), eps=cfg["eps"], nu0=cfg["nu0"],
                             h_near=cfg["h_near"],
                             h_switch_rel=cfg["h_switch"],
                             estimate_error=cfg["estimate_error"])
    header = ["tau", "nu", "H"] + [f"Z{k}" for k in range(system.dim_z)] + ["J"]
    rows = []
    branches = [sol.pre] + ([sol.post[1], sol.post[2]] if sol.crossed else [])
    for br in branches:
        for k in range(br.tau.size):
            rows.append((br.tau[k], br.nu, br.h[k], *br.z[k], br.J[k]))
    summary = {"h0": h0, "z0": z0, "eps": cfg["eps"], "crossed": sol.crossed,
               "tau_star": sol.tau_star, "z_star": sol.z_star,
               "tau_star_error": sol.tau_star_error, "P1": None, "P2": None}
    if sol.crossed:
        pr = capture_probability(compute_theta(system, z=sol.z_star))
        summary["P1"], summary["P2"] = pr.P1, pr.P2
        summary["J_post"] = {str(nu): sol.post[nu].J[0] for nu in (1, 2)
                             if sol.post[nu].J.size}
    return {"averaged.csv": emit_csv(header, rows), "averaged.json": emit_json(summary)}


def cmd_simulate(cfg):
    system = build_system(cfg)
    init = resolve_point(system, cfg["initial"], "initial")
    eps = cfg["eps"]
    traj = integrate_full(system, init, eps, cfg["t_span"], rtol=cfg["rtol"], atol=cfg["atol"],
                          h_stop=cfg["h_stop"], post_time=cfg["post_time"])
    ctx = None
    if system.dim_z == 0:
        ctx = ThetaContext(system)
    else:
        zlo, zhi = float(traj.z.min()), float(traj.z.max())
        pad = max(0.05, 0.1 * (zhi - zlo))
        box = system.domain_box[2]
        ctx = ThetaContext(system, (max(box[0], zlo - pad), min(box[1], zhi + pad)),
                           n_grid=17)
    rec = classify_capture(traj, (cfg["kappa_minus"], cfg["kappa_plus"]), ctx,
                           margin_factor=cfg["margin_factor"])
    header = ["t", "p", "q"] + [f"z{k}" for k in range(system.dim_z)] + ["h", "nu"]
    nu = traj.nu
    rows = ((traj.t[k], *traj.states[k], traj.h[k], int(nu[k])) for k in range(traj.t.size))
    record = asdict(rec)
    record["status"] = traj.status
    record["energy_balance"] = float(np.max(np.abs(traj.h - traj.h[0] - traj.work)))
    return {"trajectory.csv": emit_csv(header, rows), "capture.json": emit_json(record)}


_SUMMARY_HEADER = ["id", "destination", "t_minus", "t_plus", "h_prime", "predicted", "pre_err",
                   "post_err"]


def _ensemble_spec(cfg, system, eps):
    base = resolve_point(system, cfg["base_point"])
    spec = EnsembleSpec(base_point=tuple(base), delta=cfg["delta"], eps=eps, N=cfg["N"],
                        seed=cfg["seed"], tau_max=cfg["t_span"],
                        kappa=(cfg["kappa_minus"], cfg["kappa_plus"]), rtol=cfg["rtol"],
                        atol=cfg["atol"], margin_factor=cfg["margin_factor"],
                        post_tau=cfg["post_tau"])
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return spec


def _summary_csvs(report):
    art = {}
    for k, res in enumerate(report.results):
        rows = [(s.id, s.destination, s.t_minus, s.t_plus, s.h_prime, s.predicted, s.pre_err,
                 s.post_err) for s in res.summaries]
        name = "trajectories.csv" if len(report.results) == 1 else f"trajectories_{k}.csv"
        art[name] = emit_csv(_SUMMARY_HEADER, rows)
    return art


def cmd_ensemble(cfg):
    system = build_system(cfg)
    spec = _ensemble_spec(cfg, system, cfg["eps"])
    rep = run_capture_experiment(spec, system, threads=cfg["threads"],
                                 compute_errors=cfg["errors"])
    art = _summary_csvs(rep)
    art["report.json"] = emit_json(rep.to_dict())
    return art


def cmd_sweep(cfg):
    system = build_system(cfg)
    spec = _ensemble_spec(cfg, system, cfg["eps"])
    rep = run_capture_experiment(spec, system, threads=cfg["threads"], compute_errors=True)
    fit = fit_scaling(rep.error_table)
    art = _summary_csvs(rep)
    art["sweep.json"] = emit_json({"fit": asdict(fit), "report": rep.to_dict()})
    return art


COMMANDS = {"geometry": cmd_geometry, "theta": cmd_theta, "averaged": cmd_averaged,
            "simulate": cmd_simulate, "ensemble": cmd_ensemble, "sweep": cmd_sweep}


def run(subcommand: str, cfg: dict) -> dict:
    """Artifacts {file name: text} for a validated configuration."""
    return COMMANDS[subcommand](cfg)


def write_artifacts(out_dir: str, artifacts: dict) -> list:
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for name in sorted(artifacts):
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(artifacts[name])
        paths.append(path)
    return paths


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sepcross",
        description="Separatrix crossing: geometry, fluxes, averaged flow and capture ensembles.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    helps = {
        "geometry": "saddle, separatrix loops, level orbits and period fits",
        "theta": "separatrix fluxes and capture probabilities",
        "averaged": "averaged slow flow glued across the separatrix",
        "simulate": "one perturbed trajectory and its capture record",
        "ensemble": "Monte Carlo capture fractions over a sampling box",
        "sweep": "error scaling over a ladder of eps values",
    }
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="64-bit seed")
        p.add_argument("--threads", type=int, help="worker threads")
    return parser


def _diag(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"status": "error", "kind": kind, "message": message}) + "\n")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.subcommand, args.config,
                          {"out": args.out, "seed": args.seed, "threads": args.threads})
        artifacts = run(args.subcommand, cfg)
    except ConfigError as exc:
        _diag("ConfigError", str(exc))
        return 2
    except (SepcrossError, ValueError) as exc:
        _diag(type(exc).__name__, str(exc))
        return 1
    for path in write_artifacts(cfg["out"], artifacts):
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
