"""Command-line front end: ``ccorbit plan | simulate | report``.

Every run directory holds JSON for structured results, CSV for per-node and
per-sample series, and a ``manifest.json`` recording the scenario hash, seed,
output checksums and CSV schema versions. Result files carry no timestamps,
so reruns with the same config and seed are byte-identical; only the
manifest records wall-clock times.

Exit codes: 0 success, 1 missing input or bad config, 2 infeasible plan or
plan/scenario mismatch, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .blockstats import sqrt_covariances
from .planner import PlanSolution
from .scenarios import ConfigError, CorrectionError, Scenario, ScenarioConfig, build_scenario, \
    bundled_scenario_path, load_scenario, plan_scenario
from .simulator import MCConfig, run_mc

log = logging.getLogger("ccorbit")

EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE, EXIT_NUMERICAL = 0, 1, 2, 3
PLAN_FORMAT = "ccorbit.plan/1"
REPORT_FORMAT = "ccorbit.mc_report/1"

CSV_SCHEMAS = {
    "mean_trajectory.csv": {"version": 1, "columns": ["k", "t_s", "x_km", "y_km", "z_km",
                                                       "vx_km_per_s", "vy_km_per_s", "vz_km_per_s"]},
    "covariance_envelopes.csv": {"version": 1, "columns": ["k", "t_s", "pos_3sigma_km",
                                                            "vel_3sigma_m_per_s"]},
    "histogram.csv": {"version": 1, "columns": ["sample", "dv_m_per_s"]},
    "trajectories.csv": {"version": 1, "columns": ["sample", "k", "t_s", "x_km", "y_km", "z_km",
                                                    "vx_km_per_s", "vy_km_per_s", "vz_km_per_s",
                                                    "ux_m_per_s", "uy_m_per_s", "uz_m_per_s"]},
}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# -- serialization ------------------------------------------------------------------


def _clean(obj):
    """JSON-ready copy: arrays to lists, non-finite floats to null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _write_text(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="\n")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _arr(x, dtype=float):
    return None if x is None else np.asarray(x, dtype=dtype)


# -- manifest -----------------------------------------------------------------------


@dataclass
class RunManifest:
    scenario_path: str
    scenario_hash: str
    overrides: list
    version: str = __version__
    seed: Optional[int] = None
    timestamps: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    csv_schemas: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: Path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))

    def record(self, run_dir: Path, *names: str) -> None:
        for name in names:
            self.outputs[name] = {"path": name, "sha256": sha256_file(run_dir / name)}
            if name in CSV_SCHEMAS:
                self.csv_schemas[name] = CSV_SCHEMAS[name]

    def stamp(self, event: str) -> None:
        self.timestamps[event] = datetime.now(timezone.utc).isoformat(timespec="seconds")

    def save(self, run_dir: Path) -> None:
        _write_text(run_dir / "manifest.json", dumps(asdict(self)))


# -- scenario and plan I/O --------------------------------------------------------------


def _resolve_scenario(path: str) -> Path:
    p = Path(path)
    if not p.exists() and not p.suffix:
        try:
            return bundled_scenario_path(path)
        except (FileNotFoundError, ValueError, KeyError):
            pass
    return p


def load_config(path: str, overrides=()) -> tuple[ScenarioConfig, Path]:
    p = _resolve_scenario(path)
    try:
        cfg = load_scenario(p)
        return (cfg.with_overrides(list(overrides)) if overrides else cfg), p
    except FileNotFoundError:
        raise CliError(EXIT_INPUT, f"scenario file not found: {p}")
    except ConfigError as exc:
        raise CliError(EXIT_INPUT, f"invalid scenario {p}: {exc}")


def _build(cfg: ScenarioConfig) -> Scenario:
    try:
        return build_scenario(cfg)
    except ConfigError as exc:
        raise CliError(EXIT_INPUT, f"invalid scenario: {exc}")
    except CorrectionError as exc:
        raise CliError(EXIT_NUMERICAL, f"reference orbit correction failed: {exc}")


def plan_to_dict(plan: PlanSolution, scenario: Scenario, overrides=()) -> dict:
    vu = scenario.units.velocity * 1e3
    return {
        "format": PLAN_FORMAT,
        "scenario": scenario.name,
        "scenario_hash": scenario.config.hash,
        "overrides": list(overrides),
        "status": plan.status,
        "solver_status": plan.solver_status,
        "diagnosis": plan.diagnosis,
        "norm_policy": plan.norm_policy,
        "units": {"length_km": scenario.units.length, "time_s": scenario.units.time},
        "J_ub": plan.J_ub,
        "J_ub_m_per_s": plan.J_ub * vu,
        "penalty": plan.penalty,
        "maneuver_mask": plan.maneuver_mask if plan.maneuver_mask is not None else scenario.maneuver_mask,
        "ubar": plan.ubar,
        "ubar_m_per_s": plan.ubar * vu,
        "K": plan.K,
        "zeta": plan.zeta,
        "margins": plan.margins,
        "trace": plan.trace,
        "stc_weight": plan.stc_weight,
        "stc_reference": plan.stc_reference,
        "execution_rms": scenario.execution_rms,
        "xbar": plan.xbar,
    }


def plan_from_dict(d: dict) -> PlanSolution:
    nan = float("nan")
    return PlanSolution(
        ubar=_arr(d["ubar"]), K=_arr(d["K"]), zeta=_arr(d["zeta"]),
        J_ub=nan if d["J_ub"] is None else float(d["J_ub"]),
        penalty=nan if d["penalty"] is None else float(d["penalty"]),
        status=d["status"], margins=d.get("margins") or {}, trace=d.get("trace") or [],
        xbar=_arr(d.get("xbar")), norm_policy=d.get("norm_policy", "spectral"),
        diagnosis=d.get("diagnosis", ""), stc_weight=d.get("stc_weight") or 0.0,
        stc_reference=_arr(d.get("stc_reference")), solver_status=d.get("solver_status", ""),
        maneuver_mask=_arr(d.get("maneuver_mask"), bool))


def covariance_envelopes(plan: PlanSolution, scenario: Scenario) -> np.ndarray:
    """Per node: 3-sigma radii (km, m/s) of the total state covariance Phat_k + Ptilde_k."""
    b = scenario.blocks
    Kb = plan.policy.K_block()
    out = np.zeros((b.N + 1, 2))
    for k in range(b.N + 1):
        _, F, _ = sqrt_covariances(b, Kb, k)
        P = scenario.units.covariance_to_canonical(F @ F.T)
        out[k, 0] = 3.0 * math.sqrt(max(np.linalg.eigvalsh(P[:3, :3])[-1], 0.0))
        out[k, 1] = 3e3 * math.sqrt(max(np.linalg.eigvalsh(P[3:, 3:])[-1], 0.0))
    return out


# -- subcommands --------------------------------------------------------------------------


def cmd_plan(scenario_path: str, out_dir: str, overrides=()) -> int:
    cfg, path = load_config(scenario_path, overrides)
    scenario = _build(cfg)
    plan, scenario = plan_scenario(scenario)
    run = Path(out_dir)
    run.mkdir(parents=True, exist_ok=True)

    _write_text(run / "plan.json", dumps(plan_to_dict(plan, scenario, overrides)))
    names = ["plan.json"]
    if plan.status in ("optimal", "max_iter"):
        t = scenario.reference.epochs * scenario.units.time
        X = scenario.units.dimensionalize(plan.xbar)
        _write_csv(run / "mean_trajectory.csv", CSV_SCHEMAS["mean_trajectory.csv"]["columns"],
                   ([k, t[k], *X[k]] for k in range(len(X))))
        env = covariance_envelopes(plan, scenario)
        _write_csv(run / "covariance_envelopes.csv", CSV_SCHEMAS["covariance_envelopes.csv"]["columns"],
                   ([k, t[k], *env[k]] for k in range(len(env))))
        names += ["mean_trajectory.csv", "covariance_envelopes.csv"]

    man = RunManifest(str(path), cfg.hash, list(overrides))
    man.stamp("plan")
    man.record(run, *names)
    man.save(run)

    vu = scenario.units.velocity * 1e3
    print(f"plan status: {plan.status} (solver: {plan.solver_status})")
    if plan.status == "infeasible":
        print(f"infeasible: {plan.diagnosis}", file=sys.stderr)
        return EXIT_INFEASIBLE
    if plan.status == "numerical":
        print(f"numerical failure: {plan.diagnosis}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"J_ub = {plan.J_ub * vu:.4f} m/s, SCP iterations = {len(plan.trace)}, "
          f"max zeta = {float(np.max(plan.zeta)):.3e}")
    if plan.status == "max_iter":
        print("SCP did not converge within the iteration limit", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def _load_plan(path: Path) -> dict:
    if not path.exists():
        raise CliError(EXIT_INPUT, f"plan file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_INPUT, f"unreadable plan file {path}: {exc}")


def cmd_simulate(scenario_path: Optional[str], plan_path: str, out_dir: Optional[str] = None,
                 n: Optional[int] = None, seed: Optional[int] = None, mode: Optional[str] = None,
                 overrides=(), trajectories: bool = False) -> int:
    plan_path = Path(plan_path)
    run = Path(out_dir) if out_dir else plan_path.parent
    pd = _load_plan(plan_path)
    man_path = plan_path.parent / "manifest.json"
    man = RunManifest.load(man_path) if man_path.exists() else None
    if scenario_path is None:
        if man is None:
            raise CliError(EXIT_INPUT, "no --scenario given and no manifest next to the plan")
        scenario_path = man.scenario_path
    cfg, path = load_config(scenario_path, list(pd.get("overrides", [])) + list(overrides))
    if cfg.hash != pd.get("scenario_hash"):
        print(f"plan/scenario hash mismatch: plan {pd.get('scenario_hash')}, scenario {cfg.hash}",
              file=sys.stderr)
        return EXIT_INFEASIBLE
    if pd["status"] not in ("optimal", "max_iter"):
        print(f"plan status is {pd['status']}; nothing to simulate", file=sys.stderr)
        return EXIT_INFEASIBLE
    plan = plan_from_dict(pd)
    scenario = _build(cfg)
    if pd.get("execution_rms") is not None:
        scenario = scenario.with_execution_envelope(np.asarray(pd["execution_rms"], dtype=float))

    mc = cfg.values["mc"]
    mcfg = MCConfig(n_samples=n if n is not None else mc["n_samples"],
                    seed=seed if seed is not None else mc["seed"],
                    mode=mode or mc["mode"], substeps=mc["substeps"], keep_trajectories=trajectories)
    rep = run_mc(plan, scenario, mcfg)

    run.mkdir(parents=True, exist_ok=True)
    vu = scenario.units.velocity * 1e3
    body = {"format": REPORT_FORMAT, "scenario": scenario.name, "scenario_hash": cfg.hash, **rep.to_dict()}
    _write_text(run / "mc_report.json", dumps(body))
    valid = [i for i in range(mcfg.n_samples) if i not in set(rep.failed)]
    _write_csv(run / "histogram.csv", CSV_SCHEMAS["histogram.csv"]["columns"],
               ([i, d * vu] for i, d in zip(valid, rep.dv_total)))
    names = ["mc_report.json", "histogram.csv"]
    if trajectories:
        t = scenario.reference.epochs * scenario.units.time
        X = rep.states * scenario.units.state_scale()
        U = rep.controls * vu

        def rows():
            for j, i in enumerate(valid):
                for k in range(X.shape[1]):
                    u = U[j, k] if k < U.shape[1] else (math.nan,) * 3
                    yield [i, k, t[k], *X[j, k], *u]
        _write_csv(run / "trajectories.csv", CSV_SCHEMAS["trajectories.csv"]["columns"], rows())
        names.append("trajectories.csv")

    if man is None or run != plan_path.parent:
        man = RunManifest(str(path), cfg.hash, list(pd.get("overrides", [])))
    man.seed = mcfg.seed
    man.stamp("simulate")
    man.record(run, *names)
    man.save(run)

    print(f"{mcfg.mode} MC: {mcfg.n_samples} samples ({rep.n_failed} failed), "
          f"dV99 = {rep.dv99 * vu:.4f} m/s, J_ub = {rep.J_ub * vu:.4f} m/s")
    for name, ok in rep.checks().items():
        print(f"  {'PASS' if ok else 'FAIL'}  {name}")
    return EXIT_OK


def _mark(ok) -> str:
    return "PASS" if ok else "FAIL"


def cmd_report(run_dir: str, out=None) -> int:
    out = out or sys.stdout
    run = Path(run_dir)
    for name in ("manifest.json", "plan.json"):
        if not (run / name).exists():
            raise CliError(EXIT_INPUT, f"missing artifact {run / name}")
    man = RunManifest.load(run / "manifest.json")
    pd = json.loads((run / "plan.json").read_text())

    def say(line=""):
        print(line, file=out)

    say(f"run {run}  (scenario {pd.get('scenario')}, tool {man.version})")
    for name, meta in sorted(man.outputs.items()):
        p = run / meta["path"]
        if not p.exists():
            say(f"WARNING: {name} listed in the manifest is missing")
        elif sha256_file(p) != meta["sha256"]:
            say(f"WARNING: hash mismatch for {name}; the file changed after it was written")
    if pd.get("scenario_hash") != man.scenario_hash:
        say("WARNING: hash mismatch between plan.json and the manifest scenario hash")

    say("")
    say("== plan ==")
    say(f"  status: {pd['status']} (solver {pd.get('solver_status')})")
    if pd.get("diagnosis"):
        say(f"  diagnosis: {pd['diagnosis']}")
    say(f"  J_ub: {pd.get('J_ub_m_per_s')} m/s")
    trace = pd.get("trace") or []
    say(f"  iterations: {len(trace)}")
    zeta = [z for z in (pd.get("zeta") or []) if z is not None]
    zmax = max(zeta) if zeta else 0.0
    say(f"  {_mark(zmax <= 1e-6)}  terminal slack zeta ~ 0 (max {zmax:.3e})")
    for fam, vals in sorted((pd.get("margins") or {}).items()):
        vals = [v for v in vals if v is not None]
        if vals:
            say(f"  {_mark(min(vals) >= -1e-6)}  planned {fam} margin (min {min(vals):.3e})")

    say("")
    say("== Monte Carlo ==")
    rp = run / "mc_report.json"
    if not rp.exists():
        say("  no mc_report.json; run `ccorbit simulate` first")
        return EXIT_OK
    rep = json.loads(rp.read_text())
    if rep.get("scenario_hash") != pd.get("scenario_hash"):
        say("WARNING: hash mismatch between mc_report.json and plan.json")
    q = rep["dv_quantiles_m_per_s"]
    say(f"  mode {rep['mode']}, {rep['n_samples']} samples, {rep['n_failed']} failed, seed {rep['seed']}")
    say(f"  {_mark(rep['checks'].get('dv99_le_J_ub'))}  dV99 {q.get('0.99')} m/s <= J_ub "
        f"{rep['J_ub_m_per_s']} m/s (gap {rep['J_ub_m_per_s'] - q.get('0.99'):.4f})")
    for fam, v in sorted(rep["violations"].items()):
        say(f"  {_mark(v['pass'])}  {fam} violation rate max {v['max_rate']:.4g} "
            f"<= {v['bound']:.4g} over {len(v['nodes'])} nodes")
    nodes_ok = all(v["pass"] for v in rep["violations"].values())
    say(f"  {_mark(nodes_ok)}  discrete-time constraints met at nodes")
    term = rep.get("terminal", {})
    if "mean_ok" in term:
        say(f"  {_mark(term['mean_ok'])}  terminal mean: n e^T S^-1 e = {term['mean_mahalanobis2']:.4g} "
            f"<= {term['mean_bound']:.4g}")
    if "cov_ok" in term:
        say(f"  {_mark(term['cov_ok'])}  terminal covariance: lambda_max(P_f^-1/2 S P_f^-1/2) = "
            f"{term['cov_ratio_max_eig']:.4g} <= {term['cov_bound']:.4g}")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ccorbit", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log solver and MC progress")
    ap.add_argument("--version", action="version", version=f"ccorbit {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="solve the planning problem of a scenario")
    p.add_argument("--scenario", required=True, help="TOML file or bundled name (cwh_rendezvous, nrho)")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. risk.eps_x=0.01 (repeatable)")

    s = sub.add_parser("simulate", help="Monte-Carlo certification of a plan")
    s.add_argument("--scenario", help="defaults to the scenario recorded in the run manifest")
    s.add_argument("--plan", help="plan.json (default: <out>/plan.json)")
    s.add_argument("--out", required=True, help="run directory")
    s.add_argument("--seed", type=int)
    s.add_argument("--samples", type=int)
    s.add_argument("--mode", choices=("linear", "nonlinear"))
    s.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    s.add_argument("--trajectories", action="store_true", help="also write trajectories.csv")

    r = sub.add_parser("report", help="summarize a run directory")
    r.add_argument("run_dir", nargs="?")
    r.add_argument("--out", dest="run_dir_opt", help="run directory (alternative to the positional)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "plan":
            return cmd_plan(args.scenario, args.out, args.overrides)
        if args.command == "simulate":
            return cmd_simulate(args.scenario, args.plan or str(Path(args.out) / "plan.json"), args.out,
                                args.samples, args.seed, args.mode, args.overrides, args.trajectories)
        run_dir = args.run_dir or args.run_dir_opt
        if run_dir is None:
            raise CliError(EXIT_INPUT, "report needs a run directory")
        return cmd_report(run_dir)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
