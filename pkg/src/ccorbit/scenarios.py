"""Scenario configuration (TOML with unit-suffixed keys) and scenario builders.

Every physical key carries its unit in the name, e.g. ``u_max_m_per_s = 10.0``.
Values are converted on load to the canonical units km, km/s, s, rad; keys
with the ``_nd`` suffix are CR3BP nondimensional values and are scaled with
the scenario's characteristic length and time.
"""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np
from scipy.integrate import solve_ivp

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from ._linalg import blkdiag
from .blockstats import BlockOperators, assemble_block_operators
from .convexifier import ApproachCone, ConstraintSet, RiskBudget, Tube
from .dynamics import (MU_EARTH, ControlType, DiscreteSegment, DynamicsModel, ModelKind,
                       ReferenceTrajectory, discretize, propagate)
from .navigation import FilterSchedule, build_filter_schedule
from .planner import PlanningProblem, SolverBackendSpec, solve_with_execution_update, solve_with_stc
from .uncertainty import (GatesParams, InitialUncertainty, ObservationModel, acceleration_noise,
                          full_state_observation, gates_envelope, gates_matrix, linearize_observation,
                          range_bearing_observation)


class ConfigError(ValueError):
    """Schema violation; the message starts with the offending key path."""


class CorrectionError(RuntimeError):
    pass


# -- units ------------------------------------------------------------------------

# suffix -> factor to canonical units; "nd" entries are resolved per scenario
UNITS = {
    "length": {"km": 1.0, "m": 1e-3, "nd": "lstar"},
    "velocity": {"km_per_s": 1.0, "m_per_s": 1e-3, "cm_per_s": 1e-5, "mm_per_s": 1e-6, "nd": "vstar"},
    "time": {"s": 1.0, "min": 60.0, "hr": 3600.0, "day": 86400.0, "nd": "tstar"},
    "angle": {"rad": 1.0, "deg": np.pi / 180.0},
    "angular_rate": {"rad_per_s": 1.0, "deg_per_s": np.pi / 180.0},
    "accel_noise": {"km_per_s32": 1.0, "m_per_s32": 1e-3, "mm_per_s32": 1e-6, "nd": "anoise"},
    "fraction": {"frac": 1.0, "pct": 1e-2},
    "grav_param": {"km3_per_s2": 1.0},
}


@dataclass(frozen=True)
class Units:
    """Scale between solver units and canonical (km, s) units."""

    length: float = 1.0  # km per solver length unit
    time: float = 1.0    # s per solver time unit

    @property
    def velocity(self) -> float:
        return self.length / self.time

    @property
    def accel_noise(self) -> float:
        return self.length / self.time ** 1.5

    def state_scale(self) -> np.ndarray:
        return np.r_[np.full(3, self.length), np.full(3, self.velocity)]

    def dimensionalize(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) * self.state_scale()

    def nondimensionalize(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) / self.state_scale()

    def covariance_to_canonical(self, P: np.ndarray) -> np.ndarray:
        s = self.state_scale()
        return P * np.outer(s, s)


# -- schema -----------------------------------------------------------------------


@dataclass(frozen=True)
class FieldSpec:
    kind: str                      # float | int | str | bool | vec3
    quantity: Optional[str] = None
    required: Any = False          # True, False, or a set of dynamics kinds
    default: Any = None
    choices: Optional[tuple] = None


_CWH = frozenset({"CWH"})
_CR3BP = frozenset({"CR3BP"})

SCHEMA: dict = {
    "scenario": {
        "name": FieldSpec("str", required=True),
        "dynamics": FieldSpec("str", required=True, choices=("CWH", "CR3BP")),
        "control_type": FieldSpec("str", default="impulsive", choices=("impulsive", "zoh_continuous")),
        "observation": FieldSpec("str", default="full_state", choices=("full_state", "range_bearing")),
        "description": FieldSpec("str", default=""),
    },
    "dynamics": {
        "chief_radius": FieldSpec("float", "length", required=_CWH),
        "mu_earth": FieldSpec("float", "grav_param", default=MU_EARTH),
        "mass_ratio": FieldSpec("float", required=_CR3BP),
        "lstar": FieldSpec("float", "length", required=_CR3BP),
        "tstar": FieldSpec("float", "time", required=_CR3BP),
    },
    "horizon": {
        "N": FieldSpec("int"),
        "dt": FieldSpec("float", "time", required=_CWH),
        "revolutions": FieldSpec("int", required=_CR3BP),
        "nodes_per_rev": FieldSpec("int", required=_CR3BP),
        "maneuver_every": FieldSpec("int", default=1),
        "measurement_every": FieldSpec("int", default=1),
    },
    "uncertainty": {
        "sigma_obs_r": FieldSpec("float", "length", required=True),
        "sigma_obs_v": FieldSpec("float", "velocity", required=True),
        "sigma_obs_angle": FieldSpec("float", "angle"),
        "sigma_r": FieldSpec("float", "length", required=True),
        "sigma_v": FieldSpec("float", "velocity", required=True),
        "sigma_a": FieldSpec("float", "accel_noise", required=True),
        "gates_sigma1": FieldSpec("float", "velocity", required=True),
        "gates_sigma2": FieldSpec("float", "fraction", required=True),
        "gates_sigma3": FieldSpec("float", "velocity", required=True),
        "gates_sigma4": FieldSpec("float", "angle", required=True),
        "observation_is_placeholder": FieldSpec("bool", default=False),
        # "reference": Gates factors at the reference control; "rms_envelope": isotropic bound
        # at the planned rms burn size, iterated to a fixed point
        "execution_model": FieldSpec("str", default="reference", choices=("reference", "rms_envelope")),
        "envelope_rtol": FieldSpec("float", default=0.02),
    },
    "boundary": {
        "r0": FieldSpec("vec3", "length", required=True),
        "v0": FieldSpec("vec3", "velocity", required=True),
        "rf": FieldSpec("vec3", "length", required=True),
        "vf": FieldSpec("vec3", "velocity", required=True),
        "sigma_rf": FieldSpec("float", "length"),
        "sigma_vf": FieldSpec("float", "velocity"),
    },
    "constraints": {
        "u_max": FieldSpec("float", "velocity"),
        "omega_max": FieldSpec("float", "angular_rate"),
        "du_max": FieldSpec("float", "velocity"),
        "cone_theta_max": FieldSpec("float", "angle"),
        "r_trigger": FieldSpec("float", "length"),
        "d_max": FieldSpec("float", "length"),
    },
    "risk": {
        "eps_x": FieldSpec("float", default=1e-3),
        "eps_u": FieldSpec("float", default=1e-3),
        "p": FieldSpec("float", default=0.99),
    },
    "solver": {
        "name": FieldSpec("str", default="CLARABEL"),
        "feastol": FieldSpec("float", default=1e-8),
        "gaptol": FieldSpec("float", default=1e-8),
        "max_iters": FieldSpec("int", default=500),
        "backoff": FieldSpec("float", default=1e-3),
    },
    "scp": {
        "eps_tol": FieldSpec("float", default=1e-3),
        "max_iter": FieldSpec("int", default=15),
        "penalty_factor": FieldSpec("float", default=1e3),
    },
    "mc": {
        "n_samples": FieldSpec("int", default=1000),
        "seed": FieldSpec("int", default=0),
        "substeps": FieldSpec("int", default=10),
        "mode": FieldSpec("str", default="linear", choices=("linear", "nonlinear")),
    },
    "reference": {
        "correct_ic": FieldSpec("bool", default=True),
        "corrector_tol": FieldSpec("float", default=1e-12),
    },
}


def _match_key(section: str, key: str):
    """Return (field, suffix) for a raw key, or raise ConfigError."""
    fields = SCHEMA[section]
    hits = []
    for name, spec in fields.items():
        if spec.quantity is None:
            if key == name:
                hits.append((name, None))
        elif key.startswith(name + "_") and key[len(name) + 1:] in UNITS[spec.quantity]:
            hits.append((name, key[len(name) + 1:]))
    if not hits:
        for name, spec in fields.items():
            if spec.quantity is not None and key == name:
                raise ConfigError(f"{section}.{key}: missing unit suffix (one of "
                                  f"{', '.join(UNITS[spec.quantity])})")
        raise ConfigError(f"{section}.{key}: unknown key")
    return hits[0]


def _check_kind(path: str, spec: FieldSpec, v):
    if spec.kind == "float":
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {v!r}")
        return float(v)
    if spec.kind == "int":
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"{path}: expected an integer, got {v!r}")
        return int(v)
    if spec.kind == "bool":
        if not isinstance(v, bool):
            raise ConfigError(f"{path}: expected true/false, got {v!r}")
        return v
    if spec.kind == "str":
        if not isinstance(v, str):
            raise ConfigError(f"{path}: expected a string, got {v!r}")
        if spec.choices and v not in spec.choices:
            raise ConfigError(f"{path}: {v!r} not one of {spec.choices}")
        return v
    if spec.kind == "vec3":
        if not isinstance(v, list) or len(v) != 3 or any(
                isinstance(e, bool) or not isinstance(e, (int, float)) for e in v):
            raise ConfigError(f"{path}: expected a list of 3 numbers, got {v!r}")
        return np.array(v, dtype=float)
    raise AssertionError(spec.kind)


def _validate(raw: dict) -> dict:
    """Canonical values from a raw TOML document; raises ConfigError with key paths."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>: expected a table")
    for section in raw:
        if section not in SCHEMA:
            raise ConfigError(f"{section}: unknown section")
        if not isinstance(raw[section], dict):
            raise ConfigError(f"{section}: expected a table")
    missing_core = [f"scenario.{k}" for k in ("name", "dynamics") if k not in raw.get("scenario", {})]
    if missing_core:
        req = [f"{s}.{k}" for s, fs in SCHEMA.items() for k, f in fs.items() if f.required is True]
        raise ConfigError(f"{missing_core[0]}: missing required key; required keys: {', '.join(req)}")
    kind = raw["scenario"]["dynamics"]
    _check_kind("scenario.dynamics", SCHEMA["scenario"]["dynamics"], kind)

    # matched[section][field] = (suffix, value, path)
    matched: dict = {s: {} for s in SCHEMA}
    for section, table in raw.items():
        for key, v in table.items():
            name, suffix = _match_key(section, key)
            path = f"{section}.{key}"
            if name in matched[section]:
                raise ConfigError(f"{path}: duplicate of {section}.{matched[section][name][2].split('.', 1)[1]}")
            matched[section][name] = (suffix, _check_kind(path, SCHEMA[section][name], v), path)

    missing = []
    for section, fields in SCHEMA.items():
        for name, spec in fields.items():
            req = spec.required is True or (isinstance(spec.required, frozenset) and kind in spec.required)
            if req and name not in matched[section]:
                missing.append(f"{section}.{name}" + (f"_<{'|'.join(UNITS[spec.quantity])}>"
                                                      if spec.quantity else ""))
    if missing:
        raise ConfigError(f"{missing[0]}: missing required key; all missing: {', '.join(missing)}")

    def factor(section, name, suffix, path):
        f = UNITS[SCHEMA[section][name].quantity][suffix]
        if not isinstance(f, str):
            return f
        if kind != "CR3BP":
            raise ConfigError(f"{path}: nondimensional units need CR3BP dynamics")
        dyn = values["dynamics"]
        lstar, tstar = dyn["lstar"], dyn["tstar"]
        return {"lstar": lstar, "vstar": lstar / tstar, "tstar": tstar,
                "anoise": lstar / tstar ** 1.5}[f]

    values: dict = {s: {} for s in SCHEMA}
    for section in ["dynamics"] + [s for s in SCHEMA if s != "dynamics"]:
        for name, spec in SCHEMA[section].items():
            if name in matched[section]:
                suffix, v, path = matched[section][name]
                if suffix is not None:
                    if section == "dynamics" and suffix == "nd":
                        raise ConfigError(f"{path}: characteristic constants cannot be nondimensional")
                    v = v * factor(section, name, suffix, path)
                    if spec.kind != "vec3" and spec.quantity not in ("fraction",) and v < 0:
                        raise ConfigError(f"{path}: must be nonnegative")
                values[section][name] = v
            else:
                values[section][name] = spec.default
    for name in ("u_max", "du_max", "d_max", "r_trigger", "omega_max"):
        v = values["constraints"][name]
        if v is not None and not v > 0:
            raise ConfigError(f"constraints.{name}: must be positive")
    for name in ("eps_x", "eps_u"):
        if not 0 < values["risk"][name] < 1:
            raise ConfigError(f"risk.{name}: must lie in (0, 1)")
    if not 0.5 < values["risk"]["p"] < 1:
        raise ConfigError("risk.p: must lie in (0.5, 1)")
    if values["mc"]["n_samples"] < 2:
        raise ConfigError("mc.n_samples: must be at least 2")
    return values


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in sorted(obj.items())}
    if isinstance(obj, list):
        return [_jsonable(v) for v in obj]
    return obj


@dataclass(frozen=True)
class ScenarioConfig:
    """Raw TOML document plus validated values in canonical units."""

    raw: dict
    values: dict = field(repr=False)
    source: Optional[str] = None

    @classmethod
    def from_dict(cls, raw: dict, source: Optional[str] = None) -> "ScenarioConfig":
        raw = copy.deepcopy(raw)
        return cls(raw, _validate(raw), source)

    @classmethod
    def loads(cls, text: str, source: Optional[str] = None) -> "ScenarioConfig":
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"<root>: TOML parse error: {exc}") from exc
        return cls.from_dict(raw, source)

    def dumps(self) -> str:
        return tomli_w.dumps(self.raw)

    @property
    def kind(self) -> str:
        return self.values["scenario"]["dynamics"]

    @property
    def name(self) -> str:
        return self.values["scenario"]["name"]

    def get(self, path: str):
        section, name = path.split(".", 1)
        return self.values[section][name]

    @property
    def hash(self) -> str:
        blob = json.dumps(_jsonable(self.raw), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_overrides(self, overrides: Sequence[str]) -> "ScenarioConfig":
        """Apply ``section.key=value`` overrides; values are parsed as TOML literals."""
        raw = copy.deepcopy(self.raw)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"{item}: override must look like section.key=value")
            path, text = item.split("=", 1)
            path = path.strip()
            if "." not in path:
                raise ConfigError(f"{path}: override key needs a section")
            section, key = path.split(".", 1)
            if section not in SCHEMA:
                raise ConfigError(f"{section}: unknown section")
            _match_key(section, key)
            try:
                value = tomllib.loads(f"v = {text.strip()}")["v"]
            except tomllib.TOMLDecodeError:
                value = text.strip()
            raw.setdefault(section, {})[key] = value
        return ScenarioConfig.from_dict(raw, self.source)

    def __eq__(self, other):
        return isinstance(other, ScenarioConfig) and self.hash == other.hash

    def __hash__(self):
        return hash(self.hash)


def load_scenario(path) -> ScenarioConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"scenario file not found: {path}")
    return ScenarioConfig.loads(path.read_text(), source=str(path))


def bundled_scenario_path(name: str) -> Path:
    """Path of a scenario file shipped with the package (``cwh_rendezvous`` or ``nrho``)."""
    ref = resources.files("ccorbit") / "data" / f"{name}.toml"
    with resources.as_file(ref) as p:
        return Path(p)


# -- NRHO reference ---------------------------------------------------------------


@dataclass(frozen=True)
class CorrectionResult:
    state: np.ndarray
    period: float
    residuals: tuple
    iterations: int


def _cr3bp_stm_rhs(model: DynamicsModel):
    def rhs(t, y):
        x = y[:6]
        Phi = y[6:].reshape(6, 6)
        return np.concatenate([model.f0(x, t), (model.jacobian(x, t) @ Phi).ravel()])
    return rhs


def _half_period_crossing(model: DynamicsModel, x0: np.ndarray, t_max: float, tol: float):
    def crossing(t, y):
        return y[1]
    crossing.direction = 1.0 if x0[4] < 0 else -1.0
    crossing.terminal = True
    y0 = np.concatenate([x0, np.eye(6).ravel()])
    sol = solve_ivp(_cr3bp_stm_rhs(model), (0.0, t_max), y0, method="DOP853", rtol=tol, atol=tol,
                    events=crossing)
    if sol.status != 1 or not len(sol.t_events[0]):
        raise CorrectionError("no y = 0 plane crossing found")
    return sol.t_events[0][0], sol.y_events[0][0]


def differential_correct_nrho(ic_guess: np.ndarray, mu: float, tol: float = 1e-12,
                              max_iter: int = 50, t_max: float = 10.0) -> CorrectionResult:
    """Single-shooting corrector for an x-z symmetric periodic orbit.

    Holds z0 fixed and corrects (x0, vy0) so that the first y = 0 crossing is
    perpendicular (vx = vz = 0 there). The period is twice the crossing time.
    """
    model = DynamicsModel.cr3bp(mu=mu)
    x0 = np.asarray(ic_guess, dtype=float).copy()
    if x0.shape != (6,):
        raise ValueError("initial guess must be a 6-vector")
    x0[[1, 3, 5]] = 0.0
    itol = min(1e-13, tol * 1e-1)
    history = []
    for it in range(max_iter + 1):
        t_half, y = _half_period_crossing(model, x0, t_max, itol)
        xf, Phi = y[:6], y[6:].reshape(6, 6)
        res = np.array([xf[3], xf[5]])
        history.append(float(np.max(np.abs(res))))
        if history[-1] < tol:
            return CorrectionResult(x0, 2.0 * t_half, tuple(history), it)
        if len(history) > 5 and history[-1] > 0.1 * history[-6]:
            raise CorrectionError(f"Newton stall: residual {history[-1]:.3e} after {it} iterations")
        # sensitivities of (vx, vz) at the crossing to (x0, vy0), with free final time
        fdot = model.f0(xf)
        cols = [0, 4]
        J = Phi[np.ix_([3, 5], cols)] - np.outer(fdot[[3, 5]], Phi[1, cols]) / xf[4]
        x0[cols] -= np.linalg.solve(J, res)
    raise CorrectionError(f"no convergence in {max_iter} iterations (residual {history[-1]:.3e})")


# -- scenarios --------------------------------------------------------------------


@dataclass
class Scenario:
    """A fully materialized planning problem and what the simulator needs."""

    config: ScenarioConfig
    model: DynamicsModel
    units: Units
    reference: ReferenceTrajectory
    segments: list
    schedule: FilterSchedule
    blocks: BlockOperators
    constraints: ConstraintSet
    budget: RiskBudget
    init: InitialUncertainty
    obs_model: ObservationModel
    obs: list
    noise: np.ndarray
    gates: GatesParams
    maneuver_mask: np.ndarray
    measurement_mask: np.ndarray
    execution_controls: np.ndarray = None
    execution_rms: np.ndarray = None
    notes: tuple = ()

    @property
    def name(self) -> str:
        return self.config.name

    @property
    def N(self) -> int:
        return self.reference.N

    @property
    def problem(self) -> PlanningProblem:
        return PlanningProblem(self.blocks, self.schedule, self.init.mean, self.maneuver_mask,
                               self.constraints, self.budget, self.model.control_type,
                               np.diff(self.reference.epochs))

    @property
    def backend(self) -> SolverBackendSpec:
        return SolverBackendSpec.from_config(self.config.values["solver"])

    def with_execution_controls(self, ubar: np.ndarray) -> "Scenario":
        """Re-evaluate execution-error factors at nominal controls ``ubar`` (N, 3)."""
        ubar = np.asarray(ubar, dtype=float)
        return self._with_exe([gates_matrix(u, self.gates) for u in ubar], execution_controls=ubar.copy())

    def with_execution_envelope(self, rms: np.ndarray) -> "Scenario":
        """Execution-error factors bounding the Gates covariance of burns of rms size ``rms`` (N,)."""
        rms = np.asarray(rms, dtype=float)
        return self._with_exe([gates_envelope(r, self.gates) for r in rms], execution_rms=rms.copy())

    def _with_exe(self, factors, **kw) -> "Scenario":
        segs = [replace(s, G_exe=s.B @ factors[k]) if self.maneuver_mask[k] else s
                for k, s in enumerate(self.segments)]
        schedule = build_filter_schedule(segs, self.obs, self.init, self.measurement_mask)
        blocks = assemble_block_operators(segs, schedule, self.init.P_hat0)
        return replace(self, segments=segs, schedule=schedule, blocks=blocks, **kw)


def _every(n: int, step: int) -> np.ndarray:
    if step < 1:
        raise ConfigError("horizon: step counts must be >= 1")
    return np.arange(n) % step == 0


def _observation(v: dict, units: Units) -> ObservationModel:
    u = v["uncertainty"]
    if v["scenario"]["observation"] == "range_bearing":
        ang = u["sigma_obs_angle"]
        if ang is None:
            raise ConfigError("uncertainty.sigma_obs_angle: required for range_bearing observations")
        return range_bearing_observation(u["sigma_obs_r"] / units.length, ang)
    return full_state_observation(u["sigma_obs_r"] / units.length, u["sigma_obs_v"] / units.velocity)


def _assemble(cfg: ScenarioConfig, model: DynamicsModel, units: Units, x0: np.ndarray, xf: np.ndarray,
              epochs: np.ndarray, maneuver_mask: np.ndarray, measurement_mask: np.ndarray,
              constraints_fn: Callable, notes=()) -> Scenario:
    v = cfg.values
    u = v["uncertainty"]
    b = v["boundary"]
    ref = ReferenceTrajectory.propagate(model, x0, epochs)
    noise = acceleration_noise(u["sigma_a"] / units.accel_noise)
    gates = GatesParams(u["gates_sigma1"], u["gates_sigma2"], u["gates_sigma3"],
                        u["gates_sigma4"]).scaled(units.velocity)
    segs = discretize(model, ref, noise=noise, gates=gates, maneuver_mask=maneuver_mask)
    obs_model = _observation(v, units)
    obs = [linearize_observation(obs_model, x) for x in ref.states]
    D0 = obs[0].D
    if obs_model.n_y == 6:
        P_tilde0 = D0 @ D0.T
    else:
        P_tilde0 = np.diag(np.r_[np.full(3, u["sigma_obs_r"] / units.length),
                                 np.full(3, u["sigma_obs_v"] / units.velocity)] ** 2)
    sr, sv = u["sigma_r"] / units.length, u["sigma_v"] / units.velocity
    init = InitialUncertainty(x0.copy(), np.diag([sr**2] * 3 + [sv**2] * 3), P_tilde0)
    schedule = build_filter_schedule(segs, obs, init, measurement_mask)
    blocks = assemble_block_operators(segs, schedule, init.P_hat0)
    P_f = None
    if b["sigma_rf"] is not None and b["sigma_vf"] is not None:
        P_f = np.diag([(b["sigma_rf"] / units.length) ** 2] * 3 + [(b["sigma_vf"] / units.velocity) ** 2] * 3)
    cs = constraints_fn(ref, xf, P_f)
    budget = RiskBudget(v["risk"]["eps_x"], v["risk"]["eps_u"], v["risk"]["p"])
    return Scenario(cfg, model, units, ref, segs, schedule, blocks, cs, budget, init, obs_model, obs,
                    noise, gates, maneuver_mask, measurement_mask, execution_controls=np.zeros((ref.N, 3)),
                    notes=tuple(notes))


def build_cwh_scenario(cfg: ScenarioConfig) -> Scenario:
    """Rendezvous about a circular chief orbit, solved in km and s."""
    v = cfg.values
    if cfg.kind != "CWH":
        raise ConfigError("scenario.dynamics: build_cwh_scenario needs CWH dynamics")
    h, c, b = v["horizon"], v["constraints"], v["boundary"]
    model = DynamicsModel.cwh_from_radius(v["dynamics"]["chief_radius"], v["dynamics"]["mu_earth"],
                                          control_type=v["scenario"]["control_type"])
    N = h["N"] if h["N"] is not None else 14
    dt = h["dt"]
    epochs = dt * np.arange(N + 1)
    units = Units()
    x0 = np.r_[b["r0"], b["v0"]]
    xf = np.r_[b["rf"], b["vf"]]
    du_max = c["du_max"]
    if du_max is None and c["omega_max"] is not None and c["u_max"] is not None:
        du_max = c["u_max"] * c["omega_max"] * dt
    cone = None
    if c["cone_theta_max"] is not None:
        if c["r_trigger"] is None:
            raise ConfigError("constraints.r_trigger: required with an approach cone")
        cone = ApproachCone.plus_y(c["cone_theta_max"], c["r_trigger"])

    def constraints(ref, xf, P_f):
        tube = None
        if c["d_max"] is not None:
            tube = Tube(np.hstack([np.eye(3), np.zeros((3, 3))]), ref.states, c["d_max"])
        return ConstraintSet(tube=tube, u_max=c["u_max"], du_max=du_max, x_f=xf, P_f=P_f, cone=cone)

    return _assemble(cfg, model, units, x0, xf, epochs, _every(N, h["maneuver_every"]),
                     _every(N + 1, h["measurement_every"]), constraints)


def build_nrho_scenario(cfg: ScenarioConfig) -> Scenario:
    """Multi-revolution station keeping on a corrected halo orbit, solved in CR3BP units."""
    v = cfg.values
    if cfg.kind != "CR3BP":
        raise ConfigError("scenario.dynamics: build_nrho_scenario needs CR3BP dynamics")
    d, h, c, b, r = v["dynamics"], v["horizon"], v["constraints"], v["boundary"], v["reference"]
    units = Units(d["lstar"], d["tstar"])
    model = DynamicsModel.cr3bp(mu=d["mass_ratio"], lstar=d["lstar"], tstar=d["tstar"],
                                control_type=v["scenario"]["control_type"])
    x0 = units.nondimensionalize(np.r_[b["r0"], b["v0"]])
    xf = units.nondimensionalize(np.r_[b["rf"], b["vf"]])
    notes = []
    if r["correct_ic"]:
        corr = differential_correct_nrho(x0, model.mu, tol=r["corrector_tol"])
        if np.allclose(xf, x0):
            xf = corr.state.copy()
        x0, period = corr.state, corr.period
        notes.append(f"initial state corrected by {np.max(np.abs(corr.state - units.nondimensionalize(np.r_[b['r0'], b['v0']]))):.3e} nd")
    else:
        period = _half_period_crossing(model, x0, 10.0, 1e-13)[0] * 2.0
    revs, per = h["revolutions"], h["nodes_per_rev"]
    N = revs * per
    if h["N"] is not None and h["N"] != N:
        raise ConfigError(f"horizon.N: {h['N']} disagrees with revolutions x nodes_per_rev = {N}")
    epochs = np.linspace(0.0, revs * period, N + 1)
    if v["uncertainty"]["observation_is_placeholder"]:
        notes.append("placeholder observation model: full-state pseudo-measurement")

    def constraints(ref, xf_, P_f):
        tube = None
        if c["d_max"] is not None:
            tube = Tube(np.hstack([np.eye(3), np.zeros((3, 3))]), ref.states, c["d_max"] / units.length)
        u_max = None if c["u_max"] is None else c["u_max"] / units.velocity
        du_max = None if c["du_max"] is None else c["du_max"] / units.velocity
        return ConstraintSet(tube=tube, u_max=u_max, du_max=du_max, x_f=xf_, P_f=P_f)

    return _assemble(cfg, model, units, x0, xf, epochs, _every(N, h["maneuver_every"]),
                     _every(N + 1, h["measurement_every"]), constraints, notes)


def build_scenario(cfg: ScenarioConfig) -> Scenario:
    return build_cwh_scenario(cfg) if cfg.kind == "CWH" else build_nrho_scenario(cfg)


def plan_scenario(scenario: Scenario, backend: Optional[SolverBackendSpec] = None):
    """Plan with the scenario's SCP and execution-model settings.

    Returns ``(plan, scenario)``; the scenario is the one the plan was solved
    on, which differs from the input when the execution model is iterated.
    """
    backend = backend or scenario.backend
    v = scenario.config.values
    scp = dict(eps_tol=v["scp"]["eps_tol"], max_iter=v["scp"]["max_iter"],
               weight_factor=v["scp"]["penalty_factor"])
    if v["uncertainty"]["execution_model"] == "reference":
        return solve_with_stc(scenario.problem, backend, **scp), scenario
    state = {"scenario": scenario}

    def update(rms):
        state["scenario"] = scenario.with_execution_envelope(rms)
        return state["scenario"].problem

    plan = solve_with_execution_update(scenario.problem, update, backend,
                                       rtol=v["uncertainty"]["envelope_rtol"], **scp)
    return plan, state["scenario"]


def nodes_drift(model: DynamicsModel, ref: ReferenceTrajectory) -> np.ndarray:
    """Position mismatch between each node and a single continuous propagation from node 0."""
    x = ref.states[0]
    out = [0.0]
    for k in range(ref.N):
        x = propagate(model, x, ref.epochs[k], ref.epochs[k + 1])
        out.append(float(np.linalg.norm(x[:3] - ref.states[k + 1][:3])))
    return np.array(out)
