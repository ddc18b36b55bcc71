"""Problem assembly, conic solve, and the fixed-point loop for state-triggered constraints."""

from __future__ import annotations

import logging
import os
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Tuple

import cvxpy as cp
import numpy as np

from .blockstats import BlockOperators, Policy, state_mean
from .convexifier import (ConstraintSet, ConvexProgram, InfeasibleTerminalCovariance, RiskBudget,
                          build_control_mag_cc, build_control_rate_cc, build_cost, build_hyperplane_cc,
                          build_stc, build_terminal, build_tube_cc, evaluate_constraints, evaluate_cost)
from .dynamics import ControlType
from .navigation import FilterSchedule

log = logging.getLogger(__name__)

STATUSES = ("optimal", "infeasible", "max_iter", "numerical")
VERIFY_RTOL = 1e-6
FEASTOL_ENV = "CCORBIT_SOLVER_FEASTOL"


class MeanInfeasible(ValueError):
    """The mean (zero-dispersion) constraints alone admit no solution."""


# families are probed in this order when diagnosing infeasibility
FAMILY_ORDER = ("terminal_mean", "control_magnitude", "control_rate", "hyperplane", "tube",
                "terminal_covariance", "stc", "cost")


@dataclass(frozen=True)
class SolverBackendSpec:
    """Conic backend choice and its tolerances.

    cvxpy reduces every program to the standard form
    ``min c^T v  s.t.  A v + s = b,  s in K`` before handing it to ``name``.
    """

    name: str = "CLARABEL"
    cones: frozenset = frozenset({"nonnegative", "second_order", "psd"})
    feastol: float = 1e-8
    gaptol: float = 1e-8
    max_iters: int = 500
    # relative tightening of every bound inside the program; verification uses the true bounds
    backoff: float = 1e-3

    def __post_init__(self):
        if "second_order" not in self.cones:
            raise ValueError("backend must support second-order cones")
        if not self.feastol > 0 or not self.gaptol > 0 or self.max_iters < 1:
            raise ValueError("solver tolerances and iteration cap must be positive")
        if not 0.0 <= self.backoff < 1.0:
            raise ValueError("backoff must lie in [0, 1)")

    @classmethod
    def detect(cls, name: str = "CLARABEL", **kw) -> "SolverBackendSpec":
        """Spec for an installed cvxpy solver, with cones read from the solver itself."""
        if name not in cp.installed_solvers():
            raise ValueError(f"solver {name} is not installed (have {cp.installed_solvers()})")
        from cvxpy.reductions.solvers.defines import SOLVER_MAP_CONIC
        solver = SOLVER_MAP_CONIC[name]
        supported = {c.__name__ for c in solver.SUPPORTED_CONSTRAINTS}
        cones = {"nonnegative"}
        if "SOC" in supported:
            cones.add("second_order")
        if "PSD" in supported:
            cones.add("psd")
        spec = cls(name=name, cones=frozenset(cones), **kw)
        return spec.with_env_overrides()

    @classmethod
    def from_config(cls, cfg: Optional[dict]) -> "SolverBackendSpec":
        cfg = dict(cfg or {})
        kw = {k: cfg[k] for k in ("feastol", "gaptol", "max_iters", "backoff") if k in cfg}
        return cls.detect(cfg.get("name", "CLARABEL"), **kw)

    def with_env_overrides(self) -> "SolverBackendSpec":
        val = os.environ.get(FEASTOL_ENV)
        return replace(self, feastol=float(val)) if val else self

    @property
    def norm_policy(self) -> str:
        return "spectral" if "psd" in self.cones else "frobenius"

    def solve_kwargs(self) -> dict:
        if self.name == "CLARABEL":
            return dict(tol_feas=self.feastol, tol_gap_abs=self.gaptol, tol_gap_rel=self.gaptol,
                        max_iter=self.max_iters,
                        # compact merging of the arrow-shaped LMIs stalls on long horizons
                        chordal_decomposition_compact=False)
        if self.name == "SCS":
            return dict(eps_abs=self.feastol, eps_rel=self.gaptol, max_iters=self.max_iters)
        if self.name == "CVXOPT":
            return dict(feastol=self.feastol, abstol=self.gaptol, reltol=self.gaptol,
                        max_iters=self.max_iters)
        return {}


@dataclass(frozen=True)
class PlanningProblem:
    """Everything the convex program needs, in scenario (scaled) units."""

    blocks: BlockOperators
    schedule: FilterSchedule
    xbar0: np.ndarray
    maneuver_mask: np.ndarray
    constraints: ConstraintSet
    budget: RiskBudget = RiskBudget()
    control_type: ControlType = ControlType.IMPULSIVE
    dt: Optional[np.ndarray] = None
    # (state_scale, control_scale) used to condition the convex program; see scale_problem
    conditioning: Optional[Tuple[np.ndarray, float]] = None

    @property
    def N(self) -> int:
        return self.blocks.N


@dataclass
class PlanSolution:
    ubar: np.ndarray
    K: np.ndarray
    zeta: np.ndarray
    J_ub: float
    penalty: float
    status: str
    margins: Dict[str, list] = field(default_factory=dict)
    trace: List[dict] = field(default_factory=list)
    xbar: Optional[np.ndarray] = None
    norm_policy: str = "spectral"
    diagnosis: str = ""
    stc_weight: float = 0.0
    stc_reference: Optional[np.ndarray] = None
    solver_status: str = ""
    maneuver_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ValueError(f"unknown status {self.status!r}")

    @property
    def policy(self) -> Policy:
        mask = np.ones(len(self.ubar), bool) if self.maneuver_mask is None else self.maneuver_mask
        return Policy(self.ubar, self.K, mask)


def scale_problem(problem: PlanningProblem, state_scale: np.ndarray, control_scale: float) -> PlanningProblem:
    """Same problem in coordinates x' = D^-1 x, u' = u / s_u with D = diag(state_scale).

    Chance constraints, the terminal constraint and the optimal policy are
    invariant under the change of variables; only conditioning changes.
    Map solutions back with :func:`unscale_policy`.
    """
    d = np.asarray(state_scale, dtype=float)
    su = float(control_scale)
    if d.shape != (problem.blocks.n_x,) or np.any(d <= 0) or not su > 0:
        raise ValueError("scales must be positive with one entry per state")
    b, sch, cs = problem.blocks, problem.schedule, problem.constraints
    dinv = 1.0 / d
    rows = np.tile(dinv, b.N + 1)
    blocks = replace(
        b, A=rows[:, None] * b.A * d, B=rows[:, None] * b.B * su, C=rows * b.C,
        L=rows[:, None] * b.L, L_Z=rows[:, None] * b.L_Z, S_sqrt=rows[:, None] * b.S_sqrt,
        Phi=dinv[:, None] * b.Phi * d, P_tilde_sqrt=dinv[:, None] * b.P_tilde_sqrt)
    schedule = replace(sch, L=dinv[:, None] * sch.L, P_minus=np.outer(dinv, dinv) * sch.P_minus,
                       P_plus=np.outer(dinv, dinv) * sch.P_plus)
    tube = cs.tube
    if tube is not None:
        tube = replace(tube, H=np.asarray(tube.H) * d, reference=np.asarray(tube.reference) * dinv)
    cone = cs.cone
    if cone is not None:
        cone = replace(cone, H_r=np.asarray(cone.H_r) * d)
    constraints = replace(
        cs, hyperplanes=tuple((np.asarray(a) * d, bb) for a, bb in cs.hyperplanes), tube=tube,
        u_max=None if cs.u_max is None else cs.u_max / su,
        du_max=None if cs.du_max is None else cs.du_max / su,
        x_f=None if cs.x_f is None else np.asarray(cs.x_f) * dinv,
        P_f=None if cs.P_f is None else np.outer(dinv, dinv) * cs.P_f, cone=cone)
    return replace(problem, blocks=blocks, schedule=schedule, xbar0=problem.xbar0 * dinv,
                   constraints=constraints, conditioning=None)


def unscale_policy(ubar: np.ndarray, K: np.ndarray, state_scale: np.ndarray, control_scale: float):
    return ubar * control_scale, K * control_scale / np.asarray(state_scale)[None, None, :]


def build_program(problem: PlanningProblem, norm_policy: str = "spectral", p: Optional[float] = None,
                  stc_reference: Optional[np.ndarray] = None, stc_weight: float = 0.0,
                  backoff: float = 0.0) -> ConvexProgram:
    """Assemble cost and every constraint of ``problem``; STC only with a reference."""
    cs = problem.constraints
    budget = problem.budget
    prog = ConvexProgram(problem.blocks, problem.schedule, problem.xbar0, problem.maneuver_mask,
                         problem.control_type, problem.dt, norm_policy, backoff)
    N = problem.N
    build_cost(prog, budget.p if p is None else p)
    if cs.u_max is not None:
        for k in prog.maneuver_nodes:
            build_control_mag_cc(prog, k, cs.u_max, budget)
    if cs.du_max is not None:
        for k in range(N - 1):
            build_control_rate_cc(prog, k, cs.du_max, budget)
    if cs.hyperplanes:
        for k in (range(N + 1) if cs.hyperplane_nodes is None else cs.hyperplane_nodes):
            build_hyperplane_cc(prog, k, cs.hyperplanes, budget)
    if cs.tube is not None:
        for k in (range(N + 1) if cs.tube.nodes is None else cs.tube.nodes):
            build_tube_cc(prog, k, cs.tube, budget)
    if cs.x_f is not None:
        build_terminal(prog, cs.x_f, cs.P_f)
    if cs.cone is not None and stc_reference is not None:
        for k in range(N + 1):
            build_stc(prog, k, stc_reference[k], cs.cone, budget.eps_x, stc_weight)
    return prog


def _extract(prog: ConvexProgram):
    b = prog.blocks
    ubar = np.zeros((b.N, b.n_u))
    K = np.zeros((b.N, b.n_u, b.n_x))
    for k in prog.maneuver_nodes:
        ubar[k] = prog.ubar[k].value
        K[k] = prog.K[k].value
    zeta = np.zeros(b.N + 1)
    for k, z in prog.zeta.items():
        zeta[k] = max(float(z.value), 0.0)
    return ubar, K, zeta


def _solve_cvx(problem: cp.Problem, backend: SolverBackendSpec) -> str:
    try:
        with warnings.catch_warnings():
            # inaccurate solutions are caught by the post-hoc margin check instead
            warnings.simplefilter("ignore", UserWarning)
            problem.solve(solver=backend.name, **backend.solve_kwargs())
    except cp.error.SolverError as exc:
        log.warning("solver failure: %s", exc)
        return "solver_error"
    return problem.status


def diagnose_infeasibility(prog: ConvexProgram, backend: SolverBackendSpec) -> str:
    """Name the first constraint family (in a fixed order) whose addition breaks feasibility."""
    active: list = []
    names = [f for f in FAMILY_ORDER if f in prog.families]
    names += sorted(set(prog.families) - set(names))
    for name in names:
        active.append(name)
        probe = cp.Problem(cp.Minimize(0), prog.constraints(active))
        status = _solve_cvx(probe, backend)
        if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
            return f"infeasible after adding constraint family '{name}'"
        if status == "solver_error":
            return f"solver failed while probing constraint family '{name}'"
    return "every family is feasible in isolation; infeasibility comes from the joint program"


def solve_fixed(prog: ConvexProgram, backend: Optional[SolverBackendSpec] = None,
                problem: Optional[PlanningProblem] = None, diagnose: bool = True,
                scales: Optional[Tuple[np.ndarray, float]] = None) -> PlanSolution:
    """Solve one convex program and re-verify its surrogate constraints numerically.

    ``problem`` supplies the constraint data for post-hoc verification; without
    it only the solver status is trusted. When ``prog`` was built from a scaled
    copy of ``problem``, ``scales`` maps the policy back before verification.
    """
    backend = backend or SolverBackendSpec.detect()
    b = prog.blocks
    empty = PlanSolution(np.zeros((b.N, b.n_u)), np.zeros((b.N, b.n_u, b.n_x)), np.zeros(b.N + 1),
                         float("nan"), float("nan"), "numerical", norm_policy=prog.norm_policy)
    cvx = prog.problem()
    status = _solve_cvx(cvx, backend)
    empty.solver_status = status
    if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        empty.status = "infeasible"
        empty.diagnosis = diagnose_infeasibility(prog, backend) if diagnose else "infeasible"
        return empty
    if status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        empty.diagnosis = f"solver returned {status}"
        return empty

    ubar, K, zeta = _extract(prog)
    xbar0 = prog.xbar0
    if scales is not None:
        ubar, K = unscale_policy(ubar, K, *scales)
        b, xbar0 = problem.blocks, problem.xbar0
    policy = Policy(ubar, K, prog.mask)
    X = state_mean(b, xbar0, policy.U).reshape(b.N + 1, b.n_x)
    J = evaluate_cost(b, policy, _cost_level(prog, problem), prog.control_type, prog.dt)
    penalty = float(sum(term.value for term in prog.penalty_terms)) if prog.penalty_terms else 0.0
    sol = PlanSolution(ubar, K, zeta, J, penalty, "optimal", xbar=X, norm_policy=prog.norm_policy,
                       solver_status=status, maneuver_mask=prog.mask.copy())
    if problem is not None:
        rep = evaluate_constraints(b, problem.schedule, policy, xbar0, problem.constraints,
                                   problem.budget, None)
        sol.margins = {k: [float(v) for v in vals] for k, vals in rep.margins.items()}
        if not rep.feasible(VERIFY_RTOL):
            worst = {k: v for k, v in rep.worst().items()}
            sol.status = "numerical"
            sol.diagnosis = f"post-hoc verification failed, worst margins {worst}"
    elif status == cp.OPTIMAL_INACCURATE:
        sol.status = "numerical"
        sol.diagnosis = "solver reported an inaccurate solution"
    return sol


def _cost_level(prog: ConvexProgram, problem: Optional[PlanningProblem]) -> float:
    return problem.budget.p if problem is not None else RiskBudget().p


def solve_problem(problem: PlanningProblem, backend: Optional[SolverBackendSpec] = None,
                  **kw) -> PlanSolution:
    """Build and solve ``problem`` without state-triggered constraints."""
    backend = backend or SolverBackendSpec.detect()
    scales = problem.conditioning
    built = problem
    if scales is not None:
        built = scale_problem(problem, *scales)
        if kw.get("stc_reference") is not None:
            kw["stc_reference"] = np.asarray(kw["stc_reference"]) / np.asarray(scales[0])
    try:
        prog = build_program(built, backend.norm_policy, backoff=backend.backoff, **kw)
    except InfeasibleTerminalCovariance as exc:
        b = problem.blocks
        return PlanSolution(np.zeros((b.N, b.n_u)), np.zeros((b.N, b.n_u, b.n_x)), np.zeros(b.N + 1),
                            float("nan"), float("nan"), "infeasible", diagnosis=str(exc),
                            norm_policy=backend.norm_policy)
    return solve_fixed(prog, backend, problem, scales=scales)


def deterministic_cost_scale(problem: PlanningProblem, backend: SolverBackendSpec) -> float:
    """Minimum of sum ||ubar_k|| subject to the mean constraints with zero feedback gains."""
    b = problem.blocks
    cs = problem.constraints
    prog = ConvexProgram(b, problem.schedule, problem.xbar0, problem.maneuver_mask,
                         problem.control_type, problem.dt, backend.norm_policy)
    zoh = problem.control_type is ControlType.ZOH
    dt = prog.dt
    terms = [cp.norm(prog.ubar[k], 2) * (dt[k] if zoh else 1.0) for k in prog.maneuver_nodes]
    cons = [prog.K[k] == 0 for k in prog.maneuver_nodes]
    if cs.u_max is not None:
        cons += [cp.norm(prog.ubar[k], 2) <= cs.u_max for k in prog.maneuver_nodes]
    if cs.du_max is not None:
        cons += [cp.norm(prog.u_mean(k + 1) - prog.u_mean(k), 2) <= cs.du_max
                 for k in range(b.N - 1) if k in prog.ubar or k + 1 in prog.ubar]
    if cs.x_f is not None:
        cons.append(prog.mean(b.N) == cs.x_f)
    pr = cp.Problem(cp.Minimize(sum(terms)), cons)
    status = _solve_cvx(pr, backend)
    if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        raise MeanInfeasible("mean constraints cannot be met even without dispersion")
    if status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        raise RuntimeError(f"deterministic solve for the penalty scale failed: {status}")
    return float(pr.value)


def _triggered(cone, X: np.ndarray) -> np.ndarray:
    return np.array([cone.weight(x) > 0 for x in X])


def solve_with_stc(problem: PlanningProblem, backend: Optional[SolverBackendSpec] = None,
                   eps_tol: float = 1e-3, max_iter: int = 15, weight: Optional[float] = None,
                   weight_factor: float = 1e3, reference: Optional[np.ndarray] = None,
                   relinearize: Optional[Callable[[np.ndarray], PlanningProblem]] = None) -> PlanSolution:
    """Fixed-point loop: trigger weights from the previous mean, solve, repeat.

    Stops when the largest change of the mean states and nominal controls is
    at most ``eps_tol``, or when no node is triggered by either the reference
    or the new mean and no relinearization is requested (the next program
    would be identical). ``relinearize(ubar)`` rebuilds the problem about the
    latest nominal controls (e.g. control-dependent execution error).
    """
    backend = backend or SolverBackendSpec.detect()
    cone = problem.constraints.cone
    b = problem.blocks
    if reference is None:
        reference = state_mean(b, problem.xbar0, np.zeros(b.N * b.n_u)).reshape(b.N + 1, b.n_x)
    if cone is None:
        sol = solve_problem(problem, backend)
        sol.trace.append(dict(iteration=1, dX=0.0, dU=0.0, J_ub=sol.J_ub, penalty=0.0, status=sol.status))
        return sol
    if weight is None:
        try:
            weight = weight_factor * max(deterministic_cost_scale(problem, backend), 1e-12)
        except MeanInfeasible:
            # the full program is infeasible too; solve it anyway for the family diagnosis
            weight = 0.0
    U_prev = np.zeros((b.N, b.n_u))
    trace: list = []
    sol = None
    for it in range(1, max_iter + 1):
        t0 = time.perf_counter()
        sol = solve_problem(problem, backend, stc_reference=reference, stc_weight=weight)
        sol.stc_weight = weight
        sol.stc_reference = reference.copy()
        if sol.status != "optimal":
            trace.append(dict(iteration=it, status=sol.status))
            sol.trace = trace
            return sol
        dX = float(np.max(np.abs(sol.xbar - reference)))
        dU = float(np.max(np.abs(sol.ubar - U_prev)))
        trace.append(dict(iteration=it, dX=dX, dU=dU, J_ub=sol.J_ub, penalty=sol.penalty,
                          status=sol.status, n_triggered=int(_triggered(cone, reference).sum())))
        log.info("SCP %d: dX=%.3e dU=%.3e J_ub=%.6e penalty=%.3e (%.2fs)", it, dX, dU, sol.J_ub,
                 sol.penalty, time.perf_counter() - t0)
        vacuous = (relinearize is None and not _triggered(cone, reference).any()
                   and not _triggered(cone, sol.xbar).any())
        if max(dX, dU) <= eps_tol or vacuous:
            sol.trace = trace
            return sol
        reference = sol.xbar
        U_prev = sol.ubar
        if relinearize is not None:
            problem = relinearize(sol.ubar)
    sol.status = "max_iter"
    sol.trace = trace
    return sol


def burn_rms(sol: PlanSolution, blocks: BlockOperators) -> np.ndarray:
    """sqrt(E|u_k|^2) = sqrt(|ubar_k|^2 + ||P_uk^1/2||_F^2) per interval (zero without a maneuver)."""
    Kb = sol.policy.K_block()
    KS = Kb @ blocks.S_sqrt
    out = np.zeros(blocks.N)
    for k in range(blocks.N):
        out[k] = np.sqrt(np.dot(sol.ubar[k], sol.ubar[k]) + np.sum(KS[blocks.su(k)] ** 2))
    return out


def solve_with_execution_update(problem: PlanningProblem, update: Callable[[np.ndarray], PlanningProblem],
                                backend: Optional[SolverBackendSpec] = None, rtol: float = 0.02,
                                max_outer: int = 8, **stc_kw) -> PlanSolution:
    """Alternate planning with an execution-error model rebuilt from the planned burn sizes.

    ``update(rms)`` returns the problem whose execution error corresponds to
    burns of rms magnitude ``rms`` (N,). Stops once the largest change of the
    rms magnitudes, relative to the largest of them, is at most ``rtol``; the
    returned plan was solved under the model built from the previous rms.
    """
    backend = backend or SolverBackendSpec.detect()
    rms_prev = np.zeros(problem.N)
    outer: list = []
    sol = None
    for it in range(1, max_outer + 1):
        sol = solve_with_stc(problem, backend, **stc_kw)
        if sol.status != "optimal":
            sol.trace = outer + sol.trace
            return sol
        rms = burn_rms(sol, problem.blocks)
        change = float(np.max(np.abs(rms - rms_prev)) / max(float(np.max(rms)), 1e-300))
        outer.append(dict(outer_iteration=it, rms_change=change, J_ub=sol.J_ub, status=sol.status))
        log.info("execution model %d: rms change %.3e J_ub=%.6e", it, change, sol.J_ub)
        if change <= rtol:
            sol.trace = outer + sol.trace
            return sol
        problem = update(rms)
        rms_prev = rms
    sol.status = "max_iter"
    sol.trace = outer + sol.trace
    return sol
