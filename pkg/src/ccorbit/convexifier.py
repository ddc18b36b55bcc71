"""Deterministic convex surrogates of the probabilistic cost and constraints.

Every builder adds cvxpy constraints to a :class:`ConvexProgram`. The
matching ``evaluate_*`` functions recompute the same surrogate quantities
numerically from a fixed policy (wide covariance factors, exact spectral
norms) so solutions can be checked without trusting solver residuals.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import cvxpy as cp
import numpy as np
from scipy.special import erfcinv
from scipy.stats import chi2

from ._linalg import psd_factor, symmetrize
from .blockstats import BlockOperators, Policy, compressed_rows, sqrt_covariances, state_mean
from .dynamics import ControlType
from .navigation import FilterSchedule


class InfeasibleTerminalCovariance(ValueError):
    pass


# -- quantile coefficients --------------------------------------------------------


def gaussian_quantile_coeff(eps: float) -> float:
    """Standard-normal quantile at probability 1 - eps."""
    if not 0.0 < eps <= 0.5:
        raise ValueError(f"risk {eps} outside (0, 0.5]")
    return float(np.sqrt(2.0) * erfcinv(2.0 * eps))


def chi2_quantile_coeff(eps: float, n: int) -> float:
    """Square root of the chi-squared(n) quantile at probability 1 - eps."""
    if not 0.0 < eps < 1.0:
        raise ValueError(f"risk {eps} outside (0, 1)")
    if int(n) != n or n < 1:
        raise ValueError(f"degrees of freedom must be a positive integer, got {n}")
    return float(np.sqrt(chi2.isf(eps, int(n))))


def _strict_gaussian(eps: float) -> float:
    if not 0.0 < eps < 0.5:
        raise ValueError(f"hyperplane risk must lie in (0, 0.5), got {eps}")
    return gaussian_quantile_coeff(eps)


# -- problem data -----------------------------------------------------------------


@dataclass(frozen=True)
class RiskBudget:
    eps_x: float = 1e-3
    eps_u: float = 1e-3
    p: float = 0.99
    hyperplane_eps: Optional[tuple] = None

    def __post_init__(self):
        for name in ("eps_x", "eps_u"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if not 0.5 < self.p < 1:
            raise ValueError("quantile level p must lie in (0.5, 1)")
        if self.hyperplane_eps is not None and sum(self.hyperplane_eps) > self.eps_x * (1 + 1e-12):
            raise ValueError("hyperplane risk allocation exceeds eps_x")

    def allocation(self, n_planes: int) -> np.ndarray:
        """Per-hyperplane risks; uniform split unless given explicitly."""
        if self.hyperplane_eps is not None:
            if len(self.hyperplane_eps) != n_planes:
                raise ValueError("hyperplane_eps length does not match the hyperplanes")
            return np.asarray(self.hyperplane_eps, dtype=float)
        return np.full(n_planes, self.eps_x / n_planes)


@dataclass(frozen=True)
class Tube:
    H: np.ndarray
    reference: np.ndarray  # (N+1, n_x)
    d_max: float
    nodes: Optional[tuple] = None

    def __post_init__(self):
        if not self.d_max > 0:
            raise ValueError("d_max must be positive")


@dataclass(frozen=True)
class ApproachCone:
    A_cone: np.ndarray
    b_cone: np.ndarray
    H_r: np.ndarray
    r_trigger: float

    @classmethod
    def plus_y(cls, theta_max: float, r_trigger: float) -> "ApproachCone":
        """Cone about +y with half angle ``theta_max`` [rad]."""
        H_r = np.hstack([np.eye(3), np.zeros((3, 3))])
        return cls(np.array([[1.0, 0, 0], [0, 0, 1.0]]), np.array([0.0, np.tan(theta_max), 0.0]),
                   H_r, r_trigger)

    def trigger(self, xbar: np.ndarray) -> float:
        """g_stc: negative inside the trigger sphere."""
        return float(np.linalg.norm(self.H_r @ xbar) - self.r_trigger)

    def weight(self, xbar_ref: np.ndarray) -> float:
        return -min(self.trigger(xbar_ref), 0.0)


@dataclass(frozen=True)
class ConstraintSet:
    hyperplanes: tuple = ()               # ((a, b), ...) applied jointly at each hyperplane node
    hyperplane_nodes: Optional[tuple] = None
    tube: Optional[Tube] = None
    u_max: Optional[float] = None
    du_max: Optional[float] = None
    x_f: Optional[np.ndarray] = None
    P_f: Optional[np.ndarray] = None
    cone: Optional[ApproachCone] = None

    def __post_init__(self):
        for name in ("u_max", "du_max"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive")
        if self.P_f is not None:
            P = np.asarray(self.P_f)
            if not np.allclose(P, P.T) or np.linalg.eigvalsh(symmetrize(P))[0] <= 0:
                raise ValueError("P_f must be symmetric positive definite")


# -- convex program ---------------------------------------------------------------

NORM_POLICIES = ("spectral", "frobenius")


class ConvexProgram:
    """Decision variables, affine statistics and grouped constraints.

    Variables exist only at maneuver nodes; elsewhere the nominal control and
    gain are the constant zero. Constraints are grouped by family name so a
    solve can be diagnosed family by family.
    """

    def bound(self, value: float) -> float:
        """Right-hand side tightened by the relative backoff (absorbs solver residuals)."""
        return value * (1.0 - self.backoff)

    def __init__(self, blocks: BlockOperators, schedule: FilterSchedule, xbar0: np.ndarray,
                 maneuver_mask: Sequence[bool], control_type=ControlType.IMPULSIVE,
                 dt: Optional[Sequence[float]] = None, norm_policy: str = "spectral",
                 backoff: float = 0.0):
        if norm_policy not in NORM_POLICIES:
            raise ValueError(f"norm policy must be one of {NORM_POLICIES}")
        if not 0.0 <= backoff < 1.0:
            raise ValueError("backoff must lie in [0, 1)")
        self.backoff = float(backoff)
        self.blocks = blocks
        self.schedule = schedule
        self.xbar0 = np.asarray(xbar0, dtype=float)
        self.mask = np.asarray(maneuver_mask, dtype=bool)
        if self.mask.shape != (blocks.N,):
            raise ValueError("maneuver mask must have one entry per interval")
        self.control_type = ControlType(control_type)
        self.dt = np.ones(blocks.N) if dt is None else np.asarray(dt, dtype=float)
        self.norm_policy = norm_policy
        nu, nx = blocks.n_u, blocks.n_x
        self.maneuver_nodes = [int(k) for k in np.flatnonzero(self.mask)]
        self.ubar = {k: cp.Variable(nu, name=f"ubar_{k}") for k in self.maneuver_nodes}
        self.K = {k: cp.Variable((nu, nx), name=f"K_{k}") for k in self.maneuver_nodes}
        self.zeta: Dict[int, cp.Variable] = {}
        self.families: Dict[str, List[cp.Constraint]] = {}
        self.cost_terms: list = []
        self.penalty_terms: list = []
        self._epigraph: dict = {}
        self._mean_const = state_mean(blocks, self.xbar0, np.zeros(blocks.N * nu))

    # affine statistics

    def u_mean(self, k: int):
        return self.ubar[k] if k in self.ubar else np.zeros(self.blocks.n_u)

    def mean(self, k: int):
        b = self.blocks
        expr = self._mean_const[b.sx(k)]
        terms = [b.B_block(k, j) @ self.ubar[j] for j in self.maneuver_nodes if j < k]
        return expr + sum(terms) if terms else expr

    def dispersion_factor(self, k: int):
        """Compressed factor with the Gram of Phat_k (estimate dispersion at node k)."""
        b = self.blocks
        prior = [j for j in self.maneuver_nodes if j < k]
        F = compressed_rows(b, [k] + prior)
        if not prior:
            return F[0]
        return F[0] + sum(b.B_block(k, j) @ self.K[j] @ F[i + 1] for i, j in enumerate(prior))

    def state_factor(self, k: int):
        """Factor of P_k = Phat_k + Ptilde_k."""
        Phat = self.dispersion_factor(k)
        Pt = self.blocks.P_tilde_sqrt[k]
        if isinstance(Phat, np.ndarray):
            return np.hstack([Phat, Pt])
        return cp.hstack([Phat, Pt])

    def control_factor(self, k: int):
        if k not in self.K:
            return None
        F = compressed_rows(self.blocks, [k])[0]
        return self.K[k] @ F

    def rate_factor(self, k: int):
        """Factor of Cov(u_{k+1} - u_k)."""
        nodes = [j for j in (k + 1, k) if j in self.K]
        if not nodes:
            return None
        F = compressed_rows(self.blocks, nodes)
        signs = {k + 1: 1.0, k: -1.0}
        return sum(signs[j] * (self.K[j] @ F[i]) for i, j in enumerate(nodes))

    # bookkeeping

    def add(self, family: str, constraints) -> None:
        self.families.setdefault(family, []).extend(constraints)

    def norm_bound(self, M, family: str, key=None):
        """Nonnegative t with ||M||_2 <= t (spectral; or Frobenius by policy)."""
        if key is not None and key in self._epigraph:
            return self._epigraph[key]
        t = cp.Variable(nonneg=True)
        if isinstance(M, np.ndarray):
            val = np.linalg.norm(M, 2) if M.ndim == 2 and self.norm_policy == "spectral" else np.linalg.norm(M)
            self.add(family, [t >= val])
        else:
            r, c = M.shape if M.ndim == 2 else (1, M.size)
            if r == 1 or c == 1:
                self.add(family, [cp.norm(cp.vec(M, order="F"), 2) <= t])
            elif self.norm_policy == "frobenius":
                self.add(family, [cp.norm(M, "fro") <= t])
            else:
                lmi = cp.bmat([[t * np.eye(r), M], [M.T, t * np.eye(c)]])
                self.add(family, [lmi >> 0])
        if key is not None:
            self._epigraph[key] = t
        return t

    def objective(self):
        terms = self.cost_terms + self.penalty_terms
        return cp.Minimize(sum(terms) if terms else cp.Constant(0.0))

    def constraints(self, families: Optional[Sequence[str]] = None) -> list:
        names = self.families if families is None else families
        return [c for name in names for c in self.families.get(name, [])]

    def problem(self) -> cp.Problem:
        return cp.Problem(self.objective(), self.constraints())

    def cost_expression(self):
        return sum(self.cost_terms) if self.cost_terms else cp.Constant(0.0)


# -- builders ---------------------------------------------------------------------


def build_cost(program: ConvexProgram, p: float = 0.99) -> None:
    """Upper bound of the summed p-quantiles of ||u_k||."""
    if not 0.5 < p < 1:
        raise ValueError("quantile level must lie in (0.5, 1)")
    m = chi2_quantile_coeff(1.0 - p, program.blocks.n_u)
    zoh = program.control_type is ControlType.ZOH
    for k in program.maneuver_nodes:
        tau = program.norm_bound(program.control_factor(k), "cost", key=("Pu", k))
        term = cp.norm(program.ubar[k], 2) + m * tau
        program.cost_terms.append(term * program.dt[k] if zoh else term)


def build_hyperplane_cc(program: ConvexProgram, k: int, planes: Sequence, budget: RiskBudget) -> None:
    eps = budget.allocation(len(planes))
    xk = program.mean(k)
    Pk = program.state_factor(k)
    cons = []
    for (a, b), e in zip(planes, eps):
        a = np.asarray(a, dtype=float)
        m = _strict_gaussian(e)
        s = program.norm_bound(a @ Pk if not isinstance(Pk, np.ndarray) else (a @ Pk)[None, :],
                               "hyperplane")
        cons.append(a @ xk + b + m * s <= 0)
    program.add("hyperplane", cons)


def build_tube_cc(program: ConvexProgram, k: int, tube: Tube, budget: RiskBudget) -> None:
    H = np.asarray(tube.H, dtype=float)
    m = chi2_quantile_coeff(budget.eps_x, H.shape[0])
    s = program.norm_bound(H @ program.state_factor(k), "tube")
    dev = H @ (program.mean(k) - tube.reference[k])
    program.add("tube", [cp.norm(dev, 2) + m * s <= program.bound(tube.d_max)])


def build_control_mag_cc(program: ConvexProgram, k: int, u_max: float, budget: RiskBudget) -> None:
    if k not in program.K:
        return
    m = chi2_quantile_coeff(budget.eps_u, program.blocks.n_u)
    tau = program.norm_bound(program.control_factor(k), "control_magnitude", key=("Pu", k))
    program.add("control_magnitude", [cp.norm(program.ubar[k], 2) + m * tau <= program.bound(u_max)])


def build_control_rate_cc(program: ConvexProgram, k: int, du_max: float, budget: RiskBudget) -> None:
    F = program.rate_factor(k)
    if F is None:
        return
    m = chi2_quantile_coeff(budget.eps_u, program.blocks.n_u)
    s = program.norm_bound(F, "control_rate")
    du = program.u_mean(k + 1) - program.u_mean(k)
    program.add("control_rate", [cp.norm(du, 2) + m * s <= program.bound(du_max)])


def terminal_margin_matrix(schedule: FilterSchedule, P_f: np.ndarray) -> np.ndarray:
    """(P_f - Ptilde_N)^-1/2, raising when the filter floor alone exceeds the target."""
    M = symmetrize(np.asarray(P_f, dtype=float) - schedule.P_plus[-1])
    lam, V = np.linalg.eigh(M)
    if lam[0] <= 0:
        raise InfeasibleTerminalCovariance("infeasible terminal covariance: filter floor exceeds target")
    return (V / np.sqrt(lam)) @ V.T


def build_terminal(program: ConvexProgram, x_f: np.ndarray, P_f: Optional[np.ndarray]) -> None:
    N = program.blocks.N
    mean = program.mean(N)
    if isinstance(mean, np.ndarray):  # no maneuver can move the terminal mean
        mean = cp.Constant(mean)
    program.add("terminal_mean", [mean == np.asarray(x_f, dtype=float)])
    if P_f is None:
        return
    W = terminal_margin_matrix(program.schedule, P_f)
    s = program.norm_bound(W @ program.dispersion_factor(N), "terminal_covariance")
    program.add("terminal_covariance", [s <= program.bound(1.0)])


def build_stc(program: ConvexProgram, k: int, xbar_ref_k: np.ndarray, cone: ApproachCone,
              eps_x: float, weight: float):
    """Relaxed state-triggered approach-cone constraint at node k; returns its slack."""
    zeta = cp.Variable(nonneg=True, name=f"zeta_{k}")
    program.zeta[k] = zeta
    program.penalty_terms.append(weight * zeta)
    gamma = cone.weight(xbar_ref_k)
    if gamma == 0.0:
        return zeta
    AH = cone.A_cone @ cone.H_r
    bH = cone.b_cone @ cone.H_r
    m_chi = chi2_quantile_coeff(eps_x / 2.0, 2)
    m_n = gaussian_quantile_coeff(eps_x / 2.0)
    xk = program.mean(k)
    Pk = program.state_factor(k)
    s_cov = program.norm_bound(AH @ Pk, "stc")
    s_lin = program.norm_bound(cp.reshape(bH @ Pk, (1, -1), order="F") if not isinstance(Pk, np.ndarray)
                               else (bH @ Pk)[None, :], "stc")
    c_stc = cp.norm(AH @ xk, 2) - bH @ xk + m_chi * s_cov + m_n * s_lin
    program.add("stc", [gamma * c_stc <= zeta])
    return zeta


# -- numeric evaluation -----------------------------------------------------------


@dataclass
class SurrogateReport:
    """Per-family surrogate margins (bound minus left-hand side, >= 0 when met)."""

    margins: Dict[str, np.ndarray] = field(default_factory=dict)
    scales: Dict[str, float] = field(default_factory=dict)

    def worst(self) -> Dict[str, float]:
        return {k: float(np.min(v)) if len(v) else float("inf") for k, v in self.margins.items()}

    def feasible(self, rtol: float = 1e-6) -> bool:
        return all(float(np.min(v)) >= -rtol * self.scales.get(k, 1.0)
                   for k, v in self.margins.items() if len(v))


def _spec(M: np.ndarray) -> float:
    M = np.atleast_2d(M)
    return float(np.linalg.norm(M, 2)) if M.size else 0.0


def evaluate_cost(blocks: BlockOperators, policy: Policy, p: float, control_type=ControlType.IMPULSIVE,
                  dt: Optional[Sequence[float]] = None) -> float:
    """J_ub of a fixed policy using exact spectral norms."""
    m = chi2_quantile_coeff(1.0 - p, blocks.n_u)
    Kb = policy.K_block()
    total = 0.0
    for k in range(blocks.N):
        if not policy.maneuver_mask[k]:
            continue
        _, _, Pu = sqrt_covariances(blocks, Kb, k)
        term = np.linalg.norm(policy.ubar[k]) + m * _spec(Pu)
        total += term * (dt[k] if ControlType(control_type) is ControlType.ZOH else 1.0)
    return float(total)


def evaluate_constraints(blocks: BlockOperators, schedule: FilterSchedule, policy: Policy,
                         xbar0: np.ndarray, cs: ConstraintSet, budget: RiskBudget,
                         stc_reference: Optional[np.ndarray] = None) -> SurrogateReport:
    """Recompute every surrogate constraint for ``policy``.

    ``stc_reference`` (N+1, n_x) holds the means that decide which approach-cone
    constraints are triggered; margins are reported for triggered nodes only.
    """
    N, nx, nu = blocks.N, blocks.n_x, blocks.n_u
    Kb = policy.K_block()
    X = state_mean(blocks, xbar0, policy.U).reshape(N + 1, nx)
    facs = [sqrt_covariances(blocks, Kb, k) for k in range(N + 1)]
    rep = SurrogateReport()

    if cs.u_max is not None:
        m = chi2_quantile_coeff(budget.eps_u, nu)
        rep.margins["control_magnitude"] = np.array([
            cs.u_max - (np.linalg.norm(policy.ubar[k]) + m * _spec(facs[k][2]))
            for k in range(N) if policy.maneuver_mask[k]])
        rep.scales["control_magnitude"] = cs.u_max
    if cs.du_max is not None:
        m = chi2_quantile_coeff(budget.eps_u, nu)
        KS = Kb @ blocks.S_sqrt
        vals = []
        for k in range(N - 1):
            dF = KS[blocks.su(k + 1)] - KS[blocks.su(k)]
            vals.append(cs.du_max - (np.linalg.norm(policy.ubar[k + 1] - policy.ubar[k]) + m * _spec(dF)))
        rep.margins["control_rate"] = np.array(vals)
        rep.scales["control_rate"] = cs.du_max
    if cs.hyperplanes:
        eps = budget.allocation(len(cs.hyperplanes))
        nodes = range(N + 1) if cs.hyperplane_nodes is None else cs.hyperplane_nodes
        vals = []
        for k in nodes:
            for (a, b), e in zip(cs.hyperplanes, eps):
                a = np.asarray(a, dtype=float)
                vals.append(-(a @ X[k] + b + _strict_gaussian(e) * np.linalg.norm(a @ facs[k][1])))
        rep.margins["hyperplane"] = np.array(vals)
        rep.scales["hyperplane"] = max(1.0, float(np.max(np.abs(X))))
    if cs.tube is not None:
        H = np.asarray(cs.tube.H, dtype=float)
        m = chi2_quantile_coeff(budget.eps_x, H.shape[0])
        nodes = range(N + 1) if cs.tube.nodes is None else cs.tube.nodes
        rep.margins["tube"] = np.array([
            cs.tube.d_max - (np.linalg.norm(H @ (X[k] - cs.tube.reference[k])) + m * _spec(H @ facs[k][1]))
            for k in nodes])
        rep.scales["tube"] = cs.tube.d_max
    if cs.x_f is not None:
        err = np.abs(X[N] - cs.x_f)
        scale = max(1.0, float(np.max(np.abs(cs.x_f))))
        rep.margins["terminal_mean"] = -err
        rep.scales["terminal_mean"] = scale
    if cs.P_f is not None:
        W = terminal_margin_matrix(schedule, cs.P_f)
        rep.margins["terminal_covariance"] = np.array([1.0 - _spec(W @ facs[N][0])])
        rep.scales["terminal_covariance"] = 1.0
    if cs.cone is not None and stc_reference is not None:
        vals = []
        for k in range(N + 1):
            if cs.cone.weight(stc_reference[k]) > 0:
                vals.append(-stc_value(cs.cone, X[k], facs[k][1], budget.eps_x))
        rep.margins["stc"] = np.array(vals)
        rep.scales["stc"] = max(cs.cone.r_trigger, 1e-12)
    return rep


def stc_value(cone: ApproachCone, xbar: np.ndarray, P_sqrt: np.ndarray, eps_x: float) -> float:
    """c_stc for a given mean and covariance factor (<= 0 means the cone chance constraint holds)."""
    AH = cone.A_cone @ cone.H_r
    bH = cone.b_cone @ cone.H_r
    return float(np.linalg.norm(AH @ xbar) - bH @ xbar
                 + chi2_quantile_coeff(eps_x / 2.0, 2) * _spec(AH @ P_sqrt)
                 + gaussian_quantile_coeff(eps_x / 2.0) * np.linalg.norm(bH @ P_sqrt))
