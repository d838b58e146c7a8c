"""Simulate span-respecting algorithms on the hard instances and verify the
predicted support caps, suboptimality floors, and gradient-norm floors.

The simulator pins one concrete schedule for the (K, Q, T) budget accounting:
Q x-update events, each preceded by n_inner = K/Q - 1 inner y-steps, with T
Hessian-vector products inside every hypergradient; the mapping is logged into
the profile so a report is self-describing.  Support is tolerance-based: exact
zero chains hold in exact arithmetic, while the span-projection residual is
the authoritative criterion in floating point.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InfeasibleDimensionError, InvariantViolationError
from .hard_instances import (
    CscInstance,
    ScscInstance,
    scsc_dimension_is_feasible,
    scsc_feasible_dimension,
    scsc_gap_floor,
)
from .hypergrad import AgdConfig, HeavyBallConfig, heavy_ball_solve
from .oracles import counted
from .solvers import l_phi_estimate

TOL_ACTIVE = 1e-10
TOL_SUPPORT = 1e-10
TOL_SPAN_RESIDUAL = 1e-8

SIMULATOR_ALGORITHMS = ("baseline_aid_gd", "accbio", "accbio_bg")


def active_index(v: np.ndarray, tol: float = TOL_ACTIVE) -> int:
    """Largest 1-based index whose magnitude exceeds tol * ||v||_inf (0 if none)."""
    peak = float(np.max(np.abs(v))) if v.size else 0.0
    if peak == 0.0:
        return 0
    idx = np.flatnonzero(np.abs(v) > tol * peak)
    return int(idx[-1]) + 1 if idx.size else 0


def support_cap(kind: str, K: int, Q: int, T: int) -> int:
    """Predicted max support index of x for the given budgets."""
    if kind == "scsc":
        return K + Q * T + Q + 2
    if kind == "csc":
        return K + Q * T - Q + 3
    raise ValueError(f"unknown instance kind {kind!r}")


@dataclass
class SupportProfile:
    """Per-event support observations for one simulated run."""

    budgets: dict
    tol_active: float = TOL_ACTIVE
    x_support: list[int] = field(default_factory=list)  # cumulative max per x-update
    y_support: list[int] = field(default_factory=list)  # cumulative max per y-step
    x_support_raw: list[int] = field(default_factory=list)
    y_support_raw: list[int] = field(default_factory=list)
    x_iterates: list[np.ndarray] = field(default_factory=list)
    final_x: np.ndarray | None = None
    mapping: dict = field(default_factory=dict)

    def observe_x(self, x: np.ndarray):
        raw = active_index(x, self.tol_active)
        self.x_support_raw.append(raw)
        prev = self.x_support[-1] if self.x_support else 0
        self.x_support.append(max(prev, raw))
        self.x_iterates.append(x.copy())

    def observe_y(self, y: np.ndarray):
        raw = active_index(y, self.tol_active)
        self.y_support_raw.append(raw)
        prev = self.y_support[-1] if self.y_support else 0
        self.y_support.append(max(prev, raw))

    @property
    def max_x_index(self) -> int:
        return self.x_support[-1] if self.x_support else 0


def _check_budgets(instance, K: int, Q: int, T: int) -> int:
    if Q < 1 or T < 1 or K < 2 * Q:
        raise InvariantViolationError("budgets need Q >= 1, T >= 1, K >= 2Q")
    if K % Q != 0:
        raise InvariantViolationError("K must be divisible by Q (uniform schedule)")
    n_inner = K // Q - 1
    M = support_cap(instance.kind, K, Q, T)
    if instance.kind == "scsc":
        if not scsc_dimension_is_feasible(instance, M):
            required = scsc_feasible_dimension(
                M, instance.r, instance.lam_coef, instance.tau_coef
            )
            raise InfeasibleDimensionError(
                f"dimension {instance.d} infeasible for budgets (K={K}, Q={Q}, T={T})",
                required_dim=required,
            )
    else:
        if M > instance.d - 3:
            raise InfeasibleDimensionError(
                f"budgets imply support cap {M} > d-3 = {instance.d - 3}",
                required_dim=M + 3,
            )
    return n_inner


class SpanQuerySurface:
    """The five counted queries and nothing else.

    Custom scripts receive this facade so adversarial members of the
    algorithm class cannot reach the verification-only exact surface.
    """

    def __init__(self, oracle):
        self.grad_x_f = oracle.grad_x_f
        self.grad_y_f = oracle.grad_y_f
        self.grad_y_g = oracle.grad_y_g
        self.hess_y_g_vec = oracle.hess_y_g_vec
        self.jac_xy_g_vec = oracle.jac_xy_g_vec


def simulate_on_instance(
    instance: ScscInstance | CscInstance,
    algorithm,
    budgets: dict,
    tau_cost: float = 2.0,
) -> tuple[np.ndarray, SupportProfile]:
    """Run a span-respecting algorithm under (K, Q, T) budgets and profile it.

    `algorithm` is one of SIMULATOR_ALGORITHMS or a callable receiving the
    counted query surface and returning the final x (for adversarial scripts).
    """
    K, Q, T = budgets["K"], budgets["Q"], budgets["T"]
    n_inner = _check_budgets(instance, K, Q, T)
    oracle = instance.oracle
    metered, counters = counted(oracle, tau_cost)
    profile = SupportProfile(budgets={"K": K, "Q": Q, "T": T})
    profile.mapping = {
        "n_inner_per_update": n_inner,
        "iteration_accounting": "K = Q * (n_inner + 1) update events",
        "hessian_vector_per_hypergradient": T,
        "algorithm": algorithm if isinstance(algorithm, str) else "custom",
    }

    d = instance.d
    if callable(algorithm) and not isinstance(algorithm, str):
        x_final = algorithm(SpanQuerySurface(metered), d, budgets)
        profile.observe_x(x_final)
        profile.final_x = x_final.copy()
        profile.mapping["counters"] = vars(counters.snapshot())
        return x_final, profile

    if algorithm not in SIMULATOR_ALGORITHMS:
        raise ValueError(f"unknown simulator algorithm {algorithm!r}")

    constants = instance.constants
    l_phi = l_phi_estimate(constants, "quadratic-g")
    agd = AgdConfig.from_constants(constants, n_inner)
    hb = HeavyBallConfig.from_constants(constants, T)

    x = np.zeros(d)
    z = np.zeros(d)
    y = np.zeros(d)
    profile.observe_x(x)
    if algorithm == "accbio":
        mu_x = max(constants.mu_x, 1e-12)
        rk = math.sqrt(l_phi / mu_x)
        momentum = (rk - 1.0) / (rk + 1.0)
    if algorithm == "accbio_bg":
        alpha = 1.0 / (2.0 * l_phi)
        mu_x = max(constants.mu_x, 1e-12)
        s = math.sqrt(alpha * mu_x)
        eta, tau_m, beta_m = s / (s + 2.0), s / 2.0, math.sqrt(alpha / mu_x)

    for m in range(Q):
        x_query = x
        if algorithm == "accbio_bg":
            x_query = eta * x + (1.0 - eta) * z
        y_seq_start = np.zeros(d) if algorithm == "accbio" else y
        # inner loop is unrolled here so every y-step is observed
        s_vec = y_seq_start
        y_prev = y_seq_start
        y_cur = y_seq_start
        for _ in range(n_inner):
            y_cur = s_vec - agd.step * metered.grad_y_g(x_query, s_vec)
            s_vec = agd.extrapolation * y_cur - agd.momentum * y_prev
            y_prev = y_cur
            profile.observe_y(y_cur)
        y = y_cur
        rhs = metered.grad_y_f(x_query, y)
        v = heavy_ball_solve(lambda u: metered.hess_y_g_vec(x_query, y, u), rhs, hb)
        g = metered.grad_x_f(x_query, y) - metered.jac_xy_g_vec(x_query, y, v)
        if algorithm == "baseline_aid_gd":
            x = x - (1.0 / l_phi) * g
        elif algorithm == "accbio":
            z_next = x_query - g / l_phi
            x = (1.0 + momentum) * z_next - momentum * z
            z = z_next
        else:
            x = tau_m * x_query + (1.0 - tau_m) * x - beta_m * g
            z = x_query - alpha * g
        profile.observe_x(x)

    profile.final_x = x.copy()
    profile.mapping["counters"] = vars(counters.snapshot())
    return x, profile


@dataclass
class LowerBoundReport:
    """Measured quantities and pass flags for one verification item."""

    instance_kind: str
    budgets: dict | None
    predicted_support_cap: int | None
    observed_max_index: int | None = None
    span_residual: float | None = None
    tol_support: float = TOL_SUPPORT
    tol_span: float = TOL_SPAN_RESIDUAL
    gap: float | None = None
    gap_floor: float | None = None
    grad_norm: float | None = None
    grad_floor: float | None = None
    checks: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def to_json(self) -> str:
        doc = {
            "instance_kind": self.instance_kind,
            "budgets": self.budgets,
            "predicted_support_cap": self.predicted_support_cap,
            "observed_max_index": self.observed_max_index,
            "span_residual": self.span_residual,
            "tol_support": self.tol_support,
            "tol_span": self.tol_span,
            "gap": self.gap,
            "gap_floor": self.gap_floor,
            "grad_norm": self.grad_norm,
            "grad_floor": self.grad_floor,
            "checks": self.checks,
            "passed": self.passed,
        }
        return json.dumps(doc, indent=2, sort_keys=True)


def span_basis(instance: ScscInstance | CscInstance, M: int) -> np.ndarray:
    """Columns Z^(2j) (Z b) for j = 0..M: the reachable x-subspace."""
    z = instance.z
    col = z.apply(instance.b)
    cols = [col]
    for _ in range(M):
        col = z.apply_power(col, 2)
        cols.append(col)
    return np.column_stack(cols)


def span_projection_residual(
    instance: ScscInstance | CscInstance, x: np.ndarray, M: int
) -> float:
    """Relative least-squares distance of x to the reachable subspace.

    Basis columns are normalized before projecting (their norms grow like
    4^j, which would otherwise swamp the least-squares problem), and the
    projector is built from the numerically significant singular directions.
    """
    norm = float(np.linalg.norm(x))
    if norm == 0.0:
        return 0.0
    basis = span_basis(instance, M)
    basis = basis / np.linalg.norm(basis, axis=0, keepdims=True)
    u, s, _ = np.linalg.svd(basis, full_matrices=False)
    rank = int(np.sum(s > s[0] * np.finfo(np.float64).eps * max(basis.shape)))
    u = u[:, :rank]
    return float(np.linalg.norm(x - u @ (u.T @ x))) / norm


def verify_support_cap(
    profile: SupportProfile, instance: ScscInstance | CscInstance
) -> LowerBoundReport:
    """Check every recorded x-iterate against the predicted support cap.

    The coordinate screen is tolerance-based; the span-projection residual of
    the final iterate is the authoritative criterion.
    """
    b = profile.budgets
    M = support_cap(instance.kind, b["K"], b["Q"], b["T"])
    report = LowerBoundReport(
        instance_kind=instance.kind, budgets=dict(b), predicted_support_cap=M
    )
    coords_ok = True
    observed = 0
    for x in profile.x_iterates:
        idx = active_index(x, TOL_SUPPORT)
        observed = max(observed, idx)
        peak = float(np.max(np.abs(x)))
        if peak > 0.0 and M < instance.d:
            tail = float(np.max(np.abs(x[M:])))
            coords_ok = coords_ok and tail <= TOL_SUPPORT * peak
    report.observed_max_index = observed
    report.checks["coordinates_within_cap"] = coords_ok and observed <= M
    if profile.final_x is not None:
        resid = span_projection_residual(instance, profile.final_x, M)
        report.span_residual = resid
        report.checks["span_projection"] = resid <= TOL_SPAN_RESIDUAL
    return report


def verify_gap_floor(
    instance: ScscInstance, x_final: np.ndarray, M: int
) -> LowerBoundReport:
    """Suboptimality of x_final must sit above the certified floor."""
    floor = scsc_gap_floor(instance, M, np.zeros(instance.d))
    gap = float(instance.oracle.phi(x_final) - instance.oracle.phi_star)
    report = LowerBoundReport(
        instance_kind="scsc",
        budgets=None,
        predicted_support_cap=M,
        gap=gap,
        gap_floor=floor,
    )
    report.checks["gap_above_floor"] = gap >= floor
    return report


def verify_grad_floor(
    instance: CscInstance, x_final: np.ndarray, M: int
) -> LowerBoundReport:
    """Gradient norm at x_final must sit above the instance's floor."""
    if M > instance.d - 3:
        raise InvariantViolationError(f"needs M <= d-3, got M={M}, d={instance.d}")
    grad_norm = float(np.linalg.norm(instance.oracle.grad_phi(x_final)))
    report = LowerBoundReport(
        instance_kind="csc",
        budgets=None,
        predicted_support_cap=M,
        grad_norm=grad_norm,
        grad_floor=instance.grad_floor,
    )
    report.checks["grad_above_floor"] = grad_norm >= instance.grad_floor
    return report
