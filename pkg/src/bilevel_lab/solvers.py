"""Outer-loop algorithms, smoothness-constant calculators, and trace plumbing.

Three solvers share the hypergradient machinery: a momentum-accelerated method
with cold inner starts, its warm-started variant for bounded outer gradients,
and a plain gradient-descent baseline.  Every run owns a private counter
handle; traces snapshot the counters per outer iteration so complexity-vs-
accuracy curves fall out of the records directly.
"""

from __future__ import annotations

import dataclasses
import io
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .errors import CapabilityError, DivergenceError, InvariantViolationError
from .hypergrad import AgdConfig, HeavyBallConfig, agd_inner, aid_estimate, heavy_ball_solve
from .oracles import (
    BilevelOracle,
    OracleCounters,
    QuadraticBilevelOracle,
    QuadraticOuter,
    SmoothnessConstants,
    counted,
)

GAP_BLOWUP_FACTOR = 1e6


@dataclass(frozen=True)
class AccBiOConfig:
    """Budgets and constants for the accelerated solver with cold inner starts."""

    K: int
    L_phi: float
    mu_x: float
    agd: AgdConfig
    hb: HeavyBallConfig
    eps: float

    def __post_init__(self):
        if self.K < 1:
            raise InvariantViolationError("K must be >= 1")
        if not (0 < self.mu_x <= self.L_phi):
            raise InvariantViolationError("needs L_phi >= mu_x > 0")
        if self.eps <= 0:
            raise InvariantViolationError("eps must be positive")

    @property
    def kappa_x(self) -> float:
        return self.L_phi / self.mu_x

    @property
    def momentum(self) -> float:
        rk = np.sqrt(self.kappa_x)
        return (rk - 1.0) / (rk + 1.0)


@dataclass(frozen=True)
class AccBiOBGConfig:
    """Budgets and constants for the warm-started bounded-gradient solver."""

    K: int
    alpha: float
    mu_x: float
    agd: AgdConfig
    hb: HeavyBallConfig
    U: float | None = None
    warm_start: bool = True
    inner_stop_resid: float | None = None

    def __post_init__(self):
        if self.K < 1:
            raise InvariantViolationError("K must be >= 1")
        if self.alpha <= 0 or self.mu_x <= 0:
            raise InvariantViolationError("alpha and mu_x must be positive")
        if self.alpha * self.mu_x > 1.0:
            raise InvariantViolationError("needs alpha * mu_x <= 1")

    @property
    def eta_k(self) -> float:
        s = np.sqrt(self.alpha * self.mu_x)
        return s / (s + 2.0)

    @property
    def tau_k(self) -> float:
        return np.sqrt(self.alpha * self.mu_x) / 2.0

    @property
    def beta_k(self) -> float:
        return np.sqrt(self.alpha / self.mu_x)


@dataclass
class TraceRecord:
    """One per-outer-iteration measurement row."""

    k: int
    phi_gap: float | None
    grad_norm: float | None
    hypergrad_error: float | None
    n_G: int
    n_J: int
    n_H: int
    complexity: float


@dataclass
class RunTrace:
    """Per-iteration records plus terminal status for one solver run."""

    algorithm: str
    records: list[TraceRecord] = field(default_factory=list)
    status: str = "completed"
    grad_norm_kind: str = "exact"
    counters: OracleCounters | None = None
    meta: dict = field(default_factory=dict)
    final_point: np.ndarray | None = None

    @property
    def final(self) -> TraceRecord:
        return self.records[-1]

    def first_crossing(self, eps: float) -> TraceRecord | None:
        """First record whose suboptimality gap is <= eps, if any."""
        for rec in self.records:
            if rec.phi_gap is not None and rec.phi_gap <= eps:
                return rec
        return None


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def trace_to_csv(trace: RunTrace) -> str:
    """Serialize a trace; absent quantities emit empty fields."""
    out = io.StringIO()
    out.write("k,phi_gap,grad_norm,hypergrad_error,n_G,n_J,n_H,complexity\n")
    for rec in trace.records:
        out.write(
            ",".join(
                [
                    str(rec.k),
                    _fmt(rec.phi_gap),
                    _fmt(rec.grad_norm),
                    _fmt(rec.hypergrad_error),
                    str(rec.n_G),
                    str(rec.n_J),
                    str(rec.n_H),
                    _fmt(rec.complexity),
                ]
            )
            + "\n"
        )
    return out.getvalue()


class _TraceBuilder:
    """Shared measurement/recording logic for all solver loops."""

    def __init__(self, oracle: BilevelOracle, counters: OracleCounters, algorithm: str):
        self.oracle = oracle
        self.counters = counters
        self.exact_gap = oracle.has_phi and oracle.has_phi_star
        self.exact_grad = oracle.has_exact_surface
        self.trace = RunTrace(
            algorithm=algorithm,
            grad_norm_kind="exact" if self.exact_grad else "estimate",
            counters=counters,
        )
        self.initial_gap: float | None = None

    def record(self, k: int, point: np.ndarray, G: np.ndarray | None, x_eval: np.ndarray | None):
        phi_gap = None
        if self.exact_gap:
            phi_gap = float(self.oracle.phi(point) - self.oracle.phi_star)
        if self.exact_grad:
            grad_norm = float(np.linalg.norm(self.oracle.grad_phi(point)))
        else:
            grad_norm = None if G is None else float(np.linalg.norm(G))
        hypergrad_error = None
        if self.exact_grad and G is not None and x_eval is not None:
            hypergrad_error = float(np.linalg.norm(G - self.oracle.grad_phi(x_eval)))
        self.trace.records.append(
            TraceRecord(
                k=k,
                phi_gap=phi_gap,
                grad_norm=grad_norm,
                hypergrad_error=hypergrad_error,
                n_G=self.counters.n_G,
                n_J=self.counters.n_J,
                n_H=self.counters.n_H,
                complexity=self.counters.complexity(),
            )
        )
        if self.initial_gap is None:
            self.initial_gap = phi_gap
        self._check_divergence(k, point, phi_gap)

    def _check_divergence(self, k: int, point: np.ndarray, phi_gap: float | None):
        blown_gap = (
            phi_gap is not None
            and self.initial_gap is not None
            and phi_gap > GAP_BLOWUP_FACTOR * max(self.initial_gap, 1e-300)
        )
        if not np.all(np.isfinite(point)) or blown_gap:
            self.trace.status = "diverged"
            raise DivergenceError(
                f"{self.trace.algorithm} diverged", step=k, last_good=point, trace=self.trace
            )


def accbio(oracle: BilevelOracle, cfg: AccBiOConfig, tau_cost: float = 2.0) -> RunTrace:
    """Accelerated outer loop with cold inner starts.

    Per iteration: fresh inner accelerated descent from y = 0, an implicit
    hypergradient estimate, the smoothness-step z-update, and the constant-
    momentum x-update.
    """
    metered, counters = counted(oracle, tau_cost)
    builder = _TraceBuilder(metered, counters, "accbio")
    p, q = oracle.p, oracle.q
    z = np.zeros(p)
    x = np.zeros(p)
    builder.record(0, z, None, None)
    m = cfg.momentum
    for k in range(1, cfg.K + 1):
        est = aid_estimate(metered, x, np.zeros(q), cfg.agd, cfg.hb)
        z_next = x - est.G / cfg.L_phi
        x_eval = x
        x = (1.0 + m) * z_next - m * z
        z = z_next
        builder.record(k, z, est.G, x_eval)
    builder.trace.final_point = z.copy()
    builder.trace.meta.update(
        K=cfg.K, L_phi=cfg.L_phi, kappa_x=cfg.kappa_x, N=cfg.agd.N, M=cfg.hb.M, eps=cfg.eps
    )
    return builder.trace


def accbio_bg(oracle: BilevelOracle, cfg: AccBiOBGConfig, tau_cost: float = 2.0) -> RunTrace:
    """Warm-started accelerated outer loop for oracles with bounded outer gradient."""
    if cfg.U is None and oracle.gradient_bound is None:
        raise CapabilityError(
            "the warm-started solver requires a declared outer-gradient bound U"
        )
    metered, counters = counted(oracle, tau_cost)
    builder = _TraceBuilder(metered, counters, "accbio_bg")
    p, q = oracle.p, oracle.q
    z = np.zeros(p)
    x = np.zeros(p)
    y_carry = np.zeros(q)
    builder.record(0, z, None, None)
    eta, tau, beta = cfg.eta_k, cfg.tau_k, cfg.beta_k
    for k in range(1, cfg.K + 1):
        x_tilde = eta * x + (1.0 - eta) * z
        y0 = y_carry if cfg.warm_start else np.zeros(q)
        stop_when = None
        if cfg.inner_stop_resid is not None and metered.has_exact_surface:
            target = metered.y_star(x_tilde)
            resid = cfg.inner_stop_resid
            stop_when = lambda y, t=target, r=resid: float(np.linalg.norm(y - t)) <= r
        y_n = agd_inner(metered, x_tilde, y0, cfg.agd, stop_when=stop_when)
        rhs = metered.grad_y_f(x_tilde, y_n)
        v = heavy_ball_solve(lambda u: metered.hess_y_g_vec(x_tilde, y_n, u), rhs, cfg.hb)
        g_k = metered.grad_x_f(x_tilde, y_n) - metered.jac_xy_g_vec(x_tilde, y_n, v)
        x = tau * x_tilde + (1.0 - tau) * x - beta * g_k
        z = x_tilde - cfg.alpha * g_k
        y_carry = y_n
        builder.record(k, z, g_k, x_tilde)
    builder.trace.final_point = z.copy()
    builder.trace.meta.update(
        K=cfg.K,
        alpha=cfg.alpha,
        eta_k=eta,
        tau_k=tau,
        beta_k=beta,
        N=cfg.agd.N,
        M=cfg.hb.M,
        U=cfg.U if cfg.U is not None else oracle.gradient_bound,
        warm_start=cfg.warm_start,
    )
    return builder.trace


def baseline_aid_gd(
    oracle: BilevelOracle,
    stepsize: float,
    K: int,
    agd: AgdConfig,
    hb: HeavyBallConfig,
    tau_cost: float = 2.0,
) -> RunTrace:
    """Plain outer gradient descent on the implicit hypergradient estimate."""
    if stepsize <= 0:
        raise InvariantViolationError("stepsize must be positive")
    metered, counters = counted(oracle, tau_cost)
    builder = _TraceBuilder(metered, counters, "baseline_aid_gd")
    x = np.zeros(oracle.p)
    builder.record(0, x, None, None)
    for k in range(1, K + 1):
        est = aid_estimate(metered, x, np.zeros(oracle.q), agd, hb)
        x_eval = x
        x = x - stepsize * est.G
        builder.record(k, x, est.G, x_eval)
    builder.trace.final_point = x.copy()
    builder.trace.meta.update(K=K, stepsize=stepsize, N=agd.N, M=hb.M)
    return builder.trace


@dataclass(frozen=True)
class DeltaStarInputs:
    """Optimum-anchored quantities needed by the general smoothness formula."""

    norm_grad_y_f_star: float
    norm_x_star: float
    phi0_minus_phistar: float

    @classmethod
    def from_oracle(cls, oracle: QuadraticBilevelOracle) -> "DeltaStarInputs":
        zero = np.zeros(oracle.p)
        return cls(
            norm_grad_y_f_star=oracle.norm_grad_y_f_at_xstar,
            norm_x_star=float(np.linalg.norm(oracle.x_star)),
            phi0_minus_phistar=float(oracle.phi(zero) - oracle.phi_star),
        )


def l_phi_estimate(
    constants: SmoothnessConstants,
    regime: str,
    delta_star: DeltaStarInputs | None = None,
    U: float | None = None,
    eps: float | None = None,
) -> float:
    """Explicit smoothness constant of the outer objective for a given regime.

    `quadratic-g` needs nothing extra; `bounded-gradient` needs U;
    `general-scsc` needs the optimum-anchored DeltaStarInputs plus eps.
    """
    c = constants
    base = c.L_x + 2.0 * c.L_xy * c.Ltil_xy / c.mu_y + c.L_y * c.Ltil_xy**2 / c.mu_y**2
    if regime == "quadratic-g":
        return base
    curvature = (c.Ltil_xy * c.rho_yy / c.mu_y**2 + c.rho_xy / c.mu_y) * (
        1.0 + c.Ltil_xy / c.mu_y
    )
    if regime == "bounded-gradient":
        if U is None:
            raise CapabilityError("bounded-gradient regime requires the gradient bound U")
        return base + curvature * U
    if regime == "general-scsc":
        if delta_star is None or eps is None:
            raise CapabilityError(
                "general regime requires optimum-anchored inputs and a target eps"
            )
        if c.mu_x <= 0:
            raise CapabilityError("general regime requires mu_x > 0")
        radius = np.sqrt(
            (2.0 / c.mu_x) * delta_star.phi0_minus_phistar
            + delta_star.norm_x_star**2
            + eps / c.mu_x
        )
        n_star = delta_star.norm_grad_y_f_star + 3.0 * (
            c.L_xy + c.L_y * c.Ltil_xy / c.mu_y
        ) * radius
        return base + curvature * n_star
    raise ValueError(f"unknown regime {regime!r}")


def default_inner_budgets(
    constants: SmoothnessConstants, kappa_x: float, eps: float, c: float = 2.0
) -> tuple[int, int]:
    """Default (N, M) per outer iteration: ceil(c sqrt(kappa_y) log(1/eps_inner)).

    eps_inner ties the inner accuracy to the outer target with a safety margin
    that grows with the outer condition number; both budgets are
    user-overridable wherever they are consumed.
    """
    eps_inner = eps / (100.0 * np.sqrt(max(kappa_x, 1.0)))
    n = int(np.ceil(c * np.sqrt(constants.kappa_y) * np.log(1.0 / eps_inner)))
    n = max(n, 1)
    return n, n


def regularize_convex(oracle: BilevelOracle, eps: float, R: float) -> BilevelOracle:
    """Add an (eps / 2R) ||x||^2 ridge to the outer objective.

    The wrapped oracle is mu_x = eps/R strongly convex in x with L_x shifted
    by the same amount; the inner problem and its exact surface are untouched.
    """
    if eps <= 0 or R <= 0:
        raise InvariantViolationError("eps and R must be positive")
    ridge = eps / R
    new_constants = dataclasses.replace(
        oracle.constants, mu_x=ridge, L_x=oracle.constants.L_x + ridge
    )
    if isinstance(oracle, QuadraticBilevelOracle):
        outer = oracle.outer
        new_outer = QuadraticOuter(
            a_xx=linalg.shifted_scaled(outer.a_xx, 1.0, ridge),
            a_yy=outer.a_yy,
            a_xy=outer.a_xy,
            lin_x=outer.lin_x,
            lin_y=outer.lin_y,
        )
        return QuadraticBilevelOracle(
            oracle.h_op,
            oracle.j_op,
            oracle.b,
            new_outer,
            new_constants,
            gradient_bound=oracle.gradient_bound,
            validate_spectrum=False,
        )

    base_grad_x, base_phi = oracle._grad_x_f, oracle._phi
    return BilevelOracle(
        oracle.p,
        oracle.q,
        new_constants,
        grad_x_f=lambda x, y: base_grad_x(x, y) + ridge * x,
        grad_y_f=oracle._grad_y_f,
        grad_y_g=oracle._grad_y_g,
        hess_y_g_vec=oracle._hess_y_g_vec,
        jac_xy_g_vec=oracle._jac_xy_g_vec,
        hess_y_g_op=oracle.hess_y_g_op,
        y_star=oracle._y_star,
        phi=None if base_phi is None else (
            lambda x: base_phi(x) + 0.5 * ridge * float(x @ x)
        ),
        gradient_bound=oracle.gradient_bound,
    )
