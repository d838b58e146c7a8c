"""Hypergradient machinery: accelerated inner solver, heavy-ball linear solver,
and the two hypergradient estimators (implicit-differentiation and unrolled).

Budget accounting is exact and is part of the contract: an implicit-style
estimate with budgets (N, M) consumes N+2 gradients, M Hessian-vector products
and 1 Jacobian-vector product; an unrolled estimate with N inner steps consumes
N+2 gradients, N Hessian-vector and N Jacobian-vector products.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DivergenceError, InvariantViolationError
from .oracles import BilevelOracle, SmoothnessConstants


@dataclass(frozen=True)
class AgdConfig:
    """Accelerated inner-descent budget and step constants."""

    N: int
    step: float
    kappa_y: float

    def __post_init__(self):
        if self.N < 1:
            raise InvariantViolationError("AGD step count must be >= 1")
        if self.kappa_y < 1:
            raise InvariantViolationError("kappa_y must be >= 1")
        if self.step <= 0:
            raise InvariantViolationError("AGD step must be positive")

    @classmethod
    def from_constants(cls, constants: SmoothnessConstants, N: int) -> "AgdConfig":
        return cls(N=N, step=1.0 / constants.Ltil_y, kappa_y=constants.kappa_y)

    @property
    def momentum(self) -> float:
        rk = np.sqrt(self.kappa_y)
        return (rk - 1.0) / (rk + 1.0)

    @property
    def extrapolation(self) -> float:
        rk = np.sqrt(self.kappa_y)
        return 2.0 * rk / (rk + 1.0)


@dataclass(frozen=True)
class HeavyBallConfig:
    """Heavy-ball budget and the step/momentum pair tuned to [mu, L]."""

    M: int
    hb_step: float
    hb_momentum: float

    def __post_init__(self):
        if self.M < 1:
            raise InvariantViolationError("heavy-ball step count must be >= 1")
        if self.hb_step <= 0:
            raise InvariantViolationError("heavy-ball step must be positive")
        if not (0.0 <= self.hb_momentum < 1.0):
            raise InvariantViolationError("heavy-ball momentum must be in [0, 1)")

    @classmethod
    def from_bounds(cls, mu: float, L: float, M: int) -> "HeavyBallConfig":
        step = 4.0 / (np.sqrt(L) + np.sqrt(mu)) ** 2
        momentum = max(
            (1.0 - np.sqrt(step * mu)) ** 2, (1.0 - np.sqrt(step * L)) ** 2
        )
        return cls(M=M, hb_step=step, hb_momentum=momentum)

    @classmethod
    def from_constants(cls, constants: SmoothnessConstants, M: int) -> "HeavyBallConfig":
        return cls.from_bounds(constants.mu_y, constants.Ltil_y, M)


@dataclass
class HypergradientEstimate:
    """A hypergradient estimate plus optional verification metadata."""

    G: np.ndarray
    inner_residual: float | None = None
    hb_iterations: int = 0
    error_bound: float | None = None

    def __post_init__(self):
        if self.error_bound is not None and self.error_bound < 0:
            raise InvariantViolationError("error bound must be nonnegative")


def agd_inner(
    oracle: BilevelOracle,
    x: np.ndarray,
    y0: np.ndarray,
    cfg: AgdConfig,
    stop_when: Callable[[np.ndarray], bool] | None = None,
) -> np.ndarray:
    """Run N accelerated descent steps on g(x, .) from y0.

    `stop_when` (if given) is checked on each new iterate and ends the loop
    early; it must not query counted oracle surfaces.
    """
    c_extra = cfg.extrapolation
    c_mom = cfg.momentum
    y_prev = y0
    s = y0
    y = y0
    for t in range(1, cfg.N + 1):
        y = s - cfg.step * oracle.grad_y_g(x, s)
        if not np.all(np.isfinite(y)):
            raise DivergenceError("inner accelerated descent diverged", step=t, last_good=y_prev)
        s = c_extra * y - c_mom * y_prev
        y_prev = y
        if stop_when is not None and stop_when(y):
            break
    return y


def heavy_ball_solve(
    hess_apply: Callable[[np.ndarray], np.ndarray],
    rhs: np.ndarray,
    cfg: HeavyBallConfig,
) -> np.ndarray:
    """Approximate H^-1 rhs with M heavy-ball updates from v0 = v1 = 0.

    Each update costs exactly one Hessian-vector product.
    """
    v_prev = np.zeros_like(rhs)
    v = np.zeros_like(rhs)
    for t in range(1, cfg.M + 1):
        v_next = v - cfg.hb_step * (hess_apply(v) - rhs) + cfg.hb_momentum * (v - v_prev)
        if not np.all(np.isfinite(v_next)):
            raise DivergenceError("heavy-ball iteration diverged", step=t, last_good=v)
        v_prev, v = v, v_next
    return v


def hypergradient_error_bound(
    constants: SmoothnessConstants,
    N: int,
    M: int,
    dist_to_xstar: float,
    norm_y_star_at_xstar: float,
    norm_grad_y_f_at_xstar: float,
) -> float:
    """Upper bound on ||G - grad phi(x)|| for the implicit estimator at budgets (N, M).

    Valid for inner initialization y0 = 0; the two terms are the inner-descent
    residual amplified through the linear-system solve and the heavy-ball
    truncation error.
    """
    c = constants
    m_k = norm_y_star_at_xstar + (c.Ltil_xy / c.mu_y) * dist_to_xstar
    n_k = norm_grad_y_f_at_xstar + (c.L_xy + c.L_y * c.Ltil_xy / c.mu_y) * dist_to_xstar
    rho = (np.sqrt(c.kappa_y) - 1.0) / (np.sqrt(c.kappa_y) + 1.0)
    agd_coef = c.L_y + 2.0 * c.Ltil_xy * c.L_y / c.mu_y + (
        c.rho_xy / c.mu_y + c.Ltil_xy * c.rho_yy / c.mu_y**2
    ) * n_k
    agd_term = (
        np.sqrt((c.Ltil_y + c.mu_y) / c.mu_y)
        * agd_coef
        * m_k
        * np.exp(-N / (2.0 * np.sqrt(c.kappa_y)))
    )
    hb_term = (c.Ltil_xy / c.mu_y) * rho**M * n_k
    return float(agd_term + hb_term)


def aid_estimate(
    oracle: BilevelOracle,
    x: np.ndarray,
    y0: np.ndarray,
    agd: AgdConfig,
    hb: HeavyBallConfig,
) -> HypergradientEstimate:
    """Implicit-differentiation hypergradient estimate.

    Runs the accelerated inner solver, then heavy-ball on the inner-Hessian
    linear system, then a single Jacobian-vector product.
    """
    y_n = agd_inner(oracle, x, y0, agd)
    rhs = oracle.grad_y_f(x, y_n)
    v = heavy_ball_solve(lambda u: oracle.hess_y_g_vec(x, y_n, u), rhs, hb)
    g = oracle.grad_x_f(x, y_n) - oracle.jac_xy_g_vec(x, y_n, v)

    inner_residual = None
    error_bound = None
    if oracle.has_exact_surface:
        inner_residual = float(np.linalg.norm(y_n - oracle.y_star(x)))
        if oracle.has_phi_star and np.max(np.abs(y0)) == 0.0:
            error_bound = hypergradient_error_bound(
                oracle.constants,
                agd.N,
                hb.M,
                dist_to_xstar=float(np.linalg.norm(x - oracle.x_star)),
                norm_y_star_at_xstar=oracle.norm_y_star_at_xstar,
                norm_grad_y_f_at_xstar=oracle.norm_grad_y_f_at_xstar,
            )
    return HypergradientEstimate(
        G=g, inner_residual=inner_residual, hb_iterations=hb.M, error_bound=error_bound
    )


def itd_estimate(
    oracle: BilevelOracle,
    x: np.ndarray,
    y0: np.ndarray,
    N: int,
    eta: float,
) -> HypergradientEstimate:
    """Unrolled-differentiation hypergradient estimate.

    Runs N plain gradient steps on g(x, .), then differentiates through the
    unrolled iteration by the reverse recursion, accumulating one
    Jacobian-vector product per inner step.
    """
    if N < 1:
        raise InvariantViolationError("unrolled estimator needs N >= 1")
    if not (0.0 < eta <= 1.0 / oracle.constants.Ltil_y + 1e-15):
        raise InvariantViolationError("eta must lie in (0, 1/Ltil_y]")
    ys = [y0]
    y = y0
    for t in range(1, N + 1):
        y = y - eta * oracle.grad_y_g(x, y)
        if not np.all(np.isfinite(y)):
            raise DivergenceError("inner gradient descent diverged", step=t, last_good=ys[-1])
        ys.append(y)

    u = oracle.grad_y_f(x, ys[N])
    total = np.zeros(oracle.p)
    for t in range(N - 1, -1, -1):
        total += oracle.jac_xy_g_vec(x, ys[t], u)
        u = u - eta * oracle.hess_y_g_vec(x, ys[t], u)
    g = oracle.grad_x_f(x, ys[N]) - eta * total

    inner_residual = None
    if oracle.has_exact_surface:
        inner_residual = float(np.linalg.norm(ys[N] - oracle.y_star(x)))
    return HypergradientEstimate(G=g, inner_residual=inner_residual, hb_iterations=0)


def tail_log_slope(
    errors: np.ndarray, window: int = 50, rel_floor: float = 1e-12
) -> float:
    """Least-squares slope of log(errors) over the last `window` samples that
    sit above rel_floor * max(errors).

    Rate checks for momentum methods are asymptotic: early iterations may
    oscillate and late iterations sink below the floating-point noise floor,
    so the fit window is the tail of the reliably measurable regime.
    """
    errors = np.asarray(errors, dtype=np.float64)
    floor = rel_floor * float(np.max(errors))
    usable = np.flatnonzero(errors > floor)
    if usable.size < 2:
        raise ValueError("not enough samples above the noise floor for a slope fit")
    win = usable[-window:]
    slope = np.polyfit(win.astype(np.float64), np.log(errors[win]), 1)[0]
    return float(slope)
