"""Generic initial-value-problem drivers for the DLN family.

Two equivalent stepping paths are provided: the direct one-leg solve and the
refactorized path (pre-filter, backward-Euler stage, post-filter).  Problems
with a bilinear structure f(t, y) = L(t) y + B(w) y + g(t) get a semi-implicit
stage: the advecting slot w is frozen at the second-order extrapolation of the
broadcast state, so each step costs one linear solve.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from dln.coefficients import (
    OneLegCoefficients,
    StepPair,
    Theta,
    g_norm_sq,
    one_leg_coefficients,
    refactor_coefficients,
)

__all__ = [
    "SolverDiverged",
    "NonFiniteState",
    "StageSolveConfig",
    "StageInfo",
    "BilinearSplit",
    "IvpProblem",
    "StateWindow",
    "extrapolant",
    "dln_step_direct",
    "dln_step_refactorized",
    "integrate_fixed",
    "Trajectory",
    "midpoint_startup",
]

log = logging.getLogger(__name__)

RATIO_GUARD = (0.2, 1.5)


class SolverDiverged(RuntimeError):
    """Stage solve exceeded its iteration budget; the step should shrink."""


class NonFiniteState(RuntimeError):
    """A stage produced NaN or Inf entries."""


@dataclass
class StageSolveConfig:
    method: str = "newton"  # newton | fixed-point | linear-direct
    abs_tol: float = 1e-12
    rel_tol: float = 1e-10
    max_iters: int = 50

    def __post_init__(self) -> None:
        if self.method not in ("newton", "fixed-point", "linear-direct"):
            raise ValueError(f"unknown stage method {self.method!r}")
        if self.abs_tol <= 0 or self.rel_tol <= 0:
            raise ValueError("stage tolerances must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class StageInfo:
    iterations: int
    residual: float


@dataclass
class BilinearSplit:
    """Decomposition f(t, y) = linear(t) @ y + advect(w) @ y + forcing(t).

    advect(w) must be linear in its second slot (matrix built from the frozen
    slot w); it is the piece the semi-implicit stage extrapolates.
    """

    linear: Callable[[float], np.ndarray]
    advect: Callable[[np.ndarray], np.ndarray]
    forcing: Callable[[float], np.ndarray]

    def assemble(self, t: float, y: np.ndarray) -> np.ndarray:
        return (self.linear(t) + self.advect(y)) @ y + self.forcing(t)


@dataclass
class IvpProblem:
    dimension: int
    rhs: Callable[[float, np.ndarray], np.ndarray]
    jacobian: Optional[Callable[[float, np.ndarray], np.ndarray]] = None
    bilinear_split: Optional[BilinearSplit] = None
    exact_solution: Optional[Callable[[float], np.ndarray]] = None

    def check_split(self, ts: np.ndarray, rng: np.random.Generator, tol: float = 1e-12) -> float:
        """Largest re-assembly defect of the bilinear split at random probes."""
        if self.bilinear_split is None:
            return 0.0
        worst = 0.0
        for t in ts:
            y = rng.standard_normal(self.dimension)
            d = self.bilinear_split.assemble(float(t), y) - self.rhs(float(t), y)
            worst = max(worst, float(np.max(np.abs(d))))
        if worst > tol:
            raise ValueError(f"bilinear split disagrees with rhs by {worst:.3e}")
        return worst


class StateWindow:
    """Sliding pair (t_{n-1}, y_{n-1}), (t_n, y_n) with an optional deeper history."""

    def __init__(self, t_prev: float, y_prev: np.ndarray, t_curr: float, y_curr: np.ndarray):
        if not t_curr > t_prev:
            raise ValueError("times must be strictly increasing")
        y_prev = np.asarray(y_prev, dtype=float)
        y_curr = np.asarray(y_curr, dtype=float)
        if y_prev.shape != y_curr.shape:
            raise ValueError("states must share one shape")
        self.times = [t_prev, t_curr]
        self.states = [y_prev, y_curr]

    @property
    def t_prev(self) -> float:
        return self.times[-2]

    @property
    def t_curr(self) -> float:
        return self.times[-1]

    @property
    def y_prev(self) -> np.ndarray:
        return self.states[-2]

    @property
    def y_curr(self) -> np.ndarray:
        return self.states[-1]

    @property
    def k_last(self) -> float:
        return self.times[-1] - self.times[-2]

    def push(self, t: float, y: np.ndarray, keep: int = 4) -> None:
        if not t > self.t_curr:
            raise ValueError("times must be strictly increasing")
        self.times.append(t)
        self.states.append(np.asarray(y, dtype=float))
        del self.times[:-keep], self.states[:-keep]


def extrapolant(window: StateWindow, coeffs: OneLegCoefficients, ratio: float) -> np.ndarray:
    """Second-order extrapolation of the broadcast state from the last two values."""
    b2, b1, b0 = coeffs.beta[2], coeffs.beta[1], coeffs.beta[0]
    y_n, y_nm1 = window.y_curr, window.y_prev
    return b2 * ((1.0 + ratio) * y_n - ratio * y_nm1) + b1 * y_n + b0 * y_nm1


def _check_finite(y: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(y)):
        raise NonFiniteState("state contains NaN/Inf")
    return y


def _fd_jacobian(f: Callable, t: float, y: np.ndarray) -> np.ndarray:
    n = y.size
    J = np.empty((n, n))
    f0 = f(t, y)
    for j in range(n):
        h = 1e-7 * max(1.0, abs(y[j]))
        yp = y.copy()
        yp[j] += h
        J[:, j] = (f(t, yp) - f0) / h
    return J


def _solve_stage(
    residual: Callable[[np.ndarray], np.ndarray],
    jacobian: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    config: StageSolveConfig,
    fixed_point_map: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> tuple[np.ndarray, StageInfo]:
    """Drive residual(x) below abs_tol + rel_tol*|x| by Newton or fixed point."""
    x = x0.copy()
    for it in range(config.max_iters + 1):
        r = residual(x)
        _check_finite(r)
        rnorm = float(np.linalg.norm(r))
        if rnorm <= config.abs_tol + config.rel_tol * float(np.linalg.norm(x)):
            return _check_finite(x), StageInfo(iterations=it, residual=rnorm)
        if it == config.max_iters:
            break
        if config.method == "fixed-point" and fixed_point_map is not None:
            x = fixed_point_map(x)
        else:
            x = x - np.linalg.solve(jacobian(x), r)
        _check_finite(x)
    raise SolverDiverged(f"stage solve stalled at residual {rnorm:.3e} after {config.max_iters} iterations")


def _broadcast_time(window: StateWindow, coeffs: OneLegCoefficients, k_n: float) -> float:
    t_next = window.t_curr + k_n
    return float(coeffs.beta[2] * t_next + coeffs.beta[1] * window.t_curr + coeffs.beta[0] * window.t_prev)


def _semi_implicit_matrices(problem, window, coeffs, pair):
    """Frozen-slot operator and forcing of the stage at the broadcast time."""
    split = problem.bilinear_split
    t_beta = _broadcast_time(window, coeffs, pair.k_n)
    y_tilde = extrapolant(window, coeffs, pair.ratio)
    A = split.linear(t_beta) + split.advect(y_tilde)
    return t_beta, A, split.forcing(t_beta)


def dln_step_direct(
    problem: IvpProblem,
    window: StateWindow,
    theta: Theta,
    pair: StepPair,
    config: StageSolveConfig,
) -> tuple[np.ndarray, StageInfo]:
    """One direct one-leg step: solve sum_l alpha_l y = khat f(t_beta, sum_l beta_l y)."""
    c = one_leg_coefficients(theta, pair)
    a2, a1, a0 = c.alpha[2], c.alpha[1], c.alpha[0]
    b2, b1, b0 = c.beta[2], c.beta[1], c.beta[0]
    y_n, y_nm1 = window.y_curr, window.y_prev
    hist_a = a1 * y_n + a0 * y_nm1
    hist_b = b1 * y_n + b0 * y_nm1
    t_beta = _broadcast_time(window, c, pair.k_n)

    if problem.bilinear_split is not None:
        _, A, g = _semi_implicit_matrices(problem, window, c, pair)
        M = a2 * np.eye(problem.dimension) - c.khat * b2 * A
        rhs = -hist_a + c.khat * (A @ hist_b + g)
        y = np.linalg.solve(M, rhs)
        return _check_finite(y), StageInfo(iterations=0, residual=0.0)

    if config.method == "linear-direct":
        J = problem.jacobian(t_beta, np.zeros(problem.dimension))
        M = a2 * np.eye(problem.dimension) - c.khat * b2 * J
        rhs = -hist_a + c.khat * (J @ hist_b + problem.rhs(t_beta, np.zeros(problem.dimension)))
        y = np.linalg.solve(M, rhs)
        return _check_finite(y), StageInfo(iterations=0, residual=0.0)

    def residual(x):
        return a2 * x + hist_a - c.khat * problem.rhs(t_beta, b2 * x + hist_b)

    def jac(x):
        yb = b2 * x + hist_b
        Jf = problem.jacobian(t_beta, yb) if problem.jacobian else _fd_jacobian(problem.rhs, t_beta, yb)
        return a2 * np.eye(x.size) - c.khat * b2 * Jf

    def fp_map(x):
        return (c.khat * problem.rhs(t_beta, b2 * x + hist_b) - hist_a) / a2

    x0 = 2.0 * y_n - y_nm1  # linear prediction
    return _solve_stage(residual, jac, x0, config, fixed_point_map=fp_map)


def dln_step_refactorized(
    problem: IvpProblem,
    window: StateWindow,
    theta: Theta,
    pair: StepPair,
    config: StageSolveConfig,
) -> tuple[np.ndarray, StageInfo]:
    """Pre-filter, backward-Euler stage at the broadcast time, post-filter.

    Agrees with the direct path to the stage tolerance; exactly on linear
    problems up to rounding.
    """
    c = one_leg_coefficients(theta, pair)
    rc = refactor_coefficients(theta, pair)
    y_n, y_nm1 = window.y_curr, window.y_prev
    y_old = rc.a1 * y_n + rc.a0 * y_nm1
    k_be = rc.b * c.khat
    t_beta = _broadcast_time(window, c, pair.k_n)

    if problem.bilinear_split is not None:
        _, A, g = _semi_implicit_matrices(problem, window, c, pair)
        M = np.eye(problem.dimension) - k_be * A
        y_temp = np.linalg.solve(M, y_old + k_be * g)
        info = StageInfo(iterations=0, residual=0.0)
    elif config.method == "linear-direct":
        J = problem.jacobian(t_beta, np.zeros(problem.dimension))
        M = np.eye(problem.dimension) - k_be * J
        y_temp = np.linalg.solve(M, y_old + k_be * problem.rhs(t_beta, np.zeros(problem.dimension)))
        info = StageInfo(iterations=0, residual=0.0)
    else:

        def residual(x):
            return x - y_old - k_be * problem.rhs(t_beta, x)

        def jac(x):
            Jf = problem.jacobian(t_beta, x) if problem.jacobian else _fd_jacobian(problem.rhs, t_beta, x)
            return np.eye(x.size) - k_be * Jf

        def fp_map(x):
            return y_old + k_be * problem.rhs(t_beta, x)

        y_temp, info = _solve_stage(residual, jac, y_old.copy(), config, fixed_point_map=fp_map)

    y_next = rc.c2 * y_temp + rc.c1 * y_n + rc.c0 * y_nm1
    return _check_finite(y_next), info


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray          # shape (N+1, dim)
    g_energy: np.ndarray        # pair-norm ledger, one entry per step
    stage_iterations: list = field(default_factory=list)

    def errors_vs_exact(self, exact: Callable[[float], np.ndarray]) -> np.ndarray:
        return np.array([np.linalg.norm(y - exact(t)) for t, y in zip(self.times, self.states)])


def integrate_fixed(
    problem: IvpProblem,
    t0: float,
    y0: np.ndarray,
    y1: np.ndarray,
    step_schedule: np.ndarray,
    theta: Theta,
    config: StageSolveConfig,
    path: str = "direct",
) -> Trajectory:
    """March a prescribed positive step schedule; y1 is the two-step startup value.

    The first schedule entry is the step that produced y1.  Ratios leaving the
    controller band [0.2, 1.5] are logged, not rejected.
    """
    steps = np.asarray(step_schedule, dtype=float)
    if np.any(steps <= 0):
        raise ValueError("all steps must be positive")
    stepper = dln_step_direct if path == "direct" else dln_step_refactorized

    window = StateWindow(t0, y0, t0 + steps[0], y1)
    times = [t0, t0 + steps[0]]
    states = [np.asarray(y0, float), np.asarray(y1, float)]
    g_led = []
    iters = []
    guard_hits = 0
    worst_ratio = 1.0
    for i in range(1, len(steps)):
        pair = StepPair(steps[i], steps[i - 1])
        if not RATIO_GUARD[0] <= pair.ratio <= RATIO_GUARD[1]:
            guard_hits += 1
            if abs(math.log(pair.ratio)) > abs(math.log(worst_ratio)):
                worst_ratio = pair.ratio
            log.debug("step ratio %.3f outside %s at step %d", pair.ratio, RATIO_GUARD, i)
        try:
            y_next, info = stepper(problem, window, theta, pair, config)
        except (SolverDiverged, NonFiniteState) as exc:
            raise type(exc)(f"step {i} (t={window.t_curr:.6g}): {exc}") from exc
        g_led.append(g_norm_sq(theta, y_next, window.y_curr))
        iters.append(info.iterations)
        window.push(window.t_curr + steps[i], y_next)
        times.append(window.t_curr)
        states.append(y_next)
    if guard_hits:
        log.warning("%d of %d step ratios left %s (worst %.3f); continuing, the method "
                    "tolerates arbitrary meshes", guard_hits, len(steps) - 1, RATIO_GUARD, worst_ratio)
    return Trajectory(
        times=np.array(times),
        states=np.array(states),
        g_energy=np.array(g_led),
        stage_iterations=iters,
    )


def midpoint_startup(
    problem: IvpProblem, t0: float, y0: np.ndarray, k0: float, config: StageSolveConfig
) -> np.ndarray:
    """One implicit-midpoint step, used to seed y1 when no exact solution exists."""
    t_mid = t0 + 0.5 * k0

    def residual(x):
        return x - y0 - k0 * problem.rhs(t_mid, 0.5 * (x + y0))

    def jac(x):
        ym = 0.5 * (x + y0)
        Jf = problem.jacobian(t_mid, ym) if problem.jacobian else _fd_jacobian(problem.rhs, t_mid, ym)
        return np.eye(x.size) - 0.5 * k0 * Jf

    def fp_map(x):
        return y0 + k0 * problem.rhs(t_mid, 0.5 * (x + y0))

    y1, _ = _solve_stage(residual, jac, np.asarray(y0, float).copy(), config, fixed_point_map=fp_map)
    return y1
