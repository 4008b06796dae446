"""Adaptive stepping: AB2-like predictor, LTE estimator, and the two control loops.

The predictor extrapolates from four back solutions using the one-leg
derivative combinations of the two completed steps, sampled at their broadcast
times.  The estimator rescales the predictor/solution gap by |G|/|G+R| to
recover the local truncation error of the one-leg step itself.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from dln.coefficients import StepPair, Theta, one_leg_coefficients
from dln.ledger import LedgerRow, RunLedger

__all__ = [
    "DegenerateHistory",
    "ZeroDivisor",
    "ZeroNorm",
    "TooManyRejects",
    "ZeroViscousDissipation",
    "History4",
    "LteCoefficients",
    "ControllerConfig",
    "StepDecision",
    "StepAttempt",
    "ab2_like_predict",
    "ab2_like_weights",
    "lte_g",
    "lte_r",
    "lte_coefficients",
    "lte_estimate",
    "controller_next_step",
    "dissipation_pair",
    "adapt_loop_lte",
    "adapt_loop_nd",
]

log = logging.getLogger(__name__)


class DegenerateHistory(ValueError):
    """The two derivative broadcast points coincide; the predictor is undefined."""


class ZeroDivisor(ArithmeticError):
    """G + R vanished; the LTE rescaling is undefined for this step pattern."""


class ZeroNorm(ArithmeticError):
    """Relative estimator requested with a zero-norm solution."""


class TooManyRejects(RuntimeError):
    """A single time station was rejected more than max_rejects_per_step times."""


class ZeroViscousDissipation(RuntimeError):
    """chi = E_ND/E_VD undefined (E_VD = 0, E_ND > 0) with no room to shrink."""


class History4:
    """Four back solutions with their times plus the attempted next step.

    Everything the predictor needs (variabilities, average steps, broadcast
    points) is derived from the stored times, never stored separately.
    """

    def __init__(self, times, states, k_attempt: float):
        if len(times) != 4 or len(states) != 4:
            raise ValueError("need exactly four back solutions")
        if not all(t2 > t1 for t1, t2 in zip(times, times[1:])):
            raise ValueError("times must be strictly increasing")
        if k_attempt <= 0:
            raise ValueError("attempted step must be positive")
        shapes = {np.asarray(s).shape for s in states}
        if len(shapes) != 1:
            raise ValueError("states must share one shape")
        self.times = [float(t) for t in times]          # t_{n-3} .. t_n
        self.states = [np.asarray(s, dtype=float) for s in states]
        self.k_attempt = float(k_attempt)

    @property
    def t_next(self) -> float:
        return self.times[-1] + self.k_attempt

    @property
    def steps(self) -> tuple[float, float, float]:
        """(k_{n-1}, k_{n-2}, k_{n-3})."""
        t = self.times
        return (t[3] - t[2], t[2] - t[1], t[1] - t[0])

    @property
    def variabilities(self) -> tuple[float, float, float]:
        """(eps_n, eps_{n-1}, eps_{n-2}) for the attempted step."""
        k1, k2, k3 = self.steps
        return (
            StepPair(self.k_attempt, k1).eps,
            StepPair(k1, k2).eps,
            StepPair(k2, k3).eps,
        )


def _broadcast_point(theta: Theta, t_hi: float, t_mid: float, t_lo: float) -> float:
    beta = one_leg_coefficients(theta, StepPair(t_hi - t_mid, t_mid - t_lo)).beta
    return float(beta[2] * t_hi + beta[1] * t_mid + beta[0] * t_lo)


def ab2_like_weights(history: History4, theta: Theta) -> np.ndarray:
    """Weights on (y_n, y_{n-1}, y_{n-2}, y_{n-3}) of the explicit predictor.

    The one-leg combinations of the last two completed steps approximate the
    derivative at their broadcast points; the predictor integrates the linear
    interpolant of those two samples across [t_n, t_{n+1}].  Weights sum to 1.
    """
    t = history.times
    k1, k2, k3 = history.steps
    t_next = history.t_next

    c_new = one_leg_coefficients(theta, StepPair(k1, k2))     # step producing y_n
    c_old = one_leg_coefficients(theta, StepPair(k2, k3))     # step producing y_{n-1}
    tb_new = _broadcast_point(theta, t[3], t[2], t[1])        # sample point of d_new
    tb_old = _broadcast_point(theta, t[2], t[1], t[0])        # sample point of d_old

    spread = tb_new - tb_old
    if abs(spread) <= 1e-14 * max(k1, k2, history.k_attempt):
        raise DegenerateHistory("broadcast points coincide")

    dt = history.k_attempt
    a = t_next + t[3] - 2.0 * tb_old      # 2*(interval midpoint - older sample)
    b = t_next + t[3] - 2.0 * tb_new      # 2*(interval midpoint - newer sample)
    w_new = dt * a / (2.0 * spread * c_new.khat)
    w_old = dt * b / (2.0 * spread * c_old.khat)

    al = c_new.alpha  # alpha is theta-only, shared by both combinations
    return np.array(
        [
            1.0 + al[2] * w_new,
            al[1] * w_new - al[2] * w_old,
            al[0] * w_new - al[1] * w_old,
            -al[0] * w_old,
        ]
    )


def ab2_like_predict(history: History4, theta: Theta) -> np.ndarray:
    """Explicit second-order prediction of y_{n+1} from four back solutions."""
    w = ab2_like_weights(history, theta)
    y = history.states
    return w[0] * y[3] + w[1] * y[2] + w[2] * y[1] + w[3] * y[0]


@dataclass(frozen=True)
class LteCoefficients:
    G: float
    R: float
    scale: float


def _check_eps(*eps: float) -> None:
    for e in eps:
        if not -1.0 < e < 1.0:
            raise ValueError("variabilities must lie in (-1, 1)")


def _beta_at(theta: Theta, eps: float) -> np.ndarray:
    return one_leg_coefficients(theta, StepPair(1.0 + eps, 1.0 - eps)).beta


def lte_g(theta: Theta, eps_n: float) -> float:
    """Leading local-error coefficient of the one-leg step itself."""
    _check_eps(eps_n)
    al = one_leg_coefficients(theta, StepPair(1.0 + eps_n, 1.0 - eps_n)).alpha
    b_n = _beta_at(theta, eps_n)
    r_n = (1.0 - eps_n) / (1.0 + eps_n)
    a_ratio = al[0] / al[2]
    return float(
        (0.5 - 0.5 * a_ratio * r_n) * (b_n[2] - b_n[0] * r_n) ** 2
        + a_ratio * r_n**3 / 6.0
        - 1.0 / 6.0
    )


def lte_r(theta: Theta, eps_n: float, eps_nm1: float, eps_nm2: float) -> float:
    """Companion coefficient of the predictor gap in the same normalization."""
    _check_eps(eps_n, eps_nm1, eps_nm2)
    b_nm1 = _beta_at(theta, eps_nm1)
    b_nm2 = _beta_at(theta, eps_nm2)
    r_n = (1.0 - eps_n) / (1.0 + eps_n)
    r_nm1 = (1.0 - eps_nm1) / (1.0 + eps_nm1)
    r_nm2 = (1.0 - eps_nm2) / (1.0 + eps_nm2)
    return float(
        (
            2.0
            + 3.0 * r_n
            * (1.0 - b_nm2[2] * r_nm1 + b_nm2[0] * r_nm2 * r_nm1)
            * (1.0 - b_nm1[2] * r_n + b_nm1[0] * r_nm1 * r_n)
            + 3.0 * r_n
            * (2.0 / (1.0 + eps_n) - b_nm2[2] * r_nm1 * r_n + b_nm2[0] * r_nm2 * r_nm1 * r_n)
            * (-b_nm1[2] + b_nm1[0] * r_nm1)
        )
        / 12.0
    )


def lte_coefficients(theta: Theta, eps_n: float, eps_nm1: float, eps_nm2: float) -> LteCoefficients:
    """G, R, and the gap-rescaling factor |G| / |G + R|."""
    G = lte_g(theta, eps_n)
    R = lte_r(theta, eps_n, eps_nm1, eps_nm2)
    if abs(G + R) <= 1e-14:
        raise ZeroDivisor(f"G + R = {G + R:.3e} vanishes (theta={theta.value}, eps={eps_n})")
    return LteCoefficients(G=G, R=R, scale=abs(G) / abs(G + R))


def lte_estimate(
    kind: str,
    y_dln: np.ndarray,
    y_ab2: np.ndarray,
    coeffs: LteCoefficients,
    norm: Callable[[np.ndarray], float] = np.linalg.norm,
) -> float:
    """Absolute or relative LTE estimate from the solution/predictor gap."""
    if kind not in ("absolute", "relative"):
        raise ValueError(f"unknown estimator kind {kind!r}")
    y_dln = np.asarray(y_dln, dtype=float)
    y_ab2 = np.asarray(y_ab2, dtype=float)
    if y_dln.shape != y_ab2.shape:
        raise ValueError("shape mismatch")
    gap = coeffs.scale * float(norm(y_dln - y_ab2))
    if kind == "absolute":
        return gap
    ref = float(norm(y_dln))
    if ref == 0.0:
        raise ZeroNorm("relative estimator with zero-norm solution")
    return gap / ref


@dataclass
class ControllerConfig:
    tol: float
    kappa: float = 0.95
    k_min: float = 1e-8
    k_max: float = 1.0
    estimator_kind: str = "absolute"
    max_rejects_per_step: int = 10
    startup_steps: int = 3

    def __post_init__(self) -> None:
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if not 0.0 < self.kappa <= 1.0:
            raise ValueError("kappa must lie in (0, 1]")
        if not 0.0 < self.k_min <= self.k_max:
            raise ValueError("need 0 < k_min <= k_max")
        if self.estimator_kind not in ("absolute", "relative"):
            raise ValueError(f"unknown estimator kind {self.estimator_kind!r}")


@dataclass(frozen=True)
class StepDecision:
    outcome: str          # accept | reject
    estimator: float
    next_step: float


def controller_next_step(k_n: float, est: float, config: ControllerConfig) -> float:
    """Deadbeat controller with safety factor and [0.2, 1.5] inner clamps."""
    if k_n <= 0:
        raise ValueError("k_n must be positive")
    if est < 0:
        raise ValueError("estimator must be nonnegative")
    raw = math.inf if est == 0.0 else config.kappa * (config.tol / est) ** (1.0 / 3.0)
    factor = min(1.5, max(0.2, raw))
    return min(config.k_max, max(config.k_min, k_n * factor))


def dissipation_pair(
    y_prev: np.ndarray,
    y_curr: np.ndarray,
    y_next: np.ndarray,
    coeffs,
    grad_sq_broadcast: float,
    nu: float,
    norm: Callable[[np.ndarray], float] = np.linalg.norm,
) -> tuple[float, float]:
    """(E_ND, E_VD): method-injected dissipation and physical dissipation.

    grad_sq_broadcast is |grad u_beta|^2 supplied by the spatial layer (any
    seminorm squared of the broadcast state for ODE runs).
    """
    g = coeffs.gamma
    combo = g[2] * np.asarray(y_next, float) + g[1] * np.asarray(y_curr, float) + g[0] * np.asarray(y_prev, float)
    e_nd = float(norm(combo)) ** 2 / coeffs.khat
    e_vd = nu * grad_sq_broadcast
    return e_nd, e_vd


@dataclass
class StepAttempt:
    """One attempted step as produced by a stepper backend."""

    y_next: np.ndarray
    e_nd: float
    e_vd: float
    energy: float
    extra: dict


class OdeDlnStepper:
    """Adaptive-loop backend that advances an IvpProblem by one DLN step.

    nu and the broadcast seminorm only feed the dissipation ratio; for plain
    ODE runs the Euclidean norm is a reasonable default.
    """

    def __init__(self, problem, theta: Theta, stage_config, path: str = "direct",
                 nu: float = 1.0, seminorm: Optional[Callable] = None):
        from dln import ivp  # local import to avoid a cycle

        self.problem = problem
        self.theta = theta
        self.stage_config = stage_config
        self._step = ivp.dln_step_direct if path == "direct" else ivp.dln_step_refactorized
        self._window_cls = ivp.StateWindow
        self.nu = nu
        self.seminorm = seminorm or (lambda y: float(np.linalg.norm(y)))

    def norm(self, y: np.ndarray) -> float:
        return float(np.linalg.norm(y))

    def step(self, t_prev: float, t_curr: float, y_prev, y_curr, k_n: float) -> StepAttempt:
        pair = StepPair(k_n, t_curr - t_prev)
        coeffs = one_leg_coefficients(self.theta, pair)
        window = self._window_cls(t_prev, y_prev, t_curr, y_curr)
        y_next, info = self._step(self.problem, window, self.theta, pair, self.stage_config)
        y_beta = coeffs.beta[2] * y_next + coeffs.beta[1] * np.asarray(y_curr, float) \
            + coeffs.beta[0] * np.asarray(y_prev, float)
        e_nd, e_vd = dissipation_pair(
            y_prev, y_curr, y_next, coeffs, self.seminorm(y_beta) ** 2, self.nu, norm=self.norm
        )
        energy = 0.5 * self.norm(y_next) ** 2
        return StepAttempt(y_next=y_next, e_nd=e_nd, e_vd=e_vd, energy=energy,
                           extra={"stage_iterations": info.iterations})


def _run_startup(stepper, theta, ts, ys, config, ledger, t_end, attempt_idx):
    """Advance startup_steps constant-k steps, unconditionally accepted."""
    k0 = ts[1] - ts[0]
    for _ in range(config.startup_steps):
        if ts[-1] >= t_end:
            break
        k = min(k0, t_end - ts[-1])
        att = stepper.step(ts[-2], ts[-1], ys[-2], ys[-1], k)
        row = LedgerRow(
            attempt_index=attempt_idx,
            t_n=ts[-1],
            k_n=k,
            accepted=True,
            estimator=float("nan"),
            e_nd=att.e_nd,
            e_vd=att.e_vd,
            energy=att.energy,
            extra={**att.extra, "phase": "startup"},
        )
        ledger.append(row)
        ts.append(ts[-1] + k)
        ys.append(att.y_next)
        attempt_idx += 1
    return attempt_idx


def adapt_loop_lte(
    stepper,
    theta: Theta,
    config: ControllerConfig,
    t0: float,
    y0: np.ndarray,
    y1: np.ndarray,
    k0: float,
    t_end: float,
    extra_columns: tuple[str, ...] = ("phase",),
    on_accept: Optional[Callable] = None,
) -> RunLedger:
    """Accept/reject loop driven by the AB2-like LTE estimate.

    Startup accumulates the depth-4 history at constant k0 before any step can
    be rejected.  Time never advances on a reject; the same station is retried
    with the controller-shrunk step.
    """
    ledger = RunLedger(extra_columns=extra_columns)
    ts = [t0, t0 + k0]
    ys = [np.asarray(y0, float), np.asarray(y1, float)]
    attempt = _run_startup(stepper, theta, ts, ys, config, ledger, t_end, 0)

    k = min(ts[1] - ts[0], config.k_max)
    rejects_here = 0
    while ts[-1] < t_end - 1e-12 * max(1.0, abs(t_end)):
        k = min(k, t_end - ts[-1])
        att = stepper.step(ts[-2], ts[-1], ys[-2], ys[-1], k)
        history = History4(ts[-4:], ys[-4:], k)
        scale_fallback = False
        try:
            coeffs = lte_coefficients(theta, *history.variabilities)
        except ZeroDivisor:
            # conservative fallback: unscaled gap can only shrink the step
            coeffs = LteCoefficients(G=float("nan"), R=float("nan"), scale=1.0)
            scale_fallback = True
        y_ab2 = ab2_like_predict(history, theta)
        est = lte_estimate(config.estimator_kind, att.y_next, y_ab2, coeffs, norm=stepper.norm)

        accepted = est < config.tol
        ledger.append(
            LedgerRow(
                attempt_index=attempt,
                t_n=ts[-1],
                k_n=k,
                accepted=accepted,
                estimator=est,
                e_nd=att.e_nd,
                e_vd=att.e_vd,
                energy=att.energy,
                extra={**att.extra, "phase": "fallback" if scale_fallback else "adaptive"},
            )
        )
        attempt += 1
        decision = StepDecision(outcome="accept" if accepted else "reject",
                                estimator=est,
                                next_step=controller_next_step(k, est, config))
        if accepted:
            ts.append(ts[-1] + k)
            ys.append(att.y_next)
            del ts[:-4], ys[:-4]
            rejects_here = 0
            k = decision.next_step
            if on_accept is not None:
                on_accept(ts[-1], ys[-1], ledger.rows[-1])
        else:
            rejects_here += 1
            if rejects_here > config.max_rejects_per_step:
                ledger.rows[-1].extra["aborted"] = 1
                raise TooManyRejects(
                    f"{rejects_here} rejects at t={ts[-1]:.6g} (k={k:.3e}, est={est:.3e})"
                )
            k = decision.next_step
    return ledger


def adapt_loop_nd(
    stepper,
    theta: Theta,
    config: ControllerConfig,
    t0: float,
    y0: np.ndarray,
    y1: np.ndarray,
    k0: float,
    t_end: float,
    extra_columns: tuple[str, ...] = ("phase",),
    on_accept: Optional[Callable] = None,
) -> RunLedger:
    """Doubling/halving loop keyed to the dissipation ratio chi = E_ND / E_VD.

    At k_min a rejected step is accepted anyway (flagged), since halving can
    no longer change the retry; this mirrors runs that sit at k_min with chi
    above tolerance.
    """
    ledger = RunLedger(extra_columns=extra_columns)
    ts = [t0, t0 + k0]
    ys = [np.asarray(y0, float), np.asarray(y1, float)]
    attempt = 0
    k = min(k0, config.k_max)
    at_floor = lambda kk: kk <= config.k_min * (1.0 + 1e-9)
    while ts[-1] < t_end - 1e-12 * max(1.0, abs(t_end)):
        k = min(k, t_end - ts[-1])
        att = stepper.step(ts[-2], ts[-1], ys[-2], ys[-1], k)
        if att.e_vd == 0.0:
            if att.e_nd == 0.0:
                chi = 0.0
            elif at_floor(k):
                raise ZeroViscousDissipation(f"E_VD = 0 with E_ND = {att.e_nd:.3e} at k_min")
            else:
                chi = math.inf
        else:
            chi = att.e_nd / att.e_vd

        accepted = chi < config.tol
        forced = False
        if not accepted and at_floor(k):
            accepted = True     # halving cannot change the retry; flag and move on
            forced = True
        ledger.append(
            LedgerRow(
                attempt_index=attempt,
                t_n=ts[-1],
                k_n=k,
                accepted=accepted,
                estimator=chi,
                e_nd=att.e_nd,
                e_vd=att.e_vd,
                energy=att.energy,
                extra={**att.extra, "phase": "forced_accept" if forced else "adaptive"},
            )
        )
        attempt += 1
        decision = StepDecision(
            outcome="accept" if accepted else "reject",
            estimator=chi,
            next_step=(k if forced else min(2.0 * k, config.k_max)) if accepted
            else max(0.5 * k, config.k_min),
        )
        if accepted:
            ts.append(ts[-1] + k)
            ys.append(att.y_next)
            del ts[:-4], ys[:-4]
            k = decision.next_step
            if on_accept is not None:
                on_accept(ts[-1], ys[-1], ledger.rows[-1])
        else:
            k = decision.next_step
    return ledger
