"""Coefficient algebra for the variable-step DLN family of one-leg, two-step methods.

Everything here is a pure function of the method parameter theta and the last
two step sizes.  Coefficients are recomputed from scratch on every call; there
is no caching and no shared state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Theta",
    "StepPair",
    "OneLegCoefficients",
    "RefactorCoefficients",
    "GNormWeights",
    "step_variability",
    "one_leg_coefficients",
    "refactor_coefficients",
    "g_norm_weights",
    "g_norm_sq",
    "g_stability_residual",
]


@dataclass(frozen=True)
class Theta:
    """Method parameter in [0, 1]; 1 recovers the midpoint rule."""

    value: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"theta must lie in [0, 1], got {self.value!r}")


@dataclass(frozen=True)
class StepPair:
    """Current and previous step sizes (k_n, k_{n-1}), both strictly positive."""

    k_n: float
    k_nm1: float

    def __post_init__(self) -> None:
        if not (self.k_n > 0.0 and self.k_nm1 > 0.0):
            raise ValueError(f"step sizes must be positive, got {self.k_n!r}, {self.k_nm1!r}")

    @property
    def eps(self) -> float:
        """Step variability (k_n - k_{n-1}) / (k_n + k_{n-1}), always in (-1, 1)."""
        return (self.k_n - self.k_nm1) / (self.k_n + self.k_nm1)

    @property
    def ratio(self) -> float:
        """Step ratio k_n / k_{n-1}."""
        return self.k_n / self.k_nm1


@dataclass(frozen=True)
class OneLegCoefficients:
    """One step's worth of DLN coefficients.

    alpha, beta, gamma are arrays indexed by level (0 -> n-1, 1 -> n, 2 -> n+1);
    khat is the average step alpha2*k_n - alpha0*k_{n-1}; eps the variability.
    """

    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    khat: float
    eps: float


@dataclass(frozen=True)
class RefactorCoefficients:
    """Pre/post-processing weights around the backward-Euler stage.

    The stage runs with step b*khat from the filtered state a1*y_n + a0*y_{n-1};
    the new solution is c2*y_temp + c1*y_n + c0*y_{n-1}.
    """

    a1: float
    a0: float
    b: float
    c2: float
    c1: float
    c0: float


@dataclass(frozen=True)
class GNormWeights:
    w_top: float
    w_bot: float


def step_variability(pair: StepPair) -> float:
    """Normalized step change; 0 for constant steps, antisymmetric under swap."""
    return pair.eps


def one_leg_coefficients(theta: Theta, pair: StepPair) -> OneLegCoefficients:
    """All nine DLN coefficients plus the average step for one (theta, step-pair)."""
    th = theta.value
    eps = pair.eps
    d = 1.0 + eps * th  # > 0 since |eps| < 1 and theta in [0, 1]
    q = (1.0 - th * th) / (d * d)

    alpha = np.array([0.5 * (th - 1.0), -th, 0.5 * (th + 1.0)])
    beta = np.array(
        [
            0.25 * (1.0 + q - eps * eps * th * q - th),
            0.5 * (1.0 - q),
            0.25 * (1.0 + q + eps * eps * th * q + th),
        ]
    )
    g1 = -math.sqrt(th * (1.0 - th * th) / 2.0) / d
    gamma = np.array([-0.5 * (1.0 + eps) * g1, g1, -0.5 * (1.0 - eps) * g1])

    khat = float(alpha[2] * pair.k_n - alpha[0] * pair.k_nm1)
    return OneLegCoefficients(alpha=alpha, beta=beta, gamma=gamma, khat=khat, eps=eps)


def refactor_coefficients(theta: Theta, pair: StepPair) -> RefactorCoefficients:
    """Weights that rewrite one DLN step as filter / backward Euler / filter."""
    c = one_leg_coefficients(theta, pair)
    a2, a1, a0 = c.alpha[2], c.alpha[1], c.alpha[0]
    b2, b1, b0 = c.beta[2], c.beta[1], c.beta[0]
    return RefactorCoefficients(
        a1=float(b1 - a1 * b2 / a2),
        a0=float(b0 - a0 * b2 / a2),
        b=float(b2 / a2),
        c2=float(1.0 / b2),
        c1=float(-b1 / b2),
        c0=float(-b0 / b2),
    )


def g_norm_weights(theta: Theta) -> GNormWeights:
    th = theta.value
    return GNormWeights(w_top=0.25 * (1.0 + th), w_bot=0.25 * (1.0 - th))


def _sq(u: np.ndarray) -> float:
    u = np.asarray(u, dtype=float)
    return float(np.dot(u.ravel(), u.ravel()))


def g_norm_sq(theta: Theta, u: np.ndarray, v: np.ndarray) -> float:
    """Squared pair norm (1+theta)/4 |u|^2 + (1-theta)/4 |v|^2."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise ValueError(f"shape mismatch: {u.shape} vs {v.shape}")
    w = g_norm_weights(theta)
    return w.w_top * _sq(u) + w.w_bot * _sq(v)


def g_stability_residual(
    theta: Theta,
    pair: StepPair,
    y_prev: np.ndarray,
    y_curr: np.ndarray,
    y_next: np.ndarray,
) -> float:
    """Defect of the G-stability identity; exact algebra, so ~0 up to rounding.

    Returns <sum_l alpha_l y, sum_l beta_l y> minus the telescoping pair-norm
    increment plus the gamma-combination energy.
    """
    y_prev = np.asarray(y_prev, dtype=float)
    y_curr = np.asarray(y_curr, dtype=float)
    y_next = np.asarray(y_next, dtype=float)
    if not (y_prev.shape == y_curr.shape == y_next.shape):
        raise ValueError("state shapes differ")

    c = one_leg_coefficients(theta, pair)
    ya = c.alpha[2] * y_next + c.alpha[1] * y_curr + c.alpha[0] * y_prev
    yb = c.beta[2] * y_next + c.beta[1] * y_curr + c.beta[0] * y_prev
    yg = c.gamma[2] * y_next + c.gamma[1] * y_curr + c.gamma[0] * y_prev

    lhs = float(np.dot(ya.ravel(), yb.ravel()))
    rhs = g_norm_sq(theta, y_next, y_curr) - g_norm_sq(theta, y_curr, y_prev) + _sq(yg)
    return lhs - rhs
