"""Variable-step DLN one-leg time integration and a 2D periodic spectral NSE testbed."""

from dln.coefficients import (
    GNormWeights,
    OneLegCoefficients,
    RefactorCoefficients,
    StepPair,
    Theta,
    g_norm_sq,
    g_norm_weights,
    g_stability_residual,
    one_leg_coefficients,
    refactor_coefficients,
    step_variability,
)

__version__ = "0.1.0"

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
    "__version__",
]
