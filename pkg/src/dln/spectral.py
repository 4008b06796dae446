"""Fourier pseudo-spectral toolbox on a periodic square.

Velocity states are kept band-limited under the 2/3-rule mask; nonlinear
products are re-truncated on output.  Under that discipline the discrete
Leray projector, the skew advection operator, and all quadratures below are
exact for the represented trigonometric polynomials, up to rounding.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "NonZeroMean",
    "Grid2D",
    "leray_project",
    "dealias",
    "divergence",
    "gradient",
    "vector_laplacian",
    "advection_apply",
    "trilinear_b",
    "norm_l2",
    "norm_h1_semi",
    "norm_h_minus1",
    "inner_l2",
    "bochner_sup",
    "bochner_l2_beta",
    "discrete_norm",
]


class NonZeroMean(ValueError):
    """H^-1 norm requested for a field with a nonzero mean component."""


class Grid2D:
    """Uniform n-by-n periodic grid on [0, L]^2 with cached wavenumbers."""

    def __init__(self, n: int, length: float = 2.0):
        # even n >= 8; powers of two are fastest but any even size transforms
        if n < 8 or n % 2 != 0:
            raise ValueError(f"n must be an even integer >= 8, got {n}")
        if length <= 0:
            raise ValueError("length must be positive")
        self.n = n
        self.length = float(length)
        self.dA = (self.length / n) ** 2

        coords = np.arange(n) * (self.length / n)
        self.x, self.y = np.meshgrid(coords, coords, indexing="ij")

        freq = np.fft.fftfreq(n, d=1.0 / n)          # integer mode numbers
        k1 = 2.0 * np.pi / self.length * freq
        self.kx = k1[:, None] * np.ones((1, n))
        self.ky = np.ones((n, 1)) * k1[None, :]
        self.ksq = self.kx**2 + self.ky**2
        self.inv_ksq = np.zeros_like(self.ksq)
        nz = self.ksq > 0
        self.inv_ksq[nz] = 1.0 / self.ksq[nz]

        cut = n // 3
        self.mask = (np.abs(freq[:, None]) <= cut) & (np.abs(freq[None, :]) <= cut)
        # the self-conjugate Nyquist band has no Hermitian-consistent odd
        # derivative on a real grid; odd operators and the projector zero it
        nyq_free = np.abs(freq) < n // 2
        self.deriv_mask = nyq_free[:, None] & nyq_free[None, :]
        self.kxd = self.kx * self.deriv_mask
        self.kyd = self.ky * self.deriv_mask

    def fft(self, f: np.ndarray) -> np.ndarray:
        return np.fft.fft2(f, axes=(-2, -1))

    def ifft(self, fh: np.ndarray) -> np.ndarray:
        return np.fft.ifft2(fh, axes=(-2, -1)).real

    def spectral_weight(self) -> float:
        """|u|_{L2}^2 = spectral_weight * sum |u_hat|^2 (unnormalized numpy fft)."""
        return self.length**2 / self.n**4

    def check(self, f: np.ndarray) -> np.ndarray:
        f = np.asarray(f)
        if f.shape[-2:] != (self.n, self.n):
            raise ValueError(f"field shape {f.shape} does not match grid n={self.n}")
        return f


def dealias(grid: Grid2D, f: np.ndarray) -> np.ndarray:
    """Truncate to the 2/3-rule band."""
    return grid.ifft(grid.mask * grid.fft(grid.check(f)))


def _project_hat(grid: Grid2D, fh: np.ndarray) -> np.ndarray:
    div_h = grid.kx * fh[0] + grid.ky * fh[1]     # i dropped: common factor cancels
    corr = div_h * grid.inv_ksq
    out = fh * grid.deriv_mask
    out[0] -= grid.kxd * corr
    out[1] -= grid.kyd * corr
    return out


def leray_project(grid: Grid2D, u: np.ndarray) -> np.ndarray:
    """L2-orthogonal projection onto divergence-free fields; gradients map to 0."""
    u = grid.check(u)
    return grid.ifft(_project_hat(grid, grid.fft(u)))


def divergence(grid: Grid2D, u: np.ndarray) -> np.ndarray:
    uh = grid.fft(grid.check(u))
    return grid.ifft(1j * (grid.kxd * uh[0] + grid.kyd * uh[1]))


def gradient(grid: Grid2D, p: np.ndarray) -> np.ndarray:
    ph = grid.fft(grid.check(p))
    return np.stack([grid.ifft(1j * grid.kxd * ph), grid.ifft(1j * grid.kyd * ph)])


def vector_laplacian(grid: Grid2D, u: np.ndarray) -> np.ndarray:
    uh = grid.fft(grid.check(u))
    return grid.ifft(-grid.ksq * uh)


def _velocity_gradients(grid: Grid2D, v: np.ndarray) -> np.ndarray:
    """d v_i / d x_j as [i, j] grid arrays."""
    vh = grid.fft(v)
    out = np.empty((2, 2, grid.n, grid.n))
    for i in range(2):
        out[i, 0] = grid.ifft(1j * grid.kxd * vh[i])
        out[i, 1] = grid.ifft(1j * grid.kyd * vh[i])
    return out


def advection_apply(grid: Grid2D, u_tilde: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Skew advection (1/2)[(u~ . grad) v + div(u~ (x) v)], dealiased.

    Discretely skew-adjoint in v, so (A v, v) = 0 up to rounding; for
    divergence-free u~ both halves coincide with plain advection.
    """
    u_tilde = grid.check(u_tilde)
    v = grid.check(v)
    dv = _velocity_gradients(grid, v)
    adv = np.stack([u_tilde[0] * dv[i, 0] + u_tilde[1] * dv[i, 1] for i in range(2)])

    out_h = np.empty((2, grid.n, grid.n), dtype=complex)
    for i in range(2):
        flux_x = grid.fft(u_tilde[0] * v[i])
        flux_y = grid.fft(u_tilde[1] * v[i])
        out_h[i] = grid.fft(adv[i]) + 1j * (grid.kxd * flux_x + grid.kyd * flux_y)
    return grid.ifft(0.5 * grid.mask * out_h)


def inner_l2(grid: Grid2D, f: np.ndarray, g: np.ndarray) -> float:
    return grid.dA * float(np.sum(np.asarray(f) * np.asarray(g)))


def norm_l2(grid: Grid2D, f: np.ndarray) -> float:
    return float(np.sqrt(max(inner_l2(grid, f, f), 0.0)))


def norm_h1_semi(grid: Grid2D, f: np.ndarray) -> float:
    fh = grid.fft(grid.check(f))
    return float(np.sqrt(grid.spectral_weight() * np.sum(grid.ksq * np.abs(fh) ** 2)))


def norm_h_minus1(grid: Grid2D, f: np.ndarray, project: bool = True) -> float:
    """Dual norm, realized spectrally as |grad^{-1} f|; needs mean-zero input.

    Vector fields are Leray-projected first (the pairing only sees the
    divergence-free part against solenoidal test functions).
    """
    f = grid.check(f)
    fh = grid.fft(f)
    mean_scale = np.max(np.abs(fh.reshape(-1, grid.n * grid.n)), axis=1)
    zero_mode = np.abs(fh[..., 0, 0])
    if np.any(zero_mode > 1e-12 * np.maximum(mean_scale, 1e-300)):
        raise NonZeroMean("h_minus1 norm requires a mean-zero field")
    if f.ndim == 3 and project:
        fh = _project_hat(grid, fh)
    return float(np.sqrt(grid.spectral_weight() * np.sum(grid.inv_ksq * np.abs(fh) ** 2)))


def trilinear_b(grid: Grid2D, u: np.ndarray, v: np.ndarray, w: np.ndarray) -> float:
    """Skew-symmetrized trilinear form (1/2)(u.grad v, w) - (1/2)(u.grad w, v)."""
    u, v, w = grid.check(u), grid.check(v), grid.check(w)
    dv = _velocity_gradients(grid, v)
    dw = _velocity_gradients(grid, w)
    conv_v = np.stack([u[0] * dv[i, 0] + u[1] * dv[i, 1] for i in range(2)])
    conv_w = np.stack([u[0] * dw[i, 0] + u[1] * dw[i, 1] for i in range(2)])
    return 0.5 * inner_l2(grid, conv_v, w) - 0.5 * inner_l2(grid, conv_w, v)


def bochner_sup(norms) -> float:
    """max_n of the supplied time-sample norms."""
    return float(np.max(np.asarray(norms, dtype=float)))


def bochner_l2_beta(step_sums, norms) -> float:
    """sqrt(sum (k_n + k_{n-1}) |f(t_{n,beta})|^2) over the supplied samples."""
    w = np.asarray(step_sums, dtype=float)
    v = np.asarray(norms, dtype=float)
    if w.shape != v.shape:
        raise ValueError("weights and norms must align")
    return float(np.sqrt(np.sum(w * v * v)))


def discrete_norm(grid: Grid2D, f: np.ndarray, kind: str) -> float:
    """Dispatch for the pointwise-in-time norms (l2, h1_semi, h_minus1)."""
    if kind == "l2":
        return norm_l2(grid, f)
    if kind == "h1_semi":
        return norm_h1_semi(grid, f)
    if kind == "h_minus1":
        return norm_h_minus1(grid, f)
    raise ValueError(f"unknown norm kind {kind!r}")
