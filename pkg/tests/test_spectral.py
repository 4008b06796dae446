import math

import numpy as np
import pytest

from dln.spectral import (
    Grid2D,
    NonZeroMean,
    advection_apply,
    bochner_l2_beta,
    bochner_sup,
    dealias,
    discrete_norm,
    divergence,
    gradient,
    inner_l2,
    leray_project,
    norm_h1_semi,
    norm_h_minus1,
    norm_l2,
    trilinear_b,
)


@pytest.fixture(scope="module")
def grid():
    return Grid2D(32, 2.0)


def smooth_field(grid, rng):
    return dealias(grid, rng.standard_normal((2, grid.n, grid.n)))


def test_grid_validation():
    with pytest.raises(ValueError):
        Grid2D(7)
    with pytest.raises(ValueError):
        Grid2D(27)   # odd sizes have no clean Nyquist split
    with pytest.raises(ValueError):
        Grid2D(32, -1.0)


def test_projector_kills_gradients(grid):
    phi = np.sin(np.pi * grid.x) * np.cos(2 * np.pi * grid.y)
    g = gradient(grid, phi)
    assert np.abs(leray_project(grid, g)).max() < 1e-13 * max(1.0, np.abs(g).max())


def test_projector_fixes_divergence_free(grid):
    # the decaying-vortex field is solenoidal by construction
    from dln.nse2d import ManufacturedCase

    u = ManufacturedCase("taylor_green_decay").velocity(grid, 0.0)
    assert np.abs(leray_project(grid, u) - u).max() < 1e-13


def test_projector_properties_random(grid):
    rng = np.random.default_rng(0)
    f = rng.standard_normal((2, grid.n, grid.n))
    Pf = leray_project(grid, f)
    assert np.abs(leray_project(grid, Pf) - Pf).max() <= 1e-14 * max(1.0, np.abs(Pf).max())
    assert norm_l2(grid, Pf) ** 2 + norm_l2(grid, f - Pf) ** 2 == pytest.approx(
        norm_l2(grid, f) ** 2, rel=1e-12
    )
    h = rng.standard_normal((2, grid.n, grid.n))
    assert inner_l2(grid, Pf, h) == pytest.approx(inner_l2(grid, f, leray_project(grid, h)), abs=1e-11)
    assert norm_l2(grid, Pf) <= norm_l2(grid, f)
    assert np.abs(divergence(grid, Pf)).max() <= 1e-12 * norm_l2(grid, Pf)


def test_trilinear_skew_and_zero_cases(grid):
    rng = np.random.default_rng(1)
    u, v, w = (smooth_field(grid, rng) for _ in range(3))
    assert trilinear_b(grid, u, v, v) == pytest.approx(0.0, abs=1e-12)
    assert trilinear_b(grid, np.zeros_like(u), v, w) == 0.0
    assert trilinear_b(grid, u, v, w) == pytest.approx(-trilinear_b(grid, u, w, v), abs=1e-12)


def test_trilinear_reduces_to_convective_form_for_solenoidal(grid):
    from dln.spectral import _velocity_gradients

    rng = np.random.default_rng(2)
    u = leray_project(grid, smooth_field(grid, rng))
    v, w = smooth_field(grid, rng), smooth_field(grid, rng)
    dv = _velocity_gradients(grid, v)
    conv = np.stack([u[0] * dv[i, 0] + u[1] * dv[i, 1] for i in range(2)])
    scale = max(abs(inner_l2(grid, conv, w)), 1.0)
    assert trilinear_b(grid, u, v, w) == pytest.approx(inner_l2(grid, conv, w), abs=1e-10 * scale)


def test_advection_constant_field_annihilated(grid):
    rng = np.random.default_rng(3)
    u = leray_project(grid, smooth_field(grid, rng))
    v = np.stack([np.full((grid.n, grid.n), 2.0), np.full((grid.n, grid.n), -1.0)])
    assert np.abs(advection_apply(grid, u, v)).max() < 1e-13


def test_advection_discrete_skew(grid):
    rng = np.random.default_rng(4)
    for _ in range(5):
        u = leray_project(grid, smooth_field(grid, rng))
        v = smooth_field(grid, rng)
        ip = inner_l2(grid, advection_apply(grid, u, v), v)
        assert abs(ip) <= 1e-12 * max(1.0, norm_l2(grid, v) ** 2 * norm_l2(grid, u))


def test_advection_two_mode_analytic(grid):
    # single-mode advecting and advected fields: the product is a hand
    # computable two-mode convolution
    k0 = 2.0 * np.pi / grid.length
    u = np.stack([np.sin(k0 * grid.y), np.zeros((grid.n, grid.n))])
    v = np.stack([np.zeros((grid.n, grid.n)), np.cos(k0 * grid.x)])
    got = advection_apply(grid, u, v)
    expect2 = -k0 * np.sin(k0 * grid.y) * np.sin(k0 * grid.x)
    assert np.abs(got[0]).max() < 1e-12
    assert np.abs(got[1] - expect2).max() < 1e-12


def test_norm_single_mode_ratios(grid):
    mode = np.cos(np.pi * grid.x) * np.sin(np.pi * grid.y)
    kmag = math.sqrt(2.0) * np.pi
    l2 = norm_l2(grid, mode)
    assert norm_h1_semi(grid, mode) / l2 == pytest.approx(kmag, rel=1e-12)
    assert norm_h_minus1(grid, mode) / l2 == pytest.approx(1.0 / kmag, rel=1e-12)


def test_norm_constant_field(grid):
    const = np.full((grid.n, grid.n), 3.0)
    assert norm_h1_semi(grid, const) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(NonZeroMean):
        norm_h_minus1(grid, const)


def test_discrete_norm_dispatch(grid):
    mode = np.sin(np.pi * grid.x)
    assert discrete_norm(grid, mode, "l2") == norm_l2(grid, mode)
    assert discrete_norm(grid, mode, "h1_semi") == norm_h1_semi(grid, mode)
    assert discrete_norm(grid, mode, "h_minus1") == norm_h_minus1(grid, mode)
    with pytest.raises(ValueError):
        discrete_norm(grid, mode, "h7")


def test_bochner_helpers():
    assert bochner_sup([1.0, 3.0, 2.0]) == 3.0
    # two samples with weights k_n + k_{n-1}
    assert bochner_l2_beta([0.5, 0.3], [2.0, 1.0]) == pytest.approx(math.sqrt(0.5 * 4 + 0.3))
    with pytest.raises(ValueError):
        bochner_l2_beta([0.5], [1.0, 2.0])


def test_dealias_idempotent(grid):
    rng = np.random.default_rng(5)
    f = rng.standard_normal((grid.n, grid.n))
    d = dealias(grid, f)
    assert np.abs(dealias(grid, d) - d).max() < 1e-13
