import math

import numpy as np
import pytest

from dln.adaptive import ControllerConfig, adapt_loop_lte, adapt_loop_nd
from dln.coefficients import StepPair, Theta, one_leg_coefficients
from dln.nse2d import (
    FlowSolverConfig,
    ManufacturedCase,
    NseDlnStepper,
    nse_semi_implicit_step,
    run_fixed,
    stability_monitor,
)
from dln.spectral import (
    Grid2D,
    divergence,
    gradient,
    leray_project,
    norm_l2,
    vector_laplacian,
)


@pytest.fixture(scope="module")
def grid():
    return Grid2D(32, 2.0)


DECAY = ManufacturedCase("taylor_green_decay", omega=1.0, tau=100.0)
GROWTH = ManufacturedCase("taylor_green_growth", omega=1.0, tau=2500.0)


def test_case_validation():
    with pytest.raises(ValueError):
        ManufacturedCase("taylor_green_sideways")
    with pytest.raises(ValueError):
        ManufacturedCase(tau=-1.0)


def test_exact_fields_energy_and_norm(grid):
    u0 = DECAY.velocity(grid, 0.0)
    assert 0.5 * norm_l2(grid, u0) ** 2 == pytest.approx(1.0, rel=1e-12)
    assert norm_l2(grid, u0) == pytest.approx(math.sqrt(2.0), rel=1e-12)


def test_exact_fields_divergence_free(grid):
    for case in (DECAY, GROWTH):
        for t in (0.0, 0.37):
            assert np.abs(divergence(grid, case.velocity(grid, t))).max() < 1e-12


def test_pressure_zero_mean(grid):
    for case in (DECAY, GROWTH):
        p = case.pressure(grid, 0.21)
        assert abs(p.mean()) <= 1e-13 * max(1.0, np.abs(p).max())


def test_momentum_residual_of_exact_fields(grid):
    # method-of-manufactured-solutions check: u_t + u.grad u - nu lap u +
    # grad p - f must vanish on the exact fields
    from dln.spectral import _velocity_gradients

    for case in (DECAY, GROWTH):
        t = 0.4
        u = case.velocity(grid, t)
        w = case.omega
        u_t = case.sign * (2.0 * w * w * math.pi**2 / case.tau) * u
        du = _velocity_gradients(grid, u)
        conv = np.stack([u[0] * du[i, 0] + u[1] * du[i, 1] for i in range(2)])
        resid = (u_t + conv - case.nu * vector_laplacian(grid, u)
                 + gradient(grid, case.pressure(grid, t)) - case.forcing(grid, t))
        assert np.abs(resid).max() <= 1e-10


def test_decay_forcing_vanishes(grid):
    assert np.abs(DECAY.forcing(grid, 0.7)).max() == 0.0
    assert np.abs(DECAY.forcing_mms(grid, 0.7)).max() <= 1e-12


def test_growth_forcing_closed_form_matches_mms(grid):
    for t in (0.0, 1.3):
        d = GROWTH.forcing(grid, t) - GROWTH.forcing_mms(grid, t)
        assert np.abs(d).max() <= 1e-11
    # sign structure: growth forcing is the decay residual with the exponent
    # flipped, i.e. proportional to the velocity itself
    f = GROWTH.forcing(grid, 0.5)
    u = GROWTH.velocity(grid, 0.5)
    factor = 4.0 * math.pi**2 / GROWTH.tau
    assert np.abs(f - factor * u).max() <= 1e-12


def test_step_zero_data_zero_forcing(grid):
    z = np.zeros((2, grid.n, grid.n))
    res = nse_semi_implicit_step(grid, 0.0, 0.01, z, z, Theta(0.7), 0.01, 0.01, z)
    assert np.abs(res.u_next).max() == 0.0
    assert np.abs(res.p_beta).max() == 0.0


def test_one_step_local_error_third_order(grid):
    errs = []
    for k in (0.02, 0.01):
        u_prev = DECAY.velocity(grid, 0.0)
        u_curr = DECAY.velocity(grid, k)
        c = one_leg_coefficients(Theta(2 / 3), StepPair(k, k))
        t_beta = float(c.beta @ np.array([0.0, k, 2 * k]))
        f_beta = DECAY.forcing(grid, t_beta)
        res = nse_semi_implicit_step(grid, 0.0, k, u_prev, u_curr, Theta(2 / 3), k,
                                     DECAY.nu, f_beta)
        errs.append(norm_l2(grid, res.u_next - DECAY.velocity(grid, 2 * k)))
    assert errs[0] / errs[1] == pytest.approx(8.0, rel=0.2)


def test_discrete_momentum_residual_second_order(grid):
    # inserting exact fields into the scheme's operator leaves an O(k^2) defect
    from dln.spectral import advection_apply

    defects = []
    for k in (0.04, 0.02, 0.01):
        th = Theta(2 / 3)
        c = one_leg_coefficients(th, StepPair(k, k))
        t0 = 0.3
        ts = (t0 - k, t0, t0 + k)
        us = [DECAY.velocity(grid, t) for t in ts]
        t_beta = float(c.beta @ np.array(ts))
        u_beta = c.beta[2] * us[2] + c.beta[1] * us[1] + c.beta[0] * us[0]
        u_tilde = (c.beta[2] * (2.0 * us[1] - us[0]) + c.beta[1] * us[1] + c.beta[0] * us[0])
        lhs = (c.alpha[2] * us[2] + c.alpha[1] * us[1] + c.alpha[0] * us[0]) / c.khat
        resid = (lhs + leray_project(grid, advection_apply(grid, u_tilde, u_beta))
                 - DECAY.nu * vector_laplacian(grid, u_beta)
                 - leray_project(grid, DECAY.forcing(grid, t_beta)))
        defects.append(norm_l2(grid, resid))
    assert defects[0] / defects[1] == pytest.approx(4.0, rel=0.25)
    assert defects[1] / defects[2] == pytest.approx(4.0, rel=0.25)


def test_energy_identity_and_divergence_along_run(grid):
    run = run_fixed(grid, DECAY, Theta(2 / 3), k=0.02, t_end=0.5)
    assert np.abs(run.identity_residual).max() <= 1e-8
    assert run.div_rel.max() <= 1e-10


def test_forcing_free_budget_monotone(grid):
    run = run_fixed(grid, DECAY, Theta(2 / 3), k=0.02, t_end=0.5)
    # with f = 0 the pair energy alone decays monotonically
    assert np.all(np.diff(run.g_pairs) <= 1e-12)
    rep = stability_monitor(run)
    assert rep.ok
    assert np.all(rep.margins >= -1e-10)
    # the monitor budget (half the viscous term) is nonincreasing ...
    assert np.all(np.diff(rep.lhs) <= 1e-12)
    # ... and the full budget (whole viscous term) is conserved to tolerance
    full = run.g_pairs[1:] + np.cumsum(run.gamma_sq + run.visc_terms)
    assert np.abs(full - run.g_pairs[0]).max() <= 1e-8


def test_monitor_with_forcing(grid):
    run = run_fixed(grid, GROWTH, Theta(2 / 3), k=0.01, t_end=0.25)
    rep = stability_monitor(run)
    assert rep.ok


def test_midpoint_gamma_column_zero(grid):
    run = run_fixed(grid, DECAY, Theta(1.0), k=0.02, t_end=0.3)
    assert np.abs(run.gamma_sq).max() == 0.0


def test_solver_matches_exact_single_mode_recursion(grid):
    # for the decaying vortex the projected advection vanishes and each step
    # reduces to the scalar one-leg recursion on the mode amplitude
    th, k = Theta(0.55), 0.02
    run = run_fixed(grid, DECAY, th, k=k, t_end=0.2)
    lam = -DECAY.nu * 2.0 * math.pi**2
    c = one_leg_coefficients(th, StepPair(k, k))
    amps = [1.0, math.exp(lam * k)]
    for _ in range(len(run.times) - 2):
        z = c.khat * lam
        nxt = (-(c.alpha[1] - z * c.beta[1]) * amps[-1] - (c.alpha[0] - z * c.beta[0]) * amps[-2]) / (
            c.alpha[2] - z * c.beta[2]
        )
        amps.append(nxt)
    expect_err = [abs(a - math.exp(lam * t)) * math.sqrt(2.0) for a, t in zip(amps, run.times)]
    assert np.allclose(run.err_u_l2, expect_err, rtol=1e-6, atol=1e-13)


def test_nse_stepper_in_both_adaptive_loops(grid):
    st = NseDlnStepper(grid, GROWTH, Theta(2 / 3))
    u0, u1 = st.initial_states(0.0, 1e-3)
    cfg = ControllerConfig(tol=1e-7, kappa=0.95, k_min=1e-3, k_max=0.05,
                           estimator_kind="relative")
    led = adapt_loop_lte(st, Theta(2 / 3), cfg, 0.0, u0, u1, 1e-3, 0.05)
    assert led.summary()["accepted"] >= 3
    assert all(abs(r.extra["identity_residual"]) <= 1e-8 for r in led.rows)

    cfg_nd = ControllerConfig(tol=1e-14, k_min=1e-3, k_max=0.05)
    led_nd = adapt_loop_nd(st, Theta(2 / 3), cfg_nd, 0.0, u0, u1, 1e-3, 0.05)
    assert led_nd.summary()["accepted"] >= 3
    acc = [r for r in led_nd.accepted_rows if r.extra.get("phase") != "forced_accept"]
    assert all(r.estimator < 1e-14 for r in acc)


def test_solver_tolerance_config(grid):
    u_prev = DECAY.velocity(grid, 0.0)
    u_curr = DECAY.velocity(grid, 0.01)
    res = nse_semi_implicit_step(grid, 0.0, 0.01, u_prev, u_curr, Theta(2 / 3), 0.01,
                                 DECAY.nu, np.zeros_like(u_prev),
                                 FlowSolverConfig(rel_residual=1e-10, max_iters=50))
    assert res.iterations <= 50
    assert abs(res.identity_residual) <= 1e-8


def test_snapshot_roundtrip(tmp_path, grid):
    from dln.nse2d import read_snapshot, write_snapshot

    u = DECAY.velocity(grid, 0.3)
    path = tmp_path / "field.bin"
    write_snapshot(path, u, step_index=17, t=0.3, theta=2 / 3, k=0.01,
                   case_kind=DECAY.kind)
    data, meta = read_snapshot(path)
    assert data.shape == (2, grid.n, grid.n)
    assert np.abs(data - u).max() == 0.0
    assert meta["step_index"] == 17
    assert meta == {"time": 0.3, "theta": 2 / 3, "k": 0.01,
                    "case": "taylor_green_decay", "step_index": 17}
    # header is four little-endian int32 values
    raw = path.read_bytes()
    header = np.frombuffer(raw[:16], dtype="<i4")
    assert list(header) == [grid.n, grid.n, 2, 17]
    assert len(raw) == 16 + 2 * grid.n * grid.n * 8
