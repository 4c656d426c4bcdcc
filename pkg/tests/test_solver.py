import math

import numpy as np
import pytest

from thclab.config import build_grid, initial_state, parse_config
from thclab.grid import mean, norm2
from thclab.noise import CovarianceSpectrum, NoisePath, OUState, ou_stationary_on_path, shift_path
from thclab.operators import State
from thclab.solver import (
    BlowUpError,
    Model,
    cocycle_check,
    pullback_run,
    random_perturbation,
    run,
    step_random_ode,
    step_spde,
    transform_pair,
    twin_run,
)

from conftest import default_initial, make_params, small_config


def dist(a, b, grid):
    return math.sqrt(sum(norm2(x - y, grid) for x, y in zip((a.q, a.T, a.S), (b.q, b.T, b.S))))


def unforced(grid, **kw):
    p = make_params(grid, **kw)
    return p.with_(theta_profile=np.zeros(grid.ny), F_profile=np.zeros(grid.ny))


def test_zero_state_stays_zero(grid):
    p = unforced(grid)
    spec = CovarianceSpectrum.zeros(grid)
    s = State.zeros(grid)
    for i in range(20):
        s = step_spde(s, p, spec, None, i, 0.01)
    assert all(np.all(f == 0.0) for f in s.fields())


@pytest.mark.parametrize("g", [0.0, 1.0])
def test_noise_free_unforced_decay(grid, g):
    p = unforced(grid, g=g)
    spec = CovarianceSpectrum.zeros(grid)
    s = default_initial(grid, amp=2.0)
    ts = [norm2(s.T, grid) + norm2(s.S, grid)]
    qs = [norm2(s.q, grid)]
    for i in range(300):
        s = step_spde(s, p, spec, None, i, 2e-3)
        ts.append(norm2(s.T, grid) + norm2(s.S, grid))
        qs.append(norm2(s.q, grid))
    assert np.all(np.diff(ts) < 0)
    if g == 0.0:
        # without buoyancy nothing feeds the vorticity
        assert np.all(np.diff(qs) < 0)


def test_implicit_diffusion_stable_for_large_dt(grid):
    p = unforced(grid)
    spec = CovarianceSpectrum.zeros(grid)
    s = default_initial(grid)
    e0 = norm2(s.T, grid) + norm2(s.S, grid) + norm2(s.q, grid)
    for i in range(10):
        s = step_spde(s, p, spec, None, i, 10.0, jacobian=False)
    assert norm2(s.T, grid) + norm2(s.S, grid) + norm2(s.q, grid) < e0


def test_blow_up_detected(grid, params):
    s = default_initial(grid)
    s.T[3, 3] = np.nan
    with pytest.raises(BlowUpError):
        step_spde(s, params, CovarianceSpectrum.zeros(grid), None, 0, 1e-3)


def test_strong_order_one(grid, params):
    # RMS over an ensemble of paths: single paths scatter too much for a slope fit
    spec = CovarianceSpectrum.power_law(grid, 2.0, 1.0)
    horizon = 0.128
    dts = np.array([4e-3, 2e-3, 1e-3])
    factors = (64, 32, 16)
    err2 = np.zeros(3)
    for seed in range(6):
        base = NoisePath(seed, 6.25e-5)

        def solve(f):
            path = base.coarsen(f)
            s = default_initial(grid)
            for i in range(round(horizon / path.dt)):
                s = step_spde(s, params, spec, path, i, path.dt)
            return s

        ref = solve(1)
        for j, f in enumerate(factors):
            err2[j] += dist(solve(f), ref, grid) ** 2
    slope = np.polyfit(np.log(dts), np.log(np.sqrt(err2 / 6)), 1)[0]
    assert slope >= 0.9


def test_random_ode_with_zero_eta_matches_noise_free(grid, params):
    s = default_initial(grid)
    spec = CovarianceSpectrum.zeros(grid)
    zero = OUState.zeros(grid)
    a = step_spde(s, params, spec, None, 0, 2e-3)
    b = step_random_ode(s, zero, params, 2e-3)
    for x, y in zip(a.fields(), b.fields()):
        np.testing.assert_array_equal(x, y)


def test_linear_transform_exact(grid, params):
    spec = CovarianceSpectrum.power_law(grid, 2.0, 1.0)
    m = Model(grid, params, spec, 2e-3)
    path = NoisePath(3, 2e-3)
    eta0 = ou_stationary_on_path(spec, params, path)
    u0 = default_initial(grid)
    u, w, _ = transform_pair(m, u0, eta0, path, 1, ou="implicit", jacobian=False)
    assert dist(u, w, grid) <= 1e-10 * math.sqrt(norm2(u.q, grid) + norm2(u.T, grid) + norm2(u.S, grid))


def test_transform_gap_shrinks(grid, params):
    spec = CovarianceSpectrum.power_law(grid, 2.0, 1.0)
    base = NoisePath(5, 5e-4)
    eta0 = ou_stationary_on_path(spec, params, base)
    gaps = []
    for f in (4, 2, 1):
        path = base.coarsen(f)
        m = Model(grid, params, spec, path.dt)
        u, w, _ = transform_pair(m, default_initial(grid), eta0, path, round(0.04 / path.dt))
        gaps.append(dist(u, w, grid))
    assert gaps[0] > gaps[1] > gaps[2]
    # the literal coupling does not track u at all at this resolution
    m = Model(grid, params, spec, base.dt)
    u, w, _ = transform_pair(m, default_initial(grid), eta0, base, 80, coupling="literal")
    assert dist(u, w, grid) > 10 * gaps[2]


def test_run_salinity_and_poisson(small_cfg):
    traj, rec = run(small_cfg)
    ratio = np.abs(rec.column("mean_S")) / np.maximum(rec.column("norm_S"), 1e-300)
    assert np.all(ratio <= 1e-10)
    assert np.all(rec.column("poisson_residual") <= 1e-10)
    assert len(traj) == 1 + small_cfg.nsteps // small_cfg.time.snapshot_every
    assert len(rec) == small_cfg.nsteps + 1


def test_run_deterministic(small_cfg):
    t1, r1 = run(small_cfg)
    t2, r2 = run(small_cfg)
    np.testing.assert_array_equal(r1.table(), r2.table())
    for a, b in zip(t1, t2):
        for x, y in zip(a.fields(), b.fields()):
            np.testing.assert_array_equal(x, y)


def test_run_empty_interval():
    cfg = parse_config(small_config(**{"time.t1": "0.0"}))
    traj, rec = run(cfg)
    assert len(traj) == 1 and traj[0].t == 0.0
    assert len(rec) == 1


def test_cocycle(small_cfg):
    assert cocycle_check(small_cfg, 0.0, 0.1) == 0.0
    assert cocycle_check(small_cfg, 0.06, 0.08) == 0.0
    assert cocycle_check(small_cfg, 0.06, 0.08, mutate_offset=1) > 0.0


def test_cocycle_rejects_off_grid_times(small_cfg):
    with pytest.raises(ValueError):
        cocycle_check(small_cfg, 0.0011, 0.1)


def test_shift_consistency(grid, params):
    # simulating [0, t] on shift_path(s) equals [s, s + t] on the unshifted path
    spec = CovarianceSpectrum.power_law(grid, 2.0, 0.5)
    m = Model(grid, params, spec, 2e-3)
    path = NoisePath(8, 2e-3)
    a = m.integrate(default_initial(grid), shift_path(path, 13), 20)
    b = m.integrate(default_initial(grid), path, 20, start_step=13)
    for x, y in zip(a.fields(), b.fields()):
        np.testing.assert_array_equal(x, y)


def test_twin_zero_perturbation(small_cfg):
    tw = twin_run(small_cfg, None)
    assert np.all(tw.gap_H == 0.0)
    assert np.all(tw.noise_gap == 0.0)


def test_twin_gap_shrinks(small_cfg):
    pert = random_perturbation(build_grid(small_cfg), 1e-3, 1)
    tw = twin_run(small_cfg, pert)
    assert tw.gap_H[0] == pytest.approx(1e-3, rel=1e-10)
    assert tw.gap_H[-1] < tw.gap_H[0]
    assert np.all(tw.noise_gap == 0.0)


def test_random_perturbation_properties(grid):
    p = random_perturbation(grid, 0.5, 4)
    assert math.sqrt(norm2(p.q, grid) + norm2(p.T, grid) + norm2(p.S, grid)) == pytest.approx(0.5, rel=1e-12)
    assert abs(mean(p.S, grid)) < 1e-15
    assert np.all(p.q[grid.boundary_mask()] == 0.0)


def test_pullback_zero_returns_initial(small_cfg):
    (end,) = pullback_run(small_cfg, [0.0])
    init = initial_state(small_cfg)
    for x, y in zip(end.fields(), init.fields()):
        np.testing.assert_array_equal(x, y)


def test_pullback_contracts(small_cfg):
    grid = build_grid(small_cfg)
    u0 = initial_state(small_cfg)
    other = State(-2 * u0.psi, -2 * u0.q, -2 * u0.T, -2 * u0.S, u0.t)
    tb = [0.2, 0.4, 0.8]
    a = pullback_run(small_cfg, tb)
    b = pullback_run(small_cfg, tb, initial=other)
    gaps = [dist(x, y, grid) for x, y in zip(a, b)]
    assert gaps[0] > gaps[1] > gaps[2]
