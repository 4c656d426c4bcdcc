import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from thclab.grid import make_grid, norm2
from thclab.noise import (
    CovarianceSpectrum,
    NoisePath,
    OUState,
    control_parameter_check,
    modal_increment,
    ou_exact_step,
    ou_expected_norms,
    ou_stationary_sample,
    ou_transition,
    shift_path,
    smallest_k,
    wiener_increment,
)
from thclab.operators import grad_norm2

from conftest import make_params


@pytest.fixture
def spec(grid):
    return CovarianceSpectrum.power_law(grid, 2.0, 0.1)


def test_spectrum_rejects_constant_mode(grid):
    q = np.zeros(grid.shape)
    q[0, 0] = 1e-3
    with pytest.raises(ValueError, match="constant mode"):
        CovarianceSpectrum(q, grid)
    with pytest.raises(ValueError):
        CovarianceSpectrum.from_table(grid, [(0, 0, 1.0)])
    with pytest.raises(ValueError):
        CovarianceSpectrum(-np.ones(grid.shape), grid)


def test_power_law_trace(grid):
    s = CovarianceSpectrum.power_law(grid, 2.0, 0.37)
    assert s.trace == pytest.approx(0.37, rel=1e-13)
    assert s.coefficients[0, 0] == 0.0
    cut = CovarianceSpectrum.power_law(grid, 2.0, 0.37, cutoff=3)
    assert np.all(cut.coefficients[4:, :] == 0.0) and np.all(cut.coefficients[:, 4:] == 0.0)


def test_zero_spectrum_zero_increment(grid):
    z = CovarianceSpectrum.zeros(grid)
    assert np.all(wiener_increment(NoisePath(1, 0.01), 3, z, grid) == 0.0)


def test_increment_deterministic(grid, spec):
    a = wiener_increment(NoisePath(5, 0.01), 11, spec, grid)
    b = wiener_increment(NoisePath(5, 0.01), 11, spec, grid)
    np.testing.assert_array_equal(a, b)
    c = wiener_increment(NoisePath(6, 0.01), 11, spec, grid)
    assert not np.array_equal(a, c)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**63), a=st.integers(-50, 50), b=st.integers(-50, 50), i=st.integers(-20, 20))
def test_shift_laws(seed, a, b, i):
    p = NoisePath(seed, 0.01)
    shape = (4, 5)
    np.testing.assert_array_equal(shift_path(p, 0).normals(i, shape), p.normals(i, shape))
    np.testing.assert_array_equal(
        shift_path(shift_path(p, a), b).normals(i, shape), shift_path(p, a + b).normals(i, shape)
    )
    np.testing.assert_array_equal(shift_path(p, a).normals(i, shape), p.normals(i + a, shape))


def test_shift_by_five():
    p = NoisePath(9, 0.01)
    np.testing.assert_array_equal(shift_path(p, 5).normals(0, (3, 3)), p.normals(5, (3, 3)))


def test_coarsen_sums_fine_increments(grid, spec):
    fine = NoisePath(4, 0.001)
    coarse = fine.coarsen(4)
    assert coarse.dt == pytest.approx(0.004)
    total = sum(modal_increment(fine, 8 + j, spec) for j in range(4))
    np.testing.assert_allclose(modal_increment(coarse, 2, spec), total, rtol=1e-12, atol=1e-16)
    with pytest.raises(ValueError):
        shift_path(fine, 1).coarsen(4)


def test_mode_10_variance(grid, spec):
    path = NoisePath(2024, 0.01)
    draws = np.array([modal_increment(path, i, spec)[1, 0] for i in range(10_000)])
    expected = spec.coefficients[1, 0] * path.dt
    assert abs(np.var(draws) / expected - 1.0) < 0.05


def test_ou_pure_decay(grid, params):
    zero = CovarianceSpectrum.zeros(grid)
    rng = np.random.default_rng(0)
    a0 = rng.standard_normal(grid.shape)
    st0 = OUState(a0, zero.basis)
    dt = 0.003
    out = ou_exact_step(st0, dt, params, zero, NoisePath(1, dt), 0)
    np.testing.assert_allclose(out.amps, a0 * np.exp(-zero.decay_rates(params) * dt), rtol=1e-14)


def test_ou_closed_form(grid, params, spec):
    dt = 0.01
    path = NoisePath(3, dt)
    a0 = np.random.default_rng(1).standard_normal(grid.shape)
    out = ou_exact_step(OUState(a0, spec.basis), dt, params, spec, path, 7)
    mu = params.nu * (params.k + 1) * spec.eigenvalues
    xi = path.normals(7, grid.shape)[0]
    sd = np.sqrt(spec.coefficients * (1 - np.exp(-2 * mu * dt)) / np.where(mu > 0, 2 * mu, 1.0))
    expected = a0 * np.exp(-mu * dt) + sd * xi
    assert np.max(np.abs(out.amps - expected)) <= 1e-14 * np.max(np.abs(expected))


def test_ou_long_step_variance(grid, params, spec):
    _, sd = ou_transition(params, spec, 1e4)
    np.testing.assert_allclose(sd**2, spec.stationary_variance(params), rtol=1e-14)


def test_stationary_zero_spectrum(grid, params):
    z = CovarianceSpectrum.zeros(grid)
    assert np.all(ou_stationary_sample(z, params, 1).eta == 0.0)


def test_stationary_moments(grid, params, spec):
    rng = np.random.default_rng(11)
    n = 10_000
    l2 = np.empty(n)
    g2 = np.empty(n)
    for i in range(n):
        s = ou_stationary_sample(spec, params, rng)
        l2[i] = norm2(s.eta, grid)
        g2[i] = grad_norm2(s.eta, grid)
    e_l2, e_grad = ou_expected_norms(spec, params)
    # oracle: Parseval sum of modal variances, and the Ito balance tr Q / (2 nu (k + 1))
    mu = spec.decay_rates(params)
    pos = mu > 0
    assert e_l2 == pytest.approx(float(np.sum(spec.coefficients[pos] / (2 * mu[pos]))), rel=1e-12)
    assert e_grad == pytest.approx(spec.trace / (2 * params.nu * (params.k + 1)), rel=1e-12)
    assert abs(l2.mean() / e_l2 - 1) < 0.05
    assert abs(g2.mean() / e_grad - 1) < 0.05


def test_ou_lag_autocovariance(grid, params, spec):
    dt = 0.02
    lag = 5
    n = 4000
    rng = np.random.default_rng(5)
    a = np.empty(n)
    b = np.empty(n)
    for i in range(n):
        st0 = ou_stationary_sample(spec, params, rng)
        path = NoisePath(1000 + i, dt)
        x = st0
        for j in range(lag):
            x = ou_exact_step(x, dt, params, spec, path, j)
        a[i], b[i] = st0.amps[1, 0], x.amps[1, 0]
    mu = spec.decay_rates(params)[1, 0]
    expected = spec.coefficients[1, 0] * math.exp(-mu * lag * dt) / (2 * mu)
    sigma2 = spec.stationary_variance(params)[1, 0]
    # standard error of a product of two unit-correlated normals is at most sqrt(2 / n) sigma^2
    assert abs(np.mean(a * b) - expected) < 4 * math.sqrt(2.0 / n) * sigma2


def test_control_check_noiseless(grid, params):
    v = control_parameter_check(CovarianceSpectrum.zeros(grid), params, 0.1)
    assert v.passed
    assert v.expected_gamma == pytest.approx(math.pi**2 * params.nu - 0.1)


def test_control_check_smallest_k(grid):
    p = make_params(grid, nu=0.3, k=0.0)
    spec = CovarianceSpectrum.power_law(grid, 2.0, 5.0)
    k = smallest_k(spec, p)
    assert control_parameter_check(spec, p.with_(k=float(k)), 0.1).passed
    if k > 0:
        assert not control_parameter_check(spec, p.with_(k=float(k - 1)), 0.1).passed


def test_control_check_deficit(grid):
    p = make_params(grid, nu=0.1, k=0.0)
    spec = CovarianceSpectrum.power_law(grid, 2.0, 1e3)
    v = control_parameter_check(spec, p, 0.01)
    assert not v.passed
    assert v.threshold == pytest.approx(1e3 / 0.1**3)
    assert v.deficit == pytest.approx(1e3 / 0.1**3 - math.pi**2)


def test_control_check_epsilon_range(grid, params, spec):
    with pytest.raises(ValueError):
        control_parameter_check(spec, params, math.pi**2 * params.nu)


def test_temperedness_proxy(grid, params, spec):
    # |eta(theta_t omega)|^2_W12 / t -> 0: the running maximum grows far slower than t
    from thclab.diagnostics import eta_w12

    dt = 0.05
    path = NoisePath(17, dt)
    x = ou_stationary_sample(spec, params, 0)
    ts, vals = [], []
    for i in range(1, 20_001):
        x = ou_exact_step(x, dt, params, spec, path, i)
        if i % 100 == 0:
            ts.append(i * dt)
            vals.append(eta_w12(x, grid))
    ts, vals = np.array(ts), np.array(vals)
    ratio = np.maximum.accumulate(vals) / ts
    assert ratio[-1] < ratio[ts >= 100][0] / 5
