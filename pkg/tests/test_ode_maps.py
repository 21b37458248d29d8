import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from mshw import ode_maps as om
from mshw import phase_type as pt

from .conftest import COXIAN, MIXED


def coefficients(variant, params=COXIAN, alpha=1.0):
    return om.MapCoefficients.for_phase_type(variant, alpha, pt.validate(**params))


def random_paths(rng, batch, N, K, jumpy=False, scale=1.0):
    if jumpy:
        # piecewise constant with ~20 jumps
        idx = np.sort(rng.integers(1, N, size=(batch, 20)), axis=1)
        vals = np.zeros((batch, N, K + 1))
        for b in range(batch):
            steps = np.zeros((N, K + 1))
            steps[idx[b]] = rng.normal(size=(20, K + 1))
            vals[b] = np.cumsum(steps, axis=0)
        return vals * scale
    return np.cumsum(rng.normal(size=(batch, N, K + 1)), axis=1) * scale / np.sqrt(N)


def solve_on(coeff, f, dt, horizon, **kw):
    N = om.grid_size(dt, horizon)
    t = np.arange(N) * dt
    return t, om.picard_solve(coeff, om.GridPath(f(t), dt), **kw)


@pytest.mark.parametrize("variant", [om.PHI, om.PSI])
def test_zero_is_fixed_point(variant):
    y = om.GridPath.zeros(0.01, 2.0, 2)
    x = om.picard_solve(coefficients(variant), y)
    assert np.abs(x.values).max() == 0.0


def test_zero_is_fixed_point_general():
    coeff = om.MapCoefficients.upsilon(
        1, lambda x1, z: -np.sin(x1), lambda x1, z: -z, lambda x1: np.tanh(x1)[..., None], c=1.0
    )
    x = om.picard_solve(coeff, om.GridPath.zeros(0.01, 2.0, 1))
    assert np.abs(x.values).max() == 0.0


def test_general_variant_linear_decay():
    coeff = om.MapCoefficients.upsilon(1, lambda x1, z: -x1, lambda x1, z: np.zeros_like(z), lambda x1: np.zeros(x1.shape + (1,)), c=1.0)
    t, x = solve_on(coeff, lambda t: np.stack([np.ones_like(t), np.zeros_like(t)], -1), 1e-3, 3.0)
    assert_allclose(x.x, np.exp(-t), atol=1e-6)


def test_phi_constant_positive_input_stays_put():
    # alpha = 0 and x > 0: nothing drains x, and z = -x^- = 0
    coeff = om.MapCoefficients.phi(0.0, [1.0], [[1.0]])
    f = lambda t: np.stack([np.ones_like(t), np.zeros_like(t)], -1)
    dt = 0.01
    t, coarse = solve_on(coeff, f, dt, 1.0)
    _, fine = solve_on(coeff, f, dt / 10, 1.0)
    assert abs(coarse.x[-1] - fine.x[-1]) <= 5 * dt
    assert_allclose(coarse.x, 1.0, atol=1e-12)
    assert_allclose(coarse.z, 0.0, atol=1e-12)


@pytest.mark.parametrize("mu", [0.5, 1.0, 2.0])
def test_phi_constant_negative_input(mu):
    # z = -x^- and x = u0 + mu int x^-, so x(t) = u0 exp(-mu t)
    u0, dt = -1.5, 0.01
    coeff = om.MapCoefficients.phi(1.0, [1.0], [[mu]])
    f = lambda t: np.stack([np.full_like(t, u0), np.zeros_like(t)], -1)
    t, coarse = solve_on(coeff, f, dt, 2.0)
    _, fine = solve_on(coeff, f, dt / 10, 2.0)
    assert np.abs(coarse.x - fine.x[::10]).max() <= 5 * dt
    assert_allclose(coarse.x, u0 * np.exp(-mu * t), atol=5 * dt)
    assert_allclose(coarse.z[:, 0], np.minimum(coarse.x, 0.0), atol=1e-12)


@pytest.mark.parametrize("alpha", [0.3, 1.0, 4.0])
def test_psi_scalar_linear_ode(alpha):
    u0, dt = 2.0, 0.01
    coeff = om.MapCoefficients.psi(alpha, [1.0], [[1.3]])
    f = lambda t: np.stack([np.full_like(t, u0), np.zeros_like(t)], -1)
    t, coarse = solve_on(coeff, f, dt, 3.0)
    _, fine = solve_on(coeff, f, dt / 10, 3.0)
    assert np.abs(coarse.x - fine.x[::10]).max() <= 5 * dt
    assert_allclose(coarse.x, u0 * np.exp(-alpha * t), atol=5 * dt**2 * alpha**2 * u0)


@pytest.mark.parametrize("variant", [om.PHI, om.PSI])
@pytest.mark.parametrize("a", [1e-3, 1e-2, 1e-1, 0.5, 2.0, 10.0, 1e2, 1e3])
@pytest.mark.parametrize("params", [COXIAN, MIXED])
def test_positive_homogeneity(variant, a, params, rng):
    coeff = coefficients(variant, params)
    y = random_paths(rng, 8, 1001, 2, jumpy=True)
    base = om.picard_solve(coeff, om.GridPath(y, 0.01))
    scaled = om.picard_solve(coeff, om.GridPath(a * y, 0.01))
    err = np.abs(scaled.values - a * base.values).max()
    assert err <= a * 1e-9 + 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([om.PHI, om.PSI]), st.floats(1e-3, 1e3))
def test_homogeneity_property(seed, variant, a):
    rng = np.random.default_rng(seed)
    coeff = coefficients(variant, MIXED, alpha=0.7)
    y = random_paths(rng, 2, 301, 2, jumpy=True)
    base = om.picard_solve(coeff, om.GridPath(y, 0.02))
    scaled = om.picard_solve(coeff, om.GridPath(a * y, 0.02))
    assert np.abs(scaled.values - a * base.values).max() <= a * 1e-9 + 1e-12


@pytest.mark.parametrize("variant", [om.PHI, om.PSI])
def test_lipschitz_bound(variant, rng):
    coeff = coefficients(variant)
    dt, T = 0.01, 2.0
    N = om.grid_size(dt, T)
    y = random_paths(rng, 100, N, 2, jumpy=True)
    y2 = y + rng.uniform(0.0, 0.3) * random_paths(rng, 100, N, 2)
    delta = np.abs(y - y2).max(axis=(1, 2))
    out = om.picard_solve(coeff, om.GridPath(y, dt))
    out2 = om.picard_solve(coeff, om.GridPath(y2, dt))
    gap = out.sup_distance(out2)
    assert (gap <= coeff.lipschitz_bound(T) * delta).all()


@pytest.mark.parametrize("quadrature", [om.TRAPEZOID, om.LEFT])
@pytest.mark.parametrize("variant", [om.PHI, om.PSI])
def test_fixed_point_residual(variant, quadrature, rng):
    coeff = coefficients(variant, MIXED)
    y = om.GridPath(random_paths(rng, 5, 5001, 2, jumpy=True), 2e-3)
    tol = 1e-10
    x = om.picard_solve(coeff, y, tol=tol, quadrature=quadrature)
    scale = np.maximum(np.abs(y.values).max(axis=(1, 2)), np.abs(x.values).max(axis=(1, 2)))
    assert (om.fixed_point_residual(coeff, y, x, quadrature) <= 2 * tol * scale).all()


def test_grid_convergence_psi():
    coeff = coefficients(om.PSI, MIXED)

    def f(t):
        return np.stack([np.sin(3 * t), np.cos(t), -np.cos(t)], -1)

    sols = {dt: solve_on(coeff, f, dt, 4.0)[1] for dt in (0.04, 0.02, 0.01)}
    for dt in (0.04, 0.02):
        half = sols[dt / 2].values[::2]
        change = np.abs(sols[dt].values - half).max()
        assert change <= 1.0 * dt


def test_left_quadrature_is_explicit_euler(rng):
    # with left-point sums each grid value depends only on earlier ones
    ph = pt.validate(**MIXED)
    alpha = 0.8
    coeff = om.MapCoefficients.for_phase_type(om.PHI, alpha, ph)
    dt = 0.01
    y = random_paths(rng, 1, 401, 2, jumpy=True)[0]
    x = om.picard_solve(coeff, om.GridPath(y, dt), quadrature=om.LEFT).values
    ref = np.empty_like(y)
    acc = np.zeros(3)
    e = np.ones(2)
    G = np.eye(2) - np.outer(ph.p, e)
    for i in range(y.shape[0]):
        cur = y[i] + acc
        cur[1:] -= ph.p * max(-cur[0], 0.0)
        ref[i] = cur
        h1 = -alpha * max(cur[0], 0.0) - e @ ph.R @ cur[1:]
        h2 = -G @ ph.R @ cur[1:]
        acc = acc + dt * np.concatenate([[h1], h2])
    assert_allclose(x, ref, atol=1e-9)


def test_no_convergence_is_reported(rng):
    coeff = coefficients(om.PHI)
    y = om.GridPath(random_paths(rng, 1, 2001, 2), 0.01)
    with pytest.raises(om.NoConvergence):
        om.picard_solve(coeff, y, max_iter=2)


def test_window_choice():
    coeff = coefficients(om.PHI)
    m = om.window_length(coeff, 1e-3)
    assert (coeff.c + coeff.c**2) * m * 1e-3 <= 2.0 < (coeff.c + coeff.c**2) * (m + 1) * 1e-3


def test_lipschitz_constant_values():
    coeff = om.MapCoefficients.phi(1.0, [1.0], [[1.0]])
    assert coeff.c == pytest.approx(2.0)
    assert coeff.lipschitz_bound(1.0) == pytest.approx(3.0 * np.exp(6.0))


def test_map_wrappers(rng):
    coeff_phi = coefficients(om.PHI)
    coeff_psi = coefficients(om.PSI)
    u = np.zeros(101)
    v = np.zeros((101, 2))
    x, z = om.phi_map(u, v, coeff_phi, 0.01)
    assert x.shape == (101,) and z.shape == (101, 2)
    x, z = om.psi_map(u, v, coeff_psi, 0.01)
    assert np.abs(x).max() == 0 and np.abs(z).max() == 0
    with pytest.raises(ValueError):
        om.phi_map(u, v, coeff_psi, 0.01)
    with pytest.raises(om.GridPathError):
        om.psi_map(u, np.zeros((101, 3)), coeff_psi, 0.01)


@pytest.mark.parametrize(
    "values, dt",
    [(np.zeros((1, 3)), 0.1), (np.zeros((5, 3)), 0.0), (np.full((5, 3), np.nan), 0.1), (np.zeros(5), 0.1)],
)
def test_grid_path_validation(values, dt):
    with pytest.raises(om.GridPathError):
        om.GridPath(values, dt)


def test_grid_size():
    assert om.grid_size(0.1, 1.0) == 11
    assert om.grid_size(0.3, 1.0) == 4
    with pytest.raises(om.GridPathError):
        om.grid_size(0.1, -1.0)


def test_csv_round_trip(tmp_path, rng):
    path = om.GridPath(rng.normal(size=(51, 3)), 0.02)
    f = tmp_path / "p.csv"
    path.to_csv(f)
    assert f.read_text().splitlines()[0] == "t,x,z1,z2"
    back = om.GridPath.from_csv(f)
    assert back.dt == pytest.approx(0.02)
    assert_allclose(back.values, path.values, rtol=0, atol=0)


def test_coefficient_validation():
    with pytest.raises(ValueError):
        om.MapCoefficients.phi(-1.0, [1.0], [[1.0]])
    with pytest.raises(ValueError):
        om.MapCoefficients.psi(1.0, [0.5, 0.2], np.eye(2))
    with pytest.raises(ValueError):
        om.MapCoefficients.upsilon(1, None, None, None, c=0.0)
