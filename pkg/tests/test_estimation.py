from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pmuplace.estimation import (
    CovarianceNotPSDError,
    SingularGainError,
    StateCovariance,
    UncertaintyParams,
    build_measurement_model,
    check_observable,
    complex_covariance,
    error_covariance,
    factorize,
    max_uncertainty,
    wls_gain,
)
from pmuplace.grid import FIXTURES, build_admittance, load_fixture, load_grid
from pmuplace.placement import BusChannels, ChannelAssignment, assign_channels, channel_config
from pmuplace.validation import monte_carlo_uncertainty

from conftest import chain_doc, grid_doc, random_grids

P = UncertaintyParams()


def model_for(g, x, case="B", params=P):
    return build_measurement_model(g, assign_channels(g, x, channel_config(g, case)), g.zin, params)


def voltage_only(n=2, sigma=0.01):
    g = load_grid(grid_doc(n, [(i, i + 1, 0.0, 0.1) for i in range(n - 1)]))
    asg = ChannelAssignment(n, tuple(BusChannels(i, ()) for i in range(n)))
    return g, build_measurement_model(g, asg, np.zeros(n, dtype=int), UncertaintyParams(sigma, sigma))


def test_params_validation():
    with pytest.raises(ValueError):
        UncertaintyParams(sigma_v=0)
    with pytest.raises(ValueError):
        UncertaintyParams(zi_sigma_factor=0.5)
    assert UncertaintyParams(sigma_v=0.02).common_sigma == 0.02
    assert UncertaintyParams(sigma_r=0.03).common_sigma == 0.03


def test_two_bus_row_counts():
    g = load_grid(grid_doc(2, [(0, 1, 0.0, 0.1)]))
    m = model_for(g, [1, 0], "A")
    assert (m.m_v, m.m_i, m.m_z) == (1, 1, 0)
    assert m.H.shape == (4, 4)


def test_three_bus_with_zero_injection():
    g = load_grid(chain_doc(3, zin=(1,)))
    m = model_for(g, [1, 0, 0], "A")
    assert (m.m_v, m.m_i, m.m_z) == (1, 1, 1)
    assert m.H.shape == (6, 6)


def test_zero_injection_row_matches_nodal_equations():
    g = load_grid(chain_doc(3, zin=(1,)))
    m = model_for(g, [1, 0, 0], "A")
    y = build_admittance(g)
    big = np.block([[y.G, -y.B], [y.B, y.G]])
    zr = [k for k, r in enumerate(m.rows) if r.kind == "Z" and r.part == "R"][0]
    zi = [k for k, r in enumerate(m.rows) if r.kind == "Z" and r.part == "I"][0]
    np.testing.assert_allclose(m.H[zr], big[1], atol=1e-12)
    np.testing.assert_allclose(m.H[zi], big[3 + 1], atol=1e-12)


def test_current_row_uses_series_admittance():
    g = load_grid(grid_doc(2, [(0, 1, 0.02, 0.1)]))
    m = model_for(g, [1, 0], "A")
    y = 1 / complex(0.02, 0.1)
    ir = [k for k, r in enumerate(m.rows) if r.kind == "I" and r.part == "R"][0]
    np.testing.assert_allclose(m.H[ir], [y.real, -y.real, -y.imag, y.imag], atol=1e-12)


def test_weights():
    g = load_grid(grid_doc(2, [(0, 1, 0.0, 0.1)], base=1.0))
    m = model_for(g, [1, 0], "A")
    assert m.variances[0] == pytest.approx(1e-4)
    assert m.variances[2] == pytest.approx((0.01 * 10.0) ** 2)
    assert np.all(np.diag(m.R) > 0)


def test_wls_gain_identity_two_bus():
    g = load_grid(grid_doc(2, [(0, 1, 0.0, 0.1)]))
    m = model_for(g, [1, 0], "A")
    assert np.abs(wls_gain(m) @ m.H - np.eye(4)).max() <= 1e-10


def test_square_invertible_gain_is_inverse():
    g = load_grid(grid_doc(2, [(0, 1, 0.03, 0.1)]))
    m = model_for(g, [1, 0], "A")
    np.testing.assert_allclose(wls_gain(m), np.linalg.inv(m.H), atol=1e-10)


def test_chain3_gain_identity():
    g = load_fixture("chain3")
    m = model_for(g, [1, 0, 1])
    assert np.abs(wls_gain(m) @ m.H - np.eye(6)).max() <= 1e-8


def test_voltage_only_covariance():
    _, m = voltage_only(2, 0.01)
    cov = error_covariance(m)
    np.testing.assert_allclose(cov.phi_real, 1e-4 * np.eye(4), atol=1e-16)
    np.testing.assert_allclose(cov.phi_complex, 2e-4 * np.eye(2), atol=1e-16)


def test_max_uncertainty_examples():
    iso = StateCovariance(np.eye(4) * 1e-4, 2e-4 * np.eye(2).astype(complex))
    assert max_uncertainty(iso, 1.0) == pytest.approx(100 * 0.01 * np.sqrt(2))
    diag = StateCovariance(np.zeros((4, 4)), np.diag([1e-4, 4e-4]).astype(complex))
    assert max_uncertainty(diag, 1.0) == pytest.approx(2.0)


def test_negative_eigenvalue_is_reported():
    bad = StateCovariance(np.zeros((2, 2)), np.array([[-1e-6]], dtype=complex))
    with pytest.raises(CovarianceNotPSDError, match="not PSD"):
        max_uncertainty(bad)


def test_singular_gain_is_reported():
    g = load_fixture("chain5")
    m = model_for(g, [1, 0, 0, 0, 0], "A")
    with pytest.raises(SingularGainError, match="singular gain"):
        factorize(m)
    H = np.array([[1.0, 0.0], [2.0, 1e-14]])
    with pytest.raises(SingularGainError):
        check_observable(H)


def test_chain3_covariance_matches_monte_carlo():
    g = load_fixture("chain3")
    m = model_for(g, [1, 0, 1])
    cov = error_covariance(m)
    rep = monte_carlo_uncertainty(m, trials=100_000, rng_seed=7, analytic_covariance=cov.phi_real)
    assert rep.max_rel_error <= 0.05
    assert abs(rep.empirical_U - max_uncertainty(cov)) / max_uncertainty(cov) <= 0.05


def test_complex_covariance_blocks():
    rng = np.random.default_rng(0)
    M = rng.standard_normal((6, 6))
    phi = M @ M.T
    c = complex_covariance(phi)
    assert np.allclose(c.real, phi[:3, :3] + phi[3:, 3:])
    assert np.allclose(c.imag, 0.5 * ((phi[3:, :3] - phi[:3, 3:]) - (phi[3:, :3] - phi[:3, 3:]).T))


def _random_observable(g, data, case):
    x = np.array(data.draw(st.lists(st.integers(0, 1), min_size=g.n_buses, max_size=g.n_buses)))
    m = model_for(g, x, case)
    try:
        return m, factorize(m)
    except SingularGainError:
        m = model_for(g, np.ones(g.n_buses, dtype=int), case)
        return m, factorize(m)


@given(st.sampled_from(FIXTURES), st.sampled_from("AB"), st.data())
def test_gain_and_covariance_identities(name, case, data):
    g = load_fixture(name)
    m, fact = _random_observable(g, data, case)
    F = wls_gain(m, fact)
    assert np.abs(F @ m.H - np.eye(m.n_state)).max() <= 1e-8
    cov = error_covariance(m, fact)
    frf = (F * m.variances[None, :]) @ F.T
    assert np.abs(frf - cov.phi_real).max() <= 1e-8 * np.abs(cov.phi_real).max()
    assert np.abs(cov.phi_complex - cov.phi_complex.conj().T).max() <= 1e-12
    assert np.trace(cov.phi_complex).real == pytest.approx(np.trace(cov.phi_real), rel=1e-12)
    assert np.linalg.eigvalsh(cov.phi_complex)[0] >= -1e-10


@given(random_grids(max_buses=7), st.sampled_from("AB"), st.data())
def test_adding_a_device_never_raises_uncertainty(g, case, data):
    x = np.ones(g.n_buses, dtype=int)
    b = data.draw(st.integers(0, g.n_buses - 1))
    x[b] = 0
    base = model_for(g, x, case)
    try:
        factorize(base)
    except SingularGainError:
        return
    before = max_uncertainty(error_covariance(base))
    x[b] = 1
    after = max_uncertainty(error_covariance(model_for(g, x, case)))
    assert after <= before * (1 + 1e-10) + 1e-10


@given(st.sampled_from(FIXTURES), st.floats(0.1, 10.0))
def test_uncertainty_scale_law(name, k):
    g = load_fixture(name)
    x = np.ones(g.n_buses, dtype=int)
    u1 = max_uncertainty(error_covariance(model_for(g, x, "A")), g.base_voltage)
    u2 = max_uncertainty(error_covariance(model_for(g, x, "A", P.scaled(k))), g.base_voltage)
    assert u2 == pytest.approx(k * u1, rel=1e-10)
