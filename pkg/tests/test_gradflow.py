import numpy as np
import pytest
import scipy.sparse as sp

from phasetopo.fem import p1_operators
from phasetopo.flow import FlowParams, FlowState, solve_adjoint, solve_navier_stokes
from phasetopo.gradflow import (SensitivityField, allen_cahn_matrix, allen_cahn_step,
                                cahn_hilliard_step, dissipation_check, sensitivity_density,
                                uzawa_update)
from phasetopo.mesh import all_wall_spec, diffuser_spec, generate_rect_mesh, mesh_from_triangles, plug_flow_spec
from phasetopo.phase import ModelParams, PhaseField, total_energy

MESH = generate_rect_mesh((0, 1), (0, 1), 6, 6, all_wall_spec())
CH = dict(scheme="cahn-hilliard", use_projection=False)


def test_ac_constant_preserved():
    params = ModelParams(tau=0.01, S0=1.0, S1=0.1)
    phi = PhaseField.constant(MESH, 0.37)
    new, rep = allen_cahn_step(phi, SensitivityField.constant(MESH, 0.0), params)
    np.testing.assert_allclose(new.values, 0.37, rtol=0, atol=1e-14)
    assert rep.dissipation_bound <= 0.0


@pytest.mark.parametrize("tau,S0", [(0.005, 1.0), (0.2, 100.0), (1.0, 0.0)])
def test_ac_constant_forcing(tau, S0):
    params = ModelParams(tau=tau, S0=S0, S1=0.5)
    new, rep = allen_cahn_step(PhaseField.constant(MESH, 0.6), SensitivityField.constant(MESH, 2.5), params)
    np.testing.assert_allclose(new.values, 0.6 - 2.5 / (1 / tau + S0), rtol=1e-12)
    nu = 2.5 / (1 / tau + S0) / tau
    assert rep.dissipation_bound == pytest.approx(-tau * nu ** 2, rel=1e-10)


def test_ac_two_triangle_dense_oracle():
    m = mesh_from_triangles([[0, 0], [1, 0], [1, 1], [0, 1]], [[0, 1, 2], [0, 2, 3]], all_wall_spec())
    # hand-built P1 matrices of the two right triangles (area 1/2 each)
    Mloc = (np.ones((3, 3)) + np.eye(3)) / 24.0
    M = np.zeros((4, 4))
    K = np.zeros((4, 4))
    Ka = np.array([[1, -1, 0], [-1, 2, -1], [0, -1, 1]]) / 2.0   # right angle at local vertex 1
    for tri in ([0, 1, 2], [0, 2, 3]):
        ix = np.ix_(tri, tri)
        M[ix] += Mloc
    for tri in ([0, 1, 2], [2, 3, 0]):
        K[np.ix_(tri, tri)] += Ka
    lumped = M.sum(axis=1)
    tau, eps1 = 1e-4, 0.001
    params = ModelParams(tau=tau, S0=0.0, S1=0.0, eps1=eps1)
    phi = np.array([0.1, 0.9, 0.4, 0.7])
    U = np.array([3.0, -1.0, 0.5, 2.0])
    field = SensitivityField(m, U, np.zeros(4), np.zeros(4), np.zeros(4))
    new, _ = allen_cahn_step(PhaseField(m, phi), field, params)
    ref = np.linalg.solve(M / tau + eps1 * K, M @ phi / tau - lumped * U)
    np.testing.assert_allclose(new.values, ref, rtol=0, atol=1e-12)


@pytest.mark.parametrize("tau,S0,S1", [(1e-4, 0.0, 0.0), (0.005, 1.0, 0.1), (10.0, 100.0, 1.0), (1.0, 0.0, 5.0)])
def test_ac_matrix_spd(tau, S0, S1):
    A = allen_cahn_matrix(MESH, ModelParams(tau=tau, S0=S0, S1=S1, eps1=0.001))
    assert abs(A - A.T).max() <= 1e-14 * abs(A).max()
    d = A.diagonal()
    off = np.asarray(abs(A).sum(axis=1)).ravel() - np.abs(d)
    # Gershgorin: every disc lies in the closed right half line
    assert (d > 0).all() and (d - off).min() >= -1e-12 * d.max()
    np.linalg.cholesky(A.toarray())


def test_ch_constant_preserved():
    params = ModelParams(tau=0.0025, S0=1.0, S1=0.5, **CH)
    new, nu, _ = cahn_hilliard_step(PhaseField.constant(MESH, 0.5), SensitivityField.constant(MESH, 0.0), params)
    np.testing.assert_allclose(new.values, 0.5, atol=1e-13)
    np.testing.assert_allclose(nu.values, 0.0, atol=1e-12)


def test_ch_constant_forcing_annihilated():
    params = ModelParams(tau=0.0025, S0=1.0, S1=0.5, **CH)
    new, nu, rep = cahn_hilliard_step(PhaseField.constant(MESH, 0.3), SensitivityField.constant(MESH, 1.7), params)
    np.testing.assert_allclose(new.values, 0.3, atol=1e-12)
    np.testing.assert_allclose(nu.values, 1.7, rtol=1e-12)
    assert abs(rep.dissipation_bound) <= 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_ch_mass_conserved(seed):
    rng = np.random.default_rng(seed)
    params = ModelParams(tau=10 ** rng.uniform(-4, 0), S0=rng.uniform(0, 10), S1=rng.uniform(0, 2), **CH)
    phi = PhaseField(MESH, rng.uniform(-0.5, 1.5, MESH.n_vertices))
    U = SensitivityField(MESH, rng.standard_normal(MESH.n_vertices) * 100, np.zeros(MESH.n_vertices),
                         np.zeros(MESH.n_vertices), np.zeros(MESH.n_vertices))
    new, _, rep = cahn_hilliard_step(phi, U, params)
    assert abs(new.mass() - phi.mass()) <= 1e-10 * MESH.domain_area
    assert rep.dissipation_bound <= 0.0


@pytest.mark.parametrize("ell,V,expected", [(0.0, 0.4, 0.0), (0.0, 0.5, 0.5), (0.5, 0.35, 0.25)])
def test_uzawa(ell, V, expected):
    params = ModelParams(beta=5.0, volume_target=0.4)
    phi = PhaseField.constant(MESH, 1.0 - V)
    assert uzawa_update(ell, phi, params) == pytest.approx(expected, abs=1e-14)


def test_dissipation_check():
    rep = dissipation_check([5.0, 4.0, 3.5, 1.0])
    assert rep.monotone and rep.flagged == []
    rep = dissipation_check([3.0, 3.0 + 1e-6])
    assert rep.flagged == [1] and rep.largest_index == 1
    assert rep.largest_increase == pytest.approx(1e-6)
    rep = dissipation_check([10.0, 9.0, 9.0 + 5e-9, 12.0, 11.0])
    assert rep.flagged == [3]
    with pytest.raises(ValueError):
        dissipation_check([1.0])


def plug(mesh):
    return FlowState.interpolate(mesh, lambda x, y: 1 + 0 * x, lambda x, y: 0 * x)


def test_sensitivity_zero_flow():
    params = ModelParams(beta=0.0)
    z = FlowState.zero(MESH)
    U = sensitivity_density(PhaseField.constant(MESH, 0.5), z, z, params)
    np.testing.assert_array_equal(U.total, 0.0)
    assert U.warnings  # zero flow force: normalization skipped


def test_sensitivity_plug_drag():
    m = generate_rect_mesh((0, 1), (0, 1), 5, 5, plug_flow_spec())
    params = ModelParams(eps2=1e300, beta=0.0, normalize_sensitivity=False)
    U = sensitivity_density(PhaseField.constant(m, 0.5), plug(m), FlowState.zero(m), params)
    np.testing.assert_allclose(U.total, -500.0, rtol=1e-12)
    np.testing.assert_allclose(U.well + U.flow + U.volume + U.multiplier, U.total, rtol=0, atol=1e-12)


def test_sensitivity_volume_and_multiplier():
    params = ModelParams(beta=5.0, volume_target=0.4)
    z = FlowState.zero(MESH)
    U = sensitivity_density(PhaseField.constant(MESH, 0.5), z, z, params, ell=0.25)
    np.testing.assert_allclose(U.volume, -0.5, rtol=1e-12)
    np.testing.assert_array_equal(U.multiplier, -0.25)


def test_sensitivity_normalized():
    m = generate_rect_mesh((0, 1), (0, 1), 8, 8, diffuser_spec())
    fp = FlowParams(boundary=diffuser_spec())
    phi = PhaseField.from_function(m, lambda x, y: 0.3 + 0.4 * x)
    state, _ = solve_navier_stokes(phi, fp)
    adj = solve_adjoint(state, phi, fp)
    U = sensitivity_density(phi, state, adj, ModelParams(eta1=3.0))
    lumped = p1_operators(m).lumped
    assert np.sqrt(lumped @ U.flow ** 2) == pytest.approx(3.0, rel=1e-12)


def reduced_energy(values, mesh, params, fp):
    phi = PhaseField(mesh, values)
    state, _ = solve_navier_stokes(phi, fp)
    return total_energy(phi, state, params, fp).total


def test_adjoint_gradient_fd():
    spec = diffuser_spec()
    m = generate_rect_mesh((0, 1), (0, 1), 8, 8, spec)
    fp = FlowParams(mu=0.1, boundary=spec, newton_tol=1e-12)
    params = ModelParams(normalize_sensitivity=False, eps1=0.01)
    rng = np.random.default_rng(11)
    v = rng.uniform(0.1, 0.9, m.n_vertices)
    phi = PhaseField(m, v)
    state, _ = solve_navier_stokes(phi, fp)
    adj = solve_adjoint(state, phi, fp)
    ops = p1_operators(m)
    grad = params.eps1 * (ops.stiffness @ v) + sensitivity_density(phi, state, adj, params).load()
    h = 1e-5
    for _ in range(2):
        d = rng.standard_normal(m.n_vertices)
        fd = (reduced_energy(v + h * d, m, params, fp) - reduced_energy(v - h * d, m, params, fp)) / (2 * h)
        assert grad @ d == pytest.approx(fd, rel=1e-4)
