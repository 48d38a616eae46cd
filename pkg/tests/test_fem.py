from math import factorial

import numpy as np
import pytest
import scipy.sparse as sp

from phasetopo.errors import MeshTopologyError, SingularMatrixError
from phasetopo.fem import (FunctionSpace, eval_basis, mini_mass, p1_lumped_mass, p1_mass,
                           p1_stiffness, quadrature_rule, solve_saddle, solve_spd)
from phasetopo.flow import FlowParams, assemble_oseen, initial_state
from phasetopo.mesh import all_wall_spec, generate_rect_mesh, mesh_from_triangles
from phasetopo.phase import PhaseField


def dirichlet_integral(a, b, c):
    """Integral of l1^a l2^b l3^c over the reference triangle (area 1/2)."""
    return factorial(a) * factorial(b) * factorial(c) * 2 / factorial(a + b + c + 2) * 0.5


def quad(rule, a, b, c):
    lam = rule.points
    return 0.5 * np.sum(rule.weights * lam[:, 0] ** a * lam[:, 1] ** b * lam[:, 2] ** c)


@pytest.mark.parametrize("degree", range(1, 7))
def test_quadrature_exactness(degree):
    rule = quadrature_rule(degree)
    assert (rule.weights > 0).all()
    assert rule.weights.sum() == pytest.approx(1.0, abs=1e-14)
    for a in range(degree + 1):
        for b in range(degree + 1 - a):
            for c in range(degree + 1 - a - b):
                assert quad(rule, a, b, c) == pytest.approx(dirichlet_integral(a, b, c), rel=1e-12)


def test_centroid_rule():
    rule = quadrature_rule(1)
    assert rule.n_points == 1
    np.testing.assert_allclose(rule.points[0], [1 / 3] * 3)
    assert rule.weights[0] == 1.0


def test_degree2_x_squared():
    # x = l2 on the reference triangle
    assert quad(quadrature_rule(2), 0, 2, 0) == pytest.approx(1 / 12, rel=1e-14)


def test_bubble_squared():
    exact = 729 * dirichlet_integral(2, 2, 2)
    assert quad(quadrature_rule(6), 2, 2, 2) * 729 == pytest.approx(exact, rel=1e-12)


@pytest.mark.parametrize("degree", [0, 7])
def test_unsupported_degree(degree):
    with pytest.raises(ValueError):
        quadrature_rule(degree)


def test_space_sizes(square2):
    assert FunctionSpace(square2, "scalar-P1").dof_count == 9
    assert FunctionSpace(square2, "vector-MINI").dof_count == 2 * (9 + 8)


def test_basis_values(square2):
    p1 = FunctionSpace(square2, "scalar-P1")
    mini = FunctionSpace(square2, "vector-MINI")
    vals, grads = eval_basis(p1, 3, [1.0, 0.0, 0.0])
    np.testing.assert_array_equal(vals, [1, 0, 0])
    np.testing.assert_allclose(grads.sum(axis=0), 0.0, atol=1e-14)
    vals, _ = eval_basis(mini, 3, [1 / 3, 1 / 3, 1 / 3])
    assert vals[3, 0] == pytest.approx(1.0, rel=1e-14)
    assert vals[7, 1] == pytest.approx(1.0, rel=1e-14)
    with pytest.raises(ValueError):
        eval_basis(p1, 0, [0.5, 0.6, -0.1])


def test_basis_gradient_matches_fd(square2):
    mini = FunctionSpace(square2, "vector-MINI")
    lam = np.array([0.2, 0.3, 0.5])
    t = 5
    _, grads = eval_basis(mini, t, lam)
    p = square2.vertices[square2.triangles[t]]
    x0 = lam @ p
    # barycentric coordinates of a physical point
    T = np.column_stack([p[1] - p[0], p[2] - p[0]])

    def bary(x):
        s = np.linalg.solve(T, x - p[0])
        return np.array([1 - s.sum(), s[0], s[1]])

    h = 1e-6
    for d in range(2):
        e = np.zeros(2)
        e[d] = h
        vp, _ = eval_basis(mini, t, bary(x0 + e))
        vm, _ = eval_basis(mini, t, bary(x0 - e))
        np.testing.assert_allclose((vp - vm) / (2 * h), grads[:, :, d], atol=1e-8)


def test_degenerate_triangle():
    verts = [[0, 0], [1, 0], [2, 0]]
    with pytest.raises(MeshTopologyError):
        mesh_from_triangles(verts, [[0, 1, 2]], all_wall_spec())


def test_mass_and_stiffness_invariants():
    m = generate_rect_mesh((0, 1.5), (-0.5, 0.5), 7, 5, all_wall_spec())
    M = p1_mass(m)
    np.testing.assert_allclose(np.asarray(M.sum(axis=1)).ravel(), p1_lumped_mass(m), rtol=1e-12)
    assert M.sum() == pytest.approx(1.5, rel=1e-12)
    K = p1_stiffness(m)
    kinf = abs(K).sum(axis=1).max()
    assert np.abs(K @ np.ones(m.n_vertices)).max() <= 1e-12 * kinf
    # linear field: |grad x|^2 integrates to the area
    x = m.vertices[:, 0]
    assert x @ (K @ x) == pytest.approx(1.5, rel=1e-12)


def test_mini_mass_spd(square2):
    Mv = mini_mass(square2).toarray()
    np.testing.assert_allclose(Mv, Mv.T, atol=1e-15)
    np.linalg.cholesky(Mv)


def test_spd_identity():
    b = np.array([1.0, -2.0, 3.5])
    np.testing.assert_allclose(solve_spd(sp.identity(3), b), b)


def test_spd_laplacian():
    n = 40
    A = sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1])
    x = solve_spd(A, A @ np.ones(n), tol=1e-13)
    np.testing.assert_allclose(x, np.ones(n), rtol=1e-10)


def test_spd_random():
    rng = np.random.default_rng(7)
    Q = rng.standard_normal((50, 50))
    A = Q @ Q.T + 50 * np.eye(50)
    xs = rng.standard_normal(50)
    b = A @ xs
    x = solve_spd(sp.csr_matrix(A), b, tol=1e-13)
    assert np.linalg.norm(A @ x - b) <= 1e-13 * np.linalg.norm(b)


def test_spd_deterministic():
    rng = np.random.default_rng(1)
    Q = rng.standard_normal((30, 30))
    A = sp.csr_matrix(Q @ Q.T + 30 * np.eye(30))
    b = rng.standard_normal(30)
    assert np.array_equal(solve_spd(A, b), solve_spd(A, b))


def test_saddle_3x3():
    A = np.array([[4.0, 1.0, 2.0], [0.5, -3.0, 1.0], [2.0, 1.0, 0.0]])
    b = np.array([1.0, 2.0, 3.0])
    x = solve_saddle(sp.csr_matrix(A), b)
    np.testing.assert_allclose(x, np.linalg.inv(A) @ b, rtol=1e-13)


@pytest.mark.parametrize("n", [1, 2])
def test_saddle_stokes_manufactured(n):
    spec = all_wall_spec()
    if n == 1:
        m = mesh_from_triangles([[0, 0], [1, 0], [1, 1], [0, 1]], [[0, 1, 2], [0, 2, 3]], spec)
    else:
        m = generate_rect_mesh((0, 1), (0, 1), 2, 2, spec)
    params = FlowParams(mu=1.0, boundary=spec)
    A, _ = assemble_oseen(initial_state(m, spec), PhaseField.constant(m, 1.0), params)
    xs = np.random.default_rng(3).standard_normal(A.shape[0])
    b = A @ xs
    x = solve_saddle(A, b)
    assert np.linalg.norm(A @ x - b) <= 1e-10 * max(1.0, np.linalg.norm(b))


def test_saddle_zero_row():
    A = sp.csr_matrix(np.array([[1.0, 2.0, 0.0], [0.0, 0.0, 0.0], [3.0, 1.0, 1.0]]))
    with pytest.raises(SingularMatrixError) as exc:
        solve_saddle(A, np.ones(3))
    assert exc.value.pivot == 1
