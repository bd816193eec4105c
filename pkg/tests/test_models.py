import numpy as np
import pytest

from wc4dvar.models import (
    ADConfig,
    HeatConfig,
    Mesh1D,
    Mesh2D,
    ad2d_problem,
    assemble_advection_diffusion,
    assemble_heat,
    cavity_velocity,
    heat1d_problem,
    homogenized_kappa,
    interpolation_matrix_1d,
    interpolation_matrix_2d,
    oscillatory_kappa,
    snapshot_propagator,
)


def test_two_element_heat_assembly():
    fem = assemble_heat(Mesh1D(2), homogenized_kappa(1.0))
    assert fem.stiffness.toarray() == pytest.approx(np.array([[4.0]]))
    assert fem.mass.toarray() == pytest.approx(np.array([[1.0 / 3.0]]))


def test_stiffness_annihilates_constants():
    fem = assemble_heat(Mesh1D(9), oscillatory_kappa(0.25), eliminate_boundary=False)
    assert np.allclose(fem.stiffness @ np.ones(10), 0.0, atol=1e-12)


def test_oscillatory_stiffness_integrates_kappa_exactly():
    # sum of cell integrals of kappa equals the integral over (0, 1) of 2 + sin(2 pi x / eps) = 2
    mesh = Mesh1D(64)
    fem = assemble_heat(mesh, oscillatory_kappa(2.0**-4), eliminate_boundary=False)
    x = np.linspace(0, 1, 65)
    energy = x @ (fem.stiffness @ x)  # u = x has unit gradient
    assert energy == pytest.approx(2.0, rel=1e-6)


def test_homogenized_step_decays_energy():
    fem = assemble_heat(Mesh1D(40), homogenized_kappa(np.sqrt(3.0)))
    S = snapshot_propagator(fem, 1e-4, 5).densify()
    N = fem.mass.toarray()
    rng = np.random.default_rng(0)
    for _ in range(20):
        u = rng.standard_normal(39)
        v = S @ u
        assert v @ N @ v <= u @ N @ u * (1 + 1e-12)


def test_sparse_and_dense_propagators_agree():
    fem = assemble_heat(Mesh1D(16), homogenized_kappa(1.0))
    a = snapshot_propagator(fem, 1e-3, 4, dense=True)
    b = snapshot_propagator(fem, 1e-3, 4, dense=False)
    assert np.allclose(a.densify(), b.densify(), atol=1e-13)
    assert np.allclose(a.T.densify(), b.T.densify(), atol=1e-13)


def test_sensor_on_node_gives_canonical_row():
    nodes = Mesh1D(8).nodes
    O = interpolation_matrix_1d(nodes, [0.25, 0.3125], interior=None).toarray()
    assert np.array_equal(O[0], np.eye(9)[2])
    assert np.allclose(O[1], 0.5 * (np.eye(9)[2] + np.eye(9)[3]))
    mesh = Mesh2D(5)
    O2 = interpolation_matrix_2d(mesh, mesh.coords[[7, 12]]).toarray()
    assert np.array_equal(O2, np.eye(25)[[7, 12]])


def test_interpolation_reproduces_linear_functions():
    mesh = Mesh2D(6)
    pts = np.random.default_rng(1).uniform(-1, 1, (30, 2))
    f = 1.0 + 2.0 * mesh.coords[:, 0] - 3.0 * mesh.coords[:, 1]
    vals = interpolation_matrix_2d(mesh, pts) @ f
    assert np.allclose(vals, 1.0 + 2.0 * pts[:, 0] - 3.0 * pts[:, 1])
    with pytest.raises(ValueError):
        interpolation_matrix_2d(mesh, [[1.5, 0.0]])


def test_heat_instance_layout(heat):
    p = heat.problem
    assert p.dims.n_s == 28 and p.dims.n_T == 10 and p.dims.d_S == 127
    assert np.allclose(heat.sensors, np.linspace(0.025, 0.975, 28))
    assert heat.info["dt"] == pytest.approx(4e-2 / 2560)


def test_heat_mesh_must_resolve_oscillations():
    with pytest.raises(ValueError):
        heat1d_problem(HeatConfig(n_cells=100), seed=0)


def _dense_p1(mesh, diffusivity=1.0):
    """Element-by-element P1 mass and stiffness with the textbook local matrices."""
    P, T = mesh.coords, mesh.triangles
    n = P.shape[0]
    M, K = np.zeros((n, n)), np.zeros((n, n))
    for tri in T:
        x = P[tri]
        D = np.array([[1, *x[0]], [1, *x[1]], [1, *x[2]]])
        area = 0.5 * abs(np.linalg.det(D))
        grads = np.linalg.inv(D)[1:].T  # gradient of each hat function
        M[np.ix_(tri, tri)] += area / 12 * (np.ones((3, 3)) + np.eye(3))
        K[np.ix_(tri, tri)] += diffusivity * area * grads @ grads.T
    return M, K


def test_2d_assembly_matches_dense_oracle():
    mesh = Mesh2D(3)
    zero = lambda x, y: (0 * x, 0 * y)  # noqa: E731
    fem = assemble_advection_diffusion(mesh, zero, diffusivity=0.7)
    M, K = _dense_p1(mesh, 0.7)
    assert np.allclose(fem.mass.toarray(), M, atol=1e-15)
    assert np.allclose(fem.stiffness.toarray(), K, atol=1e-14)
    assert np.allclose(fem.advection.toarray(), 0.0)
    dt = 0.05
    step = snapshot_propagator(fem, dt, 1)
    c = np.random.default_rng(2).standard_normal(9)
    assert np.allclose(step.apply(c), np.linalg.solve(M + dt * K, M @ c), atol=1e-13)


def test_constants_are_steady_and_mass_is_conserved():
    mesh = Mesh2D(7)
    zero = lambda x, y: (0 * x, 0 * y)  # noqa: E731
    fem = assemble_advection_diffusion(mesh, zero)
    step = snapshot_propagator(fem, 0.01, 3)
    assert np.allclose(step.apply(np.ones(49)), 1.0, atol=1e-10)
    c = np.random.default_rng(3).standard_normal(49)
    one = np.ones(49)
    assert one @ (fem.mass @ step.apply(c)) == pytest.approx(one @ (fem.mass @ c), rel=1e-8)


def test_advection_matrix_matches_quadrature_of_linear_field():
    # for v = (1, 0), B_ij = int phi_i d/dx phi_j, so B applied to x gives int phi_i = row sums of M
    mesh = Mesh2D(5)
    const = lambda x, y: (np.ones_like(x), np.zeros_like(y))  # noqa: E731
    fem = assemble_advection_diffusion(mesh, const)
    x = mesh.coords[:, 0]
    assert np.allclose(fem.advection @ x, fem.mass @ np.ones(25), atol=1e-13)


def test_velocity_variants():
    h = 1e-6
    x, y = 0.3, -0.4
    for name, div_free in (("divergence_free", True), ("verbatim", False)):
        v = cavity_velocity(name)
        div = (v(x + h, y)[0] - v(x - h, y)[0]) / (2 * h) + (v(x, y + h)[1] - v(x, y - h)[1]) / (2 * h)
        assert (abs(div) < 1e-6) == div_free
    with pytest.raises(ValueError):
        cavity_velocity("other")


def test_ad2d_layout_and_model_error(ad2d):
    p = ad2d.problem
    assert p.dims.n_s == 81 and p.dims.n_T == 10 and p.dims.d_S == 17 * 17
    traj = ad2d.truth.propagate(ad2d.u0_true).reshape(11, -1)
    q = 0.05 * np.linalg.norm(traj[1:], axis=1) / 9.0
    assert np.allclose(ad2d.info["q"], q)
    assert np.allclose(np.diag(p.model_error.blocks[3].densify()), q[3] ** 2)


def test_ad2d_alpha_override():
    a = ad2d_problem(ADConfig(grid=9), seed=0, alpha=0.01)
    b = ad2d_problem(ADConfig(grid=9), seed=0, alpha=0.02)
    assert np.allclose(np.array(b.info["q"]), 2 * np.array(a.info["q"]))
