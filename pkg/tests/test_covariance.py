import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wc4dvar.covariance import (
    BlockDiagCovariance,
    CapabilityError,
    CovarianceView,
    DenseCovariance,
    DiagonalCovariance,
    EllipticPriorCovariance,
    ScaledIdentityCovariance,
    SingularCovarianceError,
    sample_error_covariance,
    spectral_norm_sym,
)
from wc4dvar.models import HeatConfig, Mesh1D, assemble_heat, homogenized_kappa, oscillatory_kappa, snapshot_propagator
from wc4dvar.operators import EvolutionFamily, LinearOperator


def test_scaled_identity_actions():
    c = ScaledIdentityCovariance(3, 4.0)
    x = np.array([1.0, -2.0, 8.0])
    assert np.array_equal(c.apply_factor(x), 2 * x)
    assert np.array_equal(c.apply_inverse(x), x / 4)
    assert c.logdet() == pytest.approx(3 * np.log(4.0))


def test_block_diag_inverse():
    c = BlockDiagCovariance([ScaledIdentityCovariance(1, 1.0), ScaledIdentityCovariance(1, 9.0)])
    assert np.allclose(c.apply_inverse(np.array([3.0, 3.0])), [3.0, 1.0 / 3.0])


def test_elliptic_prior_matches_dense_assembly():
    fem = assemble_heat(Mesh1D(12), homogenized_kappa(1.0))
    N, K = fem.mass.toarray(), fem.stiffness.toarray()
    B = EllipticPriorCovariance(fem.mass, fem.stiffness, gamma=0.1)
    E = np.linalg.inv(0.1 * K + N)
    ref = E @ N @ E
    dense = B.densify()
    assert np.linalg.norm(dense - ref) / np.linalg.norm(ref) <= 1e-10
    G = B.apply_factor(np.eye(11))
    assert np.allclose(G @ G.T, ref, rtol=1e-10, atol=1e-14)
    assert np.allclose(B.apply_inverse(dense), np.eye(11), atol=1e-8)
    assert B.logdet() == pytest.approx(np.linalg.slogdet(ref)[1], rel=1e-10)


def _models(seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((4, 4))
    fem = assemble_heat(Mesh1D(5), homogenized_kappa(2.0))
    return [
        ScaledIdentityCovariance(4, 2.5),
        DiagonalCovariance(rng.uniform(0.1, 3.0, 4)),
        DenseCovariance(X @ X.T + 0.3 * np.eye(4)),
        EllipticPriorCovariance(fem.mass, fem.stiffness, 0.5, 1.5),
        BlockDiagCovariance([ScaledIdentityCovariance(2, 0.5), DiagonalCovariance([1.0, 4.0])]),
    ]


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_action_identities(seed):
    for c in _models(seed):
        C = c.densify()
        n = c.dim
        G = c.apply_factor(np.eye(c.factor_cols))
        assert np.allclose(G @ G.T, C, atol=1e-10 * np.abs(C).max())
        assert np.allclose(c.apply_inverse(C), np.eye(n), atol=1e-8)
        Gi = c.apply_inverse_factor(np.eye(n))
        assert np.allclose(Gi @ G, np.eye(n), atol=1e-8)
        assert np.allclose(c.apply_inverse_factor_transpose(np.eye(n)), Gi.T, atol=1e-10)
        assert np.allclose(c.apply_factor_transpose(np.eye(n)), G.T, atol=1e-12)
        assert c.logdet() == pytest.approx(np.linalg.slogdet(C)[1], rel=1e-9, abs=1e-9)


def test_restriction_of_noise_blocks():
    c = BlockDiagCovariance([DiagonalCovariance([1.0, 2.0, 3.0]), ScaledIdentityCovariance(3, 5.0)])
    r = c.restrict((0, 2))
    assert np.allclose(np.diag(r.densify()), [1.0, 3.0, 5.0, 5.0])


def test_singular_dense_covariance_refuses_inverse():
    c = DenseCovariance(np.ones((2, 2)))
    assert not c.positive_definite
    G = c.apply_factor(np.eye(2))
    assert np.allclose(G @ G.T, np.ones((2, 2)))
    with pytest.raises(SingularCovarianceError):
        c.apply_inverse(np.ones(2))
    with pytest.raises(SingularCovarianceError):
        c.logdet()


def test_capability_view_enforces_license():
    view = CovarianceView(ScaledIdentityCovariance(2, 4.0), {"apply"}, "R")
    assert np.allclose(view.operator("apply").apply(np.ones(2)), 4.0)
    with pytest.raises(CapabilityError):
        view.operator("inverse")
    assert view.used == {"apply"}


def test_spectral_norm_dense_and_power():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((30, 30))
    S = X @ X.T
    ref = np.linalg.eigvalsh(S).max()
    assert spectral_norm_sym(S) == pytest.approx(ref, rel=1e-12)
    assert spectral_norm_sym(S, dense_limit=10, power_steps=500) == pytest.approx(ref, rel=1e-3)


def test_identical_models_give_pure_nugget():
    step = LinearOperator.from_matrix(np.array([[0.5, 0.1], [0.0, 0.7]]))
    fam = EvolutionFamily.constant(step, 3)
    Q = sample_error_covariance(fam, fam, ScaledIdentityCovariance(2, 1.0), np.zeros(2), 10, seed=0)
    for q in Q:
        assert np.array_equal(q.densify(), 1e-12 * np.eye(2))


def test_sample_covariance_hand_computation():
    # differences {1, -1}: unbiased sample variance is 2, nugget 1e-12 + 1e-6 * 2
    true = EvolutionFamily([LinearOperator.from_matrix([[2.0]])])
    approx = EvolutionFamily([LinearOperator.from_matrix([[1.0]])])
    Q = sample_error_covariance(true, approx, ScaledIdentityCovariance(1, 1.0), np.zeros(1), 2,
                                initial_states=np.array([[1.0, -1.0]]))
    assert Q[0].densify()[0, 0] == pytest.approx(2.0 + 1e-12 + 2e-6, rel=1e-14)


def test_heat_error_covariances_are_positive_definite():
    cfg = HeatConfig()
    mesh = Mesh1D(cfg.n_cells)
    true = EvolutionFamily.constant(snapshot_propagator(assemble_heat(mesh, oscillatory_kappa(cfg.eps)),
                                                        cfg.dt, cfg.substeps), cfg.n_T)
    fem = assemble_heat(mesh, homogenized_kappa(cfg.kappa0))
    approx = EvolutionFamily.constant(snapshot_propagator(fem, cfg.dt, cfg.substeps), cfg.n_T)
    B = EllipticPriorCovariance(fem.mass, fem.stiffness, cfg.gamma)
    Q = sample_error_covariance(true, approx, B, np.zeros(mesh.interior.size), 40, seed=3)
    assert len(Q) == cfg.n_T
    for q in Q:
        M = q.densify()
        assert np.array_equal(M, M.T)
        assert q.positive_definite
        w = np.linalg.eigvalsh(M)
        # Q = C + delta I with delta = 1e-12 + 1e-6 ||C||, so ||Q|| = ||C|| + delta
        delta = (1e-12 + 1e-6 * w.max()) / (1 + 1e-6)
        assert w.min() >= 0.99 * delta


def test_sample_covariance_requires_two_samples():
    fam = EvolutionFamily([LinearOperator.from_matrix([[1.0]])])
    with pytest.raises(ValueError):
        sample_error_covariance(fam, fam, ScaledIdentityCovariance(1, 1.0), np.zeros(1), 1, seed=0)
