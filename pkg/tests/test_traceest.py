import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wc4dvar.criteria import build_criterion_operator, criterion_exact, eigenvalues
from wc4dvar.models import random_problem
from wc4dvar.operators import LinearOperator
from wc4dvar.traceest import (
    LanczosError,
    NystromApprox,
    hutchinson_trace,
    lanczos_apply_f,
    lanczos_block,
    slq_trace,
    xnystrace_dense,
    xnystrace_from_sketch,
    xnystrace_logdet,
)


def dense_f(E, f):
    w, V = np.linalg.eigh(E)
    fw = np.log(w) if f == "log" else np.log(np.abs(w))
    return (V * fw) @ V.T


def test_identity_gives_zero_in_one_iteration():
    z = np.random.default_rng(0).standard_normal(7)
    out, run = lanczos_apply_f(np.eye(7), z)
    assert run.n_iter == 1
    assert np.allclose(out, 0.0, atol=1e-15)


def test_diagonal_exponentials():
    E = np.diag(np.exp([1.0, 2.0, 3.0]))
    z = np.ones(3) / np.sqrt(3)
    out, run = lanczos_apply_f(E, z)
    assert run.n_iter <= 3
    assert np.allclose(out, dense_f(E, "log") @ z, atol=1e-10)


@settings(max_examples=20, deadline=None)
@given(n=st.integers(2, 30), seed=st.integers(0, 2**31))
def test_lanczos_matches_dense_matrix_function(n, seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, n))
    E = np.eye(n) + X @ X.T / n
    z = rng.standard_normal(n)
    out, _ = lanczos_apply_f(E, z, rel_tol=1e-14)
    assert np.allclose(out, dense_f(E, "log") @ z, atol=1e-8 * np.linalg.norm(z))


def test_lanczos_basis_is_orthonormal():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((60, 60))
    E = np.eye(60) + X @ X.T
    run = lanczos_block(lambda v: E @ v, rng.standard_normal((60, 3)), rel_tol=1e-14)[0]
    Q = run.basis
    assert np.allclose(Q.T @ Q, np.eye(run.n_iter), atol=1e-12)
    T = run.tridiagonal
    assert np.allclose(Q.T @ E @ Q, T, atol=1e-8 * np.abs(T).max())


def test_log_abs_on_saddle_point_operator():
    p = random_problem(4, 3, 3, seed=2)
    op = build_criterion_operator(p, None, "saddle_II")
    W = op.operator.densify()
    z = np.random.default_rng(3).standard_normal(W.shape[0])
    out, _ = lanczos_apply_f(op.operator, z, "log_abs", rel_tol=1e-14)
    ref = dense_f(0.5 * (W + W.T), "log_abs") @ z
    assert np.linalg.norm(out - ref) / np.linalg.norm(ref) <= 1e-6


def test_log_of_indefinite_operator_is_refused():
    E = np.diag([1.0, -2.0, 3.0])
    with pytest.raises(LanczosError):
        lanczos_apply_f(E, np.ones(3), "log")


def test_scaled_identity_has_zero_variance():
    est = slq_trace(3.0 * np.eye(10), "log", n_samples=5, seed=1)
    assert np.allclose(est.per_sample, 10 * np.log(3.0), rtol=1e-13)
    assert est.std == pytest.approx(0.0, abs=1e-12)


def test_slq_is_deterministic_and_nested():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((40, 40))
    E = np.eye(40) + X @ X.T / 40
    a, b = slq_trace(E, n_samples=8, seed=9), slq_trace(E, n_samples=8, seed=9)
    assert a.value == b.value and np.array_equal(a.per_sample, b.per_sample)
    c = slq_trace(E, n_samples=3, seed=9)
    assert np.allclose(c.per_sample, a.per_sample[:3], rtol=1e-12)


def test_slq_is_unbiased_on_average():
    rng = np.random.default_rng(5)
    X = rng.standard_normal((30, 30))
    E = np.eye(30) + X @ X.T / 30
    exact = np.linalg.slogdet(E)[1]
    est = slq_trace(E, n_samples=2000, seed=0, rel_tol=1e-12)
    assert abs(est.value - exact) <= 4 * est.std / np.sqrt(2000)


def test_xnystrace_zero_operator():
    est = xnystrace_dense(np.zeros((12, 12)), 6, seed=0)
    assert est.value == 0.0


def test_xnystrace_exact_for_low_rank():
    rng = np.random.default_rng(6)
    U = rng.standard_normal((25, 3))
    psi = U @ U.T
    est = xnystrace_dense(psi, 6, seed=1)
    assert est.value == pytest.approx(np.trace(psi), rel=1e-9)


def test_xnystrace_beats_hutchinson_on_dense_psd():
    rng = np.random.default_rng(7)
    Q, _ = np.linalg.qr(rng.standard_normal((20, 20)))
    psi = (Q * 0.7 ** np.arange(20)) @ Q.T
    tr = np.trace(psi)
    xe = [abs(xnystrace_dense(psi, 8, s).value - tr) for s in range(100)]
    he = [abs(hutchinson_trace(psi, 8, s).value - tr) for s in range(100)]
    assert np.mean(xe) < np.mean(he)


def test_nystrom_approximation_is_exact_on_range():
    rng = np.random.default_rng(8)
    U = rng.standard_normal((15, 4))
    psi = U @ U.T
    X = rng.standard_normal((15, 6))
    ny = NystromApprox.build(X, psi @ X)
    assert np.allclose(ny.dense(), psi, atol=1e-9)
    assert ny.trace() == pytest.approx(np.trace(psi), rel=1e-9)


def test_loo_terms_match_direct_construction():
    rng = np.random.default_rng(9)
    X = rng.standard_normal((12, 12))
    psi = X @ X.T
    Om = rng.standard_normal((12, 5))
    terms = xnystrace_from_sketch(Om, psi @ Om)
    for j in range(5):
        keep = [i for i in range(5) if i != j]
        ny = NystromApprox.build(Om[:, keep], psi @ Om[:, keep]).dense()
        w = Om[:, j]
        assert terms[j] == pytest.approx(np.trace(ny) + w @ (psi - ny) @ w, rel=1e-8)


def test_xnystrace_logdet_on_small_criterion():
    p = random_problem(5, 3, 4, seed=10)
    op = build_criterion_operator(p, None, "preconditioned")
    exact = criterion_exact(op).value
    est = xnystrace_logdet(op.operator, op.operator.rows, seed=0, rel_tol=1e-14)
    # with as many test vectors as the dimension the Nystrom part is exact
    assert est.value == pytest.approx(exact, rel=1e-8)


def test_xnystrace_argument_checks():
    with pytest.raises(ValueError):
        xnystrace_logdet(np.eye(4), 1)
    with pytest.raises(ValueError):
        xnystrace_logdet(np.eye(4), 5)


def test_slq_on_linear_operator_and_eigenvalues():
    p = random_problem(3, 2, 2, seed=11)
    op = build_criterion_operator(p, None, "preconditioned")
    lam = eigenvalues(op)
    assert np.all(lam >= 1.0 - 1e-12)
    assert isinstance(op.operator, LinearOperator)
    est = slq_trace(op.operator, "log", n_samples=4, seed=0)
    assert np.isfinite(est.value) and est.n_samples == 4
