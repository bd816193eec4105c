"""Gaussian covariance models for the background, model error, and observation noise.

Each model exposes the covariance action, its inverse, and a factor ``G`` with
``Gamma = G G^T`` (plus ``G^{-1}`` where ``G`` is square).  Factorizations are
computed once at construction; every apply is reentrant.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .operators import DimensionError, EvolutionFamily, LinearOperator
from .rng import generator

CAPABILITIES = ("apply", "inverse", "factor", "inverse_factor")


class SingularCovarianceError(np.linalg.LinAlgError):
    """An inverse was requested from a covariance that is not positive definite."""


class CapabilityError(RuntimeError):
    """A formulation asked for a covariance action it is not allowed to use."""


class CovarianceModel:
    """Base class.  Subclasses implement the underscore methods on 2-D blocks."""

    dim: int
    factor_cols: int
    name = "Gamma"

    def _check(self, x, n):
        x = np.asarray(x, dtype=float)
        if x.shape[0] != n:
            raise DimensionError(f"{self.name}: operand has {x.shape[0]} rows, expected {n}")
        return x

    def apply(self, x):
        return self._apply(self._check(x, self.dim))

    def apply_inverse(self, x):
        return self._apply_inverse(self._check(x, self.dim))

    def apply_factor(self, x):
        return self._apply_factor(self._check(x, self.factor_cols))

    def apply_factor_transpose(self, x):
        return self._apply_factor_transpose(self._check(x, self.dim))

    def apply_inverse_factor(self, x):
        """``G^{-1} x``; only defined for square factors."""
        if self.factor_cols != self.dim:
            raise DimensionError(f"{self.name}: factor is rectangular")
        return self._apply_inverse_factor(self._check(x, self.dim))

    def apply_inverse_factor_transpose(self, x):
        if self.factor_cols != self.dim:
            raise DimensionError(f"{self.name}: factor is rectangular")
        return self._apply_inverse_factor_transpose(self._check(x, self.dim))

    # operator views
    def operator(self) -> LinearOperator:
        return LinearOperator((self.dim, self.dim), self.apply, self.apply, self.name)

    def inverse_operator(self) -> LinearOperator:
        return LinearOperator((self.dim, self.dim), self.apply_inverse, self.apply_inverse, self.name + "^-1")

    def factor_operator(self) -> LinearOperator:
        return LinearOperator(
            (self.dim, self.factor_cols), self.apply_factor, self.apply_factor_transpose, "G_" + self.name
        )

    def inverse_factor_operator(self) -> LinearOperator:
        return LinearOperator(
            (self.dim, self.dim),
            self.apply_inverse_factor,
            self.apply_inverse_factor_transpose,
            "G_" + self.name + "^-1",
        )

    def densify(self) -> np.ndarray:
        return self.apply(np.eye(self.dim))

    def logdet(self) -> float:
        """Dense log-determinant (desk scale only)."""
        sign, val = np.linalg.slogdet(self.densify())
        if sign <= 0:
            raise SingularCovarianceError(f"{self.name} is not positive definite")
        return float(val)


class ScaledIdentityCovariance(CovarianceModel):
    def __init__(self, dim: int, variance: float, name: str = "sigma2 I"):
        if variance <= 0:
            raise ValueError("variance must be positive")
        self.dim = self.factor_cols = int(dim)
        self.variance = float(variance)
        self._sd = np.sqrt(self.variance)
        self.name = name

    def _apply(self, x):
        return self.variance * x

    def _apply_inverse(self, x):
        return x / self.variance

    def _apply_factor(self, x):
        return self._sd * x

    _apply_factor_transpose = _apply_factor

    def _apply_inverse_factor(self, x):
        return x / self._sd

    _apply_inverse_factor_transpose = _apply_inverse_factor

    def restrict(self, indices) -> "ScaledIdentityCovariance":
        return ScaledIdentityCovariance(len(indices), self.variance, self.name)

    def logdet(self) -> float:
        return self.dim * float(np.log(self.variance))


class DiagonalCovariance(CovarianceModel):
    def __init__(self, variances, name: str = "diag"):
        v = np.asarray(variances, dtype=float)
        if v.ndim != 1 or np.any(v <= 0):
            raise ValueError("variances must be a positive vector")
        self.var = v
        self._sd = np.sqrt(v)
        self.dim = self.factor_cols = v.size
        self.name = name

    def _col(self, v, x):
        return v.reshape((-1,) + (1,) * (x.ndim - 1))

    def _apply(self, x):
        return self._col(self.var, x) * x

    def _apply_inverse(self, x):
        return x / self._col(self.var, x)

    def _apply_factor(self, x):
        return self._col(self._sd, x) * x

    _apply_factor_transpose = _apply_factor

    def _apply_inverse_factor(self, x):
        return x / self._col(self._sd, x)

    _apply_inverse_factor_transpose = _apply_inverse_factor

    def restrict(self, indices) -> "DiagonalCovariance":
        return DiagonalCovariance(self.var[np.asarray(indices, dtype=int)], self.name)

    def logdet(self) -> float:
        return float(np.sum(np.log(self.var)))


class DenseCovariance(CovarianceModel):
    """An explicitly stored symmetric covariance (e.g. a sampled model-error block).

    A Cholesky factor is used when the matrix is positive definite.  Otherwise
    the factor falls back to the clipped symmetric square root and every
    inverse action raises :class:`SingularCovarianceError`.
    """

    def __init__(self, matrix, name: str = "Q"):
        m = np.asarray(matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DimensionError("covariance matrix must be square")
        if not np.allclose(m, m.T, rtol=1e-12, atol=1e-14 * max(1.0, np.abs(m).max(initial=0.0))):
            raise ValueError("covariance matrix must be symmetric")
        self.matrix = 0.5 * (m + m.T)
        self.dim = self.factor_cols = m.shape[0]
        self.name = name
        try:
            self._chol = np.linalg.cholesky(self.matrix) if self.dim else np.zeros((0, 0))
        except np.linalg.LinAlgError:
            self._chol = None
            w, v = np.linalg.eigh(self.matrix)
            self._sqrt = v * np.sqrt(np.clip(w, 0.0, None))

    @property
    def positive_definite(self) -> bool:
        return self._chol is not None

    def _require_pd(self):
        if self._chol is None:
            raise SingularCovarianceError(f"{self.name} is singular; add a nugget before inverting")

    def _apply(self, x):
        return self.matrix @ x

    def _apply_inverse(self, x):
        self._require_pd()
        return sla.cho_solve((self._chol, True), x)

    def _apply_factor(self, x):
        return (self._chol if self._chol is not None else self._sqrt) @ x

    def _apply_factor_transpose(self, x):
        return (self._chol if self._chol is not None else self._sqrt).T @ x

    def _apply_inverse_factor(self, x):
        self._require_pd()
        return sla.solve_triangular(self._chol, x, lower=True)

    def _apply_inverse_factor_transpose(self, x):
        self._require_pd()
        return sla.solve_triangular(self._chol, x, lower=True, trans="T")

    def densify(self):
        return self.matrix.copy()

    def logdet(self) -> float:
        self._require_pd()
        return float(2.0 * np.sum(np.log(np.diag(self._chol))))


class EllipticPriorCovariance(CovarianceModel):
    """``Gamma = (gamma K + delta N)^{-1} N (gamma K + delta N)^{-1}``.

    The factor is ``G = (gamma K + delta N)^{-1} C`` with ``N = C C^T`` the
    dense Cholesky factorization of the mass matrix.
    """

    def __init__(self, mass, stiffness, gamma: float, delta: float = 1.0, name: str = "Gamma_B"):
        if gamma <= 0 or delta <= 0:
            raise ValueError("gamma and delta must be positive")
        self.mass = sp.csc_matrix(mass, dtype=float)
        self.stiffness = sp.csc_matrix(stiffness, dtype=float)
        self.gamma, self.delta = float(gamma), float(delta)
        self.dim = self.factor_cols = self.mass.shape[0]
        self.name = name
        self.elliptic = sp.csc_matrix(self.gamma * self.stiffness + self.delta * self.mass)
        self._lu = spla.splu(self.elliptic)
        self._mass_chol = np.linalg.cholesky(self.mass.toarray())

    def _solve(self, x):
        return self._lu.solve(np.ascontiguousarray(x))

    def _apply(self, x):
        return self._solve(self.mass @ self._solve(x))

    def _apply_inverse(self, x):
        y = sla.cho_solve((self._mass_chol, True), self.elliptic @ x)
        return self.elliptic @ y

    def _apply_factor(self, x):
        return self._solve(self._mass_chol @ x)

    def _apply_factor_transpose(self, x):
        return self._mass_chol.T @ self._solve(x)

    def _apply_inverse_factor(self, x):
        return sla.solve_triangular(self._mass_chol, self.elliptic @ x, lower=True)

    def _apply_inverse_factor_transpose(self, x):
        return self.elliptic @ sla.solve_triangular(self._mass_chol, x, lower=True, trans="T")


class BlockDiagCovariance(CovarianceModel):
    def __init__(self, blocks: Sequence[CovarianceModel], name: str = "blkdiag"):
        self.blocks = tuple(blocks)
        self.name = name
        self._off = np.cumsum([0] + [b.dim for b in self.blocks])
        self._foff = np.cumsum([0] + [b.factor_cols for b in self.blocks])
        self.dim = int(self._off[-1])
        self.factor_cols = int(self._foff[-1])

    def _map(self, x, method, in_off, out_off, out_dim):
        out = np.empty((out_dim,) + x.shape[1:])
        for i, b in enumerate(self.blocks):
            out[out_off[i]:out_off[i + 1]] = getattr(b, method)(x[in_off[i]:in_off[i + 1]])
        return out

    def _apply(self, x):
        return self._map(x, "apply", self._off, self._off, self.dim)

    def _apply_inverse(self, x):
        return self._map(x, "apply_inverse", self._off, self._off, self.dim)

    def _apply_factor(self, x):
        return self._map(x, "apply_factor", self._foff, self._off, self.dim)

    def _apply_factor_transpose(self, x):
        return self._map(x, "apply_factor_transpose", self._off, self._foff, self.factor_cols)

    def _apply_inverse_factor(self, x):
        return self._map(x, "apply_inverse_factor", self._off, self._off, self.dim)

    def _apply_inverse_factor_transpose(self, x):
        return self._map(x, "apply_inverse_factor_transpose", self._off, self._off, self.dim)

    def restrict(self, indices) -> "BlockDiagCovariance":
        """Restrict every block to the same sensor subset (block-wise ``S^T R S``)."""
        return BlockDiagCovariance([b.restrict(indices) for b in self.blocks], self.name)

    def logdet(self) -> float:
        return float(sum(b.logdet() for b in self.blocks))


class CovarianceView:
    """Capability-restricted access to a covariance model.

    Builders obtain callables through :meth:`method`; asking for a capability
    outside ``allowed`` raises :class:`CapabilityError` at construction time.
    """

    _methods = {
        "apply": ("apply", "apply"),
        "inverse": ("apply_inverse", "apply_inverse"),
        "factor": ("apply_factor", "apply_factor_transpose"),
        "inverse_factor": ("apply_inverse_factor", "apply_inverse_factor_transpose"),
    }

    def __init__(self, model: CovarianceModel, allowed, label: str):
        unknown = set(allowed) - set(CAPABILITIES)
        if unknown:
            raise ValueError(f"unknown capabilities {unknown}")
        self.model = model
        self.allowed = frozenset(allowed)
        self.label = label
        self.used: set[str] = set()

    def operator(self, capability: str) -> LinearOperator:
        if capability not in self.allowed:
            raise CapabilityError(f"{self.label}: '{capability}' is not licensed for this formulation")
        self.used.add(capability)
        fwd, adj = (getattr(self.model, m) for m in self._methods[capability])
        m = self.model
        shape = (m.dim, m.factor_cols) if capability == "factor" else (m.dim, m.dim)
        return LinearOperator(shape, fwd, adj, f"{self.label}:{capability}")


def spectral_norm_sym(matrix: np.ndarray, dense_limit: int = 500, power_steps: int = 50, seed: int = 0) -> float:
    """Spectral norm of a symmetric matrix: dense eigensolve, or power iteration above ``dense_limit``."""
    n = matrix.shape[0]
    if n == 0:
        return 0.0
    if n <= dense_limit:
        return float(np.max(np.abs(np.linalg.eigvalsh(matrix))))
    x = generator(seed, "power").standard_normal(n)
    lam = 0.0
    for _ in range(power_steps):
        y = matrix @ x
        lam = float(np.linalg.norm(y))
        if lam == 0.0:
            return 0.0
        x = y / lam
    return lam


def sample_error_covariance(
    true_steps: EvolutionFamily,
    approx_steps: EvolutionFamily,
    background: CovarianceModel,
    background_mean,
    n_samples: int,
    seed: int | None = None,
    initial_states=None,
) -> list[DenseCovariance]:
    """Sampled model-error covariances ``Q_l = Cov(true_l - approx_l) + delta_l I``.

    Initial states are drawn from ``N(background_mean, background)`` unless
    ``initial_states`` (``d_S x n_samples``) is given.  The nugget is
    ``delta_l = 1e-12 + 1e-6 * ||Cov_l||_2``.
    """
    if true_steps.d_S != approx_steps.d_S or true_steps.n_T != approx_steps.n_T:
        raise DimensionError("true and approximate evolution families differ in shape")
    d, n_T = true_steps.d_S, true_steps.n_T
    if initial_states is None:
        if n_samples < 2:
            raise ValueError("at least two samples are needed for a sample covariance")
        if seed is None:
            raise ValueError("seed is required when sampling initial states")
        xi = generator(seed, "error-samples").standard_normal((background.factor_cols, n_samples))
        u0 = np.asarray(background_mean, dtype=float)[:, None] + background.apply_factor(xi)
    else:
        u0 = np.asarray(initial_states, dtype=float)
        if u0.ndim != 2 or u0.shape[0] != d:
            raise DimensionError("initial_states must be d_S x n_samples")
        if u0.shape[1] < 2:
            raise ValueError("at least two samples are needed for a sample covariance")
    u_true, u_approx = u0, u0
    out = []
    for l in range(n_T):
        u_true = true_steps.step(l, u_true)
        u_approx = approx_steps.step(l, u_approx)
        diff = u_true - u_approx
        cov = np.atleast_2d(np.cov(diff, ddof=1))
        cov = 0.5 * (cov + cov.T)
        nugget = 1e-12 + 1e-6 * spectral_norm_sym(cov)
        out.append(DenseCovariance(cov + nugget * np.eye(d), name=f"Q_{l + 1}"))
    return out
