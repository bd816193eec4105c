"""The expected-information-gain criterion and its equivalent formulations.

Throughout, ``A = G_mod^T L^{-T} O^T G_R^{-T}`` where ``Gamma_mod = G_mod G_mod^T``
and ``Gamma_R = G_R G_R^T``.  The factor is not symmetric, so ``A`` is the
transpose-factor analogue of the symmetric-square-root form; ``I + A A^T``
has the same spectrum either way.

Four operators carry the criterion:

* ``preconditioned``    ``E = I + A A^T``                       value = Phi
* ``unpreconditioned``  ``E = O^T R^{-1} O + L^T Gamma_mod^{-1} L``   Phi = value + logdet Gamma_pr
* ``saddle_I``          3x3 saddle ``[[Gmod,0,L],[0,R,O],[L^T,O^T,0]]``   Phi = value - logdet Gamma_R
* ``saddle_II``         2x2 saddle ``[[Gmod,L],[L^T,-O^T R^{-1} O]]``     Phi = value
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .assimilation import DAProblem
from .covariance import CovarianceView, DiagonalCovariance, ScaledIdentityCovariance
from .operators import (
    DimensionError,
    LinearOperator,
    SensorDesign,
    block_operator,
    compose,
    identity,
)
from .traceest import TraceEstimate, slq_trace, xnystrace_logdet

VARIANTS = ("preconditioned", "unpreconditioned", "saddle_I", "saddle_II")
CONSTANTS = {"preconditioned": "none", "unpreconditioned": "C_U", "saddle_I": "C_I", "saddle_II": "none"}
FUNCTION = {"preconditioned": "log", "unpreconditioned": "log", "saddle_I": "log_abs", "saddle_II": "log_abs"}

# Which covariance actions each formulation may use, and whether it may
# apply the inverse coupling L^{-1}.
LICENSES = {
    "preconditioned": {"noise": {"inverse_factor"}, "model": {"factor"}, "coupling_inverse": True},
    "unpreconditioned": {"noise": {"inverse"}, "model": {"inverse"}, "coupling_inverse": False},
    "saddle_I": {"noise": {"apply"}, "model": {"apply"}, "coupling_inverse": False},
    "saddle_II": {"noise": {"inverse"}, "model": {"apply"}, "coupling_inverse": False},
}


class SingularCriterionError(ArithmeticError):
    """A (numerically) zero eigenvalue in an operator that must be nonsingular."""


class DenseLimitError(RuntimeError):
    """Refusal to densify an operator above the configured size."""


@dataclass
class CriterionOperator:
    variant: str
    operator: LinearOperator
    additive_constant: str
    inertia: tuple[int, int]
    function: str
    problem: DAProblem
    design: SensorDesign
    audit: dict = field(default_factory=dict)
    A: LinearOperator | None = None


@dataclass
class CriterionValue:
    value: float
    variant: str
    constant_convention: str
    method: str
    design: SensorDesign
    diagnostics: TraceEstimate | None = None


def _restricted(problem: DAProblem, design: SensorDesign | None) -> tuple[DAProblem, SensorDesign]:
    if design is None:
        design = SensorDesign.full(problem.dims.n_s)
    if design.n_s != problem.dims.n_s:
        raise DimensionError(f"design over {design.n_s} sensors, problem has {problem.dims.n_s}")
    return problem.restrict(design), design


def preconditioned_factor(problem: DAProblem) -> LinearOperator:
    """``A = G_mod^T L^{-T} O^T G_R^{-T}`` (shape ``factor_cols x N_m``) for an already restricted problem."""
    model = problem.prior_model.covariance
    G = model.factor_operator()
    Rinv_half = problem.noise.inverse_factor_operator()
    return compose(G.T, problem.coupling_inverse.T, problem.observation.block.T, Rinv_half.T)


def build_criterion_operator(problem: DAProblem, design: SensorDesign | None, variant: str) -> CriterionOperator:
    """The matrix-free operator of one formulation with the design applied.

    Covariance actions are obtained through capability-restricted views, so a
    builder that reaches for an action its formulation does not license fails
    immediately with :class:`CapabilityError`.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    sub, design = _restricted(problem, design)
    lic = LICENSES[variant]
    noise = CovarianceView(sub.noise, lic["noise"], "Gamma_R")
    model = CovarianceView(sub.prior_model.covariance, lic["model"], "Gamma_mod")
    O = sub.observation.block
    dims = sub.dims
    N_d, N_m = dims.N_d, sub.noise.dim
    L = sub.coupling
    A = None

    if variant == "preconditioned":
        G = model.operator("factor")
        A = compose(G.T, sub.coupling_inverse.T, O.T, noise.operator("inverse_factor").T)
        op = identity(A.rows) + compose(A, A.T)
        inertia = (A.rows, 0)
    elif variant == "unpreconditioned":
        op = compose(O.T, noise.operator("inverse"), O) + compose(L.T, model.operator("inverse"), L)
        inertia = (N_d, 0)
    elif variant == "saddle_I":
        grid = [
            [model.operator("apply"), None, L],
            [None, noise.operator("apply"), O],
            [L.T, O.T, None],
        ]
        op = block_operator(grid, (N_d, N_m, N_d), (N_d, N_m, N_d))
        inertia = (N_d + N_m, N_d)
    else:
        schur = compose(O.T, noise.operator("inverse"), O)
        op = block_operator([[model.operator("apply"), L], [L.T, -schur]], (N_d, N_d), (N_d, N_d))
        inertia = (N_d, N_d)

    op.name = f"E[{variant}]"
    audit = {
        "Gamma_R": sorted(noise.used),
        "Gamma_mod": sorted(model.used),
        "coupling_inverse": variant == "preconditioned",
    }
    if audit["coupling_inverse"] and not lic["coupling_inverse"]:
        raise AssertionError("coupling inverse used by a formulation that forbids it")
    return CriterionOperator(variant, op, CONSTANTS[variant], inertia, FUNCTION[variant], sub, design, audit, A)


def _apply_f(lam: np.ndarray, function: str, scale: float) -> float:
    if np.any(np.abs(lam) <= 1e-14 * scale):
        raise SingularCriterionError("operator has a numerically zero eigenvalue")
    if function == "log":
        if np.any(lam <= 0):
            raise SingularCriterionError(f"SPD operator has eigenvalue {lam.min():.3e}")
        return float(np.sum(np.log(lam)))
    return float(np.sum(np.log(np.abs(lam))))


def eigenvalues(op: CriterionOperator, dense_limit: int = 4000) -> np.ndarray:
    n = op.operator.rows
    if n > dense_limit:
        raise DenseLimitError(f"refusing to densify a {n}x{n} operator (limit {dense_limit})")
    M = op.operator.densify()
    return np.linalg.eigvalsh(0.5 * (M + M.T))


def criterion_exact(op: CriterionOperator, dense_limit: int = 4000) -> CriterionValue:
    """``tr f(E)`` from a dense symmetric eigendecomposition.

    For the preconditioned operator the smaller Gram side ``I + A^T A`` is
    used when it is smaller (Sylvester's determinant identity).
    """
    if op.variant == "preconditioned" and op.A is not None and op.A.cols < op.A.rows:
        if op.A.cols == 0:
            return CriterionValue(0.0, op.variant, op.additive_constant, "exact_dense", op.design)
        Ad = op.A.apply(np.eye(op.A.cols))
        lam = np.linalg.eigvalsh(np.eye(op.A.cols) + Ad.T @ Ad)
    else:
        lam = eigenvalues(op, dense_limit)
    scale = float(np.max(np.abs(lam))) if lam.size else 0.0
    value = _apply_f(lam, op.function, scale) if lam.size else 0.0
    return CriterionValue(value, op.variant, op.additive_constant, "exact_dense", op.design)


def inertia(op: CriterionOperator, dense_limit: int = 4000) -> tuple[int, int]:
    """Observed (positive, negative) eigenvalue counts of the dense operator."""
    lam = eigenvalues(op, dense_limit)
    tol = 1e-12 * (np.max(np.abs(lam)) if lam.size else 0.0)
    return int(np.sum(lam > tol)), int(np.sum(lam < -tol))


def criterion_selected(
    problem: DAProblem,
    design: SensorDesign | None,
    method: str = "exact_dense",
    variant: str = "preconditioned",
    n_samples: int = 8,
    seed: int = 0,
    rel_tol: float = 1e-10,
    max_iter: int | None = None,
) -> CriterionValue:
    """``Phi(S)`` for the design, by dense evaluation or a randomized estimator."""
    op = build_criterion_operator(problem, design, variant)
    if method == "exact_dense":
        return criterion_exact(op)
    if op.operator.rows == 0:
        return CriterionValue(0.0, variant, op.additive_constant, method, op.design)
    if method == "slq":
        est = slq_trace(op.operator, op.function, n_samples, seed, rel_tol, max_iter)
    elif method == "xnystrace":
        if variant != "preconditioned":
            raise ValueError("the Nystrom estimator needs the PSD preconditioned formulation")
        est = xnystrace_logdet(op.operator, n_samples, seed, rel_tol, max_iter)
    else:
        raise ValueError(f"unknown method {method!r}")
    return CriterionValue(est.value, variant, op.additive_constant, method, op.design, est)


def initial_condition_response(problem: DAProblem) -> np.ndarray:
    """Dense ``W`` with blocks ``G_R,l^{-1} O_l M_{0->l} G_B`` (``N_m x factor_cols(Gamma_B)``)."""
    X = problem.background.apply_factor(np.eye(problem.background.factor_cols))
    rows = []
    for l, O_l in enumerate(problem.observation.blocks):
        if l > 0:
            X = problem.evolution.step(l - 1, X)
        rows.append(problem.noise.blocks[l].apply_inverse_factor(O_l.apply(X)))
    return np.vstack(rows)


def _logdet_gram(W: np.ndarray) -> float:
    """``logdet(I + W W^T)`` computed on the smaller side."""
    if W.size == 0:
        return 0.0
    M = W.T @ W if W.shape[1] <= W.shape[0] else W @ W.T
    lam = np.linalg.eigvalsh(np.eye(M.shape[0]) + M)
    return float(np.sum(np.log(lam)))


def sc_criterion_selected(problem: DAProblem, design: SensorDesign | None) -> CriterionValue:
    """Strong-constraint criterion ``logdet(I + sum_l (...)^T (...))`` including ``l = 0``."""
    sub, design = _restricted(problem, design)
    W = initial_condition_response(sub)
    return CriterionValue(_logdet_gram(W), "strong_constraint", "none", "exact_dense", design)


def dense_noise_whitened_solution(problem: DAProblem) -> np.ndarray:
    """``Z = G_R^{-1} O L^{-1}`` densified (``N_m x N_d``)."""
    N_d = problem.dims.N_d
    X = problem.coupling_inverse.apply(np.eye(N_d))
    return problem.noise.apply_inverse_factor(problem.observation.block.apply(X))


@dataclass
class GapReport:
    lower: float
    gap: float
    upper: float
    wc: float
    sc: float

    @property
    def slack(self) -> float:
        return self.upper - self.gap


def wc_sc_gap_bound(problem: DAProblem, design: SensorDesign | None = None) -> GapReport:
    """``0 <= Phi - Phi_SC <= logdet(I + Z blkdiag(0, Gamma_Q) Z^T)`` on the selected rows."""
    sub, design = _restricted(problem, design)
    Z = dense_noise_whitened_solution(sub)
    d = sub.dims.d_S
    GB = sub.background.apply_factor(np.eye(sub.background.factor_cols))
    GQ = sub.model_error.apply_factor(np.eye(sub.model_error.factor_cols))
    ZB = Z[:, :d] @ GB
    ZQ = Z[:, d:] @ GQ
    sc = _logdet_gram(ZB)
    wc = _logdet_gram(np.hstack([ZB, ZQ]))
    upper = _logdet_gram(ZQ)
    return GapReport(0.0, wc - sc, upper, wc, sc)


def prior_logdet(problem: DAProblem) -> float:
    """Dense ``logdet Gamma_pr`` (``det L = 1`` is not assumed)."""
    Linv = problem.coupling_inverse
    N_d = problem.dims.N_d
    F = Linv.apply(problem.prior_model.covariance.apply_factor(np.eye(problem.prior_model.covariance.factor_cols)))
    sign, val = np.linalg.slogdet(F @ F.T)
    if sign <= 0:
        raise SingularCriterionError("forecast prior covariance is singular")
    return float(val)


def reconcile_constants(values: list[CriterionValue], problem: DAProblem, dense_limit: int = 4000) -> list[float]:
    """Map every value onto the preconditioned convention (no constant)."""
    out = []
    for v in values:
        if v.constant_convention == "none":
            out.append(float(v.value))
            continue
        if problem.dims.N_d > dense_limit:
            raise DenseLimitError("constant reconciliation is a desk-scale operation")
        if v.constant_convention == "C_U":
            out.append(float(v.value + prior_logdet(problem)))
        elif v.constant_convention == "C_I":
            noise = problem.noise.restrict(v.design.indices) if v.design.k else None
            out.append(float(v.value - (noise.logdet() if noise is not None else 0.0)))
        else:
            raise ValueError(f"unknown constant convention {v.constant_convention!r}")
    return out


class DesignEvaluator:
    """Exact ``Phi(S)`` and ``Phi_SC(S)`` for many designs from precomputed Gram matrices.

    With a diagonal noise covariance, selecting sensors commutes with noise
    whitening, so ``Phi(S) = logdet(I + C[S, S])`` where ``C = A^T A`` is the
    ``N_m x N_m`` Gram matrix of the full design, indexed by the rows of
    ``I kron S``.  The strong-constraint Gram uses only the initial-condition
    response.
    """

    def __init__(self, problem: DAProblem):
        for b in problem.noise.blocks:
            if not isinstance(b, (ScaledIdentityCovariance, DiagonalCovariance)):
                raise TypeError("DesignEvaluator requires per-sensor (diagonal) noise covariances")
        self.problem = problem
        self.dims = problem.dims
        Z = dense_noise_whitened_solution(problem)
        d = self.dims.d_S
        GB = problem.background.apply_factor(np.eye(problem.background.factor_cols))
        GQ = problem.model_error.apply_factor(np.eye(problem.model_error.factor_cols))
        ZB = Z[:, :d] @ GB
        ZQ = Z[:, d:] @ GQ
        self.sc_gram = ZB @ ZB.T
        self.model_gram = ZQ @ ZQ.T
        self.gram = self.sc_gram + self.model_gram
        self.evaluations = 0

    def _idx(self, design) -> np.ndarray:
        if isinstance(design, SensorDesign):
            return design.block_indices(self.dims.n_blocks)
        idx = np.asarray(design, dtype=int)
        return (np.arange(self.dims.n_blocks)[:, None] * self.dims.n_s + idx[None, :]).ravel()

    @staticmethod
    def _logdet(C: np.ndarray, idx: np.ndarray) -> float:
        if idx.size == 0:
            return 0.0
        M = C[np.ix_(idx, idx)]
        M[np.diag_indices_from(M)] += 1.0
        Lc = np.linalg.cholesky(M)
        return float(2.0 * np.sum(np.log(np.diag(Lc))))

    def value(self, design) -> float:
        self.evaluations += 1
        return self._logdet(self.gram, self._idx(design))

    def sc_value(self, design) -> float:
        return self._logdet(self.sc_gram, self._idx(design))

    def gap_upper(self, design) -> float:
        return self._logdet(self.model_gram, self._idx(design))

    def values(self, designs: np.ndarray, which: str = "wc", batch: int = 4096) -> np.ndarray:
        """Vectorised evaluation of many designs of equal size (rows of ``designs``)."""
        designs = np.atleast_2d(np.asarray(designs, dtype=int))
        C = {"wc": self.gram, "sc": self.sc_gram, "upper": self.model_gram}[which]
        n, k = designs.shape
        self.evaluations += n
        if k == 0:
            return np.zeros(n)
        out = np.empty(n)
        offs = np.arange(self.dims.n_blocks)[:, None] * self.dims.n_s
        eye = np.eye(self.dims.n_blocks * k)
        for s in range(0, n, batch):
            D = designs[s:s + batch]
            idx = (offs[None, :, :] + D[:, None, :]).reshape(D.shape[0], -1)
            M = C[idx[:, :, None], idx[:, None, :]] + eye
            Lc = np.linalg.cholesky(M)
            out[s:s + batch] = 2.0 * np.sum(np.log(np.diagonal(Lc, axis1=1, axis2=2)), axis=1)
        return out
