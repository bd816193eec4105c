"""Forecast prior, weak- and strong-constraint posteriors, and the MAP solve."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .covariance import BlockDiagCovariance, CovarianceModel, ScaledIdentityCovariance
from .operators import (
    DimensionError,
    EvolutionFamily,
    LinearOperator,
    ObservationOperator,
    ProblemDims,
    SensorDesign,
    block_diag,
    compose,
    coupling_operator,
    identity,
)
from .rng import generator


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, result=None):
        super().__init__(message)
        self.result = result


@dataclass(frozen=True)
class PriorModel:
    """Law of ``p = (u_0, eta)``: mean ``(u_0^b, 0)``, covariance ``blkdiag(Gamma_B, Gamma_Q)``."""

    mean: np.ndarray
    covariance: BlockDiagCovariance


@dataclass(frozen=True, eq=False)
class DAProblem:
    """One linear-Gaussian weak-constraint assimilation instance."""

    evolution: EvolutionFamily
    observation: ObservationOperator
    background: CovarianceModel
    background_mean: np.ndarray
    model_error: BlockDiagCovariance
    noise: BlockDiagCovariance

    def __post_init__(self):
        d, n_T = self.evolution.d_S, self.evolution.n_T
        object.__setattr__(self, "background_mean", np.asarray(self.background_mean, dtype=float))
        if self.observation.d_S != d or self.observation.n_blocks != n_T + 1:
            raise DimensionError("observation operator does not match the evolution family")
        if self.background.dim != d or self.background_mean.shape != (d,):
            raise DimensionError("background does not match the state dimension")
        if self.model_error.dim != n_T * d:
            raise DimensionError("model-error covariance must have dimension n_T * d_S")
        if self.noise.dim != (n_T + 1) * self.observation.n_s:
            raise DimensionError("noise covariance must have dimension (n_T + 1) * n_s")

    @property
    def dims(self) -> ProblemDims:
        return ProblemDims(self.evolution.d_S, self.evolution.n_T, self.observation.n_s)

    @property
    def prior_model(self) -> PriorModel:
        d, n_T = self.evolution.d_S, self.evolution.n_T
        mean = np.concatenate([self.background_mean, np.zeros(n_T * d)])
        return PriorModel(mean, BlockDiagCovariance([self.background, self.model_error], "Gamma_mod"))

    @property
    def coupling(self) -> LinearOperator:
        return coupling_operator(self.evolution)

    @property
    def coupling_inverse(self) -> LinearOperator:
        return coupling_operator(self.evolution, inverse=True)

    def restrict(self, design: SensorDesign) -> "DAProblem":
        """The same problem observed only at the sensors of ``design``."""
        return dataclasses.replace(
            self, observation=self.observation.restrict(design), noise=self.noise.restrict(design.indices)
        )

    def with_model_error(self, model_error: BlockDiagCovariance) -> "DAProblem":
        return dataclasses.replace(self, model_error=model_error)


def noise_inverse(problem: DAProblem) -> LinearOperator:
    return problem.noise.inverse_operator()


class ForecastPrior:
    """``N(L^{-1} mu_mod, L^{-1} Gamma_mod L^{-T})`` with its inverse and factor actions."""

    def __init__(self, problem: DAProblem):
        prior = problem.prior_model
        L, Linv = problem.coupling, problem.coupling_inverse
        gmod = prior.covariance
        self.mean = Linv.apply(prior.mean)
        self.covariance = compose(Linv, gmod.operator(), Linv.T)
        self.precision = compose(L.T, gmod.inverse_operator(), L)
        self.factor = compose(Linv, gmod.factor_operator())


def wc_cost(problem: DAProblem, u, y) -> float:
    """The weak-constraint 4D-Var cost (background + data + model-error misfits)."""
    u, y = np.asarray(u, dtype=float), np.asarray(y, dtype=float)
    dims = problem.dims
    if u.shape != (dims.N_d,) or y.shape != (problem.noise.dim,):
        raise DimensionError("trajectory or data vector has the wrong length")
    d = dims.d_S
    db = u[:d] - problem.background_mean
    cost = db @ problem.background.apply_inverse(db)
    r = problem.observation.block.apply(u) - y
    cost += r @ problem.noise.apply_inverse(r)
    if dims.n_T:
        eta = problem.coupling.apply(u)[d:]
        cost += eta @ problem.model_error.apply_inverse(eta)
    return 0.5 * float(cost)


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    residual_history: list[float]
    final_residual: float
    converged: bool


def pcg(
    matvec: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
    precond: Callable[[np.ndarray], np.ndarray] | None = None,
    x0: np.ndarray | None = None,
    tol: float = 1e-8,
    max_iter: int = 10_000,
) -> CGResult:
    """Preconditioned conjugate gradients for an SPD system.

    Convergence is measured by the preconditioned residual norm
    ``sqrt(r^T M r) / sqrt(b^T M b)``.  When the recurrence reaches ``tol``
    the residual is recomputed from scratch; the iteration only stops if the
    recomputed value also passes.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    M = precond if precond is not None else (lambda v: v)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - matvec(x)
    z = M(r)
    bnorm = np.sqrt(max(float(b @ M(b)), 0.0))
    if bnorm == 0.0:
        bnorm = 1.0
    rz = float(r @ z)
    res = np.sqrt(max(rz, 0.0)) / bnorm
    history = [res]
    p = z.copy()
    it = 0
    while res > tol and it < max_iter:
        q = matvec(p)
        pq = float(p @ q)
        if pq <= 0:
            break
        a = rz / pq
        x += a * p
        r -= a * q
        z = M(r)
        rz_new = float(r @ z)
        it += 1
        res = np.sqrt(max(rz_new, 0.0)) / bnorm
        if res <= tol:
            r = b - matvec(x)
            z = M(r)
            rz_new = float(r @ z)
            res = np.sqrt(max(rz_new, 0.0)) / bnorm
            if res > tol:
                p = z.copy()
                rz = rz_new
                history.append(res)
                continue
        history.append(res)
        p = z + (rz_new / rz) * p
        rz = rz_new
    r = b - matvec(x)
    final = np.sqrt(max(float(r @ M(r)), 0.0)) / bnorm
    return CGResult(x, it, history, float(final), bool(final <= tol))


@dataclass
class PosteriorResult:
    map_estimate: np.ndarray
    pcg_iterations: int
    residual_history: list[float]
    final_residual: float
    converged: bool
    precision: LinearOperator
    preconditioner: str
    rhs: np.ndarray = field(repr=False)


def posterior_precision(problem: DAProblem) -> LinearOperator:
    """``O^T Gamma_R^{-1} O + L^T Gamma_mod^{-1} L``."""
    O = problem.observation.block
    data = compose(O.T, problem.noise.inverse_operator(), O)
    return data + ForecastPrior(problem).precision


def map_rhs(problem: DAProblem, y, form: str = "direct") -> np.ndarray:
    """Right-hand side of the MAP normal equations.

    ``form="direct"`` uses ``L^T Gamma_mod^{-1} mu_mod = (Gamma_B^{-1} u_0^b, 0)``;
    ``form="recursive"`` applies ``L^T Gamma_mod^{-1} L u_pr`` literally.
    """
    y = np.asarray(y, dtype=float)
    data = problem.observation.block.apply_transpose(problem.noise.apply_inverse(y))
    if form == "direct":
        prior = np.zeros(problem.dims.N_d)
        prior[: problem.dims.d_S] = problem.background.apply_inverse(problem.background_mean)
    elif form == "recursive":
        fp = ForecastPrior(problem)
        prior = fp.precision.apply(fp.mean)
    else:
        raise ValueError(f"unknown rhs form {form!r}")
    return data + prior


def map_solve(
    problem: DAProblem,
    y,
    precondition: str = "forecast_prior",
    tol: float = 1e-8,
    max_iter: int | None = None,
    strict: bool = False,
) -> PosteriorResult:
    """MAP estimate of the weak-constraint posterior by (preconditioned) CG.

    ``precondition`` is ``"forecast_prior"`` (apply ``Gamma_pr``) or ``"none"``.
    The iteration starts from the forecast-prior mean.
    """
    if precondition not in ("none", "forecast_prior"):
        raise ValueError(f"unknown preconditioner {precondition!r}")
    fp = ForecastPrior(problem)
    H = posterior_precision(problem)
    b = map_rhs(problem, y)
    max_iter = 20 * problem.dims.N_d if max_iter is None else max_iter
    M = fp.covariance.apply if precondition == "forecast_prior" else None
    res = pcg(H.apply, b, M, x0=fp.mean, tol=tol, max_iter=max_iter)
    out = PosteriorResult(
        res.x, res.iterations, res.residual_history, res.final_residual, res.converged, H, precondition, b
    )
    if strict and not res.converged:
        raise ConvergenceError(
            f"PCG did not reach tol={tol} in {max_iter} iterations (residual {res.final_residual:.3e})", out
        )
    return out


def relative_residual(problem: DAProblem, result: PosteriorResult) -> float:
    """Recompute the preconditioned relative residual of a returned iterate."""
    H = posterior_precision(problem)
    if result.preconditioner == "forecast_prior":
        M = ForecastPrior(problem).covariance.apply
    else:
        M = lambda v: v  # noqa: E731
    b = result.rhs
    r = b - H.apply(result.map_estimate)
    bnorm = np.sqrt(max(float(b @ M(b)), 0.0)) or 1.0
    return float(np.sqrt(max(float(r @ M(r)), 0.0)) / bnorm)


@dataclass
class SCPosterior:
    mean: np.ndarray
    precision: LinearOperator
    iterations: int


def initial_state_observer(problem: DAProblem) -> LinearOperator:
    """``u_0 -> (O_l M_{0->l} u_0)_l``: observations of the noise-free trajectory."""
    d = problem.dims.d_S
    embed = LinearOperator(
        (problem.dims.N_d, d),
        lambda x: np.concatenate([x, np.zeros((problem.dims.N_d - d,) + x.shape[1:])]),
        lambda y: y[:d].copy(),
    )
    return compose(problem.observation.block, problem.coupling_inverse, embed)


def sc_posterior(problem: DAProblem, y, design: SensorDesign | None = None, tol: float = 1e-12) -> SCPosterior:
    """Strong-constraint posterior of ``u_0`` (data term includes ``l = 0``)."""
    if design is not None:
        y = np.asarray(y, dtype=float)[design.block_indices(problem.dims.n_blocks)]
        problem = problem.restrict(design)
    F = initial_state_observer(problem)
    P = problem.background.inverse_operator() + compose(F.T, problem.noise.inverse_operator(), F)
    b = F.apply_transpose(problem.noise.apply_inverse(np.asarray(y, dtype=float)))
    b = b + problem.background.apply_inverse(problem.background_mean)
    res = pcg(P.apply, b, problem.background.apply, x0=problem.background_mean, tol=tol,
              max_iter=50 * problem.dims.d_S + 100)
    return SCPosterior(res.x, P, res.iterations)


@dataclass(frozen=True)
class ObservationData:
    y: np.ndarray
    clean: np.ndarray
    sigma: np.ndarray


def simulate_observations(
    truth: EvolutionFamily,
    u0_true,
    observation: ObservationOperator,
    seed: int,
    noise_fraction: float = 0.02,
) -> ObservationData:
    """Observe the true trajectory and add Gaussian noise.

    The per-step standard deviation is ``noise_fraction`` times the RMS of the
    noiseless observation block at that step.
    """
    if noise_fraction < 0:
        raise ValueError("noise_fraction must be non-negative")
    clean = observation.block.apply(truth.propagate(np.asarray(u0_true, dtype=float)))
    blocks = clean.reshape(observation.n_blocks, observation.n_s)
    sigma = noise_fraction * np.sqrt(np.mean(blocks**2, axis=1))
    xi = generator(seed, "observation-noise").standard_normal(blocks.shape)
    y = (blocks + sigma[:, None] * xi).ravel()
    return ObservationData(y, clean, sigma)


def noise_covariance(sigma, n_s: int) -> BlockDiagCovariance:
    """``Gamma_R = blkdiag(sigma_l^2 I)``."""
    return BlockDiagCovariance([ScaledIdentityCovariance(n_s, s**2, f"R_{l}") for l, s in enumerate(sigma)], "Gamma_R")
