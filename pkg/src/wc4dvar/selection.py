"""Sensor subset selection.

Column subset selection on the reshaped criterion matrix: the right singular
vectors of ``A_R`` (whose column ``s`` stacks column ``s`` of every time
block of ``A``) are ranked by column-pivoted QR.  The randomized adjoint-free
variant replaces ``A`` by a Gaussian sketch computed with forward model runs
only.  Greedy, exhaustive and random-design baselines evaluate ``Phi`` exactly
through a :class:`~wc4dvar.criteria.DesignEvaluator`.
"""

from __future__ import annotations

import itertools
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .assimilation import DAProblem
from .criteria import CriterionValue, DesignEvaluator, preconditioned_factor
from .operators import DimensionError, LinearOperator, SensorDesign
from .rng import generator


class BudgetExceeded(RuntimeError):
    def __init__(self, count: int, budget: int):
        super().__init__(f"{count} designs exceed the enumeration budget of {budget}")
        self.count, self.budget = count, budget


@dataclass
class DesignSearchResult:
    design: SensorDesign
    criterion: CriterionValue | None
    method: str
    bound: dict | None = None
    seed: int | None = None
    gains: list[float] = field(default_factory=list)
    info: dict = field(default_factory=dict)
    elapsed: float = 0.0

    @property
    def value(self) -> float | None:
        return None if self.criterion is None else self.criterion.value


class ReshapedOperator:
    """``A_R``: a view of a block-column operator ``A = [A_0 ... A_nT]`` as ``(n_blocks*rows) x n_s``."""

    def __init__(self, A: LinearOperator, n_blocks: int, n_s: int):
        if A.cols != n_blocks * n_s:
            raise DimensionError(f"operator has {A.cols} columns, expected {n_blocks} x {n_s}")
        self.A, self.n_blocks, self.n_s = A, n_blocks, n_s
        self.shape = (n_blocks * A.rows, n_s)

    def matmat(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float).reshape(self.n_s, -1)
        c, nb = X.shape[1], self.n_blocks
        big = np.zeros((nb, self.n_s, nb, c))
        for l in range(nb):
            big[l, :, l, :] = X
        out = self.A.apply(big.reshape(nb * self.n_s, nb * c)).reshape(self.A.rows, nb, c)
        return out.transpose(1, 0, 2).reshape(nb * self.A.rows, c)

    def rmatmat(self, Y: np.ndarray) -> np.ndarray:
        Y = np.asarray(Y, dtype=float).reshape(self.shape[0], -1)
        c, nb = Y.shape[1], self.n_blocks
        Yb = Y.reshape(nb, self.A.rows, c).transpose(1, 0, 2).reshape(self.A.rows, nb * c)
        Z = self.A.apply_transpose(Yb).reshape(nb, self.n_s, nb, c)
        return sum(Z[l, :, l, :] for l in range(nb))

    def densify(self) -> np.ndarray:
        return self.matmat(np.eye(self.n_s))


def reshape_blocks(M: np.ndarray, n_blocks: int, n_s: int) -> np.ndarray:
    """Dense reshape: ``(rows, n_blocks*n_s) -> (n_blocks*rows, n_s)`` stacking block columns."""
    rows = M.shape[0]
    return M.reshape(rows, n_blocks, n_s).transpose(1, 0, 2).reshape(n_blocks * rows, n_s)


def randomized_right_singular(R: ReshapedOperator, rank: int, seed: int, oversampling: int = 10,
                              power_iters: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Top ``rank`` right singular vectors and values of ``A_R`` by a randomized range finder."""
    n = R.shape[1]
    ell = min(n, rank + oversampling)
    Omega = generator(seed, "gks-range").standard_normal((n, ell))
    Q, _ = np.linalg.qr(R.matmat(Omega))
    for _ in range(power_iters):
        W, _ = np.linalg.qr(R.rmatmat(Q))
        Q, _ = np.linalg.qr(R.matmat(W))
    B = R.rmatmat(Q).T  # Q^T A_R
    _, s, Vt = np.linalg.svd(B, full_matrices=False)
    return Vt[:rank].T, s[:rank]


def lanczos_right_singular(R: ReshapedOperator, rank: int) -> tuple[np.ndarray, np.ndarray]:
    op = spla.LinearOperator(R.shape, matvec=lambda x: R.matmat(x).ravel(), rmatvec=lambda y: R.rmatmat(y).ravel(),
                             matmat=R.matmat, rmatmat=R.rmatmat, dtype=float)
    if rank >= min(R.shape):
        _, s, Vt = np.linalg.svd(R.densify(), full_matrices=False)
        return Vt[:rank].T, s[:rank]
    _, s, Vt = spla.svds(op, k=rank, random_state=0, solver="arpack")
    order = np.argsort(s)[::-1]
    return Vt[order].T, s[order]


def cpqr_select(Vk: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """First ``k`` pivots of the column-pivoted QR of ``Vk^T`` and the diagonal of ``R``."""
    _, Rfac, piv = sla.qr(Vk.T, mode="economic", pivoting=True)
    return np.asarray(piv[:k]), np.abs(np.diag(Rfac))


def _numerical_rank(s: np.ndarray, info: dict) -> int:
    if s.size == 0 or s[0] == 0:
        info["rank_deficient"] = True
        return 0
    r = int(np.sum(s > 1e-12 * s[0]))
    if r < s.size:
        info["rank_deficient"] = True
        warnings.warn(f"reshaped matrix is rank deficient: numerical rank {r} < {s.size}", RuntimeWarning)
    return r


def subset_from_right_vectors(V: np.ndarray, s: np.ndarray, k: int, info: dict) -> np.ndarray:
    r = max(_numerical_rank(s, info), 1)
    piv, _ = cpqr_select(V[:, :r], min(r, V.shape[0]))
    chosen = list(piv[:k])
    if len(chosen) < k:  # numerical rank below k: fill with the next CPQR pivots of the full basis
        _, _, full = sla.qr(V.T, mode="economic", pivoting=True)
        chosen += [j for j in full if j not in chosen][: k - len(chosen)]
        if len(chosen) < k:
            chosen += [j for j in range(V.shape[0]) if j not in chosen][: k - len(chosen)]
    return np.sort(np.asarray(chosen[:k], dtype=int))


def gks_columns(A: LinearOperator, n_blocks: int, n_s: int, k: int, svd_rank: int | None = None,
                svd: str = "randomized", seed: int = 0, info: dict | None = None) -> np.ndarray:
    """GKS selection on a generic block-column operator; returns sorted sensor indices."""
    if not 1 <= k <= n_s:
        raise ValueError(f"need 1 <= k <= n_s, got k={k}, n_s={n_s}")
    svd_rank = k if svd_rank is None else svd_rank
    info = {} if info is None else info
    R = ReshapedOperator(A, n_blocks, n_s)
    if svd == "randomized":
        V, s = randomized_right_singular(R, svd_rank, seed)
    elif svd == "lanczos":
        V, s = lanczos_right_singular(R, svd_rank)
    elif svd == "dense":
        _, s, Vt = np.linalg.svd(R.densify(), full_matrices=False)
        V, s = Vt[:svd_rank].T, s[:svd_rank]
    else:
        raise ValueError(f"unknown svd method {svd!r}")
    info["singular_values"] = [float(v) for v in s]
    return subset_from_right_vectors(V, s, k, info)


def cpqr_constant(n_s: int, k: int) -> float:
    """The CPQR worst-case constant ``sqrt(n_s - k) * 2^k`` (vacuous for large ``k``)."""
    return float(np.sqrt(max(n_s - k, 0)) * 2.0**k)


def near_optimality_bound(gram: np.ndarray, design: SensorDesign, n_blocks: int) -> dict:
    """``logdet(I + Sigma_K^2 / zeta^2) <= Phi(S) <= logdet(I + Sigma_K^2)`` from the Gram ``A^T A``.

    ``zeta = 1 / sigma_min(V_K^T (I kron S))``.  Skipped (with a notice) when
    ``K > 2000``.
    """
    K = n_blocks * design.k
    if K > 2000:
        return {"K": K, "skipped": "K > 2000"}
    lam, V = np.linalg.eigh(0.5 * (gram + gram.T))
    order = np.argsort(lam)[::-1]
    lam, V = np.clip(lam[order], 0.0, None), V[:, order]
    if K > lam.size:
        return {"K": K, "skipped": "K exceeds the number of columns"}
    sig2 = lam[:K]
    C = V[design.block_indices(n_blocks), :K]
    smin = np.linalg.svd(C, compute_uv=False).min() if K else 1.0
    zeta = np.inf if smin == 0 else 1.0 / smin
    lower = float(np.sum(np.log1p(sig2 / zeta**2))) if np.isfinite(zeta) else 0.0
    upper = float(np.sum(np.log1p(sig2)))
    return {"K": K, "zeta": float(zeta), "lower": lower, "upper": upper,
            "q_cpqr": cpqr_constant(gram.shape[0] // n_blocks, design.k)}


def _result(evaluator: DesignEvaluator | None, design: SensorDesign, method: str, **kw) -> DesignSearchResult:
    crit = None
    if evaluator is not None:
        crit = CriterionValue(evaluator.value(design), "preconditioned", "none", "exact_dense", design)
    return DesignSearchResult(design, crit, method, **kw)


def gks_select(problem: DAProblem, k: int, svd_rank: int | None = None, svd: str = "randomized", seed: int = 0,
               evaluator: DesignEvaluator | None = None, bound: bool = True) -> DesignSearchResult:
    """Column subset selection on the reshaped preconditioned criterion matrix."""
    t0 = time.perf_counter()
    info: dict = {}
    A = preconditioned_factor(problem)
    idx = gks_columns(A, problem.dims.n_blocks, problem.dims.n_s, k, svd_rank, svd, seed, info)
    design = SensorDesign(problem.dims.n_s, idx)
    report = near_optimality_bound(evaluator.gram, design, problem.dims.n_blocks) if (bound and evaluator) else None
    return _result(evaluator, design, "gks", bound=report, seed=seed, info=info,
                   elapsed=time.perf_counter() - t0)


def sketch_rows(problem: DAProblem, D: int, seed: int) -> np.ndarray:
    """``Y^T = A^T Omega^T = G_R^{-1} O L^{-1} G_mod Omega^T`` using forward applications only."""
    model = problem.prior_model.covariance
    Omega_t = generator(seed, "raf-sketch").standard_normal((model.factor_cols, D)) / np.sqrt(D)
    X = model.apply_factor(Omega_t)
    X = problem.coupling_inverse.apply(X)
    X = problem.observation.block.apply(X)
    return problem.noise.apply_inverse_factor(X)  # N_m x D


def raf_select(problem: DAProblem, k: int, seed: int, oversampling: int = 20, D: int | None = None,
               evaluator: DesignEvaluator | None = None, bound: bool = True) -> DesignSearchResult:
    """Randomized adjoint-free selection: GKS on the reshaped Gaussian sketch ``Y = Omega A``."""
    if seed is None:
        raise ValueError("an explicit seed is required")
    dims = problem.dims
    if not 1 <= k <= dims.n_s:
        raise ValueError(f"need 1 <= k <= n_s, got k={k}")
    D = dims.n_T * k + oversampling if D is None else int(D)
    if D < k:
        raise ValueError(f"sketch size D={D} is smaller than k={k}")
    if D > problem.prior_model.covariance.factor_cols:
        warnings.warn("sketch size exceeds the trajectory dimension", RuntimeWarning)
    t0 = time.perf_counter()
    before = dict(problem.evolution.counts)
    Yt = sketch_rows(problem, D, seed)
    transposes = problem.evolution.counts["transpose"] - before["transpose"]
    forwards = problem.evolution.counts["forward"] - before["forward"]
    YR = reshape_blocks(Yt.T, dims.n_blocks, dims.n_s)
    _, s, Vt = np.linalg.svd(YR, full_matrices=False)
    info = {"D": D, "transpose_applications": int(transposes), "forward_applications": int(forwards),
            "singular_values": [float(v) for v in s[:k]]}
    idx = subset_from_right_vectors(Vt[:k].T, s[:k], k, info)
    design = SensorDesign(dims.n_s, idx)
    report = near_optimality_bound(evaluator.gram, design, dims.n_blocks) if (bound and evaluator) else None
    return _result(evaluator, design, "raf", bound=report, seed=seed, info=info,
                   elapsed=time.perf_counter() - t0)


def greedy_select(problem: DAProblem | None, k: int, evaluator: DesignEvaluator) -> DesignSearchResult:
    """Add the sensor with the largest gain ``k`` times; ties go to the lowest index."""
    t0 = time.perf_counter()
    n_s = evaluator.dims.n_s
    chosen: list[int] = []
    gains = []
    current = 0.0
    for _ in range(k):
        cand = np.array([j for j in range(n_s) if j not in chosen])
        designs = np.array([sorted(chosen + [j]) for j in cand])
        vals = evaluator.values(designs)
        best = int(np.argmax(vals))
        gains.append(float(vals[best] - current))
        current = float(vals[best])
        chosen.append(int(cand[best]))
    design = SensorDesign(n_s, chosen)
    return _result(evaluator, design, "greedy", gains=gains, elapsed=time.perf_counter() - t0)


def exhaustive_select(problem: DAProblem | None, k: int, evaluator: DesignEvaluator, budget: int = 200_000,
                      chunk: int = 20_000) -> DesignSearchResult:
    """Exact maximizer by lexicographic enumeration of all ``C(n_s, k)`` designs."""
    t0 = time.perf_counter()
    n_s = evaluator.dims.n_s
    count = math.comb(n_s, k)
    if count > budget:
        raise BudgetExceeded(count, budget)
    best_val, best = -np.inf, None
    it = itertools.combinations(range(n_s), k)
    while True:
        block = np.array(list(itertools.islice(it, chunk)), dtype=int).reshape(-1, k)
        if block.shape[0] == 0:
            break
        vals = evaluator.values(block)
        i = int(np.argmax(vals))
        if vals[i] > best_val:
            best_val, best = float(vals[i]), block[i]
    design = SensorDesign(n_s, best)
    return _result(evaluator, design, "exhaustive", info={"count": count}, elapsed=time.perf_counter() - t0)


def all_design_values(evaluator: DesignEvaluator, k: int, budget: int = 200_000) -> np.ndarray:
    n_s = evaluator.dims.n_s
    count = math.comb(n_s, k)
    if count > budget:
        raise BudgetExceeded(count, budget)
    combos = np.array(list(itertools.combinations(range(n_s), k)), dtype=int).reshape(-1, k)
    return evaluator.values(combos)


def percentile_of(values: np.ndarray, value: float) -> float:
    """Share of ``values`` strictly below ``value``, in percent, rounded to 0.1."""
    values = np.asarray(values)
    return round(100.0 * float(np.mean(values < value)), 1)


@dataclass
class RandomDesignSample:
    designs: np.ndarray
    values: np.ndarray
    seed: int

    def percentile(self, value: float) -> float:
        return percentile_of(self.values, value)


def random_designs(n_s: int, k: int, count: int, seed: int) -> np.ndarray:
    """``count`` uniform ``k``-subsets (each drawn without replacement), sorted per row."""
    if count < 1:
        raise ValueError("count must be positive")
    if not 0 <= k <= n_s:
        raise ValueError("need 0 <= k <= n_s")
    keys = generator(seed, "random-designs").random((count, n_s))
    return np.sort(np.argsort(keys, axis=1, kind="stable")[:, :k], axis=1)


def random_design_sample(n_s: int, k: int, count: int, seed: int, evaluator: DesignEvaluator) -> RandomDesignSample:
    designs = random_designs(n_s, k, count, seed)
    return RandomDesignSample(designs, evaluator.values(designs), seed)


def sc_reference_design(problem: DAProblem, k: int, seed: int = 0, svd: str = "randomized") -> SensorDesign:
    """GKS applied to the strong-constraint criterion matrix (initial-condition response only)."""
    from .criteria import initial_condition_response

    W = initial_condition_response(problem)  # N_m x d
    A = LinearOperator.from_matrix(W.T, "A_SC")
    idx = gks_columns(A, problem.dims.n_blocks, problem.dims.n_s, k, svd=svd, seed=seed)
    return SensorDesign(problem.dims.n_s, idx)
