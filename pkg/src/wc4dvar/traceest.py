"""Matrix-free estimation of ``tr f(E)`` for symmetric ``E``.

Lanczos (with full reorthogonalization) approximates ``f(E) z`` and the Gauss
quadrature ``z^T f(E) z``.  On top of it sit Hutchinson / stochastic Lanczos
quadrature and the leave-one-out Nystrom estimator for PSD ``f(E)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla

from .operators import LinearOperator
from .rng import generator, rademacher

FUNCTIONS = ("log", "log_abs")


class LanczosError(ArithmeticError):
    """Ritz values incompatible with the requested matrix function."""


@dataclass
class LanczosRun:
    basis: np.ndarray | None
    alpha: np.ndarray
    beta: np.ndarray
    n_iter: int
    stop_reason: str
    quadrature: float  # e1^T f(T) e1
    norm: float  # ||z||

    @property
    def tridiagonal(self) -> np.ndarray:
        k = self.n_iter
        return np.diag(self.alpha) + np.diag(self.beta[: k - 1], 1) + np.diag(self.beta[: k - 1], -1)


@dataclass
class TraceEstimate:
    value: float
    n_samples: int
    per_sample: np.ndarray
    mean_iterations: float
    std: float
    seed: int
    method: str
    iterations: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def as_dict(self) -> dict:
        return {
            "value": float(self.value),
            "n_samples": int(self.n_samples),
            "per_sample": [float(v) for v in self.per_sample],
            "mean_iterations": float(self.mean_iterations),
            "std": float(self.std),
            "seed": int(self.seed),
            "method": self.method,
        }


def _ritz_f(theta: np.ndarray, f: str) -> np.ndarray:
    scale = np.max(np.abs(theta)) if theta.size else 0.0
    if f == "log":
        if np.any(theta <= 0):
            raise LanczosError(f"non-positive Ritz value {theta.min():.3e}: operator is not SPD")
        return np.log(theta)
    if f == "log_abs":
        if np.any(np.abs(theta) <= 1e-14 * scale):
            raise LanczosError("Ritz value at zero: operator is numerically singular")
        return np.log(np.abs(theta))
    raise ValueError(f"unknown function {f!r}; expected one of {FUNCTIONS}")


def _tridiag_f(alpha, beta, f):
    """Return ``(e1^T f(T) e1, f(T) e1)`` for the symmetric tridiagonal ``T``."""
    if alpha.size == 1:
        fv = _ritz_f(alpha, f)
        return float(fv[0]), fv.copy()
    try:
        theta, S = sla.eigh_tridiagonal(alpha, beta)
    except np.linalg.LinAlgError:
        # stemr occasionally fails on badly scaled indefinite tridiagonals
        T = np.diag(alpha) + np.diag(beta, 1) + np.diag(beta, -1)
        theta, S = np.linalg.eigh(T)
    fv = _ritz_f(theta, f)
    col = S @ (fv * S[0])
    return float(col[0]), col


def lanczos_block(
    apply: Callable[[np.ndarray], np.ndarray],
    Z: np.ndarray,
    f: str = "log",
    rel_tol: float = 1e-10,
    max_iter: int | None = None,
    keep_basis: bool = True,
) -> list[LanczosRun]:
    """Run independent Lanczos processes from each column of ``Z`` in lockstep.

    Columns stop individually once the relative change of ``e1^T f(T) e1``
    drops below ``rel_tol``, on breakdown, or at ``max_iter``.  The operator
    is only applied to the columns still running.
    """
    if f not in FUNCTIONS:
        raise ValueError(f"unknown function {f!r}; expected one of {FUNCTIONS}")
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    d, m = Z.shape
    max_iter = min(d, 2000) if max_iter is None else int(max_iter)
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    norms = np.linalg.norm(Z, axis=0)
    if np.any(norms == 0):
        raise ValueError("Lanczos start vectors must be non-zero")

    cap = min(max_iter, 64)
    Q = np.zeros((m, cap, d))  # Lanczos basis of column j in Q[j, :n_iter[j]]
    Q[:, 0] = (Z / norms).T
    alpha = np.zeros((max_iter, m))
    beta = np.zeros((max_iter, m))
    active = np.ones(m, dtype=bool)
    n_iter = np.zeros(m, dtype=int)
    reason = [""] * m
    quad = np.full(m, np.nan)
    opnorm = np.zeros(m)
    next_check = np.ones(m, dtype=int)

    for k in range(max_iter):
        idx = np.flatnonzero(active)
        Vk = Q[idx, k].T
        W = np.asarray(apply(Vk), dtype=float).reshape(d, idx.size)
        a = np.einsum("ij,ij->j", Vk, W)
        alpha[k, idx] = a
        W = W - Vk * a
        if k > 0:
            W = W - Q[idx, k - 1].T * beta[k - 1, idx]
        for c, j in enumerate(idx):
            B = Q[j, : k + 1]
            w = W[:, c]
            for _ in range(2):
                w = w - (B @ w) @ B
            W[:, c] = w
        b = np.linalg.norm(W, axis=0)
        beta[k, idx] = b
        n_iter[idx] = k + 1
        opnorm[idx] = np.maximum(opnorm[idx], np.abs(a) + b)

        if k + 1 == Q.shape[1] and k + 1 < max_iter:
            Q = np.concatenate([Q, np.zeros((m, min(Q.shape[1], max_iter - Q.shape[1]), d))], axis=1)
        for c, j in enumerate(idx):
            broke = b[c] <= 1e-13 * max(opnorm[j], 1e-300)
            last = k + 1 == max_iter
            # past 10 steps the quadrature is re-evaluated every ~k/10 steps
            if k + 1 >= next_check[j] or broke or last:
                q, _ = _tridiag_f(alpha[: k + 1, j], beta[:k, j], f)
                prev = quad[j]
                quad[j] = q
                next_check[j] = k + 1 + max(1, (k + 1) // 10)
                if broke:
                    active[j], reason[j] = False, "breakdown"
                    continue
                if k > 0 and (abs(q - prev) <= rel_tol * abs(q) or q == prev == 0.0):
                    active[j], reason[j] = False, "converged"
                    continue
                if last:
                    active[j], reason[j] = False, "max_iter"
                    continue
            Q[j, k + 1] = W[:, c] / b[c]
        if not active.any():
            break

    runs = []
    for j in range(m):
        k = n_iter[j]
        basis = Q[j, :k].T.copy() if keep_basis else None
        runs.append(LanczosRun(basis, alpha[:k, j].copy(), beta[:k, j].copy(), int(k), reason[j], float(quad[j]),
                               float(norms[j])))
    return runs


def _as_apply(E) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(E, LinearOperator):
        if E.rows != E.cols:
            raise ValueError("trace estimation needs a square operator")
        return E.apply
    if isinstance(E, np.ndarray):
        return lambda x: E @ x
    return E


def _dim(E, d):
    if d is not None:
        return int(d)
    if isinstance(E, (LinearOperator, np.ndarray)):
        return int(E.shape[0])
    raise ValueError("dimension must be given for callable operators")


def lanczos_apply_f(E, z, f: str = "log", rel_tol: float = 1e-10, max_iter: int | None = None):
    """Approximate ``f(E) z`` as ``||z|| V f(T) e1``."""
    run = lanczos_block(_as_apply(E), np.asarray(z, dtype=float)[:, None], f, rel_tol, max_iter)[0]
    _, col = _tridiag_f(run.alpha, run.beta[: run.n_iter - 1], f)
    return run.norm * (run.basis @ col), run


def apply_f_columns(E, X, f: str = "log", rel_tol: float = 1e-10, max_iter: int | None = None,
                    chunk: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """``f(E) X`` column by column; returns the result and per-column iteration counts."""
    apply = _as_apply(E)
    X = np.asarray(X, dtype=float)
    out = np.zeros_like(X)
    iters = np.zeros(X.shape[1], dtype=int)
    for s in range(0, X.shape[1], chunk):
        for j, run in enumerate(lanczos_block(apply, X[:, s:s + chunk], f, rel_tol, max_iter), start=s):
            _, col = _tridiag_f(run.alpha, run.beta[: run.n_iter - 1], f)
            out[:, j] = run.norm * (run.basis @ col)
            iters[j] = run.n_iter
    return out, iters


def _chunk_size(d: int, max_iter: int) -> int:
    return int(max(1, min(16, 2e7 // max(d * max_iter, 1))))


def _probes(seed: int, label: str, d: int, n: int, gaussian: bool = False) -> np.ndarray:
    """``d x n`` test vectors drawn one at a time, so smaller counts are prefixes of larger ones."""
    rng = generator(seed, label)
    Z = rng.standard_normal((n, d)) if gaussian else rademacher(rng, (n, d))
    return np.ascontiguousarray(Z.T)


def slq_trace(E, f: str = "log", n_samples: int = 8, seed: int = 0, rel_tol: float = 1e-10,
              max_iter: int | None = None, d: int | None = None) -> TraceEstimate:
    """Stochastic Lanczos quadrature with Rademacher probes."""
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    d = _dim(E, d)
    apply = _as_apply(E)
    max_iter = min(d, 2000) if max_iter is None else max_iter
    Z = _probes(seed, "slq", d, n_samples)
    per = np.zeros(n_samples)
    iters = np.zeros(n_samples, dtype=int)
    chunk = _chunk_size(d, max_iter)
    for s in range(0, n_samples, chunk):
        try:
            runs = lanczos_block(apply, Z[:, s:s + chunk], f, rel_tol, max_iter, keep_basis=False)
        except LanczosError as exc:
            raise LanczosError(f"sample block starting at {s}: {exc}") from exc
        for j, run in enumerate(runs, start=s):
            per[j] = d * run.quadrature
            iters[j] = run.n_iter
    std = float(per.std(ddof=1)) if n_samples > 1 else 0.0
    return TraceEstimate(float(per.mean()), n_samples, per, float(iters.mean()), std, seed, "slq", iters)


def hutchinson_trace(psi, n_samples: int, seed: int, d: int | None = None) -> TraceEstimate:
    """Hutchinson's estimator ``(1/N) sum z^T Psi z`` with Rademacher ``z``; ``psi`` is applied directly."""
    d = _dim(psi, d)
    Z = _probes(seed, "hutchinson", d, n_samples)
    per = np.einsum("ij,ij->j", Z, _as_apply(psi)(Z))
    std = float(per.std(ddof=1)) if n_samples > 1 else 0.0
    return TraceEstimate(float(per.mean()), n_samples, per, 0.0, std, seed, "hutchinson")


@dataclass
class NystromApprox:
    """``Psi<X> = (Psi X)(X^T Psi X)^+ (Psi X)^T``."""

    X: np.ndarray
    sketch: np.ndarray
    core_pinv: np.ndarray

    @classmethod
    def build(cls, X, sketch, threshold: float = 1e-12) -> "NystromApprox":
        return cls(np.asarray(X), np.asarray(sketch), _pinv_sym(X.T @ sketch, threshold))

    def dense(self) -> np.ndarray:
        return self.sketch @ self.core_pinv @ self.sketch.T

    def trace(self) -> float:
        return float(np.sum((self.sketch.T @ self.sketch) * self.core_pinv))


def _pinv_sym(K: np.ndarray, threshold: float = 1e-12) -> np.ndarray:
    K = 0.5 * (K + K.T)
    if K.size == 0:
        return K.copy()
    lam, U = np.linalg.eigh(K)
    top = lam.max()
    if top <= 0:
        return np.zeros_like(K)
    keep = lam > threshold * top
    return (U[:, keep] / lam[keep]) @ U[:, keep].T


def xnystrace_from_sketch(Omega: np.ndarray, Y: np.ndarray, threshold: float = 1e-12) -> np.ndarray:
    """Per-column leave-one-out terms given ``Y = Psi Omega``.

    Term ``j`` is ``tr Psi<Omega_-j> + w_j^T (Psi - Psi<Omega_-j>) w_j``; both
    pieces only need the small matrices ``Omega^T Y`` and ``Y^T Y``.
    """
    N = Omega.shape[1]
    K = Omega.T @ Y
    K = 0.5 * (K + K.T)
    G = Y.T @ Y
    terms = np.zeros(N)
    for j in range(N):
        keep = np.arange(N) != j
        P = _pinv_sym(K[np.ix_(keep, keep)], threshold)
        kj = K[keep, j]
        terms[j] = np.sum(G[np.ix_(keep, keep)] * P) + K[j, j] - kj @ P @ kj
    return terms


def function_sketch(E, n_samples: int, seed: int = 0, rel_tol: float = 1e-10, max_iter: int | None = None,
                    d: int | None = None, f: str = "log"):
    """Gaussian test matrix ``Omega`` and ``Y ~ f(E) Omega`` (Lanczos per column), plus iteration counts."""
    d = _dim(E, d)
    max_iter = min(d, 2000) if max_iter is None else max_iter
    Omega = _probes(seed, "xnystrace", d, n_samples, gaussian=True)
    Y, iters = apply_f_columns(E, Omega, f, rel_tol, max_iter, chunk=_chunk_size(d, max_iter))
    return Omega, Y, iters


def xnystrace_logdet(E, n_samples: int = 8, seed: int = 0, rel_tol: float = 1e-10,
                     max_iter: int | None = None, d: int | None = None,
                     f: str = "log") -> TraceEstimate:
    """Leave-one-out Nystrom estimate of ``tr log(E)`` for ``E = I + A A^T``."""
    d = _dim(E, d)
    if n_samples < 2:
        raise ValueError("XNysTrace needs at least two test vectors")
    if n_samples > d:
        raise ValueError("XNysTrace needs n_samples <= dimension")
    Omega, Y, iters = function_sketch(E, n_samples, seed, rel_tol, max_iter, d, f)
    terms = xnystrace_from_sketch(Omega, Y)
    return TraceEstimate(float(terms.mean()), n_samples, terms, float(iters.mean()),
                         float(terms.std(ddof=1)), seed, "xnystrace", iters)


def xnystrace_dense(psi: np.ndarray, n_samples: int, seed: int) -> TraceEstimate:
    """The same estimator on an explicit PSD matrix (no Lanczos)."""
    Omega = _probes(seed, "xnystrace", psi.shape[0], n_samples, gaussian=True)
    terms = xnystrace_from_sketch(Omega, psi @ Omega)
    return TraceEstimate(float(terms.mean()), n_samples, terms, 0.0, float(terms.std(ddof=1)), seed, "xnystrace")
