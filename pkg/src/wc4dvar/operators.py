"""Matrix-free linear operators and the structural operators of weak-constraint 4D-Var.

All vectors are stored time-major: a trajectory is ``(u_0, u_1, ..., u_nT)``
concatenated, and observation vectors follow the same block layout.  Every
operator accepts either a 1-D vector or a 2-D array whose columns are
processed independently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp


class DimensionError(ValueError):
    """Raised when an operand does not match an operator's shape."""


def _as_array(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim not in (1, 2):
        raise DimensionError(f"expected a vector or a 2-D block of vectors, got ndim={x.ndim}")
    return x


class LinearOperator:
    """A rectangular linear map given by forward and transpose callbacks.

    Parameters
    ----------
    shape : (rows, cols)
    apply : callable mapping arrays with ``cols`` leading rows to ``rows`` leading rows.
    apply_transpose : callable implementing the adjoint.
    name : optional label used in error messages.
    """

    def __init__(
        self,
        shape: tuple[int, int],
        apply: Callable[[np.ndarray], np.ndarray],
        apply_transpose: Callable[[np.ndarray], np.ndarray],
        name: str = "",
    ):
        rows, cols = (int(s) for s in shape)
        if rows < 0 or cols < 0:
            raise ValueError("operator dimensions must be non-negative")
        self.shape = (rows, cols)
        self._apply = apply
        self._apply_transpose = apply_transpose
        self.name = name

    @property
    def rows(self) -> int:
        return self.shape[0]

    @property
    def cols(self) -> int:
        return self.shape[1]

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"<LinearOperator{label} {self.rows}x{self.cols}>"

    def apply(self, x) -> np.ndarray:
        x = _as_array(x)
        if x.shape[0] != self.cols:
            raise DimensionError(f"{self!r} applied to operand with {x.shape[0]} rows")
        if self.cols == 0 or self.rows == 0:
            return np.zeros((self.rows,) + x.shape[1:])
        return np.asarray(self._apply(x), dtype=float)

    def apply_transpose(self, y) -> np.ndarray:
        y = _as_array(y)
        if y.shape[0] != self.rows:
            raise DimensionError(f"{self!r}^T applied to operand with {y.shape[0]} rows")
        if self.cols == 0 or self.rows == 0:
            return np.zeros((self.cols,) + y.shape[1:])
        return np.asarray(self._apply_transpose(y), dtype=float)

    @property
    def T(self) -> "LinearOperator":
        name = self.name[:-2] if self.name.endswith("^T") else (self.name + "^T" if self.name else "")
        return LinearOperator((self.cols, self.rows), self._apply_transpose, self._apply, name)

    def __matmul__(self, other):
        if isinstance(other, LinearOperator):
            return compose(self, other)
        return self.apply(other)

    def __add__(self, other: "LinearOperator") -> "LinearOperator":
        if not isinstance(other, LinearOperator):
            return NotImplemented
        if self.shape != other.shape:
            raise DimensionError(f"cannot add {self!r} and {other!r}")
        a, b = self, other
        return LinearOperator(
            self.shape,
            lambda x: a.apply(x) + b.apply(x),
            lambda y: a.apply_transpose(y) + b.apply_transpose(y),
        )

    def __neg__(self) -> "LinearOperator":
        return -1.0 * self

    def __sub__(self, other: "LinearOperator") -> "LinearOperator":
        return self + (-other)

    def __rmul__(self, scalar: float) -> "LinearOperator":
        c = float(scalar)
        a = self
        return LinearOperator(self.shape, lambda x: c * a.apply(x), lambda y: c * a.apply_transpose(y))

    def densify(self) -> np.ndarray:
        """Materialize the operator by applying it to the identity (debug/oracle use)."""
        return self.apply(np.eye(self.cols))

    @classmethod
    def from_matrix(cls, matrix, name: str = "") -> "LinearOperator":
        if sp.issparse(matrix):
            m = sp.csr_matrix(matrix, dtype=float)
            mt = sp.csr_matrix(m.T)
            return cls(m.shape, lambda x: m @ x, lambda y: mt @ y, name)
        m = np.asarray(matrix, dtype=float)
        if m.ndim != 2:
            raise DimensionError("from_matrix needs a 2-D array")
        return cls(m.shape, lambda x: m @ x, lambda y: m.T @ y, name)


def identity(n: int) -> LinearOperator:
    return LinearOperator((n, n), lambda x: x.copy(), lambda y: y.copy(), "I")


def zeros(rows: int, cols: int) -> LinearOperator:
    return LinearOperator(
        (rows, cols),
        lambda x: np.zeros((rows,) + x.shape[1:]),
        lambda y: np.zeros((cols,) + y.shape[1:]),
        "0",
    )


def compose(*ops: LinearOperator) -> LinearOperator:
    """Return ``ops[0] @ ops[1] @ ... @ ops[-1]``."""
    if not ops:
        raise ValueError("compose needs at least one operator")
    for left, right in zip(ops[:-1], ops[1:]):
        if left.cols != right.rows:
            raise DimensionError(f"cannot compose {left!r} with {right!r}")

    def fwd(x):
        for op in reversed(ops):
            x = op.apply(x)
        return x

    def adj(y):
        for op in ops:
            y = op.apply_transpose(y)
        return y

    return LinearOperator((ops[0].rows, ops[-1].cols), fwd, adj)


def block_diag(ops: Sequence[LinearOperator]) -> LinearOperator:
    ops = list(ops)
    row_off = np.cumsum([0] + [op.rows for op in ops])
    col_off = np.cumsum([0] + [op.cols for op in ops])

    def fwd(x):
        out = np.empty((row_off[-1],) + x.shape[1:])
        for i, op in enumerate(ops):
            out[row_off[i]:row_off[i + 1]] = op.apply(x[col_off[i]:col_off[i + 1]])
        return out

    def adj(y):
        out = np.empty((col_off[-1],) + y.shape[1:])
        for i, op in enumerate(ops):
            out[col_off[i]:col_off[i + 1]] = op.apply_transpose(y[row_off[i]:row_off[i + 1]])
        return out

    return LinearOperator((row_off[-1], col_off[-1]), fwd, adj, "blkdiag")


def block_operator(grid: Sequence[Sequence[LinearOperator | None]], row_sizes, col_sizes) -> LinearOperator:
    """Assemble a block operator; ``None`` entries are zero blocks."""
    row_sizes = [int(r) for r in row_sizes]
    col_sizes = [int(c) for c in col_sizes]
    row_off = np.cumsum([0] + row_sizes)
    col_off = np.cumsum([0] + col_sizes)
    for i, row in enumerate(grid):
        for j, op in enumerate(row):
            if op is not None and op.shape != (row_sizes[i], col_sizes[j]):
                raise DimensionError(f"block ({i},{j}) has shape {op.shape}")

    def fwd(x):
        out = np.zeros((row_off[-1],) + x.shape[1:])
        for i, row in enumerate(grid):
            for j, op in enumerate(row):
                if op is not None:
                    out[row_off[i]:row_off[i + 1]] += op.apply(x[col_off[j]:col_off[j + 1]])
        return out

    def adj(y):
        out = np.zeros((col_off[-1],) + y.shape[1:])
        for i, row in enumerate(grid):
            for j, op in enumerate(row):
                if op is not None:
                    out[col_off[j]:col_off[j + 1]] += op.apply_transpose(y[row_off[i]:row_off[i + 1]])
        return out

    return LinearOperator((row_off[-1], col_off[-1]), fwd, adj, "block")


def adjoint_mismatch(op: LinearOperator, rng: np.random.Generator, trials: int = 3) -> float:
    """Largest relative gap between <Ax, y> and <x, A^T y> over random pairs."""
    worst = 0.0
    for _ in range(trials):
        x = rng.standard_normal(op.cols)
        y = rng.standard_normal(op.rows)
        ax, aty = op.apply(x), op.apply_transpose(y)
        lhs, rhs = float(ax @ y), float(x @ aty)
        scale = np.linalg.norm(ax) * np.linalg.norm(y) + np.linalg.norm(x) * np.linalg.norm(aty)
        if scale > 0:
            worst = max(worst, abs(lhs - rhs) / scale)
    return worst


@dataclass(frozen=True)
class ProblemDims:
    d_S: int
    n_T: int
    n_s: int

    def __post_init__(self):
        if self.d_S < 1 or self.n_T < 0 or self.n_s < 0:
            raise ValueError(f"invalid dimensions {self}")

    @property
    def n_blocks(self) -> int:
        return self.n_T + 1

    @property
    def N_d(self) -> int:
        return (self.n_T + 1) * self.d_S

    @property
    def N_m(self) -> int:
        return (self.n_T + 1) * self.n_s


class EvolutionFamily:
    """The one-window propagators ``M_{l -> l+1}`` for ``l = 0 .. n_T - 1``.

    Applications are tallied in ``counts`` so callers can audit whether a
    procedure ever touched the adjoint model.
    """

    def __init__(self, steps: Sequence[LinearOperator], d_S: int | None = None):
        self.steps = tuple(steps)
        if d_S is None:
            if not self.steps:
                raise ValueError("d_S is required for an empty evolution family")
            d_S = self.steps[0].rows
        self.d_S = int(d_S)
        for op in self.steps:
            if op.shape != (self.d_S, self.d_S):
                raise DimensionError(f"evolution step {op!r} is not {self.d_S}x{self.d_S}")
        self.counts = {"forward": 0, "transpose": 0}

    @property
    def n_T(self) -> int:
        return len(self.steps)

    def step(self, l: int, x: np.ndarray) -> np.ndarray:
        self.counts["forward"] += 1
        return self.steps[l].apply(x)

    def step_transpose(self, l: int, x: np.ndarray) -> np.ndarray:
        self.counts["transpose"] += 1
        return self.steps[l].apply_transpose(x)

    def propagate(self, u0: np.ndarray) -> np.ndarray:
        """Stacked noise-free trajectory started from ``u0``."""
        u0 = _as_array(u0)
        out = np.empty(((self.n_T + 1) * self.d_S,) + u0.shape[1:])
        out[: self.d_S] = u0
        u = u0
        for l in range(self.n_T):
            u = self.step(l, u)
            out[(l + 1) * self.d_S:(l + 2) * self.d_S] = u
        return out

    @classmethod
    def constant(cls, step: LinearOperator, n_T: int) -> "EvolutionFamily":
        return cls([step] * n_T, d_S=step.rows)


def compose_evolution(evolution: EvolutionFamily, j: int, l: int) -> LinearOperator:
    """The propagator ``M_{j -> l}`` (identity when ``j == l``)."""
    if not 0 <= j <= l <= evolution.n_T:
        raise IndexError(f"need 0 <= j <= l <= {evolution.n_T}, got j={j}, l={l}")
    d = evolution.d_S

    def fwd(x):
        for s in range(j, l):
            x = evolution.step(s, x)
        return x.copy() if j == l else x

    def adj(y):
        for s in reversed(range(j, l)):
            y = evolution.step_transpose(s, y)
        return y.copy() if j == l else y

    return LinearOperator((d, d), fwd, adj, f"M_{j}->{l}")


def coupling_operator(evolution: EvolutionFamily, inverse: bool = False) -> LinearOperator:
    """The block-bidiagonal coupling ``L`` or its inverse, applied recursively.

    ``L u`` returns ``(u_0, u_1 - M u_0, ..., u_nT - M u_{nT-1})``; ``L^{-1} p``
    rebuilds the trajectory by ``u_{l+1} = M u_l + p_{l+1}``.  The transposes
    are the matching backward-in-time sweeps.
    """
    d, n_T = evolution.d_S, evolution.n_T
    n = (n_T + 1) * d

    def blocks(x):
        return x.reshape((n_T + 1, d) + x.shape[1:])

    def forward(u):
        ub = blocks(u)
        p = ub.copy()
        for l in range(n_T):
            p[l + 1] -= evolution.step(l, ub[l])
        return p.reshape(u.shape)

    def forward_t(p):
        pb = blocks(p)
        u = pb.copy()
        for l in range(n_T):
            u[l] -= evolution.step_transpose(l, pb[l + 1])
        return u.reshape(p.shape)

    def inverse_(p):
        pb = blocks(p)
        u = pb.copy()
        for l in range(n_T):
            u[l + 1] += evolution.step(l, u[l])
        return u.reshape(p.shape)

    def inverse_t(u):
        ub = blocks(u)
        lam = ub.copy()
        for l in reversed(range(n_T)):
            lam[l] += evolution.step_transpose(l, lam[l + 1])
        return lam.reshape(u.shape)

    if inverse:
        return LinearOperator((n, n), inverse_, inverse_t, "L^-1")
    return LinearOperator((n, n), forward, forward_t, "L")


@dataclass(frozen=True)
class SensorDesign:
    """An increasing subset of candidate sensor indices."""

    n_s: int
    indices: tuple[int, ...] = field(default=())

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if any(i < 0 or i >= self.n_s for i in idx):
            raise ValueError(f"sensor index out of range [0, {self.n_s}): {idx}")
        if len(set(idx)) != len(idx):
            raise ValueError(f"duplicate sensor indices: {idx}")
        object.__setattr__(self, "indices", tuple(sorted(idx)))

    @classmethod
    def full(cls, n_s: int) -> "SensorDesign":
        return cls(n_s, tuple(range(n_s)))

    @property
    def k(self) -> int:
        return len(self.indices)

    def with_sensor(self, j: int) -> "SensorDesign":
        return SensorDesign(self.n_s, self.indices + (j,))

    def block_indices(self, n_blocks: int) -> np.ndarray:
        """Positions of the selected rows inside a stacked ``n_blocks * n_s`` vector."""
        idx = np.asarray(self.indices, dtype=int)
        return (np.arange(n_blocks)[:, None] * self.n_s + idx[None, :]).ravel()


def embed_selection(design: SensorDesign, n_blocks: int) -> LinearOperator:
    """``I_{n_blocks} kron S``: scatters ``k`` values per block into ``n_s`` slots."""
    if n_blocks < 1:
        raise ValueError("n_blocks must be positive")
    rows = n_blocks * design.n_s
    pos = design.block_indices(n_blocks)

    def fwd(x):
        out = np.zeros((rows,) + x.shape[1:])
        out[pos] = x
        return out

    def adj(y):
        return y[pos].copy()

    return LinearOperator((rows, pos.size), fwd, adj, "IxS")


class ObservationOperator:
    """Block-diagonal observation map, one ``n_s x d_S`` block per time level."""

    def __init__(self, per_step: LinearOperator | Sequence[LinearOperator], n_blocks: int | None = None):
        if isinstance(per_step, LinearOperator):
            if n_blocks is None:
                raise ValueError("n_blocks is required for a time-invariant observation operator")
            per_step = [per_step] * n_blocks
        self.blocks = tuple(per_step)
        if not self.blocks:
            raise ValueError("at least one observation block is required")
        shapes = {op.shape for op in self.blocks}
        if len(shapes) != 1:
            raise DimensionError(f"observation blocks disagree in shape: {shapes}")
        self.n_s, self.d_S = self.blocks[0].shape
        self.block = block_diag(self.blocks)
        self.block.name = "O"

    @property
    def per_step(self) -> LinearOperator:
        return self.blocks[0]

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @classmethod
    def from_matrix(cls, matrix, n_blocks: int) -> "ObservationOperator":
        return cls(LinearOperator.from_matrix(matrix, "O_0"), n_blocks)

    def restrict(self, design: SensorDesign) -> "ObservationOperator":
        """``(I kron S)^T O``: the operator observing only the selected sensors."""
        if design.n_s != self.n_s:
            raise DimensionError(f"design for {design.n_s} sensors, operator has {self.n_s}")
        pick = embed_selection(design, 1).T
        return ObservationOperator([compose(pick, op) for op in self.blocks])
