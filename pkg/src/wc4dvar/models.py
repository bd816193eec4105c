"""Built-in model problems: 1D heat with homogenized diffusivity and 2D advection-diffusion.

Both use P1 finite elements and implicit Euler.  The snapshot-to-snapshot
propagators are exported as evolution families; by default each propagator is
precomputed as a dense matrix (desk-scale meshes make this cheap and it turns
every model application into one GEMM).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assimilation import DAProblem, noise_covariance, simulate_observations
from .covariance import (
    BlockDiagCovariance,
    DenseCovariance,
    EllipticPriorCovariance,
    ScaledIdentityCovariance,
    sample_error_covariance,
)
from .operators import EvolutionFamily, LinearOperator, ObservationOperator

GAUSS3_X = np.array([-np.sqrt(0.6), 0.0, np.sqrt(0.6)])
GAUSS3_W = np.array([5.0, 8.0, 5.0]) / 9.0


# ----------------------------------------------------------------------------- 1D


@dataclass(frozen=True)
class Mesh1D:
    n_cells: int

    def __post_init__(self):
        if self.n_cells < 2:
            raise ValueError("need at least two cells")

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_cells + 1)

    @property
    def h(self) -> float:
        return 1.0 / self.n_cells

    @property
    def interior(self) -> np.ndarray:
        return self.nodes[1:-1]


@dataclass(frozen=True)
class FEMMatrices:
    mass: sp.csc_matrix
    stiffness: sp.csc_matrix
    advection: sp.csc_matrix | None = None


def oscillatory_kappa(eps: float = 2.0**-4):
    return lambda x: 2.0 + np.sin(2.0 * np.pi * x / eps)


def homogenized_kappa(value: float = np.sqrt(3.0)):
    return lambda x: np.full_like(np.asarray(x, dtype=float), value)


def assemble_heat(mesh: Mesh1D, kappa, eliminate_boundary: bool = True) -> FEMMatrices:
    """P1 mass and kappa-weighted stiffness on (0, 1).

    The stiffness integrand uses 3-point Gauss quadrature per cell.  With
    ``eliminate_boundary`` the homogeneous Dirichlet rows and columns are removed.
    """
    n, h = mesh.n_cells, mesh.h
    x = mesh.nodes
    mid = 0.5 * (x[:-1] + x[1:])
    q = mid[:, None] + 0.5 * h * GAUSS3_X[None, :]
    kq = np.asarray(kappa(q), dtype=float)
    if np.any(kq <= 0):
        raise ValueError("diffusivity must be positive")
    kbar = 0.5 * h * (kq @ GAUSS3_W)  # integral of kappa over each cell
    i = np.arange(n)
    rows = np.concatenate([i, i, i + 1, i + 1])
    cols = np.concatenate([i, i + 1, i, i + 1])
    kvals = np.concatenate([kbar, -kbar, -kbar, kbar]) / h**2
    mvals = np.concatenate([np.full(n, h / 3), np.full(n, h / 6), np.full(n, h / 6), np.full(n, h / 3)])
    K = sp.csc_matrix((kvals, (rows, cols)), shape=(n + 1, n + 1))
    N = sp.csc_matrix((mvals, (rows, cols)), shape=(n + 1, n + 1))
    if eliminate_boundary:
        K, N = K[1:-1, 1:-1], N[1:-1, 1:-1]
    return FEMMatrices(sp.csc_matrix(N), sp.csc_matrix(K))


def implicit_euler_step(fem: FEMMatrices, dt: float):
    """The map ``u -> (N + dt (B + K))^{-1} N u`` as a callable on vectors or column blocks."""
    A = fem.mass + dt * fem.stiffness
    if fem.advection is not None:
        A = A + dt * fem.advection
    lu = spla.splu(sp.csc_matrix(A))
    N = fem.mass
    return lambda u: lu.solve(np.ascontiguousarray(N @ u))


def snapshot_propagator(fem: FEMMatrices, dt: float, substeps: int, dense: bool = True) -> LinearOperator:
    """``S^substeps`` for the implicit-Euler step ``S`` with its transpose.

    ``dense=True`` precomputes the matrix by stepping the identity; otherwise
    each application performs ``substeps`` sparse solves.
    """
    A = fem.mass + dt * fem.stiffness
    if fem.advection is not None:
        A = A + dt * fem.advection
    A = sp.csc_matrix(A)
    lu = spla.splu(A)
    luT = spla.splu(sp.csc_matrix(A.T))
    N = fem.mass
    d = N.shape[0]

    def fwd(u):
        for _ in range(substeps):
            u = lu.solve(np.ascontiguousarray(N @ u))
        return u

    def adj(v):
        for _ in range(substeps):
            v = N.T @ luT.solve(np.ascontiguousarray(v))
        return v

    if not dense:
        return LinearOperator((d, d), fwd, adj, f"S^{substeps}")
    P = fwd(np.eye(d))
    return LinearOperator.from_matrix(P, f"S^{substeps}")


def interpolation_matrix_1d(nodes: np.ndarray, points, interior: slice | None = slice(1, -1)) -> sp.csr_matrix:
    """P1 interpolation rows for ``points`` (columns restricted to ``interior`` nodes)."""
    points = np.asarray(points, dtype=float)
    if np.any(points < nodes[0]) or np.any(points > nodes[-1]):
        raise ValueError("sensor outside the domain")
    n = nodes.size - 1
    h = nodes[1] - nodes[0]
    cell = np.clip(np.floor((points - nodes[0]) / h).astype(int), 0, n - 1)
    t = (points - nodes[cell]) / h
    rows = np.repeat(np.arange(points.size), 2)
    cols = np.stack([cell, cell + 1], axis=1).ravel()
    vals = np.stack([1.0 - t, t], axis=1).ravel()
    keep = np.abs(vals) > 1e-14
    O = sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(points.size, n + 1))
    if interior is not None:
        O = O[:, interior]
    return sp.csr_matrix(O)


@dataclass
class HeatConfig:
    n_cells: int = 128
    eps: float = 2.0**-4
    kappa0: float = float(np.sqrt(3.0))
    final_time: float = 4e-2
    n_T: int = 10
    substeps: int = 256
    mu: float = 0.7
    sigma: float = 0.08
    mu_b: float = 0.2
    bump_scale: float = 0.2
    n_sensors: int = 28
    sensor_range: tuple[float, float] = (0.025, 0.975)
    gamma: float = 0.1
    delta: float = 1.0
    error_samples: int = 40
    noise_fraction: float = 0.02
    dense_propagator: bool = True

    @property
    def dt(self) -> float:
        return self.final_time / (self.n_T * self.substeps)


@dataclass
class ModelProblem:
    """A ready assimilation problem plus the pieces needed to simulate data."""

    problem: DAProblem
    truth: EvolutionFamily
    u0_true: np.ndarray
    y: np.ndarray
    clean: np.ndarray
    sensors: np.ndarray
    fem: FEMMatrices
    info: dict = field(default_factory=dict)


def heat1d_problem(cfg: HeatConfig | None = None, seed: int = 0) -> ModelProblem:
    """The 1D heat benchmark: oscillatory truth, homogenized assimilation model."""
    cfg = cfg or HeatConfig()
    mesh = Mesh1D(cfg.n_cells)
    if mesh.h > cfg.eps / 8:
        raise ValueError(f"mesh size {mesh.h:.4g} does not resolve eps/8 = {cfg.eps / 8:.4g}")
    fem_true = assemble_heat(mesh, oscillatory_kappa(cfg.eps))
    fem = assemble_heat(mesh, homogenized_kappa(cfg.kappa0))
    dt = cfg.dt
    P_true = snapshot_propagator(fem_true, dt, cfg.substeps, cfg.dense_propagator)
    P = snapshot_propagator(fem, dt, cfg.substeps, cfg.dense_propagator)
    truth = EvolutionFamily.constant(P_true, cfg.n_T)
    model = EvolutionFamily.constant(P, cfg.n_T)

    x = mesh.interior
    u0_true = np.exp(-0.5 * ((x - cfg.mu) / cfg.sigma) ** 2)
    u0_b = u0_true + cfg.bump_scale * np.exp(-0.5 * ((x - cfg.mu_b) / cfg.sigma) ** 2)
    background = EllipticPriorCovariance(fem.mass, fem.stiffness, cfg.gamma, cfg.delta)

    Q = sample_error_covariance(truth, model, background, u0_b, cfg.error_samples, seed=seed)
    sensors = np.linspace(*cfg.sensor_range, cfg.n_sensors)
    O = ObservationOperator.from_matrix(interpolation_matrix_1d(mesh.nodes, sensors), cfg.n_T + 1)
    data = simulate_observations(truth, u0_true, O, seed, cfg.noise_fraction)
    truth.counts.update(forward=0, transpose=0)
    model.counts.update(forward=0, transpose=0)
    problem = DAProblem(model, O, background, u0_b, BlockDiagCovariance(Q, "Gamma_Q"),
                        noise_covariance(data.sigma, cfg.n_sensors))
    return ModelProblem(problem, truth, u0_true, data.y, data.clean, sensors, fem,
                        {"model": "heat1d", "d_S": int(x.size), "dt": dt})


# ----------------------------------------------------------------------------- 2D


@dataclass(frozen=True)
class Mesh2D:
    """Structured triangulation of ``(-1, 1)^2`` with an ``n x n`` vertex grid."""

    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("need at least a 2 x 2 vertex grid")

    @property
    def coords(self) -> np.ndarray:
        g = np.linspace(-1.0, 1.0, self.n)
        X, Y = np.meshgrid(g, g, indexing="xy")
        return np.column_stack([X.ravel(), Y.ravel()])

    @property
    def triangles(self) -> np.ndarray:
        n = self.n
        i, j = np.meshgrid(np.arange(n - 1), np.arange(n - 1), indexing="xy")
        v0 = (j * n + i).ravel()
        v1, v2, v3 = v0 + 1, v0 + n, v0 + n + 1
        lower = np.column_stack([v0, v1, v3])
        upper = np.column_stack([v0, v3, v2])
        return np.vstack([lower, upper])


def cavity_velocity(variant: str = "divergence_free"):
    """Cavity-like velocity.  ``"verbatim"`` uses ``(1 - y)^2`` in the second component."""
    if variant == "divergence_free":
        return lambda x, y: (2 * y * (1 - x**2), -2 * x * (1 - y**2))
    if variant == "verbatim":
        return lambda x, y: (2 * y * (1 - x**2), -2 * x * (1 - y) ** 2)
    raise ValueError(f"unknown velocity variant {variant!r}")


# barycentric 3-point rule, exact for quadratics
_BARY = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])


def assemble_advection_diffusion(mesh: Mesh2D, velocity=None, diffusivity: float = 1.0) -> FEMMatrices:
    """P1 mass, stiffness and advection ``B_ij = int (v . grad phi_j) phi_i`` (Neumann)."""
    velocity = velocity or cavity_velocity()
    P = mesh.coords
    T = mesh.triangles
    p0, p1, p2 = P[T[:, 0]], P[T[:, 1]], P[T[:, 2]]
    J = np.stack([p1 - p0, p2 - p0], axis=2)  # (nt, 2, 2), columns are edge vectors
    det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    if np.any(det <= 1e-14):
        raise ValueError("degenerate or negatively oriented triangle")
    area = 0.5 * det
    # gradients of the barycentric basis functions
    Jinv = np.linalg.inv(J)  # rows give grad of (lambda1, lambda2)
    g1, g2 = Jinv[:, 0, :], Jinv[:, 1, :]
    grads = np.stack([-(g1 + g2), g1, g2], axis=1)  # (nt, 3, 2)

    Mloc = area[:, None, None] * (np.ones((3, 3)) + np.eye(3)) / 12.0
    Kloc = diffusivity * area[:, None, None] * np.einsum("tik,tjk->tij", grads, grads)
    qpts = np.einsum("qa,tad->tqd", _BARY, np.stack([p0, p1, p2], axis=1))
    vx, vy = velocity(qpts[..., 0], qpts[..., 1])
    v = np.stack([np.broadcast_to(vx, qpts.shape[:2]), np.broadcast_to(vy, qpts.shape[:2])], axis=-1)
    vg = np.einsum("tqd,tjd->tqj", v, grads)  # v . grad phi_j at quadrature points
    Bloc = (area / 3.0)[:, None, None] * np.einsum("qi,tqj->tij", _BARY, vg)

    rows = np.repeat(T, 3, axis=1).ravel()
    cols = np.tile(T, (1, 3)).ravel()
    nv = P.shape[0]

    def build(loc):
        return sp.csc_matrix((loc.ravel(), (rows, cols)), shape=(nv, nv))

    return FEMMatrices(build(Mloc), build(Kloc), build(Bloc))


def interpolation_matrix_2d(mesh: Mesh2D, points) -> sp.csr_matrix:
    """P1 interpolation on the structured triangulation (at most 3 nonzeros per row)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if np.any(np.abs(points) > 1.0):
        raise ValueError("sensor outside the domain")
    n = mesh.n
    h = 2.0 / (n - 1)
    s = (points + 1.0) / h
    i = np.clip(np.floor(s[:, 0]).astype(int), 0, n - 2)
    j = np.clip(np.floor(s[:, 1]).astype(int), 0, n - 2)
    a, b = s[:, 0] - i, s[:, 1] - j
    v0 = j * n + i
    lower = a >= b  # triangle (v0, v0+1, v0+n+1)
    c_idx = np.where(lower[:, None],
                     np.column_stack([v0, v0 + 1, v0 + n + 1]),
                     np.column_stack([v0, v0 + n + 1, v0 + n]))
    c_val = np.where(lower[:, None],
                     np.column_stack([1 - a, a - b, b]),
                     np.column_stack([1 - b, a, b - a]))
    rows = np.repeat(np.arange(points.shape[0]), 3)
    keep = np.abs(c_val.ravel()) > 1e-14
    return sp.csr_matrix((c_val.ravel()[keep], (rows[keep], c_idx.ravel()[keep])), shape=(points.shape[0], n * n))


@dataclass
class ADConfig:
    grid: int = 17
    final_time: float = 2.0
    n_steps: int = 200
    obs_every: int = 20
    velocity: str = "divergence_free"
    gamma: float = 2.70
    delta: float = 2.5
    alpha: float = 0.05
    sensor_grid: int = 9
    sensor_extent: float = 0.8
    blob_centers: tuple = ((-0.5, 0.5), (0.4, -0.3))
    blob_width: float = 0.15
    noise_fraction: float = 0.02
    dense_propagator: bool = True

    @property
    def n_T(self) -> int:
        return self.n_steps // self.obs_every

    @property
    def dt(self) -> float:
        return self.final_time / self.n_steps


def ad_initial_condition(coords: np.ndarray, centers, width: float) -> np.ndarray:
    c = np.zeros(coords.shape[0])
    for cx, cy in centers:
        c += np.exp(-0.5 * ((coords[:, 0] - cx) ** 2 + (coords[:, 1] - cy) ** 2) / width**2)
    return c


def ad2d_problem(cfg: ADConfig | None = None, seed: int = 0, alpha: float | None = None) -> ModelProblem:
    """The 2D advection-diffusion benchmark with scaled-identity model error."""
    cfg = cfg or ADConfig()
    if cfg.n_steps % cfg.obs_every:
        raise ValueError("n_steps must be a multiple of obs_every")
    alpha = cfg.alpha if alpha is None else alpha
    mesh = Mesh2D(cfg.grid)
    fem = assemble_advection_diffusion(mesh, cavity_velocity(cfg.velocity))
    P = snapshot_propagator(fem, cfg.dt, cfg.obs_every, cfg.dense_propagator)
    model = EvolutionFamily.constant(P, cfg.n_T)
    truth = EvolutionFamily.constant(P, cfg.n_T)
    coords = mesh.coords
    c0 = ad_initial_condition(coords, cfg.blob_centers, cfg.blob_width)
    background = EllipticPriorCovariance(fem.mass, fem.stiffness, cfg.gamma, cfg.delta)
    g = np.linspace(-cfg.sensor_extent, cfg.sensor_extent, cfg.sensor_grid)
    sx, sy = np.meshgrid(g, g, indexing="xy")
    sensors = np.column_stack([sx.ravel(), sy.ravel()])
    n_s = sensors.shape[0]
    O = ObservationOperator.from_matrix(interpolation_matrix_2d(mesh, sensors), cfg.n_T + 1)
    traj = truth.propagate(c0).reshape(cfg.n_T + 1, -1)
    q = alpha * np.linalg.norm(traj[1:], axis=1) / np.sqrt(n_s)
    Q = BlockDiagCovariance([ScaledIdentityCovariance(coords.shape[0], max(float(v), 1e-300) ** 2, f"Q_{l + 1}")
                             for l, v in enumerate(q)], "Gamma_Q")
    data = simulate_observations(truth, c0, O, seed, cfg.noise_fraction)
    truth.counts.update(forward=0, transpose=0)
    model.counts.update(forward=0, transpose=0)
    problem = DAProblem(model, O, background, np.zeros(coords.shape[0]), Q, noise_covariance(data.sigma, n_s))
    return ModelProblem(problem, truth, c0, data.y, data.clean, sensors, fem,
                        {"model": "ad2d", "d_S": int(coords.shape[0]), "dt": cfg.dt, "alpha": alpha,
                         "q": [float(v) for v in q]})


def random_problem(d_S: int, n_T: int, n_s: int, seed: int, model_error_scale: float = 0.3,
                   contraction: float = 0.9) -> DAProblem:
    """A small random instance with dense SPD covariances and diagonal noise."""
    from .covariance import DiagonalCovariance
    from .rng import generator

    rng = generator(seed, "random-problem")

    def spd(n, scale=1.0):
        X = rng.standard_normal((n, n))
        return scale * (X @ X.T / n + 0.5 * np.eye(n))

    steps = []
    for _ in range(n_T):
        M = rng.standard_normal((d_S, d_S))
        M *= contraction / max(np.linalg.norm(M, 2), 1e-12)
        steps.append(LinearOperator.from_matrix(M))
    evolution = EvolutionFamily(steps, d_S=d_S)
    O = ObservationOperator.from_matrix(rng.standard_normal((n_s, d_S)), n_T + 1)
    background = DenseCovariance(spd(d_S), "Gamma_B")
    Q = BlockDiagCovariance([DenseCovariance(spd(d_S, model_error_scale), f"Q_{l + 1}") for l in range(n_T)])
    R = BlockDiagCovariance([DiagonalCovariance(rng.uniform(0.2, 1.0, n_s), f"R_{l}") for l in range(n_T + 1)])
    return DAProblem(evolution, O, background, rng.standard_normal(d_S), Q, R)


__all__ = [
    "ADConfig",
    "FEMMatrices",
    "HeatConfig",
    "Mesh1D",
    "Mesh2D",
    "ModelProblem",
    "ad2d_problem",
    "assemble_advection_diffusion",
    "assemble_heat",
    "cavity_velocity",
    "heat1d_problem",
    "implicit_euler_step",
    "interpolation_matrix_1d",
    "interpolation_matrix_2d",
    "random_problem",
    "snapshot_propagator",
]
