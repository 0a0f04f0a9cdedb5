"""Full-order two-species advection-diffusion-reaction model.

Finite differences on a uniform node grid over a rectangle with lumped
mass, a 5-point diffusion stencil written in flux form on the dual cells,
and first-order upwind advection. Boundaries (and obstacle faces) are
zero-flux.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

logger = logging.getLogger(__name__)

XI_TRAIN = (1.0, 1.0, 10.0, 75.0)
XI_TEST = (1.5, 1.5, 8.0, 50.0)

DOMAIN_LENGTH = 1.2
FINAL_TIME = 0.4
N_STEPS = 200
GAMMA = 1e-5

SOURCE_CENTER = (0.25, 0.85)
SOURCE_WIDTH = 80.0
SOURCE_AMPLITUDE = 1000.0
PROTECTION_CENTER = (0.9, 0.35)


class SimulationError(RuntimeError):
    """Raised when a time integration produces a non-finite state."""


@dataclass(frozen=True)
class WindParams:
    xi: tuple = XI_TRAIN

    def __post_init__(self):
        xi = tuple(float(v) for v in self.xi)
        if len(xi) != 4 or not np.all(np.isfinite(xi)):
            raise ValueError(f"wind parameters must be 4 finite values, got {self.xi!r}")
        object.__setattr__(self, "xi", xi)


@dataclass(frozen=True)
class Physics:
    kappa1: float = 0.1
    kappa2: float = 0.1
    rho: float = 2.0


@dataclass(frozen=True, eq=False)
class Grid2D:
    """Uniform node grid on ``(0, lx) x (0, ly)``.

    Nodes are numbered ``j * nx + i`` with ``i`` along the first coordinate.
    Masked nodes are removed from the state vector; ``active`` maps state
    indices back to grid indices.
    """

    nx: int
    ny: int
    lx: float = DOMAIN_LENGTH
    ly: float = DOMAIN_LENGTH
    obstacle_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.nx < 3 or self.ny < 3:
            raise ValueError("grid needs at least 3 nodes per direction")
        if self.lx <= 0 or self.ly <= 0:
            raise ValueError("domain extents must be positive")
        mask = self.obstacle_mask
        if mask is None:
            mask = np.zeros(self.nx * self.ny, dtype=bool)
        mask = np.asarray(mask, dtype=bool).reshape(-1)
        if mask.size != self.nx * self.ny:
            raise ValueError("obstacle mask size does not match the grid")
        object.__setattr__(self, "obstacle_mask", mask)

    @property
    def hx(self) -> float:
        return self.lx / (self.nx - 1)

    @property
    def hy(self) -> float:
        return self.ly / (self.ny - 1)

    @property
    def active(self) -> np.ndarray:
        return np.flatnonzero(~self.obstacle_mask)

    @property
    def n(self) -> int:
        return int(self.active.size)

    @property
    def node_coords(self) -> np.ndarray:
        """Coordinates of the active nodes, shape ``(n, 2)``."""
        x = np.linspace(0.0, self.lx, self.nx)
        y = np.linspace(0.0, self.ly, self.ny)
        X, Y = np.meshgrid(x, y)
        pts = np.column_stack([X.ravel(), Y.ravel()])
        return pts[self.active]

    def lumped_mass(self) -> np.ndarray:
        """Dual-cell areas of the active nodes (boundary cells halved)."""
        wx = np.full(self.nx, self.hx)
        wx[[0, -1]] *= 0.5
        wy = np.full(self.ny, self.hy)
        wy[[0, -1]] *= 0.5
        return np.outer(wy, wx).ravel()[self.active]

    def to_dict(self) -> dict:
        d = {"nx": self.nx, "ny": self.ny, "lx": self.lx, "ly": self.ly}
        if self.obstacle_mask.any():
            d["obstacles"] = np.flatnonzero(self.obstacle_mask).tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Grid2D":
        mask = None
        if d.get("obstacles"):
            mask = np.zeros(d["nx"] * d["ny"], dtype=bool)
            mask[d["obstacles"]] = True
        return cls(d["nx"], d["ny"], d.get("lx", DOMAIN_LENGTH), d.get("ly", DOMAIN_LENGTH), mask)


@dataclass(frozen=True, eq=False)
class FomOperators:
    grid: Grid2D
    xi: WindParams
    physics: Physics
    mass: np.ndarray
    lin1: sp.csr_matrix
    lin2: sp.csr_matrix
    stiffness: sp.csr_matrix
    source_basis: np.ndarray
    injection_points: np.ndarray
    initial_u1: np.ndarray
    final_time: float = FINAL_TIME

    @property
    def n(self) -> int:
        return self.mass.size

    @property
    def reaction_rate(self) -> float:
        return self.physics.rho


@dataclass(frozen=True, eq=False)
class ControlVector:
    """Injection magnitudes ``q_nodes[i, j]`` at ``time_nodes[j]``."""

    q_nodes: np.ndarray
    time_nodes: np.ndarray

    def __post_init__(self):
        q = np.atleast_2d(np.asarray(self.q_nodes, dtype=float))
        t = np.asarray(self.time_nodes, dtype=float)
        if q.shape[1] != t.size:
            raise ValueError(f"q_nodes has {q.shape[1]} columns but {t.size} time nodes")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("time nodes must be strictly increasing")
        object.__setattr__(self, "q_nodes", q)
        object.__setattr__(self, "time_nodes", t)

    @property
    def n_q(self) -> int:
        return self.q_nodes.shape[0]

    @property
    def n_s(self) -> int:
        return self.time_nodes.size

    @property
    def z(self) -> np.ndarray:
        return self.q_nodes.ravel()

    @classmethod
    def from_flat(cls, z, n_q: int, time_nodes) -> "ControlVector":
        time_nodes = np.asarray(time_nodes, dtype=float)
        return cls(np.asarray(z, dtype=float).reshape(n_q, time_nodes.size), time_nodes)

    @classmethod
    def constant(cls, value: float, n_q: int = 14, n_s: int = 100, final_time: float = FINAL_TIME):
        return cls(np.full((n_q, n_s), float(value)), np.linspace(0.0, final_time, n_s))


@dataclass(frozen=True, eq=False)
class StateTrajectory:
    times: np.ndarray
    u1: np.ndarray
    u2: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size < 1:
            raise ValueError("times must be a non-empty vector")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing")
        if self.u1.shape[1] != t.size or self.u2.shape[1] != t.size:
            raise ValueError("state columns must match the time grid")

    @property
    def n_t(self) -> int:
        return self.times.size

    @property
    def stacked(self) -> np.ndarray:
        return np.vstack([self.u1, self.u2])


@dataclass(eq=False)
class ProtectionZone:
    psi: np.ndarray
    center: tuple = PROTECTION_CENTER
    scaled_mass: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def build(cls, grid: Grid2D, center=PROTECTION_CENTER, width: float = 10.0) -> "ProtectionZone":
        d2 = np.sum((grid.node_coords - np.asarray(center)) ** 2, axis=1)
        return cls(np.exp(-width * d2), tuple(center))


def velocity_field(x, xi: WindParams, domain_length: float = DOMAIN_LENGTH) -> np.ndarray:
    """Stationary wind at point(s) ``x`` (shape ``(2,)`` or ``(n, 2)``)."""
    if domain_length <= 0:
        raise ValueError("domain_length must be positive")
    x = np.asarray(x, dtype=float)
    x1 = x[..., 0]
    a, b, c, d = xi.xi
    phase = d * x1 / domain_length
    wobble = 2.0 * b * np.sin(c * np.pi * x1)
    v1 = 4.0 * a * np.cos(phase) - wobble * np.sin(phase)
    v2 = 4.0 * a * np.sin(phase) - wobble * np.cos(phase)
    return np.stack([v1, v2], axis=-1)


def default_injection_points(n_q: int = 14) -> np.ndarray:
    """Two vertical lines of injectors between the source and protection zone."""
    per_line = n_q // 2
    lines = (0.5, 0.65)
    pts = []
    for k, x1 in enumerate(lines):
        count = per_line + (n_q % 2 if k == len(lines) - 1 else 0)
        for x2 in np.linspace(0.2, 0.8, count):
            pts.append((x1, x2))
    return np.asarray(pts)


def gaussian_bump(grid: Grid2D, center=SOURCE_CENTER, width: float = SOURCE_WIDTH,
                  amplitude: float = SOURCE_AMPLITUDE):
    d2 = np.sum((grid.node_coords - np.asarray(center)) ** 2, axis=1)
    return amplitude * np.exp(-width * d2)


def _neighbor_pairs(grid: Grid2D):
    """Active-index pairs of horizontal and vertical neighbours with face weights."""
    nx, ny = grid.nx, grid.ny
    lookup = np.full(nx * ny, -1)
    lookup[grid.active] = np.arange(grid.n)
    idx = np.arange(nx * ny).reshape(ny, nx)

    def pairs(a, b, on_edge):
        a, b, w = a.ravel(), b.ravel(), np.where(on_edge, 0.5, 1.0).ravel()
        ia, ib = lookup[a], lookup[b]
        keep = (ia >= 0) & (ib >= 0)
        return ia[keep], ib[keep], w[keep]

    rows = np.arange(ny)[:, None] * np.ones((1, nx - 1), dtype=int)
    horiz = pairs(idx[:, :-1], idx[:, 1:], (rows == 0) | (rows == ny - 1))
    cols = np.ones((ny - 1, 1), dtype=int) * np.arange(nx)[None, :]
    vert = pairs(idx[:-1, :], idx[1:, :], (cols == 0) | (cols == nx - 1))
    return horiz, vert


def diffusion_stiffness(grid: Grid2D) -> sp.csr_matrix:
    """Symmetric positive semidefinite flux-form Laplacian ``K`` (unit diffusivity)."""
    (ha, hb, hw), (va, vb, vw) = _neighbor_pairs(grid)
    a = np.concatenate([ha, va])
    b = np.concatenate([hb, vb])
    c = np.concatenate([hw * grid.hy / grid.hx, vw * grid.hx / grid.hy])
    n = grid.n
    off = sp.coo_matrix((np.concatenate([-c, -c]), (np.concatenate([a, b]), np.concatenate([b, a]))), shape=(n, n))
    diag = np.bincount(a, c, n) + np.bincount(b, c, n)
    return (off + sp.diags(diag)).tocsr()


def upwind_advection(grid: Grid2D, vel: np.ndarray) -> sp.csr_matrix:
    """Matrix ``D`` with ``(D u)_i ~ v_i . grad u`` by first-order upwinding.

    A missing upwind neighbour (wall or obstacle) contributes a zero
    one-sided derivative, consistent with the zero-flux condition.
    """
    (ha, hb, _), (va, vb, _) = _neighbor_pairs(grid)
    n = grid.n
    rows, cols, vals = [], [], []
    for a, b, comp, h in ((ha, hb, 0, grid.hx), (va, vb, 1, grid.hy)):
        # a is the lower neighbour of b along this axis
        vb_ = vel[b, comp]
        up = vb_ > 0  # node b takes its derivative from a
        coef = vb_[up] / h
        rows += [b[up], b[up]]
        cols += [b[up], a[up]]
        vals += [coef, -coef]
        va_ = vel[a, comp]
        down = va_ < 0  # node a takes its derivative from b
        coef = va_[down] / h
        rows += [a[down], a[down]]
        cols += [b[down], a[down]]
        vals += [coef, -coef]
    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()


def advection_cfl(grid: Grid2D, xi: WindParams, dt: float) -> float:
    vel = velocity_field(grid.node_coords, xi, grid.lx)
    return float(np.max(np.abs(vel[:, 0]) * dt / grid.hx + np.abs(vel[:, 1]) * dt / grid.hy))


def assemble_fom(
    grid: Grid2D,
    xi: WindParams,
    physics: Physics = Physics(),
    injection_points=None,
    initial_u1=None,
    final_time: float = FINAL_TIME,
    n_steps: int = N_STEPS,
) -> FomOperators:
    dt = final_time / n_steps
    cfl = advection_cfl(grid, xi, dt)
    if cfl > 1.0:
        raise ValueError(f"advection CFL number {cfl:.3f} exceeds 1 for dt={dt:g}; refine the time step")
    coords = grid.node_coords
    mass = grid.lumped_mass()
    K = diffusion_stiffness(grid)
    D = upwind_advection(grid, velocity_field(coords, xi, grid.lx))
    MD = sp.diags(mass) @ D
    lin1 = (-physics.kappa1 * K - MD).tocsr()
    lin2 = (-physics.kappa2 * K - MD).tocsr()
    pts = default_injection_points() if injection_points is None else np.asarray(injection_points, dtype=float)
    d2 = np.sum((coords[:, None, :] - pts[None, :, :]) ** 2, axis=2)
    phi = 50.0 * np.exp(-1000.0 * d2)
    u0 = gaussian_bump(grid) if initial_u1 is None else np.asarray(initial_u1, dtype=float)
    return FomOperators(grid, xi, physics, mass, lin1, lin2, K, phi, pts, u0, final_time)


def control_eval(z: ControlVector, t) -> np.ndarray:
    """Piecewise-linear interpolation of the control in time."""
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    tn = z.time_nodes
    tol = 1e-12 * max(1.0, abs(tn[-1]))
    if np.any(t_arr < tn[0] - tol) or np.any(t_arr > tn[-1] + tol):
        raise ValueError(f"time outside the control interval [{tn[0]}, {tn[-1]}]")
    W = interpolation_weights(tn, np.clip(t_arr, tn[0], tn[-1]))
    out = z.q_nodes @ W.T
    return out[:, 0] if np.ndim(t) == 0 else out


def interpolation_weights(nodes: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Hat-function weights, shape ``(len(t), len(nodes))``."""
    nodes = np.asarray(nodes, dtype=float)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    W = np.zeros((t.size, nodes.size))
    if nodes.size == 1:
        W[:, 0] = 1.0
        return W
    k = np.clip(np.searchsorted(nodes, t, side="right") - 1, 0, nodes.size - 2)
    frac = (t - nodes[k]) / (nodes[k + 1] - nodes[k])
    rows = np.arange(t.size)
    W[rows, k] = 1.0 - frac
    W[rows, k + 1] = frac
    return W


def _phi1(x):
    """``expm1(x) / x`` with the removable singularity filled in."""
    x = np.minimum(x, 700.0)
    out = np.ones_like(x)
    nz = np.abs(x) > 1e-12
    out[nz] = np.expm1(x[nz]) / x[nz]
    return out


def react_exact(u1, u2, rho: float, tau: float):
    """Exact solution of ``u1' = u2' = -rho u1 u2`` over ``tau``."""
    d = u1 - u2
    new1 = u1 / (1.0 + rho * tau * u2 * _phi1(-rho * d * tau))
    return new1, new1 - d


def simulate_fom(ops: FomOperators, z: ControlVector, n_t: int = N_STEPS + 1, initial_u1=None) -> StateTrajectory:
    """Integrate the FOM on ``n_t`` uniform time points over ``[0, T]``.

    Each step applies the exact pointwise reaction, then a backward-Euler
    transport solve with the source evaluated at the new time.
    """
    if n_t < 2:
        raise ValueError("need at least two time points")
    T = ops.final_time
    times = np.linspace(0.0, T, n_t)
    dt = T / (n_t - 1)
    n = ops.n
    M = sp.diags(ops.mass)
    solve1 = spla.splu((M - dt * ops.lin1).tocsc()).solve
    if ops.physics.kappa1 == ops.physics.kappa2:
        solve2 = solve1
    else:
        solve2 = spla.splu((M - dt * ops.lin2).tocsc()).solve
    q = control_eval(z, times)
    src = ops.source_basis @ (q * q)
    u1 = np.empty((n, n_t))
    u2 = np.empty((n, n_t))
    u1[:, 0] = ops.initial_u1 if initial_u1 is None else initial_u1
    u2[:, 0] = 0.0
    rho = ops.physics.rho
    for k in range(n_t - 1):
        a, b = react_exact(u1[:, k], u2[:, k], rho, dt)
        u1[:, k + 1] = solve1(ops.mass * a)
        u2[:, k + 1] = solve2(ops.mass * (b + dt * src[:, k + 1]))
        if not (np.all(np.isfinite(u1[:, k + 1])) and np.all(np.isfinite(u2[:, k + 1]))):
            peak = np.nanmax(np.abs(np.concatenate([u1[:, k + 1], u2[:, k + 1]])))
            raise SimulationError(f"non-finite FOM state at step {k + 1} (max |u| = {peak:g})")
    return StateTrajectory(times, u1, u2)


def trapezoid_weights(times: np.ndarray) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    w = np.zeros_like(times)
    if times.size > 1:
        h = np.diff(times)
        w[:-1] += 0.5 * h
        w[1:] += 0.5 * h
    return w


def fom_objective(traj: StateTrajectory, z: ControlVector, zone: ProtectionZone, mass: np.ndarray,
                  gamma: float = GAMMA):
    """``0.5 * int ||u1 psi||_M^2 + gamma ||q o q||^2 dt`` by the trapezoidal rule."""
    if zone.psi.size != traj.u1.shape[0] or mass.size != traj.u1.shape[0]:
        raise ValueError("trajectory, zone and mass disagree on the number of nodes")
    w = trapezoid_weights(traj.times)
    return 0.5 * float(w @ (zone_integrand(traj, zone, mass) + gamma * control_integrand(z, traj.times)))


def zone_integrand(traj: StateTrajectory, zone: ProtectionZone, mass: np.ndarray) -> np.ndarray:
    """``||u1(t) psi||_M^2`` at each trajectory time."""
    weighted = traj.u1 * zone.psi[:, None]
    return np.einsum("it,i,it->t", weighted, mass, weighted)


def control_integrand(z: ControlVector, times) -> np.ndarray:
    q = control_eval(z, np.asarray(times))
    return np.sum(q**4, axis=0)
