"""Toy level-set wildfire model.

The front is the zero set of ``u`` (negative inside the burned region) and
moves outward with speed ``Psi(n)`` along its normal ``n``:
``u_t + Psi |grad u| = 0``. Every hour the field is replaced by the signed
distance to its zero set, which is also the observation operator.
Lengths are meters and times are hours unless stated otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fom import Grid2D

CELL = 60.0
N_NODES = 64
SHIFT = -10.0
K_WIND = 0.5  # s/m
EPS_RATE = 0.05
BASE_RATE = 0.02  # m/s
WIND_TRAIN = (0.1, 0.1)
WIND_TEST = (4.33, 2.5)


def fire_grid(n: int = N_NODES, cell: float = CELL) -> Grid2D:
    return Grid2D(n, n, (n - 1) * cell, (n - 1) * cell)


@dataclass(frozen=True)
class IgnitionPoint:
    z: tuple
    c: float = SHIFT

    def __post_init__(self):
        z = tuple(float(v) for v in np.asarray(self.z, dtype=float).ravel())
        if len(z) != 2 or not np.all(np.isfinite(z)):
            raise ValueError("ignition point must be a finite 2-vector")
        object.__setattr__(self, "z", z)

    def check_inside(self, grid: Grid2D):
        x, y = self.z
        if not (0.0 <= x <= grid.lx and 0.0 <= y <= grid.ly):
            raise ValueError(f"ignition point {self.z} lies outside the domain")


@dataclass(frozen=True, eq=False)
class FireScenario:
    grid: Grid2D = field(default_factory=fire_grid)
    wind: tuple = WIND_TRAIN
    base_rate: float = BASE_RATE
    fuel: np.ndarray | None = None
    horizon: int = 8
    n_obs: int = 7
    dt: float | None = None  # seconds; chosen from the CFL bound when omitted
    k_wind: float = K_WIND
    eps_rate: float = EPS_RATE

    def __post_init__(self):
        if self.base_rate <= 0:
            raise ValueError("base_rate must be positive")
        fuel = np.ones(self.grid.n) if self.fuel is None else np.asarray(self.fuel, dtype=float).ravel()
        if fuel.size != self.grid.n or np.any(fuel < 0):
            raise ValueError("fuel map must have one non-negative entry per node")
        object.__setattr__(self, "fuel", fuel)
        object.__setattr__(self, "wind", tuple(float(w) for w in self.wind))
        if self.n_obs < 1 or 1 + self.n_obs > self.horizon:
            raise ValueError("observation times 2..n_obs+1 hours must lie in (0, horizon]")
        if self.dt is not None and self.dt > self.max_stable_dt():
            raise ValueError(f"time step {self.dt} s violates the CFL bound {self.max_stable_dt():.1f} s")

    @property
    def obs_times(self) -> np.ndarray:
        return 1.0 + np.arange(1, self.n_obs + 1)

    def max_rate(self) -> float:
        speed = np.hypot(*self.wind)
        return self.base_rate * float(self.fuel.max()) * max(self.eps_rate, 1.0 + self.k_wind * speed)

    def max_stable_dt(self) -> float:
        h = min(self.grid.hx, self.grid.hy)
        rate = self.max_rate()
        return np.inf if rate == 0 else 0.5 * h / rate

    def substeps(self) -> tuple[int, float]:
        """Steps per hour and the step length in seconds."""
        dt = self.dt if self.dt is not None else min(self.max_stable_dt(), 3600.0)
        n = int(np.ceil(3600.0 / dt - 1e-9))
        return n, 3600.0 / n


def ignition_init(z: IgnitionPoint, grid: Grid2D) -> np.ndarray:
    """``||x - z|| + c`` at the nodes."""
    z.check_inside(grid)
    return np.linalg.norm(grid.node_coords - np.asarray(z.z), axis=1) + z.c


def ignition_init_jacobian(z: IgnitionPoint, grid: Grid2D) -> np.ndarray:
    """``d u0 / d z``, shape ``(n, 2)``; zero at a node coinciding with ``z``."""
    diff = grid.node_coords - np.asarray(z.z)
    r = np.linalg.norm(diff, axis=1)
    out = np.zeros_like(diff)
    nz = r > 0
    out[nz] = -diff[nz] / r[nz, None]
    return out


def spread_rate(direction, wind, fuel, base_rate: float, k_wind: float = K_WIND, eps: float = EPS_RATE):
    """Front speed (m/s) for unit spread direction(s) ``direction`` (..., 2)."""
    direction = np.asarray(direction, dtype=float)
    align = direction @ np.asarray(wind, dtype=float)
    return base_rate * np.asarray(fuel, dtype=float) * np.maximum(eps, 1.0 + k_wind * align)


def _fuel_at(point, scenario: FireScenario) -> float:
    """Bilinear interpolation of the fuel map."""
    g = scenario.grid
    F = scenario.fuel.reshape(g.ny, g.nx)
    fx = min(max(point[0] / g.hx, 0.0), g.nx - 1.0)
    fy = min(max(point[1] / g.hy, 0.0), g.ny - 1.0)
    i, j = min(int(fx), g.nx - 2), min(int(fy), g.ny - 2)
    a, b = fx - i, fy - j
    return float((1 - a) * (1 - b) * F[j, i] + a * (1 - b) * F[j, i + 1]
                 + (1 - a) * b * F[j + 1, i] + a * b * F[j + 1, i + 1])


def early_level_set(z: IgnitionPoint, scenario: FireScenario, seconds: float, n_angles: int = 4096) -> np.ndarray:
    """Exact level set ``seconds`` after ignition for fuel frozen at its ignition value.

    With a direction-only speed the evolution of the cone is given by the
    Hopf-Lax formula, ``u = c + max(0, max_n (<x - z, n> - t Psi(n)))``; the
    maximum is taken over ``n_angles`` directions.
    """
    grid = scenario.grid
    z.check_inside(grid)
    theta = np.linspace(0.0, 2 * np.pi, n_angles, endpoint=False)
    N = np.column_stack([np.cos(theta), np.sin(theta)])
    reach = seconds * spread_rate(N, scenario.wind, _fuel_at(z.z, scenario), scenario.base_rate,
                                  scenario.k_wind, scenario.eps_rate)
    xi = grid.node_coords - np.asarray(z.z)
    out = np.empty(grid.n)
    for s in range(0, grid.n, 512):
        out[s:s + 512] = np.max(xi[s:s + 512] @ N.T - reach, axis=1)
    return z.c + np.maximum(out, 0.0)


def _pad_linear(U):
    P = np.empty((U.shape[0] + 2, U.shape[1] + 2))
    P[1:-1, 1:-1] = U
    P[0, 1:-1] = 2 * U[0] - U[1]
    P[-1, 1:-1] = 2 * U[-1] - U[-2]
    P[:, 0] = 2 * P[:, 1] - P[:, 2]
    P[:, -1] = 2 * P[:, -2] - P[:, -3]
    return P


def _godunov_step(U, dt, scen: FireScenario, fuel2d):
    hx, hy = scen.grid.hx, scen.grid.hy
    P = _pad_linear(U)
    dmx = (P[1:-1, 1:-1] - P[1:-1, :-2]) / hx
    dpx = (P[1:-1, 2:] - P[1:-1, 1:-1]) / hx
    dmy = (P[1:-1, 1:-1] - P[:-2, 1:-1]) / hy
    dpy = (P[2:, 1:-1] - P[1:-1, 1:-1]) / hy
    grad = np.sqrt(np.maximum(dmx, 0) ** 2 + np.minimum(dpx, 0) ** 2 + np.maximum(dmy, 0) ** 2
                   + np.minimum(dpy, 0) ** 2)
    gx, gy = 0.5 * (dmx + dpx), 0.5 * (dmy + dpy)
    gn = np.hypot(gx, gy)
    safe = np.where(gn > 0, gn, 1.0)
    n = np.stack([np.where(gn > 0, gx / safe, 0.0), np.where(gn > 0, gy / safe, 0.0)], axis=-1)
    rate = spread_rate(n, scen.wind, fuel2d, scen.base_rate, scen.k_wind, scen.eps_rate)
    return U - dt * rate * grad


def front_segments(field2d, hx: float, hy: float) -> np.ndarray:
    """Zero-level-set segments ``(S, 2, 2)`` by linear interpolation on cell edges."""
    F = np.asarray(field2d, dtype=float)
    a, b = F[:-1, :-1], F[:-1, 1:]
    c, d = F[1:, 1:], F[1:, :-1]
    J, I = np.meshgrid(np.arange(F.shape[0] - 1), np.arange(F.shape[1] - 1), indexing="ij")
    x0, y0 = I * hx, J * hy

    def cross(fa, fb, pa, pb):
        hit = (fa < 0) != (fb < 0)
        t = np.where(hit, fa / np.where(hit, fa - fb, 1.0), 0.0)
        return hit, pa[0] + t * (pb[0] - pa[0]), pa[1] + t * (pb[1] - pa[1])

    corners = {
        "a": (x0, y0), "b": (x0 + hx, y0), "c": (x0 + hx, y0 + hy), "d": (x0, y0 + hy),
    }
    edges = [
        cross(a, b, corners["a"], corners["b"]),  # bottom
        cross(b, c, corners["b"], corners["c"]),  # right
        cross(d, c, corners["d"], corners["c"]),  # top
        cross(a, d, corners["a"], corners["d"]),  # left
    ]
    hits = np.stack([e[0] for e in edges])
    px = np.stack([e[1] for e in edges])
    py = np.stack([e[2] for e in edges])
    count = hits.sum(axis=0)
    segs = []
    two = count == 2
    if np.any(two):
        order = np.argsort(~hits[:, two], axis=0, kind="stable")[:2]
        xs = np.take_along_axis(px[:, two], order, axis=0)
        ys = np.take_along_axis(py[:, two], order, axis=0)
        segs.append(np.stack([np.stack([xs[0], ys[0]], -1), np.stack([xs[1], ys[1]], -1)], axis=1))
    four = count == 4
    if np.any(four):
        center = 0.25 * (a + b + c + d)[four]
        same = (center < 0) == (a[four] < 0)
        # isolate the corners whose sign differs from the cell centre
        p1 = np.zeros_like(same, dtype=int), np.where(same, 1, 3)
        p2 = np.where(same, 2, 1), np.where(same, 3, 2)
        X, Y = px[:, four], py[:, four]
        k = np.arange(X.shape[1])
        for i0, i1 in (p1, p2):
            segs.append(np.stack([np.stack([X[i0, k], Y[i0, k]], -1), np.stack([X[i1, k], Y[i1, k]], -1)], axis=1))
    if not segs:
        return np.zeros((0, 2, 2))
    return np.concatenate(segs, axis=0)


def point_segment_distance(points, segs, chunk: int = 2048) -> np.ndarray:
    """Minimum Euclidean distance from each point to a set of segments."""
    points = np.atleast_2d(points)
    A, B = segs[:, 0], segs[:, 1]
    AB = B - A
    L2 = np.sum(AB**2, axis=1)
    L2s = np.where(L2 > 0, L2, 1.0)
    out = np.empty(points.shape[0])
    for s in range(0, points.shape[0], chunk):
        P = points[s:s + chunk, None, :]
        t = np.clip(np.sum((P - A) * AB, axis=2) / L2s, 0.0, 1.0)
        t = np.where(L2 > 0, t, 0.0)
        Q = A + t[..., None] * AB
        out[s:s + chunk] = np.sqrt(np.min(np.sum((P - Q) ** 2, axis=2), axis=1))
    return out


def signed_distance(values, grid: Grid2D) -> np.ndarray:
    """Signed distance (negative where ``values < 0``) to the interpolated zero set."""
    values = np.asarray(values, dtype=float)
    F = values.reshape(grid.ny, grid.nx)
    segs = front_segments(F, grid.hx, grid.hy)
    if segs.shape[0] == 0:
        raise ValueError("snapshot has no fire front (no sign change)")
    d = point_segment_distance(grid.node_coords, segs)
    return np.where(values < 0, -d, d)


@dataclass(frozen=True, eq=False)
class FireTrajectory:
    times: np.ndarray  # hours
    states: np.ndarray  # n x (horizon + 1), signed-distance fields
    raw: np.ndarray  # fields before each reinitialization
    levels: np.ndarray  # level set each hour restarts from (non-increasing)

    def at(self, hours) -> np.ndarray:
        idx = [int(np.flatnonzero(np.isclose(self.times, h))[0]) for h in np.atleast_1d(hours)]
        return self.states[:, idx]


@dataclass(frozen=True, eq=False)
class ObservationSet:
    Y: np.ndarray  # n x n_obs
    times: np.ndarray


def simulate_fire(z: IgnitionPoint, scenario: FireScenario) -> FireTrajectory:
    """Godunov upwind level-set evolution with hourly signed-distance reinitialization."""
    grid = scenario.grid
    if grid.obstacle_mask.any():
        raise ValueError("fire grids cannot have obstacle masks")
    u = ignition_init(z, grid)
    # the 10 m ignition disc is far below the grid scale; the first hour uses
    # the exact solution so the front is resolved before the scheme takes over
    first = early_level_set(z, scenario, 3600.0)
    n_sub, dt = scenario.substeps()
    fuel2d = scenario.fuel.reshape(grid.ny, grid.nx)
    states = [u.copy()]
    raw = [u.copy()]
    levels = [u.copy()]
    U = u.reshape(grid.ny, grid.nx)
    for hour in range(scenario.horizon):
        prev = U
        if hour == 0:
            U = first.reshape(grid.ny, grid.nx)
        else:
            for _ in range(n_sub):
                U = _godunov_step(U, dt, scenario, fuel2d)
        if not np.all(np.isfinite(U)):
            raise FloatingPointError("non-finite level-set values")
        raw.append(U.ravel().copy())
        d = signed_distance(U.ravel(), grid)
        states.append(d)
        # the clamp never changes a sign, so the front is that of ``d``; it
        # only stops the coarse front reconstruction from raising nodal values
        U = np.minimum(d.reshape(grid.ny, grid.nx), prev)
        levels.append(U.ravel().copy())
    times = np.arange(scenario.horizon + 1, dtype=float)
    return FireTrajectory(times, np.column_stack(states), np.column_stack(raw),
                          np.column_stack(levels))


def signed_distance_obs(traj, grid: Grid2D, times=None) -> ObservationSet:
    """Signed-distance observations of a simulated fire or of raw fields (columns)."""
    if isinstance(traj, FireTrajectory):
        times = np.arange(2.0, traj.times[-1] + 1) if times is None else np.asarray(times, dtype=float)
        idx = [int(np.flatnonzero(np.isclose(traj.times, h))[0]) for h in times]
        fields = traj.raw[:, idx]
    else:
        fields = np.atleast_2d(np.asarray(traj, dtype=float))
        if fields.shape[0] != grid.n:
            fields = fields.T
        times = np.arange(fields.shape[1], dtype=float) if times is None else np.asarray(times, dtype=float)
    Y = np.column_stack([signed_distance(fields[:, j], grid) for j in range(fields.shape[1])])
    return ObservationSet(Y, times)


def observe(z: IgnitionPoint, scenario: FireScenario) -> ObservationSet:
    return signed_distance_obs(simulate_fire(z, scenario), scenario.grid, scenario.obs_times)


def ignition_misfit(z: IgnitionPoint, scenario: FireScenario, obs: ObservationSet) -> float:
    """``sum_j ||u(t_j; z) - y_j||^2`` over the observation times."""
    traj = simulate_fire(z, scenario)
    U = traj.at(obs.times)
    if U.shape != obs.Y.shape:
        raise ValueError("observation shape does not match the simulation")
    return float(np.sum((U - obs.Y) ** 2))
