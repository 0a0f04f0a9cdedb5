"""Non-intrusive quadratic ROM by operator inference.

Pipeline: random monotone-spline training controls, weighted POD of the FOM
snapshots per species, 6th-order time derivatives of the projected states,
two ridge regressions for the reduced operators, and RK4 simulation of the
inferred model.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg as la
from scipy.interpolate import PchipInterpolator

from .fom import (
    FINAL_TIME,
    GAMMA,
    N_STEPS,
    ControlVector,
    SimulationError,
    StateTrajectory,
    interpolation_weights,
    trapezoid_weights,
)

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA_GRID = [(l1, l2) for l1 in (1e-2, 1e-1, 1.0) for l2 in (1.0, 10.0, 100.0)]


class IllPosedRegression(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True, eq=False)
class PodBasis:
    V: np.ndarray
    singular_values: np.ndarray
    residual_energy: float
    energy_tol: float

    @property
    def r(self) -> int:
        return self.V.shape[1]


@dataclass(frozen=True, eq=False)
class TrainingSet:
    controls: list
    trajectories: list
    xi_train: tuple

    def __post_init__(self):
        if len(self.controls) != len(self.trajectories):
            raise ValueError("need exactly one trajectory per control")
        if not self.trajectories:
            raise ValueError("empty training set")
        t0 = self.trajectories[0].times
        for tr in self.trajectories[1:]:
            if tr.times.shape != t0.shape or not np.allclose(tr.times, t0):
                raise ValueError("training trajectories must share a time grid")


@dataclass(frozen=True, eq=False)
class ReducedModel:
    basis1: PodBasis
    basis2: PodBasis
    Ahat1: np.ndarray
    Ahat2: np.ndarray
    Rhat1: np.ndarray
    Rhat2: np.ndarray
    Phihat: np.ndarray
    init1: np.ndarray
    init2: np.ndarray
    scaled_mass: np.ndarray | None = None
    lambdas: tuple = (0.0, 0.0)
    final_time: float = FINAL_TIME
    n_steps: int = N_STEPS
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        r1, r2 = self.Ahat1.shape[0], self.Ahat2.shape[0]
        if self.Ahat1.shape != (r1, r1) or self.Ahat2.shape != (r2, r2):
            raise ValueError("linear operators must be square")
        if self.Rhat1.shape != (r1, r1 * r2) or self.Rhat2.shape != (r2, r1 * r2):
            raise ValueError("quadratic operators must be r_k x (r1 r2)")
        if self.Phihat.shape[0] != r2:
            raise ValueError("input operator must have r2 rows")
        if self.scaled_mass is not None:
            Q = self.scaled_mass
            if Q.shape != (r1, r1) or not np.allclose(Q, Q.T, atol=1e-12 * max(1.0, np.abs(Q).max())):
                raise ValueError("scaled mass must be a symmetric r1 x r1 matrix")

    @property
    def r1(self) -> int:
        return self.Ahat1.shape[0]

    @property
    def r2(self) -> int:
        return self.Ahat2.shape[0]

    @property
    def n_q(self) -> int:
        return self.Phihat.shape[1]

    def with_scaled_mass(self, psi: np.ndarray, mass: np.ndarray) -> "ReducedModel":
        """Attach ``V1^T diag(psi^2 m) V1`` for reduced objective evaluation."""
        V1 = self.basis1.V
        Q = V1.T @ ((psi**2 * mass)[:, None] * V1)
        Q = 0.5 * (Q + Q.T)
        return _replace(self, scaled_mass=Q)

    def rhs(self, u1, u2, s):
        quad = np.outer(u1, u2).ravel()
        f1 = self.Ahat1 @ u1 + self.Rhat1 @ quad
        f2 = self.Ahat2 @ u2 + self.Rhat2 @ quad + self.Phihat @ s
        return f1, f2


def _replace(obj, **kw):
    from dataclasses import replace

    return replace(obj, **kw)


def random_training_controls(seed: int, n_c: int = 5, n_q: int = 14, n_s: int = 100,
                             final_time: float = FINAL_TIME, high: float = 5.0) -> list:
    """Smooth random controls: uniform knot values at ``0, T/3, 2T/3, T``
    interpolated by a monotone piecewise cubic onto the control nodes."""
    if n_c < 1:
        raise ValueError("n_c must be at least 1")
    rng = np.random.default_rng(seed)
    nodes = np.linspace(0.0, final_time, n_s)
    return [monotone_spline_control(rng.uniform(0.0, high, size=(n_q, 4)), nodes) for _ in range(n_c)]


def monotone_spline_control(knot_values, nodes) -> ControlVector:
    """Fritsch-Carlson interpolation of values at equispaced knots over ``[nodes[0], nodes[-1]]``."""
    knot_values = np.atleast_2d(np.asarray(knot_values, dtype=float))
    nodes = np.asarray(nodes, dtype=float)
    knots = np.linspace(nodes[0], nodes[-1], knot_values.shape[1])
    return ControlVector(PchipInterpolator(knots, knot_values, axis=1)(nodes), nodes)


def _pod_rank(sigma: np.ndarray, energy_tol: float) -> tuple[int, float]:
    energy = sigma**2
    total = energy.sum()
    # tail[r] = energy discarded when keeping r vectors
    tail = np.concatenate([np.cumsum(energy[::-1])[::-1], [0.0]]) / total
    r = int(np.argmax(tail < energy_tol))
    return max(r, 1), float(tail[max(r, 1)])


def weighted_pod(snapshots: np.ndarray, mass, energy_tol: float = 1e-5) -> PodBasis:
    """POD basis orthonormal in the ``M`` inner product.

    ``mass`` is either the diagonal of a lumped mass matrix or a dense SPD
    matrix. The basis is computed from the SVD of the mass-weighted snapshots,
    which yields the same vectors as the method of snapshots on ``U^T M U``.
    """
    if not 0.0 < energy_tol < 1.0:
        raise ValueError("energy_tol must lie in (0, 1)")
    U = np.asarray(snapshots, dtype=float)
    if U.ndim == 1:
        U = U[:, None]
    if U.shape[1] < 1:
        raise ValueError("need at least one snapshot")
    mass = np.asarray(mass, dtype=float)
    if mass.ndim == 1:
        root = np.sqrt(mass)
        W = root[:, None] * U
        unweight = lambda X: X / root[:, None]  # noqa: E731
    else:
        L = la.cholesky(mass, lower=True)
        W = L.T @ U
        unweight = lambda X: la.solve_triangular(L.T, X, lower=False)  # noqa: E731
    Phi, sigma, Psit = la.svd(W, full_matrices=False, lapack_driver="gesvd")
    # sign convention: largest right-singular entry positive
    flip = np.sign(Psit[np.arange(Psit.shape[0]), np.argmax(np.abs(Psit), axis=1)])
    flip[flip == 0] = 1.0
    Phi = Phi * flip
    numerical_rank = int(np.sum(sigma > sigma[0] * max(U.shape) * np.finfo(float).eps)) if sigma[0] > 0 else 0
    if numerical_rank == 0:
        raise ValueError("snapshot matrix is identically zero")
    r, resid = _pod_rank(sigma, energy_tol)
    if r > numerical_rank:
        warnings.warn(f"POD truncated at numerical rank {numerical_rank} (energy rule asked for {r})", stacklevel=2)
        r = numerical_rank
        resid = float(np.sum(sigma[r:] ** 2) / np.sum(sigma**2))
    V = unweight(Phi[:, :r])
    return PodBasis(V, sigma, resid, energy_tol)


@lru_cache(maxsize=None)
def _fd_weights(position: int, npts: int = 7) -> np.ndarray:
    offsets = np.arange(npts) - position
    A = np.vander(offsets, npts, increasing=True).T.astype(float)
    rhs = np.zeros(npts)
    rhs[1] = 1.0
    return np.linalg.solve(A, rhs)


def time_derivatives(X: np.ndarray, dt: float) -> np.ndarray:
    """Sixth-order finite-difference time derivative of each row of ``X``.

    Interior columns use the centred 7-point stencil; the first and last
    three columns use one-sided 7-point stencils of the same order.
    """
    X = np.asarray(X, dtype=float)
    n_t = X.shape[-1]
    if n_t < 7:
        raise ValueError(f"need at least 7 time samples, got {n_t}")
    if dt <= 0:
        raise ValueError("dt must be positive")
    out = np.empty_like(X)
    c = _fd_weights(3)
    out[..., 3:n_t - 3] = sum(c[k] * X[..., k:n_t - 6 + k] for k in range(7))
    for p in range(3):
        out[..., p] = X[..., :7] @ _fd_weights(p)
        out[..., n_t - 1 - p] = X[..., n_t - 7:] @ _fd_weights(6 - p)
    return out / dt


def project(basis: PodBasis, mass, U: np.ndarray) -> np.ndarray:
    mass = np.asarray(mass)
    MU = mass[:, None] * U if mass.ndim == 1 else mass @ U
    return basis.V.T @ MU


def _khatri_rao(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Column-wise Kronecker product ``A[:, j] (x) B[:, j]``."""
    return (A[:, None, :] * B[None, :, :]).reshape(A.shape[0] * B.shape[0], -1)


def _ridge_solve(D: np.ndarray, Y: np.ndarray, ridge: np.ndarray) -> np.ndarray:
    """Solve ``min ||O D - Y||_F^2 + sum_i ridge_i ||O[:, i]||^2`` by normal equations."""
    G = D @ D.T
    if not np.any(ridge > 0):
        cond = np.linalg.cond(G)
        if not np.isfinite(cond) or cond > 1e15:
            raise IllPosedRegression(f"normal matrix is singular (cond={cond:.2e}) with zero regularization")
    # jitter scales with the data, not the ridge weights
    G = G + np.diag(ridge + 1e-12 * np.trace(G) / G.shape[0])
    try:
        c = la.cho_factor(G, lower=True)
    except la.LinAlgError as exc:
        raise IllPosedRegression("normal matrix is not positive definite") from exc
    return la.cho_solve(c, D @ Y.T).T


def regression_data(training: TrainingSet, bases, mass):
    """Stack projected states, derivatives and squared inputs over the training set."""
    b1, b2 = bases
    U1, U2, dU1, dU2, S = [], [], [], [], []
    for ctrl, tr in zip(training.controls, training.trajectories):
        dt = tr.times[1] - tr.times[0]
        if not np.allclose(np.diff(tr.times), dt):
            raise ValueError("derivative estimation needs a uniform time grid")
        h1 = project(b1, mass, tr.u1)
        h2 = project(b2, mass, tr.u2)
        U1.append(h1)
        U2.append(h2)
        dU1.append(time_derivatives(h1, dt))
        dU2.append(time_derivatives(h2, dt))
        q = ctrl.q_nodes @ interpolation_weights(ctrl.time_nodes, tr.times).T
        S.append(q * q)
    cat = lambda xs: np.concatenate(xs, axis=1)  # noqa: E731
    return cat(U1), cat(U2), cat(dU1), cat(dU2), cat(S)


def fit_operators(U1, U2, dU1, dU2, S, lambda1: float, lambda2: float):
    """Both ridge regressions on stacked data; returns ``A1, R1, A2, R2, Phi``."""
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("regularization weights must be non-negative")
    r1, r2, nq = U1.shape[0], U2.shape[0], S.shape[0]
    K12 = _khatri_rao(U1, U2)
    D1 = np.vstack([U1, K12])
    O1 = _ridge_solve(D1, dU1, np.r_[np.full(r1, lambda1), np.full(r1 * r2, lambda2)])
    D2 = np.vstack([U2, K12, S])
    O2 = _ridge_solve(D2, dU2, np.r_[np.full(r2, lambda1), np.full(r1 * r2, lambda2), np.full(nq, lambda1)])
    return O1[:, :r1], O1[:, r1:], O2[:, :r2], O2[:, r2:r2 + r1 * r2], O2[:, r2 + r1 * r2:]


def opinf_fit(training: TrainingSet, bases, lambda1: float, lambda2: float, mass, data=None) -> ReducedModel:
    b1, b2 = bases
    if data is None:
        data = regression_data(training, bases, mass)
    A1, R1, A2, R2, Phi = fit_operators(*data, lambda1, lambda2)
    tr0 = training.trajectories[0]
    init1 = project(b1, mass, tr0.u1[:, :1])[:, 0]
    init2 = project(b2, mass, tr0.u2[:, :1])[:, 0]
    T = float(tr0.times[-1])
    return ReducedModel(b1, b2, A1, A2, R1, R2, Phi, init1, init2, lambdas=(float(lambda1), float(lambda2)),
                        final_time=T, n_steps=tr0.n_t - 1)


@dataclass(frozen=True, eq=False)
class ReducedTrajectory:
    times: np.ndarray
    u1: np.ndarray
    u2: np.ndarray

    def lift(self, model: ReducedModel) -> StateTrajectory:
        return StateTrajectory(self.times, model.basis1.V @ self.u1, model.basis2.V @ self.u2)


def stage_sources(model: ReducedModel, z: ControlVector, n_steps: int):
    """Squared control at RK4 stage times: ``(t_n, t_n + dt/2, t_n + dt)``."""
    T = model.final_time
    dt = T / n_steps
    tn = np.arange(n_steps) * dt
    q0 = z.q_nodes @ interpolation_weights(z.time_nodes, tn).T
    qh = z.q_nodes @ interpolation_weights(z.time_nodes, np.minimum(tn + 0.5 * dt, T)).T
    q1 = z.q_nodes @ interpolation_weights(z.time_nodes, np.minimum(tn + dt, T)).T
    return q0, qh, q1


def simulate_rom(model: ReducedModel, z: ControlVector, n_steps: int | None = None,
                 init1=None, init2=None) -> ReducedTrajectory:
    """Classical RK4 on the inferred quadratic system."""
    n_steps = model.n_steps if n_steps is None else n_steps
    dt = model.final_time / n_steps
    q0, qh, q1 = stage_sources(model, z, n_steps)
    s0, sh, s1 = q0 * q0, qh * qh, q1 * q1
    r1, r2 = model.r1, model.r2
    X1 = np.empty((r1, n_steps + 1))
    X2 = np.empty((r2, n_steps + 1))
    X1[:, 0] = model.init1 if init1 is None else init1
    X2[:, 0] = model.init2 if init2 is None else init2
    f = model.rhs
    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(n_steps):
            a, b = X1[:, n], X2[:, n]
            k1 = f(a, b, s0[:, n])
            k2 = f(a + 0.5 * dt * k1[0], b + 0.5 * dt * k1[1], sh[:, n])
            k3 = f(a + 0.5 * dt * k2[0], b + 0.5 * dt * k2[1], sh[:, n])
            k4 = f(a + dt * k3[0], b + dt * k3[1], s1[:, n])
            X1[:, n + 1] = a + dt / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
            X2[:, n + 1] = b + dt / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
            if not (np.all(np.isfinite(X1[:, n + 1])) and np.all(np.isfinite(X2[:, n + 1]))):
                raise SimulationError(f"non-finite ROM state at step {n + 1}")
    return ReducedTrajectory(np.linspace(0.0, model.final_time, n_steps + 1), X1, X2)


def rom_objective(model: ReducedModel, traj: ReducedTrajectory, z: ControlVector, gamma: float = GAMMA) -> float:
    """Reduced objective using the precomputed ``V1^T M~ V1``; cost per step is O(r1^2)."""
    if model.scaled_mass is None:
        raise ValueError("model has no scaled mass; call with_scaled_mass first")
    w = trapezoid_weights(traj.times)
    zone = np.einsum("it,ij,jt->t", traj.u1, model.scaled_mass, traj.u1)
    q = z.q_nodes @ interpolation_weights(z.time_nodes, traj.times).T
    return 0.5 * float(w @ (zone + gamma * np.sum(q**4, axis=0)))


def reconstruction_error(model: ReducedModel, training: TrainingSet, mass) -> float:
    """Mean relative M-norm error of the ROM replaying the training controls."""
    errs = []
    for ctrl, tr in zip(training.controls, training.trajectories):
        try:
            rt = simulate_rom(model, ctrl, n_steps=tr.n_t - 1)
        except SimulationError:
            return np.inf
        for U, V, X in ((tr.u1, model.basis1.V, rt.u1), (tr.u2, model.basis2.V, rt.u2)):
            diff = U - V @ X
            num = np.sum(mass[:, None] * diff**2)
            den = np.sum(mass[:, None] * U**2)
            errs.append(np.sqrt(num / den) if den > 0 else np.sqrt(num))
    err = float(np.mean(errs))
    return err if np.isfinite(err) else np.inf


def select_regularization(training: TrainingSet, bases, grid, mass):
    """Return ``((lambda1, lambda2), scores)`` minimizing the training reconstruction error.

    Ties go to the lexicographically larger pair.
    """
    grid = [tuple(map(float, p)) for p in grid]
    if not grid:
        raise ValueError("regularization grid is empty")
    data = regression_data(training, bases, mass)
    scores = {}
    for l1, l2 in grid:
        try:
            model = opinf_fit(training, bases, l1, l2, mass, data=data)
            scores[(l1, l2)] = reconstruction_error(model, training, mass)
        except (IllPosedRegression, SimulationError, FloatingPointError):
            scores[(l1, l2)] = np.inf
        logger.info("lambda=(%g, %g): reconstruction error %.4g", l1, l2, scores[(l1, l2)])
    best = min(scores, key=lambda p: (scores[p], tuple(-v for v in p)))
    return best, scores
