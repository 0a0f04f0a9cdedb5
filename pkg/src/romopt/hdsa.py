"""Model-discrepancy calibration and post-optimality updates.

The discrepancy is affine in the decision variable,
``delta(t; z, theta) = Vdelta (c0(t) + C(t) Mz z)``, with nodal values of
``Theta_k = [c0_k, C_k]`` (``r x (1 + n_z)``) at the discrepancy time nodes
and linear interpolation in between. ``theta`` packs ``vec(Theta_k)``
(column-major) node after node.

Prior and likelihood share the Kronecker structure
``w_k (X (x) S)`` per time node, where ``S = Vdelta^T Wu Vdelta`` is the
projected spatial precision. For the prior ``X = alpha_p blockdiag(1, Wz^-1)``;
the posterior adds ``A A^T / alpha_d`` with ``A = [a_1 ... a_N]``,
``a_l = (1, Mz z_l)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.stats import chi2

from .fom import StateTrajectory, interpolation_weights, trapezoid_weights
from .optimize import EigenDecomposition, eigen_from_dense, retained_rank

logger = logging.getLogger(__name__)


def _sign_fix(U):
    idx = np.argmax(np.abs(U), axis=0)
    return U * np.where(U[idx, np.arange(U.shape[1])] < 0, -1.0, 1.0)


def _as_matrix(W, n):
    """Dense ``n x n`` matrix from a scalar, a diagonal vector or a matrix."""
    if sp.issparse(W):
        W = W.toarray()
    W = np.asarray(W, dtype=float)
    if W.ndim == 0:
        return float(W) * np.eye(n)
    if W.ndim == 1:
        return np.diag(W)
    return W


def _chol(A, what):
    """Cholesky with up to three jitter retries."""
    A = 0.5 * (A + A.T)
    jitter = 0.0
    scale = max(np.trace(A) / A.shape[0], np.finfo(float).tiny)
    for attempt in range(4):
        try:
            return np.linalg.cholesky(A + jitter * np.eye(A.shape[0]))
        except np.linalg.LinAlgError:
            jitter = scale * 10.0 ** (-12 + 2 * attempt)
            logger.warning("%s not numerically SPD; retrying with jitter %.1e", what, jitter)
    raise np.linalg.LinAlgError(f"{what} is not positive definite")


# -- data and basis -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DiscrepancyBasis:
    Vdelta: np.ndarray
    time_nodes: np.ndarray
    singular_values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        V = np.atleast_2d(np.asarray(self.Vdelta, dtype=float))
        object.__setattr__(self, "Vdelta", V)
        object.__setattr__(self, "time_nodes", np.asarray(self.time_nodes, dtype=float))

    @property
    def r(self) -> int:
        return self.Vdelta.shape[1]

    @property
    def n_tau(self) -> int:
        return self.time_nodes.size


def discrepancy_data(fom_traj: StateTrajectory, lifted: StateTrajectory, time_nodes, component: str = "u1"):
    """``Delta(t_k) = S(t_k; z, xi_dagger) - V S_hat(t_k; z)`` at the discrepancy nodes.

    ``lifted`` is the reduced trajectory mapped back through the POD basis.
    Returns an ``n x n_tau`` array (``2 n_x`` rows for ``component="both"``).
    """
    if fom_traj.u1.shape != lifted.u1.shape or not np.allclose(fom_traj.times, lifted.times):
        raise ValueError("FOM and lifted ROM trajectories must share the grid and time grid")
    if component == "u1":
        diff = fom_traj.u1 - lifted.u1
    elif component == "both":
        diff = np.vstack([fom_traj.u1 - lifted.u1, fom_traj.u2 - lifted.u2])
    else:
        raise ValueError(f"unknown component {component!r}")
    W = interpolation_weights(fom_traj.times, np.asarray(time_nodes, dtype=float))
    return diff @ W.T


def build_discrepancy_basis(data, r_delta: int, time_nodes, rel_cutoff: float = 1e-8) -> DiscrepancyBasis:
    """Orthonormal basis of the discrepancy snapshots by thin SVD."""
    data = [np.atleast_2d(np.asarray(d, dtype=float)) for d in data]
    if not data or all(d.size == 0 for d in data):
        raise ValueError("no discrepancy data")
    X = np.hstack([d if d.shape[0] >= 1 else d.T for d in data])
    if r_delta < 1:
        raise ValueError("r_delta must be at least 1")
    U, s, _ = np.linalg.svd(X, full_matrices=False)
    if s[0] == 0:
        raise ValueError("discrepancy data are identically zero")
    r = min(int(r_delta), int(np.sum(s > rel_cutoff * s[0])))
    return DiscrepancyBasis(_sign_fix(U[:, :r]), time_nodes, s[:r].copy())


# -- parameters -----------------------------------------------------------------


@dataclass(frozen=True)
class DiscrepancyLayout:
    r_delta: int
    n_z: int
    n_tau: int

    @property
    def n_theta(self) -> int:
        return self.n_tau * self.r_delta * (1 + self.n_z)

    def blocks(self, theta) -> np.ndarray:
        """``(n_tau, r, 1 + n_z)`` array of ``Theta_k``."""
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_theta,):
            raise ValueError(f"theta has shape {theta.shape}, layout expects ({self.n_theta},)")
        return theta.reshape(self.n_tau, 1 + self.n_z, self.r_delta).transpose(0, 2, 1)

    def pack(self, blocks) -> np.ndarray:
        blocks = np.asarray(blocks, dtype=float)
        if blocks.shape != (self.n_tau, self.r_delta, 1 + self.n_z):
            raise ValueError("block array does not match the layout")
        return blocks.transpose(0, 2, 1).ravel().copy()


@dataclass(frozen=True, eq=False)
class DiscrepancyParams:
    theta: np.ndarray
    layout: DiscrepancyLayout

    def __post_init__(self):
        self.layout.blocks(self.theta)

    @property
    def blocks(self):
        return self.layout.blocks(self.theta)


def _mz_apply(Mz, z):
    Mz = np.asarray(Mz) if not sp.issparse(Mz) else Mz
    if not sp.issparse(Mz) and np.ndim(Mz) == 1:
        return Mz * z
    return Mz @ z


def _mz_t_apply(Mz, y):
    if not sp.issparse(Mz) and np.ndim(Mz) == 1:
        return Mz * y
    return Mz.T @ y


def delta_coefficients(params: DiscrepancyParams, Mz, z, t, time_nodes) -> np.ndarray:
    """Reduced coefficients ``c0(t) + C(t) Mz z``, shape ``(len(t), r)``."""
    T = params.blocks
    a = np.concatenate([[1.0], _mz_apply(Mz, np.asarray(z, dtype=float))])
    nodes = np.asarray(time_nodes, dtype=float)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    tol = 1e-12 * max(1.0, abs(nodes[-1]))
    if np.any(t < nodes[0] - tol) or np.any(t > nodes[-1] + tol):
        raise ValueError("time outside the discrepancy node range")
    return interpolation_weights(nodes, t) @ (T @ a)


def delta_eval(params: DiscrepancyParams, basis: DiscrepancyBasis, Mz, z, t) -> np.ndarray:
    """``delta(t; z, theta)``; a vector for scalar ``t``, columns for arrays."""
    if params.layout.r_delta != basis.r or params.layout.n_tau != basis.n_tau:
        raise ValueError("parameter layout does not match the discrepancy basis")
    c = delta_coefficients(params, Mz, z, t, basis.time_nodes)
    out = basis.Vdelta @ c.T
    return out[:, 0] if np.ndim(t) == 0 else out


# -- prior and posterior -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PriorSpec:
    """Prior and noise weights.

    ``Wu_spatial`` is the spatial state precision; the space-time precision
    is ``diag(time_weights) (x) Wu_spatial``. ``Wz``/``Mz`` may be given as
    diagonals.
    """

    Wu_spatial: object
    time_weights: np.ndarray
    Wz: object
    Mz: object
    alpha_p: float
    alpha_d: float

    def __post_init__(self):
        if not (self.alpha_p > 0 and self.alpha_d > 0):
            raise ValueError("alpha_p and alpha_d must be positive")
        w = np.asarray(self.time_weights, dtype=float)
        if np.any(w <= 0):
            raise ValueError("time weights must be positive")
        object.__setattr__(self, "time_weights", w)

    def wu_apply(self, X):
        return self.Wu_spatial @ X


def discrepancy_time_weights(time_nodes) -> np.ndarray:
    """Trapezoidal weights normalized by the time span (a single node gets 1)."""
    t = np.asarray(time_nodes, dtype=float)
    if t.size == 1:
        return np.ones(1)
    return trapezoid_weights(t) / (t[-1] - t[0])


def wu_spatial_default(mass, stiffness, beta1: float = 1.0, beta2: float = 0.1):
    return (beta1 * sp.diags(np.asarray(mass, dtype=float)) + beta2 * stiffness).tocsr()


def data_norm2(data, prior_Wu, time_weights) -> float:
    """``sum_l sum_k w_k Delta_lk^T Wu Delta_lk``."""
    return float(sum(np.sum(time_weights * np.sum(D * (prior_Wu @ D), axis=0)) for D in data))


def default_alpha_d(data, Wu_spatial, time_weights, factor: float = 0.05) -> float:
    """``(factor ||Delta||_Wu)^2 / (number of data entries)``."""
    n = sum(np.asarray(D).size for D in data)
    return factor**2 * data_norm2(data, Wu_spatial, time_weights) / n


def default_alpha_p(data, Wu_spatial, time_weights, r_delta: int, factor: float = 1.0) -> float:
    """Match the prior's expected intercept energy ``n_tau r / alpha_p`` to the data."""
    n_tau = np.asarray(time_weights).size
    return factor * n_tau * r_delta * len(data) / data_norm2(data, Wu_spatial, time_weights)


@dataclass(frozen=True, eq=False)
class KroneckerBlocks:
    """Block-diagonal SPD operator ``blockdiag_k(w_k X (x) S)`` on packed ``theta``."""

    X: np.ndarray
    S: np.ndarray
    weights: np.ndarray
    layout: DiscrepancyLayout

    def matvec(self, theta):
        T = self.layout.blocks(theta)
        out = self.weights[:, None, None] * (self.S @ T @ self.X)
        return self.layout.pack(out)

    def to_dense(self):
        blk = np.kron(self.X, self.S)
        return sla.block_diag(*[w * blk for w in self.weights])

    def scaled(self, c: float) -> "KroneckerBlocks":
        return KroneckerBlocks(self.X, self.S, c * self.weights, self.layout)


def _projected_precision(basis: DiscrepancyBasis, prior: PriorSpec):
    S = basis.Vdelta.T @ np.asarray(prior.Wu_spatial @ basis.Vdelta)
    return 0.5 * (S + S.T)


def _decision_blocks(prior: PriorSpec, n_z: int):
    Wz = _as_matrix(prior.Wz, n_z)
    D = np.zeros((1 + n_z, 1 + n_z))
    D[0, 0] = 1.0
    D[1:, 1:] = np.linalg.inv(Wz)
    return 0.5 * (D + D.T), Wz


def prior_precision(prior: PriorSpec, basis: DiscrepancyBasis, layout: DiscrepancyLayout) -> KroneckerBlocks:
    """``W_theta = alpha_p blockdiag_k(w_k blockdiag(1, Wz^-1) (x) S)``."""
    if layout.r_delta != basis.r or layout.n_tau != basis.n_tau or prior.time_weights.size != basis.n_tau:
        raise ValueError("layout, basis and prior time weights disagree")
    D, _ = _decision_blocks(prior, layout.n_z)
    return KroneckerBlocks(prior.alpha_p * D, _projected_precision(basis, prior), prior.time_weights, layout)


@dataclass(frozen=True, eq=False)
class DiscrepancyPosterior:
    mean: np.ndarray
    precision: KroneckerBlocks
    chol_X: np.ndarray
    chol_S: np.ndarray
    layout: DiscrepancyLayout
    meta: dict = field(default_factory=dict)

    @property
    def params(self) -> DiscrepancyParams:
        return DiscrepancyParams(self.mean, self.layout)

    def covariance_dense(self) -> np.ndarray:
        return np.linalg.inv(self.precision.to_dense())

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Draws of ``theta`` (rows) by back-substitution with the Kronecker factors."""
        lay = self.layout
        out = np.empty((n, lay.n_theta))
        for i in range(n):
            G = rng.standard_normal((lay.n_tau, lay.r_delta, 1 + lay.n_z))
            E = np.empty_like(G)
            for k in range(lay.n_tau):
                Y = sla.solve_triangular(self.chol_S, G[k], lower=True, trans="T")
                E[k] = sla.solve_triangular(self.chol_X, Y.T, lower=True, trans="T").T
                E[k] /= np.sqrt(self.precision.weights[k])
            out[i] = self.mean + lay.pack(E)
        return out

    def to_blocks(self) -> tuple[dict, dict]:
        lay = self.layout
        blocks = {"mean": self.mean, "X": self.precision.X, "S": self.precision.S, "weights": self.precision.weights}
        meta = dict(self.meta, r_delta=lay.r_delta, n_z=lay.n_z, n_tau=lay.n_tau)
        return blocks, meta

    @classmethod
    def from_blocks(cls, blocks: dict, meta: dict) -> "DiscrepancyPosterior":
        lay = DiscrepancyLayout(int(meta["r_delta"]), int(meta["n_z"]), int(meta["n_tau"]))
        X, S = np.asarray(blocks["X"]), np.asarray(blocks["S"])
        prec = KroneckerBlocks(X, S, np.ravel(blocks["weights"]), lay)
        extra = {k: v for k, v in meta.items() if k not in ("r_delta", "n_z", "n_tau")}
        return cls(np.ravel(blocks["mean"]).copy(), prec, _chol(X, "decision factor"), _chol(S, "state factor"),
                   lay, extra)

    def tightened(self, factor: float) -> "DiscrepancyPosterior":
        """Same mean, precision multiplied by ``factor``."""
        return DiscrepancyPosterior(self.mean, self.precision.scaled(factor), self.chol_X, self.chol_S,
                                    self.layout, dict(self.meta))


def calibrate_posterior(data, basis: DiscrepancyBasis, prior: PriorSpec) -> DiscrepancyPosterior:
    """Closed-form Gaussian posterior from pairs ``(z_l, Delta_l)``.

    ``Delta_l`` is ``n x n_tau`` (values at the discrepancy time nodes).
    """
    data = list(data)
    if not data:
        raise ValueError("need at least one (z, Delta) pair")
    n_z = np.asarray(data[0][0]).size
    layout = DiscrepancyLayout(basis.r, n_z, basis.n_tau)
    D, Wz = _decision_blocks(prior, n_z)
    S = _projected_precision(basis, prior)
    A = np.column_stack([np.concatenate([[1.0], _mz_apply(prior.Mz, np.asarray(z, dtype=float))]) for z, _ in data])
    X = prior.alpha_p * D + (A @ A.T) / prior.alpha_d
    X = 0.5 * (X + X.T)
    LX = _chol(X, "posterior decision factor")
    LS = _chol(S, "projected state precision")
    blocks = np.empty((basis.n_tau, basis.r, 1 + n_z))
    WV = np.asarray(prior.Wu_spatial @ basis.Vdelta)
    for k in range(basis.n_tau):
        Bk = np.column_stack([WV.T @ np.asarray(Dl)[:, k] for _, Dl in data])  # r x N
        rhs = (Bk @ A.T) / prior.alpha_d  # S Theta X = rhs
        Y = sla.cho_solve((LS, True), rhs)
        blocks[k] = sla.cho_solve((LX, True), Y.T).T
    mean = layout.pack(blocks)
    prec = KroneckerBlocks(X, S, prior.time_weights, layout)
    meta = {"alpha_p": prior.alpha_p, "alpha_d": prior.alpha_d, "n_data": len(data)}
    return DiscrepancyPosterior(mean, prec, LX, LS, layout, meta)


# -- sensitivities and updates -------------------------------------------------------


class DiscrepancyAugmentedProblem:
    """ROM control objective with ``delta`` added to the lifted contaminant.

    ``J(z, theta) = 1/2 sum_n w_n ||V1 u1_n + delta_n||^2_{M~} + regularization``,
    with ``M~ = diag(psi^2 m)``.
    """

    def __init__(self, rom_problem, basis: DiscrepancyBasis, Mz, weighted_mass):
        self.rp = rom_problem
        self.basis = basis
        self.Mz = Mz
        V1 = rom_problem.model.basis1.V
        Vd = basis.Vdelta
        if Vd.shape[0] != V1.shape[0]:
            raise ValueError("discrepancy basis must live in the contaminant state space")
        wm = np.asarray(weighted_mass, dtype=float)
        self.Qd = V1.T @ (wm[:, None] * Vd)
        self.Qdd = Vd.T @ (wm[:, None] * Vd)
        self.Wint = interpolation_weights(basis.time_nodes, rom_problem.times)
        self.layout = DiscrepancyLayout(basis.r, rom_problem.n_z, basis.n_tau)

    @property
    def n_z(self):
        return self.rp.n_z

    def _coeffs(self, theta, z):
        T = self.layout.blocks(theta)
        a = np.concatenate([[1.0], _mz_apply(self.Mz, z)])
        return T, self.Wint @ (T @ a)

    def objective(self, z, theta):
        z = np.asarray(z, dtype=float)
        f = self.rp.forward(z)
        r1 = self.rp.r1
        X1 = f.X[:, :r1]
        _, c = self._coeffs(theta, z)
        zone = (np.einsum("ni,ij,nj->n", X1, self.rp.Q, X1) + 2 * np.einsum("ni,ij,nj->n", X1, self.Qd, c)
                + np.einsum("ni,ij,nj->n", c, self.Qdd, c))
        reg = np.sum(f.q_traj**4, axis=0)
        return 0.5 * float(self.rp.weights @ (zone + self.rp.gamma * reg))

    def _direct(self, T, y):
        """``Mz^T sum_k C_k^T Y_k`` where ``Y = Wint^T y``."""
        Y = self.Wint.T @ y  # (n_tau, r)
        ga = np.einsum("kra,kr->a", T, Y)
        return _mz_t_apply(self.Mz, ga[1:])

    def gradient(self, z, theta):
        z = np.asarray(z, dtype=float)
        f = self.rp.forward(z)
        r1 = self.rp.r1
        w = self.rp.weights[:, None]
        X1 = f.X[:, :r1]
        T, c = self._coeffs(theta, z)
        G = np.zeros_like(f.X)
        G[:, :r1] = w * (X1 @ self.rp.Q + c @ self.Qd.T)
        g = self.rp.source_adjoint(z, G) + self.rp._regularization_gradient(f)
        return g + self._direct(T, w * (X1 @ self.Qd + c @ self.Qdd))

    def mixed_hessian_apply(self, z_tilde, theta):
        """``B theta``: derivative of ``grad_z J(z_tilde, .)`` at ``theta = 0``, applied to ``theta``."""
        z = np.asarray(z_tilde, dtype=float)
        f = self.rp.forward(z)
        r1 = self.rp.r1
        w = self.rp.weights[:, None]
        T, c = self._coeffs(theta, z)
        G = np.zeros_like(f.X)
        G[:, :r1] = w * (c @ self.Qd.T)
        return self.rp.source_adjoint(z, G) + self._direct(T, w * (f.X[:, :r1] @ self.Qd))


@dataclass(eq=False)
class SensitivitySystem:
    """Hessian, mixed-derivative action and optional eigen projection at ``z_tilde``."""

    z_tilde: np.ndarray
    B_apply: Callable[[np.ndarray], np.ndarray]
    H: np.ndarray | None = None
    eigen: EigenDecomposition | None = None

    def __post_init__(self):
        self.z_tilde = np.asarray(self.z_tilde, dtype=float)
        if self.H is not None:
            H = np.asarray(self.H, dtype=float)
            if not np.allclose(H, H.T, rtol=1e-8, atol=1e-12 * np.abs(H).max()):
                raise ValueError("Hessian must be symmetric")
            self.H = 0.5 * (H + H.T)

    @classmethod
    def from_dense(cls, z_tilde, B_apply, H, retention_ratio: float | None = 1e-2, rank: int | None = None):
        eig = eigen_from_dense(H)
        if rank is None and retention_ratio is not None:
            rank = retained_rank(eig.eigenvalues, retention_ratio)
        eig = eig.truncate(rank) if rank is not None else eig
        return cls(z_tilde, B_apply, H, eig)

    @property
    def projector(self):
        if self.eigen is None:
            raise ValueError("no eigen decomposition attached")
        return self.eigen.projector()

    def sensitivity(self, b, use_projection: bool):
        """``P H^-1 b`` (projected) or ``H^-1 b``."""
        if use_projection:
            if self.eigen is None:
                raise ValueError("projection requested but no eigenpairs are attached")
            return self.eigen.apply_inverse(b)
        if self.H is None:
            raise ValueError("unprojected update needs the dense Hessian")
        L = _chol(self.H, "Hessian")
        return sla.cho_solve((L, True), b)


def update_solution(system: SensitivitySystem, theta, use_projection: bool = True) -> np.ndarray:
    """``z_tilde - P H^-1 B theta`` (or without ``P``)."""
    b = system.B_apply(np.asarray(theta, dtype=float))
    return system.z_tilde - system.sensitivity(b, use_projection)


def posterior_control_samples(posterior: DiscrepancyPosterior, system: SensitivitySystem, n_samples: int,
                              seed: int, use_projection: bool = True) -> np.ndarray:
    """Push posterior draws through the linear update; rows are decision vectors."""
    rng = np.random.default_rng(seed)
    thetas = posterior.sample(rng, n_samples)
    z_mean = update_solution(system, posterior.mean, use_projection)
    out = np.empty((n_samples, system.z_tilde.size))
    for i, th in enumerate(thetas):
        # B is linear, so only the deviation from the mean needs a new solve
        out[i] = z_mean - system.sensitivity(system.B_apply(th - posterior.mean), use_projection)
    return out


@dataclass(frozen=True)
class Ellipse:
    center: np.ndarray
    semi_axes: np.ndarray
    rotation: float  # angle of the major axis (radians)
    level: float

    def contains(self, points) -> np.ndarray:
        p = np.atleast_2d(points) - self.center
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        u = p @ np.array([c, s])
        v = p @ np.array([-s, c])
        a, b = self.semi_axes
        if b == 0:
            return (np.abs(v) <= 1e-12 * max(a, 1.0)) & (np.abs(u) <= a)
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def confidence_ellipse(samples=None, covariance=None, center=None, level: float = 0.95) -> Ellipse:
    """Confidence ellipse of a 2-D Gaussian from samples or a covariance."""
    if (samples is None) == (covariance is None):
        raise ValueError("give exactly one of samples or covariance")
    if samples is not None:
        X = np.asarray(samples, dtype=float)
        if X.ndim != 2 or X.shape[1] != 2:
            raise ValueError("samples must have shape (n, 2)")
        mu = X.mean(axis=0)
        C = np.cov(X, rowvar=False)
    else:
        C = np.asarray(covariance, dtype=float)
        if C.shape != (2, 2):
            raise ValueError("decision dimension must be 2")
        mu = np.zeros(2)
    if center is not None:
        mu = np.asarray(center, dtype=float)
    lam, U = np.linalg.eigh(0.5 * (C + C.T))
    lam, U = lam[::-1], U[:, ::-1]
    if lam[1] <= 1e-14 * max(lam[0], np.finfo(float).tiny):
        logger.warning("degenerate covariance; ellipse collapses to a segment")
        lam[1] = 0.0
    q = chi2.ppf(level, 2)
    axes = np.sqrt(q * np.maximum(lam, 0.0))
    return Ellipse(mu, axes, float(np.arctan2(U[1, 0], U[0, 0])), level)
