"""Flow-map reduced model of the level-set fire and ignition inversion.

Level-set snapshots are compressed with POD (``uhat = V^T u``) and advanced by
a learned residual map ``uhat_k = uhat_{k-1} + f(uhat_{k-1})``; one step is
one hour. ``f`` is a dense network with GELU hidden layers:

    f(u) = s_out * N((u - mu) / s_in)

where ``N`` is the plain affine/GELU stack stored in :class:`MlpParams` and
``mu``, ``s_in``, ``s_out`` are fixed normalization vectors (identity by
default). All derivatives are hand-written reverse mode.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.special import erf

from .fire import (BASE_RATE, SHIFT, FireScenario, IgnitionPoint, ObservationSet, fire_grid, ignition_init,
                   ignition_init_jacobian, simulate_fire)
from .fom import Grid2D
from .hdsa import (DiscrepancyBasis, DiscrepancyLayout, DiscrepancyPosterior, PriorSpec, SensitivitySystem,
                   build_discrepancy_basis, calibrate_posterior, confidence_ellipse, default_alpha_d,
                   default_alpha_p, discrepancy_time_weights, posterior_control_samples, update_solution)
from .optimize import OptimizeResult, SmoothProblem, quasi_newton_minimize
from .rom import PodBasis, weighted_pod

logger = logging.getLogger(__name__)

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)
ACTIVATIONS = ("gelu", "identity")


def gelu(x):
    """Exact GELU, ``x Phi(x)``."""
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_prime(x):
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)


# -- network ------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MlpParams:
    """Layer weights ``(n_out, n_in)`` and biases, plus normalization vectors."""

    weights: tuple
    biases: tuple
    activation: str = "gelu"
    in_shift: np.ndarray | None = None
    in_scale: np.ndarray | None = None
    out_scale: np.ndarray | None = None

    def __post_init__(self):
        W = tuple(np.asarray(w, dtype=float) for w in self.weights)
        b = tuple(np.asarray(v, dtype=float).ravel() for v in self.biases)
        if not W or len(W) != len(b):
            raise ValueError("need one bias per weight matrix")
        for k, (w, v) in enumerate(zip(W, b)):
            if w.ndim != 2 or v.size != w.shape[0]:
                raise ValueError(f"layer {k}: weight {w.shape} and bias {v.shape} disagree")
            if k and w.shape[1] != W[k - 1].shape[0]:
                raise ValueError(f"layer {k} expects {w.shape[1]} inputs, previous layer gives {W[k - 1].shape[0]}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(v))):
                raise ValueError(f"layer {k} has non-finite parameters")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        n_in, n_out = W[0].shape[1], W[-1].shape[0]
        norm = {"in_shift": (self.in_shift, 0.0, n_in), "in_scale": (self.in_scale, 1.0, n_in),
                "out_scale": (self.out_scale, 1.0, n_out)}
        for name, (val, default, n) in norm.items():
            v = np.full(n, default) if val is None else np.asarray(val, dtype=float).ravel()
            if v.size != n:
                raise ValueError(f"{name} has size {v.size}, expected {n}")
            if name != "in_shift" and np.any(v <= 0):
                raise ValueError(f"{name} must be positive")
            object.__setattr__(self, name, v)
        object.__setattr__(self, "weights", W)
        object.__setattr__(self, "biases", b)

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_params(self) -> int:
        return sum(w.size + v.size for w, v in zip(self.weights, self.biases))

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), v]) for w, v in zip(self.weights, self.biases)])

    def with_flat(self, vec) -> "MlpParams":
        vec = np.asarray(vec, dtype=float)
        if vec.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {vec.size}")
        W, b, i = [], [], 0
        for w, v in zip(self.weights, self.biases):
            W.append(vec[i:i + w.size].reshape(w.shape))
            i += w.size
            b.append(vec[i:i + v.size].copy())
            i += v.size
        return replace(self, weights=tuple(W), biases=tuple(b))

    def to_blocks(self) -> tuple[dict, dict]:
        """Named arrays and JSON metadata for the binary container."""
        blocks = {}
        for k, (w, v) in enumerate(zip(self.weights, self.biases)):
            blocks[f"W{k}"] = w
            blocks[f"b{k}"] = v
        blocks["in_shift"], blocks["in_scale"], blocks["out_scale"] = self.in_shift, self.in_scale, self.out_scale
        return blocks, {"widths": self.widths, "activation": self.activation}

    @classmethod
    def from_blocks(cls, blocks: dict, meta: dict) -> "MlpParams":
        n = len(meta["widths"]) - 1
        return cls(tuple(blocks[f"W{k}"] for k in range(n)), tuple(blocks[f"b{k}"] for k in range(n)),
                   meta["activation"], blocks["in_shift"], blocks["in_scale"], blocks["out_scale"])


def init_mlp(widths, seed: int, activation: str = "gelu") -> MlpParams:
    """Glorot-normal weights and zero biases."""
    rng = np.random.default_rng(seed)
    W, b = [], []
    for n_in, n_out in zip(widths[:-1], widths[1:]):
        W.append(rng.standard_normal((n_out, n_in)) * np.sqrt(2.0 / (n_in + n_out)))
        b.append(np.zeros(n_out))
    return MlpParams(tuple(W), tuple(b), activation)


def _forward(params: MlpParams, X):
    """Batched forward pass on rows of ``X``; returns the output and the cache."""
    act = gelu if params.activation == "gelu" else (lambda x: x)
    a = (X - params.in_shift) / params.in_scale
    inputs, pre = [a], []
    L = len(params.weights)
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        y = a @ W.T + b
        if k == L - 1:
            break
        pre.append(y)
        a = act(y)
        inputs.append(a)
    return y * params.out_scale, (inputs, pre)


def _backward(params: MlpParams, cache, gout):
    """Reverse pass: parameter gradients (flat) and the input cotangent."""
    inputs, pre = cache
    L = len(params.weights)
    gW, gb = [None] * L, [None] * L
    g = gout * params.out_scale
    for k in range(L - 1, -1, -1):
        gW[k] = g.T @ inputs[k]
        gb[k] = g.sum(axis=0)
        g = g @ params.weights[k]
        if k > 0:
            g = g * (gelu_prime(pre[k - 1]) if params.activation == "gelu" else 1.0)
    flat = np.concatenate([np.concatenate([w.ravel(), v]) for w, v in zip(gW, gb)])
    return flat, g / params.in_scale


def mlp_forward(params: MlpParams, uhat) -> np.ndarray:
    """``f(uhat)`` for a vector or for the rows of a matrix."""
    X = np.asarray(uhat, dtype=float)
    if X.shape[-1] != params.widths[0]:
        raise ValueError(f"input width {X.shape[-1]} does not match the network ({params.widths[0]})")
    out, _ = _forward(params, np.atleast_2d(X))
    return out[0] if X.ndim == 1 else out


def mlp_vjp(params: MlpParams, uhat, gout):
    """Parameter gradient (flat) and input cotangent of ``<gout, f(uhat)>``."""
    X = np.atleast_2d(np.asarray(uhat, dtype=float))
    _, cache = _forward(params, X)
    gp, gx = _backward(params, cache, np.atleast_2d(gout))
    return gp, (gx[0] if np.ndim(uhat) == 1 else gx)


# -- rollout ------------------------------------------------------------------------


def _advance(params, U0, n_steps):
    """Roll rows of ``U0`` forward; returns states ``(n+1, B, r)`` and caches."""
    states = np.empty((n_steps + 1,) + U0.shape)
    states[0] = U0
    caches = []
    for k in range(n_steps):
        out, cache = _forward(params, states[k])
        states[k + 1] = states[k] + out
        if not np.all(np.isfinite(states[k + 1])):
            raise FloatingPointError(f"rollout produced non-finite values at step {k + 1}")
        caches.append(cache)
    return states, caches


def _retreat(params, caches, G):
    """Adjoint sweep for cotangents ``G`` on the states; returns (param grad, state-0 cotangent)."""
    abar = G[-1].copy()
    grad = np.zeros(params.n_params)
    for k in range(len(caches) - 1, -1, -1):
        gp, gx = _backward(params, caches[k], abar)
        grad += gp
        abar = G[k] + abar + gx
    return grad, abar


def project_ignition(V, z: IgnitionPoint, grid: Grid2D) -> np.ndarray:
    return V.T @ ignition_init(z, grid)


def rollout(params: MlpParams, V, z, n_steps: int, grid: Grid2D | None = None) -> np.ndarray:
    """Reduced trajectory ``(n_steps + 1, r)`` started from ``V^T u0(z)``."""
    grid = fire_grid() if grid is None else grid
    z = z if isinstance(z, IgnitionPoint) else IgnitionPoint(z)
    states, _ = _advance(params, project_ignition(V, z, grid)[None, :], int(n_steps))
    return states[:, 0, :]


def rollout_vjp(params: MlpParams, V, z, n_steps: int, G, grid: Grid2D | None = None):
    """Gradients of ``sum_k <G_k, uhat_k>`` with respect to ``z`` and to the parameters."""
    grid = fire_grid() if grid is None else grid
    z = z if isinstance(z, IgnitionPoint) else IgnitionPoint(z)
    states, caches = _advance(params, project_ignition(V, z, grid)[None, :], int(n_steps))
    gp, abar = _retreat(params, caches, np.asarray(G, dtype=float)[:, None, :])
    dz = ignition_init_jacobian(z, grid).T @ (V @ abar[0])
    return dz, gp


# -- data and loss --------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FlowmapDataset:
    """Reduced trajectories ``(M, n_tau + 1, r)`` with a split tag per trajectory."""

    trajectories: np.ndarray
    split: tuple

    def __post_init__(self):
        T = np.asarray(self.trajectories, dtype=float)
        if T.ndim != 3:
            raise ValueError("trajectories must be an (M, n_tau + 1, r) array")
        split = tuple(self.split)
        if len(split) != T.shape[0] or not set(split) <= {"train", "validation"}:
            raise ValueError("need one 'train'/'validation' tag per trajectory")
        object.__setattr__(self, "trajectories", T)
        object.__setattr__(self, "split", split)

    @property
    def n_tau(self) -> int:
        return self.trajectories.shape[1] - 1

    @property
    def r(self) -> int:
        return self.trajectories.shape[2]

    def subset(self, tag: str) -> np.ndarray:
        return self.trajectories[[s == tag for s in self.split]]


def _as_trajectories(data, split):
    if isinstance(data, FlowmapDataset):
        return data.subset(split) if split is not None else data.trajectories
    return np.asarray(data, dtype=float)


def _recurrent(params, D, P, want_grad):
    M, n1, r = D.shape
    n_tau = n1 - 1
    if not 1 <= P:
        raise ValueError("P must be at least 1")
    U0 = D[:, :n_tau].reshape(-1, r)  # start (m, k) at row m * n_tau + k
    states, caches = _advance(params, U0, P)
    k = np.tile(np.arange(n_tau), M)
    m = np.repeat(np.arange(M), n_tau)
    loss = 0.0
    G = np.zeros_like(states)
    for p in range(1, P + 1):
        ok = k + p <= n_tau
        R = np.zeros_like(U0)
        R[ok] = states[p][ok] - D[m[ok], k[ok] + p]
        loss += float(np.sum(R * R))
        G[p] = 2.0 * R
    if not want_grad:
        return loss, None
    grad, _ = _retreat(params, caches, G)
    return loss, grad


def recurrent_loss(params: MlpParams, dataset, P: int, split: str | None = "train") -> float:
    """``sum_m sum_k sum_{p<=P} ||uhat_{k+p} - d_{k+p}||^2``, rolled from the data at ``k``."""
    return _recurrent(params, _as_trajectories(dataset, split), int(P), False)[0]


def recurrent_loss_and_grad(params: MlpParams, dataset, P: int, split: str | None = "train"):
    return _recurrent(params, _as_trajectories(dataset, split), int(P), True)


def one_step_error(params: MlpParams, data, split: str | None = "validation") -> float:
    """Relative l2 error of single-step predictions over all steps."""
    D = _as_trajectories(data, split)
    U = D[:, :-1].reshape(-1, D.shape[2])
    pred = U + mlp_forward(params, U)
    true = D[:, 1:].reshape(-1, D.shape[2])
    return float(np.linalg.norm(pred - true) / np.linalg.norm(true))


def composition_error(params: MlpParams, data, split: str | None = "validation") -> float:
    """Relative l2 error of full rollouts from the initial states."""
    D = _as_trajectories(data, split)
    states, _ = _advance(params, D[:, 0], D.shape[1] - 1)
    pred = states[1:].transpose(1, 0, 2)
    return float(np.linalg.norm(pred - D[:, 1:]) / np.linalg.norm(D[:, 1:]))


# -- training -----------------------------------------------------------------------


class TrainingDivergence(FloatingPointError):
    """Raised when the loss becomes non-finite; ``params`` holds the best iterate so far."""

    def __init__(self, message, params):
        super().__init__(message)
        self.params = params


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 1000
    lr_start: float = 4e-3
    lr_end: float = 1e-3
    P: int = 3
    batch_size: int | None = None  # trajectories per batch; None for full batch
    seed: int = 0
    hidden_width: int = 64
    hidden_layers: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("need lr_start >= lr_end > 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.hidden_width < 1 or self.hidden_layers < 0:
            raise ValueError("invalid network size")

    def check_horizon(self, n_tau: int):
        if not 1 < self.P < n_tau:
            raise ValueError(f"P = {self.P} must satisfy 1 < P < n_tau = {n_tau}")

    def learning_rate(self, epoch: int) -> float:
        frac = epoch / max(self.epochs - 1, 1)
        return self.lr_start * (self.lr_end / self.lr_start) ** frac


def normalization(train: np.ndarray):
    """Input mean, and one scalar input/output scale shared by all coordinates.

    Shared scales keep the POD energy ordering; per-coordinate scaling would
    blow up the low-energy modes and the network overfits them.
    """
    r = train.shape[2]
    X = train.reshape(-1, r)
    inc = (train[:, 1:] - train[:, :-1]).reshape(-1, r)
    s_in = float(X.std(axis=0).max())
    s_out = float(np.sqrt(np.mean(inc**2, axis=0)).max())
    if s_in == 0 or s_out == 0:
        raise ValueError("training trajectories are constant")
    return X.mean(axis=0), np.full(r, s_in), np.full(r, s_out)


def train_flowmap(dataset: FlowmapDataset, schedule: TrainSchedule, history: list | None = None) -> MlpParams:
    """Adam on the recurrent loss; returns the parameters with the best validation loss.

    If ``history`` is a list, one record per epoch is appended.
    """
    train = dataset.subset("train")
    if train.shape[0] == 0:
        raise ValueError("empty training split")
    schedule.check_horizon(dataset.n_tau)
    val = dataset.subset("validation")
    shift, s_in, s_out = normalization(train)
    widths = [dataset.r] + [schedule.hidden_width] * schedule.hidden_layers + [dataset.r]
    params = replace(init_mlp(widths, schedule.seed), in_shift=shift, in_scale=s_in, out_scale=s_out)
    rng = np.random.default_rng(schedule.seed + 1)
    x = params.flat()
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    b1, b2 = schedule.beta1, schedule.beta2
    best, best_val = params, np.inf
    step = 0
    n_train = train.shape[0]
    bs = n_train if schedule.batch_size is None else min(schedule.batch_size, n_train)
    for epoch in range(schedule.epochs):
        lr = schedule.learning_rate(epoch)
        order = np.arange(n_train) if bs == n_train else rng.permutation(n_train)
        train_loss = 0.0
        for start in range(0, n_train, bs):
            batch = train[order[start:start + bs]]
            loss, g = recurrent_loss_and_grad(params, batch, schedule.P, split=None)
            if not (np.isfinite(loss) and np.all(np.isfinite(g))):
                raise TrainingDivergence(f"non-finite loss at epoch {epoch}", best)
            train_loss += loss
            step += 1
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mhat = m / (1 - b1**step)
            vhat = v / (1 - b2**step)
            x = x - lr * mhat / (np.sqrt(vhat) + schedule.adam_eps)
            try:
                params = params.with_flat(x)
            except ValueError as exc:
                raise TrainingDivergence(f"non-finite parameters at epoch {epoch}", best) from exc
        try:
            val_loss = recurrent_loss(params, val if val.shape[0] else train, schedule.P, split=None)
        except FloatingPointError as exc:
            raise TrainingDivergence(f"validation rollout diverged at epoch {epoch}", best) from exc
        if val_loss < best_val:
            best, best_val = params, val_loss
        if history is not None:
            history.append({"epoch": epoch, "lr": lr, "train_loss": train_loss, "validation_loss": val_loss})
    return best


# -- fire data ------------------------------------------------------------------------

TRAIN_BOX = ((900.0, 900.0), (2700.0, 2700.0))
TEST_BOX = ((900.0, 900.0), (1500.0, 1500.0))


def sample_ignitions(seed: int, n: int, box=TRAIN_BOX) -> np.ndarray:
    lo, hi = (np.asarray(b, dtype=float) for b in box)
    return np.random.default_rng(seed).uniform(lo, hi, size=(n, 2))


def simulate_ensemble(points, scenario: FireScenario) -> np.ndarray:
    """Signed-distance states ``(M, n, horizon + 1)`` for each ignition point."""
    return np.stack([simulate_fire(IgnitionPoint(p), scenario).states for p in np.atleast_2d(points)])


def level_set_pod(train_states: np.ndarray, validation_states: np.ndarray, tol: float = 0.01) -> PodBasis:
    """Smallest POD basis (identity weight) whose validation projection error is at most ``tol``."""
    X = np.hstack(list(train_states))
    Y = np.hstack(list(validation_states))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        full = weighted_pod(X, np.ones(X.shape[0]), energy_tol=1e-14)
    V = full.V
    C = V.T @ Y
    # ||Y - V_r V_r^T Y||^2 = ||Y||^2 - sum_{i<r} ||c_i||^2 for orthonormal V
    total = np.sum(Y * Y)
    resid = total - np.cumsum(np.sum(C * C, axis=1))
    rel = np.sqrt(np.maximum(resid, 0.0) / total)
    hits = np.nonzero(rel <= tol)[0]
    if hits.size:
        r = int(hits[0]) + 1
    else:
        r = V.shape[1]
        warnings.warn(f"validation projection error {rel[-1]:.3g} exceeds {tol} with all {r} modes", stacklevel=2)
    energy = full.singular_values**2
    return PodBasis(V[:, :r].copy(), full.singular_values, float(energy[r:].sum() / energy.sum()), tol)


def reduced_dataset(V, train_states, validation_states) -> FlowmapDataset:
    T = [(V.T @ S).T for S in train_states] + [(V.T @ S).T for S in validation_states]
    return FlowmapDataset(np.stack(T), ("train",) * len(train_states) + ("validation",) * len(validation_states))


# -- ignition inversion --------------------------------------------------------------


class DomainExit(RuntimeError):
    pass


class IgnitionRomProblem:
    """``J(z) = sum_j ||V uhat_{s_j}(z) - y_j||^2`` with ``s_j`` the observation hours."""

    def __init__(self, params: MlpParams, V, obs: ObservationSet, grid: Grid2D | None = None, c: float = SHIFT):
        self.params = params
        self.V = np.asarray(V, dtype=float)
        self.grid = fire_grid() if grid is None else grid
        self.c = float(c)
        steps = np.asarray(obs.times, dtype=float)
        if not np.allclose(steps, np.round(steps)) or np.any(steps < 1):
            raise ValueError("observation times must be whole hours after ignition")
        self.steps = np.round(steps).astype(int)
        self.n_steps = int(self.steps.max())
        self.Y = np.asarray(obs.Y, dtype=float)
        if self.Y.shape != (self.V.shape[0], self.steps.size):
            raise ValueError("observations do not match the basis and observation times")
        self.Yhat = self.V.T @ self.Y  # r x n_obs
        self.perp = float(np.sum((self.Y - self.V @ self.Yhat) ** 2))

    def point(self, z) -> IgnitionPoint:
        z = np.asarray(z, dtype=float)
        if not (0.0 <= z[0] <= self.grid.lx and 0.0 <= z[1] <= self.grid.ly):
            raise DomainExit(f"ignition estimate {z} left the domain")
        return IgnitionPoint(z, self.c)

    def trajectory(self, z) -> np.ndarray:
        return rollout(self.params, self.V, self.point(z), self.n_steps, self.grid)

    def predictions(self, z) -> np.ndarray:
        """Lifted predictions ``V uhat_{s_j}`` as columns."""
        return self.V @ self.trajectory(z)[self.steps].T

    def objective(self, z) -> float:
        R = self.trajectory(z)[self.steps] - self.Yhat.T
        return float(np.sum(R * R)) + self.perp

    def gradient_from_residual(self, z, Rhat) -> np.ndarray:
        """``2 sum_j (d uhat_{s_j}/dz)^T Rhat_j`` for reduced residual columns ``Rhat``."""
        G = np.zeros((self.n_steps + 1, self.V.shape[1]))
        np.add.at(G, self.steps, 2.0 * np.asarray(Rhat).T)
        dz, _ = rollout_vjp(self.params, self.V, self.point(z), self.n_steps, G, self.grid)
        return dz

    def gradient(self, z) -> np.ndarray:
        R = self.trajectory(z)[self.steps] - self.Yhat.T
        return self.gradient_from_residual(z, R.T)

    def as_smooth_problem(self) -> SmoothProblem:
        return SmoothProblem(2, self.objective, self.gradient)


def ignition_romco(params: MlpParams, V, obs: ObservationSet, z0, grid: Grid2D | None = None,
                   gtol: float | None = None, max_iter: int = 100, log=None) -> OptimizeResult:
    """Ignition estimate from the flow-map model by the BFGS trust-region method."""
    problem = IgnitionRomProblem(params, V, obs, grid)
    z0 = np.asarray(z0, dtype=float)
    problem.point(z0)
    return quasi_newton_minimize(problem.as_smooth_problem(), z0, gtol=gtol, max_iter=max_iter,
                                 delta0=2.0 * problem.grid.hx, log=log)


def multistart_romco(params, V, obs, starts, grid=None, rel_spread: float = 0.1, **kw):
    """Run from several starts; returns (best result, all results, consistent flag)."""
    results = [ignition_romco(params, V, obs, z0, grid, **kw) for z0 in starts]
    vals = np.array([r.objective for r in results])
    best = results[int(np.argmin(vals))]
    consistent = bool(np.all(vals <= (1 + rel_spread) * vals.min()))
    if not consistent:
        logger.warning("multi-start misfits disagree by more than %.0f%%; the misfit may be multimodal",
                       100 * rel_spread)
    return best, results, consistent


# -- discrepancy updates for the ignition problem ------------------------------------------


def fd_hessian(gradient, z, step: float = 1.0) -> np.ndarray:
    """Symmetrized central-difference Jacobian of ``gradient`` at ``z``."""
    z = np.asarray(z, dtype=float)
    n = z.size
    H = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = step
        H[:, i] = (np.asarray(gradient(z + e)) - np.asarray(gradient(z - e))) / (2 * step)
    return 0.5 * (H + H.T)


class IgnitionDiscrepancyProblem:
    """Misfit with the state shifted by ``delta(t_j; z, theta)`` at the observation hours."""

    def __init__(self, rom: IgnitionRomProblem, basis: DiscrepancyBasis, Mz, origin=(0.0, 0.0)):
        if basis.n_tau != rom.steps.size or not np.allclose(basis.time_nodes, rom.steps):
            raise ValueError("discrepancy time nodes must be the observation hours")
        self.rom = rom
        self.basis = basis
        self.Mz = np.asarray(Mz, dtype=float)
        self.origin = np.asarray(origin, dtype=float)
        self.layout = DiscrepancyLayout(basis.r, 2, basis.n_tau)

    def _coeffs(self, z, theta):
        T = self.layout.blocks(theta)
        x = z - self.origin
        a = np.concatenate([[1.0], self.Mz * x if self.Mz.ndim == 1 else self.Mz @ x])
        return T, T @ a  # (n_tau, r, 3), (n_tau, r)

    def _slopes(self, T):
        return T[:, :, 1:] * self.Mz if self.Mz.ndim == 1 else T[:, :, 1:] @ self.Mz

    def residual(self, z, theta) -> np.ndarray:
        _, c = self._coeffs(np.asarray(z, dtype=float), theta)
        return self.rom.predictions(z) + self.basis.Vdelta @ c.T - self.rom.Y

    def objective(self, z, theta) -> float:
        return float(np.sum(self.residual(z, theta) ** 2))

    def gradient(self, z, theta) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        R = self.residual(z, theta)
        T, _ = self._coeffs(z, theta)
        g = self.rom.gradient_from_residual(z, self.rom.V.T @ R)
        return g + 2.0 * np.einsum("kri,rk->i", self._slopes(T), self.basis.Vdelta.T @ R)

    def mixed_hessian_apply(self, z_tilde, theta) -> np.ndarray:
        """``B theta``: derivative of the gradient in ``theta`` at ``theta = 0``."""
        z = np.asarray(z_tilde, dtype=float)
        T, c = self._coeffs(z, theta)
        R0 = self.rom.predictions(z) - self.rom.Y
        g = self.rom.gradient_from_residual(z, self.rom.V.T @ (self.basis.Vdelta @ c.T))
        return g + 2.0 * np.einsum("kri,rk->i", self._slopes(T), self.basis.Vdelta.T @ R0)


@dataclass
class IgnitionUpdate:
    z_tilde: np.ndarray
    z_bar: np.ndarray
    posterior: DiscrepancyPosterior
    system: SensitivitySystem
    problem: IgnitionDiscrepancyProblem
    meta: dict = field(default_factory=dict)

    def samples(self, n: int, seed: int) -> np.ndarray:
        return posterior_control_samples(self.posterior, self.system, n, seed, use_projection=False)

    def ellipse(self, n: int, seed: int, level: float = 0.95):
        return confidence_ellipse(samples=self.samples(n, seed), level=level)


@dataclass(eq=False)
class IgnitionCalibration:
    posterior: DiscrepancyPosterior
    basis: DiscrepancyBasis
    origin: np.ndarray
    meta: dict = field(default_factory=dict)


def calibrate_ignition_discrepancy(rom: IgnitionRomProblem, z_tilde, fom_obs: ObservationSet,
                                   alpha_p_factor: float = 1.0, alpha_d_factor: float = 0.05,
                                   length_scale: float | None = None, origin=None,
                                   base_rate: float = BASE_RATE) -> IgnitionCalibration:
    """Discrepancy posterior from one high-fidelity run at ``z_tilde``.

    ``fom_obs`` holds signed-distance fields from the high-fidelity model at
    ``z_tilde`` under the target conditions, at the observation hours.
    The affine discrepancy is written in ``z - origin`` (default: domain
    centre) and its slope prior uses ``Wz = I / length_scale^2``. The default
    length scale is the calm-wind spread distance over the observation window.
    """
    z_tilde = np.asarray(z_tilde, dtype=float)
    if not np.allclose(fom_obs.times, rom.steps):
        raise ValueError("high-fidelity observations must be at the observation hours")
    Delta = np.asarray(fom_obs.Y, dtype=float) - rom.predictions(z_tilde)
    nodes = rom.steps.astype(float)
    basis = build_discrepancy_basis([Delta], Delta.shape[1], nodes)
    w = discrepancy_time_weights(nodes)
    Wu = sp.identity(Delta.shape[0], format="csr")
    ell = base_rate * 3600.0 * rom.n_steps if length_scale is None else float(length_scale)
    prior = PriorSpec(Wu, w, np.full(2, 1.0 / ell**2), np.ones(2),
                      default_alpha_p([Delta], Wu, w, basis.r, alpha_p_factor),
                      default_alpha_d([Delta], Wu, w, alpha_d_factor))
    origin = np.array([rom.grid.lx, rom.grid.ly]) / 2 if origin is None else np.asarray(origin, dtype=float)
    posterior = calibrate_posterior([(z_tilde - origin, Delta)], basis, prior)
    meta = {"r_delta": basis.r, "alpha_p": prior.alpha_p, "alpha_d": prior.alpha_d, "length_scale": ell}
    return IgnitionCalibration(posterior, basis, origin, meta)


def ignition_update(rom: IgnitionRomProblem, z_tilde, calibration: IgnitionCalibration,
                    hessian_step: float = 1.0) -> IgnitionUpdate:
    """``z_bar = z_tilde - H^-1 B theta_mean`` with a finite-difference Hessian."""
    z_tilde = np.asarray(z_tilde, dtype=float)
    problem = IgnitionDiscrepancyProblem(rom, calibration.basis, np.ones(2), calibration.origin)
    H = fd_hessian(rom.gradient, z_tilde, hessian_step)
    system = SensitivitySystem.from_dense(z_tilde, lambda th: problem.mixed_hessian_apply(z_tilde, th), H,
                                          retention_ratio=None)
    z_bar = update_solution(system, calibration.posterior.mean, use_projection=False)
    meta = dict(calibration.meta, hessian_eigenvalues=system.eigen.eigenvalues.tolist())
    return IgnitionUpdate(z_tilde, z_bar, calibration.posterior, system, problem, meta)


def ignition_hdsa_update(rom: IgnitionRomProblem, z_tilde, fom_obs: ObservationSet, hessian_step: float = 1.0,
                         **calibration_options) -> IgnitionUpdate:
    """Calibration followed by the update, from one high-fidelity run."""
    cal = calibrate_ignition_discrepancy(rom, z_tilde, fom_obs, **calibration_options)
    return ignition_update(rom, z_tilde, cal, hessian_step)
