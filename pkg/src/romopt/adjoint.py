"""Discrete adjoints of the RK4 reduced model for the control problem.

Gradients and Hessian-vector products are those of the time-discrete
objective, so they agree with finite differences up to round-off.
The state is the concatenation ``x = (u1_hat, u2_hat)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fom import GAMMA, ControlVector, SimulationError, interpolation_weights, trapezoid_weights
from .rom import ReducedModel

# RK4 stage offsets (fractions of dt) and output weights
_C = (0.0, 0.5, 0.5, 1.0)
_B = (1 / 6, 1 / 3, 1 / 3, 1 / 6)


@dataclass
class _Forward:
    z: np.ndarray
    X: np.ndarray  # (N+1, r) states
    Y: np.ndarray  # (N, 4, r) stage inputs
    J: np.ndarray  # (N, 4, r, r) stage Jacobians
    q_stage: np.ndarray  # (4, n_q, N)
    q_traj: np.ndarray  # (n_q, N+1)


class RomControlProblem:
    """ROM-constrained control objective with adjoint derivatives.

    Parameters
    ----------
    model : ReducedModel
        Must carry ``scaled_mass``.
    time_nodes : array
        Control time nodes; ``z`` is the row-major flattening of the
        ``(n_q, n_s)`` node values.
    """

    def __init__(self, model: ReducedModel, time_nodes, gamma: float = GAMMA, n_steps: int | None = None):
        if model.scaled_mass is None:
            raise ValueError("model needs a scaled mass for the objective")
        self.model = model
        self.gamma = float(gamma)
        self.time_nodes = np.asarray(time_nodes, dtype=float)
        self.n_steps = model.n_steps if n_steps is None else int(n_steps)
        self.n_q = model.n_q
        self.n_s = self.time_nodes.size
        self.r1, self.r2 = model.r1, model.r2
        r = self.r1 + self.r2
        self.dt = model.final_time / self.n_steps
        N = self.n_steps
        self.times = np.linspace(0.0, model.final_time, N + 1)
        self.weights = trapezoid_weights(self.times)
        tn = self.times[:-1]
        T = model.final_time
        # interpolation for stages 1, 2(=3), 4 and for the trajectory times
        self.W_stage = [
            interpolation_weights(self.time_nodes, np.minimum(tn + c * self.dt, T)) for c in (0.0, 0.5, 1.0)
        ]
        self.W_traj = interpolation_weights(self.time_nodes, self.times)
        self.R1t = model.Rhat1.reshape(self.r1, self.r1, self.r2)
        self.R2t = model.Rhat2.reshape(self.r2, self.r1, self.r2)
        self.Q = model.scaled_mass
        self.x0 = np.concatenate([model.init1, model.init2])
        self._r = r
        self._fwd: _Forward | None = None
        self._adj = None

    @property
    def n_z(self) -> int:
        return self.n_q * self.n_s

    def control(self, z) -> ControlVector:
        return ControlVector.from_flat(z, self.n_q, self.time_nodes)

    # -- model pieces -------------------------------------------------------
    def _split(self, x):
        return x[: self.r1], x[self.r1:]

    def _rhs(self, x, s):
        u1, u2 = self._split(x)
        quad = np.outer(u1, u2).ravel()
        m = self.model
        return np.concatenate([m.Ahat1 @ u1 + m.Rhat1 @ quad, m.Ahat2 @ u2 + m.Rhat2 @ quad + m.Phihat @ s])

    def _jac(self, x):
        u1, u2 = self._split(x)
        r1 = self.r1
        J = np.empty((self._r, self._r))
        J[:r1, :r1] = self.model.Ahat1 + self.R1t @ u2
        J[:r1, r1:] = np.einsum("aij,i->aj", self.R1t, u1)
        J[r1:, :r1] = self.R2t @ u2
        J[r1:, r1:] = self.model.Ahat2 + np.einsum("aij,i->aj", self.R2t, u1)
        return J

    def _curv(self, w):
        """Second derivative of ``w . f(x)``: ``[[0, Y], [Y^T, 0]]``."""
        w1, w2 = self._split(w)
        Y = np.tensordot(w1, self.R1t, axes=1) + np.tensordot(w2, self.R2t, axes=1)
        H = np.zeros((self._r, self._r))
        H[: self.r1, self.r1:] = Y
        H[self.r1:, : self.r1] = Y.T
        return H

    # -- forward ------------------------------------------------------------
    def forward(self, z) -> _Forward:
        z = np.asarray(z, dtype=float)
        if self._fwd is not None and np.array_equal(self._fwd.z, z):
            return self._fwd
        Z = z.reshape(self.n_q, self.n_s)
        q0, qh, q1 = (Z @ W.T for W in self.W_stage)
        q_stage = np.stack([q0, qh, qh, q1])
        s_stage = q_stage**2
        N, r, dt = self.n_steps, self._r, self.dt
        X = np.empty((N + 1, r))
        Y = np.empty((N, 4, r))
        Jst = np.empty((N, 4, r, r))
        X[0] = self.x0
        for n in range(N):
            x = X[n]
            incr = np.zeros(r)
            k = None
            for i in range(4):
                y = x if i == 0 else x + (_C[i] * dt) * k
                Y[n, i] = y
                Jst[n, i] = self._jac(y)
                k = self._rhs(y, s_stage[i, :, n])
                incr += _B[i] * k
            X[n + 1] = x + dt * incr
            if not np.all(np.isfinite(X[n + 1])):
                raise SimulationError(f"non-finite ROM state at step {n + 1}")
        self._fwd = _Forward(z.copy(), X, Y, Jst, q_stage, Z @ self.W_traj.T)
        self._adj = None
        return self._fwd

    def objective(self, z) -> float:
        f = self.forward(z)
        X1 = f.X[:, : self.r1]
        zone = np.einsum("ni,ij,nj->n", X1, self.Q, X1)
        reg = np.sum(f.q_traj**4, axis=0)
        return 0.5 * float(self.weights @ (zone + self.gamma * reg))

    def zone_cost_gradients(self, f: _Forward) -> np.ndarray:
        G = np.zeros_like(f.X)
        G[:, : self.r1] = self.weights[:, None] * (f.X[:, : self.r1] @ self.Q)
        return G

    # -- reverse ------------------------------------------------------------
    def _reverse(self, f: _Forward, G: np.ndarray, keep_stages: bool = False):
        """Backpropagate state cotangents ``G`` (N+1, r); return source adjoints."""
        N, r, dt = self.n_steps, self._r, self.dt
        lam = G[N].copy()
        sbar = np.zeros((4, self.r2, N))
        KB = np.empty((N, 4, r)) if keep_stages else None
        for n in range(N - 1, -1, -1):
            kb = [None] * 4
            gy = [None] * 4
            kb[3] = (dt / 6) * lam
            gy[3] = f.J[n, 3].T @ kb[3]
            kb[2] = (dt / 3) * lam + dt * gy[3]
            gy[2] = f.J[n, 2].T @ kb[2]
            kb[1] = (dt / 3) * lam + (0.5 * dt) * gy[2]
            gy[1] = f.J[n, 1].T @ kb[1]
            kb[0] = (dt / 6) * lam + (0.5 * dt) * gy[1]
            gy[0] = f.J[n, 0].T @ kb[0]
            for i in range(4):
                sbar[i, :, n] = kb[i][self.r1:]
            if keep_stages:
                KB[n] = kb
            lam = lam + gy[0] + gy[1] + gy[2] + gy[3] + G[n]
        return sbar, KB

    def _source_to_z(self, f: _Forward, sbar: np.ndarray) -> np.ndarray:
        """Map stage source adjoints to the control nodes."""
        P = self.model.Phihat.T
        g0 = 2.0 * f.q_stage[0] * (P @ sbar[0])
        gh = 2.0 * f.q_stage[1] * (P @ (sbar[1] + sbar[2]))
        g1 = 2.0 * f.q_stage[3] * (P @ sbar[3])
        dZ = g0 @ self.W_stage[0] + gh @ self.W_stage[1] + g1 @ self.W_stage[2]
        return dZ.ravel()

    def _regularization_gradient(self, f: _Forward) -> np.ndarray:
        dZ = (2.0 * self.gamma * self.weights * f.q_traj**3) @ self.W_traj
        return dZ.ravel()

    def source_adjoint(self, z, G: np.ndarray) -> np.ndarray:
        """``sum_n (d x_n / d z)^T G[n]`` for arbitrary state cotangents."""
        f = self.forward(z)
        sbar, _ = self._reverse(f, G)
        return self._source_to_z(f, sbar)

    def gradient(self, z) -> np.ndarray:
        f = self.forward(z)
        if self._adj is None:
            sbar, KB = self._reverse(f, self.zone_cost_gradients(f), keep_stages=True)
            g = self._source_to_z(f, sbar) + self._regularization_gradient(f)
            self._adj = (sbar, KB, g)
        return self._adj[2].copy()

    def value_and_gradient(self, z):
        return self.objective(z), self.gradient(z)

    # -- second order ---------------------------------------------------------
    def hvp(self, z, V) -> np.ndarray:
        """Hessian times one direction ``(n_z,)`` or a block ``(n_z, k)``."""
        V = np.asarray(V, dtype=float)
        single = V.ndim == 1
        if single:
            V = V[:, None]
        f = self.forward(z)
        self.gradient(z)
        sbar, KB, _ = self._adj
        N, r, dt, k = self.n_steps, self._r, self.dt, V.shape[1]
        r1 = self.r1
        Phi = self.model.Phihat
        dZ = V.T.reshape(k, self.n_q, self.n_s)
        dq = [np.einsum("kqs,ns->kqn", dZ, W) for W in self.W_stage]
        dq_stage = [dq[0], dq[1], dq[1], dq[2]]
        ds_stage = [2.0 * f.q_stage[i][None] * dq_stage[i] for i in range(4)]  # (k, n_q, N)
        # tangent sweep
        dX = np.zeros((N + 1, r, k))
        dY = np.empty((N, 4, r, k))
        for n in range(N):
            dx = dX[n]
            incr = np.zeros((r, k))
            dk = None
            for i in range(4):
                dy = dx if i == 0 else dx + (_C[i] * dt) * dk
                dY[n, i] = dy
                dk = f.J[n, i] @ dy
                dk[r1:] += Phi @ ds_stage[i][:, :, n].T
                incr += _B[i] * dk
            dX[n + 1] = dx + dt * incr
        # second-order adjoint sweep
        Q = self.Q
        w = self.weights
        dG = np.zeros((N + 1, r, k))
        dG[:, :r1] = w[:, None, None] * np.einsum("ij,njk->nik", Q, dX[:, :r1])
        dlam = dG[N].copy()
        dsbar = np.zeros((4, self.r2, k, N))
        for n in range(N - 1, -1, -1):
            kb = KB[n]
            dkb = [None] * 4
            dgy = [None] * 4
            dkb[3] = (dt / 6) * dlam
            dgy[3] = f.J[n, 3].T @ dkb[3] + self._curv(kb[3]) @ dY[n, 3]
            dkb[2] = (dt / 3) * dlam + dt * dgy[3]
            dgy[2] = f.J[n, 2].T @ dkb[2] + self._curv(kb[2]) @ dY[n, 2]
            dkb[1] = (dt / 3) * dlam + (0.5 * dt) * dgy[2]
            dgy[1] = f.J[n, 1].T @ dkb[1] + self._curv(kb[1]) @ dY[n, 1]
            dkb[0] = (dt / 6) * dlam + (0.5 * dt) * dgy[1]
            dgy[0] = f.J[n, 0].T @ dkb[0] + self._curv(kb[0]) @ dY[n, 0]
            for i in range(4):
                dsbar[i, :, :, n] = dkb[i][r1:]
            dlam = dlam + dgy[0] + dgy[1] + dgy[2] + dgy[3] + dG[n]
        P = Phi.T
        out = np.zeros((k, self.n_q, self.n_s))
        pairs = ((0, (0,), 0), (1, (1, 2), 1), (3, (3,), 2))
        for qi, sb_idx, wi in pairs:
            sb = sum(sbar[j] for j in sb_idx)  # (r2, N)
            dsb = sum(dsbar[j] for j in sb_idx)  # (r2, k, N)
            term = 2.0 * dq_stage[qi] * (P @ sb)[None] + 2.0 * f.q_stage[qi][None] * np.einsum(
                "qr,rkn->kqn", P, dsb
            )
            out += term @ self.W_stage[wi]
        reg = 6.0 * self.gamma * self.weights * f.q_traj**2  # (n_q, N+1)
        dq_traj = np.einsum("kqs,ns->kqn", dZ, self.W_traj)
        out += (reg[None] * dq_traj) @ self.W_traj
        H = out.reshape(k, -1).T
        return H[:, 0] if single else H

    def dense_hessian(self, z, block: int = 200) -> np.ndarray:
        n = self.n_z
        H = np.empty((n, n))
        for start in range(0, n, block):
            E = np.zeros((n, min(block, n - start)))
            E[start + np.arange(E.shape[1]), np.arange(E.shape[1])] = 1.0
            H[:, start:start + E.shape[1]] = self.hvp(z, E)
        return 0.5 * (H + H.T)

    def as_smooth_problem(self):
        from .optimize import SmoothProblem

        return SmoothProblem(self.n_z, self.objective, self.gradient, self.hvp)
