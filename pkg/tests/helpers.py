"""Shared synthetic systems for the test suite."""

import numpy as np

from romopt.fom import ControlVector
from romopt.rom import PodBasis, ReducedModel, simulate_rom


def planted_model(r1=3, r2=4, n_q=2, seed=0, final_time=1.0, n_steps=200):
    """A stable quadratic reduced system with identity bases."""
    rng = np.random.default_rng(seed)

    def stable(r):
        Q, _ = np.linalg.qr(rng.standard_normal((r, r)))
        return -Q @ np.diag(rng.uniform(0.5, 2.0, r)) @ Q.T + 0.3 * rng.standard_normal((r, r))

    basis = lambda r: PodBasis(np.eye(r), np.ones(r), 0.0, 1e-5)  # noqa: E731
    return ReducedModel(basis(r1), basis(r2), stable(r1), stable(r2), 0.2 * rng.standard_normal((r1, r1 * r2)),
                        0.2 * rng.standard_normal((r2, r1 * r2)), rng.standard_normal((r2, n_q)),
                        rng.standard_normal(r1), rng.standard_normal(r2), final_time=final_time, n_steps=n_steps)


def planted_data(model, n_traj=16, seed=1, n_s=20, shared_init=False):
    """Simulate random controls and initial states; derivatives from the exact right-hand side."""
    rng = np.random.default_rng(seed)
    nodes = np.linspace(0.0, model.final_time, n_s)
    U1, U2, dU1, dU2, S, runs = [], [], [], [], [], []
    for _ in range(n_traj):
        z = ControlVector(rng.uniform(0, 2, (model.n_q, n_s)), nodes)
        i1, i2 = rng.standard_normal(model.r1), rng.standard_normal(model.r2)
        if shared_init:
            i1, i2 = model.init1, model.init2
        tr = simulate_rom(model, z, init1=i1, init2=i2)
        q = np.array([np.interp(tr.times, nodes, row) for row in z.q_nodes])
        s = q * q
        d = [model.rhs(tr.u1[:, k], tr.u2[:, k], s[:, k]) for k in range(tr.times.size)]
        U1.append(tr.u1)
        U2.append(tr.u2)
        dU1.append(np.array([a for a, _ in d]).T)
        dU2.append(np.array([b for _, b in d]).T)
        S.append(s)
        runs.append((z, tr))
    cat = lambda xs: np.concatenate(xs, axis=1)  # noqa: E731
    return (cat(U1), cat(U2), cat(dU1), cat(dU2), cat(S)), runs


def rel_err(a, b):
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / np.linalg.norm(b))
