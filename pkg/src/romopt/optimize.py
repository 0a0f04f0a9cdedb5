"""Trust-region solvers and Lanczos eigenpairs for smooth unconstrained problems."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

logger = logging.getLogger(__name__)


class GradientCheckError(RuntimeError):
    """The gradient disagrees with finite differences of the objective."""


class EigenConvergenceError(RuntimeError):
    pass


@dataclass
class SmoothProblem:
    dimension: int
    objective: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    hvp: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None

    def check_gradient(self, z=None, n_probes: int = 5, eps: float = 1e-5, rtol: float = 1e-5, seed: int = 0):
        """Compare ``d.g`` against central differences; raise on disagreement.

        The tolerance has an absolute floor at the round-off level of the
        difference quotient, ``1e3 * eps_mach * |J| / eps``.
        Returns the list of relative errors.
        """
        rng = np.random.default_rng(seed)
        z = rng.standard_normal(self.dimension) if z is None else np.asarray(z, dtype=float)
        J = float(self.objective(z))
        g = np.asarray(self.gradient(z))
        floor = 1e3 * np.finfo(float).eps * max(abs(J), np.finfo(float).tiny) / eps
        errs = []
        for _ in range(n_probes):
            d = rng.standard_normal(self.dimension)
            d /= np.linalg.norm(d)
            fd = (self.objective(z + eps * d) - self.objective(z - eps * d)) / (2 * eps)
            an = float(g @ d)
            diff = abs(fd - an)
            scale = max(abs(fd), abs(an))
            errs.append(diff / scale if scale > 0 else 0.0)
            if diff > rtol * scale + floor:
                raise GradientCheckError(f"directional derivative {an:.6e} vs finite difference {fd:.6e}")
        return errs


@dataclass
class OptimizeResult:
    z: np.ndarray
    objective: float
    grad_norm: float
    n_iter: int
    converged: bool
    message: str
    history: list = field(default_factory=list)


class _IterLog:
    def __init__(self, sink):
        self._own = isinstance(sink, (str, bytes)) or hasattr(sink, "__fspath__")
        self._fh = open(sink, "w") if self._own else sink
        self.records = []

    def write(self, **rec):
        rec = {k: (float(v) if isinstance(v, (np.floating, float)) else v) for k, v in rec.items()}
        self.records.append(rec)
        if self._fh is not None:
            self._fh.write(json.dumps(rec) + "\n")

    def close(self):
        if self._own:
            self._fh.close()


def default_gtol(J0: float) -> float:
    return 1e-8 * (1.0 + abs(J0))


def _steihaug(g, hvp, delta, tol, max_iter):
    """Approximately minimize ``g.p + p.Hp/2`` over ``||p|| <= delta``."""
    p = np.zeros_like(g)
    r = g.copy()
    d = -r
    rr = r @ r
    if np.sqrt(rr) <= tol:
        return p, 0, False
    for it in range(1, max_iter + 1):
        Hd = hvp(d)
        dHd = d @ Hd
        if dHd <= 0:
            return p + _to_boundary(p, d, delta) * d, it, True
        alpha = rr / dHd
        p_next = p + alpha * d
        if np.linalg.norm(p_next) >= delta:
            return p + _to_boundary(p, d, delta) * d, it, True
        p = p_next
        r = r + alpha * Hd
        rr_new = r @ r
        if np.sqrt(rr_new) <= tol:
            return p, it, False
        d = -r + (rr_new / rr) * d
        rr = rr_new
    return p, max_iter, False


def _to_boundary(p, d, delta):
    a = d @ d
    b = 2 * (p @ d)
    c = p @ p - delta**2
    return (-b + np.sqrt(max(b * b - 4 * a * c, 0.0))) / (2 * a)


def _trust_region(problem, z0, gtol, max_iter, delta0, log, self_test, model_step):
    z = np.asarray(z0, dtype=float).copy()
    J = float(problem.objective(z))
    g = np.asarray(problem.gradient(z), dtype=float)
    gtol = default_gtol(J) if gtol is None else float(gtol)
    # at an already stationary start the relative check only measures noise
    if self_test and np.linalg.norm(g) > gtol:
        problem.check_gradient(z)
    delta = float(delta0) if delta0 is not None else max(1.0, np.linalg.norm(z))
    delta_max = 1e4 * delta
    iterlog = _IterLog(log)
    gnorm = np.linalg.norm(g)
    iterlog.write(iter=0, objective=J, grad_norm=gnorm, radius=delta, cg_iters=0)
    it = 0
    converged = gnorm <= gtol
    try:
        while not converged and it < max_iter:
            it += 1
            p, inner, hit, pred = model_step(z, g, delta)
            if pred <= 0 or not np.all(np.isfinite(p)):
                delta *= 0.25
                iterlog.write(iter=it, objective=J, grad_norm=gnorm, radius=delta, cg_iters=inner)
                if delta < 1e-14 * max(1.0, np.linalg.norm(z)):
                    break
                continue
            z_new = z + p
            try:
                J_new = float(problem.objective(z_new))
            except (FloatingPointError, RuntimeError):
                J_new = np.inf
            ared = J - J_new
            rho = ared / pred if np.isfinite(J_new) else -np.inf
            g_new = None
            if np.isfinite(J_new) and pred <= 100 * np.finfo(float).eps * max(1.0, abs(J)):
                # decrease is at round-off level: judge the step by the gradient instead
                g_new = np.asarray(problem.gradient(z_new), dtype=float)
                ok = np.linalg.norm(g_new) < gnorm
                rho, ared = (1.0, max(ared, 0.0)) if ok else (-np.inf, ared)
            if rho < 0.25:
                delta = 0.25 * np.linalg.norm(p)
            elif rho > 0.75 and hit:
                delta = min(2.0 * delta, delta_max)
            if rho > 0.1 and ared >= 0:
                if g_new is None:
                    g_new = np.asarray(problem.gradient(z_new), dtype=float)
                model_step.accept(z, z_new, g, g_new)
                z, J, g = z_new, J_new, g_new
                gnorm = np.linalg.norm(g)
                converged = gnorm <= gtol
            else:
                model_step.reject(z, z_new, g, problem)
            iterlog.write(iter=it, objective=J, grad_norm=gnorm, radius=delta, cg_iters=inner)
            if delta < 1e-14 * max(1.0, np.linalg.norm(z)):
                break
    finally:
        iterlog.close()
    if converged:
        msg = "gradient tolerance reached"
    else:
        msg = "iteration budget exhausted" if it >= max_iter else "trust region collapsed"
    if not converged:
        logger.warning("optimizer stopped without convergence: %s (|g| = %.3e)", msg, gnorm)
    return OptimizeResult(z, J, float(gnorm), it, bool(converged), msg, iterlog.records)


class _NewtonCGStep:
    def __init__(self, problem, max_cg, cg_rtol=None):
        self.problem = problem
        self.max_cg = max_cg
        self.cg_rtol = cg_rtol

    def __call__(self, z, g, delta):
        hvp = lambda v: np.asarray(self.problem.hvp(z, v), dtype=float)  # noqa: E731
        gnorm = np.linalg.norm(g)
        eta = min(0.5, np.sqrt(gnorm)) if self.cg_rtol is None else self.cg_rtol
        tol = eta * gnorm
        p, inner, hit = _steihaug(g, hvp, delta, tol, self.max_cg)
        pred = -(g @ p + 0.5 * p @ hvp(p)) if inner else 0.0
        return p, inner, hit, pred

    def accept(self, *args):
        pass

    def reject(self, *args):
        pass


def trust_region_newton_cg(problem: SmoothProblem, z0, gtol: float | None = None, max_iter: int = 100,
                           delta0: float | None = None, max_cg: int | None = None, log=None,
                           self_test: bool = True, cg_rtol: float | None = None) -> OptimizeResult:
    """Trust-region Newton method with a Steihaug-CG inner solver.

    ``gtol`` defaults to ``1e-8 (1 + |J(z0)|)``. ``log`` is a path or a
    text stream receiving one JSON record per outer iteration. The inner
    solve stops at relative residual ``cg_rtol``, or at
    ``min(0.5, sqrt(|g|))`` when it is None.
    """
    if problem.hvp is None:
        raise ValueError("trust-region Newton-CG needs Hessian-vector products")
    step = _NewtonCGStep(problem, max_cg or 2 * problem.dimension, cg_rtol)
    return _trust_region(problem, z0, gtol, max_iter, delta0, log, self_test, step)


class _BFGSStep:
    def __init__(self, n, curvature_tol):
        self.B = None
        self.n = n
        self.curvature_tol = curvature_tol
        self.skipped = 0

    def __call__(self, z, g, delta):
        if self.B is None:
            self.B = np.eye(self.n)
        p = _dogleg(self.B, g, delta)
        hit = np.linalg.norm(p) >= delta * (1 - 1e-12)
        pred = -(g @ p + 0.5 * p @ self.B @ p)
        return p, 1, hit, pred

    def _update(self, s, y):
        sy = s @ y
        if sy <= self.curvature_tol:
            self.skipped += 1
            return
        if not self._scaled:
            self.B = (y @ y / sy) * np.eye(self.n)
            self._scaled = True
        Bs = self.B @ s
        self.B = self.B - np.outer(Bs, Bs) / (s @ Bs) + np.outer(y, y) / sy
        self.B = 0.5 * (self.B + self.B.T)

    _scaled = False

    def accept(self, z, z_new, g, g_new):
        self._update(z_new - z, g_new - g)

    def reject(self, z, z_new, g, problem):
        # rejected trial points still carry curvature information
        try:
            g_new = np.asarray(problem.gradient(z_new), dtype=float)
        except (FloatingPointError, RuntimeError):
            return
        if np.all(np.isfinite(g_new)):
            self._update(z_new - z, g_new - g)


def _dogleg(B, g, delta):
    pb = -np.linalg.solve(B, g)
    if np.linalg.norm(pb) <= delta:
        return pb
    gBg = g @ B @ g
    pu = -(g @ g) / gBg * g
    if np.linalg.norm(pu) >= delta:
        return -delta / np.linalg.norm(g) * g
    d = pb - pu
    return pu + _to_boundary(pu, d, delta) * d


def quasi_newton_minimize(problem: SmoothProblem, z0, gtol: float | None = None, max_iter: int = 200,
                          delta0: float | None = None, curvature_tol: float = 1e-12, log=None,
                          self_test: bool = True) -> OptimizeResult:
    """Dogleg trust-region method with a dense BFGS Hessian approximation.

    Updates with ``s.y <= curvature_tol`` are skipped, which keeps the
    approximation symmetric positive definite.
    """
    step = _BFGSStep(problem.dimension, curvature_tol)
    res = _trust_region(problem, z0, gtol, max_iter, delta0, log, self_test, step)
    res.history.append({"bfgs_skipped": step.skipped})
    return res


@dataclass
class EigenDecomposition:
    """Leading eigenpairs, sorted in decreasing order."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    n_calls: int = 0

    @property
    def r(self) -> int:
        return self.eigenvalues.size

    @property
    def decay_ratio(self) -> float:
        return float(self.eigenvalues[-1] / self.eigenvalues[0])

    def projector(self) -> np.ndarray:
        W = self.eigenvectors
        return W @ W.T

    def project(self, v):
        W = self.eigenvectors
        return W @ (W.T @ v)

    def truncate(self, r: int) -> "EigenDecomposition":
        return EigenDecomposition(self.eigenvalues[:r].copy(), self.eigenvectors[:, :r].copy(), self.n_calls)

    def apply_inverse(self, v):
        """``sum_i w_i w_i^T v / lambda_i`` over the retained pairs."""
        if np.any(self.eigenvalues <= 0):
            raise ValueError("Hessian is not positive on the retained eigenspace")
        W = self.eigenvectors
        c = W.T @ v
        return W @ (c / (self.eigenvalues[:, None] if c.ndim == 2 else self.eigenvalues))


def retained_rank(eigenvalues, ratio: float = 1e-2) -> int:
    """Smallest ``r`` with ``lambda_r / lambda_1 <= ratio`` (all of them if none)."""
    lam = np.asarray(eigenvalues, dtype=float)
    hits = np.nonzero(lam / lam[0] <= ratio)[0]
    return int(hits[0] + 1) if hits.size else lam.size


def eigen_from_dense(H: np.ndarray, r: int | None = None) -> EigenDecomposition:
    lam, W = np.linalg.eigh(0.5 * (H + H.T))
    lam, W = lam[::-1], W[:, ::-1]
    W = W * np.where(W[np.argmax(np.abs(W), axis=0), np.arange(W.shape[1])] < 0, -1.0, 1.0)
    r = lam.size if r is None else r
    return EigenDecomposition(lam[:r].copy(), W[:, :r].copy(), 0)


def leading_eigenpairs(hvp: Callable[[np.ndarray], np.ndarray], n: int, r: int, tol: float = 1e-10,
                       seed: int = 0, max_calls: int | None = None) -> EigenDecomposition:
    """Lanczos with full reorthogonalization for the ``r`` largest eigenpairs.

    Converged when every retained Ritz residual ``||H w - lambda w||`` is at
    most ``tol * |lambda_1|``. Raises after ``max_calls`` (default ``4 r n``)
    oracle calls without convergence.
    """
    if not 1 <= r <= n:
        raise ValueError(f"need 1 <= r <= n, got r={r}, n={n}")
    max_calls = 4 * r * n if max_calls is None else max_calls
    rng = np.random.default_rng(seed)
    Q = np.zeros((n, n))
    alpha, beta = [], []
    q = rng.standard_normal(n)
    q /= np.linalg.norm(q)
    calls = 0
    j = 0
    while True:
        Q[:, j] = q
        w = np.asarray(hvp(q), dtype=float)
        calls += 1
        a = q @ w
        w = w - a * q - (beta[-1] * Q[:, j - 1] if j > 0 else 0.0)
        for _ in range(2):
            w -= Q[:, : j + 1] @ (Q[:, : j + 1].T @ w)
        alpha.append(a)
        b = np.linalg.norm(w)
        m = j + 1
        if m >= r:
            T = np.diag(alpha) + np.diag(beta, 1) + np.diag(beta, -1)
            theta, S = np.linalg.eigh(T)
            order = np.argsort(theta)[::-1][:r]
            resid = np.abs(b * S[-1, order])
            scale = max(abs(theta[order[0]]), np.finfo(float).tiny)
            if m == n or np.all(resid <= tol * scale):
                W = Q[:, :m] @ S[:, order]
                W, _ = np.linalg.qr(W)
                # Rayleigh-Ritz on the final vectors to clean up residual drift
                HW = np.column_stack([hvp(W[:, i]) for i in range(r)])
                calls += r
                lam, U = np.linalg.eigh(0.5 * (W.T @ HW + HW.T @ W))
                idx = np.argsort(lam)[::-1]
                W = W @ U[:, idx]
                W = W * np.where(W[np.argmax(np.abs(W), axis=0), np.arange(r)] < 0, -1.0, 1.0)
                return EigenDecomposition(lam[idx], W, calls)
        if calls >= max_calls:
            raise EigenConvergenceError(f"Lanczos did not converge within {max_calls} operator applications")
        if b <= 1e-13 * max(1.0, abs(a)):
            # invariant subspace found: continue with a fresh orthogonal direction
            q = rng.standard_normal(n)
            for _ in range(2):
                q -= Q[:, :m] @ (Q[:, :m].T @ q)
            q /= np.linalg.norm(q)
            beta.append(0.0)
        else:
            q = w / b
            beta.append(b)
        j += 1
