"""Acceptance criteria, one test each; every test prints a single pass/fail line."""

import json
import time

import numpy as np
import pytest
from helpers import planted_data, planted_model, rel_err
from test_hdsa import _dense_posterior, _prior, _quadratic_system

from conftest import rel, run_pipeline
from romopt import container
from romopt.fire import IgnitionPoint, fire_grid, observe
from romopt.flowmap import (TEST_BOX, FlowmapDataset, ignition_romco, mlp_forward, recurrent_loss, rollout,
                            rollout_vjp, sample_ignitions)
from romopt.hdsa import (DiscrepancyBasis, DiscrepancyLayout, SensitivitySystem, calibrate_posterior,
                         update_solution)
from romopt.pipeline import MANIFEST, StageContext, _f_updates, load_manifest
from romopt.rom import fit_operators, weighted_pod


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return emit


def _stage_seconds(root):
    return sum(e["seconds"] for e in load_manifest(root)["stages"].values())


def test_criterion_01_contaminant_update(contaminant_run, verdict):
    root, _ = contaminant_run
    rep = json.loads((root / "report/report.json").read_text())
    n_eval = len(list((root / "fom").glob("eval_*.romt")))
    secs = _stage_seconds(root)
    ok = rep["reduction_pct"] >= 15.0 and rep["n_fom"] == 1 and n_eval == 1 and secs <= 600
    verdict(1, ok, f"FOMCO objective {rep['J_fomco_at_ztilde']:.4g} -> {rep['J_fomco_at_zbar']:.4g} "
                   f"({rep['reduction_pct']:.1f}% reduction, N={n_eval}, {secs:.0f} s)")
    assert ok


def test_criterion_02_adjoint_exactness(rom_problem, verdict):
    P, z_opt = rom_problem
    t0 = time.perf_counter()
    rng = np.random.default_rng(20)
    errs = []
    for _ in range(10):
        z = z_opt + 0.3 * rng.standard_normal(P.n_z)
        d = rng.standard_normal(P.n_z)
        eps = 1e-5
        fd = (P.objective(z + eps * d) - P.objective(z - eps * d)) / (2 * eps)
        errs.append(abs(P.gradient(z) @ d - fd) / abs(fd))
    v, w = rng.standard_normal(P.n_z), rng.standard_normal(P.n_z)
    a, b = w @ P.hvp(z_opt, v), v @ P.hvp(z_opt, w)
    sym = abs(a - b) / max(abs(a), abs(b))
    secs = time.perf_counter() - t0
    ok = max(errs) <= 1e-5 and sym <= 1e-8 and secs <= 60
    verdict(2, ok, f"max gradient error {max(errs):.2e}, Hvp symmetry {sym:.2e}, {secs:.1f} s")
    assert ok


def test_criterion_03_operator_inference(verdict):
    model = planted_model(r1=3, r2=4)
    data, _ = planted_data(model)
    got = fit_operators(*data, 0.0, 0.0)
    ref = (model.Ahat1, model.Rhat1, model.Ahat2, model.Rhat2, model.Phihat)
    err = max(rel_err(g, r) for g, r in zip(got, ref))
    a = fit_operators(*data, 0.1, 10.0)
    b = fit_operators(*[d.copy() for d in data], 0.1, 10.0)
    same = all(x.tobytes() == y.tobytes() for x, y in zip(a, b))
    finite = all(np.all(np.isfinite(x)) for x in a)
    ok = err <= 1e-8 and same and finite
    verdict(3, ok, f"planted recovery error {err:.2e}; (0.1, 10) fit finite={finite}, bit-identical={same}")
    assert ok


def test_criterion_04_pod(verdict):
    rng = np.random.default_rng(21)
    U = rng.standard_normal((50, 30)) @ np.diag(np.logspace(0, -6, 30))
    m = rng.uniform(0.5, 2.0, 50)
    b = weighted_pod(U, m, 1e-5)
    orth = np.max(np.abs(b.V.T @ (m[:, None] * b.V) - np.eye(b.r)))
    s = np.linalg.svd(U, compute_uv=False)
    e = s**2 / np.sum(s**2)
    rule = True
    for tol in (1e-1, 1e-3, 1e-5, 1e-8):
        r = next(r for r in range(1, 31) if e[r:].sum() < tol)
        rule &= weighted_pod(U, np.ones(50), tol).r == r
    ok = orth <= 1e-10 and rule
    verdict(4, ok, f"max |V^T M V - I| = {orth:.2e}; truncation rank matches SVD oracle: {rule}")
    assert ok


def test_criterion_05_posterior_oracle(verdict):
    rng = np.random.default_rng(22)
    n, r, n_z, n_tau = 5, 1, 2, 3
    nodes = np.linspace(0, 1, n_tau)
    V, _ = np.linalg.qr(rng.standard_normal((n, r)))
    basis = DiscrepancyBasis(V, nodes)
    lay = DiscrepancyLayout(r, n_z, n_tau)
    prior = _prior(rng, n, n_z, nodes)
    data = [(rng.standard_normal(n_z), rng.standard_normal((n, n_tau))) for _ in range(2)]
    post = calibrate_posterior(data, basis, prior)
    mean, cov, Wth = _dense_posterior(data, basis, prior, lay)
    e_mean = np.max(np.abs(post.mean - mean)) / np.abs(mean).max()
    e_cov = np.max(np.abs(post.covariance_dense() - cov)) / np.abs(cov).max()
    diff = post.precision.to_dense() - Wth
    lam = np.linalg.eigvalsh(0.5 * (diff + diff.T)).min()
    ok = lay.n_theta <= 10 and e_mean <= 1e-10 and e_cov <= 1e-10 and lam >= -1e-10 * np.abs(diff).max()
    verdict(5, ok, f"n_theta={lay.n_theta}: mean error {e_mean:.1e}, covariance error {e_cov:.1e}, "
                   f"min eig(posterior - prior precision) {lam:.1e}")
    assert ok


def test_criterion_06_update_on_quadratics(verdict):
    rng, H, C, b, z_tilde = _quadratic_system(n=20)
    theta = rng.standard_normal(C.shape[1])
    z_star = np.linalg.solve(H, b - C @ theta)
    upd = update_solution(SensitivitySystem.from_dense(z_tilde, lambda th: C @ th, H, retention_ratio=None),
                          theta, use_projection=False)
    err = np.linalg.norm(upd - z_star)
    scaled = update_solution(SensitivitySystem(z_tilde, lambda th: 3 * C @ th, 3 * H), theta,
                             use_projection=False)
    inv = np.linalg.norm(scaled - upd) / np.linalg.norm(upd)
    ok = err <= 1e-8 and inv <= 1e-10
    verdict(6, ok, f"n_z=20: update error {err:.1e}, scaling invariance {inv:.1e}")
    assert ok


def test_criterion_07_fire_inversion(fire_run, fire_cfg, flowmap_model, verdict):
    root, _ = fire_run
    params, V, train_sc = flowmap_model
    grid = fire_grid()
    # in distribution: training wind, start 424 m from the truth
    truths = sample_ignitions(fire_cfg.seed + 3, 5, TEST_BOX)
    in_err = []
    for z in truths:
        obs = observe(IgnitionPoint(z), train_sc)
        res = ignition_romco(params, V, obs, z + 300.0, grid)
        in_err.append(float(np.linalg.norm(res.z - z)))
    rep = json.loads((root / "report/report.json").read_text())
    n_eval = len(list((root / "fom").glob("eval_*.romt")))
    secs = _stage_seconds(root)
    ok = (max(in_err) <= 60.0 and rep["error_reduction_pct"] >= 15.0 and n_eval == fire_cfg.fire.n_test
          and fire_cfg.hdsa.n_fom == 1 and secs <= 900)
    verdict(7, ok, f"in-distribution max error {max(in_err):.1f} m; test wind mean error "
                   f"{rep['mean_error_ztilde_m']:.0f} -> {rep['mean_error_zbar_m']:.0f} m "
                   f"({rep['error_reduction_pct']:.1f}% reduction, N=1 per case, {secs:.0f} s)")
    assert ok


def test_criterion_08_ellipse_calibration(fire_run, fire_cfg, verdict):
    root, _ = fire_run
    ctx = StageContext(fire_cfg, root)
    update = _f_updates(ctx)[0]
    truth = container.read_blocks(root / "data/fire_test.romt")[0]["truth"][0]
    hits = sum(bool(update.ellipse(fire_cfg.hdsa.n_samples, seed).contains(truth)[0]) for seed in range(20))
    ok = hits >= 15
    verdict(8, ok, f"truth inside the 95% ellipse in {hits}/20 seeded repetitions")
    assert ok


def test_criterion_09_flowmap(fire_run, flowmap_model, verdict):
    root, _ = fire_run
    params, V, _ = flowmap_model
    meta = container.read_sidecar(root / "rom/flowmap.romt")
    rng = np.random.default_rng(23)
    D = rng.standard_normal((3, 10, V.shape[1]))
    fast = recurrent_loss(params, FlowmapDataset(D, ("train",) * 3), 3)
    slow = 0.0
    for m in range(3):
        for k in range(9):
            u = D[m, k]
            for p in range(1, 4):
                u = u + mlp_forward(params, u)
                if k + p <= 9:
                    slow += float(np.sum((u - D[m, k + p]) ** 2))
    loop_err = abs(fast - slow) / slow
    grid = fire_grid()
    G = rng.standard_normal((8, V.shape[1]))
    z = np.array([1456.7, 2098.1])
    loss = lambda q, zz: float(np.sum(G * rollout(q, V, zz, 7, grid)))  # noqa: E731
    dz, dp = rollout_vjp(params, V, z, 7, G, grid)
    fd_z = [(loss(params, z + e) - loss(params, z - e)) / 2e-2 for e in 1e-2 * np.eye(2)]
    x = params.flat()
    d = rng.standard_normal(x.size)
    fd_p = (loss(params.with_flat(x + 1e-6 * d), z) - loss(params.with_flat(x - 1e-6 * d), z)) / 2e-6
    g_err = max(rel(dz, fd_z), abs(fd_p - dp @ d) / abs(dp @ d))
    ok = meta["one_step_error"] <= 0.05 and loop_err <= 1e-12 and g_err <= 1e-4
    verdict(9, ok, f"validation one-step error {100 * meta['one_step_error']:.2f}% (composition "
                   f"{100 * meta['composition_error']:.2f}%), loop oracle {loop_err:.1e}, "
                   f"rollout gradient {g_err:.1e}")
    assert ok


def test_criterion_10_reproducibility(tmp_path, contaminant_run, contaminant_cfg, verdict):
    root, _ = contaminant_run
    other = tmp_path / "again"
    run_pipeline(contaminant_cfg, other)
    files = lambda r: sorted(str(p.relative_to(r)) for p in r.rglob("*") if p.is_file())  # noqa: E731
    a, b = files(root), files(other)
    differ = [f for f in a if f != MANIFEST and (root / f).read_bytes() != (other / f).read_bytes()]
    ok = a == b and not differ
    verdict(10, ok, f"{len(a) - 1} artifacts compared, {len(differ)} differ"
                    + (f" ({', '.join(differ[:3])})" if differ else ""))
    assert ok
