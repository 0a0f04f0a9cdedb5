"""Offline/online pipeline stages with digest-checked artifacts.

Each stage reads artifacts written by earlier stages, writes its own files
under the stage directory and records them (with SHA-256 digests) in
``manifest.json``. A stage whose configuration and inputs are unchanged and
whose outputs are intact is skipped. Failures map to distinct exit codes:
2 for missing inputs, 3 for digest mismatches, 4 for anything else.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, container
from .config import PipelineConfig

logger = logging.getLogger(__name__)

STAGES = ("gen-data", "build-rom", "optimize", "fom-eval", "calibrate", "update", "sample", "report")
UPSTREAM = {
    "gen-data": (),
    "build-rom": ("gen-data",),
    "optimize": ("build-rom",),
    "fom-eval": ("optimize",),
    "calibrate": ("build-rom", "optimize", "fom-eval"),
    "update": ("build-rom", "optimize", "fom-eval", "calibrate"),
    "sample": ("build-rom", "optimize", "fom-eval", "calibrate", "update"),
    "report": ("gen-data", "build-rom", "optimize", "fom-eval", "calibrate", "update", "sample"),
}
EXIT_MISSING, EXIT_DIGEST, EXIT_FAILURE = 2, 3, 4
MANIFEST = "manifest.json"
LOCK = ".romopt.lock"


class PipelineError(Exception):
    exit_code = EXIT_FAILURE


class MissingArtifact(PipelineError):
    exit_code = EXIT_MISSING


class DigestMismatch(PipelineError):
    exit_code = EXIT_DIGEST


class StageFailure(PipelineError):
    exit_code = EXIT_FAILURE


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def thread_limit() -> int:
    raw = os.environ.get("ROMOPT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise PipelineError(f"ROMOPT_THREADS must be a positive integer, got {raw!r}") from exc
    if n < 1:
        raise PipelineError(f"ROMOPT_THREADS must be a positive integer, got {raw!r}")
    return n


def pmap(fn, items, threads: int):
    """Order-preserving map, in worker processes when ``threads > 1``."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(threads, len(items))) as ex:
        return list(ex.map(fn, items))


@dataclass
class StageContext:
    cfg: PipelineConfig
    root: Path
    threads: int = 1
    outputs: list = field(default_factory=list)

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def _record(self, rel: str):
        self.outputs.append(rel)
        side = container.sidecar_path(self.root / rel)
        if side.exists():
            self.outputs.append(str(side.relative_to(self.root)))

    def write_blocks(self, rel: str, blocks: dict, meta: dict | None = None):
        container.write_blocks(self.path(rel), blocks, _jsonable(meta))
        self._record(rel)

    def write_trajectory(self, rel: str, times, fields, meta: dict | None = None):
        container.write_trajectory(self.path(rel), times, fields, _jsonable(meta))
        self._record(rel)

    def write_text(self, rel: str, text: str):
        self.path(rel).write_text(text)
        self.outputs.append(rel)

    def write_json(self, rel: str, obj):
        self.write_text(rel, json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")

    def add_output(self, rel: str):
        self.outputs.append(rel)

    def read_blocks(self, rel: str):
        return container.read_blocks(self.root / rel)

    def read_trajectory(self, rel: str):
        return container.read_trajectory(self.root / rel)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    return x


# -- manifest and locking -------------------------------------------------------------


def load_manifest(root: Path) -> dict:
    p = Path(root) / MANIFEST
    if not p.exists():
        return {"stages": {}}
    with open(p) as fh:
        return json.load(fh)


def _save_manifest(root: Path, manifest: dict):
    tmp = Path(root) / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n")
    os.replace(tmp, Path(root) / MANIFEST)


class _Lock:
    def __init__(self, root: Path):
        self.path = Path(root) / LOCK

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as exc:
            raise StageFailure(f"stage directory is locked by another run ({self.path}); "
                               "remove the lock file if no run is active") from exc
        with os.fdopen(fd, "w") as fh:
            fh.write(f"{os.getpid()}\n")
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


def _verify_files(root: Path, files: dict, owner: str):
    for rel, digest in files.items():
        p = root / rel
        if not p.exists():
            raise MissingArtifact(f"artifact {rel} from stage '{owner}' is missing")
        if file_digest(p) != digest:
            raise DigestMismatch(f"artifact {rel} from stage '{owner}' does not match its recorded digest")


def _params_hash(cfg: PipelineConfig) -> str:
    """Digest of everything but the output location, plus the package version."""
    d = {k: v for k, v in cfg.to_dict().items() if k != "output_dir"}
    d["version"] = __version__
    return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def run_stage(stage: str, cfg: PipelineConfig, stage_dir=None, threads: int | None = None) -> dict:
    """Run one stage (or verify it is up to date); returns the manifest entry."""
    if stage not in STAGES:
        raise PipelineError(f"unknown stage {stage!r}; choose from {', '.join(STAGES)}")
    root = Path(stage_dir if stage_dir is not None else cfg.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    threads = thread_limit() if threads is None else threads
    with _Lock(root):
        manifest = load_manifest(root)
        if manifest.get("scenario", cfg.scenario) != cfg.scenario:
            raise StageFailure(f"stage directory holds a '{manifest['scenario']}' run, config asks for "
                               f"'{cfg.scenario}'")
        stages = manifest.setdefault("stages", {})
        inputs = {}
        for up in UPSTREAM[stage]:
            if up not in stages:
                raise MissingArtifact(f"stage '{stage}' needs the outputs of '{up}'; run it first")
            _verify_files(root, stages[up]["outputs"], up)
            inputs.update(stages[up]["outputs"])
        params = _params_hash(cfg)
        prev = stages.get(stage)
        if prev and prev.get("params") == params and prev.get("inputs") == inputs:
            if all((root / rel).exists() for rel in prev["outputs"]):
                _verify_files(root, prev["outputs"], stage)
                logger.info("stage %s is up to date", stage)
                return dict(prev, status="up-to-date")
        ctx = StageContext(cfg, root, threads)
        t0 = time.perf_counter()
        try:
            summary = STAGE_FUNCS[cfg.scenario][stage](ctx)
        except PipelineError:
            raise
        except Exception as exc:  # noqa: BLE001 - every other failure is a stage failure
            raise StageFailure(f"stage '{stage}' failed: {type(exc).__name__}: {exc}") from exc
        seconds = time.perf_counter() - t0
        entry = {
            "params": params,
            "inputs": inputs,
            "outputs": {rel: file_digest(root / rel) for rel in sorted(set(ctx.outputs))},
            "seconds": seconds,
            "summary": _jsonable(summary),
        }
        stages[stage] = entry
        manifest["scenario"] = cfg.scenario
        manifest["config_hash"] = cfg.block_hash()
        _save_manifest(root, manifest)
        return dict(entry, status="ran")


def run_all(cfg: PipelineConfig, stage_dir=None, threads: int | None = None) -> dict:
    return {s: run_stage(s, cfg, stage_dir, threads) for s in STAGES}


# -- contaminant scenario ----------------------------------------------------------------


def _contaminant_setup(cfg: PipelineConfig):
    from .fom import Grid2D, Physics, ProtectionZone, WindParams, assemble_fom, gaussian_bump

    ph = cfg.physics
    grid = Grid2D(ph.grid_n, ph.grid_n)
    physics = Physics(ph.kappa, ph.kappa, ph.rho)
    u0 = gaussian_bump(grid, amplitude=ph.initial_amplitude)

    def ops(xi):
        return assemble_fom(grid, WindParams(xi), physics, initial_u1=u0, final_time=ph.final_time,
                            n_steps=ph.n_steps)

    return grid, ops(ph.xi_train), ops(ph.xi_test), ProtectionZone.build(grid)


def _control_nodes(cfg):
    return np.linspace(0.0, cfg.physics.final_time, cfg.rom.control_nodes)


def _simulate_task(args):
    from .fom import simulate_fom

    ops, ctrl, n_t = args
    return simulate_fom(ops, ctrl, n_t=n_t)


def save_reduced_model(ctx: StageContext, rel: str, model, extra_meta: dict | None = None):
    blocks = {"V1": model.basis1.V, "V2": model.basis2.V, "sigma1": model.basis1.singular_values,
              "sigma2": model.basis2.singular_values, "A1": model.Ahat1, "A2": model.Ahat2, "R1": model.Rhat1,
              "R2": model.Rhat2, "Phi": model.Phihat, "init1": model.init1, "init2": model.init2}
    if model.scaled_mass is not None:
        blocks["Q"] = model.scaled_mass
    meta = {"lambdas": list(model.lambdas), "final_time": model.final_time, "n_steps": model.n_steps,
            "r1": model.r1, "r2": model.r2, "residual_energy": [model.basis1.residual_energy,
                                                               model.basis2.residual_energy],
            "energy_tol": [model.basis1.energy_tol, model.basis2.energy_tol]}
    meta.update(extra_meta or {})
    ctx.write_blocks(rel, blocks, meta)


def load_reduced_model(path):
    from .rom import PodBasis, ReducedModel

    b, meta = container.read_blocks(path)
    basis1 = PodBasis(b["V1"], b["sigma1"].ravel(), meta["residual_energy"][0], meta["energy_tol"][0])
    basis2 = PodBasis(b["V2"], b["sigma2"].ravel(), meta["residual_energy"][1], meta["energy_tol"][1])
    return ReducedModel(basis1, basis2, b["A1"], b["A2"], b["R1"], b["R2"], b["Phi"], b["init1"].ravel(),
                        b["init2"].ravel(), b.get("Q"), tuple(meta["lambdas"]), meta["final_time"],
                        int(meta["n_steps"]))


def _c_gen_data(ctx):
    from .rom import random_training_controls

    cfg = ctx.cfg
    _, ops_train, _, _ = _contaminant_setup(cfg)
    ctrls = random_training_controls(cfg.seed, cfg.rom.n_training_controls, ops_train.injection_points.shape[0],
                                     cfg.rom.control_nodes, cfg.physics.final_time)
    trajs = pmap(_simulate_task, [(ops_train, c, cfg.physics.n_steps + 1) for c in ctrls], ctx.threads)
    for i, tr in enumerate(trajs):
        ctx.write_trajectory(f"data/train_{i:02d}.romt", tr.times, [tr.u1, tr.u2], {"control": i})
    ctx.write_blocks("data/controls.romt", {"time_nodes": ctrls[0].time_nodes,
                                             **{f"q{i:02d}": c.q_nodes for i, c in enumerate(ctrls)}})
    return {"n_controls": len(ctrls), "n_nodes": int(trajs[0].u1.shape[0]), "n_times": int(trajs[0].n_t)}


def _load_training(ctx):
    from .fom import ControlVector, StateTrajectory
    from .rom import TrainingSet

    cfg = ctx.cfg
    cb, _ = ctx.read_blocks("data/controls.romt")
    nodes = cb["time_nodes"].ravel()
    ctrls, trajs = [], []
    for i in range(cfg.rom.n_training_controls):
        t, (u1, u2), _ = ctx.read_trajectory(f"data/train_{i:02d}.romt")
        trajs.append(StateTrajectory(t, u1, u2))
        ctrls.append(ControlVector(cb[f"q{i:02d}"], nodes))
    return TrainingSet(ctrls, trajs, cfg.physics.xi_train)


def _c_build_rom(ctx):
    from .rom import opinf_fit, select_regularization, weighted_pod

    cfg = ctx.cfg
    _, ops, _, zone = _contaminant_setup(cfg)
    ts = _load_training(ctx)
    b1 = weighted_pod(np.hstack([t.u1 for t in ts.trajectories]), ops.mass, cfg.rom.energy_tol)
    b2 = weighted_pod(np.hstack([t.u2 for t in ts.trajectories]), ops.mass, cfg.rom.energy_tol)
    best, scores = select_regularization(ts, (b1, b2), cfg.rom.lambda_grid, ops.mass)
    model = opinf_fit(ts, (b1, b2), *best, ops.mass).with_scaled_mass(zone.psi, ops.mass)
    score_list = [[l1, l2, (s if np.isfinite(s) else None)] for (l1, l2), s in scores.items()]
    save_reduced_model(ctx, "rom/model.romt", model, {"selection_scores": score_list, "training_seed": cfg.seed})
    return {"r1": model.r1, "r2": model.r2, "lambdas": list(best), "reconstruction_error": scores[best]}


def _rom_problem(ctx):
    from .adjoint import RomControlProblem

    model = load_reduced_model(ctx.root / "rom/model.romt")
    return RomControlProblem(model, _control_nodes(ctx.cfg), gamma=ctx.cfg.physics.gamma)


def _c_optimize(ctx):
    from .optimize import trust_region_newton_cg

    cfg = ctx.cfg
    P = _rom_problem(ctx)
    z0 = np.full(P.n_z, cfg.optimization.z0)
    log = ctx.path("optimize/iterations.jsonl")
    res = trust_region_newton_cg(P.as_smooth_problem(), z0, gtol=cfg.optimization.gtol,
                                 max_iter=cfg.optimization.max_iter, log=log)
    ctx.add_output("optimize/iterations.jsonl")
    meta = {"objective": res.objective, "grad_norm": res.grad_norm, "n_iter": res.n_iter,
            "converged": res.converged, "message": res.message}
    ctx.write_blocks("optimize/z_tilde.romt", {"z": res.z, "time_nodes": P.time_nodes}, meta)
    return {"J_romco_at_ztilde": res.objective, "converged": res.converged, "n_iter": res.n_iter}


def _online_controls(cfg, z_tilde):
    """``z_tilde`` followed by ``n_fom - 1`` seeded relative perturbations of it."""
    rng = np.random.default_rng(cfg.seed + 1000)
    out = [z_tilde]
    for _ in range(cfg.hdsa.n_fom - 1):
        out.append(z_tilde * (1.0 + cfg.hdsa.fom_perturbation * rng.standard_normal(z_tilde.size)))
    return out


def _c_fom_eval(ctx):
    from .fom import ControlVector, fom_objective

    cfg = ctx.cfg
    _, _, ops_test, zone = _contaminant_setup(cfg)
    zb, _ = ctx.read_blocks("optimize/z_tilde.romt")
    nodes = zb["time_nodes"].ravel()
    n_q = ops_test.injection_points.shape[0]
    ctrls = [ControlVector.from_flat(z, n_q, nodes) for z in _online_controls(cfg, zb["z"].ravel())]
    trajs = pmap(_simulate_task, [(ops_test, c, cfg.physics.n_steps + 1) for c in ctrls], ctx.threads)
    Js = []
    for l, (c, tr) in enumerate(zip(ctrls, trajs)):
        J = fom_objective(tr, c, zone, ops_test.mass, cfg.physics.gamma)
        Js.append(J)
        ctx.write_trajectory(f"fom/eval_{l:02d}.romt", tr.times, [tr.u1, tr.u2], {"J": J})
    ctx.write_blocks("fom/controls.romt", {"time_nodes": nodes, **{f"z{l:02d}": c.z for l, c in enumerate(ctrls)}})
    return {"n_fom": len(ctrls), "J_fomco_at_ztilde": Js[0]}


def _c_hdsa_pieces(ctx):
    """ROM problem, online controls and discrepancy data at the HDSA time nodes."""
    from .fom import StateTrajectory
    from .hdsa import discrepancy_data
    from .rom import ReducedTrajectory

    cfg = ctx.cfg
    P = _rom_problem(ctx)
    cb, _ = ctx.read_blocks("fom/controls.romt")
    nodes = np.linspace(0.0, cfg.physics.final_time, cfg.hdsa.n_tau)
    zs, data = [], []
    for l in range(cfg.hdsa.n_fom):
        z = cb[f"z{l:02d}"].ravel()
        t, (u1, u2), _ = ctx.read_trajectory(f"fom/eval_{l:02d}.romt")
        f = P.forward(z)
        m = P.model
        lifted = ReducedTrajectory(P.times, f.X[:, :m.r1].T, f.X[:, m.r1:].T).lift(m)
        data.append(discrepancy_data(StateTrajectory(t, u1, u2), lifted, nodes))
        zs.append(z)
    return P, zs, data, nodes


def _c_calibrate(ctx):
    from .fom import trapezoid_weights
    from .hdsa import (PriorSpec, build_discrepancy_basis, calibrate_posterior, default_alpha_d, default_alpha_p,
                       discrepancy_time_weights, wu_spatial_default)

    cfg = ctx.cfg
    _, _, ops_test, _ = _contaminant_setup(cfg)
    P, zs, data, nodes = _c_hdsa_pieces(ctx)
    basis = build_discrepancy_basis(data, cfg.hdsa.n_tau * len(data), nodes)
    Wu = wu_spatial_default(ops_test.mass, ops_test.stiffness)
    w = discrepancy_time_weights(nodes)
    mz = np.kron(np.ones(P.n_q), trapezoid_weights(P.time_nodes))
    prior = PriorSpec(Wu, w, 1.0 / mz, mz, default_alpha_p(data, Wu, w, basis.r, cfg.hdsa.alpha_p_factor),
                      default_alpha_d(data, Wu, w, cfg.hdsa.alpha_d_factor))
    post = calibrate_posterior(list(zip(zs, data)), basis, prior)
    blocks, meta = post.to_blocks()
    blocks.update({"Vdelta": basis.Vdelta, "time_nodes": nodes, "singular_values": basis.singular_values})
    ctx.write_blocks("hdsa/posterior.romt", blocks, meta)
    return {"r_delta": basis.r, "alpha_p": prior.alpha_p, "alpha_d": prior.alpha_d}


def _load_posterior(ctx, rel):
    from .hdsa import DiscrepancyBasis, DiscrepancyPosterior

    b, meta = ctx.read_blocks(rel)
    post = DiscrepancyPosterior.from_blocks(b, meta)
    basis = DiscrepancyBasis(b["Vdelta"], b["time_nodes"].ravel(), b["singular_values"].ravel())
    return post, basis


def _c_system(ctx, P, basis, z_tilde, eig=None):
    from .fom import trapezoid_weights
    from .hdsa import DiscrepancyAugmentedProblem, SensitivitySystem

    _, _, ops_test, zone = _contaminant_setup(ctx.cfg)
    mz = np.kron(np.ones(P.n_q), trapezoid_weights(P.time_nodes))
    aug = DiscrepancyAugmentedProblem(P, basis, mz, zone.psi**2 * ops_test.mass)
    B = lambda th: aug.mixed_hessian_apply(z_tilde, th)  # noqa: E731
    if eig is None:
        return SensitivitySystem.from_dense(z_tilde, B, P.dense_hessian(z_tilde), ctx.cfg.hdsa.retention_ratio)
    return SensitivitySystem(z_tilde, B, None, eig)


def _c_update(ctx):
    from .fom import ControlVector, fom_objective, simulate_fom
    from .hdsa import update_solution

    cfg = ctx.cfg
    _, _, ops_test, zone = _contaminant_setup(cfg)
    P = _rom_problem(ctx)
    zb, _ = ctx.read_blocks("optimize/z_tilde.romt")
    z_tilde = zb["z"].ravel()
    post, basis = _load_posterior(ctx, "hdsa/posterior.romt")
    system = _c_system(ctx, P, basis, z_tilde)
    z_bar = update_solution(system, post.mean, use_projection=True)
    # verification run at the updated control; not part of the online budget
    c = ControlVector.from_flat(z_bar, P.n_q, P.time_nodes)
    tr = simulate_fom(ops_test, c, n_t=cfg.physics.n_steps + 1)
    J_bar = fom_objective(tr, c, zone, ops_test.mass, cfg.physics.gamma)
    _, _, m0 = ctx.read_trajectory("fom/eval_00.romt")
    J_tilde = float(m0["J"])
    eig = system.eigen
    ctx.write_blocks("hdsa/update.romt", {"z_bar": z_bar, "eigenvalues": eig.eigenvalues,
                                          "eigenvectors": eig.eigenvectors}, {"rank": eig.r})
    ctx.write_trajectory("fom/verify_zbar.romt", tr.times, [tr.u1, tr.u2], {"J": J_bar})
    red = 100.0 * (J_tilde - J_bar) / J_tilde
    return {"J_fomco_at_ztilde": J_tilde, "J_fomco_at_zbar": J_bar, "reduction_pct": red, "rank": eig.r}


def _c_sample(ctx):
    from .hdsa import posterior_control_samples
    from .optimize import EigenDecomposition

    cfg = ctx.cfg
    P = _rom_problem(ctx)
    zb, _ = ctx.read_blocks("optimize/z_tilde.romt")
    z_tilde = zb["z"].ravel()
    post, basis = _load_posterior(ctx, "hdsa/posterior.romt")
    ub, _ = ctx.read_blocks("hdsa/update.romt")
    eig = EigenDecomposition(ub["eigenvalues"].ravel(), ub["eigenvectors"])
    system = _c_system(ctx, P, basis, z_tilde, eig)
    S = posterior_control_samples(post, system, cfg.hdsa.n_samples, cfg.sample_seed, use_projection=True)
    ctx.write_blocks("hdsa/samples.romt", {"samples": S}, {"seed": cfg.sample_seed})
    return {"n_samples": S.shape[0], "mean_pointwise_std": float(S.std(axis=0).mean())}


def _c_report(ctx):
    from .fom import ControlVector, StateTrajectory, zone_integrand
    from . import plotting

    cfg = ctx.cfg
    _, _, ops_test, zone = _contaminant_setup(cfg)
    zb, zmeta = ctx.read_blocks("optimize/z_tilde.romt")
    nodes = zb["time_nodes"].ravel()
    n_q = ops_test.injection_points.shape[0]
    ub, _ = ctx.read_blocks("hdsa/update.romt")
    sb, _ = ctx.read_blocks("hdsa/samples.romt")
    t0, (a1, a2), m0 = ctx.read_trajectory("fom/eval_00.romt")
    t1, (b1, b2), m1 = ctx.read_trajectory("fom/verify_zbar.romt")
    zt = ControlVector.from_flat(zb["z"].ravel(), n_q, nodes)
    zbar = ControlVector.from_flat(ub["z_bar"].ravel(), n_q, nodes)
    f_t = zone_integrand(StateTrajectory(t0, a1, a2), zone, ops_test.mass)
    f_b = zone_integrand(StateTrajectory(t1, b1, b2), zone, ops_test.mass)
    J_t, J_b = float(m0["J"]), float(m1["J"])
    rows = ["t,zone_cost_ztilde,zone_cost_zbar"] + [f"{t!r},{x!r},{y!r}" for t, x, y in zip(t0, f_t, f_b)]
    ctx.write_text("report/objective_vs_time.csv", "\n".join(rows) + "\n")
    S = sb["samples"]
    lo = np.percentile(S, 5, axis=0).reshape(n_q, -1)
    hi = np.percentile(S, 95, axis=0).reshape(n_q, -1)
    header = ["t"] + [f"{k}_{i:02d}" for i in range(n_q) for k in ("ztilde", "zbar", "p05", "p95")]
    lines = [",".join(header)]
    for j, t in enumerate(nodes):
        vals = [t]
        for i in range(n_q):
            vals += [zt.q_nodes[i, j], zbar.q_nodes[i, j], lo[i, j], hi[i, j]]
        lines.append(",".join(repr(float(v)) for v in vals))
    ctx.write_text("report/controls.csv", "\n".join(lines) + "\n")
    report = {
        "scenario": "contaminant",
        "J_romco_at_ztilde": zmeta["objective"],
        "J_fomco_at_ztilde": J_t,
        "J_fomco_at_zbar": J_b,
        "reduction_pct": 100.0 * (J_t - J_b) / J_t,
        "n_fom": cfg.hdsa.n_fom,
        "hessian_rank": int(ub["eigenvalues"].size),
        "n_samples": int(S.shape[0]),
    }
    ctx.write_json("report/report.json", report)
    plotting.contaminant_figures(ctx, t0, f_t, f_b, nodes, zt.q_nodes, zbar.q_nodes, lo, hi)
    return report


# -- fire scenario -----------------------------------------------------------------------


def _fire_scenarios(ctx):
    from .fire import FireScenario

    fc = ctx.cfg.fire
    fuel = None
    if fc.fuel_map is not None:
        p = Path(fc.fuel_map)
        if not p.exists():
            raise MissingArtifact(f"fuel map {p} does not exist")
        fuel = container.read_blocks(p)[0]["fuel"].ravel()
    make = lambda w: FireScenario(wind=w, base_rate=fc.base_rate, fuel=fuel, horizon=fc.horizon,  # noqa: E731
                                  n_obs=fc.n_obs)
    return make(fc.wind_train), make(fc.wind_test)


def _box(b):
    return ((b[0], b[1]), (b[2], b[3]))


def _fire_task(args):
    from .fire import IgnitionPoint, simulate_fire

    z, scenario = args
    return simulate_fire(IgnitionPoint(z), scenario).states


def _f_gen_data(ctx):
    from .flowmap import sample_ignitions

    cfg, fc = ctx.cfg, ctx.cfg.fire
    train_sc, test_sc = _fire_scenarios(ctx)
    z_tr = sample_ignitions(cfg.seed + 1, fc.n_train, _box(fc.train_box))
    z_va = sample_ignitions(cfg.seed + 2, fc.n_validation, _box(fc.train_box)) if fc.n_validation else np.zeros((0, 2))
    z_te = sample_ignitions(cfg.seed + 3, fc.n_test, _box(fc.test_box))
    S = pmap(_fire_task, [(z, train_sc) for z in np.vstack([z_tr, z_va])], ctx.threads)
    blocks = {"ignitions_train": z_tr, "ignitions_validation": z_va}
    for m, s in enumerate(S):
        blocks[f"S{m:02d}"] = s
    ctx.write_blocks("data/fire_train.romt", blocks, {"n_train": fc.n_train, "n_validation": fc.n_validation})
    T = pmap(_fire_task, [(z, test_sc) for z in z_te], ctx.threads)
    idx = np.round(test_sc.obs_times).astype(int)
    tb = {"truth": z_te, "obs_times": test_sc.obs_times}
    for j, s in enumerate(T):
        tb[f"Y{j:02d}"] = s[:, idx]
    ctx.write_blocks("data/fire_test.romt", tb, {"n_test": fc.n_test})
    return {"n_train": fc.n_train, "n_validation": fc.n_validation, "n_test": fc.n_test}


def _f_build_rom(ctx):
    from .flowmap import (TrainSchedule, composition_error, level_set_pod, one_step_error, recurrent_loss,
                          reduced_dataset, train_flowmap)

    cfg, fc, fm = ctx.cfg, ctx.cfg.fire, ctx.cfg.flowmap
    b, _ = ctx.read_blocks("data/fire_train.romt")
    S = [b[f"S{m:02d}"] for m in range(fc.n_train + fc.n_validation)]
    tr, va = S[:fc.n_train], S[fc.n_train:]
    pod = level_set_pod(tr, va if va else tr, fm.pod_tol)
    ds = reduced_dataset(pod.V, tr, va)
    sched = TrainSchedule(fm.epochs, fm.lr_start, fm.lr_end, fm.P, fm.batch_size, cfg.seed, fm.hidden_width,
                          fm.hidden_layers)
    params = train_flowmap(ds, sched)
    split = "validation" if va else "train"
    stats = {"r": pod.r, "one_step_error": one_step_error(params, ds, split),
             "composition_error": composition_error(params, ds, split),
             "validation_loss": recurrent_loss(params, ds, fm.P, split)}
    ctx.write_blocks("rom/pod.romt", {"V": pod.V, "sigma": pod.singular_values},
                     {"residual_energy": pod.residual_energy, "tol": pod.energy_tol})
    blocks, meta = params.to_blocks()
    meta.update(schedule=cfg.to_dict()["flowmap"], seed=cfg.seed, **stats)
    ctx.write_blocks("rom/flowmap.romt", blocks, meta)
    return stats


def _f_load(ctx):
    from .fire import ObservationSet
    from .flowmap import IgnitionRomProblem, MlpParams

    pb, _ = ctx.read_blocks("rom/pod.romt")
    fb, fmeta = ctx.read_blocks("rom/flowmap.romt")
    params = MlpParams.from_blocks(fb, fmeta)
    tb, _ = ctx.read_blocks("data/fire_test.romt")
    times = tb["obs_times"].ravel()
    train_sc, _ = _fire_scenarios(ctx)
    roms = [IgnitionRomProblem(params, pb["V"], ObservationSet(tb[f"Y{j:02d}"], times), train_sc.grid)
            for j in range(ctx.cfg.fire.n_test)]
    return params, pb["V"], tb, roms


def _f_optimize(ctx):
    from .fire import ObservationSet
    from .flowmap import ignition_romco

    cfg = ctx.cfg
    params, V, tb, roms = _f_load(ctx)
    Z, meta = [], []
    for j, rom in enumerate(roms):
        log = ctx.path(f"optimize/iterations_{j:02d}.jsonl")
        obs = ObservationSet(rom.Y, rom.steps.astype(float))
        res = ignition_romco(params, V, obs, cfg.optimization.ignition_start, rom.grid,
                             gtol=cfg.optimization.gtol, max_iter=cfg.optimization.max_iter, log=log)
        ctx.add_output(f"optimize/iterations_{j:02d}.jsonl")
        Z.append(res.z)
        meta.append({"objective": res.objective, "converged": res.converged, "n_iter": res.n_iter})
    ctx.write_blocks("optimize/z_tilde.romt", {"z": np.array(Z)}, {"cases": meta})
    return {"converged": all(m["converged"] for m in meta)}


def _rel_misfit(Y_model, Y):
    return float(np.sum((Y_model - Y) ** 2) / np.sum(Y**2))


def _f_fom_eval(ctx):
    cfg = ctx.cfg
    if cfg.hdsa.n_fom != 1:
        raise ValueError("the fire scenario uses exactly one high-fidelity run per test case (hdsa.n_fom = 1)")
    _, test_sc = _fire_scenarios(ctx)
    zb, _ = ctx.read_blocks("optimize/z_tilde.romt")
    tb, _ = ctx.read_blocks("data/fire_test.romt")
    idx = np.round(test_sc.obs_times).astype(int)
    states = pmap(_fire_task, [(z, test_sc) for z in zb["z"]], ctx.threads)
    mis = []
    for j, s in enumerate(states):
        Y = s[:, idx]
        mis.append(_rel_misfit(Y, tb[f"Y{j:02d}"]))
        ctx.write_blocks(f"fom/eval_{j:02d}.romt", {"Y": Y}, {"relative_misfit": mis[-1]})
    return {"relative_misfit_ztilde": mis}


def _f_calibrate(ctx):
    from .fire import ObservationSet
    from .flowmap import calibrate_ignition_discrepancy

    cfg = ctx.cfg
    _, _, tb, roms = _f_load(ctx)
    zb, _ = ctx.read_blocks("optimize/z_tilde.romt")
    times = tb["obs_times"].ravel()
    out = []
    for j, rom in enumerate(roms):
        fb, _ = ctx.read_blocks(f"fom/eval_{j:02d}.romt")
        cal = calibrate_ignition_discrepancy(rom, zb["z"][j], ObservationSet(fb["Y"], times),
                                             cfg.hdsa.alpha_p_factor, cfg.hdsa.alpha_d_factor,
                                             cfg.hdsa.length_scale, base_rate=cfg.fire.base_rate)
        blocks, meta = cal.posterior.to_blocks()
        blocks.update({"Vdelta": cal.basis.Vdelta, "time_nodes": cal.basis.time_nodes,
                       "singular_values": cal.basis.singular_values, "origin": cal.origin})
        meta.update(cal.meta)
        ctx.write_blocks(f"hdsa/posterior_{j:02d}.romt", blocks, meta)
        out.append(cal.meta)
    return {"cases": out}


def _f_calibration(ctx, j):
    from .flowmap import IgnitionCalibration

    post, basis = _load_posterior(ctx, f"hdsa/posterior_{j:02d}.romt")
    b, meta = ctx.read_blocks(f"hdsa/posterior_{j:02d}.romt")
    return IgnitionCalibration(post, basis, b["origin"].ravel(), {k: meta[k] for k in ("r_delta", "alpha_p",
                                                                                        "alpha_d", "length_scale")})


def _f_updates(ctx):
    from .flowmap import ignition_update

    _, _, _, roms = _f_load(ctx)
    zb, _ = ctx.read_blocks("optimize/z_tilde.romt")
    return [ignition_update(rom, zb["z"][j], _f_calibration(ctx, j)) for j, rom in enumerate(roms)]


def _f_update(ctx):
    _, test_sc = _fire_scenarios(ctx)
    tb, _ = ctx.read_blocks("data/fire_test.romt")
    ups = _f_updates(ctx)
    Zbar = np.array([u.z_bar for u in ups])
    idx = np.round(test_sc.obs_times).astype(int)
    # verification runs at the updated estimates; not part of the online budget
    states = pmap(_fire_task, [(z, test_sc) for z in Zbar], ctx.threads)
    mis = [_rel_misfit(s[:, idx], tb[f"Y{j:02d}"]) for j, s in enumerate(states)]
    H = np.array([u.system.H for u in ups]).reshape(len(ups), 4)
    ctx.write_blocks("hdsa/update.romt", {"z_bar": Zbar, "hessians": H}, {"relative_misfit_zbar": mis})
    return {"relative_misfit_zbar": mis}


def _f_sample(ctx):
    from .hdsa import confidence_ellipse

    cfg = ctx.cfg
    ups = _f_updates(ctx)
    blocks, ell = {}, []
    for j, u in enumerate(ups):
        S = u.samples(cfg.hdsa.n_samples, cfg.sample_seed + j)
        blocks[f"samples_{j:02d}"] = S
        e = confidence_ellipse(samples=S)
        ell.append({"center": e.center, "semi_axes": e.semi_axes, "rotation": e.rotation, "level": e.level})
    ctx.write_blocks("hdsa/samples.romt", blocks, {"ellipses": ell, "seed": cfg.sample_seed})
    return {"ellipses": ell}


def _f_report(ctx):
    from .hdsa import Ellipse
    from . import plotting

    tb, _ = ctx.read_blocks("data/fire_test.romt")
    zb, _ = ctx.read_blocks("optimize/z_tilde.romt")
    ub, umeta = ctx.read_blocks("hdsa/update.romt")
    sb, smeta = ctx.read_blocks("hdsa/samples.romt")
    truth, Zt, Zb = tb["truth"], zb["z"], ub["z_bar"]
    n = truth.shape[0]
    mis_t = [float(ctx.read_blocks(f"fom/eval_{j:02d}.romt")[1]["relative_misfit"]) for j in range(n)]
    mis_b = umeta["relative_misfit_zbar"]
    err_t = np.linalg.norm(Zt - truth, axis=1)
    err_b = np.linalg.norm(Zb - truth, axis=1)
    ells = [Ellipse(np.asarray(e["center"]), np.asarray(e["semi_axes"]), e["rotation"], e["level"])
            for e in smeta["ellipses"]]
    inside = [bool(e.contains(truth[j])[0]) for j, e in enumerate(ells)]
    rows = ["case,misfit_rel_ztilde_pct,misfit_rel_zbar_pct,misfit_reduction_pct,error_ztilde_m,error_zbar_m,"
            "error_reduction_pct"]
    for j in range(n):
        rows.append(",".join([str(j)] + [repr(float(v)) for v in (
            100 * mis_t[j], 100 * mis_b[j], 100 * (mis_t[j] - mis_b[j]) / mis_t[j], err_t[j], err_b[j],
            100 * (err_t[j] - err_b[j]) / err_t[j])]))
    ctx.write_text("report/fire_table.csv", "\n".join(rows) + "\n")
    erows = ["case,center_x,center_y,semi_major,semi_minor,rotation_deg,level,contains_truth"]
    for j, e in enumerate(ells):
        erows.append(",".join([str(j)] + [repr(float(v)) for v in (*e.center, *e.semi_axes, np.degrees(e.rotation),
                                                                    e.level)] + [str(inside[j]).lower()]))
    ctx.write_text("report/ellipses.csv", "\n".join(erows) + "\n")
    report = {
        "scenario": "fire",
        "relative_misfit_ztilde": mis_t,
        "relative_misfit_zbar": mis_b,
        "error_ztilde_m": err_t,
        "error_zbar_m": err_b,
        "mean_error_ztilde_m": float(err_t.mean()),
        "mean_error_zbar_m": float(err_b.mean()),
        "error_reduction_pct": float(100 * (err_t.mean() - err_b.mean()) / err_t.mean()),
        "truth_inside_ellipse": inside,
    }
    ctx.write_json("report/report.json", report)
    plotting.fire_figure(ctx, truth, Zt, Zb, [sb[f"samples_{j:02d}"] for j in range(n)], ells)
    return report


STAGE_FUNCS = {
    "contaminant": {"gen-data": _c_gen_data, "build-rom": _c_build_rom, "optimize": _c_optimize,
                    "fom-eval": _c_fom_eval, "calibrate": _c_calibrate, "update": _c_update, "sample": _c_sample,
                    "report": _c_report},
    "fire": {"gen-data": _f_gen_data, "build-rom": _f_build_rom, "optimize": _f_optimize, "fom-eval": _f_fom_eval,
             "calibrate": _f_calibrate, "update": _f_update, "sample": _f_sample, "report": _f_report},
}
