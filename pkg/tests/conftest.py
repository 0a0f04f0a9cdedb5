import os

os.environ.setdefault("ROMOPT_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402
from hypothesis import settings  # noqa: E402

from romopt.config import parse_config_dict  # noqa: E402
from romopt.pipeline import STAGES, run_stage  # noqa: E402

settings.register_profile("default", max_examples=25, deadline=None)
settings.load_profile("default")


def run_pipeline(cfg, root):
    return {s: run_stage(s, cfg, root) for s in STAGES}


@pytest.fixture(scope="session")
def contaminant_cfg():
    return parse_config_dict({"scenario": "contaminant", "seed": 0})


@pytest.fixture(scope="session")
def contaminant_run(tmp_path_factory, contaminant_cfg):
    """Full default contaminant pipeline; returns (root, manifest entries)."""
    root = tmp_path_factory.mktemp("contaminant")
    return root, run_pipeline(contaminant_cfg, root)


@pytest.fixture(scope="session")
def fire_cfg():
    return parse_config_dict({"scenario": "fire", "seed": 0})


@pytest.fixture(scope="session")
def fire_run(tmp_path_factory, fire_cfg):
    root = tmp_path_factory.mktemp("fire")
    return root, run_pipeline(fire_cfg, root)


@pytest.fixture(scope="session")
def rom_problem(contaminant_run):
    """ROM control problem on the default scenario and its optimum."""
    from romopt import container
    from romopt.adjoint import RomControlProblem
    from romopt.pipeline import load_reduced_model

    root, _ = contaminant_run
    model = load_reduced_model(root / "rom/model.romt")
    zb, _ = container.read_blocks(root / "optimize/z_tilde.romt")
    P = RomControlProblem(model, zb["time_nodes"].ravel())
    return P, zb["z"].ravel()


@pytest.fixture(scope="session")
def flowmap_model(fire_run):
    """Trained flow map, POD basis and the training-wind scenario."""
    from romopt import container
    from romopt.fire import FireScenario
    from romopt.flowmap import MlpParams

    root, _ = fire_run
    fb, meta = container.read_blocks(root / "rom/flowmap.romt")
    pb, _ = container.read_blocks(root / "rom/pod.romt")
    return MlpParams.from_blocks(fb, meta), pb["V"], FireScenario()


def rel(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), np.finfo(float).tiny))


@pytest.fixture(scope="session")
def contaminant_training(contaminant_run, contaminant_cfg):
    """Training set, train/test operators and zone of the default scenario."""
    from romopt.pipeline import StageContext, _contaminant_setup, _load_training

    root, _ = contaminant_run
    grid, ops_train, ops_test, zone = _contaminant_setup(contaminant_cfg)
    ts = _load_training(StageContext(contaminant_cfg, root))
    return ts, ops_train, ops_test, zone
