from pathlib import Path

import pytest
import torch

from rectiflow import config as cfg
from rectiflow import pipeline

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


@pytest.fixture(autouse=True)
def _serial_torch():
    torch.set_num_threads(1)
    yield


@pytest.fixture(scope="session")
def toy_settings(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy_reference")
    return cfg.resolve(cfg.read_file(CONFIGS / "toy.cfg"),
                       {"out": str(out), "run_id": "reference", "deterministic": True})


@pytest.fixture(scope="session")
def toy_models(toy_settings):
    """The committed toy profile, trained once per session: (run, flow ckpt dir, diffusion ckpt dir)."""
    run = pipeline.make_run("test toy reference", dict(toy_settings))
    flow = pipeline.cmd_train(run, "flow")
    diff = pipeline.cmd_train(run, "diffusion")
    return run, flow, diff


@pytest.fixture(scope="session")
def quick_models(tmp_path_factory):
    """Briefly trained toy checkpoints for plumbing tests."""
    out = tmp_path_factory.mktemp("quick")
    settings = cfg.resolve({"out": str(out), "run_id": "quick", "deterministic": True, "train.steps": 300,
                            "train.lr": 1e-3, "data.toy_count": 4000, "data.real_count": 500})
    run = pipeline.make_run("test quick", settings)
    return run, pipeline.cmd_train(run, "flow"), pipeline.cmd_train(run, "diffusion")
