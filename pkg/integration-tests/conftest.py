"""Configure pytest before running integration tests."""

import tempfile

from dataclasses import replace
from pathlib import Path

import pytest

from emib.config import RunConfig
from emib.synth import SynthParams, generate_dataset, load_dataset


def pytest_addoption(parser):
    """Add options for the run directory and the training budget."""
    parser.addoption("--emib-run-dir", action="store", default=None, help="Directory for datasets and checkpoints")
    parser.addoption("--emib-steps", action="store", type=int, default=2000, help="Pretraining steps per run")
    parser.addoption("--emib-count", action="store", type=int, default=5000, help="Synthetic samples")
    parser.addoption("--emib-seeds", action="store", type=int, default=3, help="Pretraining seeds per mode")


@pytest.fixture(scope="module")
def run_dir(request):
    """Return the run directory, a temporary one unless `--emib-run-dir` is given."""
    given = request.config.getoption("--emib-run-dir")
    if given:
        yield Path(given)
        return
    with tempfile.TemporaryDirectory() as tmp:
        yield Path(tmp)


@pytest.fixture(scope="module")
def run_cfg(request):
    """Return the desk run configuration with the requested training budget."""
    cfg = RunConfig()
    return replace(cfg, train=cfg.train.replace(steps=request.config.getoption("--emib-steps")))


@pytest.fixture(scope="module")
def seeds(request):
    """Return the pretraining seeds."""
    return list(range(request.config.getoption("--emib-seeds")))


@pytest.fixture(scope="module")
def dataset(request, run_dir, run_cfg):
    """Return the desk dataset, generated once per module."""
    path = run_dir / "data"
    generate_dataset(request.config.getoption("--emib-count"), SynthParams(), run_cfg.seed, path)
    return load_dataset(path)
