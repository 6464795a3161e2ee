from __future__ import annotations

import shutil

import pytest

from pbench.model import TrainConfig
from pbench.pipeline import generate_keys, run_pipeline
from pbench.synthdata import GenConfig

SMALL_GEN = GenConfig(counts=(("Car", 300), ("Tram", 40), ("Truck", 60), ("Bus", 30)), seed=1)
FAST_TRAIN = TrainConfig(hidden=16, epochs=2, learning_rate=0.05, seed=1)


@pytest.fixture(scope="session")
def keys():
    return generate_keys()


@pytest.fixture(scope="session")
def ed_keys():
    return generate_keys("Ed25519")


@pytest.fixture(scope="session")
def clean_run_template(tmp_path_factory, keys):
    run = tmp_path_factory.mktemp("clean") / "run"
    rec = run_pipeline(run, SMALL_GEN, FAST_TRAIN, None, keys)
    assert not rec.aborted
    return run


@pytest.fixture
def clean_run(clean_run_template, tmp_path):
    """A private, writable copy of a verified small pipeline run."""
    dst = tmp_path / "run"
    shutil.copytree(clean_run_template, dst)
    return dst
