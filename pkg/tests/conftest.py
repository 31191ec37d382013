import json
import time
from pathlib import Path

import numpy as np
import pytest

from vibeam.config import default_config
from vibeam.pipeline import reproduce_ablations
from vibeam.scene import SceneConfig, simulate

CALIBRATION = Path(__file__).with_name("calibration.json")


@pytest.fixture
def report(capsys):
    """Print one pass/fail line for an acceptance criterion, then assert it."""

    def _report(label, ok, detail=""):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
        assert ok, f"{label}: {detail}"

    return _report


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    """Two full default-seed ablation runs in separate directories."""
    seed = json.loads(CALIBRATION.read_text())["seed"]
    out = []
    for k in range(2):
        root = tmp_path_factory.mktemp(f"ablation{k}")
        t0 = time.perf_counter()
        summary = reproduce_ablations(default_config(seed=seed), root, log=None)
        out.append({"root": root, "summary": summary, "seconds": time.perf_counter() - t0})
    return out


@pytest.fixture(scope="session")
def tiny_scene():
    return SceneConfig(episodes=24, seed=3)


@pytest.fixture(scope="session")
def tiny_batch(tiny_scene):
    return simulate(tiny_scene)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
