import json
import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from spatialsep.dataset import make_dry_sources, simulate_dataset  # noqa: E402

TINY_CONFIG = {
    "name": "tiny",
    "features": {"kind": "icd", "icd_filters": 4},
    "encoder": {"num_filters": 8},
    "separator": {"bottleneck": 6, "hidden": 8, "blocks": 2, "repeats": 1},
    "training": {"chunk_seconds": 0.05, "batch_size": 2, "steps": 4, "lr": 1e-3,
                 "eval_every": 2, "checkpoint_every": 2},
}


@pytest.fixture(scope="session")
def tiny_config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY_CONFIG))
    return str(path)


@pytest.fixture(scope="session")
def dataset(tmp_path_factory):
    """Three short simulated mixtures: ``(dry_dir, data_dir, manifest)``."""
    root = tmp_path_factory.mktemp("data")
    dry = root / "dry"
    make_dry_sources(dry, 3, seed=1, seconds=0.25)
    out = root / "sim"
    manifest = simulate_dataset(dry, out, 3, seed=2, t60_range=(0.15, 0.25), max_order=4)
    return str(dry), str(out), manifest


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
