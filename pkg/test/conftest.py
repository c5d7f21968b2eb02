import json

import pytest


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale training tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


TINY_CONFIG = {
    "epochs": 2,
    "episodes_per_epoch": 1,
    "updates_per_epoch": 2,
    "batch_size": 8,
    "horizon": 3,
    "eval_episodes": 1,
    "env": {"horizon": 20, "noise_std": 0.0},
    "model": {"members": 2, "hidden": 8, "epochs": 2, "steps_per_epoch": 3, "batch_size": 16,
              "min_transitions": 10},
    "policy": {"hidden": 4},
}


@pytest.fixture
def tiny_config_data():
    return json.loads(json.dumps(TINY_CONFIG))


@pytest.fixture
def tiny_config_file(tmp_path, tiny_config_data):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(tiny_config_data))
    return str(path)
