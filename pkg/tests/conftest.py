import os
from pathlib import Path

import pytest

import helpers


@pytest.fixture(scope="session")
def cache_root(tmp_path_factory) -> Path:
    env = os.environ.get("CYCLELAB_TEST_CACHE")
    if env:
        root = Path(env)
        root.mkdir(parents=True, exist_ok=True)
        return root
    return tmp_path_factory.mktemp("cyclelab-cache")


@pytest.fixture(scope="session")
def dataset_m2o(cache_root) -> Path:
    return helpers.ensure_dataset(cache_root, "many-to-one")


@pytest.fixture(scope="session")
def dataset_o2o(cache_root) -> Path:
    return helpers.ensure_dataset(cache_root, "one-to-one")
