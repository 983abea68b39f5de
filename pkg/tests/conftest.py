import os

import numpy as np
import pytest

os.environ.setdefault("APP_ENV", "test")
os.environ.pop("SELEKTOR_SEED", None)

from app.core.config import reload_settings  # noqa: E402


@pytest.fixture(autouse=True)
def _test_settings():
    reload_settings("test")
    yield
    reload_settings("test")


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)
