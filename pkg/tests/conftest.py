from functools import lru_cache

import numpy as np
import pytest

from fiberlab.scenarios import build_scenario


@lru_cache(maxsize=None)
def scenario(sid: str, **params):
    # building a scenario is cheap, but reusing one instance reuses compiled kernels
    return build_scenario(sid, **params)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def s1():
    return scenario("s1-abelian-kk")


@pytest.fixture(scope="session")
def s2():
    return scenario("s2-hopf")


@pytest.fixture(scope="session")
def s3_flat():
    return scenario("s3-frame-flat")


@pytest.fixture(scope="session")
def s3_sphere():
    return scenario("s3-frame-sphere")
