import os

# keep the run registry in memory for the whole test session
os.environ["DVSNOISE_DATABASE_URL"] = "sqlite://"

import pytest

from config import BiasConfig, OperatingPoint, default_config, device_params
from pixel_model import build_system


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long Monte-Carlo runs")


@pytest.fixture
def params():
    return device_params()


@pytest.fixture
def op_point(params):
    """0.1 lux on chip"""
    return OperatingPoint.from_lux(0.1, params)


@pytest.fixture
def bias():
    return BiasConfig()


@pytest.fixture
def low_bias():
    return BiasConfig(I_pr=10e-12)


@pytest.fixture
def system(op_point, bias, params):
    """I_pr = 3 nA, I_sf = 10 pA at 0.1 lux"""
    return build_system(op_point, bias, params)


@pytest.fixture
def low_system(op_point, low_bias, params):
    """I_pr = 10 pA, I_sf = 10 pA at 0.1 lux"""
    return build_system(op_point, low_bias, params)


@pytest.fixture
def config():
    return default_config()
