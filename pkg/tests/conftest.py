import os
import sys
from pathlib import Path

_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, _ROOT)

import pytest

from numerics import FixedPointSettings, QuadratureSettings
from scenario import RadioParams, load_scenario

FIXTURES = Path(_ROOT) / "fixtures"


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: Monte-Carlo oracles that take minutes; deselect with -m 'not slow'")


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def radio():
    """The validation radio: 10 W on both tiers, tau0 = 1 ms."""
    return RadioParams(power_static_w=10.0, power_mobile_w=10.0, target_delay_tau0_s=1e-3)


@pytest.fixture
def unequal_radio():
    """Moving stations at a third of the static power (rho_ms < 1)."""
    return RadioParams(power_static_w=3.0, power_mobile_w=1.0, target_delay_tau0_s=1e-3)


@pytest.fixture
def quad():
    return QuadratureSettings()


@pytest.fixture
def fixed_point():
    return FixedPointSettings()


@pytest.fixture(params=[1, 2, 3], ids=["setup1", "setup2", "setup3"])
def validation(request):
    return load_scenario(FIXTURES / f"validation_setup{request.param}.json")


@pytest.fixture
def validation_setup2():
    return load_scenario(FIXTURES / "validation_setup2.json")
