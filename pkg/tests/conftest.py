"""Shared fixtures."""

import logging

import pytest

from fedlga_sim.simulation import ExperimentConfig

SMALL_CONFIG_TEXT = """\
# small synthetic task used across the test-suite
n_devices=10
k_selected=4
local_steps=3
batch_size=5
eta_l=0.1
rho=0.5
rounds=5
num_classes=4
input_dim=5
samples_per_class=40
test_per_class=10
classes_per_device=2
"""


@pytest.fixture
def small_config() -> ExperimentConfig:
    """Ten devices, four classes, three local steps."""
    return ExperimentConfig(
        n_devices=10,
        k_selected=4,
        local_steps=3,
        batch_size=5,
        eta_l=0.1,
        rho=0.5,
        rounds=5,
        num_classes=4,
        input_dim=5,
        samples_per_class=40,
        test_per_class=10,
        classes_per_device=2,
    )


@pytest.fixture
def small_config_file(tmp_path):
    """The small config written to disk."""
    path = tmp_path / "small.cfg"
    path.write_text(SMALL_CONFIG_TEXT, encoding="utf-8")
    return path


@pytest.fixture(autouse=True)
def _reset_package_logging():
    yield
    package_logger = logging.getLogger("fedlga_sim")
    for handler in list(package_logger.handlers):
        package_logger.removeHandler(handler)
    package_logger.setLevel(logging.NOTSET)
