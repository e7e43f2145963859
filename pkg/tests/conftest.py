import numpy as np
import pytest

from chemu.gbsm import AntennaArray, ScenarioConfig, generate_ctf_grid

F_C = 2.6e9
BANDWIDTH = 60e6


def reference_config(**overrides) -> ScenarioConfig:
    """The reference scenario: 4x2 ULAs, Tx at 35 m height, Rx driving along x at 10 m/s."""
    return ScenarioConfig(f_c=F_C, bandwidth=BANDWIDTH, **overrides)


def static_config(**overrides) -> ScenarioConfig:
    """Single-antenna, motionless, dynamics-free scenario for deterministic cluster tests."""
    base = dict(
        f_c=F_C, bandwidth=BANDWIDTH, n_freq=16, t_total=0.01, t_ch=1e-3,
        tx_array=AntennaArray(1, origin=(0.0, 0.0, 0.0)),
        rx_array=AntennaArray(1, origin=(0.0, 0.0, 0.0)),
        n_clusters=1, rays_per_cluster=1, birth_rate=0.0, death_rate=0.0,
    )
    base.update(overrides)
    return ScenarioConfig(**base)


@pytest.fixture(scope="session")
def reference_grid():
    return generate_ctf_grid(reference_config())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
