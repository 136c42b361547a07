import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def reference_dataset():
    """36-combination closed-loop dataset at the reference source parameters, 1e6 pulses each."""
    from qdpair.correlate import cross_correlate
    from qdpair.sim import SimConfig, simulate_tomography_run
    from qdpair.tomography import assemble_dataset

    cfg = SimConfig(pulse_count=1_000_000, seed=2024)
    run = simulate_tomography_run(cfg)
    return assemble_dataset({k: cross_correlate(s, 0, 1, 8, 5000) for k, s in run.items()})
