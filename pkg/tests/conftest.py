import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pstp.config import ModelConfig, SynthSpec
from pstp.features import generate_synthetic

settings.register_profile(
    "pstp", deadline=None, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile("pstp")

TINY = ModelConfig(K=3, T=2, M=5, D=8, D_a=4, top_k=2, top_m=3, heads=2, C=3)
SMALL = ModelConfig(K=4, T=2, M=5, D=16, D_a=8, top_k=2, top_m=3, heads=4, C=4)


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def small_cfg():
    return SMALL


@pytest.fixture
def tiny_bundles():
    return generate_synthetic(SynthSpec(n_videos=6, seed=11, signal_strength=2.0), TINY)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one acceptance line; printed in the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(number: int, name: str, ok: bool, detail: str) -> bool:
        lines.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name} ({detail})")
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
