import numpy as np
import pytest
import torch

from fgtune import dataprep
from fgtune.backbone import LatentDiffusion
from fgtune.losses import build_perceptual_encoder

# lines collected by the acceptance suite, printed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def model():
    return LatentDiffusion(seed=42)


@pytest.fixture(scope="session")
def model64():
    m = LatentDiffusion(seed=42).double()
    return m


@pytest.fixture(scope="session")
def dataset():
    return dataprep.generate_synthetic_dataset(42, 4, 16)


@pytest.fixture(scope="session")
def perceptual():
    return build_perceptual_encoder()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def central_diff(f, x: torch.Tensor, idx, h=1e-6):
    """Central difference of scalar ``f`` at flat index ``idx`` of ``x`` (mutated in place, restored)."""
    flat = x.data.view(-1)
    old = flat[idx].item()
    with torch.no_grad():
        flat[idx] = old + h
        fp = float(f())
        flat[idx] = old - h
        fm = float(f())
        flat[idx] = old
    return (fp - fm) / (2 * h)
