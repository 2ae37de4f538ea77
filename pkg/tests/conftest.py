import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lightreseg.config import ModelConfig
from lightreseg.tensor import Rng, precision

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


def tiny_config(variant="base_maa_trans3", num_classes=3, size=(16, 16), **kwargs) -> ModelConfig:
    """A network small enough for finite differences."""
    from lightreseg.config import BottleneckConfig, EncoderConfig

    return ModelConfig.for_variant(
        variant,
        encoder=EncoderConfig(channels=(2, 3, 4, 4), block_depth=1),
        bottleneck=BottleneckConfig(embed_dim=6, heads=2, dim_head=3),
        num_classes=num_classes, image_size=size, min_channels=1, **kwargs)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


# acceptance results, printed once at the end of the session
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
