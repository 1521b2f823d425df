import numpy as np
import pytest

from advlens.models import ModelConfig

TINY = {
    "vit": dict(family="vit", image_size=8, channels=2, patch_size=4, layers=1, hidden=8, heads=2,
                num_classes=3),
    "cnn": dict(family="cnn", image_size=8, channels=2, conv_channels=[3, 4], num_classes=3),
    "hybrid": dict(family="hybrid", image_size=8, channels=2, patch_size=2, layers=1, hidden=8,
                   heads=2, conv_channels=[3], stem_strides=[2], num_classes=3),
    "t2t_vit": dict(family="t2t_vit", image_size=8, channels=2, layers=1, hidden=8, heads=2,
                    t2t_splits=[[3, 2, 1], [3, 2, 1]], t2t_dim=4, num_classes=3),
}


def tiny_config(family: str, **kw) -> ModelConfig:
    return ModelConfig(**{**TINY[family], **kw})


@pytest.fixture(params=sorted(TINY))
def family(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
