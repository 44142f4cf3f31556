import numpy as np
import pytest

from protovit.data import generate_synthetic
from protovit.vit import ViTConfig, ViTModel

# A very small backbone for tests that only need *a* model, not the micro preset.
NANO = ViTConfig(image_size=8, patch_size=4, in_channels=3, embed_dim=16, depth=1, num_heads=2,
                 mlp_ratio=2.0, drop_rate=0.1, qkv_bias=True)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def synthetic_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthetic")
    generate_synthetic(root, num_classes=5, per_class=40, image_size=32, seed=1)
    return root


@pytest.fixture(scope="session")
def small_root(tmp_path_factory):
    """5 classes x 21 images at 8px: just enough for one (5, 5, 15) episode per class."""
    root = tmp_path_factory.mktemp("small")
    generate_synthetic(root, num_classes=5, per_class=21, image_size=8, seed=3)
    generate_synthetic(root, num_classes=5, per_class=21, image_size=8, seed=4, split="test")
    return root


@pytest.fixture
def nano_model():
    return ViTModel(NANO, seed=0)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
