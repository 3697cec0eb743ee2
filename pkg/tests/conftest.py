import numpy as np
import pytest

from icsinet.synthgen import SceneConfig, generate_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small synthetic train/val directories at 32x32."""
    root = tmp_path_factory.mktemp("tinydata")
    generate_dataset(SceneConfig(image_size=32, seed=11), 8, root / "train")
    generate_dataset(SceneConfig(image_size=32, seed=12), 4, root / "val")
    return root
