import numpy as np
import pytest

from inpaintad.data import SynthConfig, generate_synthetic_dataset


class StubPatchExtractor:
    """Returns fixed feature maps per level; for shape-contract tests."""

    def __init__(self, by_level):
        self.by_level = by_level

    def features_at(self, level, image):
        from inpaintad.errors import PortError
        if level not in self.by_level:
            raise PortError(f"no level {level}")
        return self.by_level[level]


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """One shared synthetic dataset: 4 train normals, 8 normal and 8
    defective test images at 256x256."""
    root = tmp_path_factory.mktemp("synthdata")
    generate_synthetic_dataset(root, SynthConfig(size=256, seed=7))
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(0)
