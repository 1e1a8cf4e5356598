import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mimlab.vit import ViTConfig  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ViTConfig(image_size=8, patch_size=4, embed_dim=8, depth=2, num_heads=2, mlp_ratio=2.0,
                     decoder_dim=8, decoder_depth=1, decoder_num_heads=2, proj_hidden_dim=8, proj_dim=4)
