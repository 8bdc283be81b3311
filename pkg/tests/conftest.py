"""
Pytest configuration and fixtures for bconv tests.
"""

import numpy as np
import pytest

from bconv.data import synth_generate
from bconv.network import NetworkConfig


@pytest.fixture
def rng():
    """Seeded generator so every test draws the same values."""
    return np.random.default_rng(1234)


@pytest.fixture
def small_config():
    """A three-pair topology on 8x8 images that runs in milliseconds."""
    return NetworkConfig(
        in_channels=3,
        resolution=(8, 8),
        classes=3,
        stem_channels=4,
        block_channels=(6, 8, 8),
        block_strides=(1, 2, 2),
        cell_channels=(4, 4, 6),
        feature_channels=12,
        hidden_channels=10,
    )


@pytest.fixture
def small_dataset():
    """Three synthetic classes of 8x8 images, twelve per class."""
    return synth_generate(
        classes=3, per_class=12, resolution=(8, 8), noise_std=0.05, seed=7
    )


@pytest.fixture
def small_config_text():
    """Config file text matching ``small_config`` on synthetic data."""
    return "\n".join(
        [
            "# tiny run",
            "stem_channels = 4",
            "block_channels = 6, 8, 8",
            "block_strides = 1, 2, 2",
            "cell_channels = 4, 4, 6",
            "feature_channels = 12",
            "hidden_channels = 10",
            "batch_size = 8",
            "epochs = 2",
            "record_time = false",
            "synth_classes = 3",
            "synth_per_class = 12",
            "synth_eval_per_class = 4",
            "synth_resolution = 8",
            "gradcheck_probes = 3",
            "inspect_batches = 3",
        ]
    ) + "\n"
