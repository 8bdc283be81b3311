"""
Python version compatibility tests for bconv.
"""

import pathlib
import sys
import tempfile

import numpy as np
import pytest

from bconv.checkpoint import load_checkpoint, save_checkpoint
from bconv.config import load_config
from bconv.data import BatchPlan, batches, prefetch, synth_generate
from bconv.network import NetworkConfig, PTLNetwork


def test_python_version_support():
    """Test that we're running on a supported Python version."""
    major, minor = sys.version_info[:2]
    assert major == 3, f"Only Python 3 is supported, got Python {major}"
    assert minor >= 9, f"Python 3.9+ required, got Python 3.{minor}"


def test_basic_functionality_all_versions(small_config):
    """Test that a forward pass works across Python versions."""
    dataset = synth_generate(classes=3, per_class=2, resolution=(8, 8), seed=0)
    network = PTLNetwork.build(small_config, np.random.default_rng(0))
    images, _ = next(batches(dataset, BatchPlan(seed=0, batch_size=4), epoch=0))

    logits, feature = network(images)
    assert logits.shape == (4, 3)
    assert feature.shape == (4, small_config.feature_channels)


def test_type_hints_compatibility():
    """Test that the frozen dataclass configs behave across versions."""
    config: NetworkConfig = NetworkConfig(resolution=(8, 8))
    with pytest.raises(AttributeError):
        config.classes = 5  # type: ignore[misc]
    assert isinstance(config.block_channels, tuple)


def test_concurrent_futures_compatibility():
    """Test that the thread-backed prefetch keeps the source order."""
    assert list(prefetch(iter(range(20)))) == list(range(20))
    assert list(prefetch([])) == []


@pytest.mark.integration
def test_pathlib_compatibility(small_config):
    """Test that pathlib paths are accepted for checkpoints and configs."""
    with tempfile.TemporaryDirectory() as tmpdir:
        root = pathlib.Path(tmpdir)
        network = PTLNetwork.build(small_config, np.random.default_rng(0))
        save_checkpoint(network, root / "model.bcnv")
        assert load_checkpoint(root / "model.bcnv").kind == "ptl"

        config_path = root / "run.cfg"
        config_path.write_text("epochs = 3\n", encoding="utf-8")
        assert load_config(config_path).epochs == 3
