"""
Tests for the finite-difference gradient checks.
"""

from collections import Counter
from dataclasses import replace

import numpy as np
import pytest

from bconv import tensor as T
from bconv.gradcheck import (
    SCALE_FLOOR,
    GradCheckReport,
    Probe,
    cell_suite,
    grad_check,
    gradcheck_network_config,
    layer_class,
    network_suite,
    primitive_suite,
    relative_error,
    run_all,
)
from bconv.tensor import Tensor

PRIMITIVES = {
    "conv2d",
    "conv_transpose2d",
    "linear",
    "sigmoid",
    "tanh",
    "relu",
    "add",
    "sub",
    "hadamard",
    "scale",
    "sum",
    "concat_channels",
    "slice_channels",
    "global_avg_pool",
    "avg_pool2d",
    "broadcast_batch",
    "mean_batch",
    "softmax_cross_entropy",
    "l1_loss",
}


def test_relative_error_uses_scale_floor():
    """Test tiny gradients are compared against the floor instead of themselves."""
    assert relative_error(2.0, 1.0) == pytest.approx(0.5)
    assert SCALE_FLOOR == 1e-8
    assert relative_error(1e-9, 0.0) == pytest.approx(1e-9 / SCALE_FLOOR)
    assert relative_error(3e-6, 1e-6) == pytest.approx(2.0 / 3.0)
    assert relative_error(0.0, 0.0) == 0.0


def test_empty_report_never_passes():
    """Test an empty report never passes and the CSV row reflects the verdict."""
    report = GradCheckReport("empty", 1e-5)
    assert not report.passed
    assert report.worst() is None
    report.probes.append(Probe("w", (0,), 1.0, 1.0))
    assert report.passed
    assert report.to_csv() == ["empty", "1", "0.000e+00", "1.0e-05", "pass"]


def test_grad_check_quadratic():
    """Test the analytic gradient of sum(x o x) passes and leaves x untouched."""
    values = np.random.default_rng(0).standard_normal((3, 4))
    x = Tensor(values, requires_grad=True, dtype="f64")
    before = x.data.copy()
    report = grad_check(
        lambda: T.sum(T.hadamard(x, x)), [x], probe_count=6, name="square"
    )
    assert report.passed
    assert len(report.probes) == 6
    np.testing.assert_array_equal(x.data, before)


def test_grad_check_samples_every_leaf():
    """Test each leaf gets its own set of sampled coordinates."""
    rng = np.random.default_rng(5)
    a = Tensor(rng.standard_normal((2, 3)), requires_grad=True, dtype="f64", name="a")
    b = Tensor(rng.standard_normal((2, 3)), requires_grad=True, dtype="f64", name="b")
    c = Tensor(rng.standard_normal(4), requires_grad=True, dtype="f64", name="c")

    def loss():
        return T.add(T.sum(T.hadamard(a, b)), T.sum(T.tanh(c)))

    report = grad_check(loss, [a, b, c], probe_count=10)
    assert Counter(probe.leaf for probe in report.probes) == {"a": 10, "b": 10, "c": 10}
    assert report.passed, report.max_error


def test_grad_check_redraws_coordinates_at_a_relu_kink():
    """Test a step that flips a relu unit is replaced by another coordinate."""
    values = np.array([5e-5, 1.0, -1.0, 2.0, -0.5, 0.7])
    x = Tensor(values, requires_grad=True, dtype="f64", name="x")
    weights = Tensor(np.linspace(0.5, 1.5, 6), dtype="f64")
    report = grad_check(
        lambda: T.sum(T.hadamard(T.relu(x), weights)), [x], probe_count=10
    )
    assert len(report.probes) == 10
    assert all(probe.index != (0,) for probe in report.probes)
    assert report.passed, report.max_error
    np.testing.assert_array_equal(x.data, values)


def test_grad_check_rejects_float32():
    """Test single-precision leaves are refused."""
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(TypeError, match="float64"):
        grad_check(lambda: T.sum(x), [x])


def test_every_primitive_passes():
    """Test analytic gradients of all primitives against central differences."""
    reports = primitive_suite(probe_count=10, tolerance=1e-5, seed=0)
    assert {report.name for report in reports} == PRIMITIVES
    failed = [(r.name, r.max_error) for r in reports if not r.passed]
    assert failed == []


@pytest.mark.parametrize("version", ["v1", "v2"])
def test_cell_gradients_pass(version):
    """Test a cell step against a carried, nonzero state."""
    report = cell_suite(version, probe_count=12, tolerance=1e-5, seed=3)
    assert report.name == f"cell_{version}"
    assert report.passed, report.max_error


def test_corrupted_backward_is_caught(monkeypatch):
    """Test a wrong tanh derivative makes the check fail."""

    def bad_backward(ctx, grad):
        out = ctx["out"]
        return (grad * 0.5 * (1.0 - out * out),)

    monkeypatch.setattr(T.Tanh, "backward", staticmethod(bad_backward))
    values = np.random.default_rng(1).standard_normal((2, 3))
    x = Tensor(values, requires_grad=True, dtype="f64")
    assert not grad_check(lambda: T.sum(T.tanh(x)), [x], probe_count=4).passed
    assert not cell_suite("v1", probe_count=10).passed


def test_layer_class_grouping():
    """Test parameter names map onto layer classes."""
    assert layer_class("stem.cell.w_xi") == "stem_cell"
    assert layer_class("stem.fuse.weight") == "stem_fuse"
    assert layer_class("pairs.1.block.conv2.bias") == "conv_block"
    assert layer_class("pairs.0.fuse.weight") == "pair_fuse"
    assert layer_class("pairs.2.cell.w_rec") == "pair_cell"
    assert layer_class("fusion.bias") == "fusion"
    assert layer_class("head.out.weight") == "head"


def test_gradcheck_network_config_is_small_and_double(small_config):
    """Test the check topology keeps channels but shrinks images to fit the strides."""
    config = gradcheck_network_config(small_config)
    assert config.resolution == (8, 8)
    assert config.dtype == "f64"
    assert config.classes == 3
    assert config.block_channels == small_config.block_channels


@pytest.mark.integration
@pytest.mark.parametrize("version", ["v1", "v2"])
def test_network_gradients_pass_for_every_layer_class(small_config, version):
    """Test every layer class of a small float64 network."""
    config = replace(gradcheck_network_config(small_config), version=version)
    reports = network_suite(config, probe_count=10, tolerance=1e-5, seed=0)
    names = {report.name for report in reports}
    expected = {
        "stem_fuse",
        "stem_cell",
        "conv_block",
        "pair_fuse",
        "pair_cell",
        "fusion",
        "head",
    }
    assert names == {f"network_{version}_{group}" for group in expected}
    assert all(len(r.probes) >= 10 for r in reports)
    failed = [(r.name, r.max_error) for r in reports if not r.passed]
    assert failed == []


@pytest.mark.integration
def test_run_all_covers_primitives_cells_and_networks(small_config):
    """Test the full battery reports every check and passes."""
    reports = run_all(small_config, probe_count=4, tolerance=1e-5, seed=2)
    names = [report.name for report in reports]
    assert PRIMITIVES <= set(names)
    assert "cell_v1" in names and "cell_v2" in names
    assert "network_v2_head" in names
    assert all(report.passed for report in reports)
