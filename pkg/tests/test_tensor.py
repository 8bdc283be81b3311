"""
Tests for the tensor primitives and the reverse-mode engine.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from bconv import tensor as T
from bconv.tensor import Graph, NonFiniteError, ShapeError, Tensor


def _direct_conv(x, w, b, stride, padding):
    """Plain loops over output positions."""
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    n, _, h, width = xp.shape
    out_c, _, k, _ = w.shape
    out_h = (h - k) // stride + 1
    out_w = (width - k) // stride + 1
    out = np.zeros((n, out_c, out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            patch = xp[:, :, i * stride : i * stride + k, j * stride : j * stride + k]
            out[:, :, i, j] = np.einsum("nchw,ochw->no", patch, w)
    return out + b[None, :, None, None]


def test_tensor_defaults_to_float32():
    """Test that non-float input is stored as float32."""
    t = Tensor([[1, 2], [3, 4]])
    assert t.dtype == np.float32
    assert t.shape == (2, 2)
    assert t.is_leaf


def test_tensor_rejects_rank_and_empty_extents():
    """Test rank and extent validation."""
    with pytest.raises(ShapeError, match="rank at most 4"):
        Tensor(np.zeros((1, 1, 1, 1, 1)))
    with pytest.raises(ShapeError, match="extents"):
        Tensor(np.zeros((2, 0)))


def test_unknown_dtype_name():
    """Test that only f32 and f64 are accepted."""
    with pytest.raises(ValueError, match="Unknown dtype"):
        T.resolve_dtype("f16")


def test_conv2d_matches_direct_loops(rng):
    """Test conv2d against direct summation for several strides and paddings."""
    x = rng.standard_normal((2, 3, 7, 7))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    for stride, padding in [(1, 0), (1, 1), (2, 1), (2, 0)]:
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
        expected = _direct_conv(x, w, b, stride, padding)
        assert_allclose(out.data, expected, rtol=1e-12, atol=1e-12)


def test_conv2d_single_input_value():
    """Test a 1x1 input under a 1x1 kernel: out = w*x + b."""
    out = T.conv2d(Tensor([[[[2.0]]]]), Tensor([[[[3.0]]]]), Tensor([1.0]))
    assert out.item() == 7.0


def test_conv2d_channel_mismatch_names_both_shapes():
    """Test that a channel mismatch reports the two shapes."""
    with pytest.raises(ShapeError, match=r"\(1, 3, 4, 4\).*\(2, 2, 3, 3\)"):
        T.conv2d(T.zeros((1, 3, 4, 4)), T.zeros((2, 2, 3, 3)))


def test_conv2d_output_too_small():
    """Test that a kernel larger than the padded input is rejected."""
    with pytest.raises(ShapeError, match="output extent"):
        T.conv2d(T.zeros((1, 1, 2, 2)), T.zeros((1, 1, 5, 5)))


def test_mixed_dtypes_rejected():
    """Test that binary ops never mix float32 and float64."""
    with pytest.raises(TypeError, match="mixed dtypes"):
        T.add(T.zeros((2, 2), "f32"), T.zeros((2, 2), "f64"))


def test_conv_transpose_is_adjoint_of_conv(rng):
    """Test <conv(x), y> == <x, conv_transpose(y)> for the same weight."""
    x = rng.standard_normal((2, 3, 7, 7))
    w = rng.standard_normal((5, 3, 3, 3))
    for stride, padding in [(1, 1), (2, 1), (1, 0)]:
        forward = T.conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding).data
        y = rng.standard_normal(forward.shape)
        # a conv weight [outC, inC, k, k] is read as [inC, outC, k, k] by the transpose
        adjoint = T.conv_transpose2d(
            Tensor(y), Tensor(w), stride=stride, padding=padding
        )
        assert adjoint.shape == x.shape
        assert_allclose(np.sum(forward * y), np.sum(x * adjoint.data), rtol=1e-10)


def test_conv_transpose_output_extent():
    """Test the (H - 1) * stride - 2 * padding + k extent rule."""
    x, w = T.zeros((1, 2, 4, 4)), T.zeros((2, 3, 3, 3))
    out = T.conv_transpose2d(x, w, stride=2, padding=1)
    assert out.shape == (1, 3, 7, 7)


def test_sigmoid_is_stable_for_large_inputs():
    """Test sigmoid at +-1000 stays finite and saturates."""
    out = T.sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0])))
    assert_array_equal(out.data, [0.0, 0.5, 1.0])


def test_softmax_cross_entropy_uniform_logits():
    """Test that uniform logits give log K."""
    loss = T.softmax_cross_entropy(T.zeros((4, 5), "f64"), [0, 1, 2, 3])
    assert_allclose(loss.item(), np.log(5.0), rtol=1e-12)


def test_softmax_cross_entropy_is_shift_invariant(rng):
    """Test that huge logits are handled by the max shift."""
    logits = rng.standard_normal((3, 4))
    base = T.softmax_cross_entropy(Tensor(logits), [0, 1, 2]).item()
    shifted = T.softmax_cross_entropy(Tensor(logits + 1000.0), [0, 1, 2]).item()
    assert_allclose(base, shifted, rtol=1e-9)


def test_softmax_cross_entropy_label_out_of_range():
    """Test label validation."""
    with pytest.raises(ValueError, match="outside"):
        T.softmax_cross_entropy(T.zeros((2, 3)), [0, 3])


def test_l1_loss_zero_at_equality_and_zero_subgradient():
    """Test L1 at equality is 0 and the subgradient at a tie is 0."""
    a = Tensor(np.ones((2, 3)), requires_grad=True, dtype="f64")
    b = Tensor(np.ones((2, 3)), requires_grad=True, dtype="f64")
    loss = T.l1_loss(a, b)
    assert loss.item() == 0.0
    ga, gb = T.backward(loss, [a, b])
    assert_array_equal(ga, np.zeros((2, 3)))
    assert_array_equal(gb, np.zeros((2, 3)))


def test_avg_pool_kernel_one_is_identity():
    """Test that pooling with kernel 1 returns the input tensor itself."""
    x = T.ones((1, 2, 4, 4))
    assert T.avg_pool2d(x, 1) is x
    with pytest.raises(ShapeError, match="divisible"):
        T.avg_pool2d(T.ones((1, 2, 5, 5)), 2)


def test_mean_and_broadcast_batch():
    """Test batch mean keeps a unit batch axis and broadcast replicates it."""
    x = Tensor(np.arange(8, dtype=np.float64).reshape(2, 1, 2, 2))
    mean = T.mean_batch(x)
    assert mean.shape == (1, 1, 2, 2)
    assert_array_equal(mean.data[0, 0], [[2.0, 3.0], [4.0, 5.0]])
    assert T.broadcast_batch(mean, 3).shape == (3, 1, 2, 2)
    with pytest.raises(ShapeError, match="batch extent 1"):
        T.broadcast_batch(x, 2)


def test_pointwise_dispatch():
    """Test pointwise dispatch by name and its arity checks."""
    a = Tensor(np.array([-1.0, 2.0]))
    assert_array_equal(T.pointwise("relu", a).data, [0.0, 2.0])
    assert_array_equal(T.pointwise("sub", a, a).data, [0.0, 0.0])
    with pytest.raises(TypeError):
        T.pointwise("add", a)
    with pytest.raises(ValueError, match="Unknown pointwise"):
        T.pointwise("softplus", a)


def test_non_finite_output_raises():
    """Test that an op producing inf from finite inputs raises."""
    big = Tensor(np.array([1e200]), dtype="f64")
    with pytest.raises(NonFiniteError, match="hadamard"):
        T.hadamard(big, big)


def test_backward_sums_all_consumers():
    """Test a tensor used three times receives the sum of three contributions."""
    x = Tensor(np.array([2.0]), requires_grad=True, dtype="f64")
    y = x * x + x  # d/dx = 2x + 1
    (grad,) = T.backward(T.sum(y), [x])
    assert_allclose(grad, [5.0])
    assert x.grad is grad


def test_backward_requires_scalar_root():
    """Test that a non-scalar root is rejected."""
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ShapeError, match="scalar root"):
        T.backward(T.relu(x))


def test_backward_unrelated_leaf_gets_zeros():
    """Test that leaves outside the graph receive zero gradients."""
    x = Tensor(np.ones(3), requires_grad=True, dtype="f64")
    other = Tensor(np.ones((2, 2)), requires_grad=True, dtype="f64")
    _, grad = T.backward(T.sum(x), [x, other])
    assert_array_equal(grad, np.zeros((2, 2)))


def test_detach_cuts_the_graph():
    """Test that detached tensors stop gradients."""
    x = Tensor(np.array([3.0]), requires_grad=True, dtype="f64")
    y = T.hadamard(x, x.detach())
    (grad,) = T.backward(T.sum(y), [x])
    assert_allclose(grad, [3.0])


def test_no_grad_records_nothing():
    """Test operations under no_grad build no nodes and recording resumes after."""
    x = Tensor(np.ones(3), requires_grad=True, dtype="f64")
    with T.no_grad():
        assert not T.is_recording()
        y = T.scale(x, 2.0)
    assert T.is_recording()
    assert y.is_leaf
    assert not y.requires_grad
    assert_array_equal(y.data, [2.0, 2.0, 2.0])
    assert T.scale(x, 2.0).requires_grad


def test_no_grad_restores_recording_after_errors():
    """Test an exception inside no_grad leaves recording switched on."""
    with pytest.raises(ShapeError):
        with T.no_grad():
            T.add(Tensor(np.ones(2)), Tensor(np.ones(3)))
    assert T.is_recording()


def test_record_relu_masks_collects_active_units():
    """Test each relu inside the block appends its mask, and none outside it."""
    x = Tensor(np.array([-1.0, 2.0, 0.0]), dtype="f64")
    with T.record_relu_masks() as masks:
        T.relu(x)
        T.relu(T.scale(x, -1.0))
    T.relu(x)
    assert len(masks) == 2
    assert_array_equal(masks[0], [False, True, False])
    assert_array_equal(masks[1], [True, False, False])


def test_graph_trace_orders_parents_first():
    """Test the traced node list is topologically ordered and ends at the root."""
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    c = T.add(a, b)
    d = T.hadamard(c, a)
    root = T.sum(d)
    graph = Graph.trace(root)
    assert graph.nodes[-1].output is root
    for position, node in enumerate(graph.nodes):
        assert all(parent < position for parent in node.parents)
    assert {id(t) for t in graph.leaves()} == {id(a), id(b)}


def test_deep_chain_does_not_recurse():
    """Test a chain longer than the recursion limit traces iteratively."""
    x = Tensor(np.array([1.0]), requires_grad=True, dtype="f64")
    y = x
    for _ in range(3000):
        y = T.scale(y, 1.0)
    (grad,) = T.backward(T.sum(y), [x])
    assert_array_equal(grad, [1.0])


def test_slice_and_concat_channels_are_inverse():
    """Test that slicing a channel concatenation recovers both parts."""
    a = Tensor(np.ones((1, 2, 2, 2)))
    b = Tensor(np.zeros((1, 3, 2, 2)))
    both = T.concat_channels(a, b)
    assert both.shape == (1, 5, 2, 2)
    assert_array_equal(T.slice_channels(both, 0, 2).data, a.data)
    assert_array_equal(T.slice_channels(both, 2, 5).data, b.data)
    with pytest.raises(ShapeError):
        T.slice_channels(both, 3, 9)
