"""
Dense NCHW tensors with define-by-run reverse-mode differentiation.

Every operation in this module is a :class:`Function` with a numpy ``forward``
and ``backward``. Calling an operation on tensors that require gradients records
a node on the output tensor; :func:`backward` traces those nodes into a
:class:`Graph` (parents always precede their consumers) and walks it in reverse
insertion order, summing the gradient contributions of every consumer.

Conventions:
    - Row-major NCHW layout, rank at most 4, every extent at least 1.
    - ``float32`` for training, ``float64`` for oracles and gradient checks.
      Binary operations never mix the two.
    - No implicit broadcasting. The only broadcast is the per-channel bias inside
      :func:`conv2d`, :func:`conv_transpose2d` and :func:`linear`.
    - Convolution is cross-correlation (no kernel flip).
"""

import logging
from contextlib import contextmanager
from typing import (
    Any,
    Dict,
    Iterator,
    List,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np
from numpy.lib.stride_tricks import as_strided

DTYPES: Dict[str, Any] = {"f32": np.float32, "f64": np.float64}

ArrayLike = Union[np.ndarray, float, int, Sequence[Any]]

_recording = True
_relu_masks: Optional[List[np.ndarray]] = None


class ShapeError(ValueError):
    """Raised when tensor shapes or extents do not fit an operation."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation turns all-finite inputs into NaN or inf."""


def resolve_dtype(name: Union[str, Any]) -> Any:
    """Map ``"f32"``/``"f64"`` (or a numpy float type) to a numpy dtype."""
    if isinstance(name, str):
        try:
            return DTYPES[name]
        except KeyError:
            raise ValueError(f"Unknown dtype {name!r}, expected one of f32, f64")
    dtype = np.dtype(name).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(
            f"Unsupported dtype {np.dtype(name)}, expected float32 or float64"
        )
    return dtype


class Tensor:
    """A dense float array plus the bookkeeping reverse mode needs.

    Args:
        data: Array-like values. Float32/float64 arrays keep their dtype, anything
            else is converted to ``dtype`` (float32 when not given).
        requires_grad: Whether :func:`backward` should produce a gradient for it.
        dtype: Optional target dtype (``"f32"``, ``"f64"`` or a numpy float type).
        name: Optional label, used in error messages and checkpoint manifests.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype: Optional[Union[str, Any]] = None,
        name: Optional[str] = None,
    ):
        if dtype is not None:
            array = np.ascontiguousarray(data, dtype=resolve_dtype(dtype))
        else:
            array = np.ascontiguousarray(data)
            if array.dtype not in (np.float32, np.float64):
                array = array.astype(np.float32)
        if array.ndim > 4:
            raise ShapeError(f"Tensors have rank at most 4, got shape {array.shape}")
        if any(extent < 1 for extent in array.shape):
            raise ShapeError(f"All extents must be >= 1, got shape {array.shape}")

        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional["_Node"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        """Extents in (N, C, H, W) order for rank-4 tensors."""
        return tuple(self.data.shape)

    @property
    def dtype(self) -> Any:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        """True when the tensor was not produced by a recorded operation."""
        return self._node is None

    def numpy(self) -> np.ndarray:
        """Return the underlying array (no copy)."""
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Return a tensor sharing the values but cut from the gradient graph."""
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        grad = ", requires_grad" if self.requires_grad else ""
        return f"<Tensor{label} shape={self.shape} dtype={self.dtype}{grad}>"


def zeros(shape: Sequence[int], dtype: Union[str, Any] = "f32") -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=resolve_dtype(dtype)))


def ones(shape: Sequence[int], dtype: Union[str, Any] = "f32") -> Tensor:
    return Tensor(np.ones(tuple(shape), dtype=resolve_dtype(dtype)))


# ---------------------------------------------------------------------------
# Graph machinery
# ---------------------------------------------------------------------------


@contextmanager
def no_grad() -> Iterator[None]:
    """Run operations without recording them; outputs never require gradients."""
    global _recording
    previous = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = previous


def is_recording() -> bool:
    return _recording


@contextmanager
def record_relu_masks() -> Iterator[List[np.ndarray]]:
    """Collect the active-unit mask of every relu evaluated inside the block."""
    global _relu_masks
    previous = _relu_masks
    masks: List[np.ndarray] = []
    _relu_masks = masks
    try:
        yield masks
    finally:
        _relu_masks = previous


class Context:
    """Forward-pass cache handed to :meth:`Function.backward`."""

    def __init__(self) -> None:
        self.saved: Dict[str, Any] = {}

    def save(self, **kwargs: Any) -> None:
        self.saved.update(kwargs)

    def __getitem__(self, key: str) -> Any:
        return self.saved[key]


class _Node(NamedTuple):
    function: type
    parents: Tuple[Tensor, ...]
    ctx: Context


class Function:
    """Base class of every differentiable primitive.

    Subclasses implement ``forward(ctx, *arrays, **kwargs) -> ndarray`` and
    ``backward(ctx, grad) -> tuple`` with one entry (array or None) per tensor input.
    """

    tag = "function"

    @staticmethod
    def forward(ctx: Context, *args: Any, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *tensors: Tensor, **kwargs: Any) -> Tensor:
        ctx = Context()
        out = cls.forward(ctx, *(t.data for t in tensors), **kwargs)
        if not np.isfinite(out).all() and all(
            np.isfinite(t.data).all() for t in tensors
        ):
            raise NonFiniteError(
                f"{cls.tag} produced non-finite values from finite inputs"
            )

        result = Tensor(out)
        if _recording and any(t.requires_grad for t in tensors):
            result.requires_grad = True
            result._node = _Node(cls, tuple(tensors), ctx)
        return result


class GraphNode(NamedTuple):
    op: str
    parents: Tuple[int, ...]
    output: Tensor
    ctx: Optional[Context]


class Graph:
    """Append-only, topologically ordered record of the operations behind a root.

    Node parents always precede the node. :meth:`backward` visits nodes in reverse
    insertion order exactly once and sums gradients from all consumers.
    """

    def __init__(self) -> None:
        self.nodes: List[GraphNode] = []
        self._index: Dict[int, int] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def index_of(self, tensor: Tensor) -> int:
        return self._index[id(tensor)]

    def _append(self, tensor: Tensor) -> None:
        node = tensor._node
        if node is None:
            self.nodes.append(GraphNode("leaf", (), tensor, None))
        else:
            parents = tuple(
                self._index[id(p)] if p.requires_grad else -1 for p in node.parents
            )
            self.nodes.append(GraphNode(node.function.tag, parents, tensor, node.ctx))
        self._index[id(tensor)] = len(self.nodes) - 1

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        """Collect every gradient-carrying tensor that ``root`` depends on."""
        graph = cls()
        if not root.requires_grad:
            return graph
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            tensor, expanded = stack.pop()
            if id(tensor) in graph._index:
                continue
            if expanded or tensor._node is None:
                graph._append(tensor)
                continue
            stack.append((tensor, True))
            for parent in reversed(tensor._node.parents):
                if parent.requires_grad and id(parent) not in graph._index:
                    stack.append((parent, False))
        return graph

    def leaves(self) -> List[Tensor]:
        return [node.output for node in self.nodes if node.op == "leaf"]

    def backward(self) -> Dict[int, np.ndarray]:
        """Run the reverse sweep from the last node; returns leaf gradients by index."""
        slots: List[Optional[np.ndarray]] = [None] * len(self.nodes)
        if not self.nodes:
            return {}
        root = self.nodes[-1].output
        slots[-1] = np.ones_like(root.data)

        leaf_grads: Dict[int, np.ndarray] = {}
        for index in range(len(self.nodes) - 1, -1, -1):
            node = self.nodes[index]
            grad = slots[index]
            slots[index] = None
            if grad is None:
                continue
            if node.op == "leaf":
                leaf_grads[index] = grad
                continue
            function = node.output._node.function  # type: ignore[union-attr]
            parent_grads = function.backward(node.ctx, grad)
            for parent, parent_grad in zip(node.parents, parent_grads):
                if parent < 0 or parent_grad is None:
                    continue
                if slots[parent] is None:
                    slots[parent] = parent_grad
                else:
                    slots[parent] = slots[parent] + parent_grad
        return leaf_grads


def backward(
    root: Tensor, leaves: Optional[Sequence[Tensor]] = None
) -> List[np.ndarray]:
    """Reverse-mode gradients of a scalar ``root``.

    Args:
        root: Scalar tensor (every extent 1).
        leaves: Tensors to return gradients for, in order. Defaults to every leaf
            in the traced graph. Leaves that do not influence ``root`` get zeros.

    Returns:
        One gradient array per leaf, same shape and dtype as the leaf. Each leaf's
        ``.grad`` is set to the same array.
    """
    if root.size != 1:
        raise ShapeError(f"backward() needs a scalar root, got shape {root.shape}")

    graph = Graph.trace(root)
    leaf_grads = graph.backward()
    if leaves is None:
        leaves = graph.leaves()
    logging.debug(f"Backward over {len(graph)} nodes for {len(leaves)} leaves")

    grads: List[np.ndarray] = []
    for leaf in leaves:
        grad = None
        if id(leaf) in graph._index:
            grad = leaf_grads.get(graph.index_of(leaf))
        if grad is None:
            grad = np.zeros_like(leaf.data)
        leaf.grad = grad
        grads.append(grad)
    return grads


# ---------------------------------------------------------------------------
# im2col helpers
# ---------------------------------------------------------------------------


def output_extent(extent: int, kernel: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - kernel) // stride + 1


def im2col(x: np.ndarray, k_h: int, k_w: int, stride: int, padding: int) -> np.ndarray:
    """Unfold ``x`` (N, C, H, W) into columns of shape (N, C*k_h*k_w, out_h*out_w)."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    n, c, h, w = x.shape
    out_h = (h - k_h) // stride + 1
    out_w = (w - k_w) // stride + 1
    s_n, s_c, s_h, s_w = x.strides
    patches = as_strided(
        x,
        shape=(n, c, k_h, k_w, out_h, out_w),
        strides=(s_n, s_c, s_h, s_w, stride * s_h, stride * s_w),
        writeable=False,
    )
    return patches.reshape(n, c * k_h * k_w, out_h * out_w)


def col2im(
    cols: np.ndarray,
    x_shape: Tuple[int, int, int, int],
    k_h: int,
    k_w: int,
    stride: int,
    padding: int,
) -> np.ndarray:
    """Scatter-add columns back onto an image of shape ``x_shape``."""
    n, c, h, w = x_shape
    h_p, w_p = h + 2 * padding, w + 2 * padding
    out_h = (h_p - k_h) // stride + 1
    out_w = (w_p - k_w) // stride + 1
    cols = cols.reshape(n, c, k_h, k_w, out_h, out_w)
    image = np.zeros((n, c, h_p, w_p), dtype=cols.dtype)
    for i in range(k_h):
        for j in range(k_w):
            image[
                :, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride
            ] += cols[:, :, i, j]
    return image[:, :, padding : padding + h, padding : padding + w]


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


class Conv2d(Function):
    tag = "conv2d"

    @staticmethod
    def forward(  # type: ignore[override]
        ctx: Context,
        x: np.ndarray,
        w: np.ndarray,
        b: np.ndarray,
        stride: int = 1,
        padding: int = 0,
    ) -> np.ndarray:
        n = x.shape[0]
        out_c, _, k_h, k_w = w.shape
        out_h = output_extent(x.shape[2], k_h, stride, padding)
        out_w = output_extent(x.shape[3], k_w, stride, padding)
        cols = im2col(x, k_h, k_w, stride, padding)
        w2d = w.reshape(out_c, -1)
        ctx.save(
            cols=cols,
            w2d=w2d,
            x_shape=x.shape,
            w_shape=w.shape,
            stride=stride,
            padding=padding,
        )
        out = np.matmul(w2d, cols) + b[None, :, None]
        return out.reshape(n, out_c, out_h, out_w)

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> Tuple[np.ndarray, ...]:
        n, out_c = grad.shape[:2]
        g = grad.reshape(n, out_c, -1)
        cols, w2d = ctx["cols"], ctx["w2d"]
        _, _, k_h, k_w = ctx["w_shape"]
        grad_b = g.sum(axis=(0, 2))
        grad_w = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(ctx["w_shape"])
        grad_cols = np.matmul(w2d.T, g)
        stride, padding = ctx["stride"], ctx["padding"]
        grad_x = col2im(grad_cols, ctx["x_shape"], k_h, k_w, stride, padding)
        return grad_x, grad_w, grad_b


class ConvTranspose2d(Function):
    tag = "conv_transpose2d"

    @staticmethod
    def forward(  # type: ignore[override]
        ctx: Context,
        x: np.ndarray,
        w: np.ndarray,
        b: np.ndarray,
        stride: int = 1,
        padding: int = 0,
    ) -> np.ndarray:
        n, in_c, h, w_in = x.shape
        _, out_c, k_h, k_w = w.shape
        out_h = (h - 1) * stride - 2 * padding + k_h
        out_w = (w_in - 1) * stride - 2 * padding + k_w
        w2d = w.reshape(in_c, -1)
        x2d = x.reshape(n, in_c, h * w_in)
        cols = np.matmul(w2d.T, x2d)
        out = col2im(cols, (n, out_c, out_h, out_w), k_h, k_w, stride, padding)
        ctx.save(
            x2d=x2d,
            w2d=w2d,
            x_shape=x.shape,
            w_shape=w.shape,
            stride=stride,
            padding=padding,
        )
        return out + b[None, :, None, None]

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> Tuple[np.ndarray, ...]:
        _, _, k_h, k_w = ctx["w_shape"]
        grad_cols = im2col(grad, k_h, k_w, ctx["stride"], ctx["padding"])
        grad_x = np.matmul(ctx["w2d"], grad_cols).reshape(ctx["x_shape"])
        grad_w = np.tensordot(ctx["x2d"], grad_cols, axes=([0, 2], [0, 2]))
        grad_b = grad.sum(axis=(0, 2, 3))
        return grad_x, grad_w.reshape(ctx["w_shape"]), grad_b


class Linear(Function):
    tag = "linear"

    @staticmethod
    def forward(  # type: ignore[override]
        ctx: Context, x: np.ndarray, w: np.ndarray, b: np.ndarray
    ) -> np.ndarray:
        ctx.save(x=x, w=w)
        return x @ w.T + b

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> Tuple[np.ndarray, ...]:
        return grad @ ctx["w"], grad.T @ ctx["x"], grad.sum(axis=0)


class Sigmoid(Function):
    tag = "sigmoid"

    @staticmethod
    def forward(ctx: Context, x: np.ndarray) -> np.ndarray:  # type: ignore[override]
        out = np.empty_like(x)
        positive = x >= 0
        out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
        exp_x = np.exp(x[~positive])
        out[~positive] = exp_x / (1.0 + exp_x)
        ctx.save(out=out)
        return out

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> Tuple[np.ndarray]:
        out = ctx["out"]
        return (grad * out * (1.0 - out),)


class Tanh(Function):
    tag = "tanh"

    @staticmethod
    def forward(ctx: Context, x: np.ndarray) -> np.ndarray:  # type: ignore[override]
        out = np.tanh(x)
        ctx.save(out=out)
        return out

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> Tuple[np.ndarray]:
        out = ctx["out"]
        return (grad * (1.0 - out * out),)


class Relu(Function):
    tag = "relu"

    @staticmethod
    def forward(ctx: Context, x: np.ndarray) -> np.ndarray:  # type: ignore[override]
        mask = x > 0
        ctx.save(mask=mask)
        if _relu_masks is not None:
            _relu_masks.append(mask)
        return np.where(mask, x, np.zeros_like(x))

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (np.where(ctx["mask"], grad, np.zeros_like(grad)),)


class Add(Function):
    tag = "add"

    @staticmethod
    def forward(  # type: ignore[override]
        ctx: Context, a: np.ndarray, b: np.ndarray
    ) -> np.ndarray:
        return a + b

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return grad, grad


class Sub(Function):
    tag = "sub"

    @staticmethod
    def forward(  # type: ignore[override]
        ctx: Context, a: np.ndarray, b: np.ndarray
    ) -> np.ndarray:
        return a - b

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return grad, -grad


class Hadamard(Function):
    tag = "hadamard"

    @staticmethod
    def forward(  # type: ignore[override]
        ctx: Context, a: np.ndarray, b: np.ndarray
    ) -> np.ndarray:
        ctx.save(a=a, b=b)
        return a * b

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return grad * ctx["b"], grad * ctx["a"]


class Scale(Function):
    tag = "scale"

    @staticmethod
    def forward(  # type: ignore[override]
        ctx: Context, x: np.ndarray, factor: float = 1.0
    ) -> np.ndarray:
        ctx.save(factor=factor)
        return x * x.dtype.type(factor)

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (grad * grad.dtype.type(ctx["factor"]),)


class Sum(Function):
    tag = "sum"

    @staticmethod
    def forward(ctx: Context, x: np.ndarray) -> np.ndarray:  # type: ignore[override]
        ctx.save(shape=x.shape)
        return np.asarray(x.sum(), dtype=x.dtype)

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (np.full(ctx["shape"], grad, dtype=grad.dtype),)


class ConcatChannels(Function):
    tag = "concat_channels"

    @staticmethod
    def forward(  # type: ignore[override]
        ctx: Context, a: np.ndarray, b: np.ndarray
    ) -> np.ndarray:
        ctx.save(split=a.shape[1])
        return np.concatenate([a, b], axis=1)

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        split = ctx["split"]
        return grad[:, :split], grad[:, split:]


class SliceChannels(Function):
    tag = "slice_channels"

    @staticmethod
    def forward(  # type: ignore[override]
        ctx: Context, x: np.ndarray, start: int = 0, stop: int = 0
    ) -> np.ndarray:
        ctx.save(shape=x.shape, start=start, stop=stop)
        return x[:, start:stop].copy()

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> Tuple[np.ndarray]:
        full = np.zeros(ctx["shape"], dtype=grad.dtype)
        full[:, ctx["start"] : ctx["stop"]] = grad
        return (full,)


class GlobalAvgPool(Function):
    tag = "global_avg_pool"

    @staticmethod
    def forward(ctx: Context, x: np.ndarray) -> np.ndarray:  # type: ignore[override]
        ctx.save(shape=x.shape)
        return x.mean(axis=(2, 3))

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> Tuple[np.ndarray]:
        n, c, h, w = ctx["shape"]
        spread = grad[:, :, None, None] / grad.dtype.type(h * w)
        return (np.broadcast_to(spread, (n, c, h, w)).copy(),)


class AvgPool2d(Function):
    tag = "avg_pool2d"

    @staticmethod
    def forward(  # type: ignore[override]
        ctx: Context, x: np.ndarray, kernel: int = 2
    ) -> np.ndarray:
        n, c, h, w = x.shape
        ctx.save(kernel=kernel)
        blocks = x.reshape(n, c, h // kernel, kernel, w // kernel, kernel)
        return blocks.mean(axis=(3, 5))

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> Tuple[np.ndarray]:
        k = ctx["kernel"]
        spread = grad / grad.dtype.type(k * k)
        return (np.repeat(np.repeat(spread, k, axis=2), k, axis=3),)


class BroadcastBatch(Function):
    tag = "broadcast_batch"

    @staticmethod
    def forward(  # type: ignore[override]
        ctx: Context, x: np.ndarray, count: int = 1
    ) -> np.ndarray:
        return np.repeat(x, count, axis=0)

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (grad.sum(axis=0, keepdims=True),)


class MeanBatch(Function):
    tag = "mean_batch"

    @staticmethod
    def forward(ctx: Context, x: np.ndarray) -> np.ndarray:  # type: ignore[override]
        ctx.save(shape=x.shape)
        return x.mean(axis=0, keepdims=True)

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> Tuple[np.ndarray]:
        shape = ctx["shape"]
        return (np.broadcast_to(grad / grad.dtype.type(shape[0]), shape).copy(),)


class SoftmaxCrossEntropy(Function):
    tag = "softmax_cross_entropy"

    @staticmethod
    def forward(  # type: ignore[override]
        ctx: Context, logits: np.ndarray, labels: Any = None
    ) -> np.ndarray:
        n = logits.shape[0]
        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        total = exp.sum(axis=1, keepdims=True)
        rows = np.arange(n)
        losses = np.log(total[:, 0]) - shifted[rows, labels]
        ctx.save(probs=exp / total, labels=labels)
        return np.asarray(losses.mean(), dtype=logits.dtype)

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> Tuple[np.ndarray]:
        probs = ctx["probs"].copy()
        n = probs.shape[0]
        probs[np.arange(n), ctx["labels"]] -= 1.0
        return (probs * (grad / grad.dtype.type(n)),)


class L1Loss(Function):
    tag = "l1_loss"

    @staticmethod
    def forward(  # type: ignore[override]
        ctx: Context, a: np.ndarray, b: np.ndarray
    ) -> np.ndarray:
        diff = a - b
        ctx.save(sign=np.sign(diff))
        return np.asarray(np.abs(diff).mean(), dtype=a.dtype)

    @staticmethod
    def backward(ctx: Context, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        sign = ctx["sign"]
        g = sign * (grad / grad.dtype.type(sign.size))
        return g, -g


# ---------------------------------------------------------------------------
# Public operations (shape checking lives here, arithmetic in the Functions)
# ---------------------------------------------------------------------------


def _check_dtypes(op: str, *tensors: Tensor) -> None:
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        names = ", ".join(str(d) for d in sorted(dtypes, key=str))
        raise TypeError(f"{op}: mixed dtypes ({names})")


def _check_rank(op: str, tensor: Tensor, rank: int, what: str) -> None:
    if tensor.ndim != rank:
        raise ShapeError(
            f"{op}: {what} must have rank {rank}, got shape {tensor.shape}"
        )


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation of an NCHW input with ``weight`` [outC, inC, kH, kW]."""
    _check_rank("conv2d", x, 4, "input")
    _check_rank("conv2d", weight, 4, "weight")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"conv2d: input shape {x.shape} has {x.shape[1]} channels but weight "
            f"shape {weight.shape} expects {weight.shape[1]}"
        )
    if stride < 1 or padding < 0:
        raise ValueError(
            f"conv2d: stride must be >= 1 and padding >= 0, got {stride}, {padding}"
        )
    out_h = output_extent(x.shape[2], weight.shape[2], stride, padding)
    out_w = output_extent(x.shape[3], weight.shape[3], stride, padding)
    if out_h < 1 or out_w < 1:
        raise ShapeError(
            f"conv2d: input shape {x.shape} with weight shape {weight.shape}, "
            f"stride {stride}, padding {padding} gives output extent {out_h}x{out_w}"
        )
    if bias is None:
        bias = zeros((weight.shape[0],), x.dtype)
    elif bias.shape != (weight.shape[0],):
        raise ShapeError(
            f"conv2d: bias shape {bias.shape} does not match "
            f"weight shape {weight.shape}"
        )
    _check_dtypes("conv2d", x, weight, bias)
    return Conv2d.apply(x, weight, bias, stride=stride, padding=padding)


def conv_transpose2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Fractionally strided convolution with ``weight`` [inC, outC, kH, kW].

    The forward pass is the input-gradient of :func:`conv2d` with the same weight,
    stride and padding; output extents are ``(H - 1) * stride - 2 * padding + kH``.
    """
    _check_rank("conv_transpose2d", x, 4, "input")
    _check_rank("conv_transpose2d", weight, 4, "weight")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(
            f"conv_transpose2d: input shape {x.shape} has {x.shape[1]} channels but "
            f"weight shape {weight.shape} expects {weight.shape[0]}"
        )
    out_h = (x.shape[2] - 1) * stride - 2 * padding + weight.shape[2]
    out_w = (x.shape[3] - 1) * stride - 2 * padding + weight.shape[3]
    if stride < 1 or padding < 0 or out_h < 1 or out_w < 1:
        raise ShapeError(
            f"conv_transpose2d: input shape {x.shape} with "
            f"weight shape {weight.shape}, "
            f"stride {stride}, padding {padding} gives output extent {out_h}x{out_w}"
        )
    if bias is None:
        bias = zeros((weight.shape[1],), x.dtype)
    elif bias.shape != (weight.shape[1],):
        raise ShapeError(
            f"conv_transpose2d: bias shape {bias.shape} does not match "
            f"weight shape {weight.shape}"
        )
    _check_dtypes("conv_transpose2d", x, weight, bias)
    return ConvTranspose2d.apply(x, weight, bias, stride=stride, padding=padding)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map of ``x`` [N, F] with ``weight`` [O, F] and ``bias`` [O]."""
    _check_rank("linear", x, 2, "input")
    _check_rank("linear", weight, 2, "weight")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"linear: input shape {x.shape} does not match weight shape {weight.shape}"
        )
    if bias is None:
        bias = zeros((weight.shape[0],), x.dtype)
    elif bias.shape != (weight.shape[0],):
        raise ShapeError(
            f"linear: bias shape {bias.shape} does not match "
            f"weight shape {weight.shape}"
        )
    _check_dtypes("linear", x, weight, bias)
    return Linear.apply(x, weight, bias)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def tanh(x: Tensor) -> Tensor:
    return Tanh.apply(x)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    _check_dtypes("add", a, b)
    return Add.apply(a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    _check_dtypes("sub", a, b)
    return Sub.apply(a, b)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("hadamard", a, b)
    _check_dtypes("hadamard", a, b)
    return Hadamard.apply(a, b)


def scale(x: Tensor, factor: float) -> Tensor:
    return Scale.apply(x, factor=factor)


def sum(x: Tensor) -> Tensor:  # noqa: A001
    return Sum.apply(x)


_POINTWISE = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}
_BINARY = {"add": add, "sub": sub, "hadamard": hadamard}


def pointwise(op: str, a: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Dispatch an elementwise operation by name."""
    if op in _POINTWISE:
        if b is not None:
            raise TypeError(f"{op} is unary, got a second operand")
        return _POINTWISE[op](a)
    if op in _BINARY:
        if b is None:
            raise TypeError(f"{op} needs a second operand")
        return _BINARY[op](a, b)
    raise ValueError(f"Unknown pointwise op {op!r}")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two NCHW tensors along the channel axis."""
    _check_rank("concat_channels", a, 4, "first input")
    _check_rank("concat_channels", b, 4, "second input")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(
            f"concat_channels: shapes {a.shape} and {b.shape} differ outside channels"
        )
    _check_dtypes("concat_channels", a, b)
    return ConcatChannels.apply(a, b)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _check_rank("slice_channels", x, 4, "input")
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(
            f"slice_channels: [{start}:{stop}] out of range for shape {x.shape}"
        )
    return SliceChannels.apply(x, start=start, stop=stop)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over H and W: [N, C, H, W] -> [N, C]."""
    _check_rank("global_avg_pool", x, 4, "input")
    return GlobalAvgPool.apply(x)


def avg_pool2d(x: Tensor, kernel: int) -> Tensor:
    """Non-overlapping average pooling with stride equal to ``kernel``."""
    _check_rank("avg_pool2d", x, 4, "input")
    if kernel == 1:
        return x
    if x.shape[2] % kernel or x.shape[3] % kernel:
        raise ShapeError(
            f"avg_pool2d: shape {x.shape} is not divisible by kernel {kernel}"
        )
    return AvgPool2d.apply(x, kernel=kernel)


def broadcast_batch(x: Tensor, count: int) -> Tensor:
    """Replicate a batch-1 tensor ``count`` times along the batch axis."""
    if x.shape[0] != 1:
        raise ShapeError(
            f"broadcast_batch: expected batch extent 1, got shape {x.shape}"
        )
    if count == 1:
        return x
    return BroadcastBatch.apply(x, count=count)


def mean_batch(x: Tensor) -> Tensor:
    """Mean over the batch axis, keeping it with extent 1."""
    return MeanBatch.apply(x)


def softmax_cross_entropy(
    logits: Tensor, labels: Union[Sequence[int], np.ndarray]
) -> Tensor:
    """Batch mean of ``-log softmax(logits)[label]``, max-shifted for stability."""
    _check_rank("softmax_cross_entropy", logits, 2, "logits")
    label_array = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if label_array.shape[0] != n:
        raise ShapeError(
            f"softmax_cross_entropy: {label_array.shape[0]} labels for "
            f"logits shape {logits.shape}"
        )
    bad = label_array[(label_array < 0) | (label_array >= k)]
    if bad.size:
        raise ValueError(f"softmax_cross_entropy: label {int(bad[0])} outside [0, {k})")
    return SoftmaxCrossEntropy.apply(logits, labels=label_array)


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference; subgradient 0 at exact ties."""
    _check_same_shape("l1_loss", a, b)
    _check_dtypes("l1_loss", a, b)
    return L1Loss.apply(a, b)
