"""
Batch-related convolutional cells.

A cell keeps a latent state ``C`` that survives from one mini-batch to the next
inside an epoch. For every batch::

    i = sigmoid(W_xi * x + b_i)
    f = sigmoid(W_xf * x + b_f)
    o = sigmoid(W_xo * x + b_o)
    C_b = f o C_{b-1} + i o tanh(W_xc * x + b_c)
    y = o o tanh(C_b)

where ``*`` is a same-padded stride-1 convolution and ``o`` the Hadamard product.
The gates see only the current input; there is no hidden-state recurrence term.

The stored state is the batch mean of ``C_b`` (so consecutive batches of unrelated
samples never pair up slot by slot) and it is cut from the gradient graph. The v2
cell additionally carries an aggregated hidden state ``H``, recovers history
features from it with a transpose convolution and mixes them into the input with
a 1x1 convolution before running the same dynamics.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    broadcast_batch,
    concat_channels,
    conv2d,
    conv_transpose2d,
    hadamard,
    mean_batch,
    resolve_dtype,
    scale,
    sigmoid,
    tanh,
)

NamedTensors = List[Tuple[str, Tensor]]

FORGET_BIAS = 1.0


def uniform_param(
    rng: np.random.Generator,
    shape: Sequence[int],
    fan_in: int,
    dtype: Union[str, type] = "f32",
    name: Optional[str] = None,
) -> Tensor:
    """Trainable tensor drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

    Values are drawn in float64 and then cast, so f32 and f64 builds from the same
    seed hold the same parameters up to rounding.
    """
    bound = 1.0 / np.sqrt(fan_in)
    values = rng.uniform(-bound, bound, size=tuple(shape))
    return Tensor(values, requires_grad=True, dtype=dtype, name=name)


def constant_param(
    shape: Sequence[int],
    value: float,
    dtype: Union[str, type] = "f32",
    name: Optional[str] = None,
) -> Tensor:
    values = np.full(tuple(shape), value)
    return Tensor(values, requires_grad=True, dtype=dtype, name=name)


@dataclass
class BConvCellParams:
    """Gate kernels [cellC, inC, k, k] and biases [cellC] of a BConv-Cell."""

    w_xi: Tensor
    w_xf: Tensor
    w_xo: Tensor
    w_xc: Tensor
    b_i: Tensor
    b_f: Tensor
    b_o: Tensor
    b_c: Tensor

    def __post_init__(self) -> None:
        kernels = [self.w_xi, self.w_xf, self.w_xo, self.w_xc]
        shapes = {k.shape for k in kernels}
        if len(shapes) != 1:
            raise ShapeError(f"Gate kernels must share one shape, got {sorted(shapes)}")
        shape = kernels[0].shape
        if len(shape) != 4 or shape[2] != shape[3] or shape[2] % 2 == 0:
            raise ShapeError(
                f"Gate kernels must be [cellC, inC, k, k] with odd k, got {shape}"
            )
        for bias in (self.b_i, self.b_f, self.b_o, self.b_c):
            if bias.shape != (shape[0],):
                raise ShapeError(
                    f"Gate bias shape {bias.shape} does not match kernel shape {shape}"
                )

    @classmethod
    def init(
        cls,
        in_channels: int,
        cell_channels: int,
        kernel_size: int = 3,
        rng: Optional[np.random.Generator] = None,
        dtype: Union[str, type] = "f32",
    ) -> "BConvCellParams":
        rng = rng if rng is not None else np.random.default_rng()
        fan_in = in_channels * kernel_size * kernel_size
        shape = (cell_channels, in_channels, kernel_size, kernel_size)
        kernels = [uniform_param(rng, shape, fan_in, dtype) for _ in range(4)]
        biases = [uniform_param(rng, (cell_channels,), fan_in, dtype) for _ in range(4)]
        # forget gate starts open so early batches keep their state
        biases[1] = constant_param((cell_channels,), FORGET_BIAS, dtype)
        return cls(*kernels, *biases)

    @property
    def in_channels(self) -> int:
        return self.w_xi.shape[1]

    @property
    def cell_channels(self) -> int:
        return self.w_xi.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.w_xi.shape[2]

    @property
    def padding(self) -> int:
        return (self.kernel_size - 1) // 2

    @property
    def dtype(self) -> np.dtype:
        return self.w_xi.dtype

    def named_parameters(self, prefix: str = "") -> NamedTensors:
        names = ["w_xi", "w_xf", "w_xo", "w_xc", "b_i", "b_f", "b_o", "b_c"]
        return [(f"{prefix}{name}", getattr(self, name)) for name in names]


@dataclass
class BConvCellV2Params:
    """A BConv-Cell plus the history recovery and input mixing layers of v2.

    ``w_rec`` [cellC, recC, k, k] is a transpose-conv kernel over the hidden state;
    ``w_mix`` [inC, inC + recC, 1, 1] folds the recovered history back into the
    current input so the base cell sees its usual channel count.
    """

    base: BConvCellParams
    w_rec: Tensor
    b_rec: Tensor
    w_mix: Tensor
    b_mix: Tensor

    def __post_init__(self) -> None:
        in_c, cell_c = self.base.in_channels, self.base.cell_channels
        if self.w_rec.ndim != 4 or self.w_rec.shape[0] != cell_c:
            raise ShapeError(
                f"w_rec shape {self.w_rec.shape} must read {cell_c} hidden channels"
            )
        rec_c = self.w_rec.shape[1]
        if self.b_rec.shape != (rec_c,):
            raise ShapeError(
                f"b_rec shape {self.b_rec.shape} does not match "
                f"w_rec shape {self.w_rec.shape}"
            )
        if self.w_mix.shape != (in_c, in_c + rec_c, 1, 1):
            raise ShapeError(
                f"w_mix shape {self.w_mix.shape} must be {(in_c, in_c + rec_c, 1, 1)}"
            )
        if self.b_mix.shape != (in_c,):
            raise ShapeError(
                f"b_mix shape {self.b_mix.shape} does not match "
                f"w_mix shape {self.w_mix.shape}"
            )

    @classmethod
    def init(
        cls,
        in_channels: int,
        cell_channels: int,
        rec_channels: Optional[int] = None,
        kernel_size: int = 3,
        rng: Optional[np.random.Generator] = None,
        dtype: Union[str, type] = "f32",
    ) -> "BConvCellV2Params":
        rng = rng if rng is not None else np.random.default_rng()
        rec_channels = rec_channels or cell_channels
        base = BConvCellParams.init(in_channels, cell_channels, kernel_size, rng, dtype)
        rec_fan_in = cell_channels * kernel_size * kernel_size
        mix_fan_in = in_channels + rec_channels
        rec_shape = (cell_channels, rec_channels, kernel_size, kernel_size)
        mix_shape = (in_channels, mix_fan_in, 1, 1)
        return cls(
            base=base,
            w_rec=uniform_param(rng, rec_shape, rec_fan_in, dtype),
            b_rec=uniform_param(rng, (rec_channels,), rec_fan_in, dtype),
            w_mix=uniform_param(rng, mix_shape, mix_fan_in, dtype),
            b_mix=uniform_param(rng, (in_channels,), mix_fan_in, dtype),
        )

    @property
    def in_channels(self) -> int:
        return self.base.in_channels

    @property
    def cell_channels(self) -> int:
        return self.base.cell_channels

    @property
    def rec_channels(self) -> int:
        return self.w_rec.shape[1]

    @property
    def padding(self) -> int:
        return self.base.padding

    @property
    def dtype(self) -> np.dtype:
        return self.base.dtype

    def named_parameters(self, prefix: str = "") -> NamedTensors:
        return self.base.named_parameters(prefix) + [
            (f"{prefix}w_rec", self.w_rec),
            (f"{prefix}b_rec", self.b_rec),
            (f"{prefix}w_mix", self.w_mix),
            (f"{prefix}b_mix", self.b_mix),
        ]


CellParams = Union[BConvCellParams, BConvCellV2Params]


@dataclass
class CellState:
    """Batch-reduced latent state ``c`` [1, cellC, H, W].

    v2 cells also carry the aggregated hidden state ``h`` of the same shape.
    """

    c: Tensor
    h: Optional[Tensor] = None
    epoch_fresh: bool = True

    @classmethod
    def zeros(
        cls,
        cell_channels: int,
        height: int,
        width: int,
        hidden: bool = False,
        dtype: Union[str, type] = "f32",
    ) -> "CellState":
        dtype = resolve_dtype(dtype)
        shape = (1, cell_channels, height, width)
        c = Tensor(np.zeros(shape, dtype=dtype))
        h = Tensor(np.zeros(shape, dtype=dtype)) if hidden else None
        return cls(c=c, h=h, epoch_fresh=True)

    @classmethod
    def for_params(cls, params: CellParams, height: int, width: int) -> "CellState":
        return cls.zeros(
            params.cell_channels,
            height,
            width,
            hidden=isinstance(params, BConvCellV2Params),
            dtype=params.dtype,
        )

    @property
    def has_hidden(self) -> bool:
        return self.h is not None

    def is_zero(self) -> bool:
        if np.any(self.c.data):
            return False
        return self.h is None or not np.any(self.h.data)

    def copy(self) -> "CellState":
        """Detached deep copy (values only)."""
        return CellState(
            c=Tensor(self.c.data.copy()),
            h=Tensor(self.h.data.copy()) if self.h is not None else None,
            epoch_fresh=self.epoch_fresh,
        )


def reset_state(state: CellState) -> CellState:
    """Zero ``c`` (and ``h``) and mark the state fresh for a new epoch."""
    return CellState(
        c=Tensor(np.zeros_like(state.c.data)),
        h=Tensor(np.zeros_like(state.h.data)) if state.h is not None else None,
        epoch_fresh=True,
    )


def _check_state(x: Tensor, state: CellState, params: CellParams) -> None:
    expected = (1, params.cell_channels, x.shape[2], x.shape[3])
    if x.ndim != 4:
        raise ShapeError(f"Cell input must be NCHW, got shape {x.shape}")
    if state.c.shape != expected:
        raise ShapeError(
            f"Cell state shape {state.c.shape} does not match input shape "
            f"{x.shape} (expected {expected})"
        )
    if isinstance(params, BConvCellV2Params):
        if state.h is None:
            raise ShapeError("BConv-Cell-v2 needs a hidden state, got none")
        if state.h.shape != expected:
            raise ShapeError(
                f"Hidden state shape {state.h.shape} does not match "
                f"input shape {x.shape}"
            )


def _gated_update(
    x: Tensor, c_prev: Tensor, params: BConvCellParams
) -> Tuple[Tensor, Tensor]:
    """Run the gate equations; returns the output and the per-sample latent state."""
    pad = params.padding
    i = sigmoid(conv2d(x, params.w_xi, params.b_i, padding=pad))
    f = sigmoid(conv2d(x, params.w_xf, params.b_f, padding=pad))
    o = sigmoid(conv2d(x, params.w_xo, params.b_o, padding=pad))
    g = tanh(conv2d(x, params.w_xc, params.b_c, padding=pad))
    c_new = add(hadamard(f, broadcast_batch(c_prev, x.shape[0])), hadamard(i, g))
    y = hadamard(o, tanh(c_new))
    return y, c_new


def aggregate_hidden(h_prev: Tensor, y: Tensor) -> Tensor:
    """Running average of the stored hidden state and this batch's mean output."""
    return scale(add(h_prev, mean_batch(y)), 0.5)


def _recover_history(h_prev: Tensor, params: BConvCellV2Params, batch: int) -> Tensor:
    recovered = conv_transpose2d(
        h_prev, params.w_rec, params.b_rec, stride=1, padding=params.padding
    )
    return broadcast_batch(recovered, batch)


def _v2_update(
    x: Tensor, c_prev: Tensor, h_prev: Tensor, params: BConvCellV2Params
) -> Tuple[Tensor, Tensor, Tensor]:
    recovered = _recover_history(h_prev, params, x.shape[0])
    mixed = conv2d(concat_channels(x, recovered), params.w_mix, params.b_mix)
    y, c_new = _gated_update(mixed, c_prev, params.base)
    return y, c_new, aggregate_hidden(h_prev, y)


def bconv_forward(
    x: Tensor,
    state: CellState,
    params: BConvCellParams,
    state_backprop: bool = False,
) -> Tuple[Tensor, CellState]:
    """One BConv-Cell step.

    Args:
        x: Input [N, inC, H, W].
        state: State left behind by the previous batch (zeros at epoch start).
        params: Gate parameters.
        state_backprop: Keep the returned state attached to this batch's cell
            computation so the next batch's loss reaches these parameters. The
            attachment never reaches further back than one batch.

    Returns:
        ``(y, new_state)`` with ``y`` [N, cellC, H, W] and the batch mean of the new
        latent state.
    """
    _check_state(x, state, params)
    y, c_new = _gated_update(x, state.c, params)
    if state_backprop:
        _, c_carry = _gated_update(x.detach(), state.c.detach(), params)
        new_c = mean_batch(c_carry)
    else:
        new_c = mean_batch(c_new).detach()
    return y, CellState(c=new_c, h=None, epoch_fresh=False)


def bconv_v2_forward(
    x: Tensor,
    state: CellState,
    params: BConvCellV2Params,
    state_backprop: bool = False,
) -> Tuple[Tensor, CellState]:
    """One BConv-Cell-v2 step: recover history, mix it into ``x``, run the gates."""
    _check_state(x, state, params)
    assert state.h is not None
    y, c_new, h_new = _v2_update(x, state.c, state.h, params)
    if state_backprop:
        _, c_carry, h_carry = _v2_update(
            x.detach(), state.c.detach(), state.h.detach(), params
        )
        new_c, new_h = mean_batch(c_carry), h_carry
    else:
        new_c, new_h = mean_batch(c_new).detach(), h_new.detach()
    return y, CellState(c=new_c, h=new_h, epoch_fresh=False)


def cell_forward(
    x: Tensor, state: CellState, params: CellParams, state_backprop: bool = False
) -> Tuple[Tensor, CellState]:
    """Dispatch to the v1 or v2 step depending on the parameter type."""
    if isinstance(params, BConvCellV2Params):
        return bconv_v2_forward(x, state, params, state_backprop)
    return bconv_forward(x, state, params, state_backprop)


# ---------------------------------------------------------------------------
# Reference unrolling (plain numpy, no autodiff, no im2col)
# ---------------------------------------------------------------------------


def _reference_conv(
    x: np.ndarray, w: np.ndarray, b: np.ndarray, padding: int
) -> np.ndarray:
    n, _, h, width = x.shape
    k = w.shape[2]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_h, out_w = h + 2 * padding - k + 1, width + 2 * padding - k + 1
    out = np.zeros((n, w.shape[0], out_h, out_w), dtype=x.dtype)
    for di in range(k):
        for dj in range(k):
            window = xp[:, :, di : di + out.shape[2], dj : dj + out.shape[3]]
            out += np.einsum("oc,nchw->nohw", w[:, :, di, dj], window)
    return out + b[None, :, None, None]


def _reference_conv_transpose(
    x: np.ndarray, w: np.ndarray, b: np.ndarray, padding: int
) -> np.ndarray:
    n, _, h, width = x.shape
    k = w.shape[2]
    out = np.zeros((n, w.shape[1], h + k - 1, width + k - 1), dtype=x.dtype)
    for di in range(k):
        for dj in range(k):
            tap = np.einsum("co,nchw->nohw", w[:, :, di, dj], x)
            out[:, :, di : di + h, dj : dj + width] += tap
    out = out[:, :, padding : out.shape[2] - padding, padding : out.shape[3] - padding]
    return out + b[None, :, None, None]


def _reference_sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _reference_gates(
    x: np.ndarray, c_prev: np.ndarray, p: BConvCellParams
) -> Tuple[np.ndarray, np.ndarray]:
    pad = p.padding
    i = _reference_sigmoid(_reference_conv(x, p.w_xi.data, p.b_i.data, pad))
    f = _reference_sigmoid(_reference_conv(x, p.w_xf.data, p.b_f.data, pad))
    o = _reference_sigmoid(_reference_conv(x, p.w_xo.data, p.b_o.data, pad))
    g = np.tanh(_reference_conv(x, p.w_xc.data, p.b_c.data, pad))
    c_new = f * c_prev + i * g
    return o * np.tanh(c_new), c_new


def latent_unroll_oracle(
    inputs: Sequence[Tensor], params: CellParams, version: str = "v1"
) -> CellState:
    """State after feeding ``inputs`` one batch at a time through a fresh state.

    An independent restatement of the recurrence (direct-sum convolutions, no
    gradient graph) used to check the incremental path.
    """
    if version not in ("v1", "v2"):
        raise ValueError(f"version must be 'v1' or 'v2', got {version!r}")
    if (version == "v2") != isinstance(params, BConvCellV2Params):
        raise TypeError(
            f"version {version} does not match parameters {type(params).__name__}"
        )
    if not inputs:
        raise ValueError("latent_unroll_oracle needs at least one input batch")

    _, _, h, w = inputs[0].shape
    dtype = params.dtype
    c = np.zeros((1, params.cell_channels, h, w), dtype=dtype)
    hidden = np.zeros_like(c)
    for b, x in enumerate(inputs, start=1):
        data = x.data
        if isinstance(params, BConvCellV2Params):
            recovered = _reference_conv_transpose(
                hidden, params.w_rec.data, params.b_rec.data, params.padding
            )
            recovered = np.repeat(recovered, data.shape[0], axis=0)
            stacked = np.concatenate([data, recovered], axis=1)
            data = _reference_conv(stacked, params.w_mix.data, params.b_mix.data, 0)
            y, c_new = _reference_gates(data, c, params.base)
            hidden = 0.5 * (hidden + y.mean(axis=0, keepdims=True))
        else:
            y, c_new = _reference_gates(data, c, params)
        c = c_new.mean(axis=0, keepdims=True)
        logging.debug(f"Unrolled batch {b}: |C| = {float(np.linalg.norm(c)):.6g}")

    return CellState(
        c=Tensor(c),
        h=Tensor(hidden) if version == "v2" else None,
        epoch_fresh=False,
    )
