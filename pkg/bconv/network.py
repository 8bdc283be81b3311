"""
PTL networks: a plain conv-block backbone paired with BConv-Cells.

Layout (i >= 1)::

    x^0 = image
    y^0 = cell_0(fuse_0(image))                                  # stem
    x^i = block_i(x^{i-1})
    y^i = cell_i(fuse_i(concat(x^i, pool_i(y^{i-1}))))
    feature = global_avg_pool(fusion(concat(x^last, y^last)))
    logits = head(feature)

``pool_i`` averages ``y^{i-1}`` with the stride of ``block_i`` so both halves of
the concatenation share spatial extents. The baseline :class:`BackboneNetwork`
keeps the blocks, an x-only fusion layer and the head, and drops every cell.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .cells import (
    BConvCellParams,
    BConvCellV2Params,
    CellParams,
    CellState,
    NamedTensors,
    cell_forward,
    reset_state,
    uniform_param,
)
from .tensor import (
    ShapeError,
    Tensor,
    avg_pool2d,
    concat_channels,
    conv2d,
    global_avg_pool,
    linear,
    output_extent,
    relu,
)

MODES = ("train", "eval")
VERSIONS = ("v1", "v2")


@dataclass(frozen=True)
class NetworkConfig:
    """Topology of a PTL network (and of its backbone-only counterpart)."""

    in_channels: int = 3
    resolution: Tuple[int, int] = (32, 32)
    classes: int = 10
    stem_channels: int = 8
    block_channels: Tuple[int, ...] = (16, 32, 64)
    block_strides: Tuple[int, ...] = (1, 2, 2)
    cell_channels: Tuple[int, ...] = (8, 16, 16)
    feature_channels: int = 64
    hidden_channels: int = 128
    kernel_size: int = 3
    version: str = "v1"
    rec_channels: Optional[int] = None
    dtype: str = "f32"
    state_backprop: bool = False

    def validate(self) -> None:
        """Check channel and spatial bookkeeping end to end."""
        if self.version not in VERSIONS:
            raise ValueError(
                f"version must be one of {VERSIONS}, got {self.version!r}"
            )
        lengths = (
            len(self.block_channels),
            len(self.block_strides),
            len(self.cell_channels),
        )
        if len(set(lengths)) != 1:
            raise ShapeError(
                "block_channels, block_strides and cell_channels must have "
                f"equal length, got {lengths[0]}, {lengths[1]}, {lengths[2]}"
            )
        if not self.block_channels:
            raise ShapeError("a network needs at least one block")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ShapeError(
                f"kernel_size must be odd and positive, got {self.kernel_size}"
            )
        self.spatial_plan()

    def spatial_plan(self) -> List[Tuple[int, int]]:
        """Spatial extents of x^0 .. x^last.

        Raises when a pooled y^{i-1} cannot line up with x^i.
        """
        h, w = self.resolution
        plan = [(h, w)]
        pad = (self.kernel_size - 1) // 2
        for i, stride in enumerate(self.block_strides):
            if stride < 1:
                raise ShapeError(f"block {i}: stride must be >= 1, got {stride}")
            next_h = output_extent(h, self.kernel_size, stride, pad)
            next_w = output_extent(w, self.kernel_size, stride, pad)
            pooled = (h // stride, w // stride)
            if h % stride or w % stride or pooled != (next_h, next_w):
                raise ShapeError(
                    f"block {i}: extent {h}x{w} does not divide evenly "
                    f"by stride {stride}"
                )
            h, w = next_h, next_w
            plan.append((h, w))
        return plan


@dataclass
class Conv:
    """A conv2d layer with its own stride and padding."""

    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0

    @classmethod
    def init(
        cls,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int,
        rng: np.random.Generator,
        dtype: str,
    ) -> "Conv":
        fan_in = in_channels * kernel_size * kernel_size
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        return cls(
            weight=uniform_param(rng, shape, fan_in, dtype),
            bias=uniform_param(rng, (out_channels,), fan_in, dtype),
            stride=stride,
            padding=(kernel_size - 1) // 2,
        )

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(
            x, self.weight, self.bias, stride=self.stride, padding=self.padding
        )

    def named_parameters(self, prefix: str = "") -> NamedTensors:
        return [(f"{prefix}weight", self.weight), (f"{prefix}bias", self.bias)]


@dataclass
class Dense:
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(
        cls,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        dtype: str,
    ) -> "Dense":
        return cls(
            weight=uniform_param(rng, (out_features, in_features), in_features, dtype),
            bias=uniform_param(rng, (out_features,), in_features, dtype),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def named_parameters(self, prefix: str = "") -> NamedTensors:
        return [(f"{prefix}weight", self.weight), (f"{prefix}bias", self.bias)]


@dataclass
class ConvBlock:
    """Two same-padded convolutions with rectifiers; the first one may stride."""

    conv1: Conv
    conv2: Conv

    @classmethod
    def init(
        cls,
        in_channels: int,
        out_channels: int,
        stride: int,
        kernel_size: int,
        rng: np.random.Generator,
        dtype: str,
    ) -> "ConvBlock":
        return cls(
            conv1=Conv.init(in_channels, out_channels, kernel_size, stride, rng, dtype),
            conv2=Conv.init(out_channels, out_channels, kernel_size, 1, rng, dtype),
        )

    @property
    def stride(self) -> int:
        return self.conv1.stride

    @property
    def out_channels(self) -> int:
        return self.conv2.out_channels

    def __call__(self, x: Tensor) -> Tensor:
        return relu(self.conv2(relu(self.conv1(x))))

    def named_parameters(self, prefix: str = "") -> NamedTensors:
        return self.conv1.named_parameters(
            f"{prefix}conv1."
        ) + self.conv2.named_parameters(f"{prefix}conv2.")


@dataclass
class Head:
    """Two linear layers with a rectifier in between."""

    hidden: Dense
    out: Dense

    @classmethod
    def init(
        cls,
        features: int,
        hidden: int,
        classes: int,
        rng: np.random.Generator,
        dtype: str,
    ) -> "Head":
        return cls(
            Dense.init(features, hidden, rng, dtype),
            Dense.init(hidden, classes, rng, dtype),
        )

    def __call__(self, feature: Tensor) -> Tensor:
        return self.out(relu(self.hidden(feature)))

    def named_parameters(self, prefix: str = "") -> NamedTensors:
        return self.hidden.named_parameters(
            f"{prefix}hidden."
        ) + self.out.named_parameters(f"{prefix}out.")


@dataclass
class BlockPair:
    """One conv-block, its 1x1 fusion layer and its cell."""

    block: ConvBlock
    fuse: Conv
    cell: CellParams

    def __post_init__(self) -> None:
        if self.fuse.out_channels != self.cell.in_channels:
            raise ShapeError(
                f"fuse output channels {self.fuse.out_channels} do not match "
                f"cell input channels {self.cell.in_channels}"
            )

    def downsample_y(self, y_prev: Tensor) -> Tensor:
        return avg_pool2d(y_prev, self.block.stride)

    def named_parameters(self, prefix: str = "") -> NamedTensors:
        return (
            self.block.named_parameters(f"{prefix}block.")
            + self.fuse.named_parameters(f"{prefix}fuse.")
            + self.cell.named_parameters(f"{prefix}cell.")
        )


def _init_cell(
    config: NetworkConfig,
    in_channels: int,
    cell_channels: int,
    rng: np.random.Generator,
) -> CellParams:
    if config.version == "v2":
        return BConvCellV2Params.init(
            in_channels,
            cell_channels,
            rec_channels=config.rec_channels,
            kernel_size=config.kernel_size,
            rng=rng,
            dtype=config.dtype,
        )
    return BConvCellParams.init(
        in_channels, cell_channels, config.kernel_size, rng, config.dtype
    )


def _check_image(config: NetworkConfig, images: Tensor) -> None:
    expected = (config.in_channels,) + tuple(config.resolution)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ShapeError(
            f"image shape {images.shape} does not match configured [N, {expected}]"
        )


class _Network:
    """Parameter bookkeeping shared by PTL and backbone-only networks."""

    kind = "network"

    def __init__(self, config: NetworkConfig):
        self.config = config
        self.mode = "train"

    def named_parameters(self) -> NamedTensors:
        raise NotImplementedError

    def parameters(self) -> List[Tensor]:
        return [tensor for _, tensor in self.named_parameters()]

    def param_count(self) -> int:
        """Exact number of scalar parameters."""
        return sum(tensor.size for _, tensor in self.named_parameters())

    def assign_parameters(
        self, values: Mapping[str, np.ndarray], strict: bool = True
    ) -> List[str]:
        """Copy values into the parameters by name.

        Returns the names that were left untouched (missing or shape mismatch).
        With ``strict`` any such name raises a ``ShapeError`` listing all of them
        before anything is written.
        """
        named = self.named_parameters()
        skipped = []
        for name, tensor in named:
            value = values.get(name)
            if value is None:
                skipped.append(f"{name}: missing")
            elif tuple(value.shape) != tensor.shape:
                got = tuple(value.shape)
                skipped.append(f"{name}: expected {tensor.shape}, got {got}")
        known = {name for name, _ in named}
        extra = [f"{name}: not in this network" for name in values if name not in known]
        if strict and (skipped or extra):
            raise ShapeError("Topology mismatch: " + "; ".join(skipped + extra))

        untouched = [entry.split(":")[0] for entry in skipped]
        for name, tensor in named:
            if name in untouched:
                continue
            tensor.data = np.array(values[name], dtype=tensor.dtype)
        return untouched

    def set_mode(self, mode: str) -> "_Network":
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        self.mode = mode
        return self

    def __repr__(self) -> str:
        name = type(self).__name__
        return f"<{name} {self.param_count()} params, mode={self.mode}>"


class PTLNetwork(_Network):
    """Backbone conv-blocks paired with BConv-Cells (v1) or BConv-Cell-v2s (v2)."""

    kind = "ptl"

    def __init__(
        self,
        config: NetworkConfig,
        stem_fuse: Conv,
        stem_cell: CellParams,
        pairs: Sequence[BlockPair],
        fusion: Conv,
        head: Head,
    ):
        super().__init__(config)
        self.stem_fuse = stem_fuse
        self.stem_cell = stem_cell
        self.pairs = list(pairs)
        self.fusion = fusion
        self.head = head
        self.state_backprop = config.state_backprop
        self._plan = config.spatial_plan()
        self._check_topology()
        self.states: List[CellState] = []
        self.reset_states()

    @classmethod
    def build(
        cls, config: NetworkConfig, rng: Optional[np.random.Generator] = None
    ) -> "PTLNetwork":
        config.validate()
        rng = rng if rng is not None else np.random.default_rng()
        dtype, k = config.dtype, config.kernel_size
        stem_c = config.stem_channels
        stem_fuse = Conv.init(config.in_channels, stem_c, 1, 1, rng, dtype)
        stem_cell = _init_cell(config, stem_c, stem_c, rng)

        pairs = []
        x_channels, y_channels = config.in_channels, stem_c
        for out_c, stride, cell_c in zip(
            config.block_channels, config.block_strides, config.cell_channels
        ):
            block = ConvBlock.init(x_channels, out_c, stride, k, rng, dtype)
            fuse = Conv.init(out_c + y_channels, cell_c, 1, 1, rng, dtype)
            cell = _init_cell(config, cell_c, cell_c, rng)
            pairs.append(BlockPair(block, fuse, cell))
            x_channels, y_channels = out_c, cell_c

        features = config.feature_channels
        fusion = Conv.init(x_channels + y_channels, features, 1, 1, rng, dtype)
        head = Head.init(features, config.hidden_channels, config.classes, rng, dtype)
        network = cls(config, stem_fuse, stem_cell, pairs, fusion, head)
        logging.info(
            f"Built PTL-{config.version} network with "
            f"{network.param_count()} parameters"
        )
        return network

    def _check_topology(self) -> None:
        if self.stem_fuse.in_channels != self.config.in_channels:
            raise ShapeError(
                f"stem fuse reads {self.stem_fuse.in_channels} channels, "
                f"images have {self.config.in_channels}"
            )
        if self.stem_fuse.out_channels != self.stem_cell.in_channels:
            raise ShapeError("stem fuse output channels do not match the stem cell")
        x_channels = self.config.in_channels
        y_channels = self.stem_cell.cell_channels
        for i, pair in enumerate(self.pairs):
            reads = pair.block.conv1.in_channels
            if reads != x_channels:
                raise ShapeError(
                    f"pair {i}: block reads {reads} channels, gets {x_channels}"
                )
            expected = pair.block.out_channels + y_channels
            if pair.fuse.in_channels != expected:
                raise ShapeError(
                    f"pair {i}: fuse reads {pair.fuse.in_channels} channels, "
                    f"gets {expected}"
                )
            x_channels, y_channels = pair.block.out_channels, pair.cell.cell_channels
        if self.fusion.in_channels != x_channels + y_channels:
            raise ShapeError(
                f"fusion reads {self.fusion.in_channels} channels, "
                f"gets {x_channels + y_channels}"
            )
        if self.head.hidden.weight.shape[1] != self.fusion.out_channels:
            raise ShapeError("head input extent does not match the fused features")

    # -- parameters ---------------------------------------------------------

    @property
    def cells(self) -> List[CellParams]:
        """Stem cell first, then one cell per pair."""
        return [self.stem_cell] + [pair.cell for pair in self.pairs]

    @property
    def cell_names(self) -> List[str]:
        return ["stem"] + [f"pair{i}" for i in range(len(self.pairs))]

    @property
    def feature_channels(self) -> int:
        return self.fusion.out_channels

    def named_parameters(self) -> NamedTensors:
        named = self.stem_fuse.named_parameters("stem.fuse.")
        named += self.stem_cell.named_parameters("stem.cell.")
        for i, pair in enumerate(self.pairs):
            named += pair.named_parameters(f"pairs.{i}.")
        named += self.fusion.named_parameters("fusion.")
        return named + self.head.named_parameters("head.")

    def cell_path_fusion_columns(self) -> slice:
        """Input-channel columns of ``fusion.weight`` that read the last cell output."""
        return slice(self.pairs[-1].block.out_channels, self.fusion.in_channels)

    def to_backbone(self) -> "BackboneNetwork":
        """Backbone-only network sharing blocks and head.

        Its fusion layer keeps only the columns that read x channels.
        """
        x_cols = self.cell_path_fusion_columns().start
        weight = self.fusion.weight.data[:, :x_cols].copy()
        fusion = Conv(
            weight=Tensor(weight, requires_grad=True),
            bias=Tensor(self.fusion.bias.data.copy(), requires_grad=True),
        )
        blocks = [pair.block for pair in self.pairs]
        return BackboneNetwork(self.config, blocks, fusion, self.head)

    # -- states -------------------------------------------------------------

    def reset_states(self) -> None:
        """Zero every latent (and hidden) state; called at each epoch start."""
        if self.states:
            self.states = [reset_state(state) for state in self.states]
            return
        # stem runs at input resolution, pair i at the extent of x^{i+1}
        self.states = [
            CellState.for_params(cell, h, w)
            for cell, (h, w) in zip(self.cells, self._plan)
        ]

    def states_are_zero(self) -> bool:
        return all(state.is_zero() for state in self.states)

    def snapshot_states(self) -> List[CellState]:
        return [state.copy() for state in self.states]

    def restore_states(self, states: Sequence[CellState]) -> None:
        if len(states) != len(self.states):
            raise ShapeError(f"expected {len(self.states)} states, got {len(states)}")
        self.states = [state.copy() for state in states]

    def state_summary(self) -> List[Dict[str, Union[str, float]]]:
        """L2 norm and mean of every stored ``C`` (and ``H``)."""
        rows: List[Dict[str, Union[str, float]]] = []
        for name, state in zip(self.cell_names, self.states):
            row: Dict[str, Union[str, float]] = {
                "cell": name,
                "c_norm": float(np.linalg.norm(state.c.data)),
                "c_mean": float(state.c.data.mean()),
                "h_norm": "",
                "h_mean": "",
            }
            if state.h is not None:
                row["h_norm"] = float(np.linalg.norm(state.h.data))
                row["h_mean"] = float(state.h.data.mean())
            rows.append(row)
        return rows

    def set_mode(self, mode: str) -> "PTLNetwork":
        """Switch between train and eval; entering eval zeroes every state."""
        super().set_mode(mode)
        if mode == "eval":
            self.reset_states()
        return self

    # -- forward ------------------------------------------------------------

    def _cell_step(
        self, index: int, x: Tensor, cell: CellParams, update: bool
    ) -> Tensor:
        state = self.states[index]
        carry = self.state_backprop and update
        y, new_state = cell_forward(x, state, cell, state_backprop=carry)
        if update:
            self.states[index] = new_state
        return y

    def _writes_state(self, update_state: Optional[bool]) -> bool:
        return self.mode == "train" and update_state is not False

    def stem_forward(
        self, image: Tensor, update_state: Optional[bool] = None
    ) -> Tensor:
        """y^0 = cell_0(fuse_0(image)) against the stem state."""
        _check_image(self.config, image)
        update = self._writes_state(update_state)
        return self._cell_step(0, self.stem_fuse(image), self.stem_cell, update)

    def pair_forward(
        self,
        index: int,
        x_prev: Tensor,
        y_prev: Tensor,
        update_state: Optional[bool] = None,
    ) -> Tuple[Tensor, Tensor]:
        """x^i = block(x^{i-1}); y^i = cell(fuse(concat(x^i, pool(y^{i-1}))))."""
        pair = self.pairs[index]
        x = pair.block(x_prev)
        fused = pair.fuse(concat_channels(x, pair.downsample_y(y_prev)))
        update = self._writes_state(update_state)
        y = self._cell_step(index + 1, fused, pair.cell, update)
        return x, y

    def forward(
        self, images: Tensor, update_state: Optional[bool] = None
    ) -> Tuple[Tensor, Tensor]:
        """Run the whole network; returns ``(logits [N, K], feature [N, F])``.

        In train mode the cell states advance unless ``update_state`` is False. In
        eval mode the (all-zero) states are read and never written.
        """
        if self.mode == "eval" and not self.states_are_zero():
            raise RuntimeError("eval mode requires all-zero cell states")
        y = self.stem_forward(images, update_state)
        x = images
        for index in range(len(self.pairs)):
            x, y = self.pair_forward(index, x, y, update_state)
        feature = global_avg_pool(self.fusion(concat_channels(x, y)))
        return self.head(feature), feature

    __call__ = forward


class BackboneNetwork(_Network):
    """The conv-block stack, an x-only 1x1 fusion layer and the head; no cells."""

    kind = "backbone"

    def __init__(
        self,
        config: NetworkConfig,
        blocks: Sequence[ConvBlock],
        fusion: Conv,
        head: Head,
    ):
        super().__init__(config)
        self.blocks = list(blocks)
        self.fusion = fusion
        self.head = head
        config.spatial_plan()
        if self.fusion.in_channels != self.blocks[-1].out_channels:
            raise ShapeError(
                f"fusion reads {self.fusion.in_channels} channels, "
                f"last block gives {self.blocks[-1].out_channels}"
            )

    @classmethod
    def build(
        cls, config: NetworkConfig, rng: Optional[np.random.Generator] = None
    ) -> "BackboneNetwork":
        config.validate()
        rng = rng if rng is not None else np.random.default_rng()
        dtype, k = config.dtype, config.kernel_size
        blocks = []
        channels = config.in_channels
        for out_c, stride in zip(config.block_channels, config.block_strides):
            blocks.append(ConvBlock.init(channels, out_c, stride, k, rng, dtype))
            channels = out_c
        features = config.feature_channels
        fusion = Conv.init(channels, features, 1, 1, rng, dtype)
        head = Head.init(features, config.hidden_channels, config.classes, rng, dtype)
        network = cls(config, blocks, fusion, head)
        logging.info(f"Built backbone network with {network.param_count()} parameters")
        return network

    @property
    def feature_channels(self) -> int:
        return self.fusion.out_channels

    def named_parameters(self) -> NamedTensors:
        named: NamedTensors = []
        for i, block in enumerate(self.blocks):
            named += block.named_parameters(f"blocks.{i}.")
        named += self.fusion.named_parameters("fusion.")
        return named + self.head.named_parameters("head.")

    def states_are_zero(self) -> bool:
        return True

    def reset_states(self) -> None:
        """Nothing to reset; present so training loops treat both kinds alike."""

    def forward(
        self, images: Tensor, update_state: Optional[bool] = None
    ) -> Tuple[Tensor, Tensor]:
        _check_image(self.config, images)
        x = images
        for block in self.blocks:
            x = block(x)
        feature = global_avg_pool(self.fusion(x))
        return self.head(feature), feature

    __call__ = forward


Network = Union[PTLNetwork, BackboneNetwork]


def build_network(
    config: NetworkConfig,
    rng: Optional[np.random.Generator] = None,
    cells: bool = True,
) -> Network:
    """PTL network when ``cells`` is true, backbone-only baseline otherwise."""
    if cells:
        return PTLNetwork.build(config, rng)
    return BackboneNetwork.build(config, rng)


def build_backbone(
    config: NetworkConfig, rng: Optional[np.random.Generator] = None
) -> BackboneNetwork:
    """Baseline / distillation student with the blocks and head of ``config``."""
    return BackboneNetwork.build(config, rng)


def network_forward(images: Tensor, network: Network) -> Tuple[Tensor, Tensor]:
    return network.forward(images)


def backbone_only_forward(
    images: Tensor, network: BackboneNetwork
) -> Tuple[Tensor, Tensor]:
    if not isinstance(network, BackboneNetwork):
        raise TypeError(f"expected a BackboneNetwork, got {type(network).__name__}")
    return network.forward(images)


def param_count(network: Network) -> int:
    return network.param_count()


def set_mode(network: Network, mode: str) -> Network:
    network.set_mode(mode)
    return network
