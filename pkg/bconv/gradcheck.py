"""
Central finite-difference checks of the reverse-mode gradients.

Every check works in float64: a scalar loss closure is evaluated at ``p + eps``
and ``p - eps`` for randomly chosen coordinates of every leaf and compared to the
analytic gradient from :func:`bconv.tensor.backward`. A coordinate whose step
flips a relu unit measures a one-sided slope, so it is drawn again.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .cells import (
    BConvCellParams,
    BConvCellV2Params,
    CellParams,
    CellState,
    cell_forward,
)
from .network import NetworkConfig, PTLNetwork
from .tensor import Tensor

DEFAULT_EPS = 1e-4
SCALE_FLOOR = 1e-8
MAX_REDRAWS = 20
# lifts U(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights to He scale
WEIGHT_GAIN = float(np.sqrt(6.0))

LossFn = Callable[[], Tensor]


@dataclass(frozen=True)
class Probe:
    leaf: str
    index: Tuple[int, ...]
    analytic: float
    numeric: float

    @property
    def error(self) -> float:
        return relative_error(self.analytic, self.numeric)


@dataclass
class GradCheckReport:
    name: str
    tolerance: float
    probes: List[Probe] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max((probe.error for probe in self.probes), default=0.0)

    @property
    def passed(self) -> bool:
        return bool(self.probes) and self.max_error < self.tolerance

    def worst(self) -> Optional[Probe]:
        return max(self.probes, key=lambda probe: probe.error, default=None)

    def to_csv(self) -> List[str]:
        return [
            self.name,
            str(len(self.probes)),
            f"{self.max_error:.3e}",
            f"{self.tolerance:.1e}",
            "pass" if self.passed else "fail",
        ]


CSV_COLUMNS = ("check", "probes", "max_rel_error", "tolerance", "result")


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), SCALE_FLOOR)


def _same_masks(a: List[np.ndarray], b: List[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _central_difference(
    loss_fn: LossFn,
    leaf: Tensor,
    index: Tuple[int, ...],
    eps: float,
    base_masks: List[np.ndarray],
) -> Tuple[float, bool]:
    """Numeric slope at ``index`` and whether both steps kept every relu unit."""
    original = leaf.data[index]
    try:
        with T.no_grad():
            leaf.data[index] = original + eps
            with T.record_relu_masks() as plus_masks:
                plus = loss_fn().item()
            leaf.data[index] = original - eps
            with T.record_relu_masks() as minus_masks:
                minus = loss_fn().item()
    finally:
        leaf.data[index] = original
    smooth = _same_masks(base_masks, plus_masks) and _same_masks(
        base_masks, minus_masks
    )
    return (plus - minus) / (2.0 * eps), smooth


def grad_check(
    loss_fn: LossFn,
    leaves: Sequence[Tensor],
    probe_count: int = 10,
    tolerance: float = 1e-5,
    seed: int = 0,
    eps: float = DEFAULT_EPS,
    name: str = "check",
) -> GradCheckReport:
    """Compare analytic and central-difference gradients at random coordinates.

    Args:
        loss_fn: Builds the scalar loss from the current leaf values. It is called
            once for the analytic gradient and twice per sampled coordinate.
        leaves: Float64 tensors to perturb.
        probe_count: Coordinates sampled in each leaf, drawn uniformly. A draw whose
            steps flip a relu unit is replaced, up to ``MAX_REDRAWS`` times.
        tolerance: A check passes when every probe's relative error is below it.
        seed: Seed for choosing the coordinates.
        eps: Perturbation size.
        name: Label used in reports.
    """
    for leaf in leaves:
        if leaf.dtype != np.float64:
            raise TypeError(
                f"{name}: gradient checks need float64 leaves, got {leaf.dtype}"
            )

    with T.record_relu_masks() as base_masks:
        loss = loss_fn()
    grads = T.backward(loss, leaves)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(name=name, tolerance=tolerance)
    for which, leaf in enumerate(leaves):
        label = leaf.name or f"leaf{which}"
        for _ in range(probe_count):
            for _ in range(MAX_REDRAWS + 1):
                index = tuple(int(rng.integers(extent)) for extent in leaf.shape)
                numeric, smooth = _central_difference(
                    loss_fn, leaf, index, eps, base_masks
                )
                if smooth:
                    break
                logging.debug(f"{name}: {label}{list(index)} flips a relu unit")
            analytic = float(grads[which][index])
            report.probes.append(Probe(label, index, analytic, numeric))

    worst = report.worst()
    logging.debug(
        f"Gradient check {name}: max relative error {report.max_error:.3e}"
        + (f" at {worst.leaf}{list(worst.index)}" if worst is not None else "")
    )
    return report


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------


def _leaf(
    rng: np.random.Generator,
    shape: Tuple[int, ...],
    name: str,
    away_from_zero: bool = False,
) -> Tensor:
    values = rng.standard_normal(shape)
    if away_from_zero:
        values = np.sign(values) * (0.1 + np.abs(values))
    return Tensor(values, requires_grad=True, dtype="f64", name=name)


Cases = Dict[str, Tuple[LossFn, List[Tensor]]]


def _primitive_cases(rng: np.random.Generator) -> Cases:
    cases: Cases = {}

    def case(
        name: str, build: Callable[..., Tensor], *leaves: Tensor, project: bool = True
    ) -> None:
        out = build(*leaves)
        weights = None
        if project:
            weights = Tensor(rng.standard_normal(out.shape), dtype="f64")

        def loss() -> Tensor:
            value = build(*leaves)
            return T.sum(T.hadamard(value, weights)) if weights is not None else value

        cases[name] = (loss, list(leaves))

    def image(name: str, channels: int = 3, batch: int = 2) -> Tensor:
        return _leaf(rng, (batch, channels, 4, 4), name)

    case(
        "conv2d",
        lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=1),
        _leaf(rng, (2, 3, 6, 6), "x"),
        _leaf(rng, (4, 3, 3, 3), "w"),
        _leaf(rng, (4,), "b"),
    )
    case(
        "conv_transpose2d",
        lambda x, w, b: T.conv_transpose2d(x, w, b, stride=2, padding=1),
        image("x"),
        _leaf(rng, (3, 2, 3, 3), "w"),
        _leaf(rng, (2,), "b"),
    )
    case(
        "linear",
        T.linear,
        _leaf(rng, (3, 5), "x"),
        _leaf(rng, (4, 5), "w"),
        _leaf(rng, (4,), "b"),
    )
    for op in ("sigmoid", "tanh"):
        case(op, getattr(T, op), image("x"))
    case("relu", T.relu, _leaf(rng, (2, 3, 4, 4), "x", away_from_zero=True))
    for op in ("add", "sub", "hadamard"):
        case(op, getattr(T, op), image("a"), image("b"))
    case("scale", lambda x: T.scale(x, -1.7), image("x"))
    case("sum", T.sum, image("x"), project=False)
    case("concat_channels", T.concat_channels, image("a"), image("b", channels=2))
    case("slice_channels", lambda x: T.slice_channels(x, 1, 3), image("x", 4))
    case("global_avg_pool", T.global_avg_pool, image("x"))
    case("avg_pool2d", lambda x: T.avg_pool2d(x, 2), image("x"))
    case("broadcast_batch", lambda x: T.broadcast_batch(x, 3), image("x", batch=1))
    case("mean_batch", T.mean_batch, image("x", batch=3))
    labels = rng.integers(0, 5, size=4)
    case(
        "softmax_cross_entropy",
        lambda z: T.softmax_cross_entropy(z, labels),
        _leaf(rng, (4, 5), "logits"),
        project=False,
    )
    a = _leaf(rng, (3, 6), "a")
    offsets = np.sign(rng.standard_normal((3, 6))) * (0.1 + rng.random((3, 6)))
    b = Tensor(a.data + offsets, requires_grad=True, dtype="f64", name="b")
    case("l1_loss", T.l1_loss, a, b, project=False)
    return cases


def primitive_suite(
    probe_count: int = 10, tolerance: float = 1e-5, seed: int = 0
) -> List[GradCheckReport]:
    """One report per differentiable primitive."""
    rng = np.random.default_rng(seed)
    return [
        grad_check(loss, leaves, probe_count, tolerance, seed, name=name)
        for name, (loss, leaves) in _primitive_cases(rng).items()
    ]


def _random_state(
    params: CellParams, height: int, width: int, rng: np.random.Generator
) -> CellState:
    state = CellState.for_params(params, height, width)
    state.c.data = 0.5 * rng.standard_normal(state.c.shape)
    if state.h is not None:
        state.h.data = 0.5 * rng.standard_normal(state.h.shape)
    return state


def cell_suite(
    version: str = "v1", probe_count: int = 10, tolerance: float = 1e-5, seed: int = 0
) -> GradCheckReport:
    """Check a cell step against a nonzero carried state.

    Probes cover every cell parameter and the input.
    """
    rng = np.random.default_rng(seed)
    params: CellParams
    if version == "v2":
        params = BConvCellV2Params.init(3, 4, kernel_size=3, rng=rng, dtype="f64")
    else:
        params = BConvCellParams.init(3, 4, 3, rng, "f64")
    x = _leaf(rng, (2, 3, 5, 5), "x")
    state = _random_state(params, 5, 5, rng)
    y, _ = cell_forward(x, state, params)
    weights = Tensor(rng.standard_normal(y.shape), dtype="f64")

    def loss() -> Tensor:
        out, _ = cell_forward(x, state, params)
        return T.sum(T.hadamard(out, weights))

    leaves = [tensor for _, tensor in params.named_parameters()] + [x]
    for name, tensor in params.named_parameters():
        tensor.name = name
    name = f"cell_{version}"
    return grad_check(loss, leaves, probe_count, tolerance, seed, name=name)


def layer_class(name: str) -> str:
    """Group a network parameter name into its layer class."""
    if name.startswith("stem.cell."):
        return "stem_cell"
    if name.startswith("stem.fuse."):
        return "stem_fuse"
    if name.startswith("pairs."):
        part = name.split(".")[2]
        return {"block": "conv_block", "fuse": "pair_fuse", "cell": "pair_cell"}[part]
    return name.split(".")[0]


def gradcheck_network_config(base: NetworkConfig) -> NetworkConfig:
    """Float64 copy of ``base`` at the smallest resolution its strides allow.

    Three classes, and stored states stay detached so the loss is a function of
    the parameters alone.
    """
    side = 2 * int(np.prod(base.block_strides))
    return replace(
        base,
        resolution=(side, side),
        classes=3,
        dtype="f64",
        state_backprop=False,
    )


def network_suite(
    config: NetworkConfig, probe_count: int = 10, tolerance: float = 1e-5, seed: int = 0
) -> List[GradCheckReport]:
    """Per-layer-class checks of the cross-entropy loss of a float64 PTL network.

    Weights are scaled by ``WEIGHT_GAIN`` and the images are standard normal, so
    activations and gradients keep unit order through every block. One train-mode
    batch first moves the states away from zero; the checked loss then reads those
    states without writing them back.
    """
    rng = np.random.default_rng(seed)
    network = PTLNetwork.build(config, rng)
    for _, tensor in network.named_parameters():
        if tensor.data.ndim >= 2:
            tensor.data *= WEIGHT_GAIN
    shape = (2, config.in_channels) + tuple(config.resolution)
    images = Tensor(rng.standard_normal(shape), dtype="f64")
    labels = rng.integers(0, config.classes, size=2)
    network.forward(images)
    snapshot = network.snapshot_states()
    network.restore_states(snapshot)

    def loss() -> Tensor:
        logits, _ = network.forward(images, update_state=False)
        return T.softmax_cross_entropy(logits, labels)

    groups: Dict[str, List[Tensor]] = {}
    for name, tensor in network.named_parameters():
        tensor.name = name
        groups.setdefault(layer_class(name), []).append(tensor)
    reports = [
        grad_check(
            loss,
            leaves,
            probe_count,
            tolerance,
            seed,
            name=f"network_{config.version}_{group}",
        )
        for group, leaves in groups.items()
    ]
    network.restore_states(snapshot)
    return reports


def run_all(
    config: NetworkConfig, probe_count: int = 10, tolerance: float = 1e-5, seed: int = 0
) -> List[GradCheckReport]:
    """Primitives, both cell versions and the v1 and v2 networks of ``config``."""
    small = gradcheck_network_config(config)
    reports = primitive_suite(probe_count, tolerance, seed)
    for version in ("v1", "v2"):
        reports.append(cell_suite(version, probe_count, tolerance, seed))
    for version in ("v1", "v2"):
        network = replace(small, version=version)
        reports += network_suite(network, probe_count, tolerance, seed)
    failed = [report.name for report in reports if not report.passed]
    passed = len(reports) - len(failed)
    logging.info(f"Gradient checks: {passed}/{len(reports)} passed")
    return reports
