"""
Run configuration: a flat ``key = value`` file with ``#`` comments.

Example::

    # PTL-v2 on synthetic data
    version = v2
    block_channels = 16, 32, 64
    distill_lambda = 0.0, 0.5, 0.8
"""

import dataclasses
import logging
import os
import typing
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple, Union

from .network import NetworkConfig
from .tensor import DTYPES, ShapeError


class ConfigError(ValueError):
    """Raised for unreadable config files and invalid field values."""


DATASETS = ("synthetic", "cifar", "cifar100")


@dataclass(frozen=True)
class RunConfig:
    """Everything a command needs besides its file arguments."""

    # topology
    version: str = "v1"
    cells: bool = True
    stem_channels: int = 8
    block_channels: Tuple[int, ...] = (16, 32, 64)
    block_strides: Tuple[int, ...] = (1, 2, 2)
    cell_channels: Tuple[int, ...] = (8, 16, 16)
    feature_channels: int = 64
    hidden_channels: int = 128
    kernel_size: int = 3
    rec_channels: int = 0
    state_backprop: bool = False

    # optimizer
    lr: float = 0.01
    momentum: float = 0.9
    decay_factor: float = 0.1
    decay_every: int = 10
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    dtype: str = "f32"

    # data
    dataset: str = "synthetic"
    synth_classes: int = 4
    synth_per_class: int = 200
    synth_eval_per_class: int = 50
    synth_noise: float = 0.05
    synth_resolution: int = 32
    synth_variant: int = 0
    cifar_train: Tuple[str, ...] = ()
    cifar_test: Tuple[str, ...] = ()
    cifar_limit: int = 0
    cifar100_labels: str = "fine"
    augment: bool = False
    prefetch: bool = False

    # distillation
    distill_lambda: Tuple[float, ...] = (0.8,)

    # checks and outputs
    gradcheck_probes: int = 10
    gradcheck_tolerance: float = 1e-5
    inspect_batches: int = 8
    record_time: bool = True
    init_strict: bool = True

    def validate(self) -> "RunConfig":
        """Check every field.

        Raises ``ConfigError`` listing all ``field: message`` problems.
        """
        errors: List[str] = []

        def check(ok: bool, name: str, message: str) -> None:
            if not ok:
                errors.append(f"{name}: {message}")

        check(
            self.version in ("v1", "v2"),
            "version",
            f"must be v1 or v2, got {self.version!r}",
        )
        check(
            self.dtype in DTYPES,
            "dtype",
            f"must be one of {sorted(DTYPES)}, got {self.dtype!r}",
        )
        for name in ("stem_channels", "feature_channels", "hidden_channels"):
            check(getattr(self, name) >= 1, name, "must be >= 1")
        check(
            self.rec_channels >= 0,
            "rec_channels",
            "must be >= 0 (0 means cell channels)",
        )
        check(
            self.kernel_size >= 1 and self.kernel_size % 2 == 1,
            "kernel_size",
            f"must be odd and positive, got {self.kernel_size}",
        )
        blocks, cells = self.block_channels, self.cell_channels
        strides = self.block_strides
        check(len(blocks) >= 1, "block_channels", "needs at least one block")
        check(
            len({len(blocks), len(strides), len(cells)}) == 1,
            "block_strides",
            "block_channels, block_strides and cell_channels must have equal length",
        )
        for name, values in (
            ("block_channels", blocks),
            ("cell_channels", cells),
            ("block_strides", strides),
        ):
            check(all(v >= 1 for v in values), name, "every entry must be >= 1")

        check(self.lr >= 0, "lr", "must be >= 0")
        check(0 <= self.momentum < 1, "momentum", "must lie in [0, 1)")
        check(self.decay_factor > 0, "decay_factor", "must be > 0")
        check(self.decay_every >= 1, "decay_every", "must be >= 1")
        check(self.batch_size >= 1, "batch_size", "must be >= 1")
        check(self.epochs >= 0, "epochs", "must be >= 0")
        check(self.seed >= 0, "seed", "must be >= 0")

        check(
            self.dataset in DATASETS,
            "dataset",
            f"must be one of {DATASETS}, got {self.dataset!r}",
        )
        check(self.synth_classes >= 2, "synth_classes", "must be >= 2")
        check(self.synth_per_class >= 1, "synth_per_class", "must be >= 1")
        check(self.synth_eval_per_class >= 0, "synth_eval_per_class", "must be >= 0")
        check(self.synth_noise >= 0, "synth_noise", "must be >= 0")
        check(self.synth_resolution >= 1, "synth_resolution", "must be >= 1")
        check(self.synth_variant >= 0, "synth_variant", "must be >= 0")
        if self.dataset != "synthetic":
            required = f"required when dataset = {self.dataset}"
            check(bool(self.cifar_train), "cifar_train", required)
        check(self.cifar_limit >= 0, "cifar_limit", "must be >= 0 (0 means all)")
        check(
            self.cifar100_labels in ("fine", "coarse"),
            "cifar100_labels",
            f"must be fine or coarse, got {self.cifar100_labels!r}",
        )

        check(bool(self.distill_lambda), "distill_lambda", "needs at least one value")
        for value in self.distill_lambda:
            check(0.0 <= value <= 1.0, "distill_lambda", f"{value} is outside [0, 1]")
        check(self.gradcheck_probes >= 1, "gradcheck_probes", "must be >= 1")
        check(self.gradcheck_tolerance > 0, "gradcheck_tolerance", "must be > 0")
        check(self.inspect_batches >= 1, "inspect_batches", "must be >= 1")

        if not errors:
            try:
                self.network_config(classes=2).spatial_plan()
            except ShapeError as e:
                errors.append(f"block_strides: {e}")

        if errors:
            raise ConfigError("; ".join(errors))
        return self

    @property
    def resolution(self) -> Tuple[int, int]:
        if self.dataset == "synthetic":
            return (self.synth_resolution, self.synth_resolution)
        return (32, 32)

    def network_config(
        self,
        classes: int,
        resolution: Optional[Tuple[int, int]] = None,
        in_channels: int = 3,
        dtype: Optional[str] = None,
    ) -> NetworkConfig:
        return NetworkConfig(
            in_channels=in_channels,
            resolution=resolution or self.resolution,
            classes=classes,
            stem_channels=self.stem_channels,
            block_channels=tuple(self.block_channels),
            block_strides=tuple(self.block_strides),
            cell_channels=tuple(self.cell_channels),
            feature_channels=self.feature_channels,
            hidden_channels=self.hidden_channels,
            kernel_size=self.kernel_size,
            version=self.version,
            rec_channels=self.rec_channels or None,
            dtype=dtype or self.dtype,
            state_backprop=self.state_backprop,
        )

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        """Copy with every non-None override applied, then validated."""
        changes = {key: value for key, value in overrides.items() if value is not None}
        return dataclasses.replace(self, **changes).validate()

    def to_dict(self) -> Dict[str, Any]:
        """JSON-friendly echo (tuples become lists)."""
        return {
            key: list(value) if isinstance(value, tuple) else value
            for key, value in dataclasses.asdict(self).items()
        }

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "RunConfig":
        hints = _field_types()
        unknown = sorted(set(values) - set(hints))
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown key")
        converted = {
            key: tuple(value) if isinstance(value, list) else value
            for key, value in values.items()
        }
        return cls(**converted)

    def to_text(self) -> str:
        """Render as a config file that :func:`parse_config` reads back unchanged."""
        lines = []
        for key, value in dataclasses.asdict(self).items():
            if isinstance(value, tuple):
                rendered = ", ".join(str(v) for v in value)
            elif isinstance(value, bool):
                rendered = "true" if value else "false"
            else:
                rendered = str(value)
            lines.append(f"{key} = {rendered}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _field_types() -> Dict[str, Any]:
    return typing.get_type_hints(RunConfig)


def _convert(key: str, raw: str, kind: Any) -> Any:
    if kind is bool:
        lowered = raw.lower()
        if lowered in _TRUE:
            return True
        if lowered in _FALSE:
            return False
        raise ConfigError(f"{key}: expected true or false, got {raw!r}")
    if kind is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}")
    if kind is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}")
    if kind is str:
        return raw
    if typing.get_origin(kind) is tuple:
        item_kind = typing.get_args(kind)[0]
        items = [item.strip() for item in raw.split(",") if item.strip()]
        return tuple(_convert(key, item, item_kind) for item in items)
    raise ConfigError(f"{key}: unsupported field type {kind}")


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    """Parse config text.

    Unknown or repeated keys and bad values raise ``ConfigError``.
    """
    hints = _field_types()
    values: Dict[str, Any] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        if "=" not in content:
            raise ConfigError(
                f"{source}:{number}: expected 'key = value', got {content!r}"
            )
        key, raw = (part.strip() for part in content.split("=", 1))
        if key not in hints:
            raise ConfigError(f"{key}: unknown key ({source}:{number})")
        if key in values:
            raise ConfigError(f"{key}: set twice ({source}:{number})")
        values[key] = _convert(key, raw, hints[key])
    config = RunConfig(**values)
    logging.debug(f"Parsed {len(values)} keys from {source}")
    return config.validate()


def load_config(path: Optional[Union[str, "os.PathLike[str]"]]) -> RunConfig:
    """Read and validate a config file; ``None`` gives the validated defaults."""
    if path is None:
        return RunConfig().validate()
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"config: cannot read {path}: {e.strerror or e}") from e
    return parse_config(text, source=os.fspath(path))
