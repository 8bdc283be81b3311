"""
Checkpoint files.

Layout (all integers little-endian)::

    b"BCNV1\\0"                 magic
    u32 format version
    u32 header length
    header                      UTF-8 JSON: kind, network topology, run config echo,
                                manifest [{name, shape, dtype}, ...]
    payload                     raw little-endian values, manifest order
    8 bytes                     blake2b-64 digest of the payload

Saving the same parameters twice produces identical bytes.
"""

import hashlib
import json
import logging
import os
import struct
import tempfile
import warnings
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Union

import numpy as np

from .network import BackboneNetwork, Network, NetworkConfig, PTLNetwork
from .tensor import ShapeError

MAGIC = b"BCNV1\0"
FORMAT_VERSION = 1
CHECKSUM_BYTES = 8
_PREFIX = struct.Struct("<6sII")
_DTYPE_CODES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}

PathLike = Union[str, "os.PathLike[str]"]


class CheckpointError(ValueError):
    """Raised when a checkpoint is malformed, corrupt or does not fit a network."""


@dataclass
class Checkpoint:
    """Decoded checkpoint: topology, config echo and named parameter arrays."""

    kind: str
    network: Dict[str, Any]
    tensors: "OrderedDict[str, np.ndarray]"
    config: Dict[str, Any] = field(default_factory=dict)

    @property
    def manifest(self) -> List[Dict[str, Any]]:
        return [
            {
                "name": name,
                "shape": list(array.shape),
                "dtype": _dtype_code(array.dtype),
            }
            for name, array in self.tensors.items()
        ]

    def network_config(self) -> NetworkConfig:
        values = {
            key: tuple(value) if isinstance(value, list) else value
            for key, value in self.network.items()
        }
        try:
            return NetworkConfig(**values)
        except TypeError as e:
            raise CheckpointError(f"header: bad network topology: {e}") from e


def _dtype_code(dtype: np.dtype) -> str:
    for code, candidate in _DTYPE_CODES.items():
        if np.dtype(dtype).newbyteorder("<") == candidate:
            return code
    raise CheckpointError(f"unsupported parameter dtype {dtype}")


def _storage_dtype(array: np.ndarray) -> np.dtype:
    return _DTYPE_CODES[_dtype_code(array.dtype)]


def checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=CHECKSUM_BYTES).digest()


def encode(checkpoint: Checkpoint) -> bytes:
    header = {
        "kind": checkpoint.kind,
        "network": checkpoint.network,
        "config": checkpoint.config,
        "manifest": checkpoint.manifest,
    }
    header_text = json.dumps(header, sort_keys=True, separators=(",", ":"))
    header_bytes = header_text.encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(array, dtype=_storage_dtype(array)).tobytes()
        for array in checkpoint.tensors.values()
    )
    prefix = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header_bytes))
    return prefix + header_bytes + payload + checksum(payload)


def decode(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    """Parse and verify checkpoint bytes; every failure raises ``CheckpointError``."""
    if len(blob) < _PREFIX.size + CHECKSUM_BYTES:
        raise CheckpointError(
            f"{source}: too short to be a checkpoint ({len(blob)} bytes)"
        )
    magic, version, header_length = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported format version {version}")
    header_end = _PREFIX.size + header_length
    if header_end + CHECKSUM_BYTES > len(blob):
        raise CheckpointError(
            f"{source}: header length {header_length} exceeds file size"
        )
    try:
        header = json.loads(blob[_PREFIX.size : header_end].decode("utf-8"))
        kind, manifest = header["kind"], header["manifest"]
        network = header["network"]
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"{source}: unreadable header: {e}") from e

    payload = blob[header_end : len(blob) - CHECKSUM_BYTES]
    expected = 0
    for entry in manifest:
        code = entry.get("dtype")
        if code not in _DTYPE_CODES:
            raise CheckpointError(
                f"{source}: {entry.get('name')}: unknown dtype {code!r}"
            )
        count = int(np.prod(entry["shape"], dtype=np.int64))
        expected += count * _DTYPE_CODES[code].itemsize
    if expected != len(payload):
        raise CheckpointError(
            f"{source}: manifest describes {expected} payload bytes, "
            f"file holds {len(payload)}"
        )
    if checksum(payload) != blob[len(blob) - CHECKSUM_BYTES :]:
        raise CheckpointError(f"{source}: checksum mismatch, refusing to load")

    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    offset = 0
    for entry in manifest:
        dtype = _DTYPE_CODES[entry["dtype"]]
        count = int(np.prod(entry["shape"], dtype=np.int64))
        array = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
        native = dtype.newbyteorder("=")
        tensors[entry["name"]] = array.reshape(entry["shape"]).astype(native)
        offset += count * dtype.itemsize
    config = header.get("config", {})
    return Checkpoint(kind=kind, network=network, tensors=tensors, config=config)


def from_network(
    network: Network, config: Optional[Dict[str, Any]] = None
) -> Checkpoint:
    network_echo = {
        key: list(value) if isinstance(value, tuple) else value
        for key, value in asdict(network.config).items()
    }
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict(
        (name, tensor.data.copy()) for name, tensor in network.named_parameters()
    )
    return Checkpoint(
        kind=network.kind, network=network_echo, tensors=tensors, config=config or {}
    )


def save_checkpoint(
    network: Network, path: PathLike, config: Optional[Dict[str, Any]] = None
) -> None:
    """Write ``network``'s parameters to ``path``.

    The bytes go to a temporary file in the same directory, which is then
    renamed over ``path``.
    """
    blob = encode(from_network(network, config))
    directory = os.path.dirname(os.path.abspath(path))
    fd, temp_path = tempfile.mkstemp(prefix=".bcnv-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
            f.flush()
            os.fsync(f.fileno())
        os.replace(temp_path, path)
    except BaseException:
        if os.path.exists(temp_path):
            os.remove(temp_path)
        raise
    logging.info(f"Saved {network.kind} checkpoint ({len(blob)} bytes) to {path}")


def load_checkpoint(path: PathLike) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        reason = e.strerror or e
        raise CheckpointError(f"Cannot read checkpoint {path}: {reason}") from e
    checkpoint = decode(blob, source=os.fspath(path))
    logging.debug(f"Loaded {len(checkpoint.tensors)} tensors from {path}")
    return checkpoint


def restore_parameters(
    network: Network, checkpoint: Checkpoint, strict: bool = True
) -> List[str]:
    """Copy checkpoint values into ``network``.

    Strict loads fail with a ``CheckpointError`` naming every mismatched tensor.
    Otherwise tensors whose name and shape match are loaded and the rest keep
    their current values; their names are returned.
    """
    try:
        skipped = network.assign_parameters(checkpoint.tensors, strict=strict)
    except ShapeError as e:
        raise CheckpointError(str(e)) from e
    for name in skipped:
        warnings.warn(
            f"Checkpoint tensor {name} not loaded, keeping its initial value",
            UserWarning,
            stacklevel=2,
        )
    return skipped


def network_from_checkpoint(checkpoint: Checkpoint, mode: str = "train") -> Network:
    """Rebuild the network a checkpoint was saved from."""
    config = checkpoint.network_config()
    try:
        if checkpoint.kind == PTLNetwork.kind:
            network: Network = PTLNetwork.build(config, np.random.default_rng(0))
        elif checkpoint.kind == BackboneNetwork.kind:
            network = BackboneNetwork.build(config, np.random.default_rng(0))
        else:
            raise CheckpointError(f"header: unknown network kind {checkpoint.kind!r}")
    except (ShapeError, ValueError) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"header: inconsistent network topology: {e}") from e
    restore_parameters(network, checkpoint, strict=True)
    return network.set_mode(mode)
