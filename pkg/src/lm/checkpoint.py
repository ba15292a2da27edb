"""
MSPC checkpoint container
Binary layout: magic "MSPC", u32 version, u32 entry count, then per entry
u16 name length, UTF-8 name, u8 dtype tag (0 = f32), u8 rank, u32 dims and a
little-endian payload. A JSON sidecar carries the configuration.
"""

import json
import logging
import struct
from pathlib import Path
from typing import Any, BinaryIO, Dict, Mapping, Optional, Union

import numpy as np

from ..core.errors import CheckpointError
from .config import LmConfig

logger = logging.getLogger(__name__)

MAGIC = b"MSPC"
FORMAT_VERSION = 1
DTYPE_F32 = 0

PathLike = Union[str, Path]


def sidecar_path(path: PathLike) -> Path:
    return Path(path).with_suffix(".json")


def _write_entry(fh: BinaryIO, name: str, array: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    if len(encoded) > 0xFFFF:
        raise CheckpointError(f"entry name too long: {name[:40]}...")
    if array.ndim > 0xFF:
        raise CheckpointError(f"{name}: rank {array.ndim} not representable")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<BB", DTYPE_F32, array.ndim))
    fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
    fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def save_checkpoint(
    path: PathLike,
    arrays: Mapping[str, np.ndarray],
    metadata: Optional[Dict[str, Any]] = None,
) -> Path:
    """
    Write named arrays (sorted by name) and an optional JSON sidecar.

    Returns:
        Path of the written container
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = sorted(arrays)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(names)))
        for name in names:
            _write_entry(fh, name, np.asarray(arrays[name]))
    if metadata is not None:
        with open(sidecar_path(path), "w") as fh:
            json.dump(metadata, fh, indent=2, sort_keys=True)
    logger.info(f"Checkpoint written: {path} ({len(names)} entries, {path.stat().st_size} bytes)")
    return path


def _read(fh: BinaryIO, size: int, what: str) -> bytes:
    data = fh.read(size)
    if len(data) != size:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path: PathLike) -> Dict[str, np.ndarray]:
    """
    Read every entry of an MSPC container as float32 arrays.

    Raises:
        CheckpointError: Bad magic, unsupported version or dtype, truncation
        FileNotFoundError: Missing file
    """
    path = Path(path)
    arrays: Dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if _read(fh, 4, "magic") != MAGIC:
            raise CheckpointError(f"{path}: not an MSPC checkpoint (bad magic)")
        version, count = struct.unpack("<II", _read(fh, 8, "header"))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read(fh, 2, "name length"))
            name = _read(fh, name_len, "name").decode("utf-8")
            dtype, rank = struct.unpack("<BB", _read(fh, 2, f"{name} header"))
            if dtype != DTYPE_F32:
                raise CheckpointError(f"{path}: {name} has unknown dtype tag {dtype}")
            shape = struct.unpack(f"<{rank}I", _read(fh, 4 * rank, f"{name} dims"))
            n_bytes = 4 * int(np.prod(shape, dtype=np.int64))
            payload = _read(fh, n_bytes, f"{name} payload")
            arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after {count} entries")
    logger.debug(f"Checkpoint read: {path} ({count} entries)")
    return arrays


def read_sidecar(path: PathLike) -> Dict[str, Any]:
    side = sidecar_path(path)
    if not side.exists():
        raise CheckpointError(f"{path}: missing sidecar {side.name}")
    with open(side) as fh:
        return json.load(fh)


def lm_metadata(config: LmConfig, **extra: Any) -> Dict[str, Any]:
    """Sidecar document for anything tied to one backbone shape."""
    meta: Dict[str, Any] = {"lm": config.to_dict(), "config_hash": config.config_hash()}
    meta.update(extra)
    return meta


def check_config_hash(metadata: Dict[str, Any], config: LmConfig, path: PathLike) -> None:
    """Refuse to pair prompts with a backbone of a different shape."""
    found = metadata.get("config_hash")
    if found != config.config_hash():
        raise CheckpointError(
            f"{path}: config hash {found} does not match the LM ({config.config_hash()})"
        )
