"""Policy checkpoints (``FCVP``).

Layout, little-endian: magic ``FCVP``, u32 version, u32 config length and
the UTF-8 config text, u32 parameter count, then per parameter: u32 name
length, name, u32 rank, rank x u32 extents, f32 data.
"""

import logging
import struct
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from focalcvae.errors import DatasetFormatError
from focalcvae.nn import Module

logger = logging.getLogger(__name__)

MAGIC = b"FCVP"
VERSION = 1
_U32 = struct.Struct("<I")


def encode_checkpoint(state: Dict[str, np.ndarray], config_text: str) -> bytes:
    config = config_text.encode("utf-8")
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(config)), config, _U32.pack(len(state))]
    for name, value in state.items():
        raw_name = name.encode("utf-8")
        parts += [_U32.pack(len(raw_name)), raw_name, _U32.pack(value.ndim)]
        parts += [_U32.pack(extent) for extent in value.shape]
        parts.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(raw: bytes, path: Union[str, Path] = "<memory>") -> Tuple[Dict[str, np.ndarray], str]:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise DatasetFormatError(path, "checkpoint is truncated")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    def u32() -> int:
        return _U32.unpack(take(4))[0]

    if take(4) != MAGIC:
        raise DatasetFormatError(path, "bad checkpoint magic")
    version = u32()
    if version != VERSION:
        raise DatasetFormatError(path, f"unsupported checkpoint version {version}")
    config_text = take(u32()).decode("utf-8")
    state: Dict[str, np.ndarray] = {}
    for _ in range(u32()):
        name = take(u32()).decode("utf-8")
        shape = tuple(u32() for _ in range(u32()))
        count = int(np.prod(shape, dtype=np.int64))
        state[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).copy()
    if pos != len(raw):
        raise DatasetFormatError(path, f"{len(raw) - pos} trailing bytes after the last parameter")
    return state, config_text


def save_checkpoint(path: Union[str, Path], model: Module, config_text: str) -> None:
    path = Path(path)
    try:
        path.write_bytes(encode_checkpoint(model.state_dict(), config_text))
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc.strerror or exc}") from exc
    logger.info("saved %d parameters to %s", model.num_parameters(), path)


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], str]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from exc
    return decode_checkpoint(raw, path)
