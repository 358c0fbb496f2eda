"""Binary checkpoint container.

Layout (little-endian): magic ``HNXT``, uint32 format version, uint32 tensor
count, then per tensor a uint16 name length, the UTF-8 name, uint8 dtype
code, uint8 rank, uint32 extents and the raw element bytes. The model config
and free-form metadata travel as uint8 tensors holding JSON.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Mapping, Optional, Union

import numpy as np

from .errors import ConfigError, FormatError
from .network import ModelConfig, RangeFusionNet

MAGIC = b"HNXT"
VERSION = 1
CONFIG_KEY = "__config__"
META_KEY = "__meta__"

DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("u1"): 2,
    np.dtype("<i8"): 3,
    np.dtype("<i4"): 4,
    np.dtype("<u4"): 5,
}
CODE_DTYPES = {code: dt for dt, code in DTYPE_CODES.items()}

PathLike = Union[str, os.PathLike]


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if np.dtype(dt) not in DTYPE_CODES:
            raise ConfigError(f"{name}: dtype {arr.dtype} cannot be stored")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF or arr.ndim > 0xFF:
            raise ConfigError(f"{name}: name or rank too large for the format")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", DTYPE_CODES[np.dtype(dt)], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


def decode_tensors(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError("checkpoint is truncated")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("tensor name is not valid UTF-8") from exc
        code, rank = struct.unpack("<BB", take(2))
        if code not in CODE_DTYPES:
            raise FormatError(f"{name}: unknown dtype code {code}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        dt = CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        out[name] = np.frombuffer(take(nbytes), dtype=dt).reshape(shape).copy()
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after the last tensor")
    return out


def write_tensors(path: PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_tensors(tensors))


def read_tensors(path: PathLike) -> dict[str, np.ndarray]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_tensors(blob)


def _json_tensor(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8).copy()


def _json_value(arr: np.ndarray):
    try:
        return json.loads(arr.tobytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError("embedded JSON is corrupt") from exc


def save_checkpoint(path: PathLike, model: RangeFusionNet, meta: Optional[dict] = None) -> None:
    """Parameters, normalization buffers, the model config and optional metadata."""
    tensors = {CONFIG_KEY: _json_tensor(model.cfg.to_dict())}
    if meta is not None:
        tensors[META_KEY] = _json_tensor(meta)
    tensors.update(model.state_dict())
    write_tensors(path, tensors)


def load_checkpoint(path: PathLike) -> tuple[RangeFusionNet, dict]:
    """Rebuild the model in eval mode; returns it with the stored metadata."""
    tensors = read_tensors(path)
    if CONFIG_KEY not in tensors:
        raise FormatError("checkpoint has no model config")
    try:
        cfg = ModelConfig.from_dict(_json_value(tensors.pop(CONFIG_KEY)))
    except (TypeError, KeyError, ConfigError) as exc:
        raise FormatError(f"stored model config is invalid: {exc}") from exc
    meta = _json_value(tensors.pop(META_KEY)) if META_KEY in tensors else {}
    model = RangeFusionNet(cfg)
    expected = set(model.state_dict())
    if set(tensors) != expected:
        diff = sorted(expected.symmetric_difference(tensors))[:5]
        raise FormatError(f"checkpoint tensors do not match the model: {diff}")
    try:
        model.load_state_dict(tensors)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc
    return model.eval(), meta
