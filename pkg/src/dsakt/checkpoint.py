"""Binary checkpoint format.

Layout::

    b"DSAKT1\\n"
    uint64 little-endian header length
    UTF-8 JSON header: config, vocabulary ids (index i+1 -> ids[i]),
                       tensor directory [{name, shape, offset}]
    raw little-endian float32 tensor data in directory order
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .datastore import Vocabulary
from .model import ModelConfig, param_shapes

MAGIC = b"DSAKT1\n"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


def to_bytes(params, config: ModelConfig, vocabulary: Vocabulary) -> bytes:
    expected = param_shapes(config)
    if list(params) != list(expected):
        raise CheckpointShapeError("parameter names do not match the config inventory")
    directory, offset = [], 0
    for name, value in params.items():
        if value.shape != expected[name]:
            raise CheckpointShapeError(f"{name}: shape {value.shape} != {expected[name]}")
        directory.append({"name": name, "shape": list(value.shape), "offset": offset})
        offset += value.size * _DTYPE.itemsize
    header = {
        "format_version": FORMAT_VERSION,
        "dtype": "float32-le",
        "config": config.to_dict(),
        "vocabulary": list(vocabulary.ids),
        "tensors": directory,
        "data_bytes": offset,
    }
    blob = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    chunks = [MAGIC, struct.pack("<Q", len(blob)), blob]
    chunks += [np.ascontiguousarray(v, dtype=_DTYPE).tobytes() for v in params.values()]
    return b"".join(chunks)


def from_bytes(data: bytes):
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointVersionError("not a DSAKT1 checkpoint (bad magic bytes)")
    pos = len(MAGIC)
    if len(data) < pos + 8:
        raise CheckpointTruncatedError("file ends inside the header length")
    (hlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    if len(data) < pos + hlen:
        raise CheckpointTruncatedError("file ends inside the JSON header")
    try:
        header = json.loads(data[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"unreadable header: {err}") from None
    pos += hlen
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported format version {header.get('format_version')!r}")

    config = ModelConfig(**header["config"])
    vocabulary = Vocabulary(list(header["vocabulary"]))
    if vocabulary.e != config.e:
        raise CheckpointShapeError(f"vocabulary has {vocabulary.e} ids but config.e = {config.e}")
    expected = param_shapes(config)
    names = [t["name"] for t in header["tensors"]]
    if names != list(expected):
        raise CheckpointShapeError("tensor directory does not match the config inventory")

    body = data[pos:]
    if len(body) < header["data_bytes"]:
        raise CheckpointTruncatedError(
            f"tensor data is {len(body)} bytes, header declares {header['data_bytes']}"
        )
    params, offset = {}, 0
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        if shape != expected[entry["name"]]:
            raise CheckpointShapeError(f"{entry['name']}: header shape {shape} != {expected[entry['name']]}")
        if entry["offset"] != offset:
            raise CheckpointShapeError(f"{entry['name']}: offset {entry['offset']} != {offset}")
        n = int(np.prod(shape))
        arr = np.frombuffer(body, dtype=_DTYPE, count=n, offset=offset)
        params[entry["name"]] = arr.reshape(shape).astype(np.float32)
        offset += n * _DTYPE.itemsize
    if offset != header["data_bytes"]:
        raise CheckpointShapeError("declared data size disagrees with the directory")
    return params, config, vocabulary


def save_checkpoint(params, config: ModelConfig, vocabulary: Vocabulary, path) -> None:
    data = to_bytes(params, config, vocabulary)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Return ``(params, config, vocabulary)``."""
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
