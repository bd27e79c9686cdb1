"""JSON documents and the binary checkpoint codec.

Checkpoint byte layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"DKCK"
    4       4     u32 format version (1)
    8       32    SHA-256 of the canonical NetSpec JSON (sorted keys)
    40      4     u32 header length H
    44      H     UTF-8 JSON header: spec, norm (mean/std per channel),
                  params ([name, shape] in layout order), metadata
    44+H    ...   every parameter as float64 little-endian, C order, header order
"""

import json
import logging
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from src.config import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from src.errors import ConfigError, FormatError
from src.nets import NetSpec, ParamSet

logger = logging.getLogger(__name__)

_PREFIX = struct.Struct("<4sI32sI")


@dataclass
class Checkpoint:
    """Network spec, parameters and the normalization the network was trained with."""

    spec: NetSpec
    params: ParamSet
    norm_mean: np.ndarray
    norm_std: np.ndarray
    metadata: dict = field(default_factory=dict)


def save_json(path, data):
    """Writes ``data`` as indented JSON."""
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=4, ensure_ascii=False, sort_keys=True)
        f.write("\n")


def load_json(path):
    """Reads a JSON document; a missing or unparsable file is a ConfigError."""
    if not os.path.exists(path):
        raise ConfigError(f"file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"can't read {path}: {e}") from e


def save_checkpoint(path, checkpoint):
    """Encodes ``checkpoint`` in the DKCK layout and writes it to ``path``."""
    spec = checkpoint.spec
    names = list(checkpoint.params.keys())
    header = {
        "spec": spec.to_dict(),
        "norm": {
            "mean": np.asarray(checkpoint.norm_mean, dtype=np.float64).tolist(),
            "std": np.asarray(checkpoint.norm_std, dtype=np.float64).tolist(),
        },
        "params": [[name, list(checkpoint.params[name].shape)] for name in names],
        "metadata": checkpoint.metadata,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [
        _PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, spec.spec_hash(), len(header_bytes)),
        header_bytes,
    ]
    for name in names:
        chunks.append(np.ascontiguousarray(checkpoint.params[name], dtype="<f8").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))
    logger.info("wrote checkpoint %s (%d parameters)", path, checkpoint.params.num_params())


def load_checkpoint(path):
    """Decodes a DKCK file; any layout violation is a FormatError."""
    if not os.path.exists(path):
        raise ConfigError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        payload = f.read()
    if len(payload) < _PREFIX.size:
        raise FormatError(f"{path}: truncated checkpoint header")
    magic, version, digest, header_len = _PREFIX.unpack_from(payload, 0)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    start = _PREFIX.size + header_len
    try:
        header = json.loads(payload[_PREFIX.size : start].decode("utf-8"))
        spec = NetSpec.from_dict(header["spec"])
        layout = [(name, tuple(shape)) for name, shape in header["params"]]
        norm = header["norm"]
    except (UnicodeDecodeError, KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: unreadable checkpoint header ({e})") from e
    if spec.spec_hash() != digest:
        raise FormatError(f"{path}: spec hash does not match the header")
    sizes = [int(np.prod(shape, dtype=np.int64)) for _, shape in layout]
    if len(payload) != start + 8 * sum(sizes):
        raise FormatError(f"{path}: parameter block has the wrong size")
    params = ParamSet()
    offset = start
    for (name, shape), size in zip(layout, sizes):
        array = np.frombuffer(payload, dtype="<f8", count=size, offset=offset).reshape(shape)
        if not np.all(np.isfinite(array)):
            raise FormatError(f"{path}: parameter {name} holds non-finite values")
        params.add(name, array.astype(np.float64))
        offset += 8 * size
    return Checkpoint(
        spec=spec,
        params=params,
        norm_mean=np.asarray(norm["mean"], dtype=np.float64),
        norm_std=np.asarray(norm["std"], dtype=np.float64),
        metadata=header.get("metadata", {}),
    )
