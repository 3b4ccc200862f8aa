"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"DCNCKPT\\0"
    4 bytes   format version (uint32)
    8 bytes   header length H (uint64)
    H bytes   UTF-8 JSON header: model config, flags, block table, extra metadata
    ...       raw float64 little-endian blocks, concatenated in block-table order,
              each matrix row-major
    4 bytes   CRC32 of everything above

The block table lists ``name``, ``shape`` and ``kind`` ("param" or
"buffer") for each block, in the order of ``ModelParams.named_tensors()``
followed by ``ModelParams.buffers()``.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .cross import CrossParams
from .deep import BatchNormState, DeepParams
from .embedding import EmbeddingTable
from .model import ModelConfig, ModelParams

MAGIC = b"DCNCKPT\x00"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def _blocks(params: ModelParams):
    for name, arr in params.named_tensors().items():
        yield name, "param", arr
    for name, arr in params.buffers().items():
        yield name, "buffer", arr


def save_checkpoint(params: ModelParams, path: str | Path, extra: dict | None = None,
                    version: int = FORMAT_VERSION) -> None:
    blocks = list(_blocks(params))
    bn = params.deep.bn
    header = {
        "config": params.config.to_dict(),
        "bn": None if bn is None else {"momentum": bn.momentum, "eps": bn.eps},
        "blocks": [{"name": n, "kind": k, "shape": list(a.shape)} for n, k, a in blocks],
        "param_tally": int(sum(a.size for _, k, a in blocks if k == "param")),
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = bytearray(_PREFIX.pack(MAGIC, version, len(hbytes)))
    body += hbytes
    for _, _, a in blocks:
        body += np.ascontiguousarray(a, dtype="<f8").tobytes()
    body += struct.pack("<I", zlib.crc32(body))
    Path(path).write_bytes(bytes(body))


def read_header(path: str | Path) -> dict:
    return _read(path)[0]


def _read(path: str | Path):
    try:
        return _parse(Path(path).read_bytes())
    except CheckpointError as e:
        raise type(e)(f"checkpoint {path}: {e}") from e


def _parse(raw: bytes):
    if len(raw) < _PREFIX.size + 4:
        raise CorruptCheckpointError("file is too short to be a checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CorruptCheckpointError("bad magic bytes")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != crc:
        raise CorruptCheckpointError("checksum mismatch (truncated or modified file)")
    start = _PREFIX.size
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpointError(f"unreadable header: {e}") from e
    offset = start + hlen
    arrays = {}
    for b in header["blocks"]:
        shape = tuple(b["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * 8
        if offset + n > len(raw) - 4:
            raise CorruptCheckpointError(f"block {b['name']} runs past end of file")
        arrays[b["name"]] = np.frombuffer(raw, dtype="<f8", count=n // 8, offset=offset).reshape(shape).astype(np.float64)
        offset += n
    if offset != len(raw) - 4:
        raise CorruptCheckpointError("trailing bytes after parameter blocks")
    return header, arrays


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    """Return the parameters and the header's ``extra`` metadata."""
    header, arrays = _read(path)
    config = ModelConfig.from_dict(header["config"])
    try:
        emb = EmbeddingTable(config.fields, [arrays[f"embedding.{i}"] for i in range(len(config.fields))])
        if config.cross_layers:
            cross = CrossParams(arrays["cross.w"], arrays["cross.b"])
        else:
            cross = CrossParams.zeros(config.input_dim, 0)
        L = len(config.deep_sizes)
        bn = None
        if header["bn"] is not None:
            bn = BatchNormState(
                [arrays[f"bn.gamma.{l}"] for l in range(L)],
                [arrays[f"bn.beta.{l}"] for l in range(L)],
                [arrays[f"bn.running_mean.{l}"] for l in range(L)],
                [arrays[f"bn.running_var.{l}"] for l in range(L)],
                header["bn"]["momentum"],
                header["bn"]["eps"],
            )
        deep = DeepParams([arrays[f"deep.W.{l}"] for l in range(L)], [arrays[f"deep.b.{l}"] for l in range(L)], bn)
        params = ModelParams(config, emb, cross, deep, arrays["logits.w"], arrays.get("logits.b"))
    except KeyError as e:
        raise CorruptCheckpointError(f"missing block {e}") from e
    return params, header["extra"]
