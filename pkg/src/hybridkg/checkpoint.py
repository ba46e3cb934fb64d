"""Binary embedding checkpoints.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic b"HKGEMB\\x00\\x01"
    8       4     endianness tag, uint32 0x01020304 (reads 04 03 02 01 on disk)
    12      16    model kind, ASCII, NUL padded
    28      4     norm, uint32
    32      8     dim, uint64
    40      8     number of entities, uint64
    48      8     number of relations, uint64
    56      4     CRC32 of bytes 0..55, uint32
    60      ...   entity table, then relation table

Both tables are float64, little-endian, row-major, shaped as the model's
parameter tables (``(|E|, entity_width)`` and ``(|R|, *relation_shape)``).
"""

from __future__ import annotations

import os
import struct
import zlib

import numpy as np

from .embedding import EmbeddingState
from .scoring import SCORE_FUNCTIONS, make_score_function

MAGIC = b"HKGEMB\x00\x01"
ENDIAN_TAG = 0x01020304
_HEAD = struct.Struct("<8sI16sIQQQ")
_CRC = struct.Struct("<I")
HEADER_SIZE = _HEAD.size + _CRC.size
_F8 = np.dtype("<f8")


class CheckpointError(ValueError):
    """Raised for unreadable, corrupted or mismatched checkpoints."""


def save(path, state: EmbeddingState) -> None:
    model = state.model
    kind = model.kind.encode("ascii")
    head = _HEAD.pack(MAGIC, ENDIAN_TAG, kind.ljust(16, b"\0"), model.norm, model.dim,
                      state.n_entities, state.n_relations)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(head)
        fh.write(_CRC.pack(zlib.crc32(head)))
        fh.write(np.ascontiguousarray(state.entity, dtype=_F8).tobytes())
        fh.write(np.ascontiguousarray(state.relation, dtype=_F8).tobytes())
    os.replace(tmp, path)


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read(HEADER_SIZE)
    return _parse_header(raw, path)


def _parse_header(raw: bytes, path) -> dict:
    if len(raw) < HEADER_SIZE:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    magic, tag, kind, norm, dim, n_e, n_r = _HEAD.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not an embedding checkpoint (bad magic)")
    if tag != ENDIAN_TAG:
        raise CheckpointError(f"{path}: unsupported byte order tag {tag:#010x}")
    (crc,) = _CRC.unpack_from(raw, _HEAD.size)
    if crc != zlib.crc32(raw[:_HEAD.size]):
        raise CheckpointError(f"{path}: corrupted checkpoint header (checksum mismatch)")
    kind = kind.rstrip(b"\0").decode("ascii", errors="replace")
    if kind not in SCORE_FUNCTIONS:
        raise CheckpointError(f"{path}: unknown model kind {kind!r}")
    return {"model": kind, "norm": norm, "dim": dim, "n_entities": n_e, "n_relations": n_r}


def load(path, expected_model: str | None = None) -> EmbeddingState:
    """Read a checkpoint; ``expected_model`` guards against loading the wrong kind."""
    with open(path, "rb") as fh:
        raw = fh.read()
    info = _parse_header(raw, path)
    if expected_model is not None and info["model"] != expected_model.lower():
        raise CheckpointError(
            f"{path}: checkpoint holds model {info['model']!r} but {expected_model!r} was requested")
    model = make_score_function(info["model"], info["dim"], info["norm"])
    e_shape = (info["n_entities"], model.entity_width)
    r_shape = (info["n_relations"], *model.relation_shape)
    n_e, n_r = int(np.prod(e_shape)), int(np.prod(r_shape))
    expected = HEADER_SIZE + 8 * (n_e + n_r)
    if len(raw) != expected:
        raise CheckpointError(f"{path}: expected {expected} bytes, found {len(raw)}")
    body = np.frombuffer(raw, dtype=_F8, offset=HEADER_SIZE)
    entity = body[:n_e].reshape(e_shape).astype(np.float64)
    relation = body[n_e:].reshape(r_shape).astype(np.float64)
    return EmbeddingState(model, entity, relation)
