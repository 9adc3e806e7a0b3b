"""Little-endian binary framing between workers and parameter servers.

Request:  [u32 len][u8 opcode][u8 vtype][u32 n][n x u64 id][PUT: u32 D][PUT: n x D f8]
Response: [u32 len][u8 status][payload]

TAG requests carry a UTF-8 client tag in place of the ids (n = byte length).
"""

import asyncio
import struct
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from ..utils.exceptions import ProtocolError

OP_GET = 1
OP_PUT = 2
OP_SHUTDOWN = 3
OP_STATS = 4
OP_TAG = 5
OPCODES = {OP_GET: "GET", OP_PUT: "PUT", OP_SHUTDOWN: "SHUTDOWN", OP_STATS: "STATS", OP_TAG: "TAG"}

STATUS_OK = 0
STATUS_PARTIAL = 1
STATUS_ERROR = 2

MAX_FRAME = 1 << 30

_LEN = struct.Struct("<I")
_HEAD = struct.Struct("<BBI")
_ROWS = struct.Struct("<II")
_WIRE_VALUE = np.dtype("<f8")
_WIRE_ID = np.dtype("<u8")


@dataclass
class Request:
    opcode: int
    vtype: int = 0
    ids: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None
    tag: Optional[str] = None


def _frame(body: bytes) -> bytes:
    return _LEN.pack(len(body)) + body


def encode_request(
    opcode: int,
    vtype: int = 0,
    ids: Optional[np.ndarray] = None,
    values: Optional[np.ndarray] = None,
    tag: Optional[str] = None,
) -> bytes:
    if opcode == OP_TAG:
        raw = (tag or "").encode("utf-8")
        return _frame(_HEAD.pack(opcode, 0, len(raw)) + raw)
    ids = np.empty(0, dtype=_WIRE_ID) if ids is None else np.ascontiguousarray(ids, dtype=_WIRE_ID)
    body = _HEAD.pack(opcode, vtype, ids.shape[0]) + ids.tobytes()
    if opcode == OP_PUT:
        values = np.ascontiguousarray(values, dtype=_WIRE_VALUE)
        if values.ndim != 2 or values.shape[0] != ids.shape[0]:
            raise ProtocolError(f"PUT values shape {values.shape} does not match {ids.shape[0]} ids", opcode=opcode)
        body += _LEN.pack(values.shape[1]) + values.tobytes()
    return _frame(body)


def decode_request(body: bytes) -> Request:
    """Parse one request body (the bytes after the length prefix)."""
    if len(body) < _HEAD.size:
        raise ProtocolError(f"request of {len(body)} bytes is shorter than its header")
    opcode, vtype, n = _HEAD.unpack_from(body)
    if opcode not in OPCODES:
        raise ProtocolError(f"unknown opcode {opcode}", opcode=opcode)
    offset = _HEAD.size
    if opcode == OP_TAG:
        if len(body) != offset + n:
            raise ProtocolError("TAG length does not match frame", opcode=opcode)
        return Request(opcode, tag=body[offset:].decode("utf-8", errors="replace"))
    id_end = offset + n * _WIRE_ID.itemsize
    if len(body) < id_end:
        raise ProtocolError(f"frame too short for {n} ids", opcode=opcode)
    ids = np.frombuffer(body, dtype=_WIRE_ID, count=n, offset=offset).astype(np.int64)
    if opcode != OP_PUT:
        if len(body) != id_end:
            raise ProtocolError(f"{len(body) - id_end} trailing bytes after ids", opcode=opcode)
        return Request(opcode, vtype, ids)
    if len(body) < id_end + _LEN.size:
        raise ProtocolError("PUT frame lacks its dimension field", opcode=opcode)
    (dim,) = _LEN.unpack_from(body, id_end)
    value_start = id_end + _LEN.size
    if len(body) != value_start + n * dim * _WIRE_VALUE.itemsize:
        raise ProtocolError(f"PUT payload does not hold {n} x {dim} values", opcode=opcode)
    values = np.frombuffer(body, dtype=_WIRE_VALUE, count=n * dim, offset=value_start).reshape(n, dim)
    return Request(opcode, vtype, ids, values)


def encode_response(status: int, payload: bytes = b"") -> bytes:
    return _frame(bytes([status]) + payload)


def encode_rows(values: np.ndarray) -> bytes:
    values = np.ascontiguousarray(values, dtype=_WIRE_VALUE)
    return _ROWS.pack(values.shape[0], values.shape[1]) + values.tobytes()


def decode_rows(payload: bytes) -> np.ndarray:
    if len(payload) < _ROWS.size:
        raise ProtocolError("row payload shorter than its header")
    n, dim = _ROWS.unpack_from(payload)
    if len(payload) != _ROWS.size + n * dim * _WIRE_VALUE.itemsize:
        raise ProtocolError(f"row payload does not hold {n} x {dim} values")
    return np.frombuffer(payload, dtype=_WIRE_VALUE, count=n * dim, offset=_ROWS.size).reshape(n, dim).copy()


def encode_rejected(ids: np.ndarray) -> bytes:
    ids = np.ascontiguousarray(ids, dtype=_WIRE_ID)
    return _LEN.pack(ids.shape[0]) + ids.tobytes()


def decode_rejected(payload: bytes) -> np.ndarray:
    (n,) = _LEN.unpack_from(payload)
    return np.frombuffer(payload, dtype=_WIRE_ID, count=n, offset=_LEN.size).astype(np.int64)


def encode_stats(counters: Dict[str, int]) -> bytes:
    return "\n".join(f"{key}={value}" for key, value in sorted(counters.items())).encode("utf-8")


def decode_stats(payload: bytes) -> Dict[str, int]:
    stats = {}
    for line in payload.decode("utf-8").splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            stats[key] = int(value)
    return stats


_DRAIN_CHUNK = 1 << 20


async def read_frame(reader: asyncio.StreamReader, max_frame: int = MAX_FRAME) -> bytes:
    """Read one length-prefixed frame; IncompleteReadError on EOF.

    A frame longer than `max_frame` is read and dropped, then reported as a
    ProtocolError, so the stream stays aligned on the next frame.
    """
    (length,) = _LEN.unpack(await reader.readexactly(_LEN.size))
    if length > max_frame:
        remaining = length
        while remaining:
            remaining -= len(await reader.readexactly(min(remaining, _DRAIN_CHUNK)))
        raise ProtocolError(
            f"frame of {length} bytes exceeds the {max_frame}-byte limit", context={"frame_length": length}
        )
    return await reader.readexactly(length)
