"""Binary and TSV codecs for training-row shard files."""

import logging
import struct
from pathlib import Path
from typing import Union

import numpy as np

from ..utils.exceptions import CheckpointError
from .walks import RowBlock

logger = logging.getLogger(__name__)

SHARD_MAGIC = b"GWLK"
SHARD_VERSION = 1
_HEADER = struct.Struct("<4sHHQB")


def _row_dtype(k: int) -> np.dtype:
    slot = [("t", "u1"), ("i", "<u8")]
    fields = [("input", slot), ("context", slot)]
    if k:
        fields.append(("neg", slot, (k,)))
    return np.dtype(fields)


def write_shard(rows: RowBlock, path: Union[str, Path]) -> None:
    """Little-endian GWLK shard: header then fixed-width rows."""
    k = rows.k
    records = np.empty(len(rows), dtype=_row_dtype(k))
    records["input"]["t"], records["input"]["i"] = rows.input_type, rows.input_id
    records["context"]["t"], records["context"]["i"] = rows.context_type, rows.context_id
    if k:
        records["neg"]["t"], records["neg"]["i"] = rows.neg_type, rows.neg_id
    with open(path, "wb") as handle:
        handle.write(_HEADER.pack(SHARD_MAGIC, SHARD_VERSION, k, len(rows), int(rows.typed)))
        handle.write(records.tobytes())
    logger.debug(f"Wrote {len(rows)} rows (k={k}) to {path}")


def read_shard(path: Union[str, Path]) -> RowBlock:
    path = str(path)
    with open(path, "rb") as handle:
        header = handle.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise CheckpointError(f"{path}: truncated shard header", path=path)
        magic, version, k, row_count, _typed = _HEADER.unpack(header)
        if magic != SHARD_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}", path=path)
        if version != SHARD_VERSION:
            raise CheckpointError(f"{path}: unsupported shard version {version}", path=path)
        dtype = _row_dtype(k)
        body = handle.read()
    if len(body) != row_count * dtype.itemsize:
        raise CheckpointError(
            f"{path}: expected {row_count} rows of {dtype.itemsize} bytes, found {len(body)} bytes", path=path
        )
    records = np.frombuffer(body, dtype=dtype, count=row_count)
    neg_type = records["neg"]["t"] if k else np.empty((row_count, 0), dtype=np.uint8)
    neg_id = records["neg"]["i"] if k else np.empty((row_count, 0), dtype=np.uint64)
    return RowBlock(
        records["input"]["t"].copy(), records["input"]["i"].astype(np.int64),
        records["context"]["t"].copy(), records["context"]["i"].astype(np.int64),
        neg_type.copy(), neg_id.astype(np.int64),
    )


def write_shard_tsv(rows: RowBlock, path: Union[str, Path]) -> None:
    """Debug mirror of the binary layout, one row per line."""
    k = rows.k
    columns = ["input_type", "input_id", "context_type", "context_id"]
    for j in range(k):
        columns += [f"neg{j}_type", f"neg{j}_id"]
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(f"# GWLK version={SHARD_VERSION} k={k} rows={len(rows)} typed={int(rows.typed)}\n")
        handle.write("\t".join(columns) + "\n")
        for i in range(len(rows)):
            fields = [rows.input_type[i], rows.input_id[i], rows.context_type[i], rows.context_id[i]]
            for j in range(k):
                fields += [rows.neg_type[i, j], rows.neg_id[i, j]]
            handle.write("\t".join(str(int(f)) for f in fields) + "\n")


def read_shard_tsv(path: Union[str, Path]) -> RowBlock:
    path = str(path)
    with open(path, encoding="utf-8") as handle:
        meta = handle.readline()
        if not meta.startswith("# GWLK"):
            raise CheckpointError(f"{path}: missing GWLK header line", path=path)
        k = int(dict(field.split("=") for field in meta.split()[2:])["k"])
        handle.readline()
        data = np.loadtxt(handle, dtype=np.int64, delimiter="\t", ndmin=2)
    if data.size == 0:
        return RowBlock.empty(k)
    return RowBlock(
        data[:, 0].astype(np.uint8), data[:, 1],
        data[:, 2].astype(np.uint8), data[:, 3],
        data[:, 4::2].astype(np.uint8), data[:, 5::2],
    )
