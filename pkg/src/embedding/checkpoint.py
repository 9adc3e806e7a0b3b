"""GEMB checkpoint files: one embedding table per vertex type."""

import logging
import struct
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

from ..utils.exceptions import CheckpointError
from .core import EmbeddingTable

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"GEMB"
CHECKPOINT_VERSION = 1
CHECKPOINT_SUFFIX = ".gemb"
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def write_checkpoint(table: EmbeddingTable, path: Union[str, Path]) -> None:
    label = table.label.encode("utf-8")
    width = table.values.dtype.itemsize
    if width not in _DTYPES:
        raise CheckpointError(f"unsupported dtype {table.values.dtype}", path=str(path))
    with open(path, "wb") as handle:
        handle.write(CHECKPOINT_MAGIC)
        handle.write(struct.pack("<HH", CHECKPOINT_VERSION, len(label)))
        handle.write(label)
        handle.write(struct.pack("<QIB", table.rows, table.dim, width))
        handle.write(np.ascontiguousarray(table.values, dtype=_DTYPES[width]).tobytes())


def _read_header(handle, path: str) -> Tuple[str, int, int, np.dtype, int]:
    magic = handle.read(4)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}", path=path)
    version, label_len = struct.unpack("<HH", handle.read(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}", path=path)
    label = handle.read(label_len).decode("utf-8")
    rows, dim, width = struct.unpack("<QIB", handle.read(13))
    if width not in _DTYPES:
        raise CheckpointError(f"{path}: unknown dtype width {width}", path=path)
    return label, rows, dim, _DTYPES[width], handle.tell()


def read_checkpoint(
    path: Union[str, Path],
    row_start: int = 0,
    row_stop: Optional[int] = None,
) -> EmbeddingTable:
    """Read a whole table, or only rows [row_start, row_stop)."""
    path = str(path)
    with open(path, "rb") as handle:
        label, rows, dim, dtype, body = _read_header(handle, path)
        stop = rows if row_stop is None else row_stop
        if not 0 <= row_start <= stop <= rows:
            raise CheckpointError(f"{path}: row range [{row_start}, {stop}) outside [0, {rows})", path=path)
        handle.seek(body + row_start * dim * dtype.itemsize)
        count = (stop - row_start) * dim
        values = np.frombuffer(handle.read(count * dtype.itemsize), dtype=dtype, count=count)
    return EmbeddingTable(values.reshape(stop - row_start, dim).astype(dtype.newbyteorder("="), copy=True), label)


def save_tables(tables: Dict[str, EmbeddingTable], directory: Union[str, Path]) -> Dict[str, Path]:
    """Write `<label>.gemb` for every table into `directory`."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    for label, table in tables.items():
        paths[label] = directory / f"{label}{CHECKPOINT_SUFFIX}"
        write_checkpoint(table, paths[label])
    logger.info(f"Saved {len(tables)} table(s) to {directory}")
    return paths


def load_tables(directory: Union[str, Path]) -> Dict[str, EmbeddingTable]:
    directory = Path(directory)
    tables = {}
    for path in sorted(directory.glob(f"*{CHECKPOINT_SUFFIX}")):
        table = read_checkpoint(path)
        tables[table.label] = table
    if not tables:
        raise CheckpointError(f"no {CHECKPOINT_SUFFIX} files in {directory}", path=str(directory))
    return tables
