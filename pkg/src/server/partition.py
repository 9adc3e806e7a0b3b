"""Partition planning (row-wise / column-wise) and vertex-to-server routing."""

import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..models.data_models import (
    PartitionAssignment,
    PartitionPlan,
    PartitionStrategy,
    RouteTable,
)
from ..utils.exceptions import InfeasiblePartitionError, InvalidParametersError, VertexRangeError

logger = logging.getLogger(__name__)

BLOCKS_PER_SERVER = 16


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def _uniform_ranges(count: int, parts: int) -> List[Tuple[int, int]]:
    base, extra = divmod(count, parts)
    ranges, cursor = [], 0
    for i in range(parts):
        size = base + (1 if i < extra else 0)
        ranges.append((cursor, cursor + size))
        cursor += size
    return ranges


def _first_fit_decreasing(
    freq: np.ndarray,
    n_bins: int,
    row_bytes: int,
    capacity: int,
) -> List[List[Tuple[int, int]]]:
    """Pack contiguous row blocks into servers by decreasing request mass.

    A block goes to the first server with memory room whose load stays within
    the mean load; failing that, to the least-loaded server with room; failing
    that, to a new server.
    """
    count = freq.shape[0]
    block = max(1, _ceil_div(count, n_bins * BLOCKS_PER_SERVER))
    rows_per_server = capacity // row_bytes
    starts = np.arange(0, count, block)
    stops = np.minimum(starts + block, count)
    mass = np.add.reduceat(freq.astype(np.float64), starts) if count else np.empty(0)
    target = mass.sum() / n_bins if n_bins else 0.0

    loads = [0.0] * n_bins
    rows_used = [0] * n_bins
    bins: List[List[Tuple[int, int]]] = [[] for _ in range(n_bins)]
    for idx in sorted(range(starts.shape[0]), key=lambda i: (-mass[i], starts[i])):
        size = int(stops[idx] - starts[idx])
        item = (int(starts[idx]), int(stops[idx]))
        room = [b for b in range(len(bins)) if rows_used[b] + size <= rows_per_server]
        fit = next((b for b in room if loads[b] + mass[idx] <= target), None)
        if fit is None and room:
            fit = min(room, key=lambda b: (loads[b], b))
        if fit is None:
            bins.append([])
            loads.append(0.0)
            rows_used.append(0)
            fit = len(bins) - 1
        bins[fit].append(item)
        loads[fit] += float(mass[idx])
        rows_used[fit] += size

    merged = []
    for ranges in bins:
        ranges.sort()
        out: List[Tuple[int, int]] = []
        for start, stop in ranges:
            if out and out[-1][1] == start:
                out[-1] = (out[-1][0], stop)
            else:
                out.append((start, stop))
        merged.append(out)
    return [m for m in merged if m]


def plan_partitions(
    counts: Sequence[int],
    dim: int,
    bytes_per_value: int,
    server_capacity: int,
    strategy: PartitionStrategy = PartitionStrategy.ROW_WISE,
    frequencies: Optional[Sequence[np.ndarray]] = None,
    min_servers_per_type: int = 1,
) -> PartitionPlan:
    """Size and place every vertex type's table onto parameter servers.

    Servers never mix vertex types. Row-wise plans split a type uniformly, or by
    first-fit-decreasing on occurrence frequency when `frequencies` is given;
    column-wise plans give each server as many whole columns as fit.
    """
    if server_capacity <= 0:
        raise InvalidParametersError("server capacity must be positive", parameter="server_capacity",
                                     value=server_capacity)
    if dim < 1 or bytes_per_value < 1:
        raise InvalidParametersError("dim and bytes_per_value must be positive", parameter="dim", value=dim)
    strategy = PartitionStrategy(strategy)
    plan = PartitionPlan(strategy=strategy, server_capacity=server_capacity)

    def add_server(vtype: int) -> int:
        plan.server_bytes.append(0)
        plan.server_types.append(vtype)
        return len(plan.server_bytes) - 1

    for vtype, count in enumerate(counts):
        count = int(count)
        if count == 0:
            continue
        if strategy == PartitionStrategy.COLUMN_WISE:
            column_bytes = count * bytes_per_value
            plan.column_bytes[vtype] = column_bytes
            if column_bytes > server_capacity:
                raise InfeasiblePartitionError(
                    f"one column of type {vtype} needs {column_bytes} bytes, over the {server_capacity}-byte cap",
                    strategy=strategy.value, violating_bytes=column_bytes, capacity_bytes=server_capacity,
                )
            per_server = min(dim, server_capacity // column_bytes)
            for col_start in range(0, dim, per_server):
                col_stop = min(col_start + per_server, dim)
                sid = add_server(vtype)
                size = (col_stop - col_start) * column_bytes
                plan.server_bytes[sid] = size
                plan.assignments.append(PartitionAssignment(
                    server_id=sid, vtype=vtype, row_start=0, row_stop=count,
                    col_start=col_start, col_stop=col_stop, bytes=size,
                ))
            continue

        row_bytes = dim * bytes_per_value
        if row_bytes > server_capacity:
            raise InfeasiblePartitionError(
                f"one row of type {vtype} needs {row_bytes} bytes, over the {server_capacity}-byte cap",
                strategy=strategy.value, violating_bytes=row_bytes, capacity_bytes=server_capacity,
            )
        rows_per_server = server_capacity // row_bytes
        n_servers = min(count, max(_ceil_div(count, rows_per_server), min_servers_per_type))
        if frequencies is not None and frequencies[vtype] is not None:
            freq = np.asarray(frequencies[vtype])
            if freq.shape[0] != count:
                raise InvalidParametersError(
                    f"frequencies for type {vtype} cover {freq.shape[0]} of {count} vertices",
                    parameter="frequencies", value=freq.shape[0],
                )
            groups = _first_fit_decreasing(freq, n_servers, row_bytes, server_capacity)
        else:
            groups = [[r] for r in _uniform_ranges(count, n_servers)]
        for ranges in groups:
            sid = add_server(vtype)
            for start, stop in ranges:
                size = (stop - start) * row_bytes
                plan.server_bytes[sid] += size
                plan.assignments.append(PartitionAssignment(
                    server_id=sid, vtype=vtype, row_start=start, row_stop=stop,
                    col_start=0, col_stop=dim, bytes=size,
                ))

    logger.info(
        f"{strategy.value} plan: {plan.n_servers} server(s), "
        f"max {max(plan.server_bytes, default=0)} of {server_capacity} bytes"
    )
    return plan


class Router:
    """Vectorized (vtype, ids) -> server id lookup over a RouteTable."""

    def __init__(self, table: RouteTable):
        self.table = table
        self._starts: Dict[int, np.ndarray] = {}
        self._stops: Dict[int, np.ndarray] = {}
        self._servers: Dict[int, np.ndarray] = {}
        for vtype in range(len(table.type_counts)):
            ranges = table.ranges_for(vtype)
            self._starts[vtype] = np.array([r.start for r in ranges], dtype=np.int64)
            self._stops[vtype] = np.array([r.stop for r in ranges], dtype=np.int64)
            self._servers[vtype] = np.array([r.server_id for r in ranges], dtype=np.int64)

    def route(self, vtype: int, ids: np.ndarray) -> np.ndarray:
        if vtype not in self._starts:
            raise VertexRangeError(f"Vertex type {vtype} has no routes", vtype=vtype)
        ids = np.asarray(ids, dtype=np.int64)
        slot = np.searchsorted(self._starts[vtype], ids, side="right") - 1
        bad = (slot < 0) | (ids >= self.table.type_counts[vtype])
        if bad.any():
            first = int(ids[np.flatnonzero(bad)[0]])
            raise VertexRangeError(f"Vertex {first} of type {vtype} has no route", vtype=vtype, vertex_id=first)
        return self._servers[vtype][slot]

    def server_ids(self) -> List[int]:
        return sorted({r.server_id for r in self.table.ranges})
