"""The worker loop: slice, map, fetch, train, map back, flush.

The loop runs against a RowStore so the same code drives both the networked
worker (ClusterClient) and the in-process monolithic oracle.
"""

import asyncio
import json
import logging
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from ..embedding.core import EmbeddingTable
from ..graph.shards import read_shard
from ..graph.walks import RowBlock
from ..models.data_models import RouteTable, SubsetProgress, TrainConfig, WorkerConfig, WorkerReport
from ..server.client import ClusterClient
from ..utils.exceptions import BudgetExceededError, GrembedError, PoisonedUpdateError
from .local_index import LocalIndexMap, build_local_index, relabel
from .trainer import train_subset

logger = logging.getLogger(__name__)

ProgressCallback = Callable[[SubsetProgress], None]


class RowStore(ABC):
    """Where a worker reads rows from and writes whole rows back to."""

    @abstractmethod
    async def fetch(self, vtype: int, ids: np.ndarray) -> np.ndarray:
        """Rows for `ids` as float64, in request order."""

    @abstractmethod
    async def flush(self, vtype: int, ids: np.ndarray, values: np.ndarray) -> None:
        """Overwrite the rows for `ids`."""


class NetworkRowStore(RowStore):
    def __init__(self, client: ClusterClient):
        self.client = client

    async def fetch(self, vtype: int, ids: np.ndarray) -> np.ndarray:
        return await self.client.get_rows(vtype, ids)

    async def flush(self, vtype: int, ids: np.ndarray, values: np.ndarray) -> None:
        rejected = await self.client.put_rows(vtype, ids, values)
        if rejected.shape[0]:
            logger.warning(f"{rejected.shape[0]} row(s) of type {vtype} rejected by the servers")


class InMemoryRowStore(RowStore):
    """Full tables held in process; reads and writes follow the server's rules."""

    def __init__(self, tables: Dict[int, EmbeddingTable]):
        self.tables = tables

    async def fetch(self, vtype: int, ids: np.ndarray) -> np.ndarray:
        return self.tables[vtype].values[ids].astype(np.float64)

    async def flush(self, vtype: int, ids: np.ndarray, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64)
        finite = np.isfinite(values).all(axis=1)
        table = self.tables[vtype].values
        table[ids[finite]] = values[finite].astype(table.dtype)


@dataclass
class SubsetUnit:
    """One fetch/train/flush cycle: a contiguous slice of the epoch's rows."""
    rows: RowBlock
    index: LocalIndexMap
    full: bool


def plan_subsets(rows: RowBlock, cfg: TrainConfig, budget_bytes: int, report: WorkerReport) -> List[SubsetUnit]:
    """Cut rows into dataSize slices, halving any slice whose local tables exceed the budget."""
    units: List[SubsetUnit] = []
    size = cfg.data_size

    def place(block: RowBlock, full: bool) -> None:
        index = build_local_index(block)
        footprint = index.footprint(cfg.dim, cfg.bytes_per_value)
        if footprint <= budget_bytes:
            units.append(SubsetUnit(block, index, full))
            report.peak_local_bytes = max(report.peak_local_bytes, footprint)
            return
        if len(block) == 1:
            raise BudgetExceededError(
                f"a single row needs {footprint} bytes, over the {budget_bytes}-byte budget",
                required_bytes=footprint, budget_bytes=budget_bytes,
            )
        report.budget_splits += 1
        logger.warning(f"Subset of {len(block)} rows needs {footprint} bytes > {budget_bytes}; splitting in half")
        half = len(block) // 2
        place(block.slice(0, half), False)
        place(block.slice(half, len(block)), False)

    for start in range(0, len(rows), size):
        stop = min(start + size, len(rows))
        place(rows.slice(start, stop), stop - start == size)
    return units


async def _fetch(store: RowStore, unit: SubsetUnit, cfg: TrainConfig) -> Dict[int, EmbeddingTable]:
    tables = {}
    for vtype in unit.index.types:
        values = await store.fetch(vtype, unit.index.reverse[vtype])
        tables[vtype] = EmbeddingTable(values.astype(cfg.dtype))
    return tables


async def _flush(store: RowStore, unit: SubsetUnit, tables: Dict[int, EmbeddingTable]) -> None:
    for vtype in unit.index.types:
        await store.flush(vtype, unit.index.reverse[vtype], tables[vtype].values)


def _carry_over(
    unit: SubsetUnit,
    tables: Dict[int, EmbeddingTable],
    next_unit: SubsetUnit,
    prefetched: Dict[int, EmbeddingTable],
) -> int:
    """Copy just-flushed rows into the prefetched tables of the next subset.

    The prefetch was read before this subset's flush, so rows both subsets
    share would otherwise go back to the servers stale. Non-finite rows are
    left alone, as the store rejects them. Returns the number of rows copied.
    """
    copied = 0
    for vtype in unit.index.types:
        if vtype not in prefetched:
            continue
        _, here, there = np.intersect1d(
            unit.index.reverse[vtype], next_unit.index.reverse[vtype], assume_unique=True, return_indices=True
        )
        rows = tables[vtype].values[here]
        finite = np.isfinite(rows).all(axis=1)
        prefetched[vtype].values[there[finite]] = rows[finite]
        copied += int(finite.sum())
    return copied


async def run_subsets(
    rows: RowBlock,
    store: RowStore,
    cfg: TrainConfig,
    budget_bytes: int,
    worker_id: int = 0,
    seed: int = 0,
    on_progress: Optional[ProgressCallback] = None,
) -> WorkerReport:
    """Train every subset of `rows` for cfg.epochs passes against `store`.

    With prefetch on, the next subset's rows are requested while the current
    one trains, and that fetch completes before the current subset is flushed.
    Rows the two subsets share are then carried over from the flushed tables,
    so a worker never trains on its own stale copy.
    """
    report = WorkerReport(worker_id=worker_id)
    started = time.monotonic()
    rng = np.random.default_rng(seed)
    for epoch in range(cfg.epochs):
        epoch_rows = rows.take(rng.permutation(len(rows))) if cfg.shuffle else rows
        units = plan_subsets(epoch_rows, cfg, budget_bytes, report)
        prefetched: Optional[Dict[int, EmbeddingTable]] = None
        for i, unit in enumerate(units):
            subset_started = time.monotonic()
            tables = prefetched if prefetched is not None else await _fetch(store, unit, cfg)
            prefetched = None
            report.fetch_count += 1
            next_fetch = None
            if cfg.prefetch and i + 1 < len(units):
                next_fetch = asyncio.create_task(_fetch(store, units[i + 1], cfg))

            localized = relabel(unit.rows, unit.index)
            n_batches = None if unit.full else -(-len(unit.rows) // cfg.batch_size)
            try:
                loss, batches = await asyncio.to_thread(train_subset, tables, localized, cfg, n_batches, unit.full)
            except PoisonedUpdateError as e:
                logger.error(f"Worker {worker_id} abandoned subset {report.subsets}: {e.message}")
                report.poisoned_subsets.append(report.subsets)
                report.subsets += 1
                if next_fetch is not None:
                    prefetched = await next_fetch
                continue

            if next_fetch is not None:
                prefetched = await next_fetch
            await _flush(store, unit, tables)
            report.flush_count += 1
            if prefetched is not None:
                report.carried_rows += _carry_over(unit, tables, units[i + 1], prefetched)

            touched = sum(unit.index.unique_count(t) for t in unit.index.types)
            report.rows_seen += len(unit.rows)
            report.subsets += 1
            report.batches += batches
            report.subset_losses.append(loss)
            if on_progress is not None:
                on_progress(SubsetProgress(
                    worker_id=worker_id, epoch=epoch, subset=report.subsets - 1, mean_loss=loss,
                    fetched=touched, flushed=touched, batches=batches,
                    wall_ms=(time.monotonic() - subset_started) * 1000.0,
                ))
    report.wall_ms = (time.monotonic() - started) * 1000.0
    return report


def print_progress(progress: SubsetProgress) -> None:
    print(progress.model_dump_json(), flush=True)


async def run_worker(cfg: WorkerConfig, on_progress: Optional[ProgressCallback] = print_progress) -> WorkerReport:
    """Run one worker against live parameter servers.

    Unreachable servers (after retries) abort the run; the report records the error.
    """
    rows = read_shard(cfg.shard_path)
    routes = RouteTable.model_validate_json(Path(cfg.routes_path).read_text(encoding="utf-8"))
    logger.info(f"Worker {cfg.worker_id}: {len(rows)} rows, {len(routes.servers)} server(s)")
    client = ClusterClient(routes, tag=f"worker-{cfg.worker_id}", max_retries=cfg.max_retries)
    try:
        await client.connect()
        report = await run_subsets(
            rows, NetworkRowStore(client), cfg.train, cfg.budget_bytes, cfg.worker_id, cfg.seed, on_progress
        )
    except GrembedError as e:
        logger.error(f"Worker {cfg.worker_id} aborted: {e.message}")
        return WorkerReport(worker_id=cfg.worker_id, aborted=True, error=json.dumps(e.to_dict(), default=str))
    finally:
        await client.close()
    logger.info(
        f"Worker {cfg.worker_id} done: {report.subsets} subsets, {report.batches} batches, "
        f"{report.rows_seen} rows in {report.wall_ms:.0f} ms"
    )
    return report
