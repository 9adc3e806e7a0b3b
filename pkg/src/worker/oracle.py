"""Monolithic single-process training: the worker loop with in-memory tables instead of servers."""

import asyncio
import logging
from typing import Dict, Optional, Tuple

from ..embedding.core import EmbeddingTable
from ..graph.walks import RowBlock
from ..models.data_models import GIB, TrainConfig, WorkerReport
from .worker import InMemoryRowStore, ProgressCallback, run_subsets

logger = logging.getLogger(__name__)


async def train_monolithic_async(
    rows: RowBlock,
    tables: Dict[int, EmbeddingTable],
    cfg: TrainConfig,
    budget_bytes: int = 2 * GIB,
    seed: int = 0,
    on_progress: Optional[ProgressCallback] = None,
) -> Tuple[Dict[int, EmbeddingTable], WorkerReport]:
    trained = {vtype: table.copy() for vtype, table in tables.items()}
    report = await run_subsets(rows, InMemoryRowStore(trained), cfg, budget_bytes, 0, seed, on_progress)
    return trained, report


def train_monolithic(
    rows: RowBlock,
    tables: Dict[int, EmbeddingTable],
    cfg: TrainConfig,
    budget_bytes: int = 2 * GIB,
    seed: int = 0,
) -> Tuple[Dict[int, EmbeddingTable], WorkerReport]:
    """Train copies of `tables` on `rows` exactly as one networked worker would.

    Given the same initial tables, rows, config and seed, the result matches a
    single worker training through parameter servers bit for bit.
    """
    trained, report = asyncio.run(train_monolithic_async(rows, tables, cfg, budget_bytes, seed))
    logger.info(f"Monolithic run: {report.subsets} subsets, {report.batches} batches")
    return trained, report
