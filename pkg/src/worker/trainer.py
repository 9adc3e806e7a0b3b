"""Local minibatch training of one subset against worker-local tables."""

import logging
from typing import Dict, Optional, Tuple

import numpy as np

from ..embedding.core import EmbeddingTable, GradientSet, batch_gradients, sgd_step
from ..graph.walks import RowBlock
from ..models.data_models import TrainConfig
from ..utils.exceptions import PoisonedUpdateError

logger = logging.getLogger(__name__)


def _gather(tables: Dict[int, EmbeddingTable], types: np.ndarray, ids: np.ndarray, dim: int, dtype) -> np.ndarray:
    out = np.empty(types.shape + (dim,), dtype=dtype)
    for vtype in np.unique(types):
        mask = types == vtype
        out[mask] = tables[int(vtype)].values[ids[mask]]
    return out


def batch_positions(batch: int, batch_size: int, n_rows: int, cycle: bool) -> np.ndarray:
    """Row positions of one minibatch; cycling wraps past the end of the subset."""
    positions = np.arange(batch * batch_size, (batch + 1) * batch_size, dtype=np.int64)
    if cycle:
        return positions % n_rows
    return positions[positions < n_rows]


def train_subset(
    tables: Dict[int, EmbeddingTable],
    rows: RowBlock,
    cfg: TrainConfig,
    n_batches: Optional[int] = None,
    cycle: bool = True,
) -> Tuple[float, int]:
    """Run sequential minibatches of NCE + SGD on localized rows, updating `tables` in place.

    Args:
        tables: Local embedding table per vertex type, indexed by local id
        rows: Subset rows with local ids
        cfg: Training parameters (batch size, learning rate, metric)
        n_batches: Batches to run; defaults to cfg.n_steps
        cycle: Wrap around the subset when batches run past its end

    Returns:
        (mean per-row loss over every trained row, batches run)

    Raises:
        PoisonedUpdateError: a batch produced a non-finite loss; the subset is abandoned
    """
    n_batches = cfg.n_steps if n_batches is None else n_batches
    n_rows = len(rows)
    if n_rows == 0 or n_batches == 0:
        return 0.0, 0
    dim = next(iter(tables.values())).dim
    dtype = next(iter(tables.values())).dtype
    total_loss, total_rows = 0.0, 0
    done = 0
    for b in range(n_batches):
        pos = batch_positions(b, cfg.batch_size, n_rows, cycle)
        if pos.shape[0] == 0:
            break
        in_t, in_i = rows.input_type[pos], rows.input_id[pos]
        ctx_t, ctx_i = rows.context_type[pos], rows.context_id[pos]
        neg_t, neg_i = rows.neg_type[pos], rows.neg_id[pos]
        x = _gather(tables, in_t, in_i, dim, dtype)
        y = _gather(tables, ctx_t, ctx_i, dim, dtype)
        negs = _gather(tables, neg_t, neg_i, dim, dtype)

        loss, gx, gy, gneg = batch_gradients(x, y, negs, cfg.metric)
        if not np.isfinite(loss).all():
            logger.error(f"Non-finite loss in batch {b}; abandoning subset")
            raise PoisonedUpdateError(f"non-finite loss in batch {b}", rows=int(pos.shape[0]), batch_index=b)
        total_loss += float(loss.sum())
        total_rows += int(pos.shape[0])

        all_t = np.concatenate([in_t, ctx_t, neg_t.reshape(-1)])
        all_i = np.concatenate([in_i, ctx_i, neg_i.reshape(-1)])
        all_g = np.concatenate([gx, gy, gneg.reshape(-1, dim)])
        for vtype in np.unique(all_t):
            mask = all_t == vtype
            grads = GradientSet.accumulate(all_i[mask], all_g[mask])
            sgd_step(tables[int(vtype)], grads, cfg.learning_rate, batch_index=b)
        done += 1
    return total_loss / max(total_rows, 1), done
