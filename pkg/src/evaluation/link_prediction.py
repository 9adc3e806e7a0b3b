"""Held-out edge split and link-prediction accuracy."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from ..embedding.core import EmbeddingTable, batch_scores, sigmoid
from ..graph.store import UNTYPED_LABEL, Graph
from ..models.data_models import AccuracyReport, Metric
from ..utils.exceptions import (
    CheckpointError,
    InvalidParametersError,
    MissingEmbeddingError,
    SaturatedNoiseSpaceError,
)

logger = logging.getLogger(__name__)

TableLike = Union[EmbeddingTable, np.ndarray]


@dataclass
class PairSet:
    """Vertex pairs as parallel (type, id) arrays."""
    src_type: np.ndarray
    src_id: np.ndarray
    dst_type: np.ndarray
    dst_id: np.ndarray

    def __len__(self) -> int:
        return int(self.src_id.shape[0])

    @classmethod
    def from_globals(cls, graph: Graph, src: np.ndarray, dst: np.ndarray) -> "PairSet":
        st, si = graph.split_globals(src)
        dt, di = graph.split_globals(dst)
        return cls(st, si, dt, di)

    def to_globals(self, graph: Graph) -> tuple:
        return graph.type_base[self.src_type] + self.src_id, graph.type_base[self.dst_type] + self.dst_id


@dataclass
class EvalSplit:
    """Training graph plus held-out positive edges and sampled non-edges."""
    positives: PairSet
    negatives: PairSet
    type_labels: List[str]
    seed: int = 0
    ratio: float = 0.9
    train_graph: Optional[Graph] = field(default=None, repr=False)


def split_edges(
    graph: Graph,
    ratio: float = 0.9,
    seed: int = 0,
    negatives_ratio: int = 1,
    max_attempts: int = 100,
) -> EvalSplit:
    """Hold out round((1 - ratio) * |E|) uniformly chosen edges and sample matching non-edges.

    Each negative takes uniform endpoints within the types of its positive's
    endpoints and must be a non-edge of the full graph, not a self-pair and not
    a repeat of another negative.
    """
    if not 0 < ratio < 1:
        raise InvalidParametersError(f"split ratio {ratio} must lie strictly between 0 and 1",
                                     parameter="ratio", value=ratio)
    rng = np.random.default_rng(seed)
    src, dst = graph.edges()
    n_test = int(round((1 - ratio) * src.shape[0]))
    held = rng.choice(src.shape[0], size=n_test, replace=False) if n_test else np.empty(0, dtype=np.int64)
    pos_src, pos_dst = src[held], dst[held]

    want_src = np.repeat(graph.types_of(pos_src), negatives_ratio)
    want_dst = np.repeat(graph.types_of(pos_dst), negatives_ratio)
    neg_src = np.full(want_src.shape, -1, dtype=np.int64)
    neg_dst = np.full(want_dst.shape, -1, dtype=np.int64)
    seen = set()
    pending = np.arange(want_src.shape[0])
    counts = np.asarray(graph.counts, dtype=np.int64)
    for _ in range(max_attempts):
        if pending.shape[0] == 0:
            break
        u = graph.type_base[want_src[pending]] + (rng.random(pending.shape[0]) * counts[want_src[pending]]).astype(np.int64)
        v = graph.type_base[want_dst[pending]] + (rng.random(pending.shape[0]) * counts[want_dst[pending]]).astype(np.int64)
        ok = (u != v) & ~graph.has_edges(u, v)
        still = []
        for j, slot in enumerate(pending):
            key = (min(u[j], v[j]), max(u[j], v[j])) if graph.undirected else (u[j], v[j])
            if ok[j] and key not in seen:
                seen.add(key)
                neg_src[slot], neg_dst[slot] = u[j], v[j]
            else:
                still.append(slot)
        pending = np.asarray(still, dtype=np.int64)
    if pending.shape[0]:
        raise SaturatedNoiseSpaceError(
            f"could not sample {pending.shape[0]} evaluation non-edge(s) in {max_attempts} attempts",
            vtype=int(want_src[pending[0]]), attempts=max_attempts,
        )

    train_graph = graph.without_edges(pos_src, pos_dst)
    logger.info(
        f"Split {src.shape[0]} edges: {src.shape[0] - n_test} train, {n_test} held out, "
        f"{neg_src.shape[0]} negatives"
    )
    return EvalSplit(
        positives=PairSet.from_globals(graph, pos_src, pos_dst),
        negatives=PairSet.from_globals(graph, neg_src, neg_dst),
        type_labels=[vt.label for vt in graph.vertex_types],
        seed=seed,
        ratio=ratio,
        train_graph=train_graph,
    )


def _values(table: TableLike) -> np.ndarray:
    return table.values if isinstance(table, EmbeddingTable) else np.asarray(table)


def _lookup(tables: Mapping[int, TableLike], types: np.ndarray, ids: np.ndarray, dim: int) -> np.ndarray:
    out = np.empty((ids.shape[0], dim), dtype=np.float64)
    for vtype in np.unique(types):
        mask = types == vtype
        if int(vtype) not in tables:
            raise MissingEmbeddingError(f"no embedding table for vertex type {vtype}", vtype=int(vtype))
        values = _values(tables[int(vtype)])
        wanted = ids[mask]
        if wanted.size and wanted.max() >= values.shape[0]:
            bad = int(wanted[wanted >= values.shape[0]][0])
            raise MissingEmbeddingError(f"no embedding row for vertex {bad} of type {vtype}",
                                        vtype=int(vtype), vertex_id=bad)
        out[mask] = values[wanted]
    return out


def predict_edges(
    tables: Mapping[int, TableLike],
    pairs: PairSet,
    metric: Metric = Metric.DOT,
    threshold: float = 0.5,
) -> np.ndarray:
    """True where sigmoid(score) >= threshold."""
    if len(pairs) == 0:
        return np.zeros(0, dtype=bool)
    dim = _values(next(iter(tables.values()))).shape[1]
    u = _lookup(tables, pairs.src_type, pairs.src_id, dim)
    v = _lookup(tables, pairs.dst_type, pairs.dst_id, dim)
    return sigmoid(batch_scores(u, v, metric)) >= threshold


def link_accuracy(
    tables: Mapping[int, TableLike],
    split: EvalSplit,
    metric: Metric = Metric.DOT,
    threshold: float = 0.5,
    step: int = 0,
) -> AccuracyReport:
    """Percent of held-out positives predicted as edges and of negatives predicted as non-edges.

    Args:
        tables: Embedding table (or raw matrix) per vertex type index
        split: Held-out positives and negatives
        metric: Pairwise scoring function
        threshold: Edge decision cut on sigmoid(score); ties count as edges
        step: Global step recorded on the report

    Returns:
        AccuracyReport whose total is the mean of the positive and negative accuracies
    """
    if len(split.positives) == 0 or len(split.negatives) == 0:
        raise InvalidParametersError("evaluation needs at least one positive and one negative pair",
                                     parameter="split", value=(len(split.positives), len(split.negatives)))
    pos = predict_edges(tables, split.positives, metric, threshold)
    neg = predict_edges(tables, split.negatives, metric, threshold)
    return AccuracyReport.from_accuracies(
        positive=100.0 * float(pos.mean()),
        negative=100.0 * float((~neg).mean()),
        threshold=threshold,
        step=step,
    )


def tables_by_type(split: EvalSplit, tables: Mapping[str, EmbeddingTable]) -> Dict[int, EmbeddingTable]:
    """Re-key label-keyed checkpoint tables by the split's type indices."""
    out = {}
    for index, label in enumerate(split.type_labels):
        if label in tables:
            out[index] = tables[label]
    return out


# ----------------------------------------------------------------- split IO


def _token(labels: Sequence[str], typed: bool, vtype: int, vid: int) -> str:
    return f"{labels[vtype]}:{vid}" if typed else str(vid)


def write_split(split: EvalSplit, path: Union[str, Path]) -> None:
    """Edge-list style lines `<src> <dst> POS|NEG` over dense ids."""
    typed = split.type_labels != [UNTYPED_LABEL]
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(f"# split seed={split.seed} ratio={split.ratio} types={','.join(split.type_labels)}\n")
        for pairs, flag in ((split.positives, "POS"), (split.negatives, "NEG")):
            for i in range(len(pairs)):
                a = _token(split.type_labels, typed, int(pairs.src_type[i]), int(pairs.src_id[i]))
                b = _token(split.type_labels, typed, int(pairs.dst_type[i]), int(pairs.dst_id[i]))
                handle.write(f"{a} {b} {flag}\n")


def read_split(path: Union[str, Path]) -> EvalSplit:
    path = str(path)
    labels, seed, ratio = [UNTYPED_LABEL], 0, 0.9
    columns: Dict[str, List[List[int]]] = {"POS": [], "NEG": []}
    with open(path, encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                meta = dict(f.split("=", 1) for f in line[1:].split() if "=" in f)
                labels = meta.get("types", ",".join(labels)).split(",")
                seed = int(meta.get("seed", seed))
                ratio = float(meta.get("ratio", ratio))
                continue
            fields = line.split()
            if len(fields) != 3 or fields[2] not in columns:
                raise CheckpointError(f"{path}:{line_number}: expected '<src> <dst> POS|NEG'", path=path)
            row = []
            for token in fields[:2]:
                label, _, vid = token.rpartition(":")
                if label and label not in labels:
                    raise CheckpointError(f"{path}:{line_number}: unknown vertex type '{label}'", path=path)
                row += [labels.index(label) if label else 0, int(vid)]
            columns[fields[2]].append(row)

    def pairs(rows: List[List[int]]) -> PairSet:
        data = np.asarray(rows, dtype=np.int64).reshape(-1, 4)
        return PairSet(data[:, 0], data[:, 1], data[:, 2], data[:, 3])

    return EvalSplit(pairs(columns["POS"]), pairs(columns["NEG"]), labels, seed=seed, ratio=ratio)
