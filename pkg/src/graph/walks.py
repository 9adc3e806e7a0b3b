"""Random walks, skip-gram pair extraction, noise attachment and row sharding."""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Iterator, List, Optional, Sequence

import numpy as np

from ..models.data_models import DatasetDescription, VertexRef, WalkParams
from ..utils.exceptions import InvalidParametersError, SaturatedNoiseSpaceError
from .store import Graph, VertexLike

logger = logging.getLogger(__name__)


@dataclass
class TrainingRow:
    """(input, context, k noise vertices): the NCE training unit."""
    input: VertexRef
    context: VertexRef
    negatives: List[VertexRef] = field(default_factory=list)


@dataclass
class PairBlock:
    """(input, context) pairs from one chunk of start vertices, as global indices."""
    inputs: np.ndarray
    contexts: np.ndarray
    walks: int = 0
    truncated_walks: int = 0

    def __len__(self) -> int:
        return int(self.inputs.shape[0])


@dataclass
class RowBlock:
    """Column-oriented block of TrainingRows: (type, id) arrays per slot."""
    input_type: np.ndarray
    input_id: np.ndarray
    context_type: np.ndarray
    context_id: np.ndarray
    neg_type: np.ndarray
    neg_id: np.ndarray

    def __len__(self) -> int:
        return int(self.input_id.shape[0])

    @property
    def k(self) -> int:
        return int(self.neg_id.shape[1])

    @property
    def typed(self) -> bool:
        return bool(
            self.input_type.any() or self.context_type.any() or (self.neg_type.size and self.neg_type.any())
        )

    @classmethod
    def empty(cls, k: int = 0) -> "RowBlock":
        ids = np.empty(0, dtype=np.int64)
        types = np.empty(0, dtype=np.uint8)
        return cls(types, ids, types.copy(), ids.copy(),
                   np.empty((0, k), dtype=np.uint8), np.empty((0, k), dtype=np.int64))

    @classmethod
    def from_globals(cls, graph: Graph, inputs: np.ndarray, contexts: np.ndarray, negatives: np.ndarray) -> "RowBlock":
        it, ii = graph.split_globals(inputs)
        ct, ci = graph.split_globals(contexts)
        nt, ni = graph.split_globals(negatives.reshape(-1))
        n = inputs.shape[0]
        k = negatives.shape[1] if negatives.ndim == 2 else 0
        return cls(
            it.astype(np.uint8), ii, ct.astype(np.uint8), ci,
            nt.astype(np.uint8).reshape(n, k), ni.reshape(n, k),
        )

    @classmethod
    def concat(cls, blocks: Sequence["RowBlock"], k: Optional[int] = None) -> "RowBlock":
        blocks = [b for b in blocks if len(b)]
        if not blocks:
            return cls.empty(k or 0)
        return cls(*(np.concatenate([getattr(b, name) for b in blocks]) for name in _COLUMNS))

    def slice(self, start: int, stop: int) -> "RowBlock":
        return RowBlock(*(getattr(self, name)[start:stop] for name in _COLUMNS))

    def take(self, order: np.ndarray) -> "RowBlock":
        return RowBlock(*(getattr(self, name)[order] for name in _COLUMNS))

    def row(self, i: int) -> TrainingRow:
        return TrainingRow(
            input=VertexRef(int(self.input_type[i]), int(self.input_id[i])),
            context=VertexRef(int(self.context_type[i]), int(self.context_id[i])),
            negatives=[VertexRef(int(t), int(v)) for t, v in zip(self.neg_type[i], self.neg_id[i])],
        )

    def __iter__(self) -> Iterator[TrainingRow]:
        for i in range(len(self)):
            yield self.row(i)

    def equals(self, other: "RowBlock") -> bool:
        return all(np.array_equal(getattr(self, n), getattr(other, n)) for n in _COLUMNS)


_COLUMNS = ("input_type", "input_id", "context_type", "context_id", "neg_type", "neg_id")


@dataclass
class TrainingShard:
    """Contiguous row slice assigned to one worker."""
    rows: RowBlock
    shard_index: int
    worker_count: int


# ---------------------------------------------------------------- walking


def _walk_matrix(graph: Graph, starts: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    """One walk per start; -1 pads walks that hit a dead end."""
    walks = np.full((starts.shape[0], length), -1, dtype=np.int64)
    if starts.shape[0] == 0:
        return walks
    walks[:, 0] = starts
    degrees = graph.degrees()
    for step in range(1, length):
        cur = walks[:, step - 1]
        alive = np.flatnonzero(cur >= 0)
        alive = alive[degrees[cur[alive]] > 0]
        if alive.shape[0] == 0:
            break
        here = cur[alive]
        offset = rng.integers(0, degrees[here])
        walks[alive, step] = graph.indices[graph.indptr[here] + offset]
    return walks


def random_walk(graph: Graph, start: VertexLike, length: int, rng: np.random.Generator) -> List[VertexRef]:
    """Uniform random walk of at most `length` vertices, truncated at a dead end."""
    g = graph.to_global(start)
    walk = _walk_matrix(graph, np.array([g], dtype=np.int64), length, rng)[0]
    return [graph.to_ref(int(v)) for v in walk if v >= 0]


def expected_pair_count(w: int, l: int, c: int) -> int:
    """Pairs per start vertex: w * sum_{j=2..c} (l - j + 1)."""
    if c < 2 or c > l:
        raise InvalidParametersError(
            f"context window must satisfy 2 <= c <= l (c={c}, l={l})", parameter="context_window", value=c
        )
    if w < 1:
        raise InvalidParametersError("walks per vertex must be positive", parameter="walks_per_vertex", value=w)
    return w * sum(l - j + 1 for j in range(2, c + 1))


def window_pairs(walks: np.ndarray, c: int, symmetric: bool = False) -> tuple:
    """Every (walk[i], walk[i+d]) with 1 <= d < c, grouped walk by walk."""
    if walks.shape[0] == 0:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty
    n, length = walks.shape
    src_cols, dst_cols = [], []
    for d in range(1, min(c, length)):
        src_cols.append(walks[:, :-d])
        dst_cols.append(walks[:, d:])
    src = np.concatenate(src_cols, axis=1)
    dst = np.concatenate(dst_cols, axis=1)
    valid = (src >= 0) & (dst >= 0)
    src, dst = src[valid], dst[valid]
    if symmetric:
        both_src = np.empty(src.shape[0] * 2, dtype=np.int64)
        both_dst = np.empty_like(both_src)
        both_src[0::2], both_src[1::2] = src, dst
        both_dst[0::2], both_dst[1::2] = dst, src
        return both_src, both_dst
    return src, dst


def _chunk_rng(seed: int, chunk_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(chunk_index,)))


def _pairs_for_chunk(graph: Graph, params: WalkParams, chunk_index: int, start: int, stop: int) -> PairBlock:
    rng = _chunk_rng(params.seed, chunk_index)
    starts = np.tile(np.arange(start, stop, dtype=np.int64), params.walks_per_vertex)
    walks = _walk_matrix(graph, starts, params.walk_length, rng)
    src, dst = window_pairs(walks, params.context_window, params.symmetric_pairs)
    truncated = int(np.count_nonzero(walks[:, -1] < 0))
    return PairBlock(src, dst, walks=int(starts.shape[0]), truncated_walks=truncated)


def generate_pairs(graph: Graph, params: WalkParams, max_workers: int = 1) -> Iterator[PairBlock]:
    """Stream (input, context) pairs, w walks from every vertex of every type.

    Start vertices are cut into chunks with seeds derived from `params.seed`, so the
    stream is identical whether chunks run inline or in a process pool.
    """
    bounds = [
        (i, lo, min(lo + params.chunk_size, graph.n_vertices))
        for i, lo in enumerate(range(0, graph.n_vertices, params.chunk_size))
    ]
    if max_workers > 1 and len(bounds) > 1:
        with ProcessPoolExecutor(max_workers=max_workers) as pool:
            futures = [pool.submit(_pairs_for_chunk, graph, params, i, lo, hi) for i, lo, hi in bounds]
            for future in futures:
                yield future.result()
        return
    for i, lo, hi in bounds:
        yield _pairs_for_chunk(graph, params, i, lo, hi)


# ------------------------------------------------------------------ noise


def _noise_tables(graph: Graph, noise: str) -> List[Optional[np.ndarray]]:
    """Per-type sampling probabilities; None means uniform."""
    if noise == "uniform":
        return [None] * graph.n_types
    degrees = graph.degrees().astype(np.float64)
    tables = []
    for vtype in range(graph.n_types):
        lo, hi = graph.type_base[vtype], graph.type_base[vtype + 1]
        weights = degrees[lo:hi] ** 0.75
        total = weights.sum()
        tables.append(weights / total if total > 0 else None)
    return tables


def _draw(graph: Graph, types: np.ndarray, rng: np.random.Generator, tables: List[Optional[np.ndarray]]) -> np.ndarray:
    out = np.empty(types.shape[0], dtype=np.int64)
    for vtype in range(graph.n_types):
        mask = types == vtype
        n = int(np.count_nonzero(mask))
        if n == 0:
            continue
        count = graph.counts[vtype]
        if tables[vtype] is None:
            local = rng.integers(0, count, n)
        else:
            local = rng.choice(count, size=n, p=tables[vtype])
        out[mask] = graph.type_base[vtype] + local
    return out


def attach_negatives(
    graph: Graph,
    pairs: Iterable[PairBlock],
    k: int,
    max_attempts: int,
    rng: np.random.Generator,
    noise: str = "uniform",
) -> Iterator[RowBlock]:
    """Attach k non-edge noise vertices of the context's type to every pair.

    Candidates equal to the input or adjacent to it are redrawn, up to
    `max_attempts` rounds.
    """
    if k < 0:
        raise InvalidParametersError("k must be non-negative", parameter="k", value=k)
    tables = _noise_tables(graph, noise)
    for block in pairs:
        n = len(block)
        if k == 0 or n == 0:
            yield RowBlock.from_globals(graph, block.inputs, block.contexts, np.empty((n, k), dtype=np.int64))
            continue
        inputs = np.repeat(block.inputs, k)
        types = np.repeat(graph.types_of(block.contexts), k)
        cand = _draw(graph, types, rng, tables)
        bad = np.flatnonzero((cand == inputs) | graph.has_edges(inputs, cand))
        attempts = 1
        while bad.shape[0] and attempts < max_attempts:
            cand[bad] = _draw(graph, types[bad], rng, tables)
            still = (cand[bad] == inputs[bad]) | graph.has_edges(inputs[bad], cand[bad])
            bad = bad[still]
            attempts += 1
        if bad.shape[0]:
            ref = graph.to_ref(int(inputs[bad[0]]))
            raise SaturatedNoiseSpaceError(
                f"No non-edge noise vertex found for {ref} after {max_attempts} attempts",
                vtype=ref.vtype, vertex_id=ref.id, attempts=max_attempts,
            )
        yield RowBlock.from_globals(graph, block.inputs, block.contexts, cand.reshape(n, k))


# --------------------------------------------------------------- sharding


def shard_rows(rows: RowBlock, n_workers: int) -> List[TrainingShard]:
    """Row-wise contiguous split; shard sizes differ by at most one."""
    if n_workers < 1:
        raise InvalidParametersError("n_workers must be at least 1", parameter="n_workers", value=n_workers)
    n = len(rows)
    base, extra = divmod(n, n_workers)
    shards, cursor = [], 0
    for i in range(n_workers):
        size = base + (1 if i < extra else 0)
        shards.append(TrainingShard(rows.slice(cursor, cursor + size), shard_index=i, worker_count=n_workers))
        cursor += size
    return shards


def occurrence_counts(graph: Graph, rows: RowBlock) -> List[np.ndarray]:
    """How often each vertex appears anywhere in the rows, per type."""
    counts = [np.zeros(c, dtype=np.int64) for c in graph.counts]
    for types, ids in ((rows.input_type, rows.input_id), (rows.context_type, rows.context_id),
                       (rows.neg_type.reshape(-1), rows.neg_id.reshape(-1))):
        for vtype in range(graph.n_types):
            mask = types == vtype
            if mask.any():
                counts[vtype] += np.bincount(ids[mask], minlength=graph.counts[vtype])
    return counts


def describe_dataset(graph: Graph, params: WalkParams, k: int, rows: int = 0, truncated: int = 0) -> DatasetDescription:
    positives = expected_pair_count(params.walks_per_vertex, params.walk_length, params.context_window)
    if params.symmetric_pairs:
        positives *= 2
    return DatasetDescription(
        vertices_per_type={vt.label: graph.counts[vt.index] for vt in graph.vertex_types},
        edges=graph.n_edges,
        positives_per_vertex=positives,
        negatives_per_vertex=positives * k,
        training_rows=rows,
        truncated_walks=truncated,
    )
