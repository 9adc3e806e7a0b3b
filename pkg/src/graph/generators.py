"""Synthetic graphs used as desk-scale benchmarks and test fixtures."""

import logging
from typing import Sequence, Tuple

import numpy as np

from ..models.data_models import VertexType
from ..utils.exceptions import InvalidParametersError
from .store import Graph

logger = logging.getLogger(__name__)


def stochastic_block_model(
    block_sizes: Sequence[int],
    p_in: float,
    p_out: float,
    seed: int = 0,
) -> Tuple[Graph, np.ndarray]:
    """Undirected SBM without self-loops; returns the graph and each vertex's block."""
    if not (0 <= p_out <= 1 and 0 <= p_in <= 1):
        raise InvalidParametersError(
            "edge probabilities must lie in [0, 1]", parameter="p_in/p_out", value=(p_in, p_out)
        )
    rng = np.random.default_rng(seed)
    blocks = np.repeat(np.arange(len(block_sizes)), block_sizes)
    n = blocks.shape[0]
    src_parts, dst_parts = [], []
    for u in range(n - 1):
        others = np.arange(u + 1, n)
        probs = np.where(blocks[others] == blocks[u], p_in, p_out)
        hit = others[rng.random(others.shape[0]) < probs]
        src_parts.append(np.full(hit.shape[0], u, dtype=np.int64))
        dst_parts.append(hit)
    src = np.concatenate(src_parts) if src_parts else np.empty(0, dtype=np.int64)
    dst = np.concatenate(dst_parts) if dst_parts else np.empty(0, dtype=np.int64)
    graph = Graph.untyped(n, src, dst, undirected=True)
    logger.info(f"SBM with blocks {list(block_sizes)}: {graph.n_edges} edges")
    return graph, blocks


def erdos_renyi(n: int, p: float, seed: int = 0, undirected: bool = True) -> Graph:
    if undirected:
        return stochastic_block_model([n], p, p, seed)[0]
    rng = np.random.default_rng(seed)
    mask = rng.random((n, n)) < p
    np.fill_diagonal(mask, False)
    src, dst = np.nonzero(mask)
    return Graph.untyped(n, src, dst, undirected=False)


def complete_graph(n: int) -> Graph:
    src, dst = np.triu_indices(n, k=1)
    return Graph.untyped(n, src, dst, undirected=True)


def star_graph(leaves: int) -> Graph:
    """Vertex 0 is the center."""
    return Graph.untyped(leaves + 1, [0] * leaves, range(1, leaves + 1), undirected=True)


def path_graph(n: int) -> Graph:
    return Graph.untyped(n, range(n - 1), range(1, n), undirected=True)


def cycle_graph(n: int, extra_vertices: int = 0) -> Graph:
    """n-cycle, optionally followed by isolated vertices."""
    return Graph.untyped(n + extra_vertices, range(n), [(i + 1) % n for i in range(n)], undirected=True)


def bipartite_graph(
    n_left: int,
    n_right: int,
    p: float,
    seed: int = 0,
    labels: Tuple[str, str] = ("A", "B"),
    attach_all: bool = True,
) -> Graph:
    """Two-type graph with edges only between the types."""
    rng = np.random.default_rng(seed)
    mask = rng.random((n_left, n_right)) < p
    if attach_all:
        # Keep every vertex attached so walks never start at a dead end.
        mask[np.arange(n_left), rng.integers(0, n_right, n_left)] = True
        mask[rng.integers(0, n_left, n_right), np.arange(n_right)] = True
    left, right = np.nonzero(mask)
    types = [VertexType(label=labels[0], index=0), VertexType(label=labels[1], index=1)]
    return Graph.from_edges(types, [n_left, n_right], left, right + n_left, undirected=True)
