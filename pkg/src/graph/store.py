"""Array-indexed (CSR) storage for large sparse typed graphs.

Every vertex gets a *global index*: the vertices of type 0 come first, then type
1, and so on, so `global = type_base[vtype] + id`. The neighbor array stores
global indices; because the type blocks are laid out in type order, a slice
sorted by global index is also sorted by (vtype, id).
"""

import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..models.data_models import VertexRef, VertexType
from ..utils.exceptions import GraphLoadError, VertexRangeError

logger = logging.getLogger(__name__)

MAX_RAW_ID = (1 << 64) - 1
MAX_VERTICES_PER_TYPE = 1 << 40
UNTYPED_LABEL = "V"

VertexLike = Union[VertexRef, Tuple[int, int], int]


class Graph:
    """Immutable CSR graph over one or more vertex types."""

    def __init__(
        self,
        vertex_types: Sequence[VertexType],
        counts: Sequence[int],
        indptr: np.ndarray,
        indices: np.ndarray,
        undirected: bool,
        raw_ids: Optional[List[np.ndarray]] = None,
    ):
        self.vertex_types = list(vertex_types)
        self.counts = [int(c) for c in counts]
        self.type_base = np.zeros(len(self.counts) + 1, dtype=np.int64)
        np.cumsum(self.counts, out=self.type_base[1:])
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.undirected = undirected
        self.raw_ids = raw_ids
        self.indptr.flags.writeable = False
        self.indices.flags.writeable = False
        if self.indptr.shape[0] != self.n_vertices + 1 or self.indptr[0] != 0:
            raise ValueError("indptr must have one entry per vertex plus one, starting at 0")

    # ------------------------------------------------------------------ shape

    @property
    def n_types(self) -> int:
        return len(self.counts)

    @property
    def n_vertices(self) -> int:
        return int(self.type_base[-1])

    @property
    def n_arcs(self) -> int:
        """Length of the neighbor array."""
        return int(self.indices.shape[0])

    @property
    def n_edges(self) -> int:
        if not self.undirected:
            return self.n_arcs
        src = np.repeat(np.arange(self.n_vertices, dtype=np.int64), np.diff(self.indptr))
        loops = int(np.count_nonzero(src == self.indices))
        return (self.n_arcs - loops) // 2 + loops

    def type_index(self, label: str) -> int:
        for vt in self.vertex_types:
            if vt.label == label:
                return vt.index
        raise VertexRangeError(f"Unknown vertex type label '{label}'")

    def offsets(self, vtype: int) -> np.ndarray:
        """Per-type offset array (length count+1, starting at 0)."""
        self._check_type(vtype)
        lo, hi = int(self.type_base[vtype]), int(self.type_base[vtype + 1])
        block = self.indptr[lo:hi + 1]
        return block - block[0]

    # ------------------------------------------------------------- identities

    def _check_type(self, vtype: int) -> None:
        if not 0 <= vtype < self.n_types:
            raise VertexRangeError(f"Vertex type {vtype} does not exist", vtype=vtype)

    def to_global(self, v: VertexLike) -> int:
        """Validate a vertex reference and return its global index."""
        vtype, vid = (0, v) if isinstance(v, (int, np.integer)) else (v[0], v[1])
        self._check_type(int(vtype))
        if not 0 <= vid < self.counts[vtype]:
            raise VertexRangeError(
                f"Vertex {vid} out of range for type {vtype} (count {self.counts[vtype]})",
                vtype=int(vtype),
                vertex_id=int(vid),
            )
        return int(self.type_base[vtype]) + int(vid)

    def to_ref(self, g: int) -> VertexRef:
        vtype = int(np.searchsorted(self.type_base, g, side="right") - 1)
        return VertexRef(vtype, int(g - self.type_base[vtype]))

    def types_of(self, globals_: np.ndarray) -> np.ndarray:
        return (np.searchsorted(self.type_base, globals_, side="right") - 1).astype(np.int64)

    def split_globals(self, globals_: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Global indices -> (vtype array, id array)."""
        types = self.types_of(globals_)
        return types, np.asarray(globals_, dtype=np.int64) - self.type_base[types]

    # ---------------------------------------------------------------- queries

    def neighbors(self, v: VertexLike) -> np.ndarray:
        """Sorted neighbor slice of `v` as global indices (a read-only view).

        For single-type graphs global indices equal vertex ids.
        """
        g = self.to_global(v)
        return self.indices[self.indptr[g]:self.indptr[g + 1]]

    def neighbor_refs(self, v: VertexLike) -> List[VertexRef]:
        return [self.to_ref(int(n)) for n in self.neighbors(v)]

    def has_edge(self, u: VertexLike, v: VertexLike) -> bool:
        gv = self.to_global(v)
        nbrs = self.neighbors(u)
        pos = int(np.searchsorted(nbrs, gv))
        return pos < nbrs.shape[0] and int(nbrs[pos]) == gv

    def has_edges(self, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
        """Vectorized has_edge over arrays of global indices."""
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        if src.size == 0 or self.n_arcs == 0:
            return np.zeros(src.shape, dtype=bool)
        last = self.n_arcs - 1
        lo = self.indptr[src]
        end = self.indptr[src + 1]
        hi = end.copy()
        # Lower-bound bisection inside every sorted neighbor slice at once.
        while True:
            active = lo < hi
            if not active.any():
                break
            mid = (lo + hi) // 2
            below = active & (self.indices[np.minimum(mid, last)] < dst)
            lo = np.where(below, mid + 1, lo)
            hi = np.where(active & ~below, mid, hi)
        return (lo < end) & (self.indices[np.minimum(lo, last)] == dst)

    def degree(self, v: VertexLike) -> int:
        g = self.to_global(v)
        return int(self.indptr[g + 1] - self.indptr[g])

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def edges(self) -> Tuple[np.ndarray, np.ndarray]:
        """Edge list as global index arrays; undirected edges once with src <= dst."""
        src = np.repeat(np.arange(self.n_vertices, dtype=np.int64), np.diff(self.indptr))
        dst = self.indices.copy()
        if self.undirected:
            keep = src <= dst
            src, dst = src[keep], dst[keep]
        return src, dst

    def without_edges(self, src: np.ndarray, dst: np.ndarray) -> "Graph":
        """A copy of this graph with the given edges (and their reverses, if undirected) removed."""
        all_src, all_dst = self.edges()
        dropped = Graph.from_edges(self.vertex_types, self.counts, src, dst, undirected=self.undirected)
        keep = ~dropped.has_edges(all_src, all_dst)
        return Graph.from_edges(
            self.vertex_types, self.counts, all_src[keep], all_dst[keep],
            undirected=self.undirected, raw_ids=self.raw_ids,
        )

    # ---------------------------------------------------------- construction

    @classmethod
    def from_edges(
        cls,
        vertex_types: Sequence[VertexType],
        counts: Sequence[int],
        src: np.ndarray,
        dst: np.ndarray,
        undirected: bool,
        raw_ids: Optional[List[np.ndarray]] = None,
    ) -> "Graph":
        """Build a CSR graph from global-index edge arrays, deduplicating and symmetrizing."""
        n = int(sum(counts))
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        if undirected:
            src, dst = np.concatenate([src, dst]), np.concatenate([dst, src])
        if src.size and (src.min() < 0 or dst.min() < 0 or max(src.max(), dst.max()) >= n):
            raise VertexRangeError("Edge endpoint outside the vertex range")
        order = np.lexsort((dst, src))
        src, dst = src[order], dst[order]
        if src.size:
            fresh = np.ones(src.shape[0], dtype=bool)
            fresh[1:] = (src[1:] != src[:-1]) | (dst[1:] != dst[:-1])
            src, dst = src[fresh], dst[fresh]
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(src, minlength=n), out=indptr[1:])
        return cls(vertex_types, counts, indptr, dst, undirected, raw_ids)

    @classmethod
    def untyped(cls, n_vertices: int, src: Iterable[int], dst: Iterable[int], undirected: bool = True) -> "Graph":
        """Single-type graph whose vertex ids are already dense."""
        return cls.from_edges(
            [VertexType(label=UNTYPED_LABEL, index=0)], [n_vertices],
            np.fromiter(src, dtype=np.int64), np.fromiter(dst, dtype=np.int64),
            undirected=undirected,
        )


def _parse_raw(token: str, path: str, line_number: int) -> int:
    try:
        raw = int(token)
    except ValueError as e:
        raise GraphLoadError(
            f"{path}:{line_number}: vertex id '{token}' is not an integer",
            path=path, line_number=line_number, original_error=e,
        )
    if raw < 0:
        raise GraphLoadError(f"{path}:{line_number}: negative vertex id {raw}", path=path, line_number=line_number)
    if raw > MAX_RAW_ID:
        raise GraphLoadError(
            f"{path}:{line_number}: vertex id {raw} overflows 64 bits",
            path=path, line_number=line_number, error_code="ID_OVERFLOW",
        )
    return raw


def load_edge_list(
    path: Union[str, Path],
    typed: bool = False,
    undirected: bool = True,
    type_labels: Optional[Sequence[str]] = None,
) -> Graph:
    """Load a whitespace-separated edge list into a CSR graph.

    Raw ids are mapped to dense ids per type in ascending raw order. With
    `type_labels` given, any other label in a typed file is rejected; otherwise
    labels are taken in first-appearance order.
    """
    path = str(path)
    declared = list(type_labels) if type_labels is not None else None
    labels: List[str] = list(declared) if declared else ([] if typed else [UNTYPED_LABEL])
    label_index: Dict[str, int] = {label: i for i, label in enumerate(labels)}
    raw_edges: List[Tuple[int, int, int, int]] = []

    with open(path, encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            tokens = stripped.split()
            if len(tokens) != 2:
                raise GraphLoadError(
                    f"{path}:{line_number}: expected 2 fields, found {len(tokens)}",
                    path=path, line_number=line_number,
                )
            endpoints = []
            for token in tokens:
                if typed:
                    label, sep, raw_token = token.partition(":")
                    if not sep or not label:
                        raise GraphLoadError(
                            f"{path}:{line_number}: expected <type>:<id>, found '{token}'",
                            path=path, line_number=line_number,
                        )
                    if label not in label_index:
                        if declared is not None:
                            raise GraphLoadError(
                                f"{path}:{line_number}: unknown vertex type '{label}'",
                                path=path, line_number=line_number, error_code="UNKNOWN_VERTEX_TYPE",
                            )
                        label_index[label] = len(labels)
                        labels.append(label)
                    endpoints.append((label_index[label], _parse_raw(raw_token, path, line_number)))
                else:
                    endpoints.append((0, _parse_raw(token, path, line_number)))
            raw_edges.append((endpoints[0][0], endpoints[0][1], endpoints[1][0], endpoints[1][1]))

    if len(labels) > 256:
        raise GraphLoadError(f"{path}: more than 256 vertex types", path=path)

    per_type_raw: List[set] = [set() for _ in labels]
    for st, sr, dt, dr in raw_edges:
        per_type_raw[st].add(sr)
        per_type_raw[dt].add(dr)
    raw_ids = [np.array(sorted(ids), dtype=np.uint64) for ids in per_type_raw]
    for label, ids in zip(labels, raw_ids):
        if ids.shape[0] > MAX_VERTICES_PER_TYPE:
            raise GraphLoadError(f"{path}: type '{label}' has too many vertices", path=path, error_code="ID_OVERFLOW")
    dense = [{int(r): i for i, r in enumerate(ids)} for ids in raw_ids]

    counts = [ids.shape[0] for ids in raw_ids]
    base = np.zeros(len(counts) + 1, dtype=np.int64)
    np.cumsum(counts, out=base[1:])
    src = np.fromiter((base[st] + dense[st][sr] for st, sr, _, _ in raw_edges), dtype=np.int64, count=len(raw_edges))
    dst = np.fromiter((base[dt] + dense[dt][dr] for _, _, dt, dr in raw_edges), dtype=np.int64, count=len(raw_edges))

    vertex_types = [VertexType(label=label, index=i) for i, label in enumerate(labels)]
    graph = Graph.from_edges(vertex_types, counts, src, dst, undirected=undirected, raw_ids=raw_ids)
    logger.info(
        f"Loaded {path}: {graph.n_vertices} vertices over {graph.n_types} type(s), "
        f"{graph.n_edges} edges ({len(raw_edges)} lines)"
    )
    return graph


def write_id_map(graph: Graph, path: Union[str, Path]) -> None:
    """Write the sidecar `<type> <raw_id> <dense_id>` mapping."""
    with open(path, "w", encoding="utf-8") as handle:
        for vt in graph.vertex_types:
            raw = graph.raw_ids[vt.index] if graph.raw_ids is not None else np.arange(graph.counts[vt.index])
            for dense_id, raw_id in enumerate(raw):
                handle.write(f"{vt.label} {int(raw_id)} {dense_id}\n")


def write_edge_list(graph: Graph, path: Union[str, Path], typed: Optional[bool] = None) -> None:
    """Write the graph's edges with dense ids in the loader's format."""
    typed = graph.n_types > 1 if typed is None else typed
    src, dst = graph.edges()
    labels = [vt.label for vt in graph.vertex_types]
    st, si = graph.split_globals(src)
    dt, di = graph.split_globals(dst)
    with open(path, "w", encoding="utf-8") as handle:
        for a, b, c, d in zip(st.tolist(), si.tolist(), dt.tolist(), di.tolist()):
            if typed:
                handle.write(f"{labels[a]}:{b} {labels[c]}:{d}\n")
            else:
                handle.write(f"{b} {d}\n")
