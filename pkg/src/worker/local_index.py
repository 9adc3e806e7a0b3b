"""Per-subset bijection between global row ids and dense worker-local indices."""

from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from ..graph.walks import RowBlock
from ..utils.exceptions import InternalConsistencyError


@dataclass(eq=False)
class LocalIndexMap:
    """Per vertex type: `reverse[t][local] = global`, locals dense in first-occurrence order."""
    reverse: Dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self._sorted: Dict[int, np.ndarray] = {}
        self._rank: Dict[int, np.ndarray] = {}
        for vtype, ids in self.reverse.items():
            order = np.argsort(ids, kind="stable")
            self._sorted[vtype] = ids[order]
            self._rank[vtype] = order

    @classmethod
    def from_vertices(cls, types: np.ndarray, ids: np.ndarray) -> "LocalIndexMap":
        """Number vertices per type in the order they first appear."""
        types = np.asarray(types).reshape(-1)
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        reverse = {}
        for vtype in np.unique(types):
            of_type = ids[types == vtype]
            uniq, first = np.unique(of_type, return_index=True)
            reverse[int(vtype)] = uniq[np.argsort(first, kind="stable")]
        return cls(reverse)

    @property
    def types(self) -> List[int]:
        return sorted(self.reverse)

    def unique_count(self, vtype: int) -> int:
        return int(self.reverse[vtype].shape[0]) if vtype in self.reverse else 0

    def forward(self, vtype: int) -> Dict[int, int]:
        return {int(g): i for i, g in enumerate(self.reverse.get(vtype, ()))}

    def footprint(self, dim: int, bytes_per_value: int) -> int:
        """Bytes of the local tables this map implies."""
        return sum(ids.shape[0] for ids in self.reverse.values()) * dim * bytes_per_value

    def to_local(self, vtype: int, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size == 0:
            return ids.copy()
        keys = self._sorted.get(vtype)
        if keys is None or keys.shape[0] == 0:
            raise InternalConsistencyError(f"no local ids for vertex type {vtype}", context={"vtype": vtype})
        pos = np.minimum(np.searchsorted(keys, ids), keys.shape[0] - 1)
        missing = keys[pos] != ids
        if missing.any():
            bad = int(ids[missing][0])
            raise InternalConsistencyError(
                f"vertex {bad} of type {vtype} is not in the local index", context={"vtype": vtype, "vertex_id": bad}
            )
        return self._rank[vtype][pos]

    def to_global(self, vtype: int, local: np.ndarray) -> np.ndarray:
        local = np.asarray(local, dtype=np.int64)
        table = self.reverse.get(vtype, np.empty(0, dtype=np.int64))
        if local.size and (local.min() < 0 or local.max() >= table.shape[0]):
            raise InternalConsistencyError(
                f"local index out of range for vertex type {vtype}", context={"vtype": vtype}
            )
        return table[local]


def _slots(rows: RowBlock):
    """(types, ids) matrices of shape (n, 2 + k): input, context, negatives per row."""
    types = np.column_stack([rows.input_type, rows.context_type, rows.neg_type])
    ids = np.column_stack([rows.input_id, rows.context_id, rows.neg_id])
    return types, ids


def build_local_index(rows: RowBlock) -> LocalIndexMap:
    """Map every vertex of the subset, scanning rows in order (input, context, negatives)."""
    types, ids = _slots(rows)
    return LocalIndexMap.from_vertices(types.reshape(-1), ids.reshape(-1))


def _map_ids(rows: RowBlock, index: LocalIndexMap, to_local: bool) -> RowBlock:
    convert = index.to_local if to_local else index.to_global

    def mapped(types: np.ndarray, ids: np.ndarray) -> np.ndarray:
        out = np.empty_like(ids)
        for vtype in np.unique(types):
            mask = types == vtype
            out[mask] = convert(int(vtype), ids[mask])
        return out

    return RowBlock(
        rows.input_type, mapped(rows.input_type, rows.input_id),
        rows.context_type, mapped(rows.context_type, rows.context_id),
        rows.neg_type, mapped(rows.neg_type, rows.neg_id),
    )


def relabel(rows: RowBlock, index: LocalIndexMap) -> RowBlock:
    """Same rows with every id replaced by its local index."""
    return _map_ids(rows, index, True)


def unrelabel(rows: RowBlock, index: LocalIndexMap) -> RowBlock:
    return _map_ids(rows, index, False)
