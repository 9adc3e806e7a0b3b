"""Embedding tables, pairwise scoring, sigmoid-NCE loss, analytic gradients and SGD.

Input and context vertices share one table per vertex type; there is no separate
output matrix.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from ..models.data_models import Metric
from ..utils.exceptions import (
    DegenerateVectorError,
    DimensionMismatchError,
    InvalidParametersError,
    PoisonedUpdateError,
)

logger = logging.getLogger(__name__)

SIGMOID_CLAMP = 30.0

MetricLike = Union[Metric, str]


@dataclass
class EmbeddingTable:
    """Dense rows x D matrix for one vertex type; row id == vertex id."""
    values: np.ndarray
    label: str = "V"

    @property
    def rows(self) -> int:
        return int(self.values.shape[0])

    @property
    def dim(self) -> int:
        return int(self.values.shape[1])

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    @property
    def nbytes(self) -> int:
        return int(self.values.nbytes)

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.values.copy(), self.label)


@dataclass
class GradientSet:
    """Gradients for the rows touched by an update, keyed by (local) row index."""
    rows: np.ndarray
    grads: np.ndarray

    def __post_init__(self):
        if self.grads.ndim != 2 or self.grads.shape[0] != self.rows.shape[0]:
            raise DimensionMismatchError(
                "gradient matrix must have one row per key",
                expected=int(self.rows.shape[0]), actual=int(self.grads.shape[0]),
            )

    @classmethod
    def accumulate(cls, rows: np.ndarray, grads: np.ndarray) -> "GradientSet":
        """Sum gradients that share a row key."""
        keys, inverse = np.unique(rows, return_inverse=True)
        summed = np.zeros((keys.shape[0], grads.shape[1]), dtype=grads.dtype)
        np.add.at(summed, inverse.reshape(-1), grads)
        return cls(keys, summed)


@dataclass
class NceGradients:
    """Analytic gradients of one row's loss w.r.t. x, y and each negative."""
    x: np.ndarray
    y: np.ndarray
    negatives: np.ndarray

    def to_gradient_set(self, x_row: int, y_row: int, neg_rows: Sequence[int]) -> GradientSet:
        rows = np.array([x_row, y_row, *neg_rows], dtype=np.int64)
        grads = np.vstack([self.x[None, :], self.y[None, :], self.negatives.reshape(-1, self.x.shape[0])])
        return GradientSet.accumulate(rows, grads)


def _metric(metric: MetricLike) -> Metric:
    return metric if isinstance(metric, Metric) else Metric(metric)


def init_embeddings(count: int, dim: int, seed: int, dtype: str = "float64", label: str = "V") -> EmbeddingTable:
    """Values i.i.d. uniform on [-0.5/D, 0.5/D]."""
    if count < 0 or dim < 1:
        raise InvalidParametersError(f"bad table shape ({count}, {dim})", parameter="shape", value=(count, dim))
    rng = np.random.default_rng(seed)
    bound = 0.5 / dim
    values = rng.uniform(-bound, bound, size=(count, dim)).astype(dtype)
    return EmbeddingTable(values, label)


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.clip(z, -SIGMOID_CLAMP, SIGMOID_CLAMP)
    return 1.0 / (1.0 + np.exp(-z))


def _log_sigmoid(z: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -np.clip(z, -SIGMOID_CLAMP, SIGMOID_CLAMP))


def _check_dims(x: np.ndarray, *others: np.ndarray) -> None:
    d = x.shape[-1]
    for other in others:
        if other.size and other.shape[-1] != d:
            raise DimensionMismatchError(
                f"embedding dimension mismatch: {d} vs {other.shape[-1]}", expected=int(d), actual=int(other.shape[-1])
            )


def score(u: np.ndarray, v: np.ndarray, metric: MetricLike = Metric.DOT) -> float:
    """Dot product or cosine similarity of two vectors."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    _check_dims(u, v)
    dot = float(np.dot(u, v))
    if _metric(metric) == Metric.DOT:
        return dot
    nu, nv = float(np.linalg.norm(u)), float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise DegenerateVectorError("cosine score of a zero vector is undefined")
    return float(np.clip(dot / (nu * nv), -1.0, 1.0))


def batch_scores(u: np.ndarray, v: np.ndarray, metric: MetricLike = Metric.DOT) -> np.ndarray:
    """Row-wise scores of matching rows of u and v (any leading shape)."""
    dot = np.einsum("...d,...d->...", u, v)
    if _metric(metric) == Metric.DOT:
        return dot
    norms = np.linalg.norm(u, axis=-1) * np.linalg.norm(v, axis=-1)
    if np.any(norms == 0):
        raise DegenerateVectorError("cosine score of a zero vector is undefined")
    return dot / norms


def nce_loss(x: np.ndarray, y: np.ndarray, negs: np.ndarray, metric: MetricLike = Metric.DOT) -> float:
    """-log sigma(s(x,y)) - sum_n log sigma(-s(x,n))."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    negs = np.asarray(negs, dtype=np.float64).reshape(-1, x.shape[0]) if np.size(negs) else np.empty((0, x.shape[0]))
    _check_dims(x, y, negs)
    pos = score(x, y, metric)
    loss = -float(_log_sigmoid(np.float64(pos)))
    for n in negs:
        loss -= float(_log_sigmoid(np.float64(-score(x, n, metric))))
    return loss


def _score_grads(u: np.ndarray, v: np.ndarray, s: np.ndarray, metric: Metric) -> Tuple[np.ndarray, np.ndarray]:
    """d score / du and d score / dv, row-wise."""
    if metric == Metric.DOT:
        return v, u
    nu = np.linalg.norm(u, axis=-1, keepdims=True)
    nv = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(nu == 0) or np.any(nv == 0):
        raise DegenerateVectorError("cosine gradient of a zero vector is undefined")
    s = s[..., None]
    du = v / (nu * nv) - s * u / (nu * nu)
    dv = u / (nu * nv) - s * v / (nv * nv)
    return du, dv


def nce_gradients(x: np.ndarray, y: np.ndarray, negs: np.ndarray, metric: MetricLike = Metric.DOT) -> NceGradients:
    """Analytic gradients of nce_loss w.r.t. x, y and every negative."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    negs = np.asarray(negs, dtype=np.float64).reshape(-1, x.shape[0]) if np.size(negs) else np.empty((0, x.shape[0]))
    _check_dims(x, y, negs)
    gx, gy, gn = batch_gradients(x[None, :], y[None, :], negs[None, :, :], _metric(metric))[1:]
    return NceGradients(gx[0], gy[0], gn[0])


def batch_gradients(
    x: np.ndarray,
    y: np.ndarray,
    negs: np.ndarray,
    metric: MetricLike = Metric.DOT,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-row losses and gradients for a minibatch.

    Shapes: x, y (B, D); negs (B, k, D). Returns (loss (B,), gx, gy, gneg).
    """
    metric = _metric(metric)
    s_pos = batch_scores(x, y, metric)
    s_neg = batch_scores(x[:, None, :], negs, metric) if negs.shape[1] else np.zeros((x.shape[0], 0))
    loss = -_log_sigmoid(s_pos) - _log_sigmoid(-s_neg).sum(axis=1)

    # dL/ds for the positive pair is -(1 - sigma(s)); for each negative it is sigma(s).
    c_pos = -(1.0 - sigmoid(s_pos))
    c_neg = sigmoid(s_neg)

    dx_pos, dy = _score_grads(x, y, s_pos, metric)
    gx = c_pos[:, None] * dx_pos
    gy = c_pos[:, None] * dy
    if negs.shape[1]:
        dx_neg, dn = _score_grads(np.broadcast_to(x[:, None, :], negs.shape), negs, s_neg, metric)
        gx = gx + (c_neg[..., None] * dx_neg).sum(axis=1)
        gneg = c_neg[..., None] * dn
    else:
        gneg = np.zeros_like(negs)
    return loss, gx, gy, gneg


def sgd_step(
    table: EmbeddingTable,
    grads: GradientSet,
    lr: float,
    strict: bool = False,
    batch_index: Optional[int] = None,
) -> int:
    """row <- row - lr * grad for every keyed row, in place.

    Rows whose gradient is not finite are skipped; the number skipped is returned
    (or raised as PoisonedUpdateError once the others are applied, if `strict`).
    """
    if grads.rows.shape[0] == 0:
        return 0
    if grads.grads.shape[1] != table.dim:
        raise DimensionMismatchError("gradient dimension differs from table", expected=table.dim,
                                     actual=int(grads.grads.shape[1]))
    finite = np.isfinite(grads.grads).all(axis=1)
    poisoned = int(np.count_nonzero(~finite))
    rows = grads.rows[finite]
    table.values[rows] -= (lr * grads.grads[finite]).astype(table.dtype, copy=False)
    if poisoned:
        logger.warning(f"Skipped {poisoned} row update(s) with non-finite gradients")
        if strict:
            raise PoisonedUpdateError(
                f"{poisoned} non-finite gradient row(s) skipped", rows=poisoned, batch_index=batch_index
            )
    return poisoned
