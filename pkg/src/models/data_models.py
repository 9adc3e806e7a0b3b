"""Core data models for the graph-embedding training system."""

from enum import Enum
from pathlib import Path
from typing import Dict, List, Literal, NamedTuple, Optional

from pydantic import BaseModel, Field, field_validator, model_validator

GIB = 1 << 30


class VertexType(BaseModel):
    """A vertex type (entity) of a possibly heterogeneous graph."""
    label: str = Field(min_length=1, max_length=32, description="Short type label, unique per graph")
    index: int = Field(ge=0, le=255, description="Dense type index starting at 0")


class VertexRef(NamedTuple):
    """Typed vertex identity; `id` is the row id in the type's embedding table."""
    vtype: int
    id: int


class Metric(str, Enum):
    """Pairwise scoring function between two embeddings."""
    DOT = "dot"
    COSINE = "cosine"


class PartitionStrategy(str, Enum):
    """How embedding tables are cut across parameter servers."""
    ROW_WISE = "row-wise"
    COLUMN_WISE = "column-wise"


class WalkParams(BaseModel):
    """Random-walk and pair-generation parameters."""
    walks_per_vertex: int = Field(default=10, ge=1, description="Walks started from every vertex (w)")
    walk_length: int = Field(default=2, ge=2, description="Maximum walk length in vertices (l)")
    context_window: int = Field(default=2, ge=2, description="Context window (c); 2 means direct edges only")
    seed: int = Field(default=0, ge=0, lt=1 << 64, description="Seed for walks and noise")
    symmetric_pairs: bool = Field(default=False, description="Also emit the reversed pair for each window position")
    noise: Literal["uniform", "unigram"] = Field(default="uniform", description="Noise distribution within a vertex type")
    max_attempts: int = Field(default=100, ge=1, description="Rejection rounds before the noise space counts as saturated")
    chunk_size: int = Field(default=4096, ge=1, description="Start vertices per derived-seed chunk")

    @model_validator(mode="after")
    def _window_fits_walk(self) -> "WalkParams":
        if self.context_window > self.walk_length:
            raise ValueError(
                f"context_window ({self.context_window}) exceeds walk_length ({self.walk_length})"
            )
        return self


class TrainConfig(BaseModel):
    """Skip-gram/NCE training parameters shared by workers and the in-process oracle."""
    dim: int = Field(default=16, ge=1, description="Embedding dimension D")
    learning_rate: float = Field(default=0.05, gt=0, description="Constant SGD step size")
    batch_size: int = Field(default=256, ge=1, description="Rows per minibatch")
    n_steps: int = Field(default=10, ge=1, description="Minibatches per subset")
    metric: Metric = Field(default=Metric.DOT, description="Pairwise scoring function")
    k: int = Field(default=5, ge=0, description="Negatives per training row")
    epochs: int = Field(default=1, ge=1, description="Passes over each worker's shard")
    shuffle: bool = Field(default=False, description="Shuffle each shard once per epoch")
    prefetch: bool = Field(default=True, description="Fetch the next subset while training the current one")
    dtype: Literal["float32", "float64"] = Field(default="float64", description="Embedding value type")

    @property
    def data_size(self) -> int:
        """Rows per subset: nSteps * batchSize."""
        return self.n_steps * self.batch_size

    @property
    def bytes_per_value(self) -> int:
        return 4 if self.dtype == "float32" else 8


class RouteRange(BaseModel):
    """A contiguous row range of one vertex type served by one server."""
    vtype: int = Field(ge=0)
    start: int = Field(ge=0)
    stop: int = Field(ge=0)
    server_id: int = Field(ge=0)


class RouteTable(BaseModel):
    """Maps (vertex type, vertex id) to the server holding that row."""
    type_labels: List[str] = Field(description="Vertex type labels by index")
    type_counts: List[int] = Field(description="Vertex count per type")
    dim: int = Field(ge=1)
    ranges: List[RouteRange] = Field(default_factory=list)
    servers: Dict[int, str] = Field(default_factory=dict, description="server id -> host:port")

    @model_validator(mode="after")
    def _ranges_partition_types(self) -> "RouteTable":
        for vtype, count in enumerate(self.type_counts):
            spans = sorted((r.start, r.stop) for r in self.ranges if r.vtype == vtype)
            cursor = 0
            for start, stop in spans:
                if start != cursor or stop <= start:
                    raise ValueError(f"ranges of type {vtype} do not partition [0, {count})")
                cursor = stop
            if cursor != count:
                raise ValueError(f"ranges of type {vtype} do not partition [0, {count})")
        return self

    def ranges_for(self, vtype: int) -> List[RouteRange]:
        return sorted((r for r in self.ranges if r.vtype == vtype), key=lambda r: r.start)


class PartitionAssignment(BaseModel):
    """One slice of one vertex type placed on one server."""
    server_id: int = Field(ge=0)
    vtype: int = Field(ge=0)
    row_start: int = Field(ge=0)
    row_stop: int = Field(ge=0)
    col_start: int = Field(default=0, ge=0)
    col_stop: int = Field(ge=0)
    bytes: int = Field(ge=0)


class PartitionPlan(BaseModel):
    """Placement of embedding tables onto parameter servers with memory accounting."""
    strategy: PartitionStrategy
    assignments: List[PartitionAssignment] = Field(default_factory=list)
    server_bytes: List[int] = Field(default_factory=list, description="Assigned bytes per server id")
    server_types: List[int] = Field(default_factory=list, description="Vertex type held by each server")
    server_capacity: int = Field(gt=0)
    column_bytes: Dict[int, int] = Field(default_factory=dict, description="Bytes of one column, per type")

    @property
    def n_servers(self) -> int:
        return len(self.server_bytes)

    def to_route_table(self, type_labels: List[str], type_counts: List[int], dim: int) -> RouteTable:
        """Row-wise plans become routes; servers get addresses later."""
        if self.strategy != PartitionStrategy.ROW_WISE:
            raise ValueError("only row-wise plans are served")
        ranges = [
            RouteRange(vtype=a.vtype, start=a.row_start, stop=a.row_stop, server_id=a.server_id)
            for a in self.assignments
        ]
        return RouteTable(type_labels=type_labels, type_counts=type_counts, dim=dim, ranges=ranges)


class WorkerConfig(BaseModel):
    """Everything one worker process needs."""
    shard_path: Path
    routes_path: Path
    train: TrainConfig
    budget_bytes: int = Field(default=2 * GIB, gt=0, description="Per-subset local embedding byte budget")
    worker_id: int = Field(default=0, ge=0)
    seed: int = Field(default=0, ge=0)
    max_retries: int = Field(default=5, ge=0, description="Reconnect attempts before aborting")


class SubsetProgress(BaseModel):
    """One JSON line of worker progress."""
    worker_id: int
    epoch: int
    subset: int
    mean_loss: float
    fetched: int
    flushed: int
    batches: int
    wall_ms: float


class WorkerReport(BaseModel):
    """Summary of one worker run."""
    worker_id: int = 0
    rows_seen: int = 0
    subsets: int = 0
    fetch_count: int = 0
    flush_count: int = 0
    carried_rows: int = Field(default=0, description="Flushed rows copied into the prefetched next subset")
    batches: int = 0
    subset_losses: List[float] = Field(default_factory=list)
    peak_local_bytes: int = 0
    budget_splits: int = 0
    poisoned_subsets: List[int] = Field(default_factory=list, description="Subsets abandoned on a non-finite loss")
    aborted: bool = False
    error: Optional[str] = None
    wall_ms: float = 0.0


class AccuracyReport(BaseModel):
    """Link-prediction accuracy at one point of training (percentages)."""
    positive_accuracy: float = Field(ge=0, le=100)
    negative_accuracy: float = Field(ge=0, le=100)
    total_accuracy: float = Field(ge=0, le=100)
    threshold: float = Field(default=0.5, gt=0, lt=1)
    step: int = Field(default=0, ge=0)

    @classmethod
    def from_accuracies(cls, positive: float, negative: float, threshold: float, step: int = 0) -> "AccuracyReport":
        return cls(
            positive_accuracy=positive,
            negative_accuracy=negative,
            total_accuracy=(positive + negative) / 2,
            threshold=threshold,
            step=step,
        )

    @model_validator(mode="after")
    def _total_is_mean(self) -> "AccuracyReport":
        if self.total_accuracy != (self.positive_accuracy + self.negative_accuracy) / 2:
            raise ValueError("total_accuracy must be the mean of positive and negative accuracy")
        return self


class DatasetDescription(BaseModel):
    """Shape of the training data: vertices, edges and samples per vertex."""
    vertices_per_type: Dict[str, int]
    edges: int
    positives_per_vertex: int
    negatives_per_vertex: int
    training_rows: int = 0
    truncated_walks: int = 0


class RunConfig(BaseModel):
    """Full pipeline configuration."""
    graph_path: Path = Field(description="Edge list to train on")
    typed: bool = Field(default=False, description="Edge list uses type:raw_id tokens")
    type_labels: Optional[List[str]] = Field(
        default=None, description="Allowed vertex type labels of a typed edge list, in index order"
    )
    undirected: bool = Field(default=True)
    walk: WalkParams = Field(default_factory=WalkParams)
    train: TrainConfig = Field(default_factory=TrainConfig)
    worker_count: int = Field(default=1, ge=1)
    server_capacity: int = Field(default=GIB, gt=0, description="Bytes per parameter server")
    min_servers_per_type: int = Field(default=1, ge=1, description="Servers per vertex type before capacity forces more")
    budget_bytes: int = Field(default=2 * GIB, gt=0)
    eval_cadence: int = Field(default=10, ge=1, description="Global steps between evaluations")
    split_ratio: float = Field(default=0.9, gt=0, lt=1, description="Fraction of edges kept for training")
    eval_negatives_ratio: int = Field(default=1, ge=1, description="Held-out negatives per positive")
    threshold: float = Field(default=0.5, gt=0, lt=1, description="sigma(score) at or above which a pair is an edge")
    accuracy_target: float = Field(default=70.0, gt=0, le=100, description="Total accuracy for steps-to-threshold")
    output_dir: Path = Field(default=Path("runs/latest"))
    seed: int = Field(default=0, ge=0)
    startup_timeout: float = Field(default=30.0, gt=0, description="Seconds to wait for servers to listen")

    @field_validator("type_labels", mode="before")
    @classmethod
    def _split_labels(cls, value):
        if isinstance(value, str):
            return [label.strip() for label in value.split(",") if label.strip()] or None
        return value

    @model_validator(mode="after")
    def _walk_seed_follows_run_seed(self) -> "RunConfig":
        if self.walk.seed != self.seed:
            self.walk = self.walk.model_copy(update={"seed": self.seed})
        if self.type_labels is not None and not self.typed:
            raise ValueError("type_labels only apply to typed edge lists")
        return self


class RunReport(BaseModel):
    """Result of one full pipeline run."""
    worker_count: int
    config: Dict[str, object]
    dataset: Optional[DatasetDescription] = None
    worker_reports: List[WorkerReport] = Field(default_factory=list)
    final: Optional[AccuracyReport] = None
    steps_to_threshold: Optional[int] = None
    global_steps: int = 0
    wall_ms: float = 0.0
    convergence_csv: Optional[str] = None
    checkpoint_dir: Optional[str] = None
    server_stats: Dict[str, int] = Field(default_factory=dict, description="Request counters summed over servers")
    global_step_note: str = "global step = one completed minibatch, summed over all workers"


class SweepRow(BaseModel):
    """One line of the worker-count comparison table."""
    workers: int
    positive_accuracy: Optional[float] = None
    negative_accuracy: Optional[float] = None
    total_accuracy: Optional[float] = None
    steps_to_threshold: Optional[int] = None
    status: Literal["ok", "failed"] = "ok"
    error: Optional[str] = None
