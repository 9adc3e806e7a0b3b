"""Custom exception classes for the graph-embedding training system."""

import time
from typing import Optional, Dict, Any
from enum import Enum


class ErrorSeverity(str, Enum):
    """Severity levels for errors."""
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"
    CRITICAL = "critical"


class GrembedError(Exception):
    """Base exception for all training-system errors."""

    def __init__(
        self,
        message: str,
        severity: ErrorSeverity = ErrorSeverity.MEDIUM,
        error_code: Optional[str] = None,
        context: Optional[Dict[str, Any]] = None,
        original_error: Optional[Exception] = None
    ):
        """Initialize a training-system error.

        Args:
            message: Human-readable error message
            severity: Error severity level
            error_code: Optional error code for categorization
            context: Optional context information
            original_error: Original exception that caused this error
        """
        super().__init__(message)
        self.message = message
        self.severity = severity
        self.error_code = error_code
        self.context = context or {}
        self.original_error = original_error
        self.timestamp = time.time()

    def to_dict(self) -> Dict[str, Any]:
        """Convert error to dictionary for logging/serialization."""
        return {
            'error_type': self.__class__.__name__,
            'message': self.message,
            'severity': self.severity.value,
            'error_code': self.error_code,
            'context': self.context,
            'timestamp': self.timestamp,
            'original_error': str(self.original_error) if self.original_error else None
        }


def _with_context(kwargs: Dict[str, Any], **fields: Any) -> Dict[str, Any]:
    context = kwargs.get('context') or {}
    for key, value in fields.items():
        if value is not None:
            context[key] = value
    kwargs['context'] = context
    return kwargs


class GraphLoadError(GrembedError):
    """Edge list could not be parsed into a graph."""

    def __init__(
        self,
        message: str,
        path: Optional[str] = None,
        line_number: Optional[int] = None,
        **kwargs
    ):
        """Initialize graph load error.

        Args:
            message: Error message
            path: Edge-list file being read
            line_number: 1-based line that failed to parse
            **kwargs: Additional arguments for GrembedError
        """
        kwargs = _with_context(kwargs, path=path, line_number=line_number)
        kwargs.setdefault('error_code', 'PARSE_ERROR')
        super().__init__(message, **kwargs)


class VertexRangeError(GrembedError):
    """A vertex reference lies outside its type's id range."""

    def __init__(
        self,
        message: str,
        vtype: Optional[int] = None,
        vertex_id: Optional[int] = None,
        **kwargs
    ):
        kwargs = _with_context(kwargs, vtype=vtype, vertex_id=vertex_id)
        kwargs.setdefault('error_code', 'VERTEX_OUT_OF_RANGE')
        kwargs.setdefault('severity', ErrorSeverity.LOW)
        super().__init__(message, **kwargs)


class InvalidParametersError(GrembedError):
    """Parameters violate an operation's preconditions."""

    def __init__(
        self,
        message: str,
        parameter: Optional[str] = None,
        value: Optional[Any] = None,
        **kwargs
    ):
        kwargs = _with_context(
            kwargs, parameter=parameter, value=None if value is None else str(value)
        )
        kwargs.setdefault('error_code', 'INVALID_PARAMETERS')
        kwargs.setdefault('severity', ErrorSeverity.LOW)
        super().__init__(message, **kwargs)


class SaturatedNoiseSpaceError(GrembedError):
    """No non-edge could be drawn for a vertex within the attempt limit."""

    def __init__(
        self,
        message: str,
        vtype: Optional[int] = None,
        vertex_id: Optional[int] = None,
        attempts: Optional[int] = None,
        **kwargs
    ):
        """Initialize saturated noise space error.

        Args:
            message: Error message
            vtype: Vertex type of the input vertex
            vertex_id: Input vertex whose noise space is exhausted
            attempts: Rejection rounds spent before giving up
            **kwargs: Additional arguments for GrembedError
        """
        kwargs = _with_context(kwargs, vtype=vtype, vertex_id=vertex_id, attempts=attempts)
        kwargs.setdefault('error_code', 'SATURATED_NOISE_SPACE')
        super().__init__(message, **kwargs)


class DegenerateVectorError(GrembedError):
    """Cosine scoring was asked to normalize a zero vector."""

    def __init__(self, message: str, **kwargs):
        kwargs.setdefault('error_code', 'DEGENERATE_VECTOR')
        super().__init__(message, **kwargs)


class DimensionMismatchError(GrembedError):
    """Vectors or matrices disagree on the embedding dimension."""

    def __init__(
        self,
        message: str,
        expected: Optional[int] = None,
        actual: Optional[int] = None,
        **kwargs
    ):
        kwargs = _with_context(kwargs, expected=expected, actual=actual)
        kwargs.setdefault('error_code', 'DIMENSION_MISMATCH')
        super().__init__(message, **kwargs)


class PoisonedUpdateError(GrembedError):
    """Non-finite gradients or losses reached an update."""

    def __init__(
        self,
        message: str,
        rows: Optional[int] = None,
        batch_index: Optional[int] = None,
        **kwargs
    ):
        kwargs = _with_context(kwargs, rows=rows, batch_index=batch_index)
        kwargs.setdefault('error_code', 'POISONED_UPDATE')
        kwargs.setdefault('severity', ErrorSeverity.HIGH)
        super().__init__(message, **kwargs)


class InfeasiblePartitionError(GrembedError):
    """The embedding tables cannot be placed under the server capacity."""

    def __init__(
        self,
        message: str,
        strategy: Optional[str] = None,
        violating_bytes: Optional[int] = None,
        capacity_bytes: Optional[int] = None,
        **kwargs
    ):
        """Initialize infeasible partition error.

        Args:
            message: Error message
            strategy: row-wise or column-wise
            violating_bytes: Size of the smallest indivisible unit (one row or one column)
            capacity_bytes: Per-server memory cap
            **kwargs: Additional arguments for GrembedError
        """
        kwargs = _with_context(
            kwargs,
            strategy=strategy,
            violating_bytes=violating_bytes,
            capacity_bytes=capacity_bytes,
        )
        kwargs.setdefault('error_code', 'INFEASIBLE_PARTITION')
        super().__init__(message, **kwargs)


class ProtocolError(GrembedError):
    """A wire frame could not be decoded."""

    def __init__(self, message: str, opcode: Optional[int] = None, **kwargs):
        kwargs = _with_context(kwargs, opcode=opcode)
        kwargs.setdefault('error_code', 'PROTOCOL_ERROR')
        super().__init__(message, **kwargs)


class ServerRequestError(GrembedError):
    """A parameter server answered a request with an error status."""

    def __init__(
        self,
        message: str,
        status: Optional[int] = None,
        server: Optional[str] = None,
        **kwargs
    ):
        kwargs = _with_context(kwargs, status=status, server=server)
        kwargs.setdefault('error_code', 'SERVER_REQUEST_FAILED')
        super().__init__(message, **kwargs)


class ServerUnavailableError(GrembedError):
    """A parameter server stayed unreachable after all retries."""

    def __init__(
        self,
        message: str,
        address: Optional[str] = None,
        attempts: Optional[int] = None,
        **kwargs
    ):
        kwargs = _with_context(kwargs, address=address, attempts=attempts)
        kwargs.setdefault('error_code', 'SERVER_UNAVAILABLE')
        kwargs.setdefault('severity', ErrorSeverity.HIGH)
        super().__init__(message, **kwargs)


class BudgetExceededError(GrembedError):
    """A single row's embeddings do not fit the per-batch byte budget."""

    def __init__(
        self,
        message: str,
        required_bytes: Optional[int] = None,
        budget_bytes: Optional[int] = None,
        **kwargs
    ):
        kwargs = _with_context(kwargs, required_bytes=required_bytes, budget_bytes=budget_bytes)
        kwargs.setdefault('error_code', 'BUDGET_EXCEEDED')
        super().__init__(message, **kwargs)


class InternalConsistencyError(GrembedError):
    """An internal invariant was broken (e.g. unmapped vertex during relabel)."""

    def __init__(self, message: str, **kwargs):
        kwargs.setdefault('error_code', 'INTERNAL_CONSISTENCY')
        kwargs.setdefault('severity', ErrorSeverity.CRITICAL)
        super().__init__(message, **kwargs)


class MissingEmbeddingError(GrembedError):
    """Evaluation needs an embedding row that is not available."""

    def __init__(
        self,
        message: str,
        vtype: Optional[int] = None,
        vertex_id: Optional[int] = None,
        **kwargs
    ):
        kwargs = _with_context(kwargs, vtype=vtype, vertex_id=vertex_id)
        kwargs.setdefault('error_code', 'MISSING_EMBEDDING')
        super().__init__(message, **kwargs)


class CheckpointError(GrembedError):
    """A checkpoint or shard file is malformed."""

    def __init__(self, message: str, path: Optional[str] = None, **kwargs):
        kwargs = _with_context(kwargs, path=path)
        kwargs.setdefault('error_code', 'CHECKPOINT_ERROR')
        super().__init__(message, **kwargs)


class ConfigValidationError(GrembedError):
    """Configuration validation error."""

    def __init__(
        self,
        message: str,
        field_name: Optional[str] = None,
        invalid_value: Optional[Any] = None,
        **kwargs
    ):
        """Initialize config validation error.

        Args:
            message: Error message
            field_name: Name of field that failed validation
            invalid_value: The invalid value
            **kwargs: Additional arguments for GrembedError
        """
        kwargs = _with_context(
            kwargs,
            field_name=field_name,
            invalid_value=None if invalid_value is None else str(invalid_value),
        )
        kwargs.setdefault('error_code', 'CONFIG_INVALID')
        kwargs.setdefault('severity', ErrorSeverity.LOW)
        super().__init__(message, **kwargs)


class StageError(GrembedError):
    """A pipeline stage of the driver failed."""

    def __init__(self, message: str, stage: Optional[str] = None, **kwargs):
        kwargs = _with_context(kwargs, stage=stage)
        kwargs.setdefault('error_code', 'STAGE_FAILED')
        kwargs.setdefault('severity', ErrorSeverity.HIGH)
        super().__init__(message, **kwargs)
        self.stage = stage
