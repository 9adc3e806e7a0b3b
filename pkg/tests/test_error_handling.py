"""Tests for the error hierarchy and how failures surface at stage boundaries."""

import json

import pytest

from src.cluster.driver import stage
from src.utils.exceptions import (
    BudgetExceededError,
    CheckpointError,
    ConfigValidationError,
    ErrorSeverity,
    GraphLoadError,
    GrembedError,
    InfeasiblePartitionError,
    InvalidParametersError,
    PoisonedUpdateError,
    ServerUnavailableError,
    StageError,
    VertexRangeError,
)


class TestCustomExceptions:
    """Test custom exception classes."""

    def test_base_error_basic(self):
        """Test basic GrembedError functionality."""
        error = GrembedError("Test error")

        assert str(error) == "Test error"
        assert error.message == "Test error"
        assert error.severity == ErrorSeverity.MEDIUM
        assert error.error_code is None
        assert error.context == {}
        assert error.original_error is None
        assert isinstance(error.timestamp, float)

    def test_base_error_to_dict(self):
        """Test GrembedError serialization."""
        error = GrembedError(
            "Test error",
            severity=ErrorSeverity.CRITICAL,
            error_code="TEST_ERROR",
            context={"key": "value"},
            original_error=ValueError("Original error"),
        )

        error_dict = error.to_dict()

        assert error_dict['error_type'] == 'GrembedError'
        assert error_dict['severity'] == 'critical'
        assert error_dict['error_code'] == 'TEST_ERROR'
        assert error_dict['context'] == {'key': 'value'}
        assert error_dict['original_error'] == 'Original error'
        assert 'timestamp' in error_dict

    def test_graph_load_error(self):
        """Test GraphLoadError records the file and line."""
        error = GraphLoadError("bad token", path="g.txt", line_number=7)

        assert error.error_code == "PARSE_ERROR"
        assert error.context == {"path": "g.txt", "line_number": 7}

    def test_graph_load_error_code_override(self):
        """Test subclasses keep an explicit error code."""
        error = GraphLoadError("too many ids", error_code="ID_OVERFLOW")
        assert error.error_code == "ID_OVERFLOW"

    def test_infeasible_partition_error(self):
        """Test InfeasiblePartitionError carries the violating size and the cap."""
        error = InfeasiblePartitionError(
            "column too large", strategy="column-wise", violating_bytes=264, capacity_bytes=256,
        )

        assert error.context["strategy"] == "column-wise"
        assert error.context["violating_bytes"] == 264
        assert error.context["capacity_bytes"] == 256

    def test_poisoned_update_is_high_severity(self):
        """Test PoisonedUpdateError defaults to high severity."""
        error = PoisonedUpdateError("nan", rows=3, batch_index=2)

        assert error.severity == ErrorSeverity.HIGH
        assert error.context == {"rows": 3, "batch_index": 2}

    def test_server_unavailable_error(self):
        """Test ServerUnavailableError keeps the address and attempt count."""
        error = ServerUnavailableError("gone", address="127.0.0.1:9", attempts=6,
                                       original_error=ConnectionRefusedError("refused"))

        assert error.context["attempts"] == 6
        assert error.to_dict()["original_error"] == "refused"

    def test_invalid_parameters_stringifies_value(self):
        """Test parameter values are stored as text so reports stay JSON."""
        error = InvalidParametersError("bad", parameter="shape", value=(3, 0))

        assert error.context == {"parameter": "shape", "value": "(3, 0)"}
        assert json.loads(json.dumps(error.to_dict()))["context"]["value"] == "(3, 0)"

    def test_none_fields_are_omitted(self):
        """Test unset context fields do not appear in the context."""
        assert VertexRangeError("out of range").context == {}
        assert CheckpointError("bad", path=None).context == {}

    def test_config_validation_error(self):
        """Test ConfigValidationError names the field."""
        error = ConfigValidationError("Invalid dim", field_name="train.dim", invalid_value=0)

        assert error.severity == ErrorSeverity.LOW
        assert error.context == {"field_name": "train.dim", "invalid_value": "0"}

    def test_every_error_is_a_grembed_error(self):
        """Test callers can catch the whole family with one except clause."""
        for cls in (BudgetExceededError, CheckpointError, StageError, VertexRangeError):
            assert issubclass(cls, GrembedError)


class TestStageBoundaries:
    """Test that pipeline stages report failures uniformly."""

    def test_foreign_errors_become_stage_errors(self):
        """Test any exception inside a stage is wrapped with the stage name."""
        with pytest.raises(StageError) as exc_info:
            with stage("walks"):
                raise KeyError("missing")

        assert exc_info.value.stage == "walks"
        assert exc_info.value.context["stage"] == "walks"
        assert isinstance(exc_info.value.original_error, KeyError)

    def test_domain_errors_are_wrapped(self):
        """Test domain errors keep their original error inside the StageError."""
        with pytest.raises(StageError) as exc_info:
            with stage("plan"):
                raise InfeasiblePartitionError("too big", violating_bytes=10, capacity_bytes=5)

        assert exc_info.value.to_dict()["original_error"] == "too big"

    def test_stage_errors_pass_through(self):
        """Test a StageError raised inside a stage is not wrapped twice."""
        with pytest.raises(StageError) as exc_info:
            with stage("workers"):
                raise StageError("worker 1 failed", stage="workers")

        assert exc_info.value.message == "worker 1 failed"
        assert exc_info.value.original_error is None
