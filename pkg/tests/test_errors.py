"""Tests for the error hierarchy and exit codes."""

import pytest

from spatial_dr.errors import (
    ConfigurationError,
    ConvergenceError,
    DataError,
    EigensolverError,
    ExtremeWeightError,
    InsufficientDataError,
    ParameterError,
    ParseError,
    PipelineValidationError,
    SingularDenominatorError,
    SpatialDrError,
    exit_code_for,
)


class TestErrors:
    """Test error context and summaries."""

    def test_summary_with_details(self):
        """Test the one-line summary lists every detail."""
        error = DataError("duplicate unit id", ["u1", "u7"], operation="Dataset")
        assert error.summary() == "Error in Dataset: DataError: duplicate unit id [u1; u7]"

    def test_summary_without_operation(self):
        """Test the fallback operation name."""
        assert SpatialDrError("boom").summary() == "Error in unknown: SpatialDrError: boom"

    def test_context_kept(self):
        """Test that keyword context is stored."""
        error = ParseError("bad cell", operation="load_dataset", row=4, column="y")
        assert error.context == {"operation": "load_dataset", "row": 4, "column": "y"}
        assert error.errors == []

    def test_convergence_error_carries_gap(self):
        """Test that the duality gap is both an attribute and context."""
        error = ConvergenceError("no convergence", duality_gap=0.5, lambda_=0.1)
        assert error.duality_gap == 0.5
        assert error.context["lambda_"] == 0.1


class TestExitCodes:
    """Test the command-line exit code mapping."""

    @pytest.mark.parametrize(
        ("error", "code"),
        [
            (ConfigurationError("x"), 2),
            (ParameterError("x"), 2),
            (PipelineValidationError("x"), 2),
            (DataError("x"), 3),
            (InsufficientDataError("x"), 3),
            (ConvergenceError("x", duality_gap=1.0), 4),
            (SingularDenominatorError("x"), 4),
            (ExtremeWeightError("x"), 4),
            (EigensolverError("x"), 4),
            (SpatialDrError("x"), 1),
            (RuntimeError("x"), 1),
        ],
    )
    def test_mapping(self, error, code):
        """Test each failure family's exit code."""
        assert exit_code_for(error) == code
