"""Exception hierarchy shared across the simulator.

CLI exit-code mapping: every FedTrafficError except TrainingDiverged maps
to exit code 1; TrainingDiverged maps to exit code 2.
"""


class FedTrafficError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(FedTrafficError):
    """Malformed input file; message carries the file and line number."""


class ValidationError(FedTrafficError):
    """Structurally parseable input that violates a semantic invariant."""


class ConfigError(FedTrafficError):
    """Invalid configuration value or inconsistent option combination."""


class ShapeError(FedTrafficError):
    """Dimension mismatch between arrays, operators, or models."""


class LayoutError(FedTrafficError):
    """Parameter layout does not match the model it is applied to."""


class CheckpointError(FedTrafficError):
    """Corrupt, truncated, or architecture-mismatched checkpoint file."""


class TrainingDiverged(FedTrafficError):
    """Non-finite values appeared during training; the run is aborted."""
