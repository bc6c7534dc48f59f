"""Exception types shared across the package.

Each maps to a distinct CLI exit code (see cli.py), so keep the split:
configuration = bad knobs, input = bad data, state = missing/garbled
artifacts, evaluation = a metric that cannot be computed.
"""


class VitsentryError(Exception):
    """Base class for everything raised deliberately by this package."""


class DimensionError(VitsentryError):
    """Shape mismatch: patch size not dividing the image, wrong channel count, ..."""


class ConfigurationError(VitsentryError):
    """A config value is out of its documented range or unknown."""


class InputError(VitsentryError):
    """Input data is malformed: empty batches, labels out of range, missing files."""


class StateError(VitsentryError):
    """A required artifact (checkpoint, calibration, archive) is absent or corrupt."""


class EvaluationError(VitsentryError):
    """A metric is undefined for the given inputs (single-class AUC, no successful samples)."""
