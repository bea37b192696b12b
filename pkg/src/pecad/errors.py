"""Exception hierarchy.

Two broad families matter to callers: configuration problems (bad parameter
values, incompatible checkpoints) and data problems (missing or corrupt files,
inputs on which a statistic is undefined).  The command-line interface maps
``ConfigError`` to exit code 2 and ``DataError`` to exit code 3.
"""

from __future__ import annotations


class PecadError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PecadError):
    """A configuration value is invalid or internally inconsistent."""


class DataError(PecadError):
    """Input data is missing, malformed, or unusable."""


class IngestError(DataError):
    """An exam directory or one of its required files is missing."""


class CorruptVolumeError(DataError):
    """A stored volume's byte count disagrees with its declared shape."""


class LabelValidationError(DataError):
    """Exam labels violate a labelling rule; the message names the rule."""


class SplitError(ConfigError):
    """A requested train/test split is impossible for the dataset size."""


class DegenerateConfigError(ConfigError):
    """A generator configuration cannot produce a learnable signal."""


class NoLungFoundError(DataError):
    """Lung localization found no candidate lung component in any slice."""


class UndefinedAUCError(DataError):
    """ROC AUC is undefined because only one class is present."""


class ZeroVarianceError(DataError):
    """A correlation is undefined because an input has zero variance."""


class DegenerateTestError(DataError):
    """A significance test is undefined for the given summary statistics."""


class IncompatibleCheckpointError(ConfigError):
    """A checkpoint's architecture fingerprint does not match the model."""


class UnsupportedArchitectureError(ConfigError):
    """An operation is defined only for a different model family."""
