"""Exception types shared across the package."""


class DataFormatError(ValueError):
    """A manifest or signal file is missing, malformed, or inconsistent."""


class ShapeMismatchError(ValueError):
    """Input channel count does not match what the model was trained with."""


class UndefinedMetricError(ValueError):
    """Metric is undefined for the given labels (single-class input)."""


class NotTransferableError(ValueError):
    """The architecture is montage-fixed and cannot change channel count."""
