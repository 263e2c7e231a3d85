"""Exception hierarchy. Every error carries a short machine-readable ``code``."""


class RawVidError(ValueError):
    code = "error"


class DimensionError(RawVidError):
    code = "dimension"


class PatternError(RawVidError):
    code = "pattern"


class StateError(RawVidError):
    code = "state"


class ParameterError(RawVidError):
    code = "parameter"


class GapError(RawVidError):
    code = "gap"


class ConsistencyError(RawVidError):
    code = "consistency"


class MetadataError(RawVidError):
    code = "metadata"


class InsufficientDataError(RawVidError):
    code = "insufficient_data"


class CalibrationQualityError(RawVidError):
    code = "calibration_quality"


class ConfigurationError(RawVidError):
    code = "configuration"


class PyramidError(RawVidError):
    code = "pyramid"


class DependencyError(RawVidError):
    code = "dependency"
