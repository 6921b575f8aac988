"""Exception hierarchy shared by every module."""


class BlindSISNRError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(BlindSISNRError):
    """Malformed or unsupported file contents."""


class UnsupportedChannelsError(FormatError):
    pass


class DegenerateSignalError(BlindSISNRError):
    """Signal with zero variance / zero power where energy is required."""


class DegenerateStatisticsError(BlindSISNRError):
    pass


class ShapeError(BlindSISNRError, ValueError):
    pass


class RateError(BlindSISNRError, ValueError):
    """Sample rates that should agree do not."""


class ParameterError(BlindSISNRError, ValueError):
    pass


class StateError(BlindSISNRError, RuntimeError):
    pass


class ConfigError(BlindSISNRError, ValueError):
    pass


class CheckpointError(BlindSISNRError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class DataError(BlindSISNRError):
    """Missing or inconsistent input data (manifests, label files)."""
