"""Exception hierarchy shared by every tabprobe module."""


class TabprobeError(Exception):
    """Base class for domain errors (mapped to CLI exit code 1)."""


class ConfigurationError(TabprobeError, ValueError):
    pass


class CapacityError(TabprobeError):
    pass


class DivergenceError(TabprobeError, FloatingPointError):
    pass


class BackendUnavailableError(TabprobeError):
    pass


class SelectionError(TabprobeError, IndexError):
    pass


class CapabilityError(TabprobeError):
    pass


class NotFoundError(TabprobeError, KeyError):
    pass


class CorruptionError(TabprobeError):
    pass


class BuildError(TabprobeError):
    pass


class SchemaError(BuildError):
    pass


class ProbeSizeError(TabprobeError):
    pass


class ComparisonError(TabprobeError):
    pass
