"""Exception hierarchy. ``kind`` is what the CLI reports in ``error=...``."""


class CensusError(Exception):
    kind = "census"


class ArgumentError(CensusError, ValueError):
    kind = "argument"


class ConfigError(ArgumentError):
    kind = "config"


class ParseError(CensusError, ValueError):
    kind = "parse"

    def __init__(self, message, line=None, offset=None):
        super().__init__(message)
        self.line = line
        self.offset = offset


class SchemaError(ParseError):
    kind = "schema"


class ValidationError(CensusError, ValueError):
    kind = "validation"


class LookupFailure(CensusError, LookupError):
    kind = "lookup"


class StateError(CensusError, RuntimeError):
    kind = "state"


class UndefinedStatistic(CensusError, ArithmeticError):
    """Statistic undefined for the given data (zero variance, no truths, ...)."""

    kind = "undefined"


class DegenerateGeometry(CensusError, ValueError):
    kind = "geometry"


class EmptyRegion(CensusError, ValueError):
    kind = "empty-region"


class SamplingError(CensusError, RuntimeError):
    kind = "sampling"
