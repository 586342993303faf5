"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class CodebookVLPError(Exception):
    exit_code = 3


class InputError(CodebookVLPError, ValueError):
    """Bad user-supplied data: images, captions, indices, paths."""

    exit_code = 1


class ConfigError(CodebookVLPError, ValueError):
    exit_code = 2


class ContractError(CodebookVLPError, ValueError):
    """A caller broke a shape or range precondition."""

    exit_code = 3


class NumericalError(CodebookVLPError, RuntimeError):
    exit_code = 3


class MaintenanceError(CodebookVLPError, RuntimeError):
    exit_code = 3


class SamplingError(InputError):
    pass
