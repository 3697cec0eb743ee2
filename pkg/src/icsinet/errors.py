"""Exception hierarchy shared by every icsinet module."""


class IcsinetError(Exception):
    """Base class for all package errors."""


class ShapeError(IcsinetError, ValueError):
    """Operand shapes are incompatible with an operation."""


class ContractError(IcsinetError, RuntimeError):
    """An operation was called outside its precondition."""


class ConfigError(IcsinetError, ValueError):
    """A configuration value or file is invalid."""


class InputError(IcsinetError, ValueError):
    """User supplied data (annotations, polygons, images) is unusable."""


class DegenerateTestError(IcsinetError, ValueError):
    """A statistical test is undefined for the given samples."""


class CheckpointError(IcsinetError):
    """A checkpoint file is corrupt, truncated, or of an unknown version."""


class NumericalError(IcsinetError, FloatingPointError):
    """Training produced a non-finite loss."""
