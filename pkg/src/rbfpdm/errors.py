"""Exception hierarchy shared by every module.

CLI exit codes are derived from the class: `ValidationError` subclasses map to
exit status 1, `NumericalError` subclasses to exit status 2.
"""


class PdmError(Exception):
    """Base class for all package errors."""


class ValidationError(PdmError, ValueError):
    """Bad input data, bad configuration, or a violated precondition."""


class MeshError(ValidationError):
    pass


class VolumeError(ValidationError):
    pass


class ParticleFileError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class GeodesyError(ValidationError):
    pass


class NumericalError(PdmError, ArithmeticError):
    """A computation produced a singular system or non-finite values."""


class RbfSolveError(NumericalError):
    pass
