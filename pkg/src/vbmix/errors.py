"""Exception hierarchy shared by all vbmix modules."""


class VbmixError(Exception):
    """Base class for library errors."""


class ValidationError(VbmixError, ValueError):
    """Input data or parameters violate a documented invariant."""


class VolumeFormatError(ValidationError):
    """A volume header/payload pair on disk is malformed or inconsistent."""


class NumericalError(VbmixError, ArithmeticError):
    """A numerical procedure failed (non-SPD matrix, non-finite value)."""


class SingularityError(NumericalError):
    """A matrix block is too ill-conditioned to factorize, even after jitter."""
