"""Exception types shared across the toolkit."""


class RigKitError(Exception):
    """Base class for all rigkit-specific failures."""


class DegenerateInputError(RigKitError):
    """Geometry too degenerate to process (coincident points, empty mesh, ...)."""


class NumericalError(RigKitError):
    """A numeric computation produced unusable values (NaN/Inf, singular blend)."""


class DegenerateBlendError(NumericalError):
    """Dual-quaternion blend collapsed (near-zero real part, antipodal inputs)."""


class StateError(RigKitError):
    """An object was used in an invalid state (e.g. optimizer step without grads)."""


class ConfigError(RigKitError):
    """Inconsistent or invalid run configuration."""


class InputError(RigKitError):
    """Unreadable or malformed external input (mesh file, clip, checkpoint)."""
