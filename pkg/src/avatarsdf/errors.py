"""Exception types shared across the package."""


class AvatarError(Exception):
    """Base class for all package errors."""


class ParameterError(AvatarError, ValueError):
    """Invalid argument values (bad shapes, non-finite entries, out-of-range)."""


class InvariantError(AvatarError):
    """A structural invariant was violated (weights not row-stochastic, bad topology, ...)."""


class MalformedFileError(AvatarError):
    """A file could not be parsed in its declared format."""


class VersionMismatchError(AvatarError):
    """A file declares an unsupported format version."""


class DivergenceError(AvatarError):
    """Optimization diverged past the configured guard threshold."""
