"""Exception hierarchy shared by every module."""


class VLMatchError(Exception):
    """Base class for all errors raised by vlmatch."""


class DimensionError(VLMatchError, ValueError):
    pass


class ParameterError(VLMatchError, ValueError):
    pass


class ValidationError(VLMatchError, ValueError):
    pass


class DegenerateInputError(VLMatchError, ValueError):
    pass


class StateError(VLMatchError, RuntimeError):
    pass


class GraphError(StateError):
    """Raised when a differentiation graph is reused after backward()."""


class FormatError(VLMatchError, ValueError):
    """Corrupt or truncated binary file."""


class VersionError(FormatError):
    pass
