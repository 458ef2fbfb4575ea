class CharlineError(ValueError):
    """Base class for data and configuration errors raised by charline."""


class SceneParseError(CharlineError):
    pass


class SceneValidationError(CharlineError):
    pass


class ConfigError(CharlineError):
    pass


class SingularSystemError(CharlineError):
    pass


class DegeneratePolygonError(CharlineError):
    pass


class NonAdjacentPairsError(CharlineError):
    pass


class EmptySelectionError(CharlineError):
    pass
