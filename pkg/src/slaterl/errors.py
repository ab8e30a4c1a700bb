"""Exception types raised across the package."""


class SlateRLError(Exception):
    """Base class for all package errors."""


class ContractError(SlateRLError, ValueError):
    """A caller violated a documented precondition."""


class ParseError(SlateRLError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class SchemaError(ParseError):
    """A row has the wrong shape (e.g. slate length)."""


class ValidityError(ParseError):
    """A feedback pattern breaks the unlock rule."""

    def __init__(self, message, pattern=None, line=None):
        self.pattern = None if pattern is None else tuple(int(x) for x in pattern)
        super().__init__(message, line=line)


class IntegrityError(SlateRLError):
    """Session rows are inconsistent (gaps, conflicting user features)."""


class CatalogError(SlateRLError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class ConfigurationError(SlateRLError, ValueError):
    pass


class InvalidActionError(SlateRLError, ValueError):
    pass


class DivergenceError(SlateRLError, FloatingPointError):
    def __init__(self, message, epoch=None):
        self.epoch = epoch
        super().__init__(message)


class PropensityError(SlateRLError, ValueError):
    pass


class EnumerationSizeError(SlateRLError, ValueError):
    pass


class EmptyDataError(SlateRLError, ValueError):
    pass


class EpisodeError(SlateRLError):
    """An environment failure during evaluation, tagged with the episode index."""

    def __init__(self, message, episode):
        self.episode = episode
        super().__init__(f"episode {episode}: {message}")
