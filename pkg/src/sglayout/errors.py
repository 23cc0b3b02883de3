"""Exception types shared across the package."""


class SGLError(Exception):
    """Base class for all package errors."""


class DegenerateGeometry(SGLError, ValueError):
    pass


class EmptyMask(SGLError, ValueError):
    pass


class ShapeMismatch(SGLError, ValueError):
    pass


class ParseError(SGLError, ValueError):
    """Malformed input file; the message carries line or field context."""


class SceneRejected(SGLError):
    """The scene does not meet the object-count filter; callers skip it."""


class IncompleteNode(SGLError, ValueError):
    pass


class UnknownPredicate(SGLError, LookupError):
    pass


class UnknownVocab(SGLError, LookupError):
    pass


class NoRelations(SGLError, ValueError):
    pass


class NoForwardCache(SGLError, RuntimeError):
    pass


class EmptyDataset(SGLError, ValueError):
    pass
