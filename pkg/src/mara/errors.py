"""Exception hierarchy shared across the package."""


class MaraError(Exception):
    pass


class InvalidConfig(MaraError, ValueError):
    pass


class InvalidInput(MaraError, ValueError):
    pass


class EmptyInput(InvalidInput):
    pass


class UnresolvablePayload(MaraError):
    pass


class ParseError(MaraError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DuplicateId(MaraError, ValueError):
    def __init__(self, doc_id):
        self.doc_id = doc_id
        super().__init__(f"duplicate document id {doc_id!r}")


# providers

class ProviderError(MaraError):
    pass


class ProviderUnavailable(ProviderError):
    pass


class ContextOverflow(ProviderError):
    pass


class DimensionMismatch(MaraError, ValueError):
    pass


class EmptyContent(MaraError, ValueError):
    pass


class ScriptExhausted(ProviderError):
    def __init__(self):
        super().__init__("script exhausted")


# index file format

class IndexFormatError(MaraError):
    pass


class BadMagic(IndexFormatError):
    pass


class Truncated(IndexFormatError):
    pass


class ChecksumMismatch(IndexFormatError):
    pass


class EmbeddingFailed(MaraError):
    """An embed call failed while building an index; carries the region address."""

    def __init__(self, doc_id, level, position, cause):
        self.doc_id = doc_id
        self.level = level
        self.position = position
        self.cause = cause
        where = level if position is None else f"{level} {position}"
        super().__init__(f"embedding failed for ({doc_id}, {where}): {cause}")


# scoring

class NonPositiveTemperature(MaraError, ValueError):
    pass


class ZeroVector(MaraError, ValueError):
    pass


class EmptyIndex(MaraError, ValueError):
    pass


class NoGateModel(MaraError):
    pass


# controller

class MissingBinding(MaraError, KeyError):
    def __init__(self, name):
        self.name = name
        super().__init__(name)

    def __str__(self):
        return f"missing binding for placeholder {{{self.name}}}"


class UnparseableSignal(MaraError, ValueError):
    pass


class SessionAborted(MaraError):
    """A provider error stopped a controller session; the session keeps its transcript."""

    def __init__(self, session, cause):
        self.session = session
        self.cause = cause
        super().__init__(f"session aborted after {session.generator_calls} calls: {cause}")


class EmptyPositives(MaraError, ValueError):
    pass
